//! Patch extraction (im2col) for channels-last convolutions, with its adjoint as the backward
//! pass.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols_shape(&self) -> Shape {
        Shape::from((self.b, self.ho, self.wo, self.k * self.k * self.c))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.b, self.h, self.w, self.c))
    }

    /// Calls `f(image_offset, cols_offset)` for every in-bounds channel run of length `c`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize)) {
        let g = self;
        let kc = g.k * g.k * g.c;
        for b in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let col_base = ((b * g.ho + oy) * g.wo + ox) * kc;
                    for dy in 0..g.k {
                        let y = (oy * g.stride + dy) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for dx in 0..g.k {
                            let x = (ox * g.stride + dx) as isize - g.pad as isize;
                            if x < 0 || x >= g.w as isize {
                                continue;
                            }
                            let img = ((b * g.h + y as usize) * g.w + x as usize) * g.c;
                            f(img, col_base + (dy * g.k + dx) * g.c);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.cols_shape().elem_count()];
        let c = self.c;
        self.for_each_run(|i, o| out[o..o + c].copy_from_slice(&src[i..i + c]));
        out
    }

    fn col2im<T: Copy + Default + AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.image_shape().elem_count()];
        let c = self.c;
        self.for_each_run(|i, o| {
            for (d, s) in out[i..i + c].iter_mut().zip(&cols[o..o + c]) {
                *d += *s;
            }
        });
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, g.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, g.image_shape()))
    }
}

/// `(B, H, W, C)` to `(B, Ho, Wo, k·k·C)` patches for a `k x k` kernel with the given stride
/// and zero padding. Columns are ordered by kernel row, kernel column, channel.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        candle_core::bail!("input {h}x{w} too small for kernel {k}");
    }
    let g = Geometry {
        b,
        h,
        w,
        c,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    };
    x.contiguous()?.apply_op1(Im2Col(g))
}
