//! Small differentiable building blocks on top of candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};
use crate::patches::im2col;

/// `y = x W^T + b` over the last dimension; `W` is `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let mut s = scope.scope(name);
        Ok(Self {
            weight: s.param("weight", &[d_out, d_in], init)?,
            bias: s.param("bias", &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = scope.scope(name);
        Ok(Self {
            gamma: s.param("gamma", &[dim], Init::Ones)?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// 2-D convolution over channels-last `(B, H, W, C)` tensors with square kernels, lowered to
/// patch extraction plus one matrix product. The weight is `(k·k·C_in, C_out)` with rows
/// ordered by kernel row, kernel column, input channel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut s = scope.scope(name);
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: s.param("weight", &[fan_in, c_out], Init::kaiming(fan_in))?,
            bias: s.param("bias", &[c_out], Init::Zeros)?,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let patches = if k == 1 && s == 1 {
            x.clone()
        } else {
            im2col(x, k, s, p)?
        };
        let (_, ho, wo, kc) = patches.dims4()?;
        if kc != k * k * c || (k == 1 && (ho, wo) != (h, w)) {
            return Err(Error::Shape(format!("conv input {:?}", x.dims())));
        }
        let y = add_row_bias(&patches.reshape((b * ho * wo, kc))?.matmul(&self.weight)?, &self.bias)?;
        Ok(y.reshape((b, ho, wo, self.weight.dim(1)?))?)
    }
}

/// `y + 1 bᵀ` for `y` of shape `(M, N)`, written as a product so the bias gradient is a
/// matrix product as well.
pub fn add_row_bias(y: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = y.dims2()?;
    let ones = Tensor::ones((m, 1), y.dtype(), y.device())?;
    Ok((y + ones.matmul(&bias.reshape((1, n))?)?)?)
}

/// Nearest-neighbour 2x upsampling of a channels-last tensor.
pub fn upsample2_nhwc(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Feed-forward stack with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(scope: &mut Scope<'_>, name: &str, dims: &[usize]) -> Result<Self> {
        let mut s = scope.scope(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut s, &format!("{i}"), w[0], w[1], Init::kaiming(w[0])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Row-stochastic `(out, in)` matrix of 1-D bilinear resampling with half-pixel centres
/// (the `align_corners = false` convention, no anti-aliasing).
pub fn interp_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - w1;
        m[i * in_len + i1] += w1;
    }
    m
}

/// Bilinearly resamples the last two dimensions of `x` to `(height, width)`.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::Shape(format!("resize needs >= 2 dims, got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let device = x.device();
    let ay = Tensor::from_vec(interp_matrix(height, h), (height, h), device)?.to_dtype(x.dtype())?;
    let axt = Tensor::from_vec(interp_matrix(width, w), (width, w), device)?
        .to_dtype(x.dtype())?
        .t()?;
    // (.., h, w) x (w, W) -> (.., h, W); then (H, h) x (.., h, W) -> (.., H, W)
    let rows = x.broadcast_matmul(&axt)?;
    Ok(ay.broadcast_matmul(&rows)?)
}

/// Plain `f64` version of [`resize_bilinear`] for one `(h, w)` plane.
pub fn resize_bilinear_plane(plane: &[f64], h: usize, w: usize, height: usize, width: usize) -> Vec<f64> {
    if (h, w) == (height, width) {
        return plane.to_vec();
    }
    let ay = interp_matrix(height, h);
    let ax = interp_matrix(width, w);
    let mut rows = vec![0.0; h * width];
    for r in 0..h {
        for c in 0..width {
            let mut acc = 0.0;
            for k in 0..w {
                acc += plane[r * w + k] * ax[c * w + k];
            }
            rows[r * width + c] = acc;
        }
    }
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        for k in 0..h {
            let a = ay[r * h + k];
            if a == 0.0 {
                continue;
            }
            for c in 0..width {
                out[r * width + c] += a * rows[k * width + c];
            }
        }
    }
    out
}

/// Fixed 2-D sinusoidal position code, `(h * w, channels)` row-major over positions. The
/// first half of the channels encodes the row, the second half the column.
pub fn sine_position_code(h: usize, w: usize, channels: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = channels / 2;
    let mut data = vec![0.0f64; h * w * channels];
    let norm = std::f64::consts::TAU;
    for r in 0..h {
        for c in 0..w {
            let y = (r as f64 + 0.5) / h as f64 * norm;
            let x = (c as f64 + 0.5) / w as f64 * norm;
            let base = (r * w + c) * channels;
            for k in 0..channels {
                let (coord, j) = if k < half { (y, k) } else { (x, k - half) };
                let span = if k < half { half } else { channels - half };
                let f = 10_000f64.powf(2.0 * (j / 2) as f64 / span.max(1) as f64);
                let v = coord / f;
                data[base + k] = if j % 2 == 0 { v.sin() } else { v.cos() };
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, channels), device)?.to_dtype(dtype)?)
}

/// Errors when any element of `t` is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_owned()))
    }
}

/// Numerically stable softmax over the last dimension (differentiable).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Numerically stable log-softmax over the last dimension (differentiable).
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_rows_sum_to_one() {
        for (o, i) in [(2, 4), (4, 2), (128, 32), (4, 32), (5, 3)] {
            let m = interp_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halving_averages_blocks() {
        let m = interp_matrix(2, 4);
        assert_eq!(m, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn tensor_and_plane_resize_agree() {
        let plane: Vec<f64> = (0..12).map(|v| (v as f64 * 0.7).sin()).collect();
        let t = Tensor::from_vec(plane.clone(), (1, 3, 4), &Device::Cpu).unwrap();
        let a = resize_bilinear(&t, 7, 5).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = resize_bilinear_plane(&plane, 3, 4, 7, 5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-1000.0f64, 0.0, 1000.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y[0].abs() < 1e-300);
        assert!((y[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((y[2] - 1000.0).abs() < 1e-12);
    }
}
