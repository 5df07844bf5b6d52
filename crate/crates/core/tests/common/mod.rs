//! Checks shared by the integration tests and the acceptance runner. Each returns a one-line
//! summary on success and a description of the first violation on failure.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textseg_core::decoder::{attend, masked_attention, momentum_update, AttentionBlock, DecoderConfig, MASK_SENTINEL};
use textseg_core::heads::PredictionSet;
use textseg_core::loss::{bce_loss, dice_loss, total_loss, LossWeights, Target};
use textseg_core::matching::{cost_matrix, match_queries, min_cost_assignment, MatchWeights};
use textseg_core::metrics::{accumulate, f_score, fg_iou, ConfusionCounts};
use textseg_core::model::{Model, ModelConfig};
use textseg_core::params::ParamStore;
use textseg_core::render::scene::{MAX_PHRASES, MAX_ROTATION_DEG, MAX_WORDS};
use textseg_core::render::{
    bundled_font_dir, generate_dataset, sample_scene, Compositor, Corpus, FontInventory, GenerateConfig, Generator,
    SceneConfig,
};
use textseg_core::skeleton::{is_thinning_fixed_point, zhang_suen_thin};
use textseg_core::BinaryMask;

pub type Check = Result<String, String>;

const CPU: Device = Device::Cpu;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    vec_of(a).iter().zip(vec_of(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &CPU).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// Union of a few random discs and thick strokes.
pub fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::new(h, w);
    for _ in 0..rng.gen_range(1..=4) {
        let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        if rng.gen_bool(0.5) {
            let rad = rng.gen_range(1.5..6.0);
            for r in 0..h {
                for c in 0..w {
                    if (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= rad * rad {
                        m.set(r, c, true);
                    }
                }
            }
        } else {
            let (ty, tx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
            let half = rng.gen_range(1.0..3.0);
            let steps = 64;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (py, px) = (cy + t * (ty - cy), cx + t * (tx - cx));
                for r in 0..h {
                    for c in 0..w {
                        if (r as f64 - py).abs() <= half && (c as f64 - px).abs() <= half {
                            m.set(r, c, true);
                        }
                    }
                }
            }
        }
    }
    m
}

/// 8-connected components as lists of pixels, by flood fill.
pub fn components8(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) || seen[r * w + c] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            seen[r * w + c] = true;
            while let Some((y, x)) = stack.pop() {
                comp.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if m.get(ny, nx) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Textbook two-subpass thinning written directly from the neighbour templates, with
/// out-of-range neighbours read as background.
pub fn reference_thin(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.dims();
    let mut img = m.clone();
    let at = |img: &BinaryMask, r: i64, c: i64| -> u8 {
        (r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && img.get(r as usize, c as usize)) as u8
    };
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut del = Vec::new();
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    if at(&img, r, c) == 0 {
                        continue;
                    }
                    let p = [
                        at(&img, r - 1, c),
                        at(&img, r - 1, c + 1),
                        at(&img, r, c + 1),
                        at(&img, r + 1, c + 1),
                        at(&img, r + 1, c),
                        at(&img, r + 1, c - 1),
                        at(&img, r, c - 1),
                        at(&img, r - 1, c - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    let cond = if step == 0 {
                        p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0
                    } else {
                        p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        del.push((r as usize, c as usize));
                    }
                }
            }
            changed |= !del.is_empty();
            for (r, c) in del {
                img.set(r, c, false);
            }
        }
        if !changed {
            return img;
        }
    }
}

pub struct ThinningReport {
    pub blobs: usize,
    pub components: usize,
    /// `(blob, component size, mask)` for every component of at least 8 pixels left empty.
    pub annihilated: Vec<(usize, usize, String)>,
}

/// Subset, idempotence, fixed point, determinism, agreement with [`reference_thin`] and the
/// 5x5 golden. These are hard failures. Components of at least 8 pixels that end up with no
/// skeleton pixel are collected in the report.
pub fn zhang_suen_properties(blobs: usize) -> Result<ThinningReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut report = ThinningReport {
        blobs,
        components: 0,
        annihilated: Vec::new(),
    };
    for i in 0..blobs {
        let (h, w) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let m = random_blob(&mut rng, h, w);
        let t = zhang_suen_thin(&m);
        ensure(t.dims() == m.dims(), || format!("blob {i}: dims changed"))?;
        ensure(t.is_subset_of(&m), || format!("blob {i}: skeleton not a subset"))?;
        ensure(zhang_suen_thin(&t) == t, || format!("blob {i}: not idempotent"))?;
        ensure(is_thinning_fixed_point(&t), || format!("blob {i}: not a fixed point"))?;
        ensure(zhang_suen_thin(&m) == t, || format!("blob {i}: nondeterministic"))?;
        ensure(reference_thin(&m) == t, || format!("blob {i}: differs from reference\n{}", m.to_ascii()))?;
        for comp in components8(&m).into_iter().filter(|c| c.len() >= 8) {
            report.components += 1;
            if !comp.iter().any(|&(r, c)| t.get(r, c)) {
                let (r0, r1) = (comp.iter().map(|p| p.0).min().unwrap(), comp.iter().map(|p| p.0).max().unwrap());
                let (c0, c1) = (comp.iter().map(|p| p.1).min().unwrap(), comp.iter().map(|p| p.1).max().unwrap());
                let only = BinaryMask::from_fn(r1 - r0 + 1, c1 - c0 + 1, |r, c| comp.contains(&(r + r0, c + c0)));
                report.annihilated.push((i, comp.len(), only.to_ascii()));
            }
        }
    }
    let square = BinaryMask::from_fn(9, 9, |r, c| (2..=6).contains(&r) && (2..=6).contains(&c));
    let golden = BinaryMask::from_ascii(include_str!("../data/square5_in_9x9_skeleton.txt")).map_err(e)?;
    ensure(zhang_suen_thin(&square) == golden, || "5x5 square differs from golden".into())?;
    Ok(report)
}

/// The full criterion, non-annihilation included.
pub fn zhang_suen_suite(blobs: usize) -> Check {
    let r = zhang_suen_properties(blobs)?;
    if let Some((i, n, ascii)) = r.annihilated.first() {
        return Err(format!(
            "{} of {} components >= 8 px annihilated (also by the reference implementation); first: blob {i}, {n} px\n{ascii}",
            r.annihilated.len(),
            r.components
        ));
    }
    Ok(format!(
        "{} blobs, {} components >= 8 px survive, reference agrees, golden matches",
        r.blobs, r.components
    ))
}

/// Global counts by direct pixel loops, independent of the library.
fn brute_counts(pairs: &[(BinaryMask, BinaryMask)]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pairs {
        for (&a, &b) in p.data().iter().zip(g.data()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

fn oracle_scores(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    if tp + fp + fn_ == 0 {
        return (100.0, 1.0);
    }
    let iou = 100.0 * tp as f64 / (tp + fp + fn_) as f64;
    // F as 2tp / (2tp + fp + fn); equals the harmonic mean of precision and recall
    let f = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    (iou, f)
}

pub fn metric_oracle(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut cases: Vec<(BinaryMask, BinaryMask)> = Vec::new();
    let empty = BinaryMask::new(6, 7);
    let some = BinaryMask::from_fn(6, 7, |r, c| (r + c) % 3 == 0);
    cases.push((empty.clone(), empty.clone()));
    cases.push((empty.clone(), some.clone()));
    cases.push((some.clone(), empty.clone()));
    cases.push((some.clone(), some.clone()));
    while cases.len() < pairs {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let (pp, pg) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        cases.push((random_mask(&mut rng, h, w, pp), random_mask(&mut rng, h, w, pg)));
    }
    for (i, pair) in cases.iter().enumerate() {
        let c = accumulate(&pair.0, &pair.1, ConfusionCounts::default()).map_err(e)?;
        let (tp, fp, fn_) = brute_counts(std::slice::from_ref(pair));
        let tn = pair.0.data().len() as u64 - tp - fp - fn_;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || format!("pair {i}: counts differ"))?;
        let (iou, f) = oracle_scores(tp, fp, fn_);
        ensure(fg_iou(&c) == iou, || format!("pair {i}: fgIoU {} vs {iou}", fg_iou(&c)))?;
        ensure(f_score(&c) == f, || format!("pair {i}: F {} vs {f}", f_score(&c)))?;
        if tp > 0 {
            let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
            ensure((2.0 * p * r / (p + r) - f).abs() <= 1e-12, || format!("pair {i}: F not the harmonic mean"))?;
        }
    }
    let mut total = ConfusionCounts::default();
    for (p, g) in &cases {
        total = accumulate(p, g, total).map_err(e)?;
    }
    let (tp, fp, fn_) = brute_counts(&cases);
    ensure((total.tp, total.fp, total.fn_) == (tp, fp, fn_), || "global counts differ".into())?;
    Ok(format!("{} pairs incl. empty/empty, empty/full, full/empty", cases.len()))
}

fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n, k - 1) {
        for x in 0..n {
            if !p.contains(&x) {
                let mut q = p.clone();
                q.push(x);
                out.push(q);
            }
        }
    }
    out
}

fn random_prediction(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> PredictionSet {
    PredictionSet {
        class_logits: rand_tensor(rng, &[1, n, 2], 2.0),
        mask_logits: rand_tensor(rng, &[1, n, h, w], 3.0),
        skeleton_logits: None,
    }
}

/// Matching against exhaustive enumeration of all injective gt -> query assignments.
pub fn matching_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let weights = MatchWeights::default();
    let mut unique = 0;
    for i in 0..instances {
        let n = rng.gen_range(1..=5);
        let g = rng.gen_range(0..=n.min(3));
        let pred = random_prediction(&mut rng, n, 4, 4);
        let gts: Vec<BinaryMask> = (0..g).map(|_| random_mask(&mut rng, 8, 8, 0.4)).collect();
        let cost = cost_matrix(&pred, &gts, weights).map_err(e)?;
        let matched = match_queries(&pred, &gts, weights).map_err(e)?;
        if g == 0 {
            ensure(matched.is_empty(), || format!("instance {i}: matches without gt"))?;
            continue;
        }
        let mut costs: Vec<(f64, Vec<usize>)> = permutations(n, g)
            .into_iter()
            .map(|p| (p.iter().enumerate().map(|(gi, &q)| cost[gi][q]).sum(), p))
            .collect();
        costs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (best, ref best_perm) = costs[0];
        let mut got = vec![usize::MAX; g];
        for &(q, gi) in &matched {
            got[gi] = q;
        }
        let got_cost: f64 = got.iter().enumerate().map(|(gi, &q)| cost[gi][q]).sum();
        ensure((got_cost - best).abs() <= 1e-9 * best.abs().max(1.0), || {
            format!("instance {i}: cost {got_cost} vs optimum {best}")
        })?;
        if costs.len() == 1 || costs[1].0 - best > 1e-9 {
            unique += 1;
            ensure(&got == best_perm, || format!("instance {i}: assignment {got:?} vs {best_perm:?}"))?;
        }
        ensure(min_cost_assignment(&cost).map_err(e)? == got, || format!("instance {i}: solver disagreement"))?;
    }
    Ok(format!("{instances} instances (N_q <= 5, gt <= 3), {unique} with unique optimum matched exactly"))
}

/// Phrase count, words per phrase and rotation bounds over sampled scenes, and byte-identical
/// archives for a fixed master seed.
pub fn render_bounds(scenes: usize, scratch: &Path) -> Check {
    let fonts = FontInventory::load_dir(bundled_font_dir()).map_err(e)?;
    let corpus = Corpus::builtin();
    let cfg = SceneConfig::default();
    for s in 0..scenes {
        let scene = sample_scene(&corpus, &fonts, (128, 128), s as u64, &cfg).map_err(e)?;
        let n = scene.phrases.len();
        ensure((1..=MAX_PHRASES).contains(&n), || format!("scene {s}: {n} phrases"))?;
        for p in &scene.phrases {
            let words = p.word_count();
            ensure((1..=MAX_WORDS).contains(&words), || format!("scene {s}: {words} words"))?;
            ensure(p.rotation_deg.abs() <= MAX_ROTATION_DEG, || format!("scene {s}: rotation {}", p.rotation_deg))?;
        }
    }
    let config = GenerateConfig {
        master_seed: 77,
        ..GenerateConfig::default()
    };
    let compositor = Compositor::default();
    let generator = Generator {
        corpus: &corpus,
        fonts: &fonts,
        compositor: &compositor,
        config: &config,
    };
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    generate_dataset(6, &a, &generator).map_err(e)?;
    generate_dataset(6, &b, &generator).map_err(e)?;
    let files = tree_bytes(&a);
    ensure(files.len() > 6 * 3, || format!("archive has only {} files", files.len()))?;
    ensure(files == tree_bytes(&b), || "archives differ between runs".into())?;
    Ok(format!("{scenes} scenes within bounds, {} archive files byte-identical", files.len()))
}

pub fn tree_bytes(root: &Path) -> HashMap<String, Vec<u8>> {
    let mut out = HashMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Zero bias equals no bias, one-hot bias selects a value row, and a 2x3 instance agrees with
/// hand-written softmax attention.
pub fn attention_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, n, p, c) = (2, 4, 6, 5);
    let q = rand_tensor(&mut rng, &[b, n, c], 1.0);
    let k = rand_tensor(&mut rng, &[b, p, c], 1.0);
    let v = rand_tensor(&mut rng, &[b, p, c], 1.0);
    let zero = Tensor::zeros((b, n, p), DType::F64, &CPU).map_err(e)?;
    let d = max_abs_diff(&attend(&q, &k, &v, Some(&zero)).map_err(e)?, &attend(&q, &k, &v, None).map_err(e)?);
    ensure(d <= 1e-6, || format!("zero bias differs from unmasked by {d}"))?;

    // one-hot rows: query i of batch j may only see key (i + j) mod p
    let mut bias = vec![MASK_SENTINEL; b * n * p];
    for j in 0..b {
        for i in 0..n {
            bias[(j * n + i) * p + (i + j) % p] = 0.0;
        }
    }
    let bias = Tensor::from_vec(bias, (b, n, p), &CPU).map_err(e)?;
    let out = attend(&q, &k, &v, Some(&bias)).map_err(e)?;
    for j in 0..b {
        for i in 0..n {
            let row = out.get(j).and_then(|t| t.get(i)).map_err(e)?;
            let want = v.get(j).and_then(|t| t.get((i + j) % p)).map_err(e)?;
            let d = max_abs_diff(&row, &want);
            ensure(d <= 1e-6, || format!("one-hot row ({j},{i}) off by {d}"))?;
        }
    }

    // the same identities through the full sub-block
    let mut store = ParamStore::new(8, DType::F64);
    let block = AttentionBlock::new(&mut store.scope("t"), "cross", c).map_err(e)?;
    let qpos = rand_tensor(&mut rng, &[n, c], 1.0);
    let kpos = rand_tensor(&mut rng, &[p, c], 1.0);
    let with_zero = masked_attention(&block, &q, &qpos, &k, &kpos, Some(&zero)).map_err(e)?;
    let unmasked = masked_attention(&block, &q, &qpos, &k, &kpos, None).map_err(e)?;
    let d = max_abs_diff(&with_zero.output, &unmasked.output);
    ensure(d <= 1e-6, || format!("masked_attention zero bias differs by {d}"))?;
    let sel = masked_attention(&block, &q, &qpos, &k, &kpos, Some(&bias)).map_err(e)?;
    let vproj = block.wv.forward(&k).map_err(e)?;
    for j in 0..b {
        for i in 0..n {
            let row = sel.attended.get(j).and_then(|t| t.get(i)).map_err(e)?;
            let want = vproj.get(j).and_then(|t| t.get((i + j) % p)).map_err(e)?;
            let d = max_abs_diff(&row, &want);
            ensure(d <= 1e-6, || format!("masked_attention one-hot ({j},{i}) off by {d}"))?;
        }
    }

    // 2 queries x 3 keys, C = 2, key 2 masked for query 0
    let qv = [[1.0, 0.0], [0.5, -1.0]];
    let kv = [[1.0, 1.0], [0.0, 2.0], [-1.0, 0.5]];
    let vv = [[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]];
    let mask = [[0.0, 0.0, MASK_SENTINEL], [0.0, 0.0, 0.0]];
    let mut expected = [[0.0; 2]; 2];
    for i in 0..2 {
        let s: Vec<f64> = (0..3)
            .map(|j| (qv[i][0] * kv[j][0] + qv[i][1] * kv[j][1]) / 2f64.sqrt() + mask[i][j])
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        for j in 0..3 {
            for d in 0..2 {
                expected[i][d] += ex[j] / z * vv[j][d];
            }
        }
    }
    let t = |rows: &[[f64; 2]], r: usize| Tensor::from_vec(rows.concat(), (1, r, 2), &CPU).unwrap();
    let bias = Tensor::from_vec(mask.concat(), (1, 2, 3), &CPU).map_err(e)?;
    let got = attend(&t(&qv, 2), &t(&kv, 3), &t(&vv, 3), Some(&bias)).map_err(e)?;
    let got = vec_of(&got);
    for (g, w) in got.iter().zip(expected.concat()) {
        ensure((g - w).abs() <= 1e-12, || format!("2x3 instance: {got:?} vs {expected:?}"))?;
    }
    Ok("zero bias, one-hot selection and 2x3 hand instance agree".into())
}

fn tiny_model_config(layers: usize, queries: usize, channels: usize, lmq: bool, alpha: f64) -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig {
            num_layers: layers,
            num_queries: queries,
            momentum_alpha: alpha,
            lmq_enabled: lmq,
            channel_dim: channels,
        },
        skeleton_enabled: true,
        mask_stride: 4,
    }
}

/// LMQ with α = 0 equals the plain decoder, and the recurrence matches its closed form.
pub fn lmq_reduction(instances: usize) -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let layers = rng.gen_range(1..=6);
        let nq = rng.gen_range(1..=6);
        let on = Model::new(&tiny_model_config(layers, nq, 8, true, 0.0), i as u64, DType::F64).map_err(e)?;
        let off = Model::new(&tiny_model_config(layers, nq, 8, false, 0.8), i as u64, DType::F64).map_err(e)?;
        let img = rand_tensor(&mut rng, &[1, 32, 32, 3], 1.0).affine(0.5, 0.5).map_err(e)?;
        let a = on.forward(&img).map_err(e)?;
        let b = off.forward(&img).map_err(e)?;
        for (pa, pb) in a.predictions.iter().zip(&b.predictions) {
            worst = worst.max(max_abs_diff(&pa.mask_logits, &pb.mask_logits));
            worst = worst.max(max_abs_diff(&pa.class_logits, &pb.class_logits));
        }
        for (sa, sb) in a.states.iter().zip(&b.states) {
            worst = worst.max(max_abs_diff(&sa.queries, &sb.queries));
        }
        ensure(worst <= 1e-6, || format!("instance {i}: alpha=0 differs from plain decoder by {worst}"))?;
    }

    let mut worst_tel: f64 = 0.0;
    for (i, alpha) in [0.1, 0.5, 0.8, 0.95].into_iter().enumerate() {
        let m = Model::new(&tiny_model_config(5, 3, 8, true, alpha), 40 + i as u64, DType::F64).map_err(e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let img = rand_tensor(&mut rng, &[2, 32, 32, 3], 1.0).affine(0.5, 0.5).map_err(e)?;
        let out = m.forward(&img).map_err(e)?;
        let q0 = &out.states[0].momentum_query;
        for l in 1..out.states.len() {
            // MQ_{l+1} = α^l Q_0 + Σ_{k=1..l} (1-α) α^{l-k} MA_k
            let mut closed = (q0 * alpha.powi(l as i32)).map_err(e)?;
            for k in 1..=l {
                let ma = out.states[k].masked_output.as_ref().ok_or("missing MA")?;
                closed = (closed + (ma * ((1.0 - alpha) * alpha.powi((l - k) as i32))).map_err(e)?).map_err(e)?;
            }
            let d = max_abs_diff(&closed, &out.states[l].momentum_query);
            worst_tel = worst_tel.max(d);
            ensure(d <= 1e-6, || format!("alpha {alpha}, layer {l}: closed form off by {d}"))?;
        }
    }
    Ok(format!(
        "{instances} instances max diff {worst:.1e}; telescoped form max diff {worst_tel:.1e}"
    ))
}

/// Relative error with a small absolute floor so that exact zeros compare cleanly.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

struct GradReport {
    checked: usize,
    worst: f64,
}

/// Compares analytic gradients of `f` with central differences on up to `per_var` entries of
/// each variable.
fn check_vars(vars: &[(String, Var)], per_var: usize, f: &dyn Fn() -> Tensor) -> Result<GradReport, String> {
    const H: f64 = 1e-5;
    let loss = f();
    let grads = loss.backward().map_err(e)?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => vec_of(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = vec_of(var.as_tensor());
        let shape = var.dims().to_vec();
        let count = base.len();
        let stride = (count / per_var).max(1);
        for idx in (0..count).step_by(stride).take(per_var) {
            let eval = |delta: f64| -> f64 {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &CPU).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &CPU).unwrap()).unwrap();
            let r = rel_err(analytic[idx], numeric);
            worst = worst.max(r);
            checked += 1;
            if r > 1e-3 {
                return Err(format!(
                    "{name}[{idx}]: analytic {:.6e} vs numeric {numeric:.6e} (rel {r:.2e})",
                    analytic[idx]
                ));
            }
        }
    }
    Ok(GradReport { checked, worst })
}

fn var(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Var {
    Var::from_tensor(&rand_tensor(rng, shape, scale)).unwrap()
}

pub fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut summary = Vec::new();
    let mut record = |name: &str, r: GradReport| summary.push(format!("{name} {} (max {:.1e})", r.checked, r.worst));

    // bce and dice on a plane
    let target = random_mask(&mut rng, 6, 5, 0.4);
    let logits = var(&mut rng, &[6, 5], 3.0);
    let vars = vec![("logits".to_owned(), logits.clone())];
    let r = check_vars(&vars, 30, &|| bce_loss(logits.as_tensor(), &target).unwrap()).map_err(|m| format!("bce: {m}"))?;
    record("bce", r);
    let r = check_vars(&vars, 30, &|| dice_loss(logits.as_tensor(), &target).unwrap()).map_err(|m| format!("dice: {m}"))?;
    record("dice", r);

    // masked attention, with a partly masked bias
    let (b, n, p, c) = (2, 3, 7, 4);
    let mut store = ParamStore::new(11, DType::F64);
    let block = AttentionBlock::new(&mut store.scope("g"), "cross", c).map_err(e)?;
    let q = var(&mut rng, &[b, n, c], 1.0);
    let feats = var(&mut rng, &[b, p, c], 1.0);
    let qpos = var(&mut rng, &[n, c], 1.0);
    let kpos = rand_tensor(&mut rng, &[p, c], 1.0);
    let mut bias = vec![0.0; b * n * p];
    for (i, x) in bias.iter_mut().enumerate() {
        if i % 3 == 1 {
            *x = MASK_SENTINEL;
        }
    }
    let bias = Tensor::from_vec(bias, (b, n, p), &CPU).map_err(e)?;
    let weights_out = rand_tensor(&mut rng, &[b, n, c], 1.0);
    let mut vars: Vec<(String, Var)> = store.named_vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.push(("queries".into(), q.clone()));
    vars.push(("features".into(), feats.clone()));
    vars.push(("query_pos".into(), qpos.clone()));
    let r = check_vars(&vars, 6, &|| {
        let out = masked_attention(&block, q.as_tensor(), qpos.as_tensor(), feats.as_tensor(), &kpos, Some(&bias)).unwrap();
        (out.output * &weights_out).unwrap().sum_all().unwrap()
    })
    .map_err(|m| format!("masked_attention: {m}"))?;
    record("masked_attention", r);

    // momentum update
    let mq = var(&mut rng, &[2, 3, 4], 1.0);
    let ma = var(&mut rng, &[2, 3, 4], 1.0);
    let w = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let vars = vec![("mq".to_owned(), mq.clone()), ("ma".to_owned(), ma.clone())];
    let r = check_vars(&vars, 24, &|| {
        (momentum_update(mq.as_tensor(), ma.as_tensor(), 0.8).unwrap() * &w).unwrap().sum_all().unwrap()
    })
    .map_err(|m| format!("momentum_update: {m}"))?;
    record("momentum_update", r);

    // total loss over two prediction sets of a batch of two, one image without text
    let (bn, nq, h, wd) = (2, 3, 4, 4);
    let sets: Vec<(Var, Var, Var)> = (0..2)
        .map(|_| {
            (
                var(&mut rng, &[bn, nq, 2], 1.0),
                var(&mut rng, &[bn, nq, h, wd], 2.0),
                var(&mut rng, &[bn, nq, h, wd], 2.0),
            )
        })
        .collect();
    let gt = random_blob(&mut rng, 16, 16);
    let targets = vec![
        Target {
            masks: vec![gt.clone()],
            skeletons: vec![zhang_suen_thin(&gt)],
        },
        Target::default(),
    ];
    let mut vars = Vec::new();
    for (i, (cl, m, s)) in sets.iter().enumerate() {
        vars.push((format!("class{i}"), cl.clone()));
        vars.push((format!("mask{i}"), m.clone()));
        vars.push((format!("skeleton{i}"), s.clone()));
    }
    let r = check_vars(&vars, 12, &|| {
        let preds: Vec<PredictionSet> = sets
            .iter()
            .map(|(cl, m, s)| PredictionSet {
                class_logits: cl.as_tensor().clone(),
                mask_logits: m.as_tensor().clone(),
                skeleton_logits: Some(s.as_tensor().clone()),
            })
            .collect();
        total_loss(&preds, &targets, &LossWeights::default()).unwrap().total
    })
    .map_err(|m| format!("total_loss: {m}"))?;
    record("total_loss", r);

    // full path: 32x32 image (8x8 pixel embedding), 3 queries, 2 decoder layers
    let model = Model::new(&tiny_model_config(2, 3, 8, true, 0.8), 5, DType::F64).map_err(e)?;
    let image = Var::from_tensor(&rand_tensor(&mut rng, &[1, 32, 32, 3], 0.5).affine(1.0, 0.5).map_err(e)?).map_err(e)?;
    let gt = random_blob(&mut rng, 32, 32);
    let targets = vec![Target {
        masks: vec![gt.clone()],
        skeletons: vec![zhang_suen_thin(&gt)],
    }];
    let mut vars: Vec<(String, Var)> = model.params.named_vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.push(("image".into(), image.clone()));
    let r = check_vars(&vars, 3, &|| {
        let out = model.forward(image.as_tensor()).unwrap();
        total_loss(&out.predictions, &targets, &LossWeights::default()).unwrap().total
    })
    .map_err(|m| format!("full path: {m}"))?;
    record("full path", r);

    Ok(summary.join("; "))
}
