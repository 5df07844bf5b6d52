//! Query decoder with masked cross-attention and layer-wise momentum queries.
//!
//! Layer `l >= 1` runs, in order:
//!
//! ```text
//! MA_l     = X_{l-1} + Wo · softmax(M_l + (q Kᵀ)/√C) V        masked cross-attention
//! MQ_{l+1} = α · MQ_l + (1 - α) · MA_l                          momentum update, MQ_1 = Q_0
//! S        = MQ_{l+1} + SelfAttn(LN(MQ_{l+1}))                   (MA_l instead when disabled)
//! X_l      = S + FFN(LN(S))
//! ```
//!
//! Every sub-block is pre-normalized. `M_l` is derived from the previous layer's mask logits.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Heads, PredictionSet};
use crate::nn::{ensure_finite, resize_bilinear_plane, sine_position_code, softmax_last, LayerNorm, Linear, Mlp};
use crate::params::{Init, Scope};
use crate::pixel::{FeaturePyramid, NUM_LEVELS};

/// Finite stand-in for `-inf` in attention biases.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_queries: usize,
    #[serde(rename = "alpha")]
    pub momentum_alpha: f64,
    pub lmq_enabled: bool,
    pub channel_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 9,
            num_queries: 20,
            momentum_alpha: 0.8,
            lmq_enabled: true,
            channel_dim: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.momentum_alpha)?;
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be >= 1".into()));
        }
        if self.channel_dim == 0 {
            return Err(Error::Config("channel_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("momentum alpha {alpha} outside [0, 1)")))
    }
}

/// Decoder state after layer `layer_index`. Tensors are batched: `(B, N_q, C)`.
#[derive(Clone, Debug)]
pub struct QueryState {
    pub layer_index: usize,
    /// `X_l`, the layer output (for layer 0, the learned initial queries).
    pub queries: Tensor,
    /// Momentum carried into the next layer, `MQ_{l+1}`. Layer 0 holds `MQ_1 = Q_0`.
    /// When momentum is disabled this is `MA_l`.
    pub momentum_query: Tensor,
    /// `M_l`, `(B, N_q, h·w)`; `None` for layer 0.
    pub attention_bias: Option<Tensor>,
    /// `MA_l`; `None` for layer 0.
    pub masked_output: Option<Tensor>,
}

/// Single-head attention sub-block with pre-normalization.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionBlock {
    pub fn new(scope: &mut Scope<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = scope.scope(name);
        let init = Init::xavier(c, c);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", c)?,
            wq: Linear::new(&mut s, "q", c, c, init)?,
            wk: Linear::new(&mut s, "k", c, c, init)?,
            wv: Linear::new(&mut s, "v", c, c, init)?,
            wo: Linear::new(&mut s, "o", c, c, init)?,
        })
    }
}

/// `softmax(bias + q kᵀ / √C) v` over the last axis of the scores. Shapes `(B, N, C)`,
/// `(B, P, C)`, `(B, P, C)` and optional bias `(B, N, P)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let c = q.dim(2)?;
    if k.dim(2)? != c || k.dims() != v.dims() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let mut scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
    if let Some(b) = bias {
        let (bq, n, _) = q.dims3()?;
        let p = k.dim(1)?;
        if b.dims() != [bq, n, p] {
            return Err(Error::Shape(format!(
                "attention bias {:?}, expected {:?}",
                b.dims(),
                [bq, n, p]
            )));
        }
        scores = (scores + b)?;
    }
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// Result of one masked cross-attention sub-block.
#[derive(Clone, Debug)]
pub struct MaskedAttentionOutput {
    /// Residual output `MA_l`.
    pub output: Tensor,
    /// Attention-weighted value projections, before the output projection and residual.
    pub attended: Tensor,
}

/// Masked cross-attention of `queries` over `features` (`(B, P, C)`). `query_pos` is added to
/// the normalized queries, `key_pos` (`(P, C)` or `(B, P, C)`) to the keys only.
pub fn masked_attention(
    block: &AttentionBlock,
    queries: &Tensor,
    query_pos: &Tensor,
    features: &Tensor,
    key_pos: &Tensor,
    bias: Option<&Tensor>,
) -> Result<MaskedAttentionOutput> {
    if queries.rank() != 3 || features.rank() != 3 || queries.dim(2)? != features.dim(2)? {
        return Err(Error::Shape(format!(
            "queries {:?} vs features {:?}",
            queries.dims(),
            features.dims()
        )));
    }
    ensure_finite(queries, "attention queries")?;
    ensure_finite(features, "attention features")?;
    let q = block.wq.forward(&block.norm.forward(queries)?.broadcast_add(query_pos)?)?;
    let k = block.wk.forward(&features.broadcast_add(key_pos)?)?;
    let v = block.wv.forward(features)?;
    let attended = attend(&q, &k, &v, bias)?;
    let output = (queries + block.wo.forward(&attended)?)?;
    Ok(MaskedAttentionOutput { output, attended })
}

/// Self-attention among queries with the residual added.
fn self_attention(block: &AttentionBlock, x: &Tensor, query_pos: &Tensor) -> Result<Tensor> {
    let normed = block.norm.forward(x)?;
    let h = normed.broadcast_add(query_pos)?;
    let q = block.wq.forward(&h)?;
    let k = block.wk.forward(&h)?;
    let v = block.wv.forward(&normed)?;
    Ok((x + block.wo.forward(&attend(&q, &k, &v, None)?)?)?)
}

/// Attention bias for one `(h, w)` logit plane resized to `(th, tw)`: 0 where the resized logit
/// is positive (sigmoid > 0.5), [`MASK_SENTINEL`] elsewhere. An all-masked result becomes all 0.
pub fn bias_from_mask_plane(logits: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let resized = resize_bilinear_plane(logits, h, w, th, tw);
    let mut bias: Vec<f64> = resized
        .iter()
        .map(|&x| if x > 0.0 { 0.0 } else { MASK_SENTINEL })
        .collect();
    if bias.iter().all(|&b| b != 0.0) {
        bias.fill(0.0);
    }
    bias
}

/// Batched [`bias_from_mask_plane`]: `(B, N, h, w)` logits to a `(B, N, th·tw)` bias.
/// Gradients do not flow through the bias.
pub fn bias_from_mask(mask_logits: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (b, n, h, w) = mask_logits.dims4()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape("bias target resolution must be >= 1x1".into()));
    }
    let values = mask_logits
        .detach()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b * n * th * tw);
    for plane in values.chunks(h * w) {
        out.extend(bias_from_mask_plane(plane, h, w, th, tw));
    }
    Ok(Tensor::from_vec(out, (b, n, th * tw), mask_logits.device())?.to_dtype(mask_logits.dtype())?)
}

/// `α · mq_prev + (1 - α) · ma_current`.
pub fn momentum_update(mq_prev: &Tensor, ma_current: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if mq_prev.dims() != ma_current.dims() {
        return Err(Error::Shape(format!(
            "momentum {:?} vs masked output {:?}",
            mq_prev.dims(),
            ma_current.dims()
        )));
    }
    Ok(((mq_prev * alpha)? + (ma_current * (1.0 - alpha))?)?)
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: AttentionBlock,
    pub self_attn: AttentionBlock,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

pub struct Decoder {
    pub config: DecoderConfig,
    pub query_feat: Tensor,
    pub query_pos: Tensor,
    pub level_embed: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub output_norm: LayerNorm,
}

/// Pyramid level consumed by decoder layer `layer` (1-based): lowest resolution first,
/// round-robin.
pub fn level_for_layer(layer: usize) -> usize {
    (layer - 1) % NUM_LEVELS
}

impl Decoder {
    pub fn new(scope: &mut Scope<'_>, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channel_dim;
        let n = config.num_queries;
        let layers = (0..config.num_layers)
            .map(|i| {
                let mut s = scope.scope(&format!("layer{i}"));
                Ok(DecoderLayer {
                    cross: AttentionBlock::new(&mut s, "cross", c)?,
                    self_attn: AttentionBlock::new(&mut s, "self", c)?,
                    ffn_norm: LayerNorm::new(&mut s, "ffn_norm", c)?,
                    ffn: Mlp::new(&mut s, "ffn", &[c, 2 * c, c])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            query_feat: scope.param("query_feat", &[n, c], Init::Uniform(1.0))?,
            query_pos: scope.param("query_pos", &[n, c], Init::Uniform(1.0))?,
            level_embed: scope.param("level_embed", &[NUM_LEVELS, c], Init::Uniform(0.5))?,
            layers,
            output_norm: LayerNorm::new(scope, "output_norm", c)?,
        })
    }

    /// Runs all layers. Returns `num_layers + 1` states with their predictions; entry 0 comes
    /// from the learned initial queries.
    pub fn forward(&self, pyramid: &FeaturePyramid, heads: &Heads) -> Result<Vec<(QueryState, PredictionSet)>> {
        let cfg = &self.config;
        let c = cfg.channel_dim;
        if pyramid.channel_dim != c || pyramid.levels.len() != NUM_LEVELS {
            return Err(Error::Shape(format!(
                "pyramid with {} levels of {} channels, decoder expects {NUM_LEVELS} of {c}",
                pyramid.levels.len(),
                pyramid.channel_dim
            )));
        }
        let b = pyramid.batch_size()?;
        let dtype = self.query_feat.dtype();
        let device = self.query_feat.device();

        let mut memories = Vec::with_capacity(NUM_LEVELS);
        for (l, level) in pyramid.levels.iter().enumerate() {
            let (_, h, w, _) = level.dims4()?;
            let feats = level.reshape((b, h * w, c))?;
            let pos = sine_position_code(h, w, c, dtype, device)?
                .broadcast_add(&self.level_embed.get(l)?)?;
            memories.push((feats, pos, (h, w)));
        }

        let q0 = self.query_feat.unsqueeze(0)?.broadcast_as((b, cfg.num_queries, c))?.contiguous()?;
        let qpos = &self.query_pos;
        let mut x = q0.clone();
        let mut mq = q0.clone();
        let mut prev = heads.predict(&self.output_norm.forward(&x)?, &pyramid.pixel_embedding)?;
        let mut out = vec![(
            QueryState {
                layer_index: 0,
                queries: x.clone(),
                momentum_query: mq.clone(),
                attention_bias: None,
                masked_output: None,
            },
            prev.clone(),
        )];
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let (feats, pos, hw) = &memories[level_for_layer(l)];
            let bias = bias_from_mask(&prev.mask_logits, *hw)?;
            let ma = masked_attention(&layer.cross, &x, qpos, feats, pos, Some(&bias))?.output;
            let sa_in = if cfg.lmq_enabled {
                mq = momentum_update(&mq, &ma, cfg.momentum_alpha)?;
                mq.clone()
            } else {
                mq = ma.clone();
                ma.clone()
            };
            let s = self_attention(&layer.self_attn, &sa_in, qpos)?;
            x = (&s + layer.ffn.forward(&layer.ffn_norm.forward(&s)?)?)?;
            prev = heads.predict(&self.output_norm.forward(&x)?, &pyramid.pixel_embedding)?;
            out.push((
                QueryState {
                    layer_index: l,
                    queries: x.clone(),
                    momentum_query: mq.clone(),
                    attention_bias: Some(bias),
                    masked_output: Some(ma),
                },
                prev.clone(),
            ));
        }
        Ok(out)
    }
}
