//! Task-collaborated decoder: guided matched queries and denoising query
//! groups decoded against the encoder memory `[x_s; x_1..x_L]`.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::denoise::NoisedMoment;
use crate::encoder::{clip_positions, ModelDims};
use crate::error::{Error, Result};
use crate::feature_store::Polarity;
use crate::nn::{attention_bias, key_padding_bias, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, SpanMlp};
use crate::ops;
use crate::saliency::positional_encode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryTag {
    Matched,
    DenoisePositive,
    DenoiseNegative,
    /// Filler row keeping denoise groups rectangular across a batch.
    Padding,
}

/// `Q_c + Q_p`.
pub fn combine_queries(content: &Tensor, position: &Tensor) -> Result<Tensor> {
    if content.dims() != position.dims() {
        return Err(Error::Shape(format!(
            "content {:?} and position {:?} queries differ",
            content.dims(),
            position.dims()
        )));
    }
    Ok((content + position)?)
}

/// Denoising rows for one sample: the noised span encodings with a zero
/// content part.
#[derive(Debug, Clone)]
pub struct DenoiseQueries {
    /// `(D, d)`; empty when there is no ground truth.
    pub embeddings: Option<Tensor>,
    pub tags: Vec<QueryTag>,
    pub provenance: Vec<usize>,
    pub groups: Vec<usize>,
}

impl DenoiseQueries {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn build_denoise_queries(noised: &[NoisedMoment], d: usize, dtype: DType) -> Result<DenoiseQueries> {
    let tags = noised
        .iter()
        .map(|n| match n.polarity {
            Polarity::Positive => QueryTag::DenoisePositive,
            Polarity::HardNegative => QueryTag::DenoiseNegative,
        })
        .collect();
    let embeddings = if noised.is_empty() {
        None
    } else {
        let spans: Vec<f64> = noised.iter().flat_map(|n| [n.span.center, n.span.span]).collect();
        Some(positional_encode(&ops::constant(spans, (noised.len(), 2), dtype)?, d)?)
    };
    Ok(DenoiseQueries {
        embeddings,
        tags,
        provenance: noised.iter().map(|n| n.gt_index).collect(),
        groups: noised.iter().map(|n| n.group).collect(),
    })
}

/// Matched queries followed by (padded) denoising rows, with the attention
/// allow-mask that isolates the groups.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    /// `(B, K + D, d)`
    pub embeddings: Tensor,
    /// `allow[b][i][j]`: query `i` may attend to query `j`.
    pub allow: Vec<Vec<Vec<bool>>>,
    pub tags: Vec<Vec<QueryTag>>,
    /// Ground-truth index per denoising row.
    pub provenance: Vec<Vec<Option<usize>>>,
    pub num_matched: usize,
}

impl QueryBatch {
    pub fn assemble(matched: &Tensor, denoise: &[DenoiseQueries]) -> Result<Self> {
        let (b, k, d) = matched.dims3()?;
        if !denoise.is_empty() && denoise.len() != b {
            return Err(Error::Shape(format!("{} denoise groups for batch of {b}", denoise.len())));
        }
        let dn_max = denoise.iter().map(DenoiseQueries::len).max().unwrap_or(0);
        let q = k + dn_max;
        let mut tags = Vec::with_capacity(b);
        let mut provenance = Vec::with_capacity(b);
        let mut allow = Vec::with_capacity(b);
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let empty = DenoiseQueries {
                embeddings: None,
                tags: vec![],
                provenance: vec![],
                groups: vec![],
            };
            let dn = denoise.get(i).unwrap_or(&empty);
            let mut t = vec![QueryTag::Matched; k];
            t.extend(dn.tags.iter().copied());
            t.resize(q, QueryTag::Padding);
            let mut p = vec![None; k];
            p.extend(dn.provenance.iter().map(|&g| Some(g)));
            p.resize(q, None);
            let group = |j: usize| -> Option<usize> {
                if j < k {
                    None
                } else {
                    dn.groups.get(j - k).copied()
                }
            };
            let mask: Vec<Vec<bool>> = (0..q)
                .map(|a| {
                    (0..q)
                        .map(|c| match (t[a], t[c]) {
                            (QueryTag::Matched, QueryTag::Matched) => true,
                            (QueryTag::Padding, _) | (_, QueryTag::Padding) => a == c,
                            (QueryTag::Matched, _) | (_, QueryTag::Matched) => false,
                            _ => group(a) == group(c),
                        })
                        .collect()
                })
                .collect();
            if dn_max > 0 {
                let pad = dn_max - dn.len();
                let mut parts = Vec::new();
                if let Some(e) = &dn.embeddings {
                    parts.push(e.clone());
                }
                if pad > 0 {
                    parts.push(Tensor::zeros((pad, d), matched.dtype(), matched.device())?);
                }
                rows.push(Tensor::cat(&parts, 0)?);
            }
            tags.push(t);
            provenance.push(p);
            allow.push(mask);
        }
        let embeddings = if dn_max > 0 {
            Tensor::cat(&[matched, &Tensor::stack(&rows, 0)?], 1)?
        } else {
            matched.clone()
        };
        Ok(Self {
            embeddings,
            allow,
            tags,
            provenance,
            num_matched: k,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.embeddings.dims()[1]
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dims.d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dims.d, dims.heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dims.d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dims.d, dims.heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dims.d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dims.d, dims.ffn_dim, rng)?,
        })
    }

    fn forward(&self, q: &Tensor, self_bias: &Tensor, mem_keys: &Tensor, mem: &Tensor, mem_bias: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_self.forward(q)?;
        let q = (q + ctx.dropout(&self.self_attn.forward(&h, &h, &h, Some(self_bias))?)?)?;
        let h = self.norm_cross.forward(&q)?;
        let q = (&q + ctx.dropout(&self.cross_attn.forward(&h, mem_keys, mem, Some(mem_bias))?)?)?;
        let f = self.ff.forward(&self.norm_ff.forward(&q)?, ctx)?;
        Ok((&q + ctx.dropout(&f)?)?)
    }
}

/// Head outputs after one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `(B, Q, 2)` `(center, span)` in `(0, 1)`.
    pub spans: Tensor,
    /// `(B, Q, 2)` with index 0 = foreground, 1 = background.
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// One prediction per decoder layer; the last is the primary output.
    pub layers: Vec<LayerPrediction>,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("decoder has at least one layer")
    }
}

pub const FOREGROUND: usize = 0;

#[derive(Debug, Clone)]
pub struct Decoder {
    dims: ModelDims,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    span_head: SpanMlp,
    class_head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        Ok(Self {
            dims: *dims,
            layers: (0..dims.decoder_layers)
                .map(|i| DecoderLayer::new(store, &format!("decoder.layers.{i}"), dims, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "decoder.norm", dims.d)?,
            span_head: SpanMlp::new(store, "decoder.span_head", dims.d, rng)?,
            class_head: Linear::new(store, "decoder.class_head", dims.d, 2, rng)?,
        })
    }

    pub fn decode(&self, queries: &QueryBatch, x_s: &Tensor, memory: &Tensor, clip_lens: &[usize], ctx: &Ctx) -> Result<DecoderOutput> {
        let (b, len, d) = memory.dims3()?;
        let q = queries.num_queries();
        if queries.allow.len() != b || queries.allow.iter().any(|m| m.len() != q || m.iter().any(|r| r.len() != q)) {
            return Err(Error::Shape(format!(
                "attention mask does not match {b} samples of {q} queries"
            )));
        }
        if clip_lens.len() != b {
            return Err(Error::Shape(format!("{} clip lengths for batch of {b}", clip_lens.len())));
        }
        let mem = Tensor::cat(&[&x_s.reshape((b, 1, d))?, memory], 1)?;
        let pos = Tensor::cat(
            &[
                &Tensor::zeros((1, d), memory.dtype(), memory.device())?,
                &clip_positions(len, self.dims.d, memory.dtype())?,
            ],
            0,
        )?;
        let mem_keys = mem.broadcast_add(&pos)?;
        let lens: Vec<usize> = clip_lens.iter().map(|l| l + 1).collect();
        let mem_bias = key_padding_bias(&lens, len + 1, memory.dtype())?;
        let self_bias = attention_bias(&queries.allow, memory.dtype())?;
        let mut h = queries.embeddings.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(&h, &self_bias, &mem_keys, &mem, &mem_bias, ctx)?;
            let normed = self.norm.forward(&h)?;
            layers.push(LayerPrediction {
                spans: self.span_head.forward(&normed)?,
                logits: self.class_head.forward(&normed)?,
            });
        }
        Ok(DecoderOutput { layers })
    }
}
