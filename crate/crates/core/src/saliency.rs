//! Highlight head and its guidance for moment retrieval: bilinear salience
//! scores, top-K content queries, auxiliary reference spans and the
//! sinusoidal span encoding that turns them into position queries.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, SpanMlp};
use crate::ops;

#[derive(Debug, Clone)]
pub struct SalienceWeights {
    pub token: Tensor,
    pub clip: Tensor,
}

impl SalienceWeights {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (3.0 / d as f64).sqrt();
        Ok(Self {
            token: store.uniform(format!("{name}.token"), &[d], bound, rng)?,
            clip: store.uniform(format!("{name}.clip"), &[d], bound, rng)?,
        })
    }
}

/// `S(x_i) = (w_s . x_s)(w_v . x_i) / sqrt(d)` for `x_s` `(B, d)` and memory
/// `(B, L, d)`; returns raw scores `(B, L)`.
pub fn salience_scores(x_s: &Tensor, memory: &Tensor, w: &SalienceWeights) -> Result<Tensor> {
    let (b, l, d) = memory.dims3()?;
    let gate = x_s.matmul(&w.token.reshape((d, 1))?)?; // (B, 1)
    let per_clip = memory.reshape((b * l, d))?.matmul(&w.clip.reshape((d, 1))?)?.reshape((b, l))?;
    Ok((per_clip.broadcast_mul(&gate)? / (d as f64).sqrt())?)
}

/// Indices (0-based) of the `k` highest scores, ties to the lower index.
/// When fewer than `k` scores exist the sorted order repeats; the flag
/// reports that padding happened.
pub fn top_k_indices(scores: &[f64], k: usize) -> (Vec<usize>, bool) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    if order.is_empty() {
        return (Vec::new(), k > 0);
    }
    let padded = order.len() < k;
    let picked = order.iter().cycle().take(k).copied().collect();
    (picked, padded)
}

/// Content queries gathered from memory rows.
#[derive(Debug, Clone)]
pub struct ContentQueries {
    /// `(B, K, d)`
    pub queries: Tensor,
    /// 0-based clip index per query.
    pub indices: Vec<Vec<usize>>,
    /// True where a sample had fewer than `K` clips and indices repeat.
    pub padded: Vec<bool>,
}

/// Gathers the memory rows at each sample's top-`k` valid clips.
pub fn select_content_queries(memory: &Tensor, scores: &[Vec<f64>], clip_lens: &[usize], k: usize) -> Result<ContentQueries> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let (b, l, d) = memory.dims3()?;
    let mut indices = Vec::with_capacity(b);
    let mut padded = Vec::with_capacity(b);
    let mut flat = Vec::with_capacity(b * k);
    for (i, (row, &len)) in scores.iter().zip(clip_lens).enumerate() {
        let (idx, pad) = top_k_indices(&row[..len], k);
        if idx.is_empty() {
            return Err(Error::Input(format!("sample {i} has no clips")));
        }
        flat.extend(idx.iter().map(|&j| (i * l + j) as u32));
        indices.push(idx);
        padded.push(pad);
    }
    let ids = Tensor::from_vec(flat, b * k, &Device::Cpu)?;
    let queries = memory.reshape((b * l, d))?.index_select(&ids, 0)?.reshape((b, k, d))?;
    Ok(ContentQueries {
        queries,
        indices,
        padded,
    })
}

/// Auxiliary span layer: reference `(center, span)` per content query.
pub fn reference_spans(content: &Tensor, layer: &SpanMlp) -> Result<Tensor> {
    layer.forward(content)
}

fn frequencies(d: usize, odd: bool, dtype: DType) -> Result<Tensor> {
    let half = (d / 2) as f64;
    let values = (0..d / 4)
        .map(|i| {
            let exponent = (2 * i + usize::from(odd)) as f64 / half;
            2.0 * PI / 10000f64.powf(exponent)
        })
        .collect();
    ops::constant(values, d / 4, dtype)
}

fn encode_scalar(r: &Tensor, d: usize) -> Result<Tensor> {
    let sin = r.broadcast_mul(&frequencies(d, false, r.dtype())?)?.sin()?;
    let cos = r.broadcast_mul(&frequencies(d, true, r.dtype())?)?.cos()?;
    Ok(Tensor::cat(&[&sin, &cos], r.rank() - 1)?)
}

/// Encodes spans `(..., 2)` into position queries `(..., d)`: the center and
/// the span each fill a `d/2` block of `sin` terms followed by `cos` terms.
pub fn positional_encode(spans: &Tensor, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("position width {d} must be a positive multiple of 4")));
    }
    let last = spans.rank() - 1;
    if spans.dims()[last] != 2 {
        return Err(Error::Shape(format!("expected (..., 2) spans, got {:?}", spans.dims())));
    }
    let center = encode_scalar(&spans.narrow(last, 0, 1)?, d)?;
    let width = encode_scalar(&spans.narrow(last, 1, 1)?, d)?;
    Ok(Tensor::cat(&[&center, &width], last)?)
}
