//! Training objectives. Every tensor-valued loss is differentiable with
//! respect to its prediction inputs; targets are plain values.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::decoder::{QueryTag, FOREGROUND};
use crate::error::{Error, Result};
use crate::feature_store::MomentSpan;
use crate::matching::min_cost_assignment;
use crate::ops;

/// Masked-out logit offset; large enough that `exp` underflows to zero.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermWeights {
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
}

impl TermWeights {
    pub const fn new(l1: f64, giou: f64, ce: f64) -> Self {
        Self { l1, giou, ce }
    }
}

/// Which clips join the positive pool at rank threshold `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    #[default]
    AtLeast,
    Above,
}

impl RankRule {
    pub fn is_positive(self, label: i8, n: usize) -> bool {
        match self {
            RankRule::AtLeast => label as i64 >= n as i64,
            RankRule::Above => label as i64 > n as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mr: TermWeights,
    pub hd: TermWeights,
    pub dn: TermWeights,
    /// Weight on the positive class of the clip-level cross-entropy.
    pub hd_pos_weight: f64,
    /// Total-loss weight of the denoising term.
    pub lambda_dn: f64,
    /// Total-loss weight of the encoder contrastive suite.
    pub lambda_enc: f64,
    pub margin: f64,
    pub temperature: f64,
    pub rank_count: usize,
    pub rank_rule: RankRule,
    /// Adds matched losses for every decoder layer, not only the last.
    pub aux_layers: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mr: TermWeights::new(10.0, 1.0, 4.0),
            hd: TermWeights::new(1.0, 1.0, 1.0),
            dn: TermWeights::new(10.0, 1.0, 4.0),
            hd_pos_weight: 4.0,
            lambda_dn: 1.0,
            lambda_enc: 1.0,
            margin: 0.2,
            temperature: 0.5,
            rank_count: 4,
            rank_rule: RankRule::AtLeast,
            aux_layers: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mr.l1, self.mr.giou, self.mr.ce, self.hd.l1, self.hd.giou, self.hd.ce, self.dn.l1, self.dn.giou, self.dn.ce,
            self.hd_pos_weight, self.lambda_dn, self.lambda_enc, self.margin,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.rank_count == 0 {
            return Err(Error::Config("rank count must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn giou_1d(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.span + b.span - inter;
    let hull = a.end().max(b.end()) - a.start().min(b.start());
    inter / union - (hull - union) / hull
}

/// Row-wise gIoU of `(N, 2)` `(center, span)` tensors.
pub fn giou_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (pc, pw) = (pred.narrow(D::Minus1, 0, 1)?, pred.narrow(D::Minus1, 1, 1)?);
    let (tc, tw) = (target.narrow(D::Minus1, 0, 1)?, target.narrow(D::Minus1, 1, 1)?);
    let (ps, pe) = ((&pc - (&pw * 0.5)?)?, (&pc + (&pw * 0.5)?)?);
    let (ts, te) = ((&tc - (&tw * 0.5)?)?, (&tc + (&tw * 0.5)?)?);
    let inter = (pe.minimum(&te)? - ps.maximum(&ts)?)?.relu()?;
    let union = ((&pw + &tw)? - &inter)?;
    let hull = (pe.maximum(&te)? - ps.minimum(&ts)?)?;
    let giou = ((&inter / &union)? - ((&hull - &union)? / &hull)?)?;
    Ok(giou.squeeze(D::Minus1)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(query, gt)` pairs ordered by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Pairwise matching cost between `K` predictions and `G` moments.
pub fn match_cost(pred: &[MomentSpan], fg_probs: &[f64], gts: &[MomentSpan], w: &TermWeights) -> Vec<Vec<f64>> {
    pred.iter()
        .zip(fg_probs)
        .map(|(p, &prob)| {
            gts.iter()
                .map(|g| {
                    let l1 = (p.center - g.center).abs() + (p.span - g.span).abs();
                    w.l1 * l1 + w.giou * (1.0 - giou_1d(p, g)) - w.ce * prob
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost injective matching of predictions to moments.
pub fn hungarian_match(pred: &[MomentSpan], fg_probs: &[f64], gts: &[MomentSpan], w: &TermWeights) -> MatchResult {
    let k = pred.len();
    if gts.is_empty() {
        return MatchResult {
            pairs: Vec::new(),
            unmatched: (0..k).collect(),
        };
    }
    let cost = match_cost(pred, fg_probs, gts, w);
    let mut pairs: Vec<(usize, usize)> = if k >= gts.len() {
        // Rows are moments so every moment receives a query.
        let transposed: Vec<Vec<f64>> = (0..gts.len()).map(|g| cost.iter().map(|row| row[g]).collect()).collect();
        min_cost_assignment(&transposed).into_iter().enumerate().map(|(g, q)| (q, g)).collect()
    } else {
        min_cost_assignment(&cost).into_iter().enumerate().collect()
    };
    pairs.sort_unstable();
    let unmatched = (0..k).filter(|q| !pairs.iter().any(|p| p.0 == *q)).collect();
    MatchResult { pairs, unmatched }
}

fn span_rows(spans: &[MomentSpan], dtype: DType) -> Result<Tensor> {
    ops::constant(spans.iter().flat_map(|s| [s.center, s.span]).collect(), (spans.len(), 2), dtype)
}

fn gather_rows(flat: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let idx = Tensor::new(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), flat.device())?;
    Ok(flat.index_select(&idx, 0)?)
}

/// `Σ (l1·|p−t|₁ + giou·(1−gIoU))` over paired rows.
fn span_terms(pred: &Tensor, target: &Tensor, w: &TermWeights) -> Result<Tensor> {
    let l1 = (pred - target)?.abs()?.sum_all()?;
    let n = pred.dims()[0] as f64;
    let giou = ((giou_tensor(pred, target)?.sum_all()? * -1.0)? + n)?;
    Ok(((l1 * w.l1)? + (giou * w.giou)?)?)
}

/// Two-class cross-entropy of `(N, 2)` logits against foreground flags,
/// weighted per row and summed.
fn class_ce_sum(logits: &Tensor, fg: &[bool], weights: &[f64]) -> Result<Tensor> {
    let n = fg.len();
    let logp = ops::log_softmax_last_dim(logits)?;
    let mut onehot = vec![0.0; n * 2];
    for (i, (&f, &wt)) in fg.iter().zip(weights).enumerate() {
        let class = if f { FOREGROUND } else { 1 - FOREGROUND };
        onehot[2 * i + class] = wt;
    }
    let target = ops::constant(onehot, (n, 2), logits.dtype())?;
    Ok(((logp * target)?.sum_all()? * -1.0)?)
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &candle_core::Device::Cpu)?)
}

/// Matched moment loss over the first `k` queries of each sample.
/// Span terms are summed over matched pairs and divided by the number of
/// moments; the classification term is averaged over all `k` queries.
pub fn mr_loss(spans: &Tensor, logits: &Tensor, k: usize, gts: &[Vec<MomentSpan>], matches: &[MatchResult], w: &TermWeights) -> Result<Tensor> {
    let (b, q, _) = spans.dims3()?;
    if gts.len() != b || matches.len() != b || k > q {
        return Err(Error::Shape(format!("mr_loss: batch {b}, {} targets, {} matches, k {k} of {q}", gts.len(), matches.len())));
    }
    let dtype = spans.dtype();
    let flat_spans = spans.reshape((b * q, 2))?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (m, g)) in matches.iter().zip(gts).enumerate() {
        for &(qi, gi) in &m.pairs {
            rows.push(i * q + qi);
            targets.push(g[gi]);
        }
    }
    let total_g: usize = gts.iter().map(Vec::len).sum();
    let mut loss = zero(dtype)?;
    if !rows.is_empty() {
        let pred = gather_rows(&flat_spans, &rows)?;
        loss = (span_terms(&pred, &span_rows(&targets, dtype)?, w)? / total_g.max(1) as f64)?;
    }
    let class_rows: Vec<usize> = (0..b).flat_map(|i| (0..k).map(move |j| i * q + j)).collect();
    let fg: Vec<bool> = (0..b).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| matches[i].pairs.iter().any(|p| p.0 == j)).collect();
    let cls_logits = gather_rows(&logits.reshape((b * q, 2))?, &class_rows)?;
    let ce = (class_ce_sum(&cls_logits, &fg, &vec![1.0; fg.len()])? / fg.len().max(1) as f64)?;
    Ok((loss + (ce * w.ce)?)?)
}

/// Clip-level highlight supervision plus span terms tying each guided
/// clip's reference span to the moment that contains the clip.
#[allow(clippy::too_many_arguments)]
pub fn hd_collab_loss(
    scores: &Tensor,
    reference: &Tensor,
    selected: &[Vec<usize>],
    clip_lens: &[usize],
    gts: &[Vec<MomentSpan>],
    w: &TermWeights,
    pos_weight: f64,
) -> Result<Tensor> {
    let (b, l) = scores.dims2()?;
    let (_, k, _) = reference.dims3()?;
    if selected.len() != b || clip_lens.len() != b || gts.len() != b {
        return Err(Error::Shape("hd_collab_loss: batch length mismatch".into()));
    }
    let dtype = scores.dtype();
    let mut pos_w = vec![0.0; b * l];
    let mut neg_w = vec![0.0; b * l];
    let mut total = 0.0;
    for i in 0..b {
        for c in 0..clip_lens[i] {
            if gts[i].iter().any(|g| g.contains_clip(c, clip_lens[i])) {
                pos_w[i * l + c] = pos_weight;
                total += pos_weight;
            } else {
                neg_w[i * l + c] = 1.0;
                total += 1.0;
            }
        }
    }
    // -log σ(s) = softplus(-s); -log(1-σ(s)) = softplus(s)
    let sp_pos = ops::softplus(&scores.neg()?)?;
    let sp_neg = ops::softplus(scores)?;
    let ce = ((sp_pos * ops::constant(pos_w, (b, l), dtype)?)?.sum_all()? + (sp_neg * ops::constant(neg_w, (b, l), dtype)?)?.sum_all()?)?;
    let ce = (ce / total.max(1e-12))?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..b {
        for (j, &clip) in selected[i].iter().enumerate() {
            if let Some(g) = gts[i].iter().find(|g| g.contains_clip(clip, clip_lens[i])) {
                rows.push(i * k + j);
                targets.push(*g);
            }
        }
    }
    let mut loss = (ce * w.ce)?;
    if !rows.is_empty() {
        let pred = gather_rows(&reference.reshape((b * k, 2))?, &rows)?;
        let spans = (span_terms(&pred, &span_rows(&targets, dtype)?, w)? / rows.len() as f64)?;
        loss = (loss + spans)?;
    }
    Ok(loss)
}

/// Denoising loss: positive replicas regress to their source moment and are
/// classified foreground; negative replicas are classified background.
/// Span terms average over positive rows, classification over all rows.
pub fn denoise_loss(
    spans: &Tensor,
    logits: &Tensor,
    tags: &[Vec<QueryTag>],
    provenance: &[Vec<Option<usize>>],
    gts: &[Vec<MomentSpan>],
    w: &TermWeights,
) -> Result<Option<Tensor>> {
    let (b, q, _) = spans.dims3()?;
    let dtype = spans.dtype();
    let mut pos_rows = Vec::new();
    let mut targets = Vec::new();
    let mut cls_rows = Vec::new();
    let mut fg = Vec::new();
    for i in 0..b {
        for j in 0..q {
            match tags[i][j] {
                QueryTag::DenoisePositive => {
                    let g = provenance[i][j].ok_or_else(|| Error::Shape("denoise row without provenance".into()))?;
                    pos_rows.push(i * q + j);
                    targets.push(gts[i][g]);
                    cls_rows.push(i * q + j);
                    fg.push(true);
                }
                QueryTag::DenoiseNegative => {
                    cls_rows.push(i * q + j);
                    fg.push(false);
                }
                _ => {}
            }
        }
    }
    if cls_rows.is_empty() {
        return Ok(None);
    }
    let cls_logits = gather_rows(&logits.reshape((b * q, 2))?, &cls_rows)?;
    let mut loss = ((class_ce_sum(&cls_logits, &fg, &vec![1.0; fg.len()])? / fg.len() as f64)? * w.ce)?;
    if !pos_rows.is_empty() {
        let pred = gather_rows(&spans.reshape((b * q, 2))?, &pos_rows)?;
        loss = (loss + (span_terms(&pred, &span_rows(&targets, dtype)?, w)? / pos_rows.len() as f64)?)?;
    }
    Ok(Some(loss))
}

fn length_mask(clip_lens: &[usize], l: usize, dtype: DType) -> Result<(Tensor, usize)> {
    let mask: Vec<f64> = clip_lens.iter().flat_map(|&n| (0..l).map(move |c| if c < n { 1.0 } else { 0.0 })).collect();
    let count = clip_lens.iter().map(|&n| n.min(l)).sum();
    Ok((ops::constant(mask, (clip_lens.len(), l), dtype)?, count))
}

/// Mean of `-log(1 - σ(s))` over the valid clips of negative pairs.
pub fn enc_neg_loss(neg_scores: &Tensor, clip_lens: &[usize]) -> Result<Tensor> {
    let (_, l) = neg_scores.dims2()?;
    let (mask, count) = length_mask(clip_lens, l, neg_scores.dtype())?;
    Ok(((ops::softplus(neg_scores)? * mask)?.sum_all()? / count.max(1) as f64)?)
}

/// Clip picks for the margin loss of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarginPick {
    /// `(high, low)` labelled clips inside the moments; absent on a label tie.
    pub ranked: Option<(usize, usize)>,
    /// `(inside, outside)`; absent when no clip lies outside every moment.
    pub in_out: Option<(usize, usize)>,
}

/// Picks the highest and lowest labelled clips (lowest index on ties) and a
/// random inside/outside pair.
pub fn pick_margin_clips(labels: &[i8], inside: &[bool], rng: &mut impl rand::Rng) -> MarginPick {
    let ins: Vec<usize> = (0..labels.len()).filter(|&c| inside[c]).collect();
    let outs: Vec<usize> = (0..labels.len()).filter(|&c| !inside[c]).collect();
    let mut ranked = None;
    if let (Some(&h), Some(&lo)) = (
        ins.iter().max_by(|&&a, &&b| labels[a].cmp(&labels[b]).then(b.cmp(&a))),
        ins.iter().min_by(|&&a, &&b| labels[a].cmp(&labels[b]).then(a.cmp(&b))),
    ) {
        if labels[h] > labels[lo] {
            ranked = Some((h, lo));
        }
    }
    let in_out = if ins.is_empty() || outs.is_empty() {
        None
    } else {
        Some((ins[rng.random_range(0..ins.len())], outs[rng.random_range(0..outs.len())]))
    };
    MarginPick { ranked, in_out }
}

/// Hinge terms `max(0, δ + S(lo) − S(hi))` per available pair, averaged
/// over samples with at least one pair.
pub fn margin_loss(scores: &Tensor, picks: &[MarginPick], delta: f64) -> Result<Option<Tensor>> {
    let (b, l) = scores.dims2()?;
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    let mut samples = 0;
    for (i, p) in picks.iter().enumerate().take(b) {
        let before = hi.len();
        for (h, w) in p.ranked.into_iter().chain(p.in_out) {
            hi.push(i * l + h);
            lo.push(i * l + w);
        }
        if hi.len() > before {
            samples += 1;
        }
    }
    if hi.is_empty() {
        return Ok(None);
    }
    let flat = scores.reshape(b * l)?;
    let gap = ((gather_rows(&flat, &lo)? - gather_rows(&flat, &hi)?)? + delta)?.relu()?;
    Ok(Some((gap.sum_all()? / samples as f64)?))
}

/// Rank-partitioned softmax contrast. For each threshold `n` the positive
/// pool holds clips passing `rule`; the rest of the clips and every clip
/// of the negative pair form the negative pool.
pub fn rank_contrastive_loss(
    scores: &Tensor,
    labels: &[Vec<i8>],
    clip_lens: &[usize],
    neg_scores: Option<(&Tensor, &[usize])>,
    temperature: f64,
    rank_count: usize,
    rule: RankRule,
) -> Result<Option<Tensor>> {
    let (b, l) = scores.dims2()?;
    let dtype = scores.dtype();
    let (z, width, neg_lens) = match neg_scores {
        Some((s, lens)) => {
            let (_, ln) = s.dims2()?;
            (Tensor::cat(&[scores, s], 1)?, l + ln, Some(lens))
        }
        None => (scores.clone(), l, None),
    };
    let z = (z / temperature)?;
    let mut all_bias = vec![MASKED; rank_count * b * width];
    let mut pos_bias = vec![MASKED; rank_count * b * width];
    let mut weight = vec![0.0; rank_count * b];
    let mut valid_per_sample = vec![0usize; b];
    for n in 1..=rank_count {
        for i in 0..b {
            let base = ((n - 1) * b + i) * width;
            let mut any = false;
            for c in 0..clip_lens[i].min(l) {
                all_bias[base + c] = 0.0;
                if rule.is_positive(labels[i][c], n) {
                    pos_bias[base + c] = 0.0;
                    any = true;
                }
            }
            if let Some(lens) = neg_lens {
                for c in 0..lens[i].min(width - l) {
                    all_bias[base + l + c] = 0.0;
                }
            }
            if any {
                weight[(n - 1) * b + i] = 1.0;
                valid_per_sample[i] += 1;
            }
        }
    }
    let active = valid_per_sample.iter().filter(|&&v| v > 0).count();
    if active == 0 {
        return Ok(None);
    }
    for n in 0..rank_count {
        for i in 0..b {
            if valid_per_sample[i] > 0 {
                weight[n * b + i] /= (valid_per_sample[i] * active) as f64;
            }
        }
    }
    let lse = |bias: Vec<f64>| -> Result<Tensor> {
        let x = z.unsqueeze(0)?.broadcast_add(&ops::constant(bias, (rank_count, b, width), dtype)?)?;
        let max = x.max_keepdim(D::Minus1)?.detach();
        Ok((x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?.squeeze(D::Minus1)?)
    };
    let term = (lse(all_bias)? - lse(pos_bias)?)?;
    Ok(Some((term * ops::constant(weight, (rank_count, b), dtype)?)?.sum_all()?))
}

/// Named loss components of one step; absent parts contribute zero.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub mr: Tensor,
    pub hd: Tensor,
    pub dn: Option<Tensor>,
    pub enc_neg: Option<Tensor>,
    pub margin: Option<Tensor>,
    pub contrast: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mr: f64,
    pub hd: f64,
    pub dn: f64,
    pub enc_neg: f64,
    pub margin: f64,
    pub contrast: f64,
    pub total: f64,
}

pub fn total_loss(parts: &LossParts, lambda_dn: f64, lambda_enc: f64) -> Result<(Tensor, LossBreakdown)> {
    let value = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map_or(Ok(0.0), ops::scalar) };
    let mut total = (&parts.mr + &parts.hd)?;
    if let Some(dn) = &parts.dn {
        total = (total + (dn * lambda_dn)?)?;
    }
    for t in [&parts.enc_neg, &parts.margin, &parts.contrast].into_iter().flatten() {
        total = (total + (t * lambda_enc)?)?;
    }
    let breakdown = LossBreakdown {
        mr: ops::scalar(&parts.mr)?,
        hd: ops::scalar(&parts.hd)?,
        dn: value(&parts.dn)?,
        enc_neg: value(&parts.enc_neg)?,
        margin: value(&parts.margin)?,
        contrast: value(&parts.contrast)?,
        total: ops::scalar(&total)?,
    };
    Ok((total, breakdown))
}
