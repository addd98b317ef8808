//! Training, evaluation, inference and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::FOREGROUND;
use crate::denoise::{build_noise_groups, NoiseConfig, NoisedMoment};
use crate::encoder::{EncoderInput, EncoderOutput, InputDims, ModelDims};
use crate::error::{Error, Result};
use crate::feature_store::{AnnotationRecord, Dataset, FeatureMatrix, MomentSpan, Polarity, VideoRecord};
use crate::losses::{
    denoise_loss, enc_neg_loss, hd_collab_loss, hungarian_match, margin_loss, mr_loss, pick_margin_clips, rank_contrastive_loss,
    total_loss, LossBreakdown, LossParts, LossWeights, MatchResult,
};
use crate::metrics::{MetricsReport, QueryMetrics, RankedPredictions};
use crate::model::{Model, ModelConfig, ModelOutput, QueryMode};
use crate::nn::{Ctx, PARAM_INDEX_FILE};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

/// Source of the mismatched text paired with each training video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// No negative pairs.
    None,
    /// Another batch member's text only.
    InBatch,
    /// Rewritten hard negatives of the same video, falling back to in-batch.
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeConfig {
    pub strategy: NegativeStrategy,
    /// Probability of using a hard negative when one exists (mixed strategy).
    pub hard_ratio: f64,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self {
            strategy: NegativeStrategy::Mixed,
            hard_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelDims,
    /// Number of decoder queries.
    pub k: usize,
    pub query_mode: QueryMode,
    /// See [`ModelConfig::detach_content`].
    pub detach_content: bool,
    pub loss: LossWeights,
    pub noise: NoiseConfig,
    /// Adds denoising query groups during training.
    pub denoise: bool,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs between evaluations; 0 evaluates only after the last epoch.
    pub eval_interval: usize,
    pub seed: u64,
    /// Share of each batch drawn from auxiliary positives.
    pub aux_ratio: f64,
    pub negatives: NegativeConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::default(),
            k: 10,
            query_mode: QueryMode::Guided,
            detach_content: true,
            loss: LossWeights::default(),
            noise: NoiseConfig::default(),
            denoise: true,
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 100,
            eval_interval: 0,
            seed: 0,
            aux_ratio: 0.3,
            negatives: NegativeConfig::default(),
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            errs.push(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        if !(self.optimizer.weight_decay >= 0.0 && self.optimizer.clip_norm >= 0.0) {
            errs.push("weight decay and clip norm must be non-negative".into());
        }
        if self.batch_size == 0 {
            errs.push("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.aux_ratio) {
            errs.push(format!("aux_ratio {} outside [0, 1)", self.aux_ratio));
        }
        if !(0.0..=1.0).contains(&self.negatives.hard_ratio) {
            errs.push(format!("hard_ratio {} outside [0, 1]", self.negatives.hard_ratio));
        }
        if self.k == 0 {
            errs.push("K must be at least 1".into());
        }
        for check in [self.model.validate(), self.loss.validate(), self.noise.validate()] {
            match check {
                Err(Error::Validation(e)) => errs.extend(e),
                Err(e) => errs.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn model_config(&self, inputs: InputDims) -> ModelConfig {
        ModelConfig {
            dims: self.model,
            inputs,
            k: self.k,
            query_mode: self.query_mode,
            detach_content: self.detach_content,
        }
    }
}

/// Feature widths shared by every record of a dataset.
pub fn input_dims(data: &Dataset) -> Result<InputDims> {
    let video = data.videos.values().next().ok_or_else(|| Error::invalid("dataset has no videos"))?;
    let text = data.annotations.first().ok_or_else(|| Error::invalid("dataset has no queries"))?;
    let dims = InputDims {
        d_m: video.motion.cols(),
        d_s: video.semantic.cols(),
        d_t: text.text.cols(),
    };
    let mut errs = Vec::new();
    for v in data.videos.values() {
        if v.motion.cols() != dims.d_m || v.semantic.cols() != dims.d_s {
            errs.push(format!("video {} feature widths differ from the rest", v.vid));
        }
    }
    for a in &data.annotations {
        if a.text.cols() != dims.d_t {
            errs.push(format!("query {} text width differs from the rest", a.qid));
        }
    }
    if errs.is_empty() {
        Ok(dims)
    } else {
        Err(Error::Validation(errs))
    }
}

/// Padded tensors and targets for a list of positive pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub qids: Vec<String>,
    /// Positive pairs, followed by one negative pair per sample when present.
    pub input: EncoderInput,
    pub windows: Vec<Vec<MomentSpan>>,
    /// Saliency labels padded with -1 to the longest video.
    pub labels: Vec<Vec<i8>>,
    pub inside: Vec<Vec<bool>>,
    /// Clip count per negative pair; 0 where no negative was available.
    pub neg_lens: Option<Vec<usize>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.qids.len()
    }
}

fn stack_rows(mats: &[&FeatureMatrix], rows: usize, dtype: DType) -> Result<Tensor> {
    let cols = mats[0].cols();
    let mut flat = vec![0.0f64; mats.len() * rows * cols];
    for (i, m) in mats.iter().enumerate() {
        for (j, v) in m.data().iter().enumerate() {
            flat[i * rows * cols + j] = *v as f64;
        }
    }
    ops::constant(flat, (mats.len(), rows, cols), dtype)
}

/// Builds a batch; `negatives[i]` is the text paired against sample `i`'s video.
pub fn assemble_batch(data: &Dataset, samples: &[&AnnotationRecord], negatives: Option<&[Option<&FeatureMatrix>]>, dtype: DType) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let videos: Vec<&VideoRecord> = samples
        .iter()
        .map(|a| data.video(&a.vid).ok_or_else(|| Error::invalid(format!("query {} refers to unknown video {}", a.qid, a.vid))))
        .collect::<Result<_>>()?;
    let l_max = videos.iter().map(|v| v.num_clips()).max().unwrap_or(0);
    let mut texts: Vec<&FeatureMatrix> = samples.iter().map(|a| &a.text).collect();
    let mut video_rows: Vec<&VideoRecord> = videos.clone();
    let mut neg_lens = None;
    if let Some(neg) = negatives {
        let mut lens = Vec::with_capacity(samples.len());
        for (i, n) in neg.iter().enumerate() {
            texts.push(n.unwrap_or(&samples[i].text));
            video_rows.push(videos[i]);
            lens.push(if n.is_some() { videos[i].num_clips() } else { 0 });
        }
        neg_lens = Some(lens);
    }
    let t_max = texts.iter().map(|t| t.rows()).max().unwrap_or(0);
    let motion: Vec<&FeatureMatrix> = video_rows.iter().map(|v| &v.motion).collect();
    let semantic: Vec<&FeatureMatrix> = video_rows.iter().map(|v| &v.semantic).collect();
    let input = EncoderInput {
        motion: stack_rows(&motion, l_max, dtype)?,
        semantic: stack_rows(&semantic, l_max, dtype)?,
        text: stack_rows(&texts, t_max, dtype)?,
        clip_lens: video_rows.iter().map(|v| v.num_clips()).collect(),
        text_lens: texts.iter().map(|t| t.rows()).collect(),
    };
    let labels = samples
        .iter()
        .map(|a| {
            let mut l = a.saliency_labels.clone();
            l.resize(l_max, -1);
            l
        })
        .collect();
    let inside = samples
        .iter()
        .zip(&videos)
        .map(|(a, v)| (0..v.num_clips()).map(|c| a.windows.iter().any(|w| w.contains_clip(c, v.num_clips()))).collect())
        .collect();
    Ok(Batch {
        qids: samples.iter().map(|a| a.qid.clone()).collect(),
        input,
        windows: samples.iter().map(|a| a.windows.clone()).collect(),
        labels,
        inside,
        neg_lens,
    })
}

fn narrow_encoding(enc: &EncoderOutput, start: usize, len: usize) -> Result<EncoderOutput> {
    Ok(EncoderOutput {
        x_s: enc.x_s.narrow(0, start, len)?,
        memory: enc.memory.narrow(0, start, len)?,
        fused: enc.fused.narrow(0, start, len)?,
    })
}

fn matched_values(spans: &Tensor, logits: &Tensor, k: usize) -> Result<(Vec<Vec<MomentSpan>>, Vec<Vec<f64>>)> {
    let spans = spans.narrow(1, 0, k)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let probs = ops::softmax_last_dim(&logits.narrow(1, 0, k)?)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let spans = spans
        .into_iter()
        .map(|row| row.into_iter().map(|cs| span_from_prediction(cs[0], cs[1])).collect())
        .collect();
    let probs = probs.into_iter().map(|row| row.into_iter().map(|p| p[FOREGROUND]).collect()).collect();
    Ok((spans, probs))
}

/// Clamps a raw `(center, span)` prediction into a valid span.
pub fn span_from_prediction(center: f64, span: f64) -> MomentSpan {
    let span = span.clamp(1e-6, 1.0);
    let start = (center - span / 2.0).max(0.0);
    let end = (center + span / 2.0).min(1.0);
    if end > start {
        MomentSpan {
            center: (start + end) / 2.0,
            span: end - start,
        }
    } else {
        MomentSpan {
            center: center.clamp(5e-7, 1.0 - 5e-7),
            span: 1e-6,
        }
    }
}

/// Loss of one batch given its forward output.
pub fn batch_loss(
    out: &ModelOutput,
    batch: &Batch,
    neg_scores: Option<&Tensor>,
    weights: &LossWeights,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, LossBreakdown)> {
    let b = batch.size();
    let clip_lens = &batch.input.clip_lens[..b];
    let layers: Vec<_> = if weights.aux_layers {
        out.decoded.layers.iter().collect()
    } else {
        vec![out.decoded.last()]
    };
    let mut mr: Option<Tensor> = None;
    let mut dn: Option<Tensor> = None;
    for layer in layers {
        let (pred, probs) = matched_values(&layer.spans, &layer.logits, k)?;
        let matches: Vec<MatchResult> = (0..b)
            .map(|i| hungarian_match(&pred[i], &probs[i], &batch.windows[i], &weights.mr))
            .collect();
        let l = mr_loss(&layer.spans, &layer.logits, k, &batch.windows, &matches, &weights.mr)?;
        mr = Some(match mr {
            Some(acc) => (acc + l)?,
            None => l,
        });
        if let Some(d) = denoise_loss(&layer.spans, &layer.logits, &out.queries.tags, &out.queries.provenance, &batch.windows, &weights.dn)? {
            dn = Some(match dn {
                Some(acc) => (acc + d)?,
                None => d,
            });
        }
    }
    let mr = mr.ok_or_else(|| Error::Config("decoder produced no layers".into()))?;
    let reference = match &out.reference {
        Some(r) => r.clone(),
        None => Tensor::zeros((b, k, 2), out.scores.dtype(), out.scores.device())?,
    };
    let selected = if out.selected.is_empty() { vec![Vec::new(); b] } else { out.selected.clone() };
    let hd = hd_collab_loss(&out.scores, &reference, &selected, clip_lens, &batch.windows, &weights.hd, weights.hd_pos_weight)?;
    let (mut enc_neg, mut margin, mut contrast) = (None, None, None);
    if weights.lambda_enc > 0.0 {
        let neg = match (neg_scores, &batch.neg_lens) {
            (Some(s), Some(lens)) if lens.iter().any(|&l| l > 0) => Some((s, lens.as_slice())),
            _ => None,
        };
        if let Some((s, lens)) = neg {
            enc_neg = Some(enc_neg_loss(s, lens)?);
        }
        let picks: Vec<_> = (0..b).map(|i| pick_margin_clips(&batch.labels[i][..clip_lens[i]], &batch.inside[i], rng)).collect();
        margin = margin_loss(&out.scores, &picks, weights.margin)?;
        contrast = rank_contrastive_loss(&out.scores, &batch.labels, clip_lens, neg, weights.temperature, weights.rank_count, weights.rank_rule)?;
    }
    let parts = LossParts {
        mr,
        hd,
        dn,
        enc_neg,
        margin,
        contrast,
    };
    total_loss(&parts, weights.lambda_dn, weights.lambda_enc)
}

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub inputs: InputDims,
    pub data_dir: Option<PathBuf>,
    pub epoch: usize,
    pub step: usize,
    pub report: Option<MetricsReport>,
}

pub const CHECKPOINT_META_FILE: &str = "checkpoint.json";

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    model.store().save(dir)?;
    let path = dir.join(CHECKPOINT_META_FILE);
    fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let path = dir.join(CHECKPOINT_META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if !dir.join(PARAM_INDEX_FILE).exists() {
        return Err(Error::Format(format!("{} has no parameter index", dir.display())));
    }
    let model = Model::new(meta.config.model_config(meta.inputs), meta.config.precision.dtype(), meta.config.seed)?;
    model.store().load(dir)?;
    Ok((model, meta))
}

/// Moment rankings and the clip score curve of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ranked: RankedPredictions,
    /// Raw salience score per clip.
    pub clip_scores: Vec<f64>,
}

/// Single-pair inference; the only path used to score pairs.
pub fn predict(model: &Model, video: &VideoRecord, qid: &str, text: &FeatureMatrix) -> Result<Prediction> {
    let dtype = model.dtype();
    let l = video.num_clips();
    let input = EncoderInput {
        motion: stack_rows(&[&video.motion], l, dtype)?,
        semantic: stack_rows(&[&video.semantic], l, dtype)?,
        text: stack_rows(&[text], text.rows(), dtype)?,
        clip_lens: vec![l],
        text_lens: vec![text.rows()],
    };
    let out = model.forward(&input, None, &Ctx::eval())?;
    let last = out.decoded.last();
    let (spans, probs) = matched_values(&last.spans, &last.logits, model.config().k)?;
    let moments = spans[0].iter().copied().zip(probs[0].iter().copied()).collect();
    Ok(Prediction {
        ranked: RankedPredictions::new(qid, moments),
        clip_scores: ops::to_vec1(&out.scores)?,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub per_query: Vec<QueryMetrics>,
}

/// Scores every original positive pair with denoising disabled.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let records: Vec<&AnnotationRecord> = data.positives().collect();
    if records.is_empty() {
        return Err(Error::invalid("no positive queries to evaluate"));
    }
    let mut predictions = Vec::with_capacity(records.len());
    let mut per_query = Vec::with_capacity(records.len());
    for a in &records {
        let video = data.video(&a.vid).ok_or_else(|| Error::invalid(format!("unknown video {}", a.vid)))?;
        let p = predict(model, video, &a.qid, &a.text)?;
        per_query.push(QueryMetrics::compute(&p.ranked, &a.windows, &p.clip_scores, &a.saliency_labels));
        predictions.push(p);
    }
    let gts: Vec<Vec<MomentSpan>> = records.iter().map(|a| a.windows.clone()).collect();
    let labels: Vec<Vec<i8>> = records.iter().map(|a| a.saliency_labels.clone()).collect();
    let ranked: Vec<RankedPredictions> = predictions.iter().map(|p| p.ranked.clone()).collect();
    let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.clip_scores.clone()).collect();
    Ok(Evaluation {
        report: MetricsReport::compute(&ranked, &gts, &scores, &labels)?,
        predictions,
        per_query,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Receives `log.jsonl`, `best/` and `last/`.
    pub out_dir: Option<&'a Path>,
    /// Recorded in checkpoints so later commands can find the data.
    pub data_dir: Option<&'a Path>,
    /// Evaluated instead of the training data.
    pub eval_data: Option<&'a Dataset>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// `(epoch, report)` per evaluation.
    pub evals: Vec<(usize, MetricsReport)>,
    pub best: Option<(usize, MetricsReport)>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Texts used as negatives for a batch.
fn pick_negatives<'a>(
    samples: &[&'a AnnotationRecord],
    hard: &BTreeMap<&str, Vec<&'a AnnotationRecord>>,
    cfg: &NegativeConfig,
    rng: &mut impl Rng,
) -> Vec<Option<&'a FeatureMatrix>> {
    let b = samples.len();
    let shift = if b > 1 { rng.random_range(1..b) } else { 0 };
    (0..b)
        .map(|i| {
            let vid = samples[i].vid.as_str();
            if cfg.strategy == NegativeStrategy::Mixed {
                if let Some(pool) = hard.get(vid).filter(|p| !p.is_empty()) {
                    if rng.random_bool(cfg.hard_ratio) {
                        return Some(&pool[rng.random_range(0..pool.len())].text);
                    }
                }
            }
            (0..b.saturating_sub(1))
                .map(|j| samples[(i + shift + j) % b])
                .find(|other| other.vid != vid)
                .map(|other| &other.text)
                .or_else(|| {
                    hard.get(vid)
                        .filter(|p| !p.is_empty() && cfg.strategy == NegativeStrategy::Mixed)
                        .map(|p| &p[0].text)
                })
        })
        .collect()
}

fn write_divergence(out_dir: Option<&Path>, step: usize, batch: usize, qids: &[String], losses: &LossBreakdown) {
    if let Some(dir) = out_dir {
        let dump = serde_json::json!({ "step": step, "batch": batch, "qids": qids, "losses": losses });
        let _ = fs::write(dir.join("divergence.json"), dump.to_string());
    }
}

/// Runs the full optimization; reproducible from `(cfg, data)`.
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let originals: Vec<&AnnotationRecord> = data.positives().collect();
    if originals.is_empty() {
        return Err(Error::invalid("training data has no positive queries"));
    }
    let aux: Vec<&AnnotationRecord> = data
        .annotations
        .iter()
        .filter(|a| a.aux && a.polarity == Polarity::Positive)
        .collect();
    let mut hard: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in data.annotations.iter().filter(|a| a.polarity == Polarity::HardNegative) {
        hard.entry(a.vid.as_str()).or_default().push(a);
    }
    let inputs = input_dims(data)?;
    let dtype = cfg.precision.dtype();
    let model = Model::new(cfg.model_config(inputs), dtype, cfg.seed)?;
    let vars: Vec<_> = model.store().iter().map(|(_, v)| v.clone()).collect();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.optimizer.lr,
            weight_decay: cfg.optimizer.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;

    let mut log_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let n_aux = if aux.is_empty() { 0 } else { (cfg.batch_size as f64 * cfg.aux_ratio).round() as usize };
    let n_orig = cfg.batch_size.saturating_sub(n_aux).max(1);
    let mut order_rng = stream(cfg.seed, 1);
    let mut noise_rng = stream(cfg.seed, 2);
    let mut aux_order: Vec<usize> = (0..aux.len()).collect();
    let mut aux_cursor = aux.len();
    let eval_data = opts.eval_data.unwrap_or(data);

    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(usize, MetricsReport)> = None;
    let mut step = 0usize;
    let meta = |epoch: usize, step: usize, report: Option<MetricsReport>| CheckpointMeta {
        config: cfg.clone(),
        inputs,
        data_dir: opts.data_dir.map(Path::to_path_buf),
        epoch,
        step,
        report,
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..originals.len()).collect();
        order.shuffle(&mut order_rng);
        for (batch_idx, chunk) in order.chunks(n_orig).enumerate() {
            let mut samples: Vec<&AnnotationRecord> = chunk.iter().map(|&i| originals[i]).collect();
            for _ in 0..n_aux {
                if aux_cursor >= aux_order.len() {
                    aux_order.shuffle(&mut order_rng);
                    aux_cursor = 0;
                }
                samples.push(aux[aux_order[aux_cursor]]);
                aux_cursor += 1;
            }
            let use_negatives = cfg.negatives.strategy != NegativeStrategy::None && cfg.loss.lambda_enc > 0.0;
            let negatives = use_negatives.then(|| pick_negatives(&samples, &hard, &cfg.negatives, &mut order_rng));
            let batch = assemble_batch(data, &samples, negatives.as_deref(), dtype)?;
            let b = batch.size();
            let noise: Option<Vec<Vec<NoisedMoment>>> = cfg.denoise.then(|| {
                samples
                    .iter()
                    .zip(&batch.input.clip_lens)
                    .map(|(a, &l)| build_noise_groups(&a.windows, &cfg.noise, l, &mut noise_rng))
                    .collect()
            });

            let ctx = Ctx::train(cfg.model.dropout, cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64);
            let (encoded, scores) = model.encode(&batch.input, &ctx)?;
            let (pos_enc, pos_scores, neg_scores) = if batch.neg_lens.is_some() {
                (narrow_encoding(&encoded, 0, b)?, scores.narrow(0, 0, b)?, Some(scores.narrow(0, b, b)?))
            } else {
                (encoded, scores, None)
            };
            let out = model.decode(pos_enc, pos_scores, &batch.input.clip_lens[..b], noise.as_deref(), &ctx)?;
            let (loss, losses) = batch_loss(&out, &batch, neg_scores.as_ref(), &cfg.loss, cfg.k, &mut noise_rng)?;
            if !losses.total.is_finite() {
                write_divergence(opts.out_dir, step, batch_idx, &batch.qids, &losses);
                return Err(Error::Divergence {
                    step,
                    batch: batch_idx,
                    detail: format!("non-finite loss for queries {:?}", batch.qids),
                });
            }
            let mut grads = loss.backward()?;
            let mut sq = 0.0;
            for v in &vars {
                if let Some(g) = grads.get(v) {
                    sq += ops::scalar(&g.sqr()?.sum_all()?)?;
                }
            }
            let grad_norm = sq.sqrt();
            if !grad_norm.is_finite() {
                write_divergence(opts.out_dir, step, batch_idx, &batch.qids, &losses);
                return Err(Error::Divergence {
                    step,
                    batch: batch_idx,
                    detail: "non-finite gradient norm".into(),
                });
            }
            if cfg.optimizer.clip_norm > 0.0 && grad_norm > cfg.optimizer.clip_norm {
                let factor = cfg.optimizer.clip_norm / (grad_norm + 1e-6);
                for v in &vars {
                    if let Some(g) = grads.remove(v) {
                        grads.insert(v, (g * factor)?);
                    }
                }
            }
            opt.step(&grads)?;
            let record = StepLog {
                step,
                epoch,
                lr: cfg.optimizer.lr,
                grad_norm,
                losses,
            };
            if let Some((file, path)) = log_file.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(record);
            step += 1;
        }

        let due = epoch == cfg.epochs || (cfg.eval_interval > 0 && epoch % cfg.eval_interval == 0);
        if due {
            let report = evaluate(&model, eval_data)?.report;
            log::info!("epoch {epoch}: map_avg {:.4} r1@0.5 {:.4} hit@1 {:.4}", report.map_avg, report.r1_at_050, report.hit_at_1);
            let improved = best.as_ref().is_none_or(|(_, b)| report.map_avg > b.map_avg);
            if improved {
                if let Some(dir) = opts.out_dir {
                    save_checkpoint(&model, &meta(epoch, step, Some(report.clone())), &dir.join("best"))?;
                }
                best = Some((epoch, report.clone()));
            }
            evals.push((epoch, report));
        }
    }
    if let Some(dir) = opts.out_dir {
        let report = evals.last().map(|(_, r)| r.clone());
        save_checkpoint(&model, &meta(cfg.epochs, step, report), &dir.join("last"))?;
    }
    Ok(TrainOutcome { model, log, evals, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_corpus, GenerationConfig};

    fn tiny_data() -> Dataset {
        generate_corpus(&GenerationConfig {
            num_videos: 4,
            clips_per_video: 12,
            segments_per_video: 3,
            d_m: 8,
            d_s: 8,
            d_t: 8,
            ..GenerationConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelDims {
                d: 16,
                heads: 2,
                tower_layers: 1,
                encoder_layers: 1,
                decoder_layers: 2,
                ffn_dim: 32,
                l_max: 16,
                dropout: 0.1,
            },
            k: 4,
            batch_size: 4,
            epochs: 2,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_reproducible() {
        let data = tiny_data();
        let a = train(&tiny_cfg(), &data, &TrainOptions::default()).unwrap();
        let b = train(&tiny_cfg(), &data, &TrainOptions::default()).unwrap();
        assert!(!a.log.is_empty());
        let ser = |l: &[StepLog]| l.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>();
        assert_eq!(ser(&a.log), ser(&b.log));
        assert!(a.log.iter().all(|r| r.losses.total.is_finite()));
    }

    #[test]
    fn disabled_contrast_logs_zero_terms() {
        let data = tiny_data();
        let cfg = TrainConfig {
            loss: LossWeights {
                lambda_enc: 0.0,
                ..LossWeights::default()
            },
            negatives: NegativeConfig {
                strategy: NegativeStrategy::None,
                ..NegativeConfig::default()
            },
            epochs: 1,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, &TrainOptions::default()).unwrap();
        for r in &out.log {
            assert_eq!((r.losses.enc_neg, r.losses.margin, r.losses.contrast), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_report() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny_cfg(), &data, &TrainOptions { out_dir: Some(dir.path()), ..Default::default() }).unwrap();
        let before = evaluate(&out.model, &data).unwrap().report;
        let (loaded, meta) = load_checkpoint(&dir.path().join("last")).unwrap();
        assert_eq!(evaluate(&loaded, &data).unwrap().report, before);
        assert_eq!(meta.epoch, 2);
        assert!(dir.path().join("best").join(CHECKPOINT_META_FILE).exists());
        let lines = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), out.log.len());
    }

    #[test]
    fn evaluation_and_prediction_agree() {
        let data = tiny_data();
        let model = Model::new(tiny_cfg().model_config(input_dims(&data).unwrap()), DType::F64, 0).unwrap();
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a.report, b.report);
        let first = data.positives().next().unwrap();
        let p = predict(&model, data.video(&first.vid).unwrap(), &first.qid, &first.text).unwrap();
        assert_eq!(p, a.predictions[0]);
        assert_eq!(p.ranked.moments.len(), 4);
        assert_eq!(p.clip_scores.len(), 12);
        assert!(evaluate(&model, &Dataset::default()).is_err());
    }

    #[test]
    fn config_validation_collects_errors() {
        let cfg = TrainConfig {
            batch_size: 0,
            optimizer: OptimizerConfig {
                lr: 0.0,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Validation(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn span_clamp_is_valid() {
        for (c, s) in [(0.0, 0.5), (1.0, 1.0), (0.5, 0.0), (0.99, 0.3)] {
            let m = span_from_prediction(c, s);
            assert!(MomentSpan::new(m.center, m.span).is_ok());
        }
    }
}
