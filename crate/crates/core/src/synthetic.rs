//! Synthetic corpus with controllable motion/semantics structure.
//!
//! Every video is a sequence of contiguous segments, each labelled with a
//! latent `(scene, action)` pair. Semantic clip features are noisy copies of
//! the scene vector, motion features noisy copies of the action vector. The
//! query describes one target pair and the ground truth is every segment
//! carrying that exact pair. Each video also holds a segment sharing only the
//! scene and one sharing only the action, so neither stream alone localizes
//! the target.
//!
//! Augmentation mirrors the caption-interval and query-rewrite corpora:
//! caption pairs come from latent runs (runs shorter than three clips are
//! dropped, the two longest kept) and rewrites perturb (synonym) or swap
//! (antonym) the target scene or action.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{AnnotationRecord, Dataset, FeatureMatrix, MomentSpan, Polarity, VideoRecord};

/// Runs shorter than this many clips never become caption pairs.
pub const MIN_CAPTION_RUN: usize = 3;

/// Cosine similarity a synonym rewrite keeps with the original concept.
pub const SYNONYM_MIN_COSINE: f64 = 0.9;

const MAX_BANK_ATTEMPTS: usize = 100_000;
const MAX_LAYOUT_ATTEMPTS: usize = 256;

/// Unit-norm latent concepts plus the fixed projection into query-word space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    pub scenes: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub seed: u64,
    scene_words: Vec<Vec<f64>>,
    action_words: Vec<Vec<f64>>,
    fillers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConceptDims {
    pub d_s: usize,
    pub d_m: usize,
    pub d_t: usize,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

fn spread_concepts(rng: &mut impl Rng, n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > MAX_BANK_ATTEMPTS {
            return Err(Error::Generation(format!(
                "cannot place {n} concepts in {dim} dims with cosine < 0.5"
            )));
        }
        let v = unit_vector(rng, dim);
        if out.iter().all(|u| cosine(u, &v) < 0.5) {
            out.push(v);
        }
    }
    Ok(out)
}

fn random_projection(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect()
        })
        .collect()
}

fn project(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

const FILLER_WORDS: usize = 6;

pub fn build_concept_bank(n_scenes: usize, n_actions: usize, dims: ConceptDims, seed: u64) -> Result<ConceptBank> {
    if n_scenes < 2 || n_actions < 2 {
        return Err(Error::Config(format!(
            "need at least two scenes and two actions, got {n_scenes} and {n_actions}"
        )));
    }
    if dims.d_s == 0 || dims.d_m == 0 || dims.d_t == 0 {
        return Err(Error::Config("concept dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = spread_concepts(&mut rng, n_scenes, dims.d_s)?;
    let actions = spread_concepts(&mut rng, n_actions, dims.d_m)?;
    let scene_words = random_projection(&mut rng, dims.d_t, dims.d_s);
    let action_words = random_projection(&mut rng, dims.d_t, dims.d_m);
    let fillers = (0..FILLER_WORDS).map(|_| unit_vector(&mut rng, dims.d_t)).collect();
    Ok(ConceptBank {
        scenes,
        actions,
        seed,
        scene_words,
        action_words,
        fillers,
    })
}

impl ConceptBank {
    pub fn dims(&self) -> ConceptDims {
        ConceptDims {
            d_s: self.scenes[0].len(),
            d_m: self.actions[0].len(),
            d_t: self.scene_words.len(),
        }
    }

    /// Query-word features for a `(scene, action)` description: one word per
    /// concept, the rest drawn from a shared filler vocabulary, in random order.
    pub fn encode_query(
        &self,
        scene: &[f64],
        action: &[f64],
        words: usize,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<FeatureMatrix> {
        let mut tokens = vec![project(&self.scene_words, scene), project(&self.action_words, action)];
        for _ in 2..words {
            tokens.push(self.fillers[rng.random_range(0..self.fillers.len())].clone());
        }
        tokens.shuffle(rng);
        let rows: Vec<Vec<f32>> = tokens
            .into_iter()
            .map(|t| t.into_iter().map(|x| (x + sigma * gauss(rng)) as f32).collect())
            .collect();
        FeatureMatrix::from_rows(&rows)
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewriteCounts {
    pub semantic_pos: usize,
    pub semantic_neg: usize,
    pub motion_pos: usize,
    pub motion_neg: usize,
}

impl Default for RewriteCounts {
    fn default() -> Self {
        Self {
            semantic_pos: 1,
            semantic_neg: 1,
            motion_pos: 1,
            motion_neg: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub num_videos: usize,
    pub clips_per_video: usize,
    pub segments_per_video: usize,
    pub d_m: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub feature_noise_sigma: f64,
    /// Caption pairs kept per video (longest runs first).
    pub aux_pairs_per_video: usize,
    pub rewrites: RewriteCounts,
    pub n_scenes: usize,
    pub n_actions: usize,
    pub words_per_query: usize,
    pub clip_len_s: f64,
    /// Probability that a fourth or later segment repeats the target pair.
    pub repeat_target_prob: f64,
    /// Index of the first video; disjoint offsets give disjoint splits over one bank.
    pub video_offset: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_videos: 64,
            clips_per_video: 32,
            segments_per_video: 4,
            d_m: 32,
            d_s: 32,
            d_t: 32,
            feature_noise_sigma: 0.05,
            aux_pairs_per_video: 2,
            rewrites: RewriteCounts::default(),
            n_scenes: 12,
            n_actions: 12,
            words_per_query: 4,
            clip_len_s: 2.0,
            repeat_target_prob: 0.25,
            video_offset: 0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_videos == 0 {
            errs.push("num_videos must be at least 1".to_string());
        }
        if self.segments_per_video * MIN_CAPTION_RUN > self.clips_per_video {
            errs.push(format!(
                "{} segments do not fit in {} clips (need segments <= clips/3)",
                self.segments_per_video, self.clips_per_video
            ));
        }
        for (name, d) in [("d_m", self.d_m), ("d_s", self.d_s), ("d_t", self.d_t)] {
            if d < 8 {
                errs.push(format!("{name} must be at least 8, got {d}"));
            }
        }
        if self.words_per_query < 2 {
            errs.push("words_per_query must be at least 2".into());
        }
        if !(self.feature_noise_sigma >= 0.0) {
            errs.push("feature_noise_sigma must be non-negative".into());
        }
        if !(self.clip_len_s > 0.0) {
            errs.push("clip_len_s must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn bank(&self) -> Result<ConceptBank> {
        build_concept_bank(
            self.n_scenes,
            self.n_actions,
            ConceptDims {
                d_s: self.d_s,
                d_m: self.d_m,
                d_t: self.d_t,
            },
            self.seed,
        )
    }
}

/// Independent stream for video `index` under `seed`.
pub fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub scene: usize,
    pub action: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.scene, self.action)
    }
}

/// Latent structure behind one generated video/query pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentLayout {
    pub segments: Vec<Segment>,
    pub target: (usize, usize),
    /// Quantized noise level per clip; the clip's noise std is `sigma * (1 + level)`.
    pub noise_levels: Vec<u8>,
}

impl LatentLayout {
    pub fn clip_pair(&self, clip: usize) -> (usize, usize) {
        self.segments
            .iter()
            .find(|s| clip >= s.start && clip < s.end())
            .map(Segment::pair)
            .expect("segments cover every clip")
    }

    pub fn num_clips(&self) -> usize {
        self.segments.last().map_or(0, Segment::end)
    }

    /// Maximal runs of clips carrying `pair`, as `(start, len)`.
    pub fn runs_of(&self, pair: (usize, usize)) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut open: Option<usize> = None;
        for i in 0..=self.num_clips() {
            let hit = i < self.num_clips() && self.clip_pair(i) == pair;
            match (hit, open) {
                (true, None) => open = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - s));
                    open = None;
                }
                _ => {}
            }
        }
        runs
    }

    pub fn label(&self, clip: usize) -> i8 {
        4 - self.noise_levels[clip].min(4) as i8
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub video: VideoRecord,
    pub annotation: AnnotationRecord,
    pub layout: LatentLayout,
}

fn windows_for(runs: &[(usize, usize)], clips: usize) -> Result<Vec<MomentSpan>> {
    runs.iter()
        .map(|&(s, len)| MomentSpan::from_start_end(s as f64 / clips as f64, (s + len) as f64 / clips as f64))
        .collect()
}

fn labels_for(layout: &LatentLayout, runs: &[(usize, usize)]) -> Vec<i8> {
    let mut labels = vec![-1i8; layout.num_clips()];
    for &(s, len) in runs {
        for (i, l) in labels.iter_mut().enumerate().skip(s).take(len) {
            *l = layout.label(i);
        }
    }
    labels
}

fn segment_lengths(rng: &mut impl Rng, clips: usize, segments: usize) -> Vec<usize> {
    let mut lens = vec![MIN_CAPTION_RUN; segments];
    for _ in 0..clips - MIN_CAPTION_RUN * segments {
        lens[rng.random_range(0..segments)] += 1;
    }
    lens
}

fn other_index(rng: &mut impl Rng, n: usize, not: usize) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

fn layout_pairs(
    rng: &mut impl Rng,
    cfg: &GenerationConfig,
    bank: &ConceptBank,
) -> Result<((usize, usize), Vec<(usize, usize)>)> {
    let (ns, na) = (bank.scenes.len(), bank.actions.len());
    let target = (rng.random_range(0..ns), rng.random_range(0..na));
    let mut pairs = vec![
        target,
        (target.0, other_index(rng, na, target.1)),
        (other_index(rng, ns, target.0), target.1),
    ];
    let mut targets = 1;
    while pairs.len() < cfg.segments_per_video {
        // A repeated target must leave room for a separating segment.
        if targets * 2 < cfg.segments_per_video && rng.random_bool(cfg.repeat_target_prob.clamp(0.0, 1.0)) {
            pairs.push(target);
            targets += 1;
        } else {
            let p = (rng.random_range(0..ns), rng.random_range(0..na));
            if p != target {
                pairs.push(p);
            }
        }
    }
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        pairs.shuffle(rng);
        if pairs.windows(2).all(|w| w[0] != w[1]) {
            return Ok((target, pairs));
        }
    }
    Err(Error::Generation(
        "cannot order segments so that neighbours differ".into(),
    ))
}

/// Generates one video and its positive query.
pub fn synthesize_pair(
    bank: &ConceptBank,
    cfg: &GenerationConfig,
    index: usize,
    rng: &mut impl Rng,
) -> Result<SyntheticSample> {
    cfg.validate()?;
    let dims = bank.dims();
    if (dims.d_s, dims.d_m, dims.d_t) != (cfg.d_s, cfg.d_m, cfg.d_t) {
        return Err(Error::Config("concept bank dimensions differ from config".into()));
    }
    if cfg.segments_per_video < 3 {
        return Err(Error::Generation(format!(
            "{} segments leave no room for a target plus scene and action distractors",
            cfg.segments_per_video
        )));
    }
    let clips = cfg.clips_per_video;
    let lens = segment_lengths(rng, clips, cfg.segments_per_video);
    let (target, pairs) = layout_pairs(rng, cfg, bank)?;
    let mut segments = Vec::with_capacity(lens.len());
    let mut start = 0;
    for (&len, &(scene, action)) in lens.iter().zip(&pairs) {
        segments.push(Segment {
            start,
            len,
            scene,
            action,
        });
        start += len;
    }

    // Clips near a segment's centre are cleaner; occasional jitter adds one level.
    let mut noise_levels = Vec::with_capacity(clips);
    for seg in &segments {
        for j in 0..seg.len {
            let rel = ((j as f64 + 0.5) / seg.len as f64 - 0.5).abs() * 2.0;
            let mut level = (3.0 * rel).floor().min(2.0) as u8;
            if rng.random_bool(0.25) {
                level += 1;
            }
            noise_levels.push(level.min(4));
        }
    }
    let layout = LatentLayout {
        segments,
        target,
        noise_levels,
    };

    let sigma = cfg.feature_noise_sigma;
    let mut motion = Vec::with_capacity(clips);
    let mut semantic = Vec::with_capacity(clips);
    for i in 0..clips {
        let (s, a) = layout.clip_pair(i);
        let std = sigma * (1.0 + layout.noise_levels[i] as f64);
        semantic.push(noisy(&bank.scenes[s], std, rng));
        motion.push(noisy(&bank.actions[a], std, rng));
    }
    let vid = format!("v{index:05}");
    let video = VideoRecord {
        vid: vid.clone(),
        motion: FeatureMatrix::from_rows(&motion)?,
        semantic: FeatureMatrix::from_rows(&semantic)?,
        duration_s: clips as f64 * cfg.clip_len_s,
        clip_len_s: cfg.clip_len_s,
    };
    let runs = layout.runs_of(target);
    let text = bank.encode_query(
        &bank.scenes[target.0],
        &bank.actions[target.1],
        cfg.words_per_query,
        sigma,
        rng,
    )?;
    let annotation = AnnotationRecord {
        qid: format!("q{index:05}"),
        vid,
        text,
        windows: windows_for(&runs, clips)?,
        saliency_labels: labels_for(&layout, &runs),
        polarity: Polarity::Positive,
        aux: false,
    };
    Ok(SyntheticSample {
        video,
        annotation,
        layout,
    })
}

fn noisy(v: &[f64], std: f64, rng: &mut impl Rng) -> Vec<f32> {
    if std == 0.0 {
        return v.iter().map(|&x| x as f32).collect();
    }
    let n = Normal::new(0.0, std).expect("finite std");
    v.iter().map(|&x| (x + n.sample(rng)) as f32).collect()
}

/// A latent run considered as a caption interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionRun {
    pub start: usize,
    pub len: usize,
}

/// Drops runs shorter than [`MIN_CAPTION_RUN`] and keeps the `keep` longest,
/// earlier start first on ties.
pub fn select_caption_runs(runs: &[CaptionRun], keep: usize) -> Vec<CaptionRun> {
    let mut kept: Vec<CaptionRun> = runs.iter().copied().filter(|r| r.len >= MIN_CAPTION_RUN).collect();
    kept.sort_by(|a, b| b.len.cmp(&a.len).then(a.start.cmp(&b.start)));
    kept.truncate(keep);
    kept
}

/// Caption-interval analogs: new positive pairs for the longest latent runs.
pub fn generate_caption_pairs(
    sample: &SyntheticSample,
    bank: &ConceptBank,
    cfg: &GenerationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<AnnotationRecord>> {
    let layout = &sample.layout;
    let runs: Vec<CaptionRun> = layout
        .segments
        .iter()
        .map(|s| CaptionRun {
            start: s.start,
            len: s.len,
        })
        .collect();
    let clips = layout.num_clips();
    let mut out = Vec::new();
    for (j, run) in select_caption_runs(&runs, cfg.aux_pairs_per_video).into_iter().enumerate() {
        let pair = layout.clip_pair(run.start);
        let pair_runs = layout.runs_of(pair);
        let text = bank.encode_query(
            &bank.scenes[pair.0],
            &bank.actions[pair.1],
            cfg.words_per_query,
            cfg.feature_noise_sigma,
            rng,
        )?;
        out.push(AnnotationRecord {
            qid: format!("{}_cap{j}", sample.annotation.qid),
            vid: sample.video.vid.clone(),
            text,
            windows: windows_for(&pair_runs, clips)?,
            saliency_labels: labels_for(layout, &pair_runs),
            polarity: Polarity::Positive,
            aux: true,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteDimension {
    Semantic,
    Motion,
}

/// A rewritten query plus the concept vectors it was encoded from.
#[derive(Debug, Clone)]
pub struct Rewrite {
    pub record: AnnotationRecord,
    pub scene: Vec<f64>,
    pub action: Vec<f64>,
}

fn perturb_within_cosine(v: &[f64], min_cos: f64, rng: &mut impl Rng) -> Vec<f64> {
    // Rotate towards a random orthogonal direction by an angle below acos(min_cos).
    let mut u = unit_vector(rng, v.len());
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    for (ui, vi) in u.iter_mut().zip(v) {
        *ui -= dot * vi;
    }
    let n = norm(&u);
    let theta = rng.random_range(0.0..min_cos.acos());
    v.iter()
        .zip(&u)
        .map(|(vi, ui)| theta.cos() * vi + theta.sin() * ui / n)
        .collect()
}

/// Synonym (positive) or antonym (hard negative) rewrite of the target scene
/// (semantic) or action (motion). Windows are kept from the original query.
pub fn rewrite_query(
    sample: &SyntheticSample,
    bank: &ConceptBank,
    cfg: &GenerationConfig,
    dimension: RewriteDimension,
    polarity: Polarity,
    tag: usize,
    rng: &mut impl Rng,
) -> Result<Rewrite> {
    let (ts, ta) = sample.layout.target;
    let mut scene = bank.scenes[ts].clone();
    let mut action = bank.actions[ta].clone();
    match polarity {
        Polarity::Positive => match dimension {
            RewriteDimension::Semantic => scene = perturb_within_cosine(&scene, SYNONYM_MIN_COSINE, rng),
            RewriteDimension::Motion => action = perturb_within_cosine(&action, SYNONYM_MIN_COSINE, rng),
        },
        Polarity::HardNegative => {
            // The swapped pair must not occur anywhere in the video.
            let present: Vec<(usize, usize)> = sample.layout.segments.iter().map(Segment::pair).collect();
            let candidates: Vec<usize> = match dimension {
                RewriteDimension::Semantic => (0..bank.scenes.len())
                    .filter(|&s| s != ts && !present.contains(&(s, ta)))
                    .collect(),
                RewriteDimension::Motion => (0..bank.actions.len())
                    .filter(|&a| a != ta && !present.contains(&(ts, a)))
                    .collect(),
            };
            let pick = *candidates.get(rng.random_range(0..candidates.len().max(1))).ok_or_else(|| {
                Error::Generation(format!("no alternative {dimension:?} concept for {}", sample.annotation.qid))
            })?;
            match dimension {
                RewriteDimension::Semantic => scene = bank.scenes[pick].clone(),
                RewriteDimension::Motion => action = bank.actions[pick].clone(),
            }
        }
    }
    let text = bank.encode_query(&scene, &action, cfg.words_per_query, cfg.feature_noise_sigma, rng)?;
    let dim_tag = match dimension {
        RewriteDimension::Semantic => "sem",
        RewriteDimension::Motion => "mot",
    };
    let pol_tag = match polarity {
        Polarity::Positive => "pos",
        Polarity::HardNegative => "neg",
    };
    let record = AnnotationRecord {
        qid: format!("{}_{dim_tag}{pol_tag}{tag}", sample.annotation.qid),
        text,
        polarity,
        aux: true,
        ..sample.annotation.clone()
    };
    Ok(Rewrite { record, scene, action })
}

/// A generated dataset together with its latent layouts.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub bank: ConceptBank,
    pub samples: Vec<SyntheticSample>,
    pub dataset: Dataset,
}

pub fn generate_corpus(cfg: &GenerationConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let bank = cfg.bank()?;
    let mut samples = Vec::with_capacity(cfg.num_videos);
    let mut dataset = Dataset::default();
    for i in 0..cfg.num_videos {
        let index = cfg.video_offset + i;
        let mut rng = video_rng(cfg.seed, index);
        let sample = synthesize_pair(&bank, cfg, index, &mut rng)?;
        dataset.videos.insert(sample.video.vid.clone(), sample.video.clone());
        dataset.annotations.push(sample.annotation.clone());
        dataset
            .annotations
            .extend(generate_caption_pairs(&sample, &bank, cfg, &mut rng)?);
        let r = &cfg.rewrites;
        for (dim, pol, count) in [
            (RewriteDimension::Semantic, Polarity::Positive, r.semantic_pos),
            (RewriteDimension::Semantic, Polarity::HardNegative, r.semantic_neg),
            (RewriteDimension::Motion, Polarity::Positive, r.motion_pos),
            (RewriteDimension::Motion, Polarity::HardNegative, r.motion_neg),
        ] {
            for tag in 0..count {
                let rw = rewrite_query(&sample, &bank, cfg, dim, pol, tag, &mut rng)?;
                dataset.annotations.push(rw.record);
            }
        }
        samples.push(sample);
    }
    Ok(SyntheticCorpus {
        bank,
        samples,
        dataset,
    })
}
