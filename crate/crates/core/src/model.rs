//! Full model: encoder, highlight head, query construction and decoder.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{build_denoise_queries, combine_queries, Decoder, DecoderOutput, QueryBatch};
use crate::denoise::NoisedMoment;
use crate::encoder::{Encoder, EncoderInput, EncoderOutput, InputDims, ModelDims};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore, SpanMlp};
use crate::ops;
use crate::saliency::{positional_encode, reference_spans, salience_scores, select_content_queries, SalienceWeights};

/// How decoder queries are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Top-K salient memory rows and their reference spans.
    #[default]
    Guided,
    /// Input-agnostic learned anchors with zero content.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub inputs: InputDims,
    pub k: usize,
    pub query_mode: QueryMode,
    /// Stops decoder gradients from reaching the encoder through guided
    /// content queries; forward values are unaffected.
    #[serde(default = "detach_default")]
    pub detach_content: bool,
}

fn detach_default() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LearnedQueries {
    /// `(K, 2)` pre-sigmoid anchors.
    anchors: Tensor,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub encoded: EncoderOutput,
    /// Raw salience scores `(B, L)`.
    pub scores: Tensor,
    /// Clip index behind each guided query; empty for learned queries.
    pub selected: Vec<Vec<usize>>,
    /// Reference spans `(B, K, 2)` of guided queries.
    pub reference: Option<Tensor>,
    pub queries: QueryBatch,
    pub decoded: DecoderOutput,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    salience: SalienceWeights,
    reference_head: SpanMlp,
    learned: Option<LearnedQueries>,
    decoder: Decoder,
}

impl Model {
    /// Builds a freshly initialized model; parameters depend only on `seed`.
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let encoder = Encoder::new(&mut store, &cfg.dims, &cfg.inputs, &mut rng)?;
        let salience = SalienceWeights::new(&mut store, "salience", cfg.dims.d, &mut rng)?;
        let reference_head = SpanMlp::new(&mut store, "reference_head", cfg.dims.d, &mut rng)?;
        let learned = match cfg.query_mode {
            QueryMode::Guided => None,
            QueryMode::Learned => Some(LearnedQueries {
                anchors: store.uniform("learned_anchors".into(), &[cfg.k, 2], 2.0, &mut rng)?,
            }),
        };
        let decoder = Decoder::new(&mut store, &cfg.dims, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            salience,
            reference_head,
            learned,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Encoder pass and raw salience scores.
    pub fn encode(&self, input: &EncoderInput, ctx: &Ctx) -> Result<(EncoderOutput, Tensor)> {
        let encoded = self.encoder.forward(input, ctx)?;
        let scores = salience_scores(&encoded.x_s, &encoded.memory, &self.salience)?;
        Ok((encoded, scores))
    }

    /// Decoder stage on an existing encoding. `denoise` holds one noised
    /// moment list per sample, or nothing at inference.
    pub fn decode(
        &self,
        encoded: EncoderOutput,
        scores: Tensor,
        clip_lens: &[usize],
        denoise: Option<&[Vec<NoisedMoment>]>,
        ctx: &Ctx,
    ) -> Result<ModelOutput> {
        let (b, _, d) = encoded.memory.dims3()?;
        let k = self.cfg.k;
        let (matched, selected, reference) = match &self.learned {
            None => {
                let score_values: Vec<Vec<f64>> = ops::to_vec2(&scores)?;
                let content = select_content_queries(&encoded.memory, &score_values, clip_lens, k)?;
                let reference = reference_spans(&content.queries, &self.reference_head)?;
                let position = positional_encode(&reference, d)?;
                let content_queries = if self.cfg.detach_content {
                    content.queries.detach()
                } else {
                    content.queries
                };
                (combine_queries(&content_queries, &position)?, content.indices, Some(reference))
            }
            Some(learned) => {
                let anchors = ops::sigmoid(&learned.anchors)?;
                let position = positional_encode(&anchors, d)?.unsqueeze(0)?.broadcast_as((b, k, d))?.contiguous()?;
                (position, Vec::new(), None)
            }
        };
        let dn = match denoise {
            Some(groups) => groups
                .iter()
                .map(|g| build_denoise_queries(g, d, self.dtype()))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let queries = QueryBatch::assemble(&matched, &dn)?;
        let decoded = self.decoder.decode(&queries, &encoded.x_s, &encoded.memory, clip_lens, ctx)?;
        Ok(ModelOutput {
            encoded,
            scores,
            selected,
            reference,
            queries,
            decoded,
        })
    }

    pub fn forward(&self, input: &EncoderInput, denoise: Option<&[Vec<NoisedMoment>]>, ctx: &Ctx) -> Result<ModelOutput> {
        let (encoded, scores) = self.encode(input, ctx)?;
        self.decode(encoded, scores, &input.clip_lens, denoise, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{build_noise_groups, NoiseConfig};
    use crate::feature_store::MomentSpan;
    use rand::Rng;

    fn cfg(mode: QueryMode) -> ModelConfig {
        ModelConfig {
            dims: ModelDims {
                d: 16,
                heads: 2,
                tower_layers: 1,
                encoder_layers: 1,
                decoder_layers: 2,
                ffn_dim: 32,
                l_max: 16,
                dropout: 0.0,
            },
            inputs: InputDims { d_m: 8, d_s: 8, d_t: 8 },
            k: 4,
            query_mode: mode,
            detach_content: true,
        }
    }

    fn input(seed: u64) -> EncoderInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize| ops::constant((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), n, DType::F64).unwrap();
        EncoderInput {
            motion: r(2 * 8 * 8).reshape((2, 8, 8)).unwrap(),
            semantic: r(2 * 8 * 8).reshape((2, 8, 8)).unwrap(),
            text: r(2 * 3 * 8).reshape((2, 3, 8)).unwrap(),
            clip_lens: vec![8, 6],
            text_lens: vec![3, 2],
        }
    }

    #[test]
    fn forward_shapes_for_both_query_modes() {
        for mode in [QueryMode::Guided, QueryMode::Learned] {
            let model = Model::new(cfg(mode), DType::F64, 0).unwrap();
            let out = model.forward(&input(1), None, &Ctx::eval()).unwrap();
            assert_eq!(out.scores.dims(), &[2, 8]);
            assert_eq!(out.decoded.last().spans.dims(), &[2, 4, 2]);
            assert_eq!(out.reference.is_some(), mode == QueryMode::Guided);
            if mode == QueryMode::Guided {
                assert!(out.selected[1].iter().all(|&c| c < 6));
            }
        }
    }

    #[test]
    fn denoise_groups_leave_matched_outputs_unchanged() {
        let model = Model::new(cfg(QueryMode::Guided), DType::F64, 0).unwrap();
        let x = input(1);
        let plain = model.forward(&x, None, &Ctx::eval()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gts = [vec![MomentSpan::new(0.3, 0.2).unwrap()], vec![MomentSpan::new(0.6, 0.3).unwrap(), MomentSpan::new(0.2, 0.1).unwrap()]];
        let groups: Vec<_> = gts.iter().map(|g| build_noise_groups(g, &NoiseConfig::default(), 8, &mut rng)).collect();
        let noisy = model.forward(&x, Some(&groups), &Ctx::eval()).unwrap();
        assert_eq!(noisy.queries.num_queries(), 4 + 8);
        for layer in 0..2 {
            let a = ops::to_vec1(&plain.decoded.layers[layer].spans).unwrap();
            let b = ops::to_vec1(&noisy.decoded.layers[layer].spans.narrow(1, 0, 4).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn detaching_content_keeps_values_and_cuts_encoder_gradient() {
        let x = input(4);
        let attached = Model::new(ModelConfig { detach_content: false, ..cfg(QueryMode::Guided) }, DType::F64, 5).unwrap();
        let detached = Model::new(cfg(QueryMode::Guided), DType::F64, 5).unwrap();
        let a = attached.forward(&x, None, &Ctx::eval()).unwrap();
        let b = detached.forward(&x, None, &Ctx::eval()).unwrap();
        assert_eq!(ops::to_vec1(&a.decoded.last().spans).unwrap(), ops::to_vec1(&b.decoded.last().spans).unwrap());
        let grad_of = |m: &Model, out: &ModelOutput, name: &str| {
            let grads = out.decoded.last().logits.sum_all().unwrap().backward().unwrap();
            ops::to_vec1(grads.get(m.store().get(name).unwrap().as_tensor()).unwrap()).unwrap()
        };
        let name = "encoder.fusion.weight";
        assert!(attached.store().get(name).is_some(), "parameter {name} renamed");
        assert_ne!(grad_of(&attached, &a, name), grad_of(&detached, &b, name));
        assert_eq!(grad_of(&attached, &a, "decoder.class_head.weight"), grad_of(&detached, &b, "decoder.class_head.weight"));
    }

    #[test]
    fn initialization_depends_only_on_seed() {
        let a = Model::new(cfg(QueryMode::Guided), DType::F64, 3).unwrap();
        let b = Model::new(cfg(QueryMode::Guided), DType::F64, 3).unwrap();
        for name in a.store().names() {
            assert_eq!(a.store().values(name).unwrap(), b.store().values(name).unwrap());
        }
    }
}
