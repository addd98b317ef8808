//! Motion/semantics disentangled encoder.
//!
//! Clip motion features and clip semantic features each query the text in
//! their own cross-attention tower. The two tower outputs are concatenated
//! along the feature axis and mapped back to `d` by a learned affine fusion.
//! A learned salience token is prepended and the sequence runs through a
//! self-attention encoder; its first output row is `x_s`, the rest is the
//! clip memory.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{key_padding_bias, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    pub tower_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub l_max: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 256,
            heads: 8,
            tower_layers: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 1024,
            l_max: 75,
            dropout: 0.1,
        }
    }
}

impl ModelDims {
    /// Small configuration used by tests and the synthetic experiments.
    pub fn test_scale() -> Self {
        Self {
            d: 32,
            heads: 4,
            ffn_dim: 64,
            l_max: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.heads == 0 || self.d % self.heads != 0 {
            errs.push(format!("d={} must be divisible by heads={}", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            errs.push(format!("d={} must be divisible by 4 for span position encoding", self.d));
        }
        if self.l_max == 0 || self.ffn_dim == 0 {
            errs.push("l_max and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub d_m: usize,
    pub d_s: usize,
    pub d_t: usize,
}

/// Fixed sinusoidal clip position table `(len, d)`.
pub fn clip_positions(len: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut values = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let freq = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            values.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    ops::constant(values, (len, d), dtype)
}

/// Batched encoder inputs, zero-padded to the longest clip and text lengths.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub motion: Tensor,
    pub semantic: Tensor,
    pub text: Tensor,
    pub clip_lens: Vec<usize>,
    pub text_lens: Vec<usize>,
}

impl EncoderInput {
    pub fn batch_size(&self) -> usize {
        self.clip_lens.len()
    }

    pub fn max_clips(&self) -> usize {
        self.motion.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Salience-token output `(B, d)`.
    pub x_s: Tensor,
    /// Clip memory `(B, L, d)`.
    pub memory: Tensor,
    /// Fused tower output before the self-attention encoder `(B, L, d)`.
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
struct CrossBlock {
    norm_q: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl CrossBlock {
    fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dims.d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.d, dims.heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dims.d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dims.d, dims.ffn_dim, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, text: &Tensor, text_bias: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_q.forward(x)?;
        let a = self.attn.forward(&h, text, text, Some(text_bias))?;
        let x = (x + ctx.dropout(&a)?)?;
        let f = self.ff.forward(&self.norm_ff.forward(&x)?, ctx)?;
        Ok((&x + ctx.dropout(&f)?)?)
    }
}

/// Which cross-modal tower a call refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    /// Motion clips query the text.
    Motion,
    /// Semantic clips query the text.
    Semantic,
}

#[derive(Debug, Clone)]
pub struct CrossTower {
    blocks: Vec<CrossBlock>,
    norm: LayerNorm,
}

impl CrossTower {
    fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..dims.tower_layers)
            .map(|i| CrossBlock::new(store, &format!("{name}.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dims.d)?,
        })
    }

    /// `queries` `(B, L, d)` already carry clip positions; `text` `(B, M, d)`
    /// carries none.
    pub fn forward(&self, queries: &Tensor, text: &Tensor, text_lens: &[usize], ctx: &Ctx) -> Result<Tensor> {
        if text_lens.iter().any(|&m| m == 0) {
            return Err(Error::Input("query text has no words".into()));
        }
        let bias = key_padding_bias(text_lens, text.dims()[1], text.dtype())?;
        let mut x = queries.clone();
        for block in &self.blocks {
            x = block.forward(&x, text, &bias, ctx)?;
        }
        self.norm.forward(&x)
    }
}

#[derive(Debug, Clone)]
struct SelfBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl SelfBlock {
    fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dims.d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.d, dims.heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dims.d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dims.d, dims.ffn_dim, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let a = self.attn.forward(&h, &h, &h, Some(bias))?;
        let x = (x + ctx.dropout(&a)?)?;
        let f = self.ff.forward(&self.norm_ff.forward(&x)?, ctx)?;
        Ok((&x + ctx.dropout(&f)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    dims: ModelDims,
    proj_motion: Linear,
    proj_semantic: Linear,
    proj_text: Linear,
    text_norm: LayerNorm,
    motion_tower: CrossTower,
    semantic_tower: CrossTower,
    fusion: Linear,
    salience_token: Tensor,
    salience_slot: Tensor,
    layers: Vec<SelfBlock>,
    out_norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, dims: &ModelDims, inputs: &InputDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let token_bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            dims: *dims,
            proj_motion: Linear::new(store, "encoder.proj_motion", inputs.d_m, d, rng)?,
            proj_semantic: Linear::new(store, "encoder.proj_semantic", inputs.d_s, d, rng)?,
            proj_text: Linear::new(store, "encoder.proj_text", inputs.d_t, d, rng)?,
            text_norm: LayerNorm::new(store, "encoder.text_norm", d)?,
            motion_tower: CrossTower::new(store, "encoder.motion_tower", dims, rng)?,
            semantic_tower: CrossTower::new(store, "encoder.semantic_tower", dims, rng)?,
            fusion: Linear::new(store, "encoder.fusion", 2 * d, d, rng)?,
            salience_token: store.uniform("encoder.salience_token".into(), &[d], token_bound, rng)?,
            salience_slot: store.uniform("encoder.salience_slot".into(), &[d], token_bound, rng)?,
            layers: (0..dims.encoder_layers)
                .map(|i| SelfBlock::new(store, &format!("encoder.layers.{i}"), dims, rng))
                .collect::<Result<_>>()?,
            out_norm: LayerNorm::new(store, "encoder.out_norm", d)?,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn tower(&self, which: Tower) -> &CrossTower {
        match which {
            Tower::Motion => &self.motion_tower,
            Tower::Semantic => &self.semantic_tower,
        }
    }

    /// Projects text words to model width (no positions).
    pub fn project_text(&self, text: &Tensor) -> Result<Tensor> {
        self.text_norm.forward(&self.proj_text.forward(text)?)
    }

    /// Projects clip features of one stream and adds clip positions.
    pub fn project_clips(&self, which: Tower, clips: &Tensor) -> Result<Tensor> {
        let proj = match which {
            Tower::Motion => &self.proj_motion,
            Tower::Semantic => &self.proj_semantic,
        };
        let x = proj.forward(clips)?;
        let pos = clip_positions(x.dims()[1], self.dims.d, x.dtype())?;
        Ok(x.broadcast_add(&pos)?)
    }

    /// Both towers followed by the fusion map: `(B, L, d)`.
    pub fn fused_clips(&self, input: &EncoderInput, ctx: &Ctx) -> Result<Tensor> {
        let text = self.project_text(&input.text)?;
        let motion = self.project_clips(Tower::Motion, &input.motion)?;
        let semantic = self.project_clips(Tower::Semantic, &input.semantic)?;
        let m = self.motion_tower.forward(&motion, &text, &input.text_lens, ctx)?;
        let s = self.semantic_tower.forward(&semantic, &text, &input.text_lens, ctx)?;
        fuse(&m, &s, &self.fusion)
    }

    /// Prepends the salience token and runs the self-attention stack.
    pub fn encode(&self, fused: &Tensor, clip_lens: &[usize], ctx: &Ctx) -> Result<EncoderOutput> {
        let (_, len, _) = fused.dims3()?;
        let pos = clip_positions(len, self.dims.d, fused.dtype())?;
        self.encode_with_positions(fused, clip_lens, &pos, ctx)
    }

    /// [`Encoder::encode`] with an explicit clip position table `(L, d)`.
    pub fn encode_with_positions(
        &self,
        fused: &Tensor,
        clip_lens: &[usize],
        clip_pos: &Tensor,
        ctx: &Ctx,
    ) -> Result<EncoderOutput> {
        let (b, len, d) = fused.dims3()?;
        if len > self.dims.l_max || clip_lens.iter().any(|&l| l > self.dims.l_max) {
            return Err(Error::Input(format!("{len} clips exceed l_max={}", self.dims.l_max)));
        }
        if clip_lens.len() != b {
            return Err(Error::Shape(format!("{} clip lengths for batch of {b}", clip_lens.len())));
        }
        let token = (&self.salience_token + &self.salience_slot)?.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let clips = fused.broadcast_add(clip_pos)?;
        let mut x = Tensor::cat(&[&token, &clips], 1)?;
        let lens: Vec<usize> = clip_lens.iter().map(|l| l + 1).collect();
        let bias = key_padding_bias(&lens, len + 1, fused.dtype())?;
        x = ctx.dropout(&x)?;
        for layer in &self.layers {
            x = layer.forward(&x, &bias, ctx)?;
        }
        let x = self.out_norm.forward(&x)?;
        Ok(EncoderOutput {
            x_s: x.narrow(1, 0, 1)?.squeeze(1)?,
            memory: x.narrow(1, 1, len)?,
            fused: fused.clone(),
        })
    }

    pub fn forward(&self, input: &EncoderInput, ctx: &Ctx) -> Result<EncoderOutput> {
        let fused = self.fused_clips(input, ctx)?;
        self.encode(&fused, &input.clip_lens, ctx)
    }
}

/// `phi(tmct ⊕ ssct)`: feature-axis concatenation then an affine map to `d`.
pub fn fuse(motion: &Tensor, semantic: &Tensor, phi: &Linear) -> Result<Tensor> {
    if motion.dims()[..motion.rank() - 1] != semantic.dims()[..semantic.rank() - 1] {
        return Err(Error::Shape(format!(
            "tower outputs disagree: {:?} vs {:?}",
            motion.dims(),
            semantic.dims()
        )));
    }
    phi.forward(&Tensor::cat(&[motion, semantic], motion.rank() - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Encoder) {
        let mut store = ParamStore::new(DType::F64);
        let dims = ModelDims {
            d: 16,
            heads: 4,
            ffn_dim: 32,
            l_max: 16,
            dropout: 0.0,
            ..ModelDims::default()
        };
        let inputs = InputDims { d_m: 8, d_s: 8, d_t: 8 };
        let enc = Encoder::new(&mut store, &dims, &inputs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, enc)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ops::constant(v, shape, DType::F64).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        ops::scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn tower_is_invariant_to_text_order() {
        let (_, enc) = setup();
        let q = randn(&[1, 6, 16], 1);
        let text = randn(&[1, 4, 16], 2);
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let shuffled = text.index_select(&perm, 1).unwrap();
        for which in [Tower::Motion, Tower::Semantic] {
            let a = enc.tower(which).forward(&q, &text, &[4], &Ctx::eval()).unwrap();
            let b = enc.tower(which).forward(&q, &shuffled, &[4], &Ctx::eval()).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-5);
        }
    }

    #[test]
    fn single_word_gets_all_attention() {
        let (_, enc) = setup();
        let q = randn(&[1, 5, 16], 1);
        let text = randn(&[1, 1, 16], 2);
        let block = &enc.motion_tower.blocks[0];
        let (_, w) = block.attn.forward_with_weights(&q, &text, &text, None).unwrap();
        for v in ops::to_vec1(&w).unwrap() {
            assert_eq!(v, 1.0);
        }
        let a = enc.motion_tower.forward(&q, &text, &[1], &Ctx::eval()).unwrap();
        let b = enc.motion_tower.forward(&q, &text, &[1], &Ctx::eval()).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
    }

    #[test]
    fn empty_text_is_rejected() {
        let (_, enc) = setup();
        let q = randn(&[1, 5, 16], 1);
        let text = randn(&[1, 1, 16], 2);
        assert!(matches!(
            enc.motion_tower.forward(&q, &text, &[0], &Ctx::eval()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn fusion_with_identity_motion_half_returns_motion() {
        let mut store = ParamStore::new(DType::F64);
        let phi = Linear::new(&mut store, "phi", 8, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut w = vec![0.0; 32];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        store.assign("phi.weight", &w).unwrap();
        let m = randn(&[1, 3, 4], 5);
        let s = randn(&[1, 3, 4], 6);
        let out = fuse(&m, &s, &phi).unwrap();
        assert!(max_abs_diff(&out, &m) < 1e-15);

        let one = fuse(&randn(&[1, 4], 1), &randn(&[1, 4], 2), &phi).unwrap();
        assert_eq!(one.dims(), &[1, 4]);
        assert!(matches!(fuse(&randn(&[2, 4], 1), &randn(&[3, 4], 2), &phi), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_shapes_and_limits() {
        let (_, enc) = setup();
        let fused = randn(&[1, 10, 16], 4);
        let out = enc.encode(&fused, &[10], &Ctx::eval()).unwrap();
        assert_eq!(out.memory.dims(), &[1, 10, 16]);
        assert_eq!(out.x_s.dims(), &[1, 16]);
        let again = enc.encode(&fused, &[10], &Ctx::eval()).unwrap();
        assert_eq!(max_abs_diff(&out.memory, &again.memory), 0.0);
        let too_long = randn(&[1, 17, 16], 4);
        assert!(matches!(enc.encode(&too_long, &[17], &Ctx::eval()), Err(Error::Input(_))));
    }

    #[test]
    fn zero_input_rows_differ_only_through_positions() {
        let (store, enc) = setup();
        for name in store.names().filter(|n| n.ends_with(".bias")).cloned().collect::<Vec<_>>() {
            let n = store.get(&name).unwrap().elem_count();
            store.assign(&name, &vec![0.0; n]).unwrap();
        }
        let fused = Tensor::zeros((1, 6, 16), DType::F64, &Device::Cpu).unwrap();
        let no_pos = Tensor::zeros((6, 16), DType::F64, &Device::Cpu).unwrap();
        let out = enc.encode_with_positions(&fused, &[6], &no_pos, &Ctx::eval()).unwrap();
        let rows = ops::to_vec2(&out.memory.squeeze(0).unwrap()).unwrap();
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(&rows[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // With positions the rows separate, while x_s still comes from the token path.
        let with_pos = enc.encode(&fused, &[6], &Ctx::eval()).unwrap();
        let rows = ops::to_vec2(&with_pos.memory.squeeze(0).unwrap()).unwrap();
        assert!(rows[0].iter().zip(&rows[1]).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
