//! Parameter storage and the transformer building blocks shared by the
//! encoder and decoder. All blocks are pre-norm.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{read_param_file, write_param_file, ParamData};
use crate::ops;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    dtype: DType,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamIndexEntry {
    pub shape: Vec<usize>,
    pub file: String,
}

pub const PARAM_INDEX_FILE: &str = "index.json";

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Shares the parameters whose names satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            params: self.params.iter().filter(|(n, _)| keep(n)).map(|(n, v)| (n.clone(), v.clone())).collect(),
            dtype: self.dtype,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    fn register(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let t = ops::constant(values, shape, self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name, var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn assign(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let t = ops::constant(values.to_vec(), var.shape().clone(), self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        ops::to_vec1(var.as_tensor())
    }

    /// Writes one MSDF matrix per parameter plus a JSON index of shapes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for (name, var) in &self.params {
            let dims = var.dims().to_vec();
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, rest @ ..] => (*r, rest.iter().product()),
            };
            let data = match self.dtype {
                DType::F64 => ParamData::F64(var.flatten_all()?.to_vec1::<f64>()?),
                _ => ParamData::F32(var.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?),
            };
            let file = format!("{name}.msdf");
            write_param_file(dir.join(&file), rows, cols, &data)?;
            index.insert(name.clone(), ParamIndexEntry { shape: dims, file });
        }
        let p = dir.join(PARAM_INDEX_FILE);
        fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))
    }

    /// Loads values saved by [`ParamStore::save`] into an already-built store.
    pub fn load(&self, dir: &Path) -> Result<()> {
        let p = dir.join(PARAM_INDEX_FILE);
        let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let index: BTreeMap<String, ParamIndexEntry> = serde_json::from_str(&raw)?;
        let expected: Vec<&String> = self.params.keys().collect();
        let found: Vec<&String> = index.keys().collect();
        if expected != found {
            return Err(Error::Format(format!(
                "checkpoint parameters do not match the model ({} vs {} tensors)",
                found.len(),
                expected.len()
            )));
        }
        for (name, entry) in &index {
            let var = &self.params[name];
            if var.dims() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    entry.shape,
                    var.dims()
                )));
            }
            let (_, _, data) = read_param_file(dir.join(&entry.file))?;
            let t = match data {
                ParamData::F64(v) => Tensor::from_vec(v, var.shape(), &Device::Cpu)?,
                ParamData::F32(v) => Tensor::from_vec(v, var.shape(), &Device::Cpu)?,
            };
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Per-call forward state: dropout rate and its random stream.
pub struct Ctx {
    dropout: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = &self.rng else {
            return Ok(x.clone());
        };
        if self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = ops::constant(mask, x.shape().clone(), x.dtype())?;
        Ok((x * mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weights stored as `(in, out)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng)?,
            bias: store.constant(format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = x.elem_count() / fan_in.max(1);
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0)?,
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

/// Additive attention bias from a boolean allow-mask: 0 where allowed, a
/// large negative value elsewhere. `allow` has shape `(B, Tq, Tk)`.
pub fn attention_bias(allow: &[Vec<Vec<bool>>], dtype: DType) -> Result<Tensor> {
    let b = allow.len();
    let tq = allow.first().map_or(0, Vec::len);
    let tk = allow.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let values: Vec<f64> = allow
        .iter()
        .flatten()
        .flatten()
        .map(|&ok| if ok { 0.0 } else { MASKED })
        .collect();
    ops::constant(values, (b, 1, tq, tk), dtype)
}

/// Key-padding bias `(B, 1, 1, Tk)` from per-sample valid lengths.
pub fn key_padding_bias(lengths: &[usize], max_len: usize, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |j| if j < n { 0.0 } else { MASKED }))
        .collect();
    ops::constant(values, (lengths.len(), 1, 1, max_len), dtype)
}

const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Returns the attended output `(B, Tq, d)` and the weights `(B, h, Tq, Tk)`.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let scale = ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? / scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let weights = ops::softmax_last_dim(&scores)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        Ok((self.o.forward(&out)?, weights))
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, key, value, bias)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = ctx.dropout(&self.up.forward(x)?.relu()?)?;
        self.down.forward(&h)
    }
}

/// Three-layer perceptron `d -> d -> d -> 2` with ReLU hidden units and a
/// sigmoid output, producing `(center, span)` in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct SpanMlp {
    layers: [Linear; 3],
}

impl SpanMlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), dim, dim, rng)?,
                Linear::new(store, &format!("{name}.1"), dim, dim, rng)?,
                Linear::new(store, &format!("{name}.2"), dim, 2, rng)?,
            ],
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.relu()?;
        let h = self.layers[1].forward(&h)?.relu()?;
        self.layers[2].forward(&h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.logits(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_restores_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng).unwrap();
        let x = Tensor::new(&[[0.1f64, 0.2, 0.3]], &Device::Cpu).unwrap();
        let before = ops::to_vec2(&lin.forward(&x).unwrap()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        store.assign("lin.weight", &[0.0; 6]).unwrap();
        assert_ne!(ops::to_vec2(&lin.forward(&x).unwrap()).unwrap(), before);
        store.load(dir.path()).unwrap();
        assert_eq!(ops::to_vec2(&lin.forward(&x).unwrap()).unwrap(), before);
    }

    #[test]
    fn load_rejects_mismatched_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new(DType::F64);
        Linear::new(&mut a, "lin", 3, 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let mut b = ParamStore::new(DType::F64);
        Linear::new(&mut b, "lin", 3, 4, &mut rng).unwrap();
        assert!(matches!(b.load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ops::to_vec2(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn eval_ctx_leaves_input_untouched() {
        let x = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let y = Ctx::eval().dropout(&x).unwrap();
        assert_eq!(ops::to_vec1(&y).unwrap(), vec![1.0, 2.0, 3.0]);
        let z = Ctx::train(0.5, 1).dropout(&x).unwrap();
        for (a, b) in ops::to_vec1(&z).unwrap().iter().zip([1.0, 2.0, 3.0]) {
            assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-12);
        }
    }
}
