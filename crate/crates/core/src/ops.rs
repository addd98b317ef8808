//! Differentiable tensor helpers missing from (or not differentiable in) candle.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::Result;

struct SoftmaxLastDim;

fn softmax_rows<T: num_float::Float>(src: &[T], width: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for (s, d) in src.chunks(width).zip(dst.chunks_mut(width)) {
        let max = s.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (x, y) in s.iter().zip(d.iter_mut()) {
            *y = (*x - max).exp();
            sum = sum + *y;
        }
        for y in d.iter_mut() {
            *y = *y / sum;
        }
    }
    dst
}

/// Minimal float abstraction so the kernel covers both precisions.
mod num_float {
    pub trait Float: Copy + std::ops::Sub<Output = Self> + std::ops::Add<Output = Self> + std::ops::Div<Output = Self> {
        fn zero() -> Self;
        fn neg_infinity() -> Self;
        fn max(self, other: Self) -> Self;
        fn exp(self) -> Self;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                fn zero() -> Self {
                    0.0
                }
                fn neg_infinity() -> Self {
                    <$t>::NEG_INFINITY
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
            }
        };
    }
    impl_float!(f32);
    impl_float!(f64);
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "tvg-softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o1, o2) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let dims = layout.shape().dims();
        let width = *dims.last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[o1..o2], width)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[o1..o2], width)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, Shape::from_dims(dims)))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // dL/dx = s * (g - sum(g * s))
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad_res.broadcast_sub(&dot)?)?))
    }
}

/// Softmax over the last dimension with a fused forward kernel.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Constant tensor from `f64` values in the given dtype.
pub fn constant(values: Vec<f64>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_vec2(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
