//! Central finite-difference checks of autograd gradients (double precision).

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::ops;

/// Outcome of comparing analytic and numeric partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Largest `|a - n| / (rel_tol * max(|a|, |n|) + abs_floor)`; `<= 1` passes.
    pub worst_ratio: f64,
    pub worst: (usize, f64, f64),
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }

    fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            checked: self.checked + other.checked,
            worst_ratio: self.worst_ratio.max(other.worst_ratio),
            worst: if other.worst_ratio > self.worst_ratio { other.worst } else { self.worst },
        }
    }
}

impl Default for GradReport {
    fn default() -> Self {
        Self {
            checked: 0,
            worst_ratio: 0.0,
            worst: (0, 0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    /// Absolute floor for derivatives that are numerically zero.
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

fn compare(report: &mut GradReport, index: usize, analytic: f64, numeric: f64, tol: &Tolerance) {
    let ratio = (analytic - numeric).abs() / (tol.rel * analytic.abs().max(numeric.abs()) + tol.abs_floor);
    report.checked += 1;
    if ratio > report.worst_ratio || !ratio.is_finite() {
        report.worst_ratio = if ratio.is_finite() { ratio } else { f64::INFINITY };
        report.worst = (index, analytic, numeric);
    }
}

/// Checks `d f(x) / dx` for a scalar-valued `f` at `x0`.
pub fn check_input<F>(f: F, x0: &[f64], shape: &[usize], tol: &Tolerance) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let var = Var::from_vec(x0.to_vec(), shape, &Device::Cpu)?;
    let grads = f(var.as_tensor())?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => ops::to_vec1(g)?,
        None => vec![0.0; x0.len()],
    };
    let mut report = GradReport::default();
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + tol.step;
        let up = ops::scalar(&f(&Tensor::from_vec(x.clone(), shape, &Device::Cpu)?)?)?;
        x[i] = x0[i] - tol.step;
        let down = ops::scalar(&f(&Tensor::from_vec(x.clone(), shape, &Device::Cpu)?)?)?;
        x[i] = x0[i];
        compare(&mut report, i, analytic[i], (up - down) / (2.0 * tol.step), tol);
    }
    Ok(report)
}

/// Checks the gradient of `loss()` with respect to the listed entries of
/// stored parameter `name`; the parameter is restored afterwards.
pub fn check_param<F>(store: &ParamStore, name: &str, entries: &[usize], loss: F, tol: &Tolerance) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::Config("gradient checks need f64 parameters".into()));
    }
    let var = store.get(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
    let grads = loss()?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => ops::to_vec1(g)?,
        None => vec![0.0; var.elem_count()],
    };
    let original = store.values(name)?;
    let mut x = original.clone();
    let mut report = GradReport::default();
    for &i in entries {
        x[i] = original[i] + tol.step;
        store.assign(name, &x)?;
        let up = ops::scalar(&loss()?)?;
        x[i] = original[i] - tol.step;
        store.assign(name, &x)?;
        let down = ops::scalar(&loss()?)?;
        x[i] = original[i];
        compare(&mut report, i, analytic[i], (up - down) / (2.0 * tol.step), tol);
    }
    store.assign(name, &original)?;
    Ok(report)
}

/// Runs [`check_param`] over every parameter, probing up to `per_param`
/// evenly spaced entries of each.
pub fn check_all_params<F>(store: &ParamStore, per_param: usize, loss: F, tol: &Tolerance) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    let mut total = GradReport::default();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name).map_or(0, |v| v.elem_count());
        let stride = n.div_ceil(per_param.max(1)).max(1);
        let entries: Vec<usize> = (0..n).step_by(stride).collect();
        let r = check_param(store, &name, &entries, &loss, tol)?;
        if !r.passed() {
            log::warn!("gradient mismatch in {name}: {:?}", r.worst);
        }
        total = total.merge(r);
    }
    Ok(total)
}
