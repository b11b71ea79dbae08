//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::array::{DenseArray, Real};
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// How the analytic and numeric gradients of one tensor are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMeasure {
    /// Worst [`relative_error`] over the checked scalars.
    #[default]
    Elementwise,
    /// `||a - n||₂ / max(||a||₂, ||n||₂, 1e-8)` over the checked scalars.
    /// Insensitive to scalars whose gradient is small next to the rest of
    /// the tensor, which single precision cannot resolve.
    TensorNorm,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Relative step: each scalar moves by `step * max(1, |θ|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many scalars per tensor (at least 64 are kept when
    /// subsampling). `None` checks every scalar.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    /// The measure compared against `tolerance`.
    pub measure: ErrorMeasure,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            max_per_tensor: None,
            seed: 0,
            measure: ErrorMeasure::Elementwise,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Worst elementwise relative error.
    pub max_rel_error: f64,
    /// Normwise relative error of the checked scalars.
    pub norm_rel_error: f64,
    /// The error under the configured measure.
    pub error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub measure: ErrorMeasure,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    /// Largest error under the configured measure.
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.error).fold(0.0, f64::max)
    }

    /// Largest elementwise relative error, whatever the measure.
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradient of the scalar built by `build` against central
/// differences, tensor by tensor. `build` receives one parameter node per
/// entry of `params`, in order.
pub fn grad_check<T, F>(
    mut build: F,
    params: &mut [(String, DenseArray<T>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&mut build, params)?;
    let analytic: Vec<DenseArray<f64>> = analytic.iter().map(DenseArray::cast).collect();
    grad_check_against(&analytic, build, params, cfg)
}

/// Gradients of the scalar built by `build` with respect to `params`.
pub fn analytic_gradients<T, F>(build: &mut F, params: &[(String, DenseArray<T>)]) -> Result<Vec<DenseArray<T>>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| grads.take(v).expect("parameter gradient"))
        .collect())
}

/// Like [`grad_check`], but checks externally computed gradients (for
/// example from a lower-precision graph) against central differences of
/// `build`.
pub fn grad_check_against<T, F>(
    analytic: &[DenseArray<f64>],
    mut build: F,
    params: &mut [(String, DenseArray<T>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    if analytic.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for ((name, p), a) in params.iter().zip(analytic) {
        if a.shape() != p.shape() {
            return Err(Error::invalid(format!("gradient of {name} has the wrong shape")));
        }
    }
    let mut eval = |params: &[(String, DenseArray<T>)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, p)| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss).as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let len = params[t].1.len();
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(cap) if len > cap.max(64) => {
                let mut idx = rand::seq::index::sample(&mut rng, len, cap.max(64)).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &indices {
            let orig = params[t].1.data()[i];
            let h = cfg.step * orig.as_f64().abs().max(1.0);
            params[t].1.data_mut()[i] = T::from_f64(orig.as_f64() + h);
            let fp = eval(params)?;
            params[t].1.data_mut()[i] = T::from_f64(orig.as_f64() - h);
            let fm = eval(params)?;
            params[t].1.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[t].data()[i];
            worst = worst.max(relative_error(a, numeric));
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let norm = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        let error = match cfg.measure {
            ErrorMeasure::Elementwise => worst,
            ErrorMeasure::TensorNorm => norm,
        };
        tensors.push(TensorCheck {
            name: params[t].0.clone(),
            checked: indices.len(),
            max_rel_error: worst,
            norm_rel_error: norm,
            error,
            passed: error <= cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        measure: cfg.measure,
        tensors,
    })
}
