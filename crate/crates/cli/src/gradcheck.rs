//! Finite-difference check of the full training objective: 32-bit analytic
//! gradients of every network against 64-bit central differences, scored
//! per tensor by normwise relative error.

use eqcam::losses::{lambda_e, network_objective, LossWeights};
use eqcam::model::{siamese_step, Architecture, Network};
use eqcam::ndgrad::{analytic_gradients, grad_check_against, ErrorMeasure, GradCheckConfig, GradCheckReport};
use eqcam::synthdata::{generate, Dataset, DatasetSpec, NUM_CLASSES};
use eqcam::trainloop::{batch_images, batch_labels};
use eqcam::transforms::AffineTransform;
use eqcam::{DenseArray, Graph, Real, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

/// Pass threshold on the normwise relative error of every tensor.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub seed: u64,
    pub size: usize,
    pub modalities: usize,
    pub batch: usize,
    pub weights: LossWeights,
    /// Epoch at which the objective is evaluated.
    pub epoch: u32,
    pub transforms: Vec<AffineTransform>,
    pub step: f64,
}

impl GradCheckSetup {
    /// 8x8 images, two modalities, every loss term on at full equivariance
    /// weight, under one permutation and one resampling transform.
    pub fn standard(seed: u64) -> Self {
        let weights = LossWeights::default();
        Self {
            seed,
            size: 8,
            modalities: 2,
            batch: 4,
            weights,
            epoch: weights.schedule_t,
            transforms: vec![AffineTransform::Rotate90 { k: 1 }, AffineTransform::Scale { s: 1.15 }],
            step: 1e-6,
        }
    }
}

/// One network under one transform.
#[derive(Clone, Debug)]
pub struct NetworkCheck {
    pub modality: usize,
    pub transform: AffineTransform,
    pub report: GradCheckReport,
}

pub struct Outcome {
    pub lambda_e: f64,
    pub checks: Vec<NetworkCheck>,
}

impl Outcome {
    /// Largest normwise relative error over all tensors and checks.
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_error()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= TOLERANCE
    }
}

pub fn dataset(s: &GradCheckSetup) -> Result<Dataset, CliError> {
    let spec = DatasetSpec {
        n_train: s.batch,
        n_val: 1,
        n_test: 1,
        height: s.size,
        width: s.size,
        lesion_prevalence: 0.5,
        seed: s.seed,
        ..DatasetSpec::with_modalities(s.modalities)
    };
    Ok(generate(&spec)?.train)
}

/// Objective of network `k`, its parameters given by `own` and its peers
/// bound frozen.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real>(
    g: &mut Graph<T>,
    own: &[Var],
    k: usize,
    nets: &[Network<T>],
    xs: &[DenseArray<T>],
    y: &DenseArray<T>,
    t: &AffineTransform,
    weights: &LossWeights,
    epoch: u32,
) -> eqcam::Result<Var> {
    let mut outs = Vec::with_capacity(nets.len());
    for (m, net) in nets.iter().enumerate() {
        let x = g.input(xs[m].clone());
        let vars = if m == k { own.to_vec() } else { net.bind_frozen(g) };
        outs.push(siamese_step(g, &net.arch, &vars, x, t)?);
    }
    Ok(network_objective(g, k, &outs, y, weights, epoch)?.0)
}

/// Replaces the initializer's zero biases with values of magnitude in
/// `[0.05, 0.2]` and random sign. With zero biases, every all-zero input
/// patch (clipped background) sits exactly on a relu kink, where central
/// differences do not estimate the gradient.
fn offset_biases(nets: &mut [Network<f32>], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for net in nets {
        for (name, p) in &mut net.params {
            if name.ends_with(".bias") {
                for b in p.data_mut() {
                    let mag: f32 = rng.random_range(0.05..=0.2);
                    *b = if rng.random_bool(0.5) { mag } else { -mag };
                }
            }
        }
    }
}

pub fn run(setup: &GradCheckSetup) -> Result<Outcome, CliError> {
    let ds = dataset(setup)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let xs32: Vec<DenseArray<f32>> = (0..setup.modalities).map(|k| batch_images(&ds, &idx, k)).collect();
    let xs64: Vec<DenseArray<f64>> = xs32.iter().map(DenseArray::cast).collect();
    let y32 = batch_labels(&ds, &idx);
    let y64: DenseArray<f64> = y32.cast();
    let arch = Architecture::standard(1, NUM_CLASSES);
    let mut nets32 = (0..setup.modalities as u32)
        .map(|m| Network::<f32>::init(setup.seed, m, &arch))
        .collect::<eqcam::Result<Vec<_>>>()?;
    offset_biases(&mut nets32, setup.seed);
    let nets64: Vec<Network<f64>> = nets32.iter().map(Network::cast).collect();
    let (w, epoch) = (setup.weights, setup.epoch);
    let cfg = GradCheckConfig {
        step: setup.step,
        tolerance: TOLERANCE,
        max_per_tensor: None,
        seed: setup.seed,
        measure: ErrorMeasure::TensorNorm,
    };

    let mut checks = Vec::new();
    for t in &setup.transforms {
        for k in 0..setup.modalities {
            let mut build32 = |g: &mut Graph<f32>, p: &[Var]| objective(g, p, k, &nets32, &xs32, &y32, t, &w, epoch);
            let analytic: Vec<DenseArray<f64>> = analytic_gradients(&mut build32, &nets32[k].params)?
                .iter()
                .map(DenseArray::cast)
                .collect();
            let mut params = nets64[k].params.clone();
            let build64 = |g: &mut Graph<f64>, p: &[Var]| objective(g, p, k, &nets64, &xs64, &y64, t, &w, epoch);
            let report = grad_check_against(&analytic, build64, &mut params, &cfg)?;
            checks.push(NetworkCheck { modality: k, transform: *t, report });
        }
    }
    Ok(Outcome { lambda_e: lambda_e(epoch, w.schedule_t), checks })
}
