//! Training of the K per-modality networks.
//!
//! Each minibatch draws one transform, runs every network on both Siamese
//! branches, and only then assembles and applies the per-network updates,
//! so all networks see peer outputs from before any update in that
//! minibatch. Runs are deterministic given the seed.

mod adamw;
mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{self, Architecture, Network};
use crate::ndgrad::{DenseArray, Graph, Var};
use crate::synthdata::Dataset;
use crate::transforms::{sample_transform, TransformSet};

pub use adamw::{adamw_step, AdamParams, OptimizerState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Image-level labels only.
    #[default]
    Weak,
    /// Pixel masks, one independent network per modality.
    FullySupervised,
}

impl Supervision {
    pub(crate) fn code(self) -> u64 {
        match self {
            Supervision::Weak => 0,
            Supervision::FullySupervised => 1,
        }
    }

    pub(crate) fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(Supervision::Weak),
            1 => Some(Supervision::FullySupervised),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub weights: LossWeights,
    pub transforms: TransformSet,
    pub seed: u64,
    pub mode: Supervision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            adam: AdamParams::default(),
            weights: LossWeights::default(),
            transforms: TransformSet::ALL,
            seed: 0,
            mode: Supervision::Weak,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.transforms.is_empty() {
            return Err(Error::invalid("at least one transform kind must be enabled"));
        }
        self.adam.validate()?;
        self.weights.validate()
    }

    /// Optimizer steps in one epoch over `n` samples and `k` networks.
    pub fn steps_per_epoch(&self, n: usize, k: usize) -> usize {
        k * n.div_ceil(self.batch_size)
    }
}

/// One logged row: epoch means of a network's loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub losses: LossBreakdown,
    /// Seconds since the trainer was created.
    pub wall_seconds: f64,
}

/// Total loss of one network on one minibatch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub epoch: u32,
    pub batch: usize,
    pub modality: u32,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub steps: Vec<StepLoss>,
    /// Sample order of each epoch, as `(epoch, order)`.
    pub shuffles: Vec<(u32, Vec<usize>)>,
    pub optimizer_steps: usize,
}

pub const LOG_HEADER: &str = "epoch,modality,L_C,L_KD,L_ER,L_CMER,total,lambda_e,wall_seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.3}",
                l.epoch, l.modality, l.l_c, l.l_kd, l.l_er, l.l_cmer, l.total, l.lambda_e, r.wall_seconds
            );
        }
        s
    }

    pub fn shuffle_csv(&self) -> String {
        let mut s = String::from("epoch,order\n");
        for (e, order) in &self.shuffles {
            let order: Vec<String> = order.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{e},{}", order.join(" "));
        }
        s
    }

    /// Rows of one network, in epoch order.
    pub fn rows_for(&self, modality: u32) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.losses.modality == modality)
    }
}

/// `[B, 1, H, W]` images of modality `k` for the given sample indices.
pub fn batch_images(ds: &Dataset, idx: &[usize], k: usize) -> DenseArray<f32> {
    let (h, w) = (ds.height, ds.width);
    let mut data = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        data.extend_from_slice(ds.samples[i].images[k].data());
    }
    DenseArray::new(vec![idx.len(), 1, h, w], data).expect("batch extents")
}

/// `[B, C]` one-hot image labels.
pub fn batch_labels(ds: &Dataset, idx: &[usize]) -> DenseArray<f32> {
    let data = idx.iter().flat_map(|&i| ds.samples[i].label.iter().copied()).collect();
    DenseArray::new(vec![idx.len(), ds.classes], data).expect("label extents")
}

/// `[B, C, H, W]` one-hot pixel targets; lesion pixels take the sample's
/// class, everything else is background.
pub fn batch_pixel_targets(ds: &Dataset, idx: &[usize]) -> DenseArray<f32> {
    let (c, hw) = (ds.classes, ds.height * ds.width);
    let mut data = vec![0.0f32; idx.len() * c * hw];
    for (b, &i) in idx.iter().enumerate() {
        let s = &ds.samples[i];
        let fg = s.class_index().max(1);
        for (q, &m) in s.mask.iter().enumerate() {
            let ch = if m != 0 { fg } else { 0 };
            data[(b * c + ch) * hw + q] = 1.0;
        }
    }
    DenseArray::new(vec![idx.len(), c, ds.height, ds.width], data).expect("target extents")
}

fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Default)]
struct Accum {
    weight: f64,
    l_c: f64,
    l_kd: f64,
    l_er: f64,
    l_cmer: f64,
    total: f64,
}

impl Accum {
    fn add(&mut self, b: &LossBreakdown, weight: f64) {
        self.weight += weight;
        self.l_c += weight * b.l_c;
        self.l_kd += weight * b.l_kd;
        self.l_er += weight * b.l_er;
        self.l_cmer += weight * b.l_cmer;
        self.total += weight * b.total;
    }

    fn mean(&self, modality: u32, epoch: u32, lambda_e: f64) -> LossBreakdown {
        let w = self.weight;
        LossBreakdown {
            modality,
            epoch,
            l_c: self.l_c / w,
            l_kd: self.l_kd / w,
            l_er: self.l_er / w,
            l_cmer: self.l_cmer / w,
            lambda_e,
            total: self.total / w,
        }
    }
}

/// Drives training one epoch at a time.
pub struct Trainer<'d> {
    config: TrainConfig,
    data: &'d Dataset,
    state: TrainState,
    log: TrainLog,
    started: Instant,
}

impl<'d> Trainer<'d> {
    /// Fresh networks with the standard architecture, one per modality.
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        let arch = Architecture::standard(1, data.classes);
        let networks = (0..data.modalities as u32)
            .map(|k| Network::init(config.seed, k, &arch))
            .collect::<Result<Vec<_>>>()?;
        let optimizers = networks.iter().map(|n| OptimizerState::new(&n.params)).collect();
        let state = TrainState {
            supervision: config.mode,
            epoch: 0,
            networks,
            optimizers,
        };
        Self::resume(config, data, state)
    }

    /// Continues from a saved state at its epoch boundary.
    pub fn resume(config: TrainConfig, data: &'d Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if state.networks.len() != data.modalities {
            return Err(Error::invalid(format!(
                "{} networks for a {}-modality dataset",
                state.networks.len(),
                data.modalities
            )));
        }
        if state.supervision != config.mode {
            return Err(Error::invalid(format!(
                "state was trained as {:?}, config asks for {:?}",
                state.supervision, config.mode
            )));
        }
        if config.mode == Supervision::Weak && data.modalities == 1 && (config.weights.kd || config.weights.cmer) {
            return Err(Error::invalid(
                "single-modality training cannot use the kd or cmer terms; disable them",
            ));
        }
        let arch = state.architecture().clone();
        state.check_architecture(&arch)?;
        if arch.input_channels() != 1 || arch.classes() != data.classes {
            return Err(Error::invalid("network does not match the dataset's channels or classes"));
        }
        for (net, opt) in state.networks.iter().zip(&state.optimizers) {
            opt.check_shapes(&net.params)?;
        }
        Ok(Self {
            config,
            data,
            state,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn into_parts(self) -> (TrainState, TrainLog) {
        (self.state, self.log)
    }

    /// Runs the next epoch and returns its log rows.
    pub fn run_epoch(&mut self) -> Result<&[LogRow]> {
        let epoch = self.state.epoch;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);

        let k = self.data.modalities;
        let mut acc: Vec<Accum> = (0..k).map(|_| Accum::default()).collect();
        let first_row = self.log.rows.len();
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let parts = match self.config.mode {
                Supervision::Weak => self.weak_step(epoch, b, idx, &mut rng)?,
                Supervision::FullySupervised => self.supervised_step(epoch, b, idx)?,
            };
            for (m, part) in parts.iter().enumerate() {
                acc[m].add(part, idx.len() as f64);
                self.log.steps.push(StepLoss {
                    epoch,
                    batch: b,
                    modality: m as u32,
                    total: part.total,
                });
            }
        }
        let lambda = match self.config.mode {
            Supervision::Weak => losses::lambda_e(epoch, self.config.weights.schedule_t),
            Supervision::FullySupervised => 0.0,
        };
        let wall = self.started.elapsed().as_secs_f64();
        for (m, a) in acc.iter().enumerate() {
            self.log.rows.push(LogRow {
                losses: a.mean(m as u32, epoch, lambda),
                wall_seconds: wall,
            });
        }
        self.log.shuffles.push((epoch, order));
        self.state.epoch += 1;
        Ok(&self.log.rows[first_row..])
    }

    fn fail_non_finite(epoch: u32, batch: usize, modality: usize) -> Error {
        Error::NonFinite {
            what: format!("loss of modality {modality} at epoch {epoch}, batch {batch}"),
        }
    }

    fn weak_step(&mut self, epoch: u32, batch: usize, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<LossBreakdown>> {
        let data = self.data;
        let t = sample_transform(rng, &self.config.transforms, data.height, data.width);
        let y = batch_labels(data, idx);
        let mut g = Graph::<f32>::new();
        let mut vars: Vec<Vec<Var>> = Vec::with_capacity(data.modalities);
        let mut outs = Vec::with_capacity(data.modalities);
        for (k, net) in self.state.networks.iter().enumerate() {
            let x = g.input(batch_images(data, idx, k));
            let v = net.bind(&mut g);
            outs.push(model::siamese_step(&mut g, &net.arch, &v, x, &t)?);
            vars.push(v);
        }
        let mut parts = Vec::with_capacity(data.modalities);
        for k in 0..data.modalities {
            let (total, mut part) = losses::network_objective(&mut g, k, &outs, &y, &self.config.weights, epoch)?;
            part.modality = self.state.networks[k].modality;
            if !part.total.is_finite() {
                return Err(Self::fail_non_finite(epoch, batch, k));
            }
            let mut grads = g.backward(total)?;
            let grads: Vec<_> = vars[k].iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
            adamw_step(
                &mut self.state.networks[k].params,
                &grads,
                &mut self.state.optimizers[k],
                &self.config.adam,
            )?;
            self.log.optimizer_steps += 1;
            parts.push(part);
        }
        Ok(parts)
    }

    fn supervised_step(&mut self, epoch: u32, batch: usize, idx: &[usize]) -> Result<Vec<LossBreakdown>> {
        let data = self.data;
        let target = batch_pixel_targets(data, idx);
        let mut parts = Vec::with_capacity(data.modalities);
        for k in 0..data.modalities {
            let net = &self.state.networks[k];
            let modality = net.modality;
            let mut g = Graph::<f32>::new();
            let x = g.input(batch_images(data, idx, k));
            let v = net.bind(&mut g);
            let f = model::forward(&mut g, &net.arch, &v, x)?;
            let probs = g.channel_softmax(f.features)?;
            let loss = losses::segmentation_loss(&mut g, probs, &target)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Self::fail_non_finite(epoch, batch, k));
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<_> = v.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
            adamw_step(
                &mut self.state.networks[k].params,
                &grads,
                &mut self.state.optimizers[k],
                &self.config.adam,
            )?;
            self.log.optimizer_steps += 1;
            parts.push(LossBreakdown {
                modality,
                epoch,
                l_c: value,
                l_kd: 0.0,
                l_er: 0.0,
                l_cmer: 0.0,
                lambda_e: 0.0,
                total: value,
            });
        }
        Ok(parts)
    }

    /// Runs the remaining epochs, calling `after_epoch` once each has
    /// finished (for checkpointing).
    pub fn run(mut self, mut after_epoch: impl FnMut(&TrainState, &[LogRow]) -> Result<()>) -> Result<(TrainState, TrainLog)> {
        while !self.is_finished() {
            self.run_epoch()?;
            let n = self.data.modalities;
            let rows = &self.log.rows[self.log.rows.len() - n..];
            after_epoch(&self.state, rows)?;
        }
        Ok(self.into_parts())
    }
}

/// Weakly supervised training with the full objective.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(TrainState, TrainLog)> {
    if config.mode != Supervision::Weak {
        return Err(Error::invalid("train expects weak supervision; use train_fully_supervised"));
    }
    Trainer::new(*config, data)?.run(|_, _| Ok(()))
}

/// Upper-bound reference: per-modality networks trained on pixel masks.
pub fn train_fully_supervised(config: &TrainConfig, data: &Dataset) -> Result<(TrainState, TrainLog)> {
    if config.mode != Supervision::FullySupervised {
        return Err(Error::invalid("train_fully_supervised expects the fully_supervised mode"));
    }
    Trainer::new(*config, data)?.run(|_, _| Ok(()))
}

/// Trains with per-epoch checkpoints `dir/epoch_NNN` and a final
/// checkpoint `final_path`.
pub fn train_with_checkpoints(
    trainer: Trainer<'_>,
    dir: &Path,
    final_path: &Path,
) -> Result<(TrainState, TrainLog)> {
    let (state, log) = trainer.run(|state, _| save_checkpoint(state, dir.join(format!("epoch_{:03}", state.epoch))))?;
    save_checkpoint(&state, final_path)?;
    Ok((state, log))
}
