//! Segmentation metrics for CAMs: binarization, Dice, average symmetric
//! surface distance, max fusion across modalities, threshold sweeps and
//! under/over-activation ratios.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::model;
use crate::ndgrad::{DenseArray, Graph};
use crate::synthdata::{self, Dataset, ModalitySample};
use crate::trainloop::{batch_images, Supervision, TrainState};
use crate::transforms::{self, sample_transform, AffineTransform, TransformSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CAM_DUMP_MAGIC: &[u8; 8] = b"EQCMCAM1";

/// Tolerance of the Dice / confusion-count identity check.
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
    /// Pixel spacing along rows and columns.
    pub spacing: (f64, f64),
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::invalid(format!(
                "{} mask values for a {h}x{w} grid",
                bits.len()
            )));
        }
        Ok(Self {
            h,
            w,
            bits,
            spacing: (1.0, 1.0),
        })
    }

    pub fn from_u8(h: usize, w: usize, values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Self::new(h, w, values.iter().map(|&v| v == 1).collect())
    }

    pub fn with_spacing(mut self, dy: f64, dx: f64) -> Self {
        self.spacing = (dy, dx);
        self
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels with at least one background 4-neighbour; pixels
    /// outside the grid count as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if !self.get(i, j) {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i + 1 == self.h
                    || j + 1 == self.w
                    || !self.get(i - 1, j)
                    || !self.get(i + 1, j)
                    || !self.get(i, j - 1)
                    || !self.get(i, j + 1);
                if edge {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn same_extents(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(Error::shape(op, &[a.h, a.w], &[b.h, b.w]));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} is outside [0, 1]")));
    }
    Ok(())
}

/// Pixel is foreground iff `map >= tau`. `map` is `[H, W]`.
pub fn binarize(map: &DenseArray<f32>, tau: f64) -> Result<BinaryMask> {
    check_tau(tau)?;
    let [h, w] = map.dims2()?;
    BinaryMask::new(h, w, map.data().iter().map(|&v| v as f64 >= tau).collect())
}

/// `2 |P ∩ G| / (|P| + |G|)`, and 1 when both are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_extents("dsc", pred, gt)?;
    let inter = pred.bits.iter().zip(&gt.bits).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

fn surface_sum(from: &[(usize, usize)], to: &[(usize, usize)], (dy, dx): (f64, f64)) -> f64 {
    from.iter()
        .map(|&(i, j)| {
            to.iter()
                .map(|&(a, b)| {
                    let y = (i as f64 - a as f64) * dy;
                    let x = (j as f64 - b as f64) * dx;
                    y * y + x * x
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Average symmetric surface distance between the boundaries of two
/// nonempty masks, in units of `pred.spacing`.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_extents("assd", pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Undefined("surface distance of an empty mask"));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let s = surface_sum(&bp, &bg, pred.spacing) + surface_sum(&bg, &bp, pred.spacing);
    Ok(s / (bp.len() + bg.len()) as f64)
}

/// Pixelwise maximum of equally shaped maps.
pub fn fuse_max(maps: &[&DenseArray<f32>]) -> Result<DenseArray<f32>> {
    let Some((first, rest)) = maps.split_first() else {
        return Err(Error::invalid("fusing an empty list of maps"));
    };
    let mut out = (*first).clone();
    for m in rest {
        if m.shape() != out.shape() {
            return Err(Error::shape("fuse_max", out.shape(), m.shape()));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        same_extents("confusion", pred, gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// `(FN / TP, FP / TP)`.
    pub fn ratios(&self) -> Result<(f64, f64)> {
        if self.tp == 0 {
            return Err(Error::Undefined("activation ratios with zero true positives"));
        }
        let tp = self.tp as f64;
        Ok((self.fn_ as f64 / tp, self.fp as f64 / tp))
    }

    /// `2 TP / (2 TP + FP + FN)`, if the denominator is nonzero.
    pub fn dice(&self) -> Option<f64> {
        let den = 2 * self.tp + self.fp + self.fn_;
        (den > 0).then(|| 2.0 * self.tp as f64 / den as f64)
    }
}

/// Under-activation `r_u = FN/TP` and over-activation `r_o = FP/TP`.
pub fn confusion_ratios(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    Confusion::of(pred, gt)?.ratios()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub mean_dsc: f64,
    pub std_dsc: f64,
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and standard deviation of per-sample DSC at each threshold.
pub fn threshold_sweep(maps: &[DenseArray<f32>], gts: &[BinaryMask], grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    if maps.len() != gts.len() {
        return Err(Error::invalid(format!("{} maps for {} masks", maps.len(), gts.len())));
    }
    grid.iter()
        .map(|&tau| {
            check_tau(tau)?;
            let scores = maps
                .iter()
                .zip(gts)
                .map(|(m, g)| dsc(&binarize(m, tau)?, g))
                .collect::<Result<Vec<_>>>()?;
            let (mean_dsc, std_dsc) = mean_std(&scores);
            Ok(SweepPoint { tau, mean_dsc, std_dsc })
        })
        .collect()
}

pub fn sweep_csv(curve: &[SweepPoint]) -> String {
    let mut s = String::from("tau,mean_dsc,std_dsc\n");
    for p in curve {
        let _ = writeln!(s, "{:.2},{:.6},{:.6}", p.tau, p.mean_dsc, p.std_dsc);
    }
    s
}

/// Metrics of one map source (a modality or the fused maps).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    /// `None` when no sample had a defined distance.
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    /// Samples left out of the ASSD mean because a mask was empty.
    pub assd_excluded: usize,
    /// Ratios of the pooled confusion counts; `None` when TP is 0.
    pub r_u: Option<f64>,
    pub r_o: Option<f64>,
    pub pooled: Confusion,
    pub per_sample_dsc: Vec<f64>,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    /// Evaluated samples (those with a lesion).
    pub samples: usize,
    /// Lesion-free samples, which have no foreground to segment.
    pub skipped_negatives: usize,
    pub sample_ids: Vec<u64>,
    /// Per-modality rows in modality order, then `fused`.
    pub rows: Vec<MetricRow>,
    /// Largest deviation between DSC and `2TP / (2TP + FP + FN)`.
    pub identity_max_error: f64,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn fused(&self) -> &MetricRow {
        self.rows.last().expect("report has rows")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "tau = {:.2}, samples = {} ({} lesion-free skipped)",
            self.tau, self.samples, self.skipped_negatives
        );
        let _ = writeln!(
            s,
            "{:<12} {:>16} {:>18} {:>9} {:>8} {:>8}",
            "source", "DSC", "ASSD", "excluded", "r_u", "r_o"
        );
        for r in &self.rows {
            let assd = match (r.assd_mean, r.assd_std) {
                (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
                _ => "undefined".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<12} {:>16} {:>18} {:>9} {:>8} {:>8}",
                r.name,
                format!("{:.4} ± {:.4}", r.dsc_mean, r.dsc_std),
                assd,
                r.assd_excluded,
                opt(r.r_u),
                opt(r.r_o)
            );
        }
        s
    }
}

fn build_row(name: String, maps: &[DenseArray<f32>], gts: &[BinaryMask], tau: f64, grid: &[f64], worst: &mut f64) -> Result<MetricRow> {
    let mut dscs = Vec::with_capacity(maps.len());
    let mut dists = Vec::new();
    let mut excluded = 0;
    let mut pooled = Confusion::default();
    for (m, g) in maps.iter().zip(gts) {
        let p = binarize(m, tau)?;
        let d = dsc(&p, g)?;
        let c = Confusion::of(&p, g)?;
        if let Some(id) = c.dice() {
            *worst = worst.max((d - id).abs());
        }
        pooled.merge(&c);
        dscs.push(d);
        match assd(&p, g) {
            Ok(a) => dists.push(a),
            Err(Error::Undefined(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    let (dsc_mean, dsc_std) = mean_std(&dscs);
    let (assd_mean, assd_std) = if dists.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&dists);
        (Some(m), Some(s))
    };
    let (r_u, r_o) = match pooled.ratios() {
        Ok((u, o)) => (Some(u), Some(o)),
        Err(_) => (None, None),
    };
    Ok(MetricRow {
        name,
        dsc_mean,
        dsc_std,
        assd_mean,
        assd_std,
        assd_excluded: excluded,
        r_u,
        r_o,
        pooled,
        per_sample_dsc: dscs,
        sweep: threshold_sweep(maps, gts, grid)?,
    })
}

/// Scores precomputed maps. `maps[k][i]` is the `[H, W]` map of modality
/// `k` on sample `i`; a `fused` row uses their pixelwise maximum.
pub fn evaluate_maps(
    maps: &[Vec<DenseArray<f32>>],
    gts: &[BinaryMask],
    sample_ids: Vec<u64>,
    skipped_negatives: usize,
    tau: f64,
    grid: &[f64],
) -> Result<EvalReport> {
    check_tau(tau)?;
    if maps.is_empty() {
        return Err(Error::invalid("no modalities to evaluate"));
    }
    if let Some(bad) = maps.iter().find(|m| m.len() != gts.len()) {
        return Err(Error::invalid(format!("{} maps for {} masks", bad.len(), gts.len())));
    }
    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(maps.len() + 1);
    for (k, m) in maps.iter().enumerate() {
        rows.push(build_row(format!("modality_{k}"), m, gts, tau, grid, &mut worst)?);
    }
    let fused = (0..gts.len())
        .map(|i| fuse_max(&maps.iter().map(|m| &m[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    rows.push(build_row("fused".to_string(), &fused, gts, tau, grid, &mut worst)?);
    if worst > IDENTITY_TOL {
        return Err(Error::invalid(format!(
            "DSC disagrees with the confusion counts by {worst:e}"
        )));
    }
    Ok(EvalReport {
        tau,
        samples: gts.len(),
        skipped_negatives,
        sample_ids,
        rows,
        identity_max_error: worst,
    })
}

const EVAL_BATCH: usize = 32;

/// `[H, W]` maps for the given samples from every network in `state`:
/// foreground CAMs for weakly supervised networks, foreground softmax
/// probabilities for fully supervised ones. Each sample uses the channel of
/// its own class (the only foreground channel in the binary setting), and
/// lesion-free samples use the first foreground channel.
pub fn predict_maps(state: &TrainState, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<DenseArray<f32>>>> {
    if state.networks.len() != ds.modalities {
        return Err(Error::invalid(format!(
            "{} networks for a {}-modality dataset",
            state.networks.len(),
            ds.modalities
        )));
    }
    let (h, w) = (ds.height, ds.width);
    let mut out = vec![Vec::with_capacity(idx.len()); ds.modalities];
    for (k, net) in state.networks.iter().enumerate() {
        for chunk in idx.chunks(EVAL_BATCH) {
            let mut g = Graph::<f32>::new();
            let x = g.input(batch_images(ds, chunk, k));
            let v = net.bind_frozen(&mut g);
            let f = model::forward(&mut g, &net.arch, &v, x)?;
            let (maps, offset) = match state.supervision {
                Supervision::Weak => (model::cam_from_features(&mut g, f.features)?, 1),
                Supervision::FullySupervised => (g.channel_softmax(f.features)?, 0),
            };
            let m = g.value(maps);
            let ch = m.shape()[1];
            for (b, &i) in chunk.iter().enumerate() {
                let c = ds.samples[i].class_index().max(1) - offset;
                let plane = (b * ch + c) * h * w;
                out[k].push(DenseArray::new(vec![h, w], m.data()[plane..plane + h * w].to_vec())?);
            }
        }
    }
    Ok(out)
}

/// Indices and ground-truth masks of the samples that contain a lesion.
pub fn positive_samples(ds: &Dataset) -> Result<(Vec<usize>, Vec<BinaryMask>)> {
    let mut idx = Vec::new();
    let mut gts = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if s.is_positive() && s.foreground_pixels() > 0 {
            idx.push(i);
            gts.push(BinaryMask::from_u8(ds.height, ds.width, &s.mask)?);
        }
    }
    Ok((idx, gts))
}

/// Runs the networks of `state` over the lesion-bearing samples of `ds` and
/// scores their maps at `tau`, with a sweep over `grid`. Returns the report
/// and the maps that produced it.
pub fn evaluate(state: &TrainState, ds: &Dataset, tau: f64, grid: &[f64]) -> Result<(EvalReport, Vec<Vec<DenseArray<f32>>>)> {
    ds.validate()?;
    let (idx, gts) = positive_samples(ds)?;
    if idx.is_empty() {
        return Err(Error::invalid("split has no lesion-bearing samples to evaluate"));
    }
    let maps = predict_maps(state, ds, &idx)?;
    let ids = idx.iter().map(|&i| ds.samples[i].id).collect();
    let report = evaluate_maps(&maps, &gts, ids, ds.len() - idx.len(), tau, grid)?;
    Ok((report, maps))
}

/// Writes maps in the dataset container layout under the CAM magic: one
/// record per evaluated sample with its label, mask and K maps.
pub fn save_cam_dump(ds: &Dataset, idx: &[usize], maps: &[Vec<DenseArray<f32>>], path: impl AsRef<Path>) -> Result<()> {
    if maps.len() != ds.modalities || maps.iter().any(|m| m.len() != idx.len()) {
        return Err(Error::invalid("CAM dump needs one map per modality and sample"));
    }
    let samples = idx
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let s = &ds.samples[i];
            ModalitySample {
                id: s.id,
                images: maps.iter().map(|m| m[j].clone()).collect(),
                label: s.label.clone(),
                mask: s.mask.clone(),
            }
        })
        .collect();
    let dump = Dataset {
        modalities: ds.modalities,
        classes: ds.classes,
        height: ds.height,
        width: ds.width,
        samples,
    };
    let mut w = Writer::new();
    synthdata::write_into(&mut w, &dump, CAM_DUMP_MAGIC);
    w.finish(path.as_ref())
}

/// Reads a CAM dump; each sample's `images` hold its K maps.
pub fn load_cam_dump(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = Reader::open(path.as_ref(), "CAM dump")?;
    synthdata::decode(&mut r, CAM_DUMP_MAGIC)
}

/// `n` fixed (sample, transform) pairs over `ds`: samples cycle in index
/// order, transforms are drawn from `set` with a generator seeded by `seed`.
pub fn residual_pairs(ds: &Dataset, n: usize, seed: u64, set: &TransformSet) -> Result<Vec<(usize, AffineTransform)>> {
    if ds.is_empty() {
        return Err(Error::invalid("residual pairs need a non-empty split"));
    }
    if set.is_empty() {
        return Err(Error::invalid("residual pairs need at least one transform kind"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| (i % ds.len(), sample_transform(&mut rng, set, ds.height, ds.width)))
        .collect())
}

/// Mean masked equivariance residual `||π(M) − M̃||₂` of the CAMs of every
/// network in `state`, averaged over `pairs` and modalities. The norm runs
/// over the valid pixels of all foreground channels.
pub fn equivariance_residual(state: &TrainState, ds: &Dataset, pairs: &[(usize, AffineTransform)]) -> Result<f64> {
    if state.networks.len() != ds.modalities {
        return Err(Error::invalid(format!(
            "{} networks for a {}-modality dataset",
            state.networks.len(),
            ds.modalities
        )));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no residual pairs"));
    }
    let mut total = 0.0;
    for (k, net) in state.networks.iter().enumerate() {
        for &(i, t) in pairs {
            let mut g = Graph::<f32>::new();
            let x = g.input(batch_images(ds, &[i], k));
            let v = net.bind_frozen(&mut g);
            let out = model::siamese_step(&mut g, &net.arch, &v, x, &t)?;
            let (moved, mask) = transforms::apply(&t, g.value(out.original.cam))?;
            let target = g.value(out.transformed.cam);
            let shape = target.shape().to_vec();
            let m = mask.broadcast::<f32>(&shape)?;
            let sq: f64 = moved
                .data()
                .iter()
                .zip(target.data())
                .zip(m.data())
                .map(|((&a, &b), &w)| w as f64 * (a as f64 - b as f64).powi(2))
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(total / (pairs.len() * state.networks.len()) as f64)
}
