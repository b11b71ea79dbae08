//! Run configuration: TOML sections with defaults, a config file and flag
//! overrides layered in that order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use eqcam::evalkit::default_grid;
use eqcam::losses::LossWeights;
use eqcam::synthdata::DatasetSpec;
use eqcam::trainloop::{AdamParams, Supervision, TrainConfig};
use eqcam::transforms::TransformSet;

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds both the dataset and the training run.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub modalities: usize,
    pub lesion_prevalence: f64,
    pub texture_amplitude: f64,
    /// Per-modality noise; empty uses the defaults for the modality count.
    pub noise_sigma: Vec<f64>,
}

/// Learning rate of CLI runs. At the library default of 5e-5 the small
/// network on 32x32 phantoms does not leave its initial classification
/// plateau within 40 epochs.
pub const DEFAULT_LR: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub transforms: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_kd: f64,
    #[serde(rename = "schedule_T")]
    pub schedule_t: u32,
    pub toggles: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tau: f64,
    pub grid: Vec<f64>,
    /// `train`, `val` or `test`.
    pub split: String,
    pub dump_cams: bool,
    pub residual_pairs: usize,
    pub residual_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Required fused-DSC gain of the full objective over the baseline.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub version: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            meta: None,
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out: None, data: None, ckpt: None }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            height: d.height,
            width: d.width,
            modalities: d.modalities,
            lesion_prevalence: d.lesion_prevalence,
            texture_amplitude: d.texture_amplitude,
            noise_sigma: Vec::new(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: DEFAULT_LR,
            weight_decay: t.adam.weight_decay,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            transforms: t.transforms.to_string(),
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda_kd: w.lambda_kd, schedule_t: w.schedule_t, toggles: w.toggles() }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tau: 0.5,
            grid: default_grid(),
            split: "test".into(),
            dump_cams: false,
            residual_pairs: 64,
            residual_seed: 0,
        }
    }
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { margin: 0.05 }
    }
}

/// A resolved configuration plus the dotted keys that were set explicitly
/// (by file or flag) rather than defaulted.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

impl RunConfig {
    /// Defaults, then the file at `file`, then `overrides` (dotted key,
    /// value), validated.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Loaded, CliError> {
        let mut table = Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        let mut explicit = BTreeSet::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            let user: Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
            merge(&mut table, user, "", &mut explicit)?;
        }
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
            explicit.insert(key.clone());
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(Loaded { config, explicit })
    }

    /// Checks every section against the invariants of the module it feeds.
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset_spec()?.validate()?;
        self.train_config(Supervision::Weak)?.validate()?;
        if !(0.0..=1.0).contains(&self.eval.tau) {
            return Err(CliError::Config(format!("eval.tau must be in [0, 1], got {}", self.eval.tau)));
        }
        if self.eval.grid.is_empty() || self.eval.grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CliError::Config("eval.grid must be a non-empty list of values in [0, 1]".into()));
        }
        if !matches!(self.eval.split.as_str(), "train" | "val" | "test") {
            return Err(CliError::Config(format!(
                "eval.split must be train, val or test, got {:?}",
                self.eval.split
            )));
        }
        if self.eval.residual_pairs == 0 {
            return Err(CliError::Config("eval.residual_pairs must be positive".into()));
        }
        if !self.ablate.margin.is_finite() {
            return Err(CliError::Config("ablate.margin must be finite".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, CliError> {
        let d = &self.data;
        let mut spec = DatasetSpec::with_modalities(d.modalities);
        spec.modalities = d.modalities;
        spec.n_train = d.n_train;
        spec.n_val = d.n_val;
        spec.n_test = d.n_test;
        spec.height = d.height;
        spec.width = d.width;
        spec.lesion_prevalence = d.lesion_prevalence;
        spec.texture_amplitude = d.texture_amplitude;
        if !d.noise_sigma.is_empty() {
            spec.noise_sigma = d.noise_sigma.clone();
        }
        spec.seed = self.run.seed;
        Ok(spec)
    }

    pub fn loss_weights(&self) -> Result<LossWeights, CliError> {
        let mut w = LossWeights {
            lambda_kd: self.loss.lambda_kd,
            schedule_t: self.loss.schedule_t,
            ..LossWeights::default()
        };
        w.set_toggles(&self.loss.toggles)?;
        Ok(w)
    }

    pub fn train_config(&self, mode: Supervision) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamParams {
                lr: t.lr,
                weight_decay: t.weight_decay,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            weights: self.loss_weights()?,
            transforms: t.transforms.parse::<TransformSet>()?,
            seed: self.run.seed,
            mode,
        })
    }

    /// TOML text with a version stamp, loadable again with `--config`.
    pub fn snapshot(&self) -> String {
        let mut c = self.clone();
        c.meta = Some(Meta { version: VERSION.to_string() });
        let body = toml::to_string(&c).expect("config serializes");
        format!("# eqcam {VERSION} run configuration, seed {}\n{body}", self.run.seed)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("config.snapshot");
        std::fs::write(&path, self.snapshot()).map_err(|e| CliError::io(&path, e))
    }
}

fn merge(into: &mut Table, from: Table, prefix: &str, explicit: &mut BTreeSet<String>) -> Result<(), CliError> {
    for (k, v) in from {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src, &key, explicit)?,
            (_, Value::Table(src)) if prefix.is_empty() => {
                let mut fresh = Table::new();
                merge(&mut fresh, src, &key, explicit)?;
                into.insert(k, Value::Table(fresh));
            }
            (_, v) => {
                explicit.insert(key);
                into.insert(k, v);
            }
        }
    }
    Ok(())
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| CliError::Config(format!("bad key {key:?}")))?;
    if parts.is_empty() {
        return Err(CliError::Config(format!("key {key:?} needs a section, as in train.{key}")));
    }
    let mut t = table;
    for p in parts {
        t = match t.entry(p).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => return Err(CliError::Config(format!("{p:?} in {key:?} is not a section"))),
        };
    }
    let value = match (t.get(leaf), value) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (Some(Value::String(_)), Value::Integer(i)) => Value::String(i.to_string()),
        (_, v) => v,
    };
    t.insert(leaf.to_string(), value);
    Ok(())
}

/// Parses a flag value as a TOML value, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.snapshot();
        assert!(text.contains(VERSION));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, &text).unwrap();
        let back = RunConfig::load(Some(&p), &[]).unwrap().config;
        assert_eq!(back.meta.as_ref().unwrap().version, VERSION);
        assert_eq!(RunConfig { meta: None, ..back }, c);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochs = 7\nbatch_size = 4\n[loss]\nschedule_T = 3\n").unwrap();
        let l = RunConfig::load(Some(&p), &[("train.epochs".into(), Value::Integer(9))]).unwrap();
        assert_eq!(l.config.train.epochs, 9);
        assert_eq!(l.config.train.batch_size, 4);
        assert_eq!(l.config.loss.schedule_t, 3);
        assert_eq!(l.config.train.lr, RunConfig::default().train.lr);
        assert!(l.explicit.contains("train.batch_size"));
        assert!(!l.explicit.contains("train.lr"));
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            ("loss.lambda_kd", Value::Float(-1.0)),
            ("loss.toggles", Value::String("kd,foo".into())),
            ("train.transforms", Value::String("shear".into())),
            ("train.batch_size", Value::Integer(0)),
            ("eval.tau", Value::Float(1.5)),
            ("data.modalities", Value::Integer(0)),
            ("train.bogus", Value::Integer(1)),
        ];
        for (k, v) in bad {
            assert!(RunConfig::load(None, &[(k.to_string(), v)]).is_err(), "{k}");
        }
    }

    #[test]
    fn unknown_file_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepoch = 7\n").unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("1e-3"), Value::Float(1e-3));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("kd,er"), Value::String("kd,er".into()));
        assert_eq!(parse_value("[0.1, 0.2]"), Value::Array(vec![Value::Float(0.1), Value::Float(0.2)]));
    }
}
