//! Building blocks shared by the subcommands and the end-to-end tests:
//! data loading, run directories, training and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eqcam::evalkit::{self, EvalReport};
use eqcam::synthdata::{self, Dataset, Splits};
use eqcam::trainloop::{self, load_checkpoint, Supervision, TrainLog, TrainState, Trainer};
use eqcam::DenseArray;

use crate::{CliError, Loaded, RunConfig};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

/// Writes the three splits as `train.bin`, `val.bin` and `test.bin`.
pub fn save_splits(splits: &Splits, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, ds) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        synthdata::save_dataset(ds, split_path(dir, name))?;
    }
    Ok(())
}

pub fn load_splits(dir: &Path) -> Result<Splits, CliError> {
    let load = |name| synthdata::load_dataset(split_path(dir, name));
    Ok(Splits { train: load("train")?, val: load("val")?, test: load("test")? })
}

/// The splits from `run.data` when set, otherwise generated from the `data`
/// section. Loaded data is authoritative for the data section: its extents
/// and modality count are written back into the configuration, and an
/// explicitly configured value that disagrees is an error.
pub fn obtain_data(loaded: &mut Loaded) -> Result<Splits, CliError> {
    let Some(dir) = loaded.config.run.data.clone() else {
        return Ok(synthdata::generate(&loaded.config.dataset_spec()?)?);
    };
    let splits = load_splits(&dir)?;
    let t = &splits.train;
    if splits.val.modalities != t.modalities || splits.test.modalities != t.modalities {
        return Err(CliError::Config(format!("splits in {} disagree on the modality count", dir.display())));
    }
    let d = &mut loaded.config.data;
    let found = [
        ("data.modalities", &mut d.modalities, t.modalities),
        ("data.height", &mut d.height, t.height),
        ("data.width", &mut d.width, t.width),
        ("data.n_train", &mut d.n_train, splits.train.len()),
        ("data.n_val", &mut d.n_val, splits.val.len()),
        ("data.n_test", &mut d.n_test, splits.test.len()),
    ];
    for (key, slot, actual) in found {
        if loaded.explicit.contains(key) && *slot != actual {
            return Err(CliError::Config(format!(
                "{key} is {} but the data in {} has {actual}",
                *slot,
                dir.display()
            )));
        }
        *slot = actual;
    }
    if d.noise_sigma.len() != d.modalities && !loaded.explicit.contains("data.noise_sigma") {
        d.noise_sigma.clear();
    }
    Ok(splits)
}

pub fn pick_split<'a>(splits: &'a Splits, name: &str) -> Result<&'a Dataset, CliError> {
    match name {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        other => Err(CliError::Config(format!("unknown split {other:?}"))),
    }
}

/// Trains from scratch (or from `run.ckpt` when set) on `data`. With `out`,
/// writes `config.snapshot`, `checkpoints/epoch_NNN`, `final`,
/// `train_log.csv` and `shuffle_log.csv` there.
pub fn train(cfg: &RunConfig, data: &Dataset, mode: Supervision, out: Option<&Path>) -> Result<(TrainState, TrainLog), CliError> {
    let tc = cfg.train_config(mode)?;
    let trainer = match &cfg.run.ckpt {
        Some(p) => Trainer::resume(tc, data, load_checkpoint(p)?)?,
        None => Trainer::new(tc, data)?,
    };
    let Some(out) = out else {
        return Ok(trainer.run(|_, _| Ok(()))?);
    };
    cfg.write_snapshot(out)?;
    let ckpts = out.join("checkpoints");
    fs::create_dir_all(&ckpts).map_err(|e| CliError::io(&ckpts, e))?;
    let (state, log) = trainloop::train_with_checkpoints(trainer, &ckpts, &out.join("final"))?;
    let resumed = cfg.run.ckpt.is_some();
    write_log(&out.join("train_log.csv"), &log.to_csv(), resumed)?;
    write_log(&out.join("shuffle_log.csv"), &log.shuffle_csv(), resumed)?;
    Ok((state, log))
}

/// Writes a CSV, or appends its data rows to an existing file when `append`.
fn write_log(path: &Path, csv: &str, append: bool) -> Result<(), CliError> {
    let text = match fs::read_to_string(path) {
        Ok(mut old) if append => {
            if !old.ends_with('\n') && !old.is_empty() {
                old.push('\n');
            }
            old.push_str(csv.split_once('\n').map_or("", |(_, rows)| rows));
            old
        }
        _ => csv.to_string(),
    };
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// An evaluation together with the maps and sample indices behind it.
pub struct Evaluation {
    pub report: EvalReport,
    pub maps: Vec<Vec<DenseArray<f32>>>,
    pub indices: Vec<usize>,
}

pub fn evaluate(cfg: &RunConfig, state: &TrainState, ds: &Dataset) -> Result<Evaluation, CliError> {
    let (report, maps) = evalkit::evaluate(state, ds, cfg.eval.tau, &cfg.eval.grid)?;
    let (indices, _) = evalkit::positive_samples(ds)?;
    Ok(Evaluation { report, maps, indices })
}

/// Writes `eval/report.json`, `eval/report.txt`, `eval/sweep.csv` (fused
/// maps) and one `eval/sweep_<row>.csv` per modality under `dir`, plus
/// `eval/cams/<split>.cams` when `dump` is set.
pub fn write_evaluation(dir: &Path, ev: &Evaluation, ds: &Dataset, split: &str, dump: bool) -> Result<PathBuf, CliError> {
    let eval_dir = dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| CliError::io(&eval_dir, e))?;
    let put = |name: &str, text: String| {
        let p = eval_dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    put("report.json", ev.report.to_json())?;
    put("report.txt", ev.report.to_text())?;
    put("sweep.csv", evalkit::sweep_csv(&ev.report.fused().sweep))?;
    for row in &ev.report.rows[..ev.report.rows.len() - 1] {
        put(&format!("sweep_{}.csv", row.name), evalkit::sweep_csv(&row.sweep))?;
    }
    if dump {
        let cams = eval_dir.join("cams");
        fs::create_dir_all(&cams).map_err(|e| CliError::io(&cams, e))?;
        evalkit::save_cam_dump(ds, &ev.indices, &ev.maps, cams.join(format!("{split}.cams")))?;
    }
    Ok(eval_dir)
}

/// Mean held-out equivariance residual over the configured fixed pairs.
pub fn residual(cfg: &RunConfig, state: &TrainState, ds: &Dataset) -> Result<f64, CliError> {
    let transforms = cfg.train.transforms.parse()?;
    let pairs = evalkit::residual_pairs(ds, cfg.eval.residual_pairs, cfg.eval.residual_seed, &transforms)?;
    Ok(evalkit::equivariance_residual(state, ds, &pairs)?)
}

/// One trained configuration scored on the evaluation split.
pub struct RowResult {
    pub name: String,
    pub toggles: String,
    pub supervision: Supervision,
    pub train_fingerprint: u64,
    pub eval_fingerprint: u64,
    pub report: EvalReport,
    pub residual: f64,
    pub state: TrainState,
}

/// Trains `cfg` under `mode` on `splits.train` and scores it on the
/// configured evaluation split. With `out`, the run directory is
/// `out/<name>`.
pub fn run_row(cfg: &RunConfig, name: &str, mode: Supervision, splits: &Splits, out: Option<&Path>) -> Result<RowResult, CliError> {
    let dir = out.map(|o| o.join(name));
    let (state, _) = train(cfg, &splits.train, mode, dir.as_deref())?;
    let ds = pick_split(splits, &cfg.eval.split)?;
    let ev = evaluate(cfg, &state, ds)?;
    if let Some(d) = &dir {
        write_evaluation(d, &ev, ds, &cfg.eval.split, cfg.eval.dump_cams)?;
    }
    Ok(RowResult {
        name: name.to_string(),
        toggles: cfg.loss_weights()?.toggles(),
        supervision: mode,
        train_fingerprint: splits.train.fingerprint(),
        eval_fingerprint: ds.fingerprint(),
        residual: residual(cfg, &state, ds)?,
        report: ev.report,
        state,
    })
}

/// The baseline and the four loss-toggle rows, in table order.
pub const ABLATION_ROWS: [(&str, &str); 5] = [
    ("baseline", "none"),
    ("kd", "kd"),
    ("kd+er", "kd,er"),
    ("er+cmer", "er,cmer"),
    ("all", "kd,er,cmer"),
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// One line per row: configuration, dataset fingerprints, then DSC and ASSD
/// for every modality and the fused maps, the fused ratios and the
/// equivariance residual.
pub fn ablation_csv(rows: &[RowResult]) -> String {
    let mut s = String::from("config,toggles,train_fingerprint,eval_fingerprint");
    if let Some(r) = rows.first() {
        for m in &r.report.rows {
            let _ = write!(s, ",{0}_dsc,{0}_dsc_std,{0}_assd", m.name);
        }
    }
    s.push_str(",fused_r_u,fused_r_o,residual\n");
    for r in rows {
        let _ = write!(s, "{},{},{:016x},{:016x}", r.name, r.toggles.replace(',', "+"), r.train_fingerprint, r.eval_fingerprint);
        for m in &r.report.rows {
            let _ = write!(s, ",{:.6},{:.6},{}", m.dsc_mean, m.dsc_std, fmt_opt(m.assd_mean));
        }
        let f = r.report.fused();
        let _ = writeln!(s, ",{},{},{:.6}", fmt_opt(f.r_u), fmt_opt(f.r_o), r.residual);
    }
    s
}

/// Aligned-column rendering of [`ablation_csv`].
pub fn ablation_text(rows: &[RowResult]) -> String {
    let csv = ablation_csv(rows);
    let cells: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().filter_map(|r| r.get(c)).map(|x| x.len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().enumerate().map(|(c, x)| format!("{x:<w$}", w = widths[c])).collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}
