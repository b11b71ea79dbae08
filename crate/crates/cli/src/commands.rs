//! Subcommand implementations. Each returns the process exit status.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eqcam::synthdata;
use eqcam::trainloop::{load_checkpoint, Supervision};

use crate::experiment::{self, RowResult, ABLATION_ROWS};
use crate::gradcheck::{self, GradCheckSetup};
use crate::{CliError, Command, Common, Loaded};

pub fn dispatch(cmd: &Command) -> Result<i32, CliError> {
    match cmd {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c, Supervision::Weak),
        Command::UpperBound(c) => train(c, Supervision::FullySupervised),
        Command::Eval(c) => eval(c, false),
        Command::Sweep(c) => eval(c, true),
        Command::Ablate(c) => ablate(c),
        Command::GradCheck(c) => grad_check(c),
    }
}

fn require_out(l: &Loaded) -> Result<PathBuf, CliError> {
    l.config
        .run
        .out
        .clone()
        .ok_or_else(|| CliError::Config("this subcommand needs --out (or run.out)".into()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn gen_data(c: &Common) -> Result<i32, CliError> {
    let l = c.load()?;
    let out = require_out(&l)?;
    let spec = l.config.dataset_spec()?;
    let splits = synthdata::generate(&spec)?;
    experiment::save_splits(&splits, &out)?;
    l.config.write_snapshot(&out)?;
    let mut s = String::from("split,samples,positives,fingerprint\n");
    for (name, ds) in experiment::SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let pos = ds.samples.iter().filter(|x| x.is_positive()).count();
        let _ = writeln!(s, "{name},{},{pos},{:016x}", ds.len(), ds.fingerprint());
    }
    write(&out.join("fingerprints.csv"), &s)?;
    print!("{s}");
    Ok(0)
}

fn train(c: &Common, mode: Supervision) -> Result<i32, CliError> {
    let mut l = c.load()?;
    let out = require_out(&l)?;
    let splits = experiment::obtain_data(&mut l)?;
    let cfg = &l.config;
    let (state, log) = experiment::train(cfg, &splits.train, mode, Some(&out))?;
    for row in log.rows.iter().filter(|r| r.losses.epoch + 1 == state.epoch) {
        let b = &row.losses;
        println!(
            "epoch {} modality {}: L_C {:.5} L_KD {:.5} L_ER {:.5} L_CMER {:.5} total {:.5}",
            b.epoch, b.modality, b.l_c, b.l_kd, b.l_er, b.l_cmer, b.total
        );
    }
    if mode == Supervision::FullySupervised {
        let ds = experiment::pick_split(&splits, &cfg.eval.split)?;
        let ev = experiment::evaluate(cfg, &state, ds)?;
        experiment::write_evaluation(&out, &ev, ds, &cfg.eval.split, cfg.eval.dump_cams)?;
        print!("{}", ev.report.to_text());
    }
    println!("wrote {}", out.join("final").display());
    Ok(0)
}

fn eval(c: &Common, sweep_only: bool) -> Result<i32, CliError> {
    let mut l = c.load()?;
    let ckpt = l
        .config
        .run
        .ckpt
        .clone()
        .ok_or_else(|| CliError::Config("eval needs --ckpt".into()))?;
    let out = match &l.config.run.out {
        Some(o) => o.clone(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let splits = experiment::obtain_data(&mut l)?;
    let cfg = &l.config;
    let state = load_checkpoint(&ckpt)?;
    let ds = experiment::pick_split(&splits, &cfg.eval.split)?;
    let ev = experiment::evaluate(cfg, &state, ds)?;
    let dir = experiment::write_evaluation(&out, &ev, ds, &cfg.eval.split, cfg.eval.dump_cams)?;
    if sweep_only {
        for row in &ev.report.rows {
            let best = row
                .sweep
                .iter()
                .max_by(|a, b| a.mean_dsc.total_cmp(&b.mean_dsc))
                .expect("non-empty grid");
            println!("{}: best tau {:.2} mean DSC {:.4}", row.name, best.tau, best.mean_dsc);
        }
        print!("{}", eqcam::evalkit::sweep_csv(&ev.report.fused().sweep));
    } else {
        print!("{}", ev.report.to_text());
        println!("residual {:.6}", experiment::residual(cfg, &state, ds)?);
    }
    println!("wrote {}", dir.display());
    Ok(0)
}

fn ablate(c: &Common) -> Result<i32, CliError> {
    let mut l = c.load()?;
    let out = require_out(&l)?;
    l.config.run.ckpt = None;
    let mut rows: Vec<RowResult> = Vec::with_capacity(ABLATION_ROWS.len());
    l.config.write_snapshot(&out)?;
    for (name, toggles) in ABLATION_ROWS {
        // Each row obtains its own copy of the data so that the logged
        // fingerprints witness identical inputs.
        let mut row_cfg = l.clone();
        row_cfg.config.loss.toggles = toggles.to_string();
        let splits = experiment::obtain_data(&mut row_cfg)?;
        let r = experiment::run_row(&row_cfg.config, name, Supervision::Weak, &splits, Some(&out))?;
        println!(
            "{name}: fused DSC {:.4} (train data {:016x})",
            r.report.fused().dsc_mean,
            r.train_fingerprint
        );
        rows.push(r);
    }
    write(&out.join("ablation.csv"), &experiment::ablation_csv(&rows))?;
    let text = experiment::ablation_text(&rows);
    write(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    let dsc = |n: &str| rows.iter().find(|r| r.name == n).map(|r| r.report.fused().dsc_mean).unwrap_or(f64::NAN);
    let gain = dsc("all") - dsc("baseline");
    println!(
        "full objective minus baseline: {gain:+.4} (margin {:.4}: {})",
        l.config.ablate.margin,
        if gain >= l.config.ablate.margin { "met" } else { "not met" }
    );
    Ok(0)
}

fn grad_check(c: &Common) -> Result<i32, CliError> {
    let l = c.load()?;
    let setup = GradCheckSetup::standard(l.config.run.seed);
    let started = std::time::Instant::now();
    let outcome = gradcheck::run(&setup)?;
    for ch in &outcome.checks {
        for t in &ch.report.tensors {
            println!(
                "modality {} {:?} {}: {} checked, relative error {:.3e} (worst scalar {:.3e})",
                ch.modality, ch.transform, t.name, t.checked, t.norm_rel_error, t.max_rel_error
            );
        }
    }
    let max = outcome.max_error();
    println!(
        "lambda_E {:.3}; max relative error {max:.3e} (tolerance {:.0e}) in {:.1}s",
        outcome.lambda_e,
        gradcheck::TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    Ok(if outcome.passed() { 0 } else { 1 })
}
