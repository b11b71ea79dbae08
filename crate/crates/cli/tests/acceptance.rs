//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eqcam::evalkit::{assd, dsc, BinaryMask, EvalReport};
use eqcam::losses::{classification_loss, cmer_loss, er_loss, kl_div, lambda_e, network_objective, LossWeights};
use eqcam::model::{siamese_step, Architecture, Branch, Forward, Network, SiameseOutput};
use eqcam::synthdata::{generate, DatasetSpec};
use eqcam::trainloop::{load_checkpoint, save_checkpoint, Supervision, TrainConfig, Trainer};
use eqcam::transforms::{apply, sample_transform, AffineTransform, TransformSet};
use eqcam::{DenseArray, Graph, Var};
use eqcam_cli::experiment::{self, RowResult};
use eqcam_cli::gradcheck::{self, GradCheckSetup};
use eqcam_cli::RunConfig;

// Tolerances and budgets.
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_TOL: f64 = 1e-9;
const ISOLATION_TOL: f64 = 1e-7;
const K2_TOL: f64 = 1e-7;
const K3_TOL: f64 = 1e-6;
const K_INSTANCES: usize = 100;
const ASSD_TOL: f64 = 1e-9;
const ASSD_PAIRS: usize = 200;
const DSC_IDENTITY_TOL: f64 = 1e-9;
const RESUME_TOL: f64 = 1e-7;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---- criterion 1 ------------------------------------------------------

fn gradient_oracle() -> Verdict {
    let started = Instant::now();
    let out = match gradcheck::run(&GradCheckSetup::standard(0)) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("grad-check failed to run: {e}")),
    };
    let elapsed = started.elapsed();
    let tensors: usize = out.checks.iter().map(|c| c.report.tensors.len()).sum();
    let networks: std::collections::BTreeSet<usize> = out.checks.iter().map(|c| c.modality).collect();
    let max = out.max_error();
    verdict(
        max <= GRAD_TOL && elapsed <= GRAD_BUDGET && networks.len() == 2 && out.lambda_e == 1.0,
        format!(
            "max relative error {max:.2e} over {tensors} tensor checks of {} networks (tol {GRAD_TOL:.0e}), {:.1}s (budget {}s)",
            networks.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

// ---- criterion 2 ------------------------------------------------------

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray<f64> {
    DenseArray::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rand_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> DenseArray<f64> {
    let mut a = rand_array(rng, &[n, c], 0.01, 1.0);
    for row in a.data_mut().chunks_mut(c) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

/// A Siamese output whose CAMs are the given arrays. Only the CAM fields
/// are meaningful.
fn cam_output(g: &mut Graph<f64>, m: DenseArray<f64>, mt: DenseArray<f64>, t: AffineTransform) -> SiameseOutput {
    let (h, w) = m.spatial().unwrap();
    let plan = t.plan(h, w).unwrap();
    let cam = g.input(m);
    let cam_t = g.input(mt);
    let f = |v: Var| Forward { features: v, logits: v, probs: v };
    SiameseOutput {
        original: Branch { forward: f(cam), cam },
        transformed: Branch { forward: f(cam_t), cam: cam_t },
        transform: t,
        mask: eqcam::transforms::ValidityMask::from_plan(&plan),
    }
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut kl_negative = false;
    let perms = [
        AffineTransform::FlipHorizontal,
        AffineTransform::FlipVertical,
        AffineTransform::Rotate90 { k: 1 },
        AffineTransform::Rotate90 { k: 2 },
        AffineTransform::Rotate90 { k: 3 },
    ];
    for t in perms {
        let mut g = Graph::new();
        let m = rand_array(&mut rng, &[3, 1, 8, 8], 0.0, 1.0);
        let mt = apply(&t, &m).unwrap().0;
        let own = cam_output(&mut g, m.clone(), mt.clone(), t);
        let er = er_loss(&mut g, &own).unwrap();
        worst = worst.max(g.scalar(er).abs());
        // A peer whose maps differ only by a positive per-map scale
        // normalizes to the same maps.
        let scale = rng.random_range(0.2..5.0);
        let peer = cam_output(&mut g, m.map(|v| v * scale), mt.map(|v| v * scale), t);
        let cm = cmer_loss(&mut g, &own, &peer).unwrap();
        worst = worst.max(g.scalar(cm).abs());
    }
    for _ in 0..50 {
        let mut g = Graph::new();
        let p = rand_probs(&mut rng, 4, 3);
        let q = rand_probs(&mut rng, 4, 3);
        let pv = g.input(p);
        let qv = g.input(q);
        let same = kl_div(&mut g, pv, pv).unwrap();
        worst = worst.max(g.scalar(same).abs());
        let d = kl_div(&mut g, pv, qv).unwrap();
        kl_negative |= g.scalar(d) < -IDENTITY_TOL;
    }
    let mut g = Graph::new();
    let y: DenseArray<f64> = DenseArray::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let p = g.input(y.clone());
    let lc = classification_loss(&mut g, p, p, &y).unwrap();
    worst = worst.max(g.scalar(lc).abs());
    let at_t = lambda_e(15, 15);
    let monotone = (0..60).all(|t| lambda_e(t, 15) <= lambda_e(t + 1, 15));
    verdict(
        worst <= IDENTITY_TOL && !kl_negative && at_t == 1.0 && monotone,
        format!(
            "max |identity residual| {worst:.1e} (tol {IDENTITY_TOL:.0e}), KL >= 0: {}, lambda_E(15,15) = {at_t}, nondecreasing: {monotone}",
            !kl_negative
        ),
    )
}

// ---- criteria 3 and 4 -------------------------------------------------

struct Instance {
    nets: Vec<Network<f64>>,
    x: Vec<DenseArray<f64>>,
    y: DenseArray<f64>,
    t: AffineTransform,
    weights: LossWeights,
    epoch: u32,
}

fn instance(rng: &mut ChaCha8Rng, k: usize) -> Instance {
    let arch = Architecture::standard(1, 2);
    let seed = rng.random();
    let nets = (0..k as u32).map(|m| Network::init(seed, m, &arch).unwrap()).collect();
    let n = 2;
    let x = (0..k).map(|_| rand_array(rng, &[n, 1, 8, 8], 0.0, 1.0)).collect();
    let y = DenseArray::from_fn(&[n, 2], |i| if (i / 2 + i) % 2 == 0 { 1.0 } else { 0.0 });
    let t = sample_transform(rng, &TransformSet::ALL, 8, 8);
    let weights = LossWeights {
        lambda_kd: rng.random_range(0.05..1.0),
        schedule_t: rng.random_range(1..20),
        ..LossWeights::default()
    };
    let epoch = rng.random_range(0..30);
    Instance { nets, x, y, t, weights, epoch }
}

fn forward_all(inst: &Instance, g: &mut Graph<f64>) -> (Vec<Vec<Var>>, Vec<SiameseOutput>) {
    let arch = &inst.nets[0].arch;
    let vars: Vec<Vec<Var>> = inst.nets.iter().map(|n| n.bind(g)).collect();
    let outs = vars
        .iter()
        .zip(&inst.x)
        .map(|(v, x)| {
            let xv = g.input(x.clone());
            siamese_step(g, arch, v, xv, &inst.t).unwrap()
        })
        .collect();
    (vars, outs)
}

fn stop_gradient_isolation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero = 0usize;
    let mut checked = 0usize;
    let mut worst_fd: f64 = 0.0;
    let mut min_peer_shift = f64::INFINITY;
    for _ in 0..5 {
        let inst = instance(&mut rng, 2);
        for k in 0..2 {
            let l = 1 - k;
            let mut g = Graph::new();
            let (vars, outs) = forward_all(&inst, &mut g);
            let (total, _) = network_objective(&mut g, k, &outs, &inst.y, &inst.weights, inst.epoch).unwrap();
            let grads = g.backward(total).unwrap();
            for &v in &vars[l] {
                let gr = grads.get(v).unwrap();
                checked += gr.len();
                nonzero += gr.data().iter().filter(|&&d| d != 0.0).count();
            }
            // Perturb the peer's parameters with the peer outputs held at
            // their unperturbed values: the objective of network k must not
            // move, although the perturbed peer's own maps do.
            let base = g.scalar(total);
            let arch = &inst.nets[0].arch;
            for sign in [1.0, -1.0] {
                let mut g2 = Graph::new();
                let own = inst.nets[k].bind(&mut g2);
                let held = inst.nets[l].bind_frozen(&mut g2);
                let mut moved = inst.nets[l].clone();
                for (_, p) in &mut moved.params {
                    p.data_mut().iter_mut().for_each(|v| *v += sign * 1e-3);
                }
                let moved = moved.bind(&mut g2);
                let xl = g2.input(inst.x[l].clone());
                let shifted = siamese_step(&mut g2, arch, &moved, xl, &inst.t).unwrap();
                let mut outs2 = Vec::new();
                for (m, x) in inst.x.iter().enumerate() {
                    let xv = g2.input(x.clone());
                    let v = if m == k { &own } else { &held };
                    outs2.push(siamese_step(&mut g2, arch, v, xv, &inst.t).unwrap());
                }
                let peer_shift = g2.value(shifted.original.forward.logits).max_abs_diff(g2.value(outs2[l].original.forward.logits));
                min_peer_shift = min_peer_shift.min(peer_shift);
                let (t2, _) = network_objective(&mut g2, k, &outs2, &inst.y, &inst.weights, inst.epoch).unwrap();
                worst_fd = worst_fd.max((g2.scalar(t2) - base).abs());
            }
        }
    }
    verdict(
        nonzero == 0 && worst_fd <= ISOLATION_TOL && min_peer_shift > 0.0,
        format!(
            "{nonzero} of {checked} cross-network gradient entries nonzero; max loss change under peer perturbation {worst_fd:.1e} (tol {ISOLATION_TOL:.0e}) while peer logits moved by at least {min_peer_shift:.1e}"
        ),
    )
}

// Array oracles for the objective, independent of the graph.

fn oracle_ce(p: &DenseArray<f64>, y: &DenseArray<f64>) -> f64 {
    let n = p.shape()[0] as f64;
    -p.data().iter().zip(y.data()).map(|(&p, &y)| y * p.max(1e-12).ln()).sum::<f64>() / n
}

fn oracle_kl(target: &DenseArray<f64>, q: &DenseArray<f64>) -> f64 {
    let n = q.shape()[0] as f64;
    target
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t * (t.max(1e-12).ln() - q.max(1e-12).ln()))
        .sum::<f64>()
        / n
}

fn oracle_mse(a: &DenseArray<f64>, b: &DenseArray<f64>, mask: &[bool]) -> f64 {
    let hw = mask.len();
    let planes = a.len() / hw;
    let valid = mask.iter().filter(|&&m| m).count();
    let mut s = 0.0;
    for (q, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask[q % hw] {
            s += (x - y) * (x - y);
        }
    }
    s / (planes * valid) as f64
}

fn oracle_l2n(a: &DenseArray<f64>) -> DenseArray<f64> {
    let (h, w) = a.spatial().unwrap();
    let mut out = a.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let norm = plane.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        plane.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

struct Parts {
    p: DenseArray<f64>,
    pt: DenseArray<f64>,
    m: DenseArray<f64>,
    mt: DenseArray<f64>,
}

fn hand_assembled(inst: &Instance, parts: &[Parts], k: usize) -> f64 {
    let me = &parts[k];
    let t = &inst.t;
    let (moved, mask) = apply(t, &me.m).unwrap();
    let mask = mask.flags().to_vec();
    let l_c = 0.5 * (oracle_ce(&me.p, &inst.y) + oracle_ce(&me.pt, &inst.y));
    let l_er = oracle_mse(&moved, &me.mt, &mask);
    let peers: Vec<&Parts> = parts.iter().enumerate().filter(|(l, _)| *l != k).map(|(_, p)| p).collect();
    let np = peers.len() as f64;
    let kd: f64 = peers.iter().map(|o| 0.5 * (oracle_kl(&o.p, &me.p) + oracle_kl(&o.pt, &me.pt))).sum::<f64>() / np;
    let cmer: f64 = peers
        .iter()
        .map(|o| {
            let a = oracle_mse(&apply(t, &oracle_l2n(&o.m)).unwrap().0, &oracle_l2n(&me.mt), &mask);
            let b = oracle_mse(&oracle_l2n(&o.mt), &apply(t, &oracle_l2n(&me.m)).unwrap().0, &mask);
            0.5 * (a + b)
        })
        .sum::<f64>()
        / np;
    let w = &inst.weights;
    l_c + w.lambda_kd * kd + lambda_e(inst.epoch, w.schedule_t) * (l_er + cmer)
}

fn k_generalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 2];
    for (slot, (k_mod, count)) in [(2usize, K_INSTANCES), (3, K_INSTANCES / 4)].into_iter().enumerate() {
        for _ in 0..count {
            let inst = instance(&mut rng, k_mod);
            let mut g = Graph::new();
            let (_, outs) = forward_all(&inst, &mut g);
            let parts: Vec<Parts> = outs
                .iter()
                .map(|o| Parts {
                    p: g.value(o.original.forward.probs).clone(),
                    pt: g.value(o.transformed.forward.probs).clone(),
                    m: g.value(o.original.cam).clone(),
                    mt: g.value(o.transformed.cam).clone(),
                })
                .collect();
            for k in 0..k_mod {
                let (total, _) = network_objective(&mut g, k, &outs, &inst.y, &inst.weights, inst.epoch).unwrap();
                let want = hand_assembled(&inst, &parts, k);
                worst[slot] = worst[slot].max((g.scalar(total) - want).abs());
            }
        }
    }
    verdict(
        worst[0] <= K2_TOL && worst[1] <= K3_TOL,
        format!(
            "K=2 max deviation {:.1e} over {K_INSTANCES} instances (tol {K2_TOL:.0e}); K=3 {:.1e} over {} instances (tol {K3_TOL:.0e})",
            worst[0],
            worst[1],
            K_INSTANCES / 4
        ),
    )
}

// ---- criterion 5 ------------------------------------------------------

fn mask_from_bits(h: usize, w: usize, bits: u64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|q| bits >> q & 1 == 1).collect()).unwrap()
}

fn oracle_boundary(m: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let at = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && m[i as usize * w + j as usize];
    let mut out = Vec::new();
    for i in 0..h as isize {
        for j in 0..w as isize {
            if at(i, j) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| !at(i + di, j + dj)) {
                out.push((i as f64, j as f64));
            }
        }
    }
    out
}

fn oracle_assd(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (ba, bb) = (oracle_boundary(a, h, w), oracle_boundary(b, h, w));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    };
    let s: f64 = ba.iter().map(|p| nearest(p, &bb)).sum::<f64>() + bb.iter().map(|p| nearest(p, &ba)).sum::<f64>();
    s / (ba.len() + bb.len()) as f64
}

fn metric_oracles(identity_error: f64) -> Verdict {
    let masks: Vec<BinaryMask> = (0..1u64 << 16).map(|b| mask_from_bits(4, 4, b)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut partners: Vec<u64> = vec![0, 0xffff, 0x0001, 0x8000, 0x0ff0];
    partners.extend((0..59).map(|_| rng.random_range(0..1u64 << 16)));
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for a in 0..1u64 << 16 {
        for &b in &partners {
            let (ca, cb, ci) = (a.count_ones(), b.count_ones(), (a & b).count_ones());
            let want = if ca + cb == 0 { 1.0 } else { 2.0 * ci as f64 / (ca + cb) as f64 };
            pairs += 1;
            if dsc(&masks[a as usize], &masks[b as usize]).unwrap() != want {
                mismatches += 1;
            }
        }
    }
    let mut worst_assd: f64 = 0.0;
    let mut done = 0;
    while done < ASSD_PAIRS {
        let (pa, pb) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
        let a: Vec<bool> = (0..256).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..256).map(|_| rng.random_bool(pb)).collect();
        if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
            continue;
        }
        let got = assd(&BinaryMask::new(16, 16, a.clone()).unwrap(), &BinaryMask::new(16, 16, b.clone()).unwrap()).unwrap();
        worst_assd = worst_assd.max((got - oracle_assd(&a, &b, 16, 16)).abs());
        done += 1;
    }
    verdict(
        mismatches == 0 && worst_assd <= ASSD_TOL && identity_error <= DSC_IDENTITY_TOL,
        format!(
            "dsc closed form: {mismatches} mismatches in {pairs} 4x4 pairs; assd max deviation {worst_assd:.1e} on {ASSD_PAIRS} 16x16 pairs (tol {ASSD_TOL:.0e}); DSC identity max error {identity_error:.1e} over all evaluated samples (tol {DSC_IDENTITY_TOL:.0e})"
        ),
    )
}

// ---- criterion 6 ------------------------------------------------------

fn determinism_and_resume() -> Verdict {
    let spec = DatasetSpec { n_train: 48, n_val: 4, n_test: 4, height: 16, width: 16, seed: 6, ..DatasetSpec::default() };
    let data = generate(&spec).unwrap().train;
    let cfg = TrainConfig { epochs: 4, batch_size: 8, seed: 6, ..experiment_train_defaults() };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let (state, log) = Trainer::new(cfg, &data).unwrap().run(|_, _| Ok(())).unwrap();
        let p = dir.path().join(name);
        save_checkpoint(&state, &p).unwrap();
        (std::fs::read(&p).unwrap(), log)
    };
    let (a, full_log) = run("a");
    let (b, _) = run("b");
    let identical = a == b;

    let mut first = Trainer::new(TrainConfig { epochs: 2, ..cfg }, &data).unwrap();
    while !first.is_finished() {
        first.run_epoch().unwrap();
    }
    let (state, head) = first.into_parts();
    let mid = dir.path().join("mid");
    save_checkpoint(&state, &mid).unwrap();
    let (_, tail) = Trainer::resume(cfg, &data, load_checkpoint(&mid).unwrap())
        .unwrap()
        .run(|_, _| Ok(()))
        .unwrap();
    let steps: Vec<f64> = head.steps.iter().chain(&tail.steps).map(|s| s.total).collect();
    let want: Vec<f64> = full_log.steps.iter().map(|s| s.total).collect();
    let same_len = steps.len() == want.len();
    let worst = steps.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        identical && same_len && worst <= RESUME_TOL,
        format!(
            "repeat run checkpoints bit-identical: {identical}; resumed trajectory {} of {} steps, max deviation {worst:.1e} (tol {RESUME_TOL:.0e})",
            steps.len(),
            want.len()
        ),
    )
}

fn experiment_train_defaults() -> TrainConfig {
    RunConfig::default().train_config(Supervision::Weak).unwrap()
}

// ---- criteria 7 to 10 -------------------------------------------------

struct EndToEnd {
    baseline: RowResult,
    kd: RowResult,
    full: RowResult,
    upper: RowResult,
    weak_time: Duration,
}

fn end_to_end() -> Result<EndToEnd, eqcam_cli::CliError> {
    let base = RunConfig::default();
    let splits = generate(&base.dataset_spec()?)?;
    let row = |name: &str, toggles: &str, mode| {
        let mut cfg = base.clone();
        cfg.loss.toggles = toggles.to_string();
        let started = Instant::now();
        let r = experiment::run_row(&cfg, name, mode, &splits, None);
        println!("  trained {name} in {:.0}s", started.elapsed().as_secs_f64());
        r
    };
    let started = Instant::now();
    let baseline = row("baseline", "none", Supervision::Weak)?;
    let kd = row("kd", "kd", Supervision::Weak)?;
    let full = row("all", "kd,er,cmer", Supervision::Weak)?;
    let weak_time = started.elapsed();
    let upper = row("upper-bound", "none", Supervision::FullySupervised)?;
    Ok(EndToEnd { baseline, kd, full, upper, weak_time })
}

fn fused_dsc(r: &RowResult) -> f64 {
    r.report.fused().dsc_mean
}

fn directional(e: &EndToEnd, margin: f64) -> Verdict {
    let (b, k, f) = (fused_dsc(&e.baseline), fused_dsc(&e.kd), fused_dsc(&e.full));
    verdict(
        f >= b + margin && f >= k && e.weak_time <= E2E_BUDGET,
        format!(
            "fused test DSC: full {f:.4}, baseline {b:.4} (margin {margin}), kd-only {k:.4}; three runs in {:.0}s (budget {}s)",
            e.weak_time.as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    )
}

fn residual_reduction(e: &EndToEnd) -> Verdict {
    let (f, b) = (e.full.residual, e.baseline.residual);
    verdict(f < b, format!("mean masked residual over 64 fixed pairs: full {f:.4}, baseline {b:.4}"))
}

fn ratio_line(r: &EvalReport, name: &str) -> (Option<f64>, Option<f64>) {
    r.row(name).map_or((None, None), |m| (m.r_u, m.r_o))
}

fn ratio_direction(e: &EndToEnd) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for m in &e.full.report.rows {
        let (fu, fo) = (m.r_u, m.r_o);
        let (bu, bo) = ratio_line(&e.baseline.report, &m.name);
        let lower = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a < b);
        pass &= lower(fu, bu) && lower(fo, bo);
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.3}"));
        parts.push(format!(
            "{}: r_u {} vs {}, r_o {} vs {}",
            m.name,
            show(fu),
            show(bu),
            show(fo),
            show(bo)
        ));
    }
    verdict(pass, format!("full vs baseline, pooled at tau 0.5: {}", parts.join("; ")))
}

fn upper_bound(e: &EndToEnd) -> Verdict {
    let (u, f) = (fused_dsc(&e.upper), fused_dsc(&e.full));
    verdict(u > f, format!("fused test DSC: fully supervised {u:.4}, full weak objective {f:.4}"))
}

fn main() {
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    verdicts.push((1, "gradient oracle", gradient_oracle()));
    verdicts.push((2, "loss identities", loss_identities()));
    verdicts.push((3, "stop-gradient isolation", stop_gradient_isolation()));
    verdicts.push((4, "K-generalization consistency", k_generalization()));
    verdicts.push((6, "determinism and resume", determinism_and_resume()));
    let margin = RunConfig::default().ablate.margin;
    match end_to_end() {
        Ok(e) => {
            let identity = [&e.baseline, &e.kd, &e.full, &e.upper]
                .iter()
                .map(|r| r.report.identity_max_error)
                .fold(0.0, f64::max);
            verdicts.push((5, "metric oracles", metric_oracles(identity)));
            verdicts.push((7, "directional end-to-end", directional(&e, margin)));
            verdicts.push((8, "equivariance residual reduction", residual_reduction(&e)));
            verdicts.push((9, "ratio direction", ratio_direction(&e)));
            verdicts.push((10, "upper-bound dominance", upper_bound(&e)));
        }
        Err(err) => {
            verdicts.push((5, "metric oracles", metric_oracles(0.0)));
            for (n, name) in [(7, "directional end-to-end"), (8, "equivariance residual reduction"), (9, "ratio direction"), (10, "upper-bound dominance")] {
                verdicts.push((n, name, verdict(false, format!("end-to-end runs failed: {err}"))));
            }
        }
    }
    verdicts.sort_by_key(|v| v.0);
    let mut failed = 0;
    for (n, name, v) in &verdicts {
        println!("criterion {n:>2} {:<4} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
