//! Training objective terms and their assembly into one network's loss.
//!
//! Every term is a batch mean. Quantities coming from peer networks are
//! detached before use, so a network's objective only produces gradients
//! for its own parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SiameseOutput;
use crate::ndgrad::{DenseArray, Graph, Real, Var};
use crate::transforms::{self, ValidityMask};

/// Floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Floor of the per-map L2 norm used by the cross-modal term.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub schedule_t: u32,
    pub kd: bool,
    pub er: bool,
    pub cmer: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 0.5,
            schedule_t: 15,
            kd: true,
            er: true,
            cmer: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_kd must be finite and >= 0, got {}",
                self.lambda_kd
            )));
        }
        if self.schedule_t < 1 {
            return Err(Error::invalid("schedule T must be at least 1"));
        }
        Ok(())
    }

    /// Enables exactly the named terms from a comma list over `kd,er,cmer`.
    /// An empty list disables all of them.
    pub fn set_toggles(&mut self, list: &str) -> Result<()> {
        self.kd = false;
        self.er = false;
        self.cmer = false;
        for name in list.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "kd" => self.kd = true,
                "er" => self.er = true,
                "cmer" => self.cmer = true,
                "none" => {}
                other => {
                    return Err(Error::invalid(format!(
                        "unknown loss toggle {other:?} (expected kd, er, cmer)"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn toggles(&self) -> String {
        let names: Vec<&str> = [(self.kd, "kd"), (self.er, "er"), (self.cmer, "cmer")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            "none".to_string()
        } else {
            names.join(",")
        }
    }
}

/// Warm-up weight of the equivariance terms: `exp(-(t - T)^2)` before epoch
/// `T`, 1 afterwards.
pub fn lambda_e(t: u32, schedule_t: u32) -> f64 {
    if t < schedule_t {
        let d = t as f64 - schedule_t as f64;
        (-d * d).exp()
    } else {
        1.0
    }
}

fn check_one_hot<T: Real>(y: &DenseArray<T>) -> Result<()> {
    let [_, c] = y.dims2()?;
    for row in y.data().chunks(c) {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::invalid(format!("label row {row:?} is not one-hot")));
        }
    }
    Ok(())
}

/// Batch mean of `-yᵀ log p`.
pub fn ce_loss<T: Real>(g: &mut Graph<T>, p: Var, y: &DenseArray<T>) -> Result<Var> {
    check_one_hot(y)?;
    let [n, _] = g.value(p).dims2()?;
    let logp = g.log_clamped(p, T::from_f64(LOG_FLOOR));
    let yv = g.input(y.clone());
    let picked = g.mul(logp, yv)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one() / T::from_f64(n as f64)))
}

/// Cross-entropy averaged over the original and transformed branches.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, p: Var, p_t: Var, y: &DenseArray<T>) -> Result<Var> {
    let a = ce_loss(g, p, y)?;
    let b = ce_loss(g, p_t, y)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::from_f64(0.5)))
}

/// Batch mean of `D_KL(target || q) = targetᵀ log(target / q)`. The target
/// is detached; `0 log 0` counts as 0.
pub fn kl_div<T: Real>(g: &mut Graph<T>, target: Var, q: Var) -> Result<Var> {
    let [n, _] = g.value(q).dims2()?;
    let p = g.detach(target);
    let neg_entropy: T = g
        .value(p)
        .data()
        .iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| v * v.max(T::from_f64(LOG_FLOOR)).ln())
        .sum();
    let logq = g.log_clamped(q, T::from_f64(LOG_FLOOR));
    let cross = g.mul(p, logq)?;
    let cross = g.sum(cross);
    let diff = g.scale(cross, -T::one());
    let total = g.add_scalar(diff, neg_entropy);
    Ok(g.scale(total, T::one() / T::from_f64(n as f64)))
}

/// Distillation from a peer network on both branches; the peer
/// distributions are the KL targets.
pub fn kd_loss<T: Real>(g: &mut Graph<T>, p_self: Var, p_self_t: Var, p_peer: Var, p_peer_t: Var) -> Result<Var> {
    let a = kl_div(g, p_peer, p_self)?;
    let b = kl_div(g, p_peer_t, p_self_t)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::from_f64(0.5)))
}

/// Mean of `(a - b)^2` over the batch, the channels and the valid pixels.
pub fn masked_mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var, mask: &ValidityMask) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let valid = mask.count();
    if valid == 0 {
        return Err(Error::DegenerateMask);
    }
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let summed = if mask.is_all_valid() {
        g.sum(sq)
    } else {
        let m = g.input(mask.broadcast(&shape)?);
        let kept = g.mul(sq, m)?;
        g.sum(kept)
    };
    Ok(g.scale(summed, T::one() / T::from_f64((planes * valid) as f64)))
}

/// Within-modality equivariance: `π(M)` against `M̃`, both differentiable.
pub fn er_loss<T: Real>(g: &mut Graph<T>, out: &SiameseOutput) -> Result<Var> {
    let (moved, mask) = transforms::apply_var(g, &out.transform, out.original.cam)?;
    masked_mse(g, moved, out.transformed.cam, &mask)
}

/// Cross-modal equivariance between this network's CAMs and a peer's, on
/// per-map L2-normalized CAMs. Peer CAMs are detached.
pub fn cmer_loss<T: Real>(g: &mut Graph<T>, me: &SiameseOutput, peer: &SiameseOutput) -> Result<Var> {
    if me.transform != peer.transform {
        return Err(Error::invalid("cross-modal term needs both networks under the same transform"));
    }
    let eps = T::from_f64(NORM_EPS);
    let pm = g.detach(peer.original.cam);
    let pmt = g.detach(peer.transformed.cam);
    let pm = g.l2_normalize(pm, eps)?;
    let pmt = g.l2_normalize(pmt, eps)?;
    let sm = g.l2_normalize(me.original.cam, eps)?;
    let smt = g.l2_normalize(me.transformed.cam, eps)?;

    let (peer_moved, mask) = transforms::apply_var(g, &me.transform, pm)?;
    let (self_moved, _) = transforms::apply_var(g, &me.transform, sm)?;
    let a = masked_mse(g, peer_moved, smt, &mask)?;
    let b = masked_mse(g, pmt, self_moved, &mask)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::from_f64(0.5)))
}

/// Per-network objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub modality: u32,
    pub epoch: u32,
    pub l_c: f64,
    pub l_kd: f64,
    pub l_er: f64,
    pub l_cmer: f64,
    pub lambda_e: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum the total must equal.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let mut t = self.l_c;
        if w.kd {
            t += w.lambda_kd * self.l_kd;
        }
        let eq = if w.er { self.l_er } else { 0.0 } + if w.cmer { self.l_cmer } else { 0.0 };
        t + self.lambda_e * eq
    }
}

/// Loss of network `k` given every network's Siamese outputs on the same
/// minibatch and transform:
///
/// `L_C + λ_KD · mean_l L_KD(k, l) + λ_E(t) · (L_ER + mean_l L_CMER(k, l))`
///
/// with `l` ranging over the other networks and disabled terms left out of
/// the total. Every term is still evaluated and reported; disabled ones
/// contribute no gradient.
pub fn network_objective<T: Real>(
    g: &mut Graph<T>,
    k: usize,
    outputs: &[SiameseOutput],
    y: &DenseArray<T>,
    weights: &LossWeights,
    epoch: u32,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let n_mod = outputs.len();
    if k >= n_mod {
        return Err(Error::invalid(format!("network index {k} out of range for {n_mod} networks")));
    }
    if n_mod == 1 && (weights.kd || weights.cmer) {
        return Err(Error::invalid(
            "single-modality training cannot use the kd or cmer terms; disable them",
        ));
    }
    let me = &outputs[k];
    let l_c = classification_loss(g, me.original.forward.probs, me.transformed.forward.probs, y)?;
    let l_er = er_loss(g, me)?;

    let peers: Vec<&SiameseOutput> = outputs
        .iter()
        .enumerate()
        .filter_map(|(l, o)| (l != k).then_some(o))
        .collect();
    let peer_mean = |g: &mut Graph<T>, terms: Vec<Var>| -> Result<Option<Var>> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in rest {
            acc = g.add(acc, t)?;
        }
        Ok(Some(g.scale(acc, T::one() / T::from_f64(terms.len() as f64))))
    };
    let kd_terms = peers
        .iter()
        .map(|p| {
            kd_loss(
                g,
                me.original.forward.probs,
                me.transformed.forward.probs,
                p.original.forward.probs,
                p.transformed.forward.probs,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let l_kd = peer_mean(g, kd_terms)?;
    let cmer_terms = peers
        .iter()
        .map(|p| cmer_loss(g, me, p))
        .collect::<Result<Vec<_>>>()?;
    let l_cmer = peer_mean(g, cmer_terms)?;

    let lam_e = lambda_e(epoch, weights.schedule_t);
    let mut total = l_c;
    if weights.kd {
        let t = g.scale(l_kd.expect("peers present"), T::from_f64(weights.lambda_kd));
        total = g.add(total, t)?;
    }
    let mut eq: Option<Var> = None;
    if weights.er {
        eq = Some(l_er);
    }
    if weights.cmer {
        let c = l_cmer.expect("peers present");
        eq = Some(match eq {
            Some(e) => g.add(e, c)?,
            None => c,
        });
    }
    if let Some(e) = eq {
        let t = g.scale(e, T::from_f64(lam_e));
        total = g.add(total, t)?;
    }

    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
    let breakdown = LossBreakdown {
        modality: k as u32,
        epoch,
        l_c: val(g, Some(l_c)),
        l_kd: val(g, l_kd),
        l_er: val(g, Some(l_er)),
        l_cmer: val(g, l_cmer),
        lambda_e: lam_e,
        total: val(g, Some(total)),
    };
    Ok((total, breakdown))
}

/// Smoothing of the soft-Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

fn check_pixel_one_hot<T: Real>(probs: &DenseArray<T>, target: &DenseArray<T>) -> Result<()> {
    if probs.shape() != target.shape() {
        return Err(Error::shape("pixel loss", probs.shape(), target.shape()));
    }
    let [n, c, h, w] = target.dims4()?;
    let hw = h * w;
    for i in 0..n {
        for q in 0..hw {
            let mut total = T::zero();
            for ch in 0..c {
                let v = target.data()[(i * c + ch) * hw + q];
                if v != T::zero() && v != T::one() {
                    return Err(Error::invalid("pixel target is not one-hot"));
                }
                total += v;
            }
            if total != T::one() {
                return Err(Error::invalid("pixel target is not one-hot"));
            }
        }
    }
    Ok(())
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` over the foreground channels of
/// the whole batch. `probs` and `target` are `[N, C, H, W]`.
pub fn soft_dice_loss<T: Real>(g: &mut Graph<T>, probs: Var, target: &DenseArray<T>) -> Result<Var> {
    check_pixel_one_hot(g.value(probs), target)?;
    let c = target.shape()[1];
    let fg = g.slice_channels(probs, 1, c - 1)?;
    let [n, _, h, w] = target.dims4()?;
    let hw = h * w;
    let fg_target: Vec<T> = (0..n)
        .flat_map(|i| target.data()[(i * c + 1) * hw..(i * c + c) * hw].iter().copied())
        .collect();
    let gsum: T = fg_target.iter().copied().sum();
    let tv = g.input(DenseArray::new(vec![n, c - 1, h, w], fg_target)?);
    let inter = g.mul(fg, tv)?;
    let inter = g.sum(inter);
    let num = g.scale(inter, T::from_f64(2.0));
    let num = g.add_scalar(num, T::from_f64(DICE_EPS));
    let psum = g.sum(fg);
    let den = g.add_scalar(psum, gsum + T::from_f64(DICE_EPS));
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Per-pixel cross-entropy averaged over batch and pixels.
pub fn pixel_ce_loss<T: Real>(g: &mut Graph<T>, probs: Var, target: &DenseArray<T>) -> Result<Var> {
    check_pixel_one_hot(g.value(probs), target)?;
    let [n, _, h, w] = target.dims4()?;
    let logp = g.log_clamped(probs, T::from_f64(LOG_FLOOR));
    let tv = g.input(target.clone());
    let picked = g.mul(logp, tv)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one() / T::from_f64((n * h * w) as f64)))
}

/// Soft-Dice plus pixel cross-entropy on the per-pixel channel softmax.
pub fn segmentation_loss<T: Real>(g: &mut Graph<T>, probs: Var, target: &DenseArray<T>) -> Result<Var> {
    let d = soft_dice_loss(g, probs, target)?;
    let ce = pixel_ce_loss(g, probs, target)?;
    g.add(d, ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn probs(g: &mut Graph<f64>, rows: &[[f64; 2]]) -> Var {
        let data = rows.iter().flatten().copied().collect();
        g.param(DenseArray::new(vec![rows.len(), 2], data).unwrap())
    }

    fn labels(rows: &[[f64; 2]]) -> DenseArray<f64> {
        DenseArray::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn lambda_schedule_values() {
        assert_eq!(lambda_e(15, 15), 1.0);
        assert_eq!(lambda_e(20, 15), 1.0);
        assert_abs_diff_eq!(lambda_e(14, 15), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(lambda_e(14, 15), 0.367879, epsilon = 1e-6);
        assert!(lambda_e(0, 15) < 1e-90);
        for t in 0..40 {
            assert!(lambda_e(t + 1, 15) >= lambda_e(t, 15));
        }
    }

    #[test]
    fn ce_closed_forms() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let y = labels(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = ce_loss(&mut g, p, &y).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-12);

        let p = probs(&mut g, &[[0.5, 0.5]]);
        let l = ce_loss(&mut g, p, &labels(&[[1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 2f64.ln(), epsilon = 1e-12);

        let bad = labels(&[[1.0, 1.0]]);
        assert!(ce_loss(&mut g, p, &bad).is_err());
        let soft = labels(&[[0.7, 0.3]]);
        assert!(ce_loss(&mut g, p, &soft).is_err());
    }

    #[test]
    fn classification_loss_half_of_branches() {
        let mut g = Graph::new();
        let perfect = probs(&mut g, &[[1.0, 0.0]]);
        let uniform = probs(&mut g, &[[0.5, 0.5]]);
        let y = labels(&[[1.0, 0.0]]);
        let l = classification_loss(&mut g, perfect, perfect, &y).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-12);
        let l = classification_loss(&mut g, perfect, uniform, &y).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.5 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_closed_forms_and_detached_target() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[[0.3, 0.7]]);
        let q = probs(&mut g, &[[0.3, 0.7]]);
        let l = kl_div(&mut g, p, q).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-12);

        let p = probs(&mut g, &[[1.0, 0.0]]);
        let q = probs(&mut g, &[[0.5, 0.5]]);
        let l = kl_div(&mut g, p, q).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 2f64.ln(), epsilon = 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(q).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn kd_peer_gradient_is_exactly_zero() {
        let mut g = Graph::new();
        let a = probs(&mut g, &[[0.2, 0.8], [0.6, 0.4]]);
        let at = probs(&mut g, &[[0.1, 0.9], [0.5, 0.5]]);
        let b = probs(&mut g, &[[0.3, 0.7], [0.9, 0.1]]);
        let bt = probs(&mut g, &[[0.4, 0.6], [0.2, 0.8]]);
        let l = kd_loss(&mut g, a, at, b, bt).unwrap();
        let grads = g.backward(l).unwrap();
        for v in [b, bt] {
            assert!(grads.get(v).unwrap().data().iter().all(|&x| x == 0.0));
        }

        let mut g = Graph::new();
        let a = probs(&mut g, &[[0.2, 0.8]]);
        let at = probs(&mut g, &[[0.1, 0.9]]);
        let l = kd_loss(&mut g, a, at, a, at).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn toggle_parsing_round_trip() {
        let mut w = LossWeights::default();
        w.set_toggles("er, cmer").unwrap();
        assert!(!w.kd && w.er && w.cmer);
        assert_eq!(w.toggles(), "er,cmer");
        w.set_toggles("").unwrap();
        assert_eq!(w.toggles(), "none");
        assert!(w.set_toggles("kd,foo").is_err());
    }

    #[test]
    fn weights_validation() {
        let bad = LossWeights {
            lambda_kd: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            schedule_t: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    use crate::model::{siamese_step, Architecture, Network};
    use crate::ndgrad::{grad_check, GradCheckConfig};
    use crate::transforms::AffineTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, n: usize, h: usize) -> DenseArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseArray::from_fn(&[n, 1, h, h], |_| rng.random_range(0.0..1.0))
    }

    fn one_hot(n: usize) -> DenseArray<f64> {
        DenseArray::from_fn(&[n, 2], |i| if (i / 2) % 2 == i % 2 { 1.0 } else { 0.0 })
    }

    fn run(
        nets: &[Network<f64>],
        x: &DenseArray<f64>,
        t: &AffineTransform,
    ) -> (Graph<f64>, Vec<Vec<Var>>, Vec<SiameseOutput>) {
        let arch = &nets[0].arch;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let vars: Vec<Vec<Var>> = nets.iter().map(|n| n.bind(&mut g)).collect();
        let outs = vars
            .iter()
            .map(|v| siamese_step(&mut g, arch, v, xv, t).unwrap())
            .collect();
        (g, vars, outs)
    }

    // Array oracles, independent of the graph ops.
    fn oracle_masked_mse(a: &[f64], b: &[f64], mask: &[bool], planes: usize) -> f64 {
        let hw = mask.len();
        let mut s = 0.0;
        for p in 0..planes {
            for q in 0..hw {
                if mask[q] {
                    let d = a[p * hw + q] - b[p * hw + q];
                    s += d * d;
                }
            }
        }
        s / (planes * mask.iter().filter(|&&m| m).count()) as f64
    }

    fn oracle_l2n(a: &[f64], hw: usize) -> Vec<f64> {
        a.chunks(hw)
            .flat_map(|c| {
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                c.iter().map(move |v| v / n).collect::<Vec<_>>()
            })
            .collect()
    }

    fn oracle_kl(p: &[f64], q: &[f64], c: usize) -> f64 {
        let n = p.len() / c;
        let mut s = 0.0;
        for (pi, qi) in p.iter().zip(q) {
            if *pi > 0.0 {
                s += pi * (pi / qi.max(LOG_FLOOR)).ln();
            }
        }
        s / n as f64
    }

    fn oracle_ce(p: &[f64], y: &[f64], c: usize) -> f64 {
        let n = p.len() / c;
        -p.iter().zip(y).map(|(p, y)| y * p.max(LOG_FLOOR).ln()).sum::<f64>() / n as f64
    }

    #[test]
    fn er_and_cmer_match_array_oracles() {
        let arch = Architecture::standard(1, 2);
        let nets: Vec<_> = (0..2).map(|k| Network::<f64>::init(11, k, &arch).unwrap()).collect();
        let x = batch(1, 2, 12);
        for t in [
            AffineTransform::Rotate90 { k: 1 },
            AffineTransform::Scale { s: 0.9 },
            AffineTransform::Translate { dh: 1.5, dw: -2.0 },
        ] {
            let (mut g, _, outs) = run(&nets, &x, &t);
            let er = er_loss(&mut g, &outs[0]).unwrap();
            let cm = cmer_loss(&mut g, &outs[0], &outs[1]).unwrap();

            let hw = 144;
            let m0 = g.value(outs[0].original.cam).clone();
            let m0t = g.value(outs[0].transformed.cam).data().to_vec();
            let m1 = g.value(outs[1].original.cam).clone();
            let m1t = g.value(outs[1].transformed.cam).data().to_vec();
            let (pm0, mask) = transforms::apply(&t, &m0).unwrap();
            let want_er = oracle_masked_mse(pm0.data(), &m0t, mask.flags(), 2);
            assert_abs_diff_eq!(g.scalar(er), want_er, epsilon = 1e-12);

            let n = |a: &DenseArray<f64>| {
                DenseArray::new(a.shape().to_vec(), oracle_l2n(a.data(), hw)).unwrap()
            };
            let (pn1, _) = transforms::apply(&t, &n(&m1)).unwrap();
            let (pn0, _) = transforms::apply(&t, &n(&m0)).unwrap();
            let want_cm = 0.5
                * (oracle_masked_mse(pn1.data(), &oracle_l2n(&m0t, hw), mask.flags(), 2)
                    + oracle_masked_mse(&oracle_l2n(&m1t, hw), pn0.data(), mask.flags(), 2));
            assert_abs_diff_eq!(g.scalar(cm), want_cm, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_modality_objective_is_sum_of_parts() {
        let arch = Architecture::standard(1, 2);
        let nets: Vec<_> = (0..3).map(|k| Network::<f64>::init(5, k, &arch).unwrap()).collect();
        let x = batch(2, 4, 10);
        let y = one_hot(4);
        let t = AffineTransform::FlipVertical;
        let w = LossWeights::default();
        let epoch = 14;
        let (mut g, _, outs) = run(&nets, &x, &t);
        for k in 0..3 {
            let (total, b) = network_objective(&mut g, k, &outs, &y, &w, epoch).unwrap();
            let probs = |o: &SiameseOutput, tr: bool| {
                let v = if tr { o.transformed.forward.probs } else { o.original.forward.probs };
                g.value(v).data().to_vec()
            };
            let me = &outs[k];
            let l_c = 0.5 * (oracle_ce(&probs(me, false), y.data(), 2) + oracle_ce(&probs(me, true), y.data(), 2));
            let peers: Vec<usize> = (0..3).filter(|&l| l != k).collect();
            let l_kd = peers
                .iter()
                .map(|&l| {
                    0.5 * (oracle_kl(&probs(&outs[l], false), &probs(me, false), 2)
                        + oracle_kl(&probs(&outs[l], true), &probs(me, true), 2))
                })
                .sum::<f64>()
                / 2.0;
            let v = er_loss(&mut g, me).unwrap();
            let l_er = g.scalar(v);
            let l_cmer = peers
                .iter()
                .map(|&l| {
                    let v = cmer_loss(&mut g, me, &outs[l]).unwrap();
                    g.scalar(v)
                })
                .sum::<f64>()
                / 2.0;
            let lam = (-1.0f64).exp();
            let want = l_c + 0.5 * l_kd + lam * (l_er + l_cmer);
            assert_abs_diff_eq!(b.l_c, l_c, epsilon = 1e-12);
            assert_abs_diff_eq!(b.l_kd, l_kd, epsilon = 1e-12);
            assert_abs_diff_eq!(b.l_er, l_er, epsilon = 1e-12);
            assert_abs_diff_eq!(b.l_cmer, l_cmer, epsilon = 1e-12);
            assert_abs_diff_eq!(b.lambda_e, lam, epsilon = 1e-15);
            assert_abs_diff_eq!(g.scalar(total), want, epsilon = 1e-12);
            assert_abs_diff_eq!(b.recombine(&w), b.total, epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_gradients_stay_in_own_network() {
        let arch = Architecture::standard(1, 2);
        let nets: Vec<_> = (0..2).map(|k| Network::<f64>::init(3, k, &arch).unwrap()).collect();
        let x = batch(4, 2, 8);
        let (mut g, vars, outs) = run(&nets, &x, &AffineTransform::Scale { s: 1.15 });
        let (total, _) = network_objective(&mut g, 0, &outs, &one_hot(2), &LossWeights::default(), 20).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(vars[0].iter().any(|&v| grads.get(v).unwrap().data().iter().any(|&d| d != 0.0)));
        for &v in &vars[1] {
            assert!(grads.get(v).unwrap().data().iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn disabled_terms_carry_no_weight() {
        let arch = Architecture::standard(1, 2);
        let nets: Vec<_> = (0..2).map(|k| Network::<f64>::init(3, k, &arch).unwrap()).collect();
        let x = batch(6, 2, 8);
        let (mut g, _, outs) = run(&nets, &x, &AffineTransform::FlipHorizontal);
        let mut w = LossWeights::default();
        w.set_toggles("").unwrap();
        let (total, b) = network_objective(&mut g, 0, &outs, &one_hot(2), &w, 30).unwrap();
        assert_abs_diff_eq!(g.scalar(total), b.l_c, epsilon = 1e-15);
        assert!(b.l_kd > 0.0);

        let single = &outs[..1];
        assert!(network_objective(&mut g, 0, single, &one_hot(2), &LossWeights::default(), 0).is_err());
        let (_, b) = network_objective(&mut g, 0, single, &one_hot(2), &LossWeights { kd: false, cmer: false, ..Default::default() }, 0).unwrap();
        assert_eq!(b.l_kd, 0.0);
    }

    #[test]
    fn objective_passes_gradient_check() {
        let arch = Architecture::standard(1, 2);
        let peer = Network::<f64>::init(21, 1, &arch).unwrap();
        let mut me = Network::<f64>::init(21, 0, &arch).unwrap();
        let x = batch(8, 2, 8);
        let y = one_hot(2);
        let t = AffineTransform::Translate { dh: 1.0, dw: 1.0 };
        let cfg = GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_per_tensor: Some(64),
            ..Default::default()
        };
        let report = grad_check(
            |g, vars| {
                let xv = g.input(x.clone());
                let pv = peer.bind_frozen(g);
                let a = siamese_step(g, &arch, vars, xv, &t)?;
                let b = siamese_step(g, &arch, &pv, xv, &t)?;
                Ok(network_objective(g, 0, &[a, b], &y, &LossWeights::default(), 20)?.0)
            },
            &mut me.params,
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn mask_target(n: usize, hw: usize, fg: impl Fn(usize, usize) -> bool) -> DenseArray<f64> {
        let mut t = vec![0.0; n * 2 * hw];
        for i in 0..n {
            for q in 0..hw {
                let c = fg(i, q) as usize;
                t[(i * 2 + c) * hw + q] = 1.0;
            }
        }
        DenseArray::new(vec![n, 2, 4, hw / 4], t).unwrap()
    }

    #[test]
    fn segmentation_losses_closed_forms() {
        let target = mask_target(2, 16, |i, q| (i + q) % 2 == 0);
        let mut g = Graph::new();
        let perfect = g.param(target.clone());
        let d = soft_dice_loss(&mut g, perfect, &target).unwrap();
        assert_abs_diff_eq!(g.scalar(d), 0.0, epsilon = 1e-6);
        let ce = pixel_ce_loss(&mut g, perfect, &target).unwrap();
        assert_abs_diff_eq!(g.scalar(ce), 0.0, epsilon = 1e-12);

        let uniform = g.param(DenseArray::full(target.shape(), 0.5));
        let d = soft_dice_loss(&mut g, uniform, &target).unwrap();
        assert_abs_diff_eq!(g.scalar(d), 0.5, epsilon = 1e-6);
        let ce = pixel_ce_loss(&mut g, uniform, &target).unwrap();
        assert_abs_diff_eq!(g.scalar(ce), 2f64.ln(), epsilon = 1e-12);

        let bad = DenseArray::full(target.shape(), 0.5);
        assert!(soft_dice_loss(&mut g, uniform, &bad).is_err());
    }

    #[test]
    fn segmentation_loss_gradient_check() {
        let target = mask_target(2, 16, |i, q| q % 5 == i);
        let logits = batch(3, 4, 4).reshape(&[2, 2, 4, 4]).unwrap();
        let mut params = vec![("a".to_string(), logits)];
        let report = grad_check(
            |g, v| {
                let p = g.channel_softmax(v[0])?;
                segmentation_loss(g, p, &target)
            },
            &mut params,
            &GradCheckConfig {
                step: 1e-6,
                tolerance: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
