//! Spatial transforms applied identically to images and activation maps.
//!
//! Flips and quarter rotations are exact index permutations. Scaling about
//! the image center and translation resample bilinearly; output pixels whose
//! source falls outside the image are zero-filled and flagged invalid in the
//! accompanying [`ValidityMask`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{DenseArray, Graph, Real, ResamplePlan, Var};

pub const SCALE_MIN: f64 = 0.8;
pub const SCALE_MAX: f64 = 1.2;
/// Translations satisfy `|dh| < SHIFT_FRACTION * H` (strictly).
pub const SHIFT_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AffineTransform {
    FlipHorizontal,
    FlipVertical,
    /// Counter-clockwise rotation by `k * 90` degrees.
    Rotate90 { k: u8 },
    /// Zoom about the image center; `s > 1` magnifies.
    Scale { s: f64 },
    /// Content moves by `dh` rows and `dw` columns.
    Translate { dh: f64, dw: f64 },
}

impl AffineTransform {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match *self {
            AffineTransform::Rotate90 { k } if !(1..=3).contains(&k) => {
                Err(Error::invalid(format!("rotate90 k must be in 1..=3, got {k}")))
            }
            AffineTransform::Rotate90 { .. } if h != w => Err(Error::shape(
                "rotate90 (needs a square grid)",
                &[h, w],
                &[w, h],
            )),
            AffineTransform::Scale { s } if !(SCALE_MIN..=SCALE_MAX).contains(&s) => Err(
                Error::invalid(format!("scale ratio {s} outside [{SCALE_MIN}, {SCALE_MAX}]")),
            ),
            AffineTransform::Translate { dh, dw }
                if !(dh.abs() < SHIFT_FRACTION * h as f64 && dw.abs() < SHIFT_FRACTION * w as f64) =>
            {
                Err(Error::invalid(format!(
                    "translation ({dh}, {dw}) exceeds {SHIFT_FRACTION} of the {h}x{w} extent"
                )))
            }
            _ => Ok(()),
        }
    }

    /// True for transforms that permute pixels without resampling.
    pub fn is_permutation(&self) -> bool {
        matches!(
            self,
            AffineTransform::FlipHorizontal
                | AffineTransform::FlipVertical
                | AffineTransform::Rotate90 { .. }
        )
    }

    /// The resampling plan of this transform on an `h x w` grid.
    pub fn plan(&self, h: usize, w: usize) -> Result<ResamplePlan> {
        self.validate(h, w)?;
        let at = |i: usize, j: usize| i * w + j;
        let plan = match *self {
            AffineTransform::FlipHorizontal => {
                ResamplePlan::from_taps(h, w, |i, j| Some(vec![(at(i, w - 1 - j), 1.0)]))
            }
            AffineTransform::FlipVertical => {
                ResamplePlan::from_taps(h, w, |i, j| Some(vec![(at(h - 1 - i, j), 1.0)]))
            }
            AffineTransform::Rotate90 { k } => ResamplePlan::from_taps(h, w, |i, j| {
                let (si, sj) = match k {
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                Some(vec![(at(si, sj), 1.0)])
            }),
            AffineTransform::Scale { s } => {
                let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                ResamplePlan::from_taps(h, w, |i, j| {
                    bilinear_taps(ci + (i as f64 - ci) / s, cj + (j as f64 - cj) / s, h, w)
                })
            }
            AffineTransform::Translate { dh, dw } => ResamplePlan::from_taps(h, w, |i, j| {
                bilinear_taps(i as f64 - dh, j as f64 - dw, h, w)
            }),
        };
        Ok(plan)
    }
}

impl fmt::Display for AffineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AffineTransform::FlipHorizontal => write!(f, "flip_h"),
            AffineTransform::FlipVertical => write!(f, "flip_v"),
            AffineTransform::Rotate90 { k } => write!(f, "rot90(k={k})"),
            AffineTransform::Scale { s } => write!(f, "scale({s:.4})"),
            AffineTransform::Translate { dh, dw } => write!(f, "translate({dh:.3},{dw:.3})"),
        }
    }
}

const BOUNDARY_TOL: f64 = 1e-9;

/// Bilinear taps at real source coordinates, `None` outside the grid.
fn bilinear_taps(si: f64, sj: f64, h: usize, w: usize) -> Option<Vec<(usize, f64)>> {
    let inside = |v: f64, n: usize| v >= -BOUNDARY_TOL && v <= n as f64 - 1.0 + BOUNDARY_TOL;
    if !inside(si, h) || !inside(sj, w) {
        return None;
    }
    let si = si.clamp(0.0, h as f64 - 1.0);
    let sj = sj.clamp(0.0, w as f64 - 1.0);
    let i0 = (si.floor() as usize).min(h.saturating_sub(2));
    let j0 = (sj.floor() as usize).min(w.saturating_sub(2));
    let (fi, fj) = (si - i0 as f64, sj - j0 as f64);
    let mut taps = Vec::with_capacity(4);
    for (di, wi) in [(0, 1.0 - fi), (1, fi)] {
        for (dj, wj) in [(0, 1.0 - fj), (1, fj)] {
            let wt = wi * wj;
            if wt != 0.0 {
                taps.push(((i0 + di) * w + j0 + dj, wt));
            }
        }
    }
    Some(taps)
}

/// Which transform kinds the sampler may draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSet {
    pub flip: bool,
    pub rot90: bool,
    pub scale: bool,
    pub translate: bool,
}

impl Default for TransformSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl TransformSet {
    pub const ALL: TransformSet = TransformSet {
        flip: true,
        rot90: true,
        scale: true,
        translate: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.flip || self.rot90 || self.scale || self.translate)
    }
}

impl FromStr for TransformSet {
    type Err = Error;

    /// Comma list drawn from `flip,rot90,scale,translate`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = TransformSet {
            flip: false,
            rot90: false,
            scale: false,
            translate: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "flip" => set.flip = true,
                "rot90" => set.rot90 = true,
                "scale" => set.scale = true,
                "translate" => set.translate = true,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown transform {other:?} (expected flip, rot90, scale, translate)"
                    )))
                }
            }
        }
        if set.is_empty() {
            return Err(Error::invalid("transform list is empty"));
        }
        Ok(set)
    }
}

impl fmt::Display for TransformSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.flip, "flip"),
            (self.rot90, "rot90"),
            (self.scale, "scale"),
            (self.translate, "translate"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Draws one transform for an `h x w` grid. The kind is uniform over the
/// enabled kinds (horizontal and vertical flips count as two kinds), and its
/// parameters are uniform within their bounds.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    set: &TransformSet,
    h: usize,
    w: usize,
) -> AffineTransform {
    assert!(!set.is_empty(), "sampling from an empty transform set");
    #[derive(Clone, Copy)]
    enum Kind {
        FlipH,
        FlipV,
        Rot,
        Scale,
        Shift,
    }
    let mut kinds = Vec::with_capacity(5);
    if set.flip {
        kinds.extend([Kind::FlipH, Kind::FlipV]);
    }
    if set.rot90 {
        kinds.push(Kind::Rot);
    }
    if set.scale {
        kinds.push(Kind::Scale);
    }
    if set.translate {
        kinds.push(Kind::Shift);
    }
    match kinds[rng.random_range(0..kinds.len())] {
        Kind::FlipH => AffineTransform::FlipHorizontal,
        Kind::FlipV => AffineTransform::FlipVertical,
        Kind::Rot => AffineTransform::Rotate90 {
            k: rng.random_range(1..=3),
        },
        Kind::Scale => AffineTransform::Scale {
            s: rng.random_range(SCALE_MIN..=SCALE_MAX),
        },
        Kind::Shift => {
            let mut open = |n: usize| {
                let bound = SHIFT_FRACTION * n as f64;
                loop {
                    let v = rng.random_range(-bound..bound);
                    if v.abs() < bound {
                        return v;
                    }
                }
            };
            let dh = open(h);
            let dw = open(w);
            AffineTransform::Translate { dh, dw }
        }
    }
}

/// `H x W` flags, true where a transformed pixel has a source in the domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    h: usize,
    w: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(h: usize, w: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != h * w {
            return Err(Error::shape("ValidityMask", &[h, w], &[valid.len()]));
        }
        Ok(Self { h, w, valid })
    }

    pub fn all_valid(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            valid: vec![true; h * w],
        }
    }

    pub fn from_plan(plan: &ResamplePlan) -> Self {
        let (h, w) = plan.extents();
        Self {
            h,
            w,
            valid: plan.valid().to_vec(),
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// 0/1 array of `shape`, whose trailing axes must be `[H, W]`, with the
    /// mask repeated over the leading axes.
    pub fn broadcast<T: Real>(&self, shape: &[usize]) -> Result<DenseArray<T>> {
        let r = shape.len();
        if r < 2 || shape[r - 2..] != [self.h, self.w] {
            return Err(Error::shape("ValidityMask::broadcast", shape, &[self.h, self.w]));
        }
        let hw = self.h * self.w;
        Ok(DenseArray::from_fn(shape, |i| {
            if self.valid[i % hw] {
                T::one()
            } else {
                T::zero()
            }
        }))
    }
}

/// Applies `t` to every `[H, W]` plane of `grid`.
pub fn apply<T: Real>(t: &AffineTransform, grid: &DenseArray<T>) -> Result<(DenseArray<T>, ValidityMask)> {
    let (h, w) = grid.spatial()?;
    let plan = t.plan(h, w)?;
    let out = plan.apply(grid)?;
    Ok((out, ValidityMask::from_plan(&plan)))
}

/// Differentiable [`apply`] on a graph node.
pub fn apply_var<T: Real>(g: &mut Graph<T>, t: &AffineTransform, x: Var) -> Result<(Var, ValidityMask)> {
    let (h, w) = g.value(x).spatial()?;
    let plan = Arc::new(t.plan(h, w)?);
    let mask = ValidityMask::from_plan(&plan);
    let out = g.resample(x, plan)?;
    Ok((out, mask))
}

/// Zeroes both arrays where `mask` is invalid and returns the number of
/// valid pixels per plane.
pub fn restrict_to_valid<T: Real>(
    a: &DenseArray<T>,
    b: &DenseArray<T>,
    mask: &ValidityMask,
) -> Result<(DenseArray<T>, DenseArray<T>, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("restrict_to_valid", a.shape(), b.shape()));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::DegenerateMask);
    }
    let m: DenseArray<T> = mask.broadcast(a.shape())?;
    let prod = |x: &DenseArray<T>| {
        DenseArray::new(
            x.shape().to_vec(),
            x.data().iter().zip(m.data()).map(|(&v, &k)| v * k).collect(),
        )
    };
    Ok((prod(a)?, prod(b)?, count))
}
