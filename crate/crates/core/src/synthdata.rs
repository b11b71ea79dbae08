//! Procedurally generated co-registered multi-modal images.
//!
//! Every sample starts from one latent scene: an elliptical organ on a dark
//! background, optionally containing an elliptical lesion whose area is
//! between 2% and 15% of the organ's. Each modality renders that scene
//! through its own monotone intensity transfer (increasing tissue levels
//! followed by a gamma curve), adds Gaussian noise and clips to `[0, 1]`. The lesion support, and therefore the pixel mask,
//! is shared by all modalities.
//!
//! Randomness comes from ChaCha8 seeded with [`DatasetSpec::seed`].

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::ndgrad::DenseArray;

pub const DATASET_MAGIC: &[u8; 8] = b"EQCMDAT1";
pub const DATASET_VERSION: u32 = 1;
/// Healthy / non-healthy.
pub const NUM_CLASSES: usize = 2;

const LESION_MIN_FRACTION: f64 = 0.02;
const LESION_MAX_FRACTION: f64 = 0.15;

/// Intensity of each tissue class before the gamma curve. Levels increase
/// from background to organ to lesion, so the transfer is monotone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastProfile {
    pub background: f64,
    pub organ: f64,
    pub lesion: f64,
    /// Exponent of the monotone transfer `v -> v^gamma`.
    pub gamma: f64,
}

impl ContrastProfile {
    /// Lesion brighter than the organ.
    pub const BRIGHT_LESION: ContrastProfile = ContrastProfile {
        background: 0.05,
        organ: 0.45,
        lesion: 0.80,
        gamma: 1.0,
    };

    /// Lesion only slightly brighter than the organ.
    pub const FAINT_LESION: ContrastProfile = ContrastProfile {
        background: 0.05,
        organ: 0.53,
        lesion: 0.76,
        gamma: 1.4,
    };

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let mix = |x: f64, y: f64| x + (y - x) * t;
        Self {
            background: mix(a.background, b.background),
            organ: mix(a.organ, b.organ),
            lesion: mix(a.lesion, b.lesion),
            gamma: mix(a.gamma, b.gamma),
        }
    }

    fn render(&self, tissue: Tissue, texture: f64) -> f64 {
        let base = match tissue {
            Tissue::Background => self.background,
            Tissue::Organ => self.organ + texture,
            Tissue::Lesion => self.lesion + texture,
        };
        base.clamp(0.0, 1.0).powf(self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub modalities: usize,
    pub lesion_prevalence: f64,
    /// Per-modality Gaussian noise standard deviation.
    pub noise_sigma: Vec<f64>,
    pub contrast: Vec<ContrastProfile>,
    /// Amplitude of the smooth organ texture shared by all modalities.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::with_modalities(2)
    }
}

impl DatasetSpec {
    /// Default `DatasetSpec` for `k` modalities: the first renders lesions at high
    /// contrast, the last at low contrast with more noise, intermediate ones
    /// interpolate.
    pub fn with_modalities(k: usize) -> Self {
        let k = k.max(1);
        let contrast = (0..k)
            .map(|i| {
                if k == 1 {
                    ContrastProfile::BRIGHT_LESION
                } else {
                    let t = i as f64 / (k - 1) as f64;
                    ContrastProfile::lerp(&ContrastProfile::BRIGHT_LESION, &ContrastProfile::FAINT_LESION, t)
                }
            })
            .collect();
        let noise_sigma = (0..k)
            .map(|i| if k == 1 { 0.10 } else { 0.10 + 0.04 * i as f64 / (k - 1) as f64 })
            .collect();
        Self {
            n_train: 512,
            n_val: 64,
            n_test: 128,
            height: 32,
            width: 32,
            modalities: k,
            lesion_prevalence: 0.5,
            noise_sigma,
            contrast,
            texture_amplitude: 0.06,
            seed: 0,
        }
    }

    /// Sets the modality count, regenerating per-modality defaults when the
    /// count changes.
    pub fn set_modalities(&mut self, k: usize) {
        if k != self.modalities {
            let fresh = Self::with_modalities(k);
            self.modalities = k;
            self.noise_sigma = fresh.noise_sigma;
            self.contrast = fresh.contrast;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::invalid("dataset split counts must be at least 1"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "image extents must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(1..=4).contains(&self.modalities) {
            return Err(Error::invalid(format!(
                "modality count must be in 1..=4, got {}",
                self.modalities
            )));
        }
        if !(self.lesion_prevalence > 0.0 && self.lesion_prevalence <= 1.0) {
            return Err(Error::invalid(format!(
                "lesion prevalence must be in (0, 1], got {}",
                self.lesion_prevalence
            )));
        }
        if self.noise_sigma.len() != self.modalities || self.contrast.len() != self.modalities {
            return Err(Error::invalid(
                "noise_sigma and contrast need one entry per modality",
            ));
        }
        if self.noise_sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("noise sigma must be finite and non-negative"));
        }
        if self.contrast.iter().any(|c| !(c.gamma > 0.0)) {
            return Err(Error::invalid("contrast gamma must be positive"));
        }
        if let Some(c) = self
            .contrast
            .iter()
            .find(|c| !(0.0 <= c.background && c.background < c.organ && c.organ < c.lesion && c.lesion <= 1.0))
        {
            return Err(Error::invalid(format!(
                "tissue levels must satisfy 0 <= background < organ < lesion <= 1, got {c:?}"
            )));
        }
        Ok(())
    }
}

/// One co-registered multi-modal image with its label and pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    pub id: u64,
    /// One `[H, W]` image per modality, values in `[0, 1]`.
    pub images: Vec<DenseArray<f32>>,
    /// One-hot over `NUM_CLASSES`; index 1 is non-healthy.
    pub label: Vec<f32>,
    /// Row-major `H x W`, 1 on lesion pixels.
    pub mask: Vec<u8>,
}

impl ModalitySample {
    pub fn class_index(&self) -> usize {
        self.label
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot label")
    }

    pub fn is_positive(&self) -> bool {
        self.class_index() != 0
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ModalitySample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks the per-sample invariants: shared extents, exact one-hot
    /// labels, and label/mask agreement.
    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        for s in &self.samples {
            if s.images.len() != self.modalities {
                return Err(Error::invalid(format!("sample {} has {} modalities", s.id, s.images.len())));
            }
            if s.images.iter().any(|im| im.shape() != [self.height, self.width]) {
                return Err(Error::invalid(format!("sample {} images are not co-registered", s.id)));
            }
            if s.mask.len() != hw || s.mask.iter().any(|&m| m > 1) {
                return Err(Error::invalid(format!("sample {} mask is malformed", s.id)));
            }
            let ones = s.label.iter().filter(|&&v| v == 1.0).count();
            let zeros = s.label.iter().filter(|&&v| v == 0.0).count();
            if s.label.len() != self.classes || ones != 1 || zeros != self.classes - 1 {
                return Err(Error::invalid(format!("sample {} label is not one-hot", s.id)));
            }
            if s.is_positive() != (s.foreground_pixels() > 0) {
                return Err(Error::invalid(format!(
                    "sample {} label disagrees with its mask",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a digest of the serialized content, for logging.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in encode(self) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Tissue {
    Background,
    Organ,
    Lesion,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    ci: f64,
    cj: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, i: f64, j: f64) -> bool {
        let (di, dj) = (i - self.ci, j - self.cj);
        let (s, c) = self.angle.sin_cos();
        let u = c * di + s * dj;
        let v = -s * di + c * dj;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn raster(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|p| self.contains((p / w) as f64, (p % w) as f64))
            .collect()
    }
}

struct Scene {
    tissue: Vec<Tissue>,
    texture: Vec<f64>,
}

fn sample_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, lesion: bool, texture_amp: f64) -> Scene {
    let (hf, wf) = (h as f64, w as f64);
    let organ = Ellipse {
        ci: (hf - 1.0) / 2.0 + rng.random_range(-0.06..0.06) * hf,
        cj: (wf - 1.0) / 2.0 + rng.random_range(-0.06..0.06) * wf,
        a: rng.random_range(0.28..0.40) * hf,
        b: rng.random_range(0.28..0.40) * wf,
        angle: rng.random_range(0.0..PI),
    };
    let organ_px = organ.raster(h, w);
    let organ_count = organ_px.iter().filter(|&&v| v).count();

    let mut tissue: Vec<Tissue> = organ_px
        .iter()
        .map(|&o| if o { Tissue::Organ } else { Tissue::Background })
        .collect();

    if lesion {
        let lesion_px = loop {
            let frac = rng.random_range(LESION_MIN_FRACTION..LESION_MAX_FRACTION);
            let aspect = rng.random_range(0.6..1.0);
            let area = frac * PI * organ.a * organ.b;
            let la = (area / (PI * aspect)).sqrt();
            let cand = Ellipse {
                ci: organ.ci + rng.random_range(-0.6..0.6) * organ.a,
                cj: organ.cj + rng.random_range(-0.6..0.6) * organ.b,
                a: la,
                b: la * aspect,
                angle: rng.random_range(0.0..PI),
            };
            let px = cand.raster(h, w);
            let count = px.iter().filter(|&&v| v).count();
            let inside = px.iter().zip(&organ_px).all(|(&l, &o)| !l || o);
            let ratio = count as f64 / organ_count as f64;
            if count > 0 && inside && (LESION_MIN_FRACTION..=LESION_MAX_FRACTION).contains(&ratio) {
                break px;
            }
        };
        for (t, &l) in tissue.iter_mut().zip(&lesion_px) {
            if l {
                *t = Tissue::Lesion;
            }
        }
    }

    // smooth texture: a few random low-frequency cosine waves
    let mut texture = vec![0.0; h * w];
    if texture_amp > 0.0 {
        for _ in 0..3 {
            let fi = rng.random_range(0.5..2.0) * 2.0 * PI / hf;
            let fj = rng.random_range(0.5..2.0) * 2.0 * PI / wf;
            let phase = rng.random_range(0.0..2.0 * PI);
            for (p, t) in texture.iter_mut().enumerate() {
                let (i, j) = ((p / w) as f64, (p % w) as f64);
                *t += texture_amp / 3.0 * (fi * i + fj * j + phase).cos();
            }
        }
    }
    Scene { tissue, texture }
}

fn render_sample(rng: &mut ChaCha8Rng, spec: &DatasetSpec, id: u64) -> ModalitySample {
    let (h, w) = (spec.height, spec.width);
    let positive = rng.random::<f64>() < spec.lesion_prevalence;
    let scene = sample_scene(rng, h, w, positive, spec.texture_amplitude);
    let images = spec
        .contrast
        .iter()
        .zip(&spec.noise_sigma)
        .map(|(profile, &sigma)| {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            let data = scene
                .tissue
                .iter()
                .zip(&scene.texture)
                .map(|(&t, &tex)| {
                    let v = profile.render(t, tex) + noise.sample(rng);
                    v.clamp(0.0, 1.0) as f32
                })
                .collect();
            DenseArray::new(vec![h, w], data).expect("image extents")
        })
        .collect();
    let mask: Vec<u8> = scene.tissue.iter().map(|&t| (t == Tissue::Lesion) as u8).collect();
    let mut label = vec![0.0; NUM_CLASSES];
    label[positive as usize] = 1.0;
    ModalitySample { id, images, label, mask }
}

/// Generates disjoint train/val/test splits from `spec`. Sample ids are
/// consecutive across splits.
pub fn generate(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 0u64;
    let mut split = |n: usize| {
        let samples = (0..n)
            .map(|_| {
                next_id += 1;
                render_sample(&mut rng, spec, next_id - 1)
            })
            .collect();
        Dataset {
            modalities: spec.modalities,
            classes: NUM_CLASSES,
            height: spec.height,
            width: spec.width,
            samples,
        }
    };
    let train = split(spec.n_train);
    let val = split(spec.n_val);
    let test = split(spec.n_test);
    Ok(Splits { train, val, test })
}

fn encode(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    write_into(&mut w, ds, DATASET_MAGIC);
    w.into_bytes()
}

pub(crate) fn write_into(w: &mut Writer, ds: &Dataset, magic: &[u8; 8]) {
    w.bytes(magic);
    w.u32(DATASET_VERSION);
    w.u32(ds.modalities as u32);
    w.u32(ds.classes as u32);
    w.u32(ds.height as u32);
    w.u32(ds.width as u32);
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        w.u64(s.id);
        w.f32s(&s.label);
        w.bytes(&s.mask);
        for im in &s.images {
            w.f32s(im.data());
        }
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new();
    write_into(&mut w, ds, DATASET_MAGIC);
    w.finish(path.as_ref())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = Reader::open(path.as_ref(), "dataset")?;
    decode(&mut r, DATASET_MAGIC)
}

pub(crate) fn decode(r: &mut Reader, magic: &[u8; 8]) -> Result<Dataset> {
    r.magic(magic)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let k = r.u32()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let count = r.u64()?;
    if k == 0 || c < 2 || h == 0 || w == 0 {
        return Err(r.fail(format!("invalid header extents K={k} C={c} H={h} W={w}")));
    }
    let hw = h as u128 * w as u128;
    let per_sample = 8 + 4 * c as u128 + hw + 4 * k as u128 * hw;
    r.need(per_sample * count as u128)?;
    let (hw, count) = (hw as usize, count as usize);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let label = r.f32s(c)?;
        let mask = r.take(hw)?.to_vec();
        let images = (0..k)
            .map(|_| DenseArray::new(vec![h, w], r.f32s(hw)?))
            .collect::<Result<Vec<_>>>()?;
        samples.push(ModalitySample { id, images, label, mask });
    }
    r.finish()?;
    Ok(Dataset {
        modalities: k,
        classes: c,
        height: h,
        width: w,
        samples,
    })
}
