//! Per-modality classifier with a single-step CAM head.
//!
//! The last convolution emits one map per class; global average pooling of
//! those maps gives the logits directly, so the class maps are the CAMs with
//! no extra weight projection. No layer downsamples, so CAMs have the input
//! resolution. Channel 0 is the background class and is dropped from the
//! CAM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{DenseArray, Graph, Real, Var};
use crate::transforms::{self, AffineTransform, ValidityMask};

/// Floor of the max-normalization denominator.
pub const CAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<ConvLayer>,
}

impl Architecture {
    /// Three 3x3 conv+relu blocks (8, 16, 16 wide) and a 1x1 conv to
    /// `classes` maps.
    pub fn standard(input_channels: usize, classes: usize) -> Self {
        let conv = |i, o, k, relu| ConvLayer {
            in_channels: i,
            out_channels: o,
            kernel: k,
            relu,
        };
        Self {
            layers: vec![
                conv(input_channels, 8, 3, true),
                conv(8, 16, 3, true),
                conv(16, 16, 3, true),
                conv(16, classes, 1, false),
            ],
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("architecture has no layers"));
        }
        if self.classes() < 2 {
            return Err(Error::invalid(format!(
                "final layer must emit at least 2 class maps, got {}",
                self.classes()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::invalid(format!("layer {i} is malformed: {l:?}")));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} channels, previous layer emits {}",
                    l.in_channels,
                    self.layers[i - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (
                        format!("conv{i}.weight"),
                        vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                    ),
                    (format!("conv{i}.bias"), vec![l.out_channels]),
                ]
            })
            .collect()
    }

    /// Rebuilds the layer list from `conv{i}.weight` shapes; every layer
    /// but the last is followed by a relu.
    pub fn from_param_shapes(params: &[(String, DenseArray<f32>)]) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let name = format!("conv{i}.weight");
            let Some((_, w)) = params.iter().find(|(n, _)| *n == name) else {
                break;
            };
            let [o, c, kh, kw] = w.dims4()?;
            if kh != kw {
                return Err(Error::invalid(format!("{name} has a non-square kernel")));
            }
            layers.push(ConvLayer {
                in_channels: c,
                out_channels: o,
                kernel: kh,
                relu: true,
            });
        }
        if let Some(last) = layers.last_mut() {
            last.relu = false;
        }
        let arch = Self { layers };
        arch.validate()?;
        Ok(arch)
    }
}

/// Parameters of one modality's network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub modality: u32,
    pub arch: Architecture,
    pub params: Vec<(String, DenseArray<T>)>,
}

impl<T: Real> Network<T> {
    /// Kaiming-normal kernels (`std = sqrt(2 / fan_in)`) and zero biases.
    /// The generator is seeded from `seed` offset by the modality index, so
    /// the networks of one run differ.
    pub fn init(seed: u64, modality: u32, arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let stream = seed ^ (modality as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let arr = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    DenseArray::from_fn(&shape, |_| T::from_f64(normal.sample(&mut rng)))
                } else {
                    DenseArray::zeros(&shape)
                };
                (name, arr)
            })
            .collect();
        Ok(Self {
            modality,
            arch: arch.clone(),
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            modality: self.modality,
            arch: self.arch.clone(),
            params: self.params.iter().map(|(n, p)| (n.clone(), p.cast())).collect(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&DenseArray<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.len()).sum()
    }

    /// Differentiable leaves for every parameter.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|(_, p)| g.param(p.clone())).collect()
    }

    /// Constant leaves, for gradient-free evaluation.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|(_, p)| g.input(p.clone())).collect()
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[N, C, H, W]` class maps of the last layer.
    pub features: Var,
    /// `[N, C]`, the spatial means of `features`.
    pub logits: Var,
    /// `[N, C]` softmax of `logits`.
    pub probs: Var,
}

pub fn forward<T: Real>(g: &mut Graph<T>, arch: &Architecture, params: &[Var], x: Var) -> Result<Forward> {
    if params.len() != 2 * arch.layers.len() {
        return Err(Error::invalid(format!(
            "expected {} parameter tensors, got {}",
            2 * arch.layers.len(),
            params.len()
        )));
    }
    let [_, c, _, _] = g.value(x).dims4()?;
    if c != arch.input_channels() {
        return Err(Error::shape("forward input", g.shape(x), &[arch.input_channels()]));
    }
    let mut h = x;
    for (i, layer) in arch.layers.iter().enumerate() {
        h = g.conv2d(h, params[2 * i], params[2 * i + 1], (layer.kernel - 1) / 2)?;
        if layer.relu {
            h = g.relu(h);
        }
    }
    let logits = g.global_average_pool(h)?;
    let probs = g.softmax(logits)?;
    Ok(Forward {
        features: h,
        logits,
        probs,
    })
}

/// Max-normalized foreground CAMs `[N, C-1, H, W]` from class maps.
pub fn cam_from_features<T: Real>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let [_, c, _, _] = g.value(features).dims4()?;
    if c < 2 {
        return Err(Error::invalid("class maps need a background and a foreground channel"));
    }
    let fg = g.slice_channels(features, 1, c - 1)?;
    let pos = g.relu(fg);
    g.max_normalize(pos, T::from_f64(CAM_EPS))
}

/// One branch of the Siamese pair.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub forward: Forward,
    pub cam: Var,
}

/// Outputs for an image batch `x` and its transformed copy `π(x)`.
#[derive(Clone, Debug)]
pub struct SiameseOutput {
    pub original: Branch,
    pub transformed: Branch,
    pub transform: AffineTransform,
    pub mask: ValidityMask,
}

/// Runs the shared-weight network on `x` and on `π(x)`.
pub fn siamese_step<T: Real>(
    g: &mut Graph<T>,
    arch: &Architecture,
    params: &[Var],
    x: Var,
    transform: &AffineTransform,
) -> Result<SiameseOutput> {
    let original = {
        let f = forward(g, arch, params, x)?;
        Branch {
            forward: f,
            cam: cam_from_features(g, f.features)?,
        }
    };
    let (xt, mask) = transforms::apply_var(g, transform, x)?;
    let transformed = {
        let f = forward(g, arch, params, xt)?;
        Branch {
            forward: f,
            cam: cam_from_features(g, f.features)?,
        }
    };
    Ok(SiameseOutput {
        original,
        transformed,
        transform: *transform,
        mask,
    })
}

/// A materialized CAM.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    /// `[C-1, H, W]`, values in `[0, 1]`.
    pub map: DenseArray<f32>,
    pub modality: u32,
    pub transformed: bool,
}
