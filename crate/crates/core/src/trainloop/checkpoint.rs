//! Binary checkpoints holding every network of a run together with its
//! optimizer moments, so training can resume bit-exactly.
//!
//! Layout (little-endian): magic `EQCMCKP1`, u32 version, u32 K, then per
//! network: u32 modality id, u32 tensor count, and per tensor: u32 name
//! length, UTF-8 name, u32 rank, rank x u32 extents, f32 values.
//!
//! Besides the `conv*` parameters each network carries `adam.m.<name>`,
//! `adam.v.<name>`, `adam.step`, `meta.epoch` and `meta.supervision`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::model::{Architecture, Network};
use crate::ndgrad::DenseArray;

use super::{OptimizerState, Supervision};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EQCMCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

// Counters are stored as f32, which is exact below 2^24.
const MAX_COUNTER: u64 = 1 << 24;

/// Networks, optimizer states and progress of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub supervision: Supervision,
    /// Completed epochs.
    pub epoch: u32,
    pub networks: Vec<Network<f32>>,
    pub optimizers: Vec<OptimizerState<f32>>,
}

impl TrainState {
    pub fn architecture(&self) -> &Architecture {
        &self.networks[0].arch
    }

    /// Fails naming the first tensor whose presence or shape differs from
    /// `arch`.
    pub fn check_architecture(&self, arch: &Architecture) -> Result<()> {
        let want = arch.param_shapes();
        for net in &self.networks {
            for (i, (name, shape)) in want.iter().enumerate() {
                match net.params.get(i) {
                    Some((n, p)) if n == name && p.shape() == shape.as_slice() => {}
                    Some((n, p)) if n == name => {
                        return Err(Error::invalid(format!(
                            "architecture mismatch at tensor {name} of modality {}: checkpoint has {:?}, expected {:?}",
                            net.modality,
                            p.shape(),
                            shape
                        )))
                    }
                    _ => {
                        return Err(Error::invalid(format!(
                            "architecture mismatch at tensor {name} of modality {}: missing from checkpoint",
                            net.modality
                        )))
                    }
                }
            }
            if let Some((extra, _)) = net.params.get(want.len()) {
                return Err(Error::invalid(format!(
                    "architecture mismatch at tensor {extra} of modality {}: not in the expected architecture",
                    net.modality
                )));
            }
        }
        Ok(())
    }
}

fn counter(v: u64, what: &str) -> Result<DenseArray<f32>> {
    if v >= MAX_COUNTER {
        return Err(Error::invalid(format!("{what} = {v} is too large to store")));
    }
    Ok(DenseArray::new(vec![1], vec![v as f32]).expect("one element"))
}

fn write_tensor(w: &mut Writer, name: &str, t: &DenseArray<f32>) {
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
}

fn read_tensor(r: &mut Reader) -> Result<(String, DenseArray<f32>)> {
    let len = r.u32()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
    let rank = r.u32()? as usize;
    r.need(4 * rank as u128)?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let count: u128 = shape.iter().map(|&d| d as u128).product();
    r.need(4 * count)?;
    let data = r.f32s(count as usize)?;
    let t = DenseArray::new(shape, data).map_err(|e| r.fail(e.to_string()))?;
    Ok((name, t))
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    if state.networks.len() != state.optimizers.len() {
        return Err(Error::invalid("one optimizer state per network is required"));
    }
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(state.networks.len() as u32);
    let epoch = counter(state.epoch as u64, "epoch")?;
    let mode = counter(state.supervision.code(), "supervision")?;
    for (net, opt) in state.networks.iter().zip(&state.optimizers) {
        opt.check_shapes(&net.params)?;
        let step = counter(opt.step, "optimizer step")?;
        w.u32(net.modality);
        w.u32((3 * net.params.len() + 3) as u32);
        for (name, p) in &net.params {
            write_tensor(&mut w, name, p);
        }
        for ((name, _), m) in net.params.iter().zip(&opt.m) {
            write_tensor(&mut w, &format!("adam.m.{name}"), m);
        }
        for ((name, _), v) in net.params.iter().zip(&opt.v) {
            write_tensor(&mut w, &format!("adam.v.{name}"), v);
        }
        write_tensor(&mut w, "adam.step", &step);
        write_tensor(&mut w, "meta.epoch", &epoch);
        write_tensor(&mut w, "meta.supervision", &mode);
    }
    w.finish(path.as_ref())
}

fn take_counter(r: &Reader, tensors: &mut Vec<(String, DenseArray<f32>)>, name: &str) -> Result<u64> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| r.fail(format!("missing tensor {name}")))?;
    let (_, t) = tensors.remove(pos);
    match t.data() {
        [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u64),
        _ => Err(r.fail(format!("tensor {name} is not a counter"))),
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let mut r = Reader::open(path.as_ref(), "checkpoint")?;
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let k = r.u32()? as usize;
    if k == 0 {
        return Err(r.fail("checkpoint holds no networks"));
    }
    let mut networks = Vec::with_capacity(k);
    let mut optimizers = Vec::with_capacity(k);
    let mut meta: Option<(u64, u64)> = None;
    for _ in 0..k {
        let modality = r.u32()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(read_tensor(&mut r)?);
        }
        let step = take_counter(&r, &mut tensors, "adam.step")?;
        let epoch = take_counter(&r, &mut tensors, "meta.epoch")?;
        let mode = take_counter(&r, &mut tensors, "meta.supervision")?;
        match meta {
            None => meta = Some((epoch, mode)),
            Some(m) if m != (epoch, mode) => return Err(r.fail("networks disagree on epoch or supervision")),
            Some(_) => {}
        }
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v.push((p.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        for moments in [&m, &v] {
            if moments.iter().map(|(n, _)| n).collect::<Vec<_>>() != names {
                return Err(r.fail(format!("optimizer moments of modality {modality} do not match its parameters")));
            }
        }
        let arch = Architecture::from_param_shapes(&params).map_err(|e| r.fail(e.to_string()))?;
        let opt = OptimizerState {
            step,
            m: m.into_iter().map(|(_, t)| t).collect(),
            v: v.into_iter().map(|(_, t)| t).collect(),
        };
        opt.check_shapes(&params).map_err(|e| r.fail(e.to_string()))?;
        networks.push(Network { modality, arch, params });
        optimizers.push(opt);
    }
    r.finish()?;
    let (epoch, mode) = meta.expect("k > 0");
    let state = TrainState {
        supervision: Supervision::from_code(mode).ok_or_else(|| r.fail(format!("unknown supervision code {mode}")))?,
        epoch: epoch as u32,
        networks,
        optimizers,
    };
    let arch = state.architecture().clone();
    state.check_architecture(&arch)?;
    Ok(state)
}

/// Loads a checkpoint and checks it against the architecture the caller
/// expects.
pub fn load_checkpoint_for(path: impl AsRef<Path>, arch: &Architecture) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    state.check_architecture(arch)?;
    Ok(state)
}
