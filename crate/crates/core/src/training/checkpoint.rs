//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `GLYPHCKPT`, u32 version, u32 length + config JSON, parameter records
//! (name, shape, f32 data), batch-norm buffers, Adam groups, RNG state,
//! u64 iteration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{AdamConfig, AdamSlot, AdamState, Parameterized, Tensor};
use crate::networks::{build_default_nets, collect_buffers, Module};

use super::{OptimizerGroups, TrainConfig, TrainError, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"GLYPHCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f32]) {
        self.u32(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, String> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], String> {
        let n = self.u32()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| e.to_string())
    }
    fn floats(&mut self) -> Result<Vec<f32>, String> {
        let n = self.u32()?;
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn all_params(state: &TrainState) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    let mut push = |n: &str, t: &Tensor<f32>| out.push((n.to_string(), t.clone()));
    state.gtg.visit_params(&mut push);
    state.ttg.visit_params(&mut push);
    out
}

/// Serializes the full training state.
pub fn write_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.bytes(serde_json::to_string(&state.config).expect("config serializes").as_bytes());

    let params = all_params(state);
    w.u32(params.len());
    for (name, t) in &params {
        w.bytes(name.as_bytes());
        w.u32(t.shape().len());
        for d in t.shape() {
            w.u32(*d);
        }
        w.floats(t.data());
    }

    let mut buffers = collect_buffers(&state.gtg);
    buffers.extend(collect_buffers(&state.ttg));
    w.u32(buffers.len());
    for (name, v) in &buffers {
        w.bytes(name.as_bytes());
        w.floats(v);
    }

    let groups = state.optim.named();
    w.u32(groups.len());
    for (name, adam) in groups {
        w.bytes(name.as_bytes());
        w.u64(adam.step);
        w.f64(adam.config.beta1);
        w.f64(adam.config.beta2);
        w.f64(adam.config.eps);
        w.u32(adam.slots.len());
        for (pname, slot) in &adam.slots {
            w.bytes(pname.as_bytes());
            w.floats(&slot.m);
            w.floats(&slot.v);
        }
    }

    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.u64(state.iteration);
    w.0
}

/// Rebuilds a state from [`write_checkpoint`] bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainState, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let config: TrainConfig = serde_json::from_slice(r.bytes()?).map_err(|e| format!("config: {e}"))?;
    config.validate().map_err(|e| e.to_string())?;
    let (gtg, ttg) = build_default_nets::<f32>(&config.net, config.seed).map_err(|e| e.to_string())?;
    let mut state = TrainState {
        config,
        gtg,
        ttg,
        optim: OptimizerGroups::new(),
        iteration: 0,
        rng: ChaCha8Rng::seed_from_u64(0),
    };

    let mut params = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let data = r.floats()?;
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        params.insert(name, t);
    }
    let mut problem = None;
    let mut fill = |name: &str, t: &mut Tensor<f32>| match params.remove(name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        Some(v) => {
            problem.get_or_insert(format!("{name}: stored shape {:?}, expected {:?}", v.shape(), t.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing parameter {name}"));
        }
    };
    state.gtg.visit_params_mut(&mut fill);
    state.ttg.visit_params_mut(&mut fill);
    if let Some(p) = problem {
        return Err(p);
    }
    if let Some(extra) = params.keys().next() {
        return Err(format!("unknown parameter {extra}"));
    }

    let mut buffers = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        buffers.insert(name, r.floats()?);
    }
    let mut norms = state.gtg.norms_mut();
    norms.extend(state.ttg.norms_mut());
    for bn in norms {
        for (suffix, dst) in [(".running_mean", &mut bn.running_mean), (".running_var", &mut bn.running_var)] {
            let key = format!("{}{suffix}", bn.name);
            match buffers.remove(&key) {
                Some(v) if v.len() == dst.len() => *dst = v,
                _ => return Err(format!("missing or mis-sized buffer {key}")),
            }
        }
    }

    let n_groups = r.u32()?;
    let mut groups: BTreeMap<String, AdamState<f32>> = BTreeMap::new();
    for _ in 0..n_groups {
        let name = r.string()?;
        let step = r.u64()?;
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut slots = BTreeMap::new();
        for _ in 0..r.u32()? {
            let pname = r.string()?;
            let m = r.floats()?;
            let v = r.floats()?;
            slots.insert(pname, AdamSlot { m, v });
        }
        groups.insert(name, AdamState { config, step, slots });
    }
    for (name, dst) in state.optim.named_mut() {
        *dst = groups.remove(name).ok_or_else(|| format!("missing optimizer group {name}"))?;
    }

    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.iteration = r.u64()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&write_checkpoint(state))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes).map_err(|reason| TrainError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
