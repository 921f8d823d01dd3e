//! Binary checkpoints holding every parameter, every Adam buffer and the
//! state needed to resume a run bit-exactly.
//!
//! Layout, little-endian: `CYGN`, u32 version, u32 metadata length, UTF-8
//! `key=value` lines, u32 tensor count, then per tensor a u16 name length,
//! the name, u8 dtype, u8 rank, u32 dims and raw row-major values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::models::NetConfig;
use crate::optim::AdamConfig;
use crate::rng::{Rng, RNG_ALGORITHM};
use crate::tensor::{DType, Element, Tensor};
use crate::training::{TrainConfig, TrainingSession};

pub const MAGIC: &[u8; 4] = b"CYGN";
pub const FORMAT_VERSION: u32 = 1;

/// Names of every tensor a checkpoint of `session` holds, in file order.
pub fn tensor_names<T: Element>(session: &TrainingSession<T>) -> Vec<String> {
    let mut names = Vec::new();
    for (net, module) in session.model.networks() {
        names.extend(module.params().into_iter().map(|(p, _)| format!("{net}/{p}")));
    }
    for (net, module) in session.model.networks() {
        let params = module.params();
        names.extend(params.iter().map(|(p, _)| format!("adam/{net}/m/{p}")));
        names.extend(params.iter().map(|(p, _)| format!("adam/{net}/v/{p}")));
        names.push(format!("adam/{net}/step"));
    }
    names
}

fn metadata<T: Element>(session: &TrainingSession<T>) -> Vec<(String, String)> {
    let c = &session.config;
    let mut lines: Vec<(String, String)> = vec![
        ("dtype".into(), T::DTYPE.name().into()),
        ("seed".into(), c.seed.to_string()),
        ("rng".into(), RNG_ALGORITHM.into()),
        ("rng_stream".into(), session.rng.stream().to_string()),
        ("rng_word_pos".into(), session.rng.word_pos().to_string()),
        ("step".into(), session.step.to_string()),
        ("epochs_done".into(), session.epochs_done.to_string()),
        ("epochs".into(), c.epochs.to_string()),
        ("batch_size".into(), c.batch_size.to_string()),
        ("checkpoint_every".into(), c.checkpoint_every.to_string()),
        ("lambda_cycle".into(), format!("{:?}", session.model.lambda_cycle)),
        ("identity_weight".into(), format!("{:?}", session.model.identity_weight)),
        ("adam_lr".into(), format!("{:?}", c.adam.lr)),
        ("adam_beta1".into(), format!("{:?}", c.adam.beta1)),
        ("adam_beta2".into(), format!("{:?}", c.adam.beta2)),
        ("adam_eps".into(), format!("{:?}", c.adam.eps)),
    ];
    lines.extend(session.model.net_config().to_lines());
    lines
}

fn push_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Element>(session: &TrainingSession<T>) -> Vec<u8> {
    let meta: String = metadata(session).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());

    let names = tensor_names(session);
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    let mut names = names.iter();
    for (_, module) in session.model.networks() {
        for (_, t) in module.params() {
            push_tensor(&mut out, names.next().unwrap(), t);
        }
    }
    for (_, state) in session.optimizers.states() {
        for t in state.m.iter().chain(&state.v) {
            push_tensor(&mut out, names.next().unwrap(), t);
        }
        push_tensor(&mut out, names.next().unwrap(), &Tensor::<T>::scalar(T::from_f64_lossy(state.step as f64)));
    }
    out
}

pub fn save_checkpoint<T: Element>(session: &TrainingSession<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(session))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// The decoded contents of a file before they are matched to networks.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub version: u32,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, DType, Tensor<f64>)>,
}

impl RawCheckpoint {
    fn meta<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` has bad value `{raw}`")))
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        NetConfig::from_lookup(|k| self.metadata.get(k).cloned())
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:?}, expected \"CYGN\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_start = r.pos;
    let meta = r.take(meta_len, "metadata")?;
    let meta = std::str::from_utf8(meta).map_err(|e| Error::Format {
        offset: meta_start + e.valid_up_to(),
        detail: "metadata is not UTF-8".into(),
    })?;
    let mut metadata = BTreeMap::new();
    for line in meta.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: meta_start,
            detail: format!("metadata line `{line}` lacks '='"),
        })?;
        metadata.insert(k.to_string(), v.to_string());
    }

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = r.pos;
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format { offset: at + 2, detail: format!("tensor {i} name is not UTF-8") })?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| {
            Error::Format { offset: r.pos - 1, detail: format!("tensor `{name}` has unknown dtype {tag}") }
        })?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = len
            .and_then(|l| l.checked_mul(dtype.size()))
            .ok_or_else(|| r.fail(format!("tensor `{name}` dimensions {dims:?} overflow")))?;
        let raw = r.take(bytes, &format!("tensor `{name}` data"))?;
        let data: Vec<f64> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        tensors.push((name, dtype, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(RawCheckpoint { version, metadata, tensors })
}

/// Rebuilds the run configuration recorded in the metadata.
pub fn train_config(raw: &RawCheckpoint) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: raw.meta("epochs")?,
        batch_size: raw.meta("batch_size")?,
        seed: raw.meta("seed")?,
        lambda_cycle: raw.meta("lambda_cycle")?,
        adam: AdamConfig {
            lr: raw.meta("adam_lr")?,
            beta1: raw.meta("adam_beta1")?,
            beta2: raw.meta("adam_beta2")?,
            eps: raw.meta("adam_eps")?,
        },
        net: raw.net_config()?,
        out_dir: None,
        checkpoint_every: raw.meta("checkpoint_every")?,
    })
}

/// Overwrites `session`'s parameters, optimizer state, step and RNG with
/// the checkpoint's. Nothing is modified unless every tensor matches.
pub fn apply<T: Element>(raw: &RawCheckpoint, session: &mut TrainingSession<T>) -> Result<()> {
    let expected = tensor_names(session);
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for (_, module) in session.model.networks() {
        shapes.extend(module.params().into_iter().map(|(_, t)| t.dims().to_vec()));
    }
    for (_, state) in session.optimizers.states() {
        shapes.extend(state.m.iter().chain(&state.v).map(|t| t.dims().to_vec()));
        shapes.push(Vec::new());
    }

    let mut problems = Vec::new();
    if raw.tensors.len() != expected.len() {
        problems.push(format!("expected {} tensors, found {}", expected.len(), raw.tensors.len()));
    }
    for ((name, want), (found_name, _, t)) in expected.iter().zip(&shapes).zip(&raw.tensors) {
        if name != found_name {
            problems.push(format!("expected tensor `{name}`, found `{found_name}`"));
        } else if want.as_slice() != t.dims() {
            problems.push(format!("`{name}`: expected {want:?}, found {:?}", t.dims()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Mismatch(problems.join("; ")));
    }

    let stream: u64 = raw.meta("rng_stream")?;
    let word_pos: u128 = raw.meta("rng_word_pos")?;
    let step: u64 = raw.meta("step")?;
    let epochs_done: usize = raw.meta("epochs_done")?;
    let identity_weight: f64 = raw.meta("identity_weight")?;
    let seed: u64 = raw.meta("seed")?;
    let lambda: f64 = raw.meta("lambda_cycle")?;

    // Values were widened from their stored precision, so casting back
    // to the same precision is exact.
    let mut it = raw.tensors.iter().map(|(_, _, t)| t.cast::<T>());
    for (_, module) in session.model.networks_mut() {
        for p in module.params_mut() {
            *p = it.next().unwrap();
        }
    }
    for (_, state) in session.optimizers.states_mut() {
        let n = state.m.len();
        for slot in state.m.iter_mut().chain(state.v.iter_mut()).take(2 * n) {
            *slot = it.next().unwrap();
        }
        state.step = it.next().unwrap().item()?.as_f64() as u64;
    }
    session.model.lambda_cycle = lambda;
    session.model.identity_weight = identity_weight;
    session.rng = Rng::restore(seed, stream, word_pos);
    session.step = step;
    session.epochs_done = epochs_done;
    Ok(())
}

/// Builds a session from a file alone, using the recorded configuration.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<TrainingSession<T>> {
    let raw = decode_raw(bytes)?;
    check_rng(&raw)?;
    let mut session = TrainingSession::new(train_config(&raw)?)?;
    apply(&raw, &mut session)?;
    Ok(session)
}

fn check_rng(raw: &RawCheckpoint) -> Result<()> {
    let id: String = raw.meta("rng")?;
    if id != RNG_ALGORITHM {
        return Err(Error::Config(format!("checkpoint uses rng `{id}`, this build uses `{RNG_ALGORITHM}`")));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(PathBuf::from(path), e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<TrainingSession<T>> {
    decode(&read(path)?)
}

/// Loads into an existing session whose networks fix the expected shapes.
pub fn load_into<T: Element>(path: &Path, session: &mut TrainingSession<T>) -> Result<()> {
    let raw = decode_raw(&read(path)?)?;
    check_rng(&raw)?;
    apply(&raw, session)
}
