//! Single-file checkpoints: a plain-text header followed by a little-endian
//! tensor blob.
//!
//! ```text
//! vprior-checkpoint 1
//! phase phase1
//! epoch 3
//! config_hash <sha256>
//! metrics_digest <sha256>
//! meta <key> <value>
//! config <key> = <value>
//! tensor <name> <f32|f64> <d0>x<d1>... <byte offset> <byte length>
//! data
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::config::ConfigMap;
use crate::error::{Error, Result};
use crate::nn::{Layout, ModelState};

const MAGIC: &str = "vprior-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Phase1,
    Phase2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase1" => Ok(Phase::Phase1),
            "phase2" => Ok(Phase::Phase2),
            _ => Err(Error::Checkpoint(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => 4 * v.len(),
            TensorData::F64(v) => 8 * v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: ConfigMap,
    pub metrics_digest: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape {s:?}"))))
        .collect()
}

impl Checkpoint {
    pub fn new(phase: Phase, epoch: usize, config: ConfigMap) -> Self {
        Self {
            phase,
            epoch,
            config,
            metrics_digest: String::new(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data: TensorData::F32(data),
        });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.iter().any(|t| t.name.starts_with(&prefix))
    }

    pub fn f32(&self, name: &str) -> Result<&[f32]> {
        match self.tensor(name).map(|t| &t.data) {
            Some(TensorData::F32(v)) => Ok(v),
            Some(TensorData::F64(_)) => Err(Error::Checkpoint(format!("{name} is not f32"))),
            None => Err(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&[f64]> {
        match self.tensor(name).map(|t| &t.data) {
            Some(TensorData::F64(v)) => Ok(v),
            Some(TensorData::F32(_)) => Err(Error::Checkpoint(format!("{name} is not f64"))),
            None => Err(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    }

    pub fn meta_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata {key} = {raw:?}")))
    }

    /// Stores every parameter as `<group>/<name>` and every buffer as
    /// `<group>_buffers/<name>`.
    pub fn push_state(&mut self, group: &str, layout: &Layout, state: &ModelState) {
        for (specs, values, suffix) in [(&layout.params, &state.params, ""), (&layout.buffers, &state.buffers, "_buffers")] {
            for spec in specs {
                self.push_f32(
                    format!("{group}{suffix}/{}", spec.name),
                    spec.shape.clone(),
                    values[spec.range()].to_vec(),
                );
            }
        }
    }

    /// Rebuilds a state for `layout` from tensors stored by [`push_state`](Self::push_state).
    /// Every tensor of the layout must be present with a matching shape.
    pub fn load_state(&self, group: &str, layout: &Layout) -> Result<ModelState> {
        let mut state = ModelState {
            params: vec![0.0; layout.num_params()],
            buffers: vec![0.0; layout.num_buffers()],
        };
        for (specs, values, suffix) in [
            (&layout.params, &mut state.params, ""),
            (&layout.buffers, &mut state.buffers, "_buffers"),
        ] {
            for spec in specs {
                let name = format!("{group}{suffix}/{}", spec.name);
                let t = self
                    .tensor(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape != spec.shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape, spec.shape
                    )));
                }
                values[spec.range()].copy_from_slice(self.f32(&name)?);
            }
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC}");
        let _ = writeln!(header, "phase {}", self.phase);
        let _ = writeln!(header, "epoch {}", self.epoch);
        let _ = writeln!(header, "config_hash {}", self.config.hash());
        let _ = writeln!(header, "metrics_digest {}", self.metrics_digest);
        for (k, v) in &self.meta {
            let _ = writeln!(header, "meta {k} {v}");
        }
        for (k, v) in self.config.iter() {
            let _ = writeln!(header, "config {k} = {v}");
        }
        let mut offset = 0;
        for t in &self.tensors {
            let len = t.data.byte_len();
            let _ = writeln!(header, "tensor {} {} {} {offset} {len}", t.name, t.data.dtype(), shape_text(&t.shape));
            offset += len;
        }
        header.push_str("data\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let end = bytes
            .windows(6)
            .position(|w| w == b"\ndata\n")
            .ok_or_else(|| bad("missing data marker".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let blob = &bytes[end + 6..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut ckpt = Checkpoint::new(Phase::Phase1, 0, ConfigMap::new());
        let mut config_hash = None;
        let mut consumed = 0;
        for line in lines {
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "phase" => ckpt.phase = rest.parse()?,
                "epoch" => ckpt.epoch = rest.parse().map_err(|_| bad(format!("bad epoch {rest:?}")))?,
                "config_hash" => config_hash = Some(rest.to_string()),
                "metrics_digest" => ckpt.metrics_digest = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "config" => ckpt.config.set_assignment(rest)?,
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, shape, offset, len] = f[..] else {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    };
                    let shape = parse_shape(shape)?;
                    let (offset, len): (usize, usize) = match (offset.parse(), len.parse()) {
                        (Ok(o), Ok(l)) => (o, l),
                        _ => return Err(bad(format!("bad tensor line {line:?}"))),
                    };
                    if offset != consumed || offset + len > blob.len() {
                        return Err(bad(format!("tensor {name} lies outside the blob")));
                    }
                    let raw = &blob[offset..offset + len];
                    let data = match dtype {
                        "f32" if len % 4 == 0 => TensorData::F32(
                            raw.chunks_exact(4)
                                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                                .collect(),
                        ),
                        "f64" if len % 8 == 0 => TensorData::F64(
                            raw.chunks_exact(8)
                                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                                .collect(),
                        ),
                        _ => return Err(bad(format!("bad dtype or length for {name}"))),
                    };
                    if data.len() != shape.iter().product::<usize>() {
                        return Err(bad(format!("{name}: {} values for shape {shape:?}", data.len())));
                    }
                    consumed += len;
                    ckpt.tensors.push(NamedTensor {
                        name: name.to_string(),
                        shape,
                        data,
                    });
                }
                _ => return Err(bad(format!("unknown header line {line:?}"))),
            }
        }
        if consumed != blob.len() {
            return Err(bad(format!("{} trailing bytes", blob.len() - consumed)));
        }
        if config_hash.as_deref() != Some(ckpt.config.hash().as_str()) {
            return Err(bad("config hash mismatch".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
