//! Checkpoint container.
//!
//! Layout (little-endian): `"MGLC"`, `u32` version, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank × u32`
//! dims and the `f32` payload; a trailing CRC32 covers every preceding byte.
//! Besides the parameters a file holds `__config__` (model structure), and
//! for training runs `__train__` (iteration) and `momentum/<name>` buffers.

use std::fs;
use std::path::Path;

use crate::autograd::{numel, ParamStore, SgdState, Tensor};
use crate::error::{CheckpointError, MglError, Result};
use crate::network::{MglModel, ModelConfig, Variant};
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MGLC";
pub const VERSION: u32 = 1;
const CONFIG: &str = "__config__";
const TRAIN: &str = "__train__";
const MOMENTUM: &str = "momentum/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        let body = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| MglError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MglError::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Integers stored as 16-bit chunks so every value is exact in `f32`.
fn split_u64(v: u64) -> [f32; 4] {
    std::array::from_fn(|i| ((v >> (16 * i)) & 0xFFFF) as f32)
}

fn join_u64(c: &[f32]) -> u64 {
    c.iter().enumerate().map(|(i, &x)| (x as u64) << (16 * i)).sum()
}

fn config_tensor(c: &ModelConfig) -> Tensor<f32> {
    let variant = match c.variant {
        Variant::Baseline => 0,
        Variant::RigrOnly => 1,
        Variant::Full => 2,
    };
    let v = [
        c.widths[0],
        c.widths[1],
        c.widths[2],
        c.widths[3],
        c.channels,
        c.nodes,
        c.support,
        c.k_nn,
        c.stages,
        variant,
        c.per_stage_weights as usize,
    ];
    Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("config length")
}

fn parse_config(t: &Tensor<f32>) -> Result<ModelConfig, CheckpointError> {
    if t.shape() != [11] {
        return Err(CheckpointError::Dimension {
            name: CONFIG.into(),
            expected: vec![11],
            found: t.shape().to_vec(),
        });
    }
    let d = t.data();
    let u = |i: usize| d[i] as usize;
    let variant = match u(9) {
        0 => Variant::Baseline,
        1 => Variant::RigrOnly,
        2 => Variant::Full,
        v => return Err(CheckpointError::Malformed(format!("unknown variant code {v}"))),
    };
    Ok(ModelConfig {
        widths: [u(0), u(1), u(2), u(3)],
        channels: u(4),
        nodes: u(5),
        support: u(6),
        k_nn: u(7),
        stages: u(8),
        variant,
        per_stage_weights: u(10) != 0,
    })
}

fn model_tensors(model: &MglModel<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut v = vec![(CONFIG.to_string(), config_tensor(&model.config))];
    v.extend(model.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
    v
}

pub fn model_checkpoint(model: &MglModel<f32>) -> Checkpoint {
    Checkpoint {
        tensors: model_tensors(model),
    }
}

pub fn trainer_checkpoint(tr: &Trainer<f32>) -> Checkpoint {
    let mut tensors = model_tensors(&tr.model);
    tensors.push((
        TRAIN.to_string(),
        Tensor::new(&[4], split_u64(tr.iter as u64).to_vec()).expect("4 values"),
    ));
    for (id, v) in tr.model.params.ids().zip(&tr.state.velocity) {
        tensors.push((format!("{MOMENTUM}{}", tr.model.params.name(id)), v.clone()));
    }
    Checkpoint { tensors }
}

/// Fill a parameter store shaped like `like` from the checkpoint, prefixing
/// names with `prefix`.
fn fill(ck: &Checkpoint, like: &ParamStore<f32>, prefix: &str) -> Result<ParamStore<f32>, CheckpointError> {
    let mut out = like.clone();
    for id in like.ids() {
        let name = format!("{prefix}{}", like.name(id));
        let t = ck.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let expected = like.get(id).shape();
        if t.shape() != expected {
            return Err(CheckpointError::Dimension {
                name,
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        *out.get_mut(id) = t.clone();
    }
    Ok(out)
}

impl Checkpoint {
    pub fn config(&self) -> Result<ModelConfig, CheckpointError> {
        parse_config(self.get(CONFIG).ok_or_else(|| CheckpointError::Missing(CONFIG.into()))?)
    }

    /// Model with the structure recorded in the file.
    pub fn model(&self) -> Result<MglModel<f32>> {
        let cfg = self.config()?;
        self.model_as(&cfg)
    }

    /// Model with an expected structure; a tensor whose shape disagrees is
    /// reported by name.
    pub fn model_as(&self, cfg: &ModelConfig) -> Result<MglModel<f32>> {
        let skeleton = MglModel::<f32>::new(cfg.clone(), 0)?;
        let params = fill(self, &skeleton.params, "")?;
        skeleton.with_params(params)
    }

    pub fn trainer(&self, cfg: TrainConfig) -> Result<Trainer<f32>> {
        let model = self.model()?;
        let iter = join_u64(
            self.get(TRAIN)
                .ok_or_else(|| CheckpointError::Missing(TRAIN.into()))?
                .data(),
        ) as usize;
        let velocity = fill(self, &model.params, MOMENTUM)?;
        let state = SgdState {
            velocity: velocity.ids().map(|id| velocity.get(id).clone()).collect(),
        };
        Ok(Trainer {
            model,
            state,
            iter,
            cfg,
        })
    }
}
