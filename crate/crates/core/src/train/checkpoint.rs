use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore, PredictorMode};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HCKP";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const MAX_RANK: usize = 8;

/// Trained parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: TrainConfig,
    pub epoch: usize,
    pub optim: Option<OptimState<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    mode: PredictorMode,
    adam: Option<AdamMeta>,
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn mode(&self) -> PredictorMode {
        self.model.mode
    }

    /// Serializes to the HCKP container: arrays in name order, then the
    /// configuration as length-prefixed JSON.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut arrays: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
        for (k, v) in self.model.params.iter() {
            arrays.insert(k.clone(), v);
        }
        if let Some(o) = &self.optim {
            for (k, v) in o.m.iter() {
                arrays.insert(format!("{ADAM_M}{k}"), v);
            }
            for (k, v) in o.v.iter() {
                arrays.insert(format!("{ADAM_V}{k}"), v);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        push_u32(&mut out, arrays.len(), "array count")?;
        for (name, t) in &arrays {
            push_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.rank(), "rank")?;
            for &d in t.dims() {
                push_u32(&mut out, d, "extent")?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Meta {
            model: self.model.config.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            mode: self.model.mode,
            adam: self.optim.as_ref().map(|o| AdamMeta {
                t: o.t,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
        };
        let json = serde_json::to_vec(&meta)?;
        push_u32(&mut out, json.len(), "config length")?;
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, expected \"HCKP\"".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("array count")? as usize;
        let mut arrays = BTreeMap::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "array name")?)
                .map_err(|_| Error::Format(format!("array {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("array {name}: rank {rank} exceeds {MAX_RANK}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format(format!("array {name}: dims {dims:?} overflow")))?;
            let data = r
                .take(numel * 4, &format!("payload of {name}"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&dims, data).map_err(|e| Error::Format(format!("array {name}: {e}")))?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate array name {name}")));
            }
        }
        let json_len = r.u32("config length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(json_len, "config block")?)
            .map_err(|e| Error::Format(format!("config block: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the config block",
                bytes.len() - r.pos
            )));
        }

        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for (name, t) in arrays {
            if let Some(k) = name.strip_prefix(ADAM_M) {
                m.insert(k, t);
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                v.insert(k, t);
            } else {
                params.insert(name, t);
            }
        }
        let model = Model::from_params(meta.model, meta.mode, params)?;
        let optim = match meta.adam {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Format("optimizer arrays present without optimizer state".into())),
            Some(a) => {
                let shapes = |s: &ParamStore<f32>| {
                    s.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect::<Vec<_>>()
                };
                let expect = shapes(&model.params);
                if shapes(&m) != expect || shapes(&v) != expect {
                    return Err(Error::Format(
                        "optimizer moments do not match the parameter arrays".into(),
                    ));
                }
                Some(OptimState {
                    m,
                    v,
                    t: a.t,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                })
            }
        };
        Ok(Checkpoint {
            model,
            train: meta.train,
            epoch: meta.epoch,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks the stored predictor mode.
    pub fn load_for_mode(path: &Path, mode: PredictorMode) -> Result<Self> {
        let c = Self::load(path)?;
        if c.mode() != mode {
            return Err(Error::Config(format!(
                "{} holds a {} model, {} was requested",
                path.display(),
                c.mode().as_str(),
                mode.as_str()
            )));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated at byte {}: {what} needs {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
