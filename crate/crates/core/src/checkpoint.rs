//! Binary checkpoints: model configuration, parameters, optimizer moments,
//! training cursor and loss traces.
//!
//! Layout (little-endian): magic, `u32` version, `u32`-prefixed JSON model
//! configuration, cursor (`u32` phase index, `u64` iteration, `u8` optimizer
//! present, `u64` Adam step, three `f64` Adam settings), `u32` entry count,
//! then per entry a `u32`-prefixed name, `u32` rank and `u64` dims, and
//! finally every entry's `f32` payload in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EdgeStereo, ModelConfig};
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig, Moments, TrainState};

pub const MAGIC: &[u8; 8] = b"EDGSTCK\0";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";
const TRACE: &str = "trace/";

/// A decoded checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub phase_index: usize,
    pub iteration: usize,
    pub adam: Option<(u64, AdamConfig)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn capture(model: &EdgeStereo<f32>, state: &TrainState) -> Self {
        let store = &model.store;
        let mut tensors: Vec<(String, Tensor<f32>)> = store
            .params()
            .iter()
            .map(|p| (format!("{PARAM}{}", p.name), p.value.clone()))
            .collect();
        if let Some(opt) = &state.optimizer {
            for (id, mom) in &opt.moments {
                let name = &store.get(*id).name;
                tensors.push((format!("{MOMENT_M}{name}"), mom.m.clone()));
                tensors.push((format!("{MOMENT_V}{name}"), mom.v.clone()));
            }
        }
        for (k, trace) in state.traces.iter().enumerate() {
            tensors.push((format!("{TRACE}{k}"), Tensor::new(&[trace.len()], trace.clone()).expect("1-d")));
        }
        Checkpoint {
            config: model.config.clone(),
            phase_index: state.phase_index,
            iteration: state.iteration,
            adam: state.optimizer.as_ref().map(|o| (o.step, o.config)),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.phase_index as u32).to_le_bytes());
        out.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        let (present, step, cfg) = match self.adam {
            Some((s, c)) => (1u8, s, c),
            None => (0u8, 0, AdamConfig::default()),
        };
        out.push(present);
        out.extend_from_slice(&step.to_le_bytes());
        for v in [cfg.beta1, cfg.beta2, cfg.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        take(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let version = u32_of(&mut r)?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let len = u32_of(&mut r)? as usize;
        let config: ModelConfig =
            serde_json::from_slice(slice(&mut r, len)?).map_err(|e| format_err(format!("model configuration: {e}")))?;
        let phase_index = u32_of(&mut r)? as usize;
        let iteration = u64_of(&mut r)? as usize;
        let present = slice(&mut r, 1)?[0];
        let step = u64_of(&mut r)?;
        let cfg = AdamConfig {
            beta1: f64_of(&mut r)?,
            beta2: f64_of(&mut r)?,
            eps: f64_of(&mut r)?,
        };
        let count = u32_of(&mut r)? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = u32_of(&mut r)? as usize;
            let name = String::from_utf8(slice(&mut r, n)?.to_vec()).map_err(|_| format_err("entry name is not UTF-8"))?;
            let rank = u32_of(&mut r)? as usize;
            if rank > 8 {
                return Err(format_err(format!("entry `{name}` has rank {rank}")));
            }
            let dims = (0..rank).map(|_| u64_of(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            headers.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(headers.len());
        for (name, dims) in headers {
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| format_err(format!("payload for `{name}` is truncated")))?;
            let data = slice(&mut r, n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if !r.is_empty() {
            return Err(format_err(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            config,
            phase_index,
            iteration,
            adam: (present == 1).then_some((step, cfg)),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Writes the stored parameters into `model` and rebuilds the training
    /// state. The parameter manifest must match the model exactly.
    pub fn restore_into(&self, model: &mut EdgeStereo<f32>) -> Result<TrainState> {
        let by_name: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<ParamId> = model.store.ids().collect();
        let stored = self.tensors.iter().filter(|(n, _)| n.starts_with(PARAM)).count();
        if stored != ids.len() {
            return Err(Error::Manifest(format!(
                "checkpoint holds {stored} parameters, model has {}",
                ids.len()
            )));
        }
        let lookup = |prefix: &str, id: ParamId| -> Result<&Tensor<f32>> {
            let p = model.store.get(id);
            let t = by_name
                .get(format!("{prefix}{}", p.name).as_str())
                .ok_or_else(|| Error::Manifest(format!("missing entry `{prefix}{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Manifest(format!(
                    "`{prefix}{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            Ok(t)
        };
        let values = ids.iter().map(|&id| lookup(PARAM, id).cloned()).collect::<Result<Vec<_>>>()?;
        let optimizer = match self.adam {
            None => None,
            Some((step, config)) => {
                let mut moments = BTreeMap::new();
                for &id in &ids {
                    let name = &model.store.get(id).name;
                    if by_name.contains_key(format!("{MOMENT_M}{name}").as_str()) {
                        moments.insert(
                            id,
                            Moments {
                                m: lookup(MOMENT_M, id)?.clone(),
                                v: lookup(MOMENT_V, id)?.clone(),
                            },
                        );
                    }
                }
                Some(Adam { config, step, moments })
            }
        };
        let mut traces = Vec::new();
        while let Some(t) = by_name.get(format!("{TRACE}{}", traces.len()).as_str()) {
            traces.push(t.data().to_vec());
        }
        for (id, v) in ids.into_iter().zip(values) {
            model.store.set_value(id, v)?;
        }
        Ok(TrainState {
            phase_index: self.phase_index,
            iteration: self.iteration,
            optimizer,
            traces,
        })
    }

    /// Builds the model described by the stored configuration and restores
    /// it.
    pub fn into_model(&self) -> Result<(EdgeStereo<f32>, TrainState)> {
        let mut model = EdgeStereo::new(self.config.clone())?;
        let state = self.restore_into(&mut model)?;
        Ok((model, state))
    }
}

pub fn save_checkpoint(path: &Path, model: &EdgeStereo<f32>, state: &TrainState) -> Result<()> {
    Checkpoint::capture(model, state).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(EdgeStereo<f32>, TrainState)> {
    Checkpoint::load(path)?.into_model()
}

fn slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(format_err("unexpected end of file"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn take(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    out.copy_from_slice(slice(r, out.len())?);
    Ok(())
}

fn u32_of(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0; 4];
    take(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_of(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0; 8];
    take(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn f64_of(r: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_bits(u64_of(r)?))
}
