//! Checkpoints: a binary parameter file plus a JSON sidecar.
//!
//! Binary layout (little endian): magic `INCDETv1`, array count `u32`, then
//! per array: name length `u32`, UTF-8 name, rank `u32`, dims `u64` each, and
//! the values as `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"INCDETv1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchMeta {
    pub step: usize,
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_registry: Vec<u32>,
    pub config: DetectorConfig,
    pub step_index: usize,
    pub seed: u64,
    pub branches: Vec<BranchMeta>,
    pub param_hash: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl<T: Scalar> Detector<T> {
    /// Writes `path` and its `.json` sidecar.
    pub fn save_checkpoint(&self, path: &Path, step_index: usize) -> Result<CheckpointMeta> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let params = self.named_params();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, _, t) in &params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.f64().to_le_bytes())?;
            }
        }
        w.flush()?;
        let meta = CheckpointMeta {
            class_registry: self.registry.clone(),
            config: self.config.clone(),
            step_index,
            seed: self.seed,
            branches: self
                .branches
                .iter()
                .map(|b| BranchMeta {
                    step: b.step,
                    classes: b.classes.clone(),
                })
                .collect(),
            param_hash: self.param_hash(),
        };
        std::fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        if meta.branches.is_empty() {
            return Err(Error::Integrity("checkpoint lists no branches".into()));
        }
        let mut model = Detector::with_classes(meta.config.clone(), &meta.class_registry, meta.seed)?;
        let template = model.branches[0].clone();
        model.branches = meta
            .branches
            .iter()
            .map(|b| {
                let mut br = template.clone();
                br.step = b.step;
                br.classes = b.classes.clone();
                br
            })
            .collect();

        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Integrity(format!("{} is not a checkpoint", path.display())));
        }
        let count = read_u32(&mut r)? as usize;
        let mut arrays: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Integrity(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(T::of(f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes())));
            }
            arrays.insert(name, Tensor::from_vec(&shape, data)?);
        }

        let names: Vec<String> = model.named_params().into_iter().map(|(n, _, _)| n).collect();
        if names.len() != arrays.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} arrays, model expects {}",
                arrays.len(),
                names.len()
            )));
        }
        for (name, (_, slot)) in names.iter().zip(model.params_mut()) {
            let t = arrays
                .remove(name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint is missing {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Integrity(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok((model, meta))
    }
}
