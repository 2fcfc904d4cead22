//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u64` little-endian manifest length, JSON manifest,
//! then every array's raw little-endian elements in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Adam;

pub const MAGIC: &[u8; 8] = b"SRDCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Stage that wrote the file, e.g. `sr`, `detector`, `finetune`.
    pub kind: String,
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub adam_step: u64,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    data: Vec<u8>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Snapshot of all parameters and, if given, the optimizer moments.
    pub fn capture<T: Scalar>(
        kind: &str,
        config: &ExperimentConfig,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
        store: &ParamStore<T>,
        adam: Option<&Adam<T>>,
    ) -> Self {
        let mut ck = Self {
            manifest: Manifest {
                version: FORMAT_VERSION,
                kind: kind.to_string(),
                config: config.clone(),
                epoch,
                metrics,
                adam_step: adam.map_or(0, |a| a.step),
                arrays: Vec::new(),
            },
            data: Vec::new(),
        };
        for (_, p) in store.iter() {
            ck.push(&format!("{PARAM}{}", p.name), &p.value);
        }
        if let Some(adam) = adam {
            for (id, p) in store.iter() {
                if let Some((m, v)) = adam.moments(id.index()) {
                    ck.push(&format!("{ADAM_M}{}", p.name), m);
                    ck.push(&format!("{ADAM_V}{}", p.name), v);
                }
            }
        }
        ck
    }

    fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.manifest.arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: self.data.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut self.data);
        }
    }

    /// Array `name` converted to `T`.
    pub fn array<T: Scalar>(&self, name: &str) -> Result<Option<Tensor<T>>> {
        let Some(e) = self.manifest.arrays.iter().find(|e| e.name == name) else { return Ok(None) };
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let values: Vec<T> = match e.dtype.as_str() {
            "f32" => self.data[start..start + 4 * n].chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
            "f64" => self.data[start..start + 8 * n].chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
            other => return Err(ckpt_err(format!("array {name} has unsupported dtype {other}"))),
        };
        Tensor::from_vec(&e.shape, values).map(Some)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.manifest.arrays.iter().filter_map(|e| e.name.strip_prefix(PARAM))
    }

    /// Copies stored parameters whose names start with `prefix` into `store`.
    ///
    /// Every matching stored array must exist in the store with the same shape.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        let names: Vec<String> = self.param_names().filter(|p| p.starts_with(prefix)).map(str::to_string).collect();
        for name in names {
            if store.id(&name).is_none() {
                return Err(ckpt_err(format!("checkpoint parameter {name} does not exist in this model")));
            }
            let t = self.array::<T>(&format!("{PARAM}{name}"))?.expect("listed");
            store.set(&name, t).map_err(|e| ckpt_err(e.to_string()))?;
            n += 1;
        }
        Ok(n)
    }

    /// Optimizer state aligned with `store`'s parameter order.
    pub fn adam<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Adam<T>> {
        let mut adam = Adam::default();
        adam.step = self.manifest.adam_step;
        for (id, p) in store.iter() {
            let m = self.array::<T>(&format!("{ADAM_M}{}", p.name))?;
            let v = self.array::<T>(&format!("{ADAM_V}{}", p.name))?;
            if let (Some(m), Some(v)) = (m, v) {
                adam.set_moments(id.index(), m, v)?;
            }
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ckpt_err("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| ckpt_err("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(ckpt_err(format!("format version {} is not supported", manifest.version)));
        }
        let data = bytes[16 + len..].to_vec();
        let mut expected = 0u64;
        for e in &manifest.arrays {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(ckpt_err(format!("array {} has unsupported dtype {other}", e.name))),
            };
            if e.offset != expected {
                return Err(ckpt_err(format!("array {} starts at {} instead of {expected}", e.name, e.offset)));
            }
            expected += (e.shape.iter().product::<usize>() * width) as u64;
        }
        if expected != data.len() as u64 {
            return Err(ckpt_err(format!("data section holds {} bytes, manifest declares {expected}", data.len())));
        }
        Ok(Self { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 1e-30, 7.0]).unwrap()).unwrap();
        s.add("b", Tensor::full(&[1], 0.125)).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut s = store();
        s.accumulate(&[Some(Tensor::full(&[2, 3], 0.5)), None]).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut s, 0.01).unwrap();
        let metrics = BTreeMap::from([("loss".to_string(), 0.1 + 0.2)]);
        let ck = Checkpoint::capture("sr", &ExperimentConfig::desk(), 3, metrics, &s, Some(&adam));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());

        let mut fresh = store();
        assert_eq!(back.load_params(&mut fresh, "").unwrap(), 2);
        for ((_, a), (_, b)) in fresh.iter().zip(s.iter()) {
            assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        let a2 = back.adam(&fresh).unwrap();
        assert_eq!(a2.step, 1);
        assert_eq!(a2.moments(0).unwrap().0, adam.moments(0).unwrap().0);
        assert!(a2.moments(1).is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::capture("sr", &ExperimentConfig::default(), 0, BTreeMap::new(), &store(), None);
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("data section"));
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let ck = Checkpoint::capture("sr", &ExperimentConfig::default(), 0, BTreeMap::new(), &store(), None);
        let mut other = ParamStore::<f32>::new();
        other.add("b", Tensor::full(&[1], 0.0)).unwrap();
        assert!(ck.load_params(&mut other, "a.").is_err());
        assert_eq!(ck.load_params(&mut other, "b").unwrap(), 1);
        assert_eq!(other.by_name("b").unwrap().value.data(), &[0.125]);
    }
}
