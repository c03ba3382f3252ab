use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::graph::{Gradients, Graph};
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMSN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named trainable tensors, e.g. `experts.im.layer0.weight`.
///
/// Iteration order is the lexical order of names, which keeps optimizer
/// updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.params
            .insert(name.to_string(), Parameter { value, grad: None });
        Ok(())
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "set {name}: shape {:?} vs {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Gives every parameter without a gradient an all-zero one.
    pub fn fill_missing_grads(&mut self) {
        for p in self.params.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Adds the gradients of every parameter bound in `graph`. Parameters the
    /// loss does not reach keep whatever gradient they had.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (name, var) in graph.bindings() {
            let Some(g) = grads.get(*var) else { continue };
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
            match &mut p.grad {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Copies every parameter of `other` whose name exists here.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in other.iter() {
            if self.params.contains_key(name) {
                self.set(name, p.value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let shape = p.value.shape();
            w.write_all(&[shape.len() as u8])?;
            for &e in shape {
                let e = u32::try_from(e)
                    .map_err(|_| Error::Checkpoint(format!("extent too large in {name}")))?;
                w.write_all(&e.to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("name not utf-8: {e}")))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(r).map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        ParamStore::read_checkpoint(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
