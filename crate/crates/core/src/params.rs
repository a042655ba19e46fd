//! Named parameter storage.
//!
//! Modules hold [`ParamId`]s; the numbers live in a [`ParamStore`]. Each
//! forward pass binds the store into fresh tensor leaves, and the optimizer
//! writes updated values back into the store between steps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mstat_tensor::io::{read_tensor, write_tensor};
use mstat_tensor::{Element, Gradients, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{MstatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    /// Excluded from weight decay (biases, norms, tokens, residual weights).
    pub no_decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

/// Initialization schemes for new parameters.
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Glorot uniform over the first two extents.
    Xavier,
    Values(Vec<f64>),
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for {:?}", shape);
                v
            }
        };
        let no_decay = shape.len() <= 1;
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            data: values.into_iter().map(F::lit).collect(),
            no_decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<F> {
        &mut self.entries[id.0].data
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Converts every value to another precision.
    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| G::lit(v.to_f64().unwrap_or(0.0))).collect(),
                    no_decay: e.no_decay,
                })
                .collect(),
        }
    }

    /// Mints one tensor leaf per parameter. With `trainable` unset the
    /// leaves are constants and forward passes record nothing.
    pub fn bind(&self, trainable: bool) -> Result<Bound<F>> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    Tensor::param(e.data.clone(), &e.shape)
                } else {
                    Tensor::from_vec(e.data.clone(), &e.shape)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { tensors })
    }

    /// Writes all parameters as concatenated tensor containers plus a
    /// name index, in store order.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = BufWriter::new(File::create(dir.join("params.txt"))?);
        let mut bin = BufWriter::new(File::create(dir.join("params.bin"))?);
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            writeln!(index, "{}\t{}", e.name, dims.join("x"))?;
            write_tensor(&mut bin, &e.shape, &e.data)?;
        }
        index.flush()?;
        bin.flush()?;
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save`] into this store. Names
    /// and shapes must match exactly.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let index = fs::read_to_string(dir.join("params.txt"))?;
        let names: Vec<&str> = index.lines().filter_map(|l| l.split('\t').next()).collect();
        if names.len() != self.entries.len() {
            return Err(MstatError::Config(format!(
                "checkpoint has {} parameters, model has {}",
                names.len(),
                self.entries.len()
            )));
        }
        let mut bin = BufReader::new(File::open(dir.join("params.bin"))?);
        let mut by_name = BTreeMap::new();
        for name in names {
            by_name.insert(name.to_string(), read_tensor(&mut bin)?);
        }
        for e in &mut self.entries {
            let raw = by_name
                .remove(&e.name)
                .ok_or_else(|| MstatError::Config(format!("checkpoint lacks parameter {}", e.name)))?;
            if raw.shape != e.shape {
                return Err(MstatError::Config(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    e.name, raw.shape, e.shape
                )));
            }
            e.data = raw.into_vec();
        }
        Ok(())
    }
}

/// One forward pass worth of parameter leaves.
pub struct Bound<F: Element> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Element> Bound<F> {
    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    /// Gradient for every parameter, zero where the loss did not reach.
    pub fn grads(&self, grads: &Gradients<F>) -> Vec<Vec<F>> {
        self.tensors.iter().map(|t| grads.get_or_zeros(t)).collect()
    }
}
