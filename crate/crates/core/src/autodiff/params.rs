use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors; ids are insertion indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Uniform Glorot initialisation in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Writes `<stem>.bin` (little-endian doubles, store order) and
    /// `<stem>.csv` (`name,shape` with dims joined by `x`).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bin = BufWriter::new(File::create(stem.with_extension("bin"))?);
        let mut csv = BufWriter::new(File::create(stem.with_extension("csv"))?);
        writeln!(csv, "name,shape")?;
        for (name, t) in self.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(csv, "{name},{}", dims.join("x"))?;
            for v in t.data() {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        bin.flush()?;
        csv.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<ParamStore> {
        let csv_path = stem.with_extension("csv");
        let bin_path = stem.with_extension("bin");
        let header = std::fs::read_to_string(&csv_path)?;
        let mut raw = Vec::new();
        File::open(&bin_path)?.read_to_end(&mut raw)?;
        let bad = |detail: String| Error::Format {
            path: csv_path.display().to_string(),
            detail,
        };

        let mut store = ParamStore::new();
        let mut offset = 0usize;
        for (lineno, line) in header.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (name, shape) = line
                .rsplit_once(',')
                .ok_or_else(|| bad(format!("line {}: expected name,shape", lineno + 1)))?;
            let dims = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("line {}: bad shape `{shape}`", lineno + 1)))?;
            let n: usize = dims.iter().product();
            let bytes = raw
                .get(offset * 8..(offset + n) * 8)
                .ok_or_else(|| bad(format!("binary file too short for `{name}`")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Tensor::new(&dims, data)?);
            offset += n;
        }
        if offset * 8 != raw.len() {
            return Err(bad(format!("binary file has {} trailing bytes", raw.len() - offset * 8)));
        }
        Ok(store)
    }
}

/// Classic momentum SGD: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (id, g) in grads.iter() {
            if id >= params.len() {
                return Err(Error::shape("sgd_step", format!("gradient for unknown parameter {id}")));
            }
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let v = self.velocity[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, opt: &mut Sgd) -> Result<()> {
    opt.step(params, grads)
}
