//! Named parameter storage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal(f64),
}

/// Parameters in registration order, each with a stable dotted name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let mut m = Matrix::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => m.data_mut().iter_mut().for_each(|x| *x = 1.0),
            Init::Constant(c) => m.data_mut().iter_mut().for_each(|x| *x = c),
            Init::TruncNormal(std) => {
                for x in m.data_mut() {
                    let v = loop {
                        let z = standard_normal(rng);
                        if z.abs() <= 2.0 {
                            break z;
                        }
                    };
                    *x = v * std;
                }
            }
        }
        self.insert(name.into(), m)
    }

    pub fn insert(&mut self, name: String, value: Matrix) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ParamMismatch(String::from("parameter names differ")));
        }
        for ((name, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replaces values from `(name, matrix)` pairs; every stored name must be
    /// present with the right shape.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
        let mut seen = alloc::vec![false; self.len()];
        for (name, m) in named {
            let id = self
                .find(name)
                .ok_or_else(|| Error::ParamMismatch(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != m.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    self.values[id.0].shape(),
                    m.shape()
                )));
            }
            self.values[id.0] = m.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::ParamMismatch(format!(
                "missing parameter {}",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

/// Elementwise arithmetic mean of compatible stores.
pub fn average(stores: &[ParamStore]) -> Result<ParamStore> {
    let first = stores.first().ok_or(Error::Empty("checkpoint list"))?;
    for s in &stores[1..] {
        first.check_compatible(s)?;
    }
    let k = stores.len() as f64;
    let mut out = first.clone();
    for (idx, v) in out.values.iter_mut().enumerate() {
        for (pos, x) in v.data_mut().iter_mut().enumerate() {
            *x = stores.iter().map(|s| s.values[idx].data()[pos]).sum::<f64>() / k;
        }
    }
    Ok(out)
}
