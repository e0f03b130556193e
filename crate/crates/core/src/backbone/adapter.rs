//! Low-rank adapters on attention projections.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub targets: Vec<Projection>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            targets: vec![Projection::Key, Projection::Value],
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::Config("duplicate adapter targets".into()));
        }
        Ok(())
    }
}

/// `W_eff = W + scale · down · up` with `down: in × r`, `up: r × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    /// Gaussian `down`, zero `up`: the adapted layer starts equal to the base.
    pub fn init(inputs: usize, outputs: usize, rank: usize, seed: u64, stream: u64) -> Self {
        let mut r = rng::seeded(seed, stream);
        let std = 1.0 / (inputs as f64).sqrt();
        Self {
            down: Array2::from_shape_fn((inputs, rank), |_| rng::standard_normal(&mut r) * std),
            up: Array2::zeros((rank, outputs)),
            scale: 1.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            down: Array2::zeros(self.down.raw_dim()),
            up: Array2::zeros(self.up.raw_dim()),
            scale: self.scale,
        }
    }

    pub fn delta(&self) -> Array2<f64> {
        self.down.dot(&self.up) * self.scale
    }

    pub fn apply(&self, base: &Array2<f64>) -> Array2<f64> {
        base + &self.delta()
    }

    /// Accumulates adapter gradients given the gradient w.r.t. the effective weight.
    pub fn accumulate_grad(&self, weight_grad: &Array2<f64>, into: &mut LoraAdapter) {
        into.down += &(weight_grad.dot(&self.up.t()) * self.scale);
        into.up += &(self.down.t().dot(weight_grad) * self.scale);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub layers: BTreeMap<Projection, LoraAdapter>,
}

impl AdapterSet {
    pub fn get(&self, p: Projection) -> Option<&LoraAdapter> {
        self.layers.get(&p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(|(p, l)| (*p, l.zeros_like())).collect(),
        }
    }

    /// Named tensors in a stable order (`<projection>.down`, `<projection>.up`).
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        self.layers
            .iter()
            .flat_map(|(p, l)| [(format!("{p}.down"), &l.down), (format!("{p}.up"), &l.up)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers
            .values_mut()
            .flat_map(|l| [&mut l.down, &mut l.up])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.values().map(|l| l.down.len() + l.up.len()).sum()
    }

    pub fn add_assign(&mut self, other: &AdapterSet) {
        for (p, l) in self.layers.iter_mut() {
            if let Some(o) = other.layers.get(p) {
                l.down += &o.down;
                l.up += &o.up;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}
