//! Desk-scale trainable backbone.
//!
//! Each latent pixel queries the prompt tokens through a single
//! cross-attention layer driven by fixed Fourier position features; the
//! attended values are projected to a clean-latent estimate `x̂0`, and the
//! noise estimate follows from the forward-noising relation
//! `ε̂ = (z − α·x̂0) / δ`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::adapter::{AdapterConfig, AdapterSet, LoraAdapter, Projection};
use super::codec::{LatentCodec, ToyCodec};
use super::schedule::SamplerSchedule;
use super::{Backbone, TrainableBackbone};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng;
use crate::text::{HashTextEncoder, TextEmbedding, TextEncoder};

const TEXT_DIM: usize = 32;
const ATTN_DIM: usize = 16;
const VALUE_DIM: usize = 8;
const FREQS: usize = 4;
const POS_DIM: usize = 1 + 4 * FREQS;
const CHANNELS: usize = 3;
const BASE_SEED: u64 = 0x7e57_ba5e;

#[derive(Debug, Clone, PartialEq)]
struct Weights {
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    output: Array2<f64>,
    bias: Array1<f64>,
}

impl Weights {
    fn pretrained() -> Self {
        let mut r = rng::seeded(BASE_SEED, 0);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng::standard_normal(&mut r) * std)
        };
        let query = gauss(POS_DIM, ATTN_DIM, 1.0 / (POS_DIM as f64).sqrt());
        let key = gauss(TEXT_DIM, ATTN_DIM, 1.0);
        let value = gauss(TEXT_DIM, VALUE_DIM, 1.0);
        let output = gauss(VALUE_DIM, CHANNELS, 0.1);
        Self {
            query,
            key,
            value,
            output,
            bias: Array1::from_elem(CHANNELS, 0.5),
        }
    }

    fn get(&self, p: Projection) -> &Array2<f64> {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
        }
    }
}

fn projection_shape(p: Projection) -> (usize, usize) {
    match p {
        Projection::Query => (POS_DIM, ATTN_DIM),
        Projection::Key => (TEXT_DIM, ATTN_DIM),
        Projection::Value => (TEXT_DIM, VALUE_DIM),
        Projection::Output => (VALUE_DIM, CHANNELS),
    }
}

fn position_features(h: usize, w: usize) -> Array2<f64> {
    use std::f64::consts::PI;
    Array2::from_shape_fn((h * w, POS_DIM), |(i, j)| {
        let (y, x) = (i / w, i % w);
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        if j == 0 {
            return 1.0;
        }
        let k = (j - 1) / 4 + 1;
        let arg = PI * k as f64;
        match (j - 1) % 4 {
            0 => (arg * u).sin(),
            1 => (arg * u).cos(),
            2 => (arg * v).sin(),
            _ => (arg * v).cos(),
        }
    })
}

struct Forward {
    positions: Array2<f64>,
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    attention: Array2<f64>,
    context: Array2<f64>,
    clean: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    id: String,
    codec: ToyCodec,
    encoder: HashTextEncoder,
    working: (usize, usize),
    base: Weights,
    adapters: Option<AdapterSet>,
}

impl ToyBackbone {
    pub fn new(id: &str, codec_factor: usize, working: (usize, usize)) -> Self {
        Self {
            id: id.to_string(),
            codec: ToyCodec::new(codec_factor, CHANNELS),
            encoder: HashTextEncoder::new(TEXT_DIM),
            working,
            base: Weights::pretrained(),
            adapters: None,
        }
    }

    pub fn with_working_size(mut self, working: (usize, usize)) -> Self {
        self.working = working;
        self
    }

    fn effective(&self, p: Projection) -> Array2<f64> {
        match self.adapters.as_ref().and_then(|a| a.get(p)) {
            Some(l) => l.apply(self.base.get(p)),
            None => self.base.get(p).clone(),
        }
    }

    fn forward(&self, h: usize, w: usize, embedding: &TextEmbedding) -> Result<Forward> {
        if embedding.dim() != TEXT_DIM {
            return Err(Error::DimensionMismatch(format!(
                "toy backbone expects {TEXT_DIM}-d text embeddings, got {}",
                embedding.dim()
            )));
        }
        let positions = position_features(h, w);
        let tokens = embedding.tokens();
        let queries = positions.dot(&self.effective(Projection::Query));
        let keys = tokens.dot(&self.effective(Projection::Key));
        let values = tokens.dot(&self.effective(Projection::Value));
        let mut attention = queries.dot(&keys.t()) / (ATTN_DIM as f64).sqrt();
        for mut row in attention.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let context = attention.dot(&values);
        let clean = context.dot(&self.effective(Projection::Output)) + &self.base.bias;
        Ok(Forward {
            positions,
            queries,
            keys,
            values,
            attention,
            context,
            clean,
        })
    }

    fn noise_coefficients(&self, level: usize, schedule: &SamplerSchedule) -> Result<(f64, f64)> {
        schedule.check_step(level)?;
        let (a, d) = (schedule.alpha(level), schedule.delta(level));
        if d <= 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "level {level} carries no noise to predict"
            )));
        }
        Ok((a, d))
    }

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        if z.channels() != CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "toy backbone expects {CHANNELS}-channel latents, got {}",
                z.channels()
            )));
        }
        Ok(())
    }
}

fn flat(z: &LatentGrid) -> ArrayView2<'_, f64> {
    let (h, w, c) = z.dims();
    z.array()
        .view()
        .into_shape_with_order((h * w, c))
        .expect("latent grids are contiguous")
}

fn unflat(data: Array2<f64>, h: usize, w: usize) -> Result<LatentGrid> {
    let c = data.ncols();
    LatentGrid::from_array(data.into_shape_with_order((h, w, c)).expect("row count matches h*w"))
}

impl TextEncoder for ToyBackbone {
    fn encode_text(&self, text: &str) -> Result<TextEmbedding> {
        self.encoder.encode_text(text)
    }
}

impl Backbone for ToyBackbone {
    fn id(&self) -> &str {
        &self.id
    }

    fn codec(&self) -> &dyn LatentCodec {
        &self.codec
    }

    fn working_size(&self) -> (usize, usize) {
        self.working
    }

    fn predict_noise(
        &self,
        z: &LatentGrid,
        embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
    ) -> Result<LatentGrid> {
        self.check_latent(z)?;
        let (a, d) = self.noise_coefficients(level, schedule)?;
        let (h, w, _) = z.dims();
        let fwd = self.forward(h, w, embedding)?;
        let eps = (&flat(z) - &(fwd.clean * a)) / d;
        unflat(eps, h, w)
    }
}

impl TrainableBackbone for ToyBackbone {
    fn init_adapters(&self, config: &AdapterConfig, seed: u64) -> Result<AdapterSet> {
        config.validate()?;
        let layers = config
            .targets
            .iter()
            .map(|&p| {
                let (i, o) = projection_shape(p);
                (p, LoraAdapter::init(i, o, config.rank, seed, 100 + p as u64))
            })
            .collect();
        Ok(AdapterSet {
            config: config.clone(),
            layers,
        })
    }

    fn attach_adapters(&mut self, adapters: AdapterSet) -> Result<()> {
        for (p, l) in &adapters.layers {
            let (i, o) = projection_shape(*p);
            let r = adapters.config.rank;
            if l.down.dim() != (i, r) || l.up.dim() != (r, o) {
                return Err(Error::Checkpoint(format!(
                    "{p} adapter has shapes {:?}/{:?}, expected ({i}, {r})/({r}, {o})",
                    l.down.dim(),
                    l.up.dim()
                )));
            }
        }
        self.adapters = Some(adapters);
        Ok(())
    }

    fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    fn adapters_mut(&mut self) -> Option<&mut AdapterSet> {
        self.adapters.as_mut()
    }

    fn base_weight_hash(&self) -> String {
        let mut bytes = Vec::new();
        for p in Projection::ALL {
            for v in self.base.get(p).iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.base.bias.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        rng::sha256_hex(&bytes)
    }

    fn noise_loss_and_grad(
        &self,
        z: &LatentGrid,
        embedding: &TextEmbedding,
        level: usize,
        schedule: &SamplerSchedule,
        objective: &mut dyn FnMut(&LatentGrid) -> Result<(f64, LatentGrid)>,
    ) -> Result<(f64, AdapterSet)> {
        let adapters = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no adapters attached".into()))?;
        self.check_latent(z)?;
        let (a, d) = self.noise_coefficients(level, schedule)?;
        let (h, w, _) = z.dims();
        let fwd = self.forward(h, w, embedding)?;
        let eps = unflat((&flat(z) - &(&fwd.clean * a)) / d, h, w)?;
        let (loss, grad_eps) = objective(&eps)?;
        eps.ensure_same_dims(&grad_eps)?;

        // ε̂ = (z − α x̂0)/δ
        let grad_clean = flat(&grad_eps).to_owned() * (-a / d);
        let w_out = self.effective(Projection::Output);
        let grad_w_out = fwd.context.t().dot(&grad_clean);
        let grad_context = grad_clean.dot(&w_out.t());
        let grad_values = fwd.attention.t().dot(&grad_context);
        let grad_attention = grad_context.dot(&fwd.values.t());
        let row_dot = (&grad_attention * &fwd.attention).sum_axis(Axis(1));
        let grad_scores = &fwd.attention * &(&grad_attention - &row_dot.insert_axis(Axis(1)));
        let inv_sqrt = 1.0 / (ATTN_DIM as f64).sqrt();
        let grad_queries = grad_scores.dot(&fwd.keys) * inv_sqrt;
        let grad_keys = grad_scores.t().dot(&fwd.queries) * inv_sqrt;
        let tokens = embedding.tokens();

        let mut grads = adapters.zeros_like();
        for (p, layer) in &adapters.layers {
            let weight_grad = match p {
                Projection::Query => fwd.positions.t().dot(&grad_queries),
                Projection::Key => tokens.t().dot(&grad_keys),
                Projection::Value => tokens.t().dot(&grad_values),
                Projection::Output => grad_w_out.clone(),
            };
            let slot = grads.layers.get_mut(p).expect("zeros_like keeps keys");
            layer.accumulate_grad(&weight_grad, slot);
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq_objective(target: LatentGrid) -> impl FnMut(&LatentGrid) -> Result<(f64, LatentGrid)> {
        move |pred: &LatentGrid| {
            let diff = pred.array() - target.array();
            let loss = diff.iter().map(|v| v * v).sum::<f64>() * 0.5;
            Ok((loss, LatentGrid::from_array(diff)?))
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut toy = ToyBackbone::new("toy", 1, (6, 5));
        let cfg = AdapterConfig {
            rank: 2,
            targets: Projection::ALL.to_vec(),
        };
        let mut adapters = toy.init_adapters(&cfg, 11).unwrap();
        let mut r = rng::seeded(5, 1);
        for t in adapters.tensors_mut() {
            t.mapv_inplace(|_| rng::standard_normal(&mut r) * 0.3);
        }
        toy.attach_adapters(adapters).unwrap();
        let s = SamplerSchedule::linear(10, 0.5, 0.1).unwrap();
        let z = rng::normal_latent(&mut r, 6, 5, 3);
        let target = rng::normal_latent(&mut r, 6, 5, 3);
        let emb = toy.encode_text("a brown [sks] teapot").unwrap();
        let (_, grads) = toy
            .noise_loss_and_grad(&z, &emb, 4, &s, &mut sq_objective(target.clone()))
            .unwrap();

        let loss_at = |toy: &ToyBackbone| {
            let eps = toy.predict_noise(&z, &emb, 4, &s).unwrap();
            let diff = eps.array() - target.array();
            diff.iter().map(|v| v * v).sum::<f64>() * 0.5
        };
        let h = 1e-6;
        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect();
        let n_params = toy.adapters().unwrap().parameter_count();
        assert_eq!(analytic.len(), n_params);
        for idx in (0..n_params).step_by(7) {
            let bump = |toy: &mut ToyBackbone, delta: f64| {
                let mut k = idx;
                for t in toy.adapters_mut().unwrap().tensors_mut() {
                    if k < t.len() {
                        let v = t.iter_mut().nth(k).unwrap();
                        *v += delta;
                        return;
                    }
                    k -= t.len();
                }
            };
            bump(&mut toy, h);
            let up = loss_at(&toy);
            bump(&mut toy, -2.0 * h);
            let down = loss_at(&toy);
            bump(&mut toy, h);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() <= 1e-5 * (1.0 + a.abs()),
                "param {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn fresh_adapters_leave_predictions_unchanged() {
        let mut toy = ToyBackbone::new("toy", 1, (8, 8));
        let s = SamplerSchedule::linear(10, 0.5, 0.1).unwrap();
        let mut r = rng::seeded(2, 2);
        let z = rng::normal_latent(&mut r, 8, 8, 3);
        let emb = toy.encode_text("a [sks] teapot").unwrap();
        let before = toy.predict_noise(&z, &emb, 3, &s).unwrap();
        let hash = toy.base_weight_hash();
        let adapters = toy.init_adapters(&AdapterConfig::default(), 1).unwrap();
        toy.attach_adapters(adapters).unwrap();
        assert_eq!(toy.predict_noise(&z, &emb, 3, &s).unwrap(), before);
        assert_eq!(toy.base_weight_hash(), hash);
    }

    #[test]
    fn level_zero_is_rejected() {
        let toy = ToyBackbone::new("toy", 1, (4, 4));
        let s = SamplerSchedule::linear(10, 0.5, 0.1).unwrap();
        let emb = toy.encode_text("x").unwrap();
        assert!(toy.predict_noise(&LatentGrid::zeros(4, 4, 3), &emb, 0, &s).is_err());
    }
}
