//! Finite-difference check of the full network's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::network::{build_model_with_dtype, Model};
use super::{reduced, MarformerConfig};
use crate::error::Result;
use crate::tensor::{relative_error, DType, Graph, Tensor};

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }
}

/// Width-8 network with one block and one head per level, the
/// configuration the self-check runs on.
pub fn gradcheck_config() -> MarformerConfig {
    reduced(8)
}

fn probe_loss(model: &Model, input: &Tensor, weights: &Tensor) -> Result<f64> {
    let y = model.forward(input)?;
    Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Compares backward() against central differences on `n_samples`
/// randomly chosen scalar parameters of an `f64` network with a 16×16
/// input. The loss is a fixed random weighting of the output, which keeps
/// it smooth. Output weights and temperatures are randomised so that no
/// gradient vanishes structurally.
pub fn gradient_check(seed: u64, n_samples: usize) -> Result<GradCheckReport> {
    let cfg = gradcheck_config();
    let mut model = build_model_with_dtype(&cfg, seed, DType::F64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params_mut() {
        if name.starts_with("output.") || name.ends_with("temperature") {
            for i in 0..t.len() {
                t.set(i, rng.gen_range(-0.3..0.3));
            }
        }
    }
    let (h, w) = (16, 16);
    let input = Tensor::from_f64(&[1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let weights = Tensor::from_f64(&[1, h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(input.clone());
    let y = model.forward_graph(&mut g, &vars, x)?;
    let wv = g.constant(weights.clone());
    let prod = g.mul(y, wv)?;
    let loss = g.sum(prod);
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();

    let sizes: Vec<usize> = model.params().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let names: Vec<String> = model.params().map(|(n, _)| n.to_string()).collect();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut flat = rng.gen_range(0..total);
        let mut j = 0;
        while flat >= sizes[j] {
            flat -= sizes[j];
            j += 1;
        }
        let orig = model.param_at(j).data()[flat];
        model.param_at_mut(j).set(flat, orig + STEP);
        let plus = probe_loss(&model, &input, &weights)?;
        model.param_at_mut(j).set(flat, orig - STEP);
        let minus = probe_loss(&model, &input, &weights)?;
        model.param_at_mut(j).set(flat, orig);
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[j].as_ref().map_or(0.0, |t| t.data()[flat]);
        samples.push(GradSample {
            param: names[j].clone(),
            index: flat,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { samples })
}
