//! Shared fixtures for the integration targets.
#![allow(dead_code)]

use insctc_core::models::{CtcWeight, ModelConfig, Variant};
use insctc_core::numerics::{DenseArray, Graph, Var};
use insctc_core::{models::Model, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Small enough for exhaustive finite differences.
pub fn toy_config(variant: Variant, alpha: f64) -> ModelConfig {
    let mut c = ModelConfig::toy(variant, 8, 3);
    c.dim = 8;
    c.heads = 2;
    c.ff_dim = 8;
    c.encoder_layers = 1;
    c.decoder_layers = usize::from(variant.has_decoder());
    c.max_frames = 32;
    c.max_tokens = 8;
    c.ctc_weight = CtcWeight::new(alpha).expect("alpha in range");
    c
}

pub fn features(t: usize, d: usize, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseArray::matrix(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst per-tensor `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub worst: f64,
    pub worst_param: String,
    pub scalars: usize,
}

/// Central differences for every scalar parameter of `model` against the
/// tape gradient of `loss`.
pub fn grad_check(model: &mut Model, loss: impl Fn(&Model, &mut Graph) -> Result<Var>) -> Result<GradCheck> {
    let analytic = {
        let mut g = Graph::new(model.params());
        let v = loss(model, &mut g)?;
        g.backward(v)?.by_name(model.params())
    };
    let eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::new(m.params());
        let v = loss(m, &mut g)?;
        Ok(g.value(v).item())
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut report = GradCheck {
        worst: 0.0,
        worst_param: String::new(),
        scalars: 0,
    };
    for id in ids {
        let name = model.params().name(id).to_string();
        let len = model.params().value(id).len();
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().value(id).data()[k];
            model.params_mut().value_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = eval(model)?;
            model.params_mut().value_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = eval(model)?;
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let zeros = vec![0.0; len];
        let a = analytic.get(&name).map_or(&zeros[..], |g| g.data());
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(a).max(norm(&numeric));
        // both sides vanish: compare absolutely
        let rel = if scale < 1e-7 { diff } else { diff / scale };
        report.scalars += len;
        if rel > report.worst {
            report.worst = rel;
            report.worst_param = name;
        }
    }
    Ok(report)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
