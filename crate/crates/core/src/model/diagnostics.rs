//! Finite-difference checks of each building block and of a tiny model,
//! used by the command-line `gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{init_params, sdab_forward, BlockParams, SdanetConfig};
use crate::dcsa::{dcsa_forward, BudgetMode, DcsaParams};
use crate::error::{Error, Result};
use crate::feffn::{feffn_forward, FeffnParams};
use crate::layers::LayerNorm;
use crate::objective::{total_loss, DEFAULT_LAMBDA};
use crate::tensor::{grad_check_frozen, GradCheckReport, ParamStore, Tensor};

const EPS: f64 = 1e-4;
/// The full objective has enough curvature near small spectral norms that a
/// smaller step wins over roundoff.
const MODEL_EPS: f64 = 1e-5;
const COORDS: usize = 48;
const CHANNELS: usize = 4;

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub report: GradCheckReport,
}

impl ModuleCheck {
    /// Worst error per layer, i.e. per parameter name without its last
    /// component, in registry order.
    pub fn per_layer(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (name, err) in &self.report.per_param {
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
            match out.iter_mut().find(|(l, _)| l == layer) {
                Some(entry) => entry.1 = entry.1.max(*err),
                None => out.push((layer.to_string(), *err)),
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Redraws every parameter: weights at the variance-preserving scale
/// `±sqrt(3/fan_in)`, offsets and norm gains away from their initial
/// constants so no gradient is structurally zero.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let (lo, hi) = if p.name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if shape.len() == 4 {
            let r = (3.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
            (-r, r)
        } else {
            (-0.3, 0.3)
        };
        p.value = uniform(rng, &shape, lo, hi);
    }
}

/// Checks the attention module, the feed-forward module and one block on a
/// `1×4×size×size` input, and the total loss of a model with 3 bands,
/// 8 channels, one block and ×2 scale on a `size×size` input.
pub fn module_grad_checks(size: usize, seed: u64) -> Result<Vec<ModuleCheck>> {
    if size == 0 {
        return Err(Error::Config("check input size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, CHANNELS, size, size];
    let weights = uniform(&mut rng, &shape, -1.0, 1.0);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let p = DcsaParams::register(&mut store, seed, "dcsa", CHANNELS)?;
    randomize(&mut store, &mut rng);
    let x = store.insert("input", uniform(&mut rng, &shape, -1.0, 1.0))?;
    let report = grad_check_frozen(&mut store, EPS, COORDS, |tape, st| {
        let y = dcsa_forward(tape, st, tape.param(st, x), &p, BudgetMode::Dynamic)?;
        tape.dot_const(y, &weights)
    })?;
    out.push(ModuleCheck { module: "dcsa", report });

    let mut store = ParamStore::new();
    let p = FeffnParams::register(&mut store, seed, "feffn", CHANNELS)?;
    randomize(&mut store, &mut rng);
    let x = store.insert("input", uniform(&mut rng, &shape, -1.0, 1.0))?;
    let report = grad_check_frozen(&mut store, EPS, COORDS, |tape, st| {
        let y = feffn_forward(tape, st, tape.param(st, x), &p)?;
        tape.dot_const(y, &weights)
    })?;
    out.push(ModuleCheck { module: "feffn", report });

    let mut store = ParamStore::new();
    let block = BlockParams {
        attn: Some((
            LayerNorm::register(&mut store, "sdab.norm1", CHANNELS)?,
            DcsaParams::register(&mut store, seed, "sdab.dcsa", CHANNELS)?,
        )),
        ffn: Some((
            LayerNorm::register(&mut store, "sdab.norm2", CHANNELS)?,
            FeffnParams::register(&mut store, seed, "sdab.feffn", CHANNELS)?,
        )),
    };
    randomize(&mut store, &mut rng);
    let x = store.insert("input", uniform(&mut rng, &shape, -1.0, 1.0))?;
    let report = grad_check_frozen(&mut store, EPS, COORDS, |tape, st| {
        let y = sdab_forward(tape, st, tape.param(st, x), &block, BudgetMode::Dynamic)?;
        tape.dot_const(y, &weights)
    })?;
    out.push(ModuleCheck { module: "sdab", report });

    let config = SdanetConfig {
        bands: 3,
        feat_channels: 8,
        num_blocks: 1,
        scale: 2,
        seed: seed as u32,
    };
    let model = init_params(config)?;
    let mut store = model.store.clone();
    randomize(&mut store, &mut rng);
    // Centre the output in the data range; the angle term's higher
    // derivatives grow like 1/|p|³ for small spectra and would dominate the
    // central-difference truncation error.
    let bias = model.final_conv.bias.expect("final convolution has a bias");
    store.get_mut(bias).value = uniform(&mut rng, &[3], 0.4, 0.6);
    let lr = uniform(&mut rng, &[1, 3, size, size], 0.1, 0.9);
    // Target a fixed offset from the current prediction: the loss stays small,
    // so its roundoff does too, while every residual keeps its sign under the
    // perturbation and the L1 kink is never crossed.
    let pred0 = {
        let tape = crate::tensor::Tape::new();
        let y = model.forward_with(&tape, &store, tape.constant(lr.clone()))?;
        let v = (*y.value()).clone();
        v
    };
    let hr = Tensor::from_fn(pred0.shape(), |i| {
        let d: f64 = rng.gen_range(0.15..0.35);
        if rng.gen::<bool>() {
            pred0.data()[i] + d
        } else {
            pred0.data()[i] - d
        }
    });
    let report = grad_check_frozen(&mut store, MODEL_EPS, COORDS, |tape, st| {
        let pred = model.forward_with(tape, st, tape.constant(lr.clone()))?;
        Ok(total_loss(tape, pred, tape.constant(hr.clone()), DEFAULT_LAMBDA)?.0)
    })?;
    out.push(ModuleCheck { module: "model", report });
    Ok(out)
}
