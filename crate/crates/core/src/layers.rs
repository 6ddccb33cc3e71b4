//! Parameterized building blocks: convolutions and layer normalization bound
//! to slots in a [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Generator for the parameter called `name` under model seed `seed`.
///
/// Every parameter draws from its own stream, so its initial value does not
/// depend on which other parameters a model variant registers.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// A stride-1 convolution whose weight (and optional bias) live in a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub groups: usize,
    pub padding: usize,
}

impl Conv {
    /// Registers `{name}.weight` of shape `out×(in/groups)×k×k`, drawn
    /// uniformly from `±sqrt(1/fan_in)`, and a zero `{name}.bias` if requested.
    /// Padding is `(k−1)/2`, so spatial extents are preserved.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch / groups, k, k];
        let fan_in = shape[1] * k * k;
        let bound = (1.0 / fan_in as f64).sqrt();
        let wname = format!("{name}.weight");
        let mut rng = param_rng(seed, &wname);
        let w = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
        let weight = store.insert(wname, w)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            groups,
            padding: (k - 1) / 2,
        })
    }

    pub fn forward<'a>(&self, tape: &'a Tape, store: &ParamStore, x: Var<'a>) -> Result<Var<'a>> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.groups, self.padding)
    }

    /// Number of scalar parameters.
    pub fn size(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.len() + self.bias.map_or(0, |b| store.get(b).value.len())
    }
}

/// Channel-wise layer normalization with learned affine parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward<'a>(&self, tape: &'a Tape, store: &ParamStore, x: Var<'a>) -> Result<Var<'a>> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}
