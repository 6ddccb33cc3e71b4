//! Frequency-enhanced feed-forward network.
//!
//! `X0 = gelu(expand(X))`; two branches filter `fft2(X0)` with 5×5 and 3×3
//! depthwise kernels, swap channel halves (`F̃5 = [Fa3, Fb5]`,
//! `F̃3 = [Fa5, Fb3]`), return to the spatial domain, pass through 5×5 and 3×3
//! depthwise convolutions, and are concatenated and projected back to C
//! channels.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::spectral::CVar;
use crate::tensor::{Activation, ParamStore, Tape, Var};

/// Channel expansion of the first pointwise projection.
pub const EXPANSION: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FeffnParams {
    pub channels: usize,
    pub expand_proj: Conv,
    pub freq_kernel_5: Conv,
    pub freq_kernel_3: Conv,
    pub spatial_dconv_5: Conv,
    pub spatial_dconv_3: Conv,
    pub out_proj: Conv,
}

impl FeffnParams {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, channels: usize) -> Result<Self> {
        let c = channels;
        let e = EXPANSION * c;
        if e % 2 != 0 {
            return Err(Error::Config(format!("expanded width {e} must be even")));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(FeffnParams {
            channels: c,
            expand_proj: Conv::register(store, seed, &name("expand_proj"), c, e, 1, 1, true)?,
            freq_kernel_5: Conv::register(store, seed, &name("freq_kernel_5"), e, e, 5, e, false)?,
            freq_kernel_3: Conv::register(store, seed, &name("freq_kernel_3"), e, e, 3, e, false)?,
            spatial_dconv_5: Conv::register(store, seed, &name("spatial_dconv_5"), e, e, 5, e, true)?,
            spatial_dconv_3: Conv::register(store, seed, &name("spatial_dconv_3"), e, e, 3, e, true)?,
            out_proj: Conv::register(store, seed, &name("out_proj"), 2 * e, c, 1, 1, true)?,
        })
    }

    fn freq_kernel(&self, k: usize) -> Result<&Conv> {
        match k {
            5 => Ok(&self.freq_kernel_5),
            3 => Ok(&self.freq_kernel_3),
            _ => Err(Error::Config(format!("frequency branch kernel must be 5 or 3, got {k}"))),
        }
    }
}

/// Both channel halves of one filtered branch.
pub type BranchHalves<'a> = (CVar<'a>, CVar<'a>);

/// `fft2(X0)` filtered by the branch kernel, split into equal channel halves.
pub fn frequency_branch<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    x0: Var<'a>,
    kernel_size: usize,
    p: &FeffnParams,
) -> Result<BranchHalves<'a>> {
    let c = x0.value().dims4()?.1;
    if c % 2 != 0 {
        return Err(Error::Config(format!("cannot halve {c} channels")));
    }
    let kernel = tape.param(store, p.freq_kernel(kernel_size)?.weight);
    let spectrum = tape.fft2(x0)?;
    let filtered = tape.complex_depthwise_conv(spectrum, kernel)?;
    Ok((
        tape.slice_grid(filtered, 0, c / 2)?,
        tape.slice_grid(filtered, c / 2, c / 2)?,
    ))
}

/// Swaps the first halves of the two branches.
pub fn cross_frequency_exchange<'a>(
    tape: &'a Tape,
    branch5: BranchHalves<'a>,
    branch3: BranchHalves<'a>,
) -> Result<(CVar<'a>, CVar<'a>)> {
    let (fa5, fb5) = branch5;
    let (fa3, fb3) = branch3;
    Ok((tape.concat_grids(&[fa3, fb5])?, tape.concat_grids(&[fa5, fb3])?))
}

pub fn feffn_forward<'a>(tape: &'a Tape, store: &ParamStore, x: Var<'a>, p: &FeffnParams) -> Result<Var<'a>> {
    let c = x.value().dims4()?.1;
    if c != p.channels {
        return Err(Error::dim("channels", format!("module built for {}, input has {c}", p.channels)));
    }
    let x0 = tape.activation(p.expand_proj.forward(tape, store, x)?, Activation::Gelu);
    let b5 = frequency_branch(tape, store, x0, 5, p)?;
    let b3 = frequency_branch(tape, store, x0, 3, p)?;
    let (f5, f3) = cross_frequency_exchange(tape, b5, b3)?;
    let z5 = tape.ifft2(f5)?;
    let z3 = tape.ifft2(f3)?;
    let u = tape.concat_channels(&[
        p.spatial_dconv_5.forward(tape, store, z5)?,
        p.spatial_dconv_3.forward(tape, store, z3)?,
    ])?;
    p.out_proj.forward(tape, store, u)
}
