//! Network assembly: shallow convolution, a stack of attention blocks with a
//! long skip, two reconstruction convolutions, and pixel-shuffle upsampling.

mod checkpoint;
pub mod diagnostics;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::dcsa::{dcsa_forward, BudgetMode, DcsaParams};
use crate::error::{Error, Result};
use crate::feffn::{feffn_forward, FeffnParams};
use crate::layers::{Conv, LayerNorm};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdanetConfig {
    pub bands: usize,
    pub feat_channels: usize,
    pub num_blocks: usize,
    pub scale: usize,
    pub seed: u32,
}

impl Default for SdanetConfig {
    fn default() -> Self {
        SdanetConfig {
            bands: 128,
            feat_channels: 64,
            num_blocks: 6,
            scale: 4,
            seed: 0,
        }
    }
}

impl SdanetConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 2, 4 or 8, got {}", self.scale)));
        }
        if self.feat_channels == 0 || self.feat_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "feature channels must be positive and even, got {}",
                self.feat_channels
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.bands == 0 {
            return Err(Error::Config("band count must be positive".into()));
        }
        Ok(())
    }
}

/// Structural variants used by the ablation harness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// Attention sub-blocks removed; their residual path is the identity.
    NoDcsa,
    /// Feed-forward sub-blocks removed.
    NoFeffn,
    /// Attention keeps every entry (`k = C`).
    FixedKFull,
    /// Attention keeps `⌊C/2⌋` entries per row.
    FixedKHalf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoDcsa,
        Variant::NoFeffn,
        Variant::FixedKFull,
        Variant::FixedKHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDcsa => "no_dcsa",
            Variant::NoFeffn => "no_feffn",
            Variant::FixedKFull => "fixed_k_full",
            Variant::FixedKHalf => "fixed_k_half",
        }
    }

    pub fn budget_mode(self, channels: usize) -> BudgetMode {
        match self {
            Variant::FixedKFull => BudgetMode::Fixed(channels),
            Variant::FixedKHalf => BudgetMode::Fixed((channels / 2).max(1)),
            _ => BudgetMode::Dynamic,
        }
    }
}

/// Parameters of one attention block. A `None` sub-block is skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn: Option<(LayerNorm, DcsaParams)>,
    pub ffn: Option<(LayerNorm, FeffnParams)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdanetModel {
    pub config: SdanetConfig,
    pub variant: Variant,
    pub store: ParamStore,
    pub shallow_conv: Conv,
    pub blocks: Vec<BlockParams>,
    pub recon_conv1: Conv,
    pub recon_conv2: Conv,
    pub upsample_conv: Conv,
    pub final_conv: Conv,
}

/// Builds the full model with seeded uniform `±sqrt(1/fan_in)` weights,
/// zero biases, and unit/zero normalization parameters.
pub fn init_params(config: SdanetConfig) -> Result<SdanetModel> {
    init_variant(config, Variant::Full)
}

/// Builds a structural variant. Parameters shared with the full model get
/// identical initial values.
pub fn init_variant(config: SdanetConfig, variant: Variant) -> Result<SdanetModel> {
    config.validate()?;
    let (b, c, s) = (config.bands, config.feat_channels, config.scale);
    let seed = u64::from(config.seed);
    let mut store = ParamStore::new();
    let shallow_conv = Conv::register(&mut store, seed, "shallow_conv", b, c, 3, 1, true)?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let attn = if variant == Variant::NoDcsa {
            None
        } else {
            Some((
                LayerNorm::register(&mut store, &format!("blocks.{i}.norm1"), c)?,
                DcsaParams::register(&mut store, seed, &format!("blocks.{i}.dcsa"), c)?,
            ))
        };
        let ffn = if variant == Variant::NoFeffn {
            None
        } else {
            Some((
                LayerNorm::register(&mut store, &format!("blocks.{i}.norm2"), c)?,
                FeffnParams::register(&mut store, seed, &format!("blocks.{i}.feffn"), c)?,
            ))
        };
        blocks.push(BlockParams { attn, ffn });
    }
    let recon_conv1 = Conv::register(&mut store, seed, "recon_conv1", c, c, 3, 1, true)?;
    let recon_conv2 = Conv::register(&mut store, seed, "recon_conv2", c, c, 3, 1, true)?;
    let upsample_conv = Conv::register(&mut store, seed, "upsample_conv", c, c * s * s, 3, 1, true)?;
    let final_conv = Conv::register(&mut store, seed, "final_conv", c, b, 3, 1, true)?;
    Ok(SdanetModel {
        config,
        variant,
        store,
        shallow_conv,
        blocks,
        recon_conv1,
        recon_conv2,
        upsample_conv,
        final_conv,
    })
}

/// `F₁ = F + attn(norm₁(F))`, `out = F₁ + ffn(norm₂(F₁))`.
pub fn sdab_forward<'a>(
    tape: &'a Tape,
    store: &ParamStore,
    f: Var<'a>,
    block: &BlockParams,
    mode: BudgetMode,
) -> Result<Var<'a>> {
    let mut x = f;
    if let Some((norm, dcsa)) = &block.attn {
        let y = dcsa_forward(tape, store, norm.forward(tape, store, x)?, dcsa, mode)?;
        x = tape.add(x, y)?;
    }
    if let Some((norm, ffn)) = &block.ffn {
        let y = feffn_forward(tape, store, norm.forward(tape, store, x)?, ffn)?;
        x = tape.add(x, y)?;
    }
    Ok(x)
}

impl SdanetModel {
    pub fn count_params(&self) -> usize {
        self.store.element_count()
    }

    /// Records the forward pass of `lr` (`N×bands×h×w`); the output is
    /// `N×bands×(h·scale)×(w·scale)` and is not clamped.
    pub fn forward<'a>(&self, tape: &'a Tape, lr: Var<'a>) -> Result<Var<'a>> {
        self.forward_with(tape, &self.store, lr)
    }

    /// [`SdanetModel::forward`] with parameter values taken from `store`,
    /// which must share this model's registry layout.
    pub fn forward_with<'a>(&self, tape: &'a Tape, store: &ParamStore, lr: Var<'a>) -> Result<Var<'a>> {
        if store.len() != self.store.len() {
            return Err(Error::Config(format!(
                "store holds {} parameters, model expects {}",
                store.len(),
                self.store.len()
            )));
        }
        let shape = lr.shape();
        if shape.len() != 4 {
            return Err(Error::Config(format!("input must be N×bands×h×w, got {shape:?}")));
        }
        if shape[1] != self.config.bands {
            return Err(Error::Config(format!(
                "model expects {} bands, input has {}",
                self.config.bands, shape[1]
            )));
        }
        let mode = self.variant.budget_mode(self.config.feat_channels);
        let shallow = self.shallow_conv.forward(tape, store, lr)?;
        let mut deep = shallow;
        for block in &self.blocks {
            deep = sdab_forward(tape, store, deep, block, mode)?;
        }
        let skip = tape.add(deep, shallow)?;
        let f = self.recon_conv1.forward(tape, store, skip)?;
        let f = self.recon_conv2.forward(tape, store, f)?;
        let up = self.upsample_conv.forward(tape, store, f)?;
        let up = tape.pixel_shuffle(up, self.config.scale)?;
        self.final_conv.forward(tape, store, up)
    }

    /// Inference on a detached input; output clamped to `[0, 1]`.
    pub fn predict(&self, lr: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(lr.clone());
        let y = self.forward(&tape, x)?;
        Ok(y.value().map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Forward pass of `model` on `lr`; see [`SdanetModel::forward`].
pub fn sdanet_forward<'a>(tape: &'a Tape, lr: Var<'a>, model: &SdanetModel) -> Result<Var<'a>> {
    model.forward(tape, lr)
}

/// Total number of scalar parameters.
pub fn count_params(model: &SdanetModel) -> usize {
    model.count_params()
}
