//! Adam with a cosine learning-rate schedule, the training loop, and the
//! ablation and loss-weight sweep harnesses.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{bicubic_resize, HsiCube, PatchPair};
use crate::error::{Error, Result};
use crate::model::{init_variant, save_checkpoint, SdanetConfig, SdanetModel, Variant};
use crate::objective::{evaluate_all, total_loss, LossBreakdown, MetricsReport, DEFAULT_LAMBDA};
use crate::tensor::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub total_steps: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the batch shuffling.
    pub seed: u64,
    /// Validation period in steps; 0 disables evaluation.
    pub eval_every: usize,
    /// Written after every evaluation and at the end of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr0: 1e-4,
            total_steps: 1000,
            lambda: DEFAULT_LAMBDA,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss weight must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0·(1 + cos(π·step/total))/2`, floored at 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    (lr0 * 0.5 * (1.0 + (PI * t).cos())).max(0.0)
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim(
            "parameters",
            format!("optimizer tracks {}, store holds {}", state.m.len(), store.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::dim(&p.name, "moment buffer shape differs from parameter"));
        }
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn line(&self) -> String {
        format!(
            "step={} lr={:.6e} pix={:.6} sam={:.6} total={:.6}",
            self.step, self.lr, self.loss.pix, self.loss.sam, self.loss.total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub report: MetricsReport,
}

impl EvalRecord {
    pub fn line(&self) -> String {
        format!("step={} {}", self.step, self.report)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<LossBreakdown> {
        self.steps.last().map(|r| r.loss)
    }

    /// Evaluation with the highest validation PSNR.
    pub fn best_eval(&self) -> Option<EvalRecord> {
        self.evals.iter().copied().max_by(|a, b| a.report.psnr.total_cmp(&b.report.psnr))
    }

    /// Step and eval lines interleaved in step order.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.steps.len() + self.evals.len());
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            out.push(s.line());
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                out.push(e.line());
            }
        }
        out.extend(evals.map(EvalRecord::line));
        out
    }
}

fn batch_tensor(cubes: &[&HsiCube]) -> Result<Tensor> {
    let items = cubes
        .iter()
        .map(|c| c.to_tensor().reshape(&[1, c.bands, c.height, c.width]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Mean of the per-patch reports of `model` on `patches`.
pub fn evaluate_patches(model: &SdanetModel, patches: &[PatchPair]) -> Result<MetricsReport> {
    let scale = model.config.scale;
    mean_report(patches, scale, |p| {
        let lr = batch_tensor(&[&p.lr])?;
        let sr = model.predict(&lr)?;
        HsiCube::from_tensor(&sr, p.hr.name.clone())
    })
}

/// Mean report of bicubic upsampling of each LR patch to its HR size.
pub fn bicubic_baseline(patches: &[PatchPair], scale: usize) -> Result<MetricsReport> {
    mean_report(patches, scale, |p| bicubic_resize(&p.lr, p.hr.height, p.hr.width))
}

fn mean_report(
    patches: &[PatchPair],
    scale: usize,
    mut reconstruct: impl FnMut(&PatchPair) -> Result<HsiCube>,
) -> Result<MetricsReport> {
    if patches.is_empty() {
        return Err(Error::Config("no patches to evaluate".into()));
    }
    let mut acc = [0.0f64; 5];
    for p in patches {
        let r = evaluate_all(&reconstruct(p)?, &p.hr, scale)?;
        for (a, v) in acc.iter_mut().zip([r.psnr, r.ssim, r.sam_deg, r.cc, r.ergas]) {
            *a += v;
        }
    }
    let n = patches.len() as f64;
    Ok(MetricsReport {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        sam_deg: acc[2] / n,
        cc: acc[3] / n,
        ergas: acc[4] / n,
        scale,
    })
}

/// Trains without progress output; see [`train_with`].
pub fn train(
    model: SdanetModel,
    train_set: &[PatchPair],
    val_set: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<(SdanetModel, TrainHistory)> {
    train_with(model, train_set, val_set, cfg, &mut |_| {})
}

/// Runs `cfg.total_steps` Adam steps on batches drawn from a per-epoch
/// shuffle of `train_set`, calling `on_line` with each history line as it
/// is produced. Batches may straddle an epoch boundary.
pub fn train_with(
    mut model: SdanetModel,
    train_set: &[PatchPair],
    val_set: &[PatchPair],
    cfg: &TrainConfig,
    on_line: &mut dyn FnMut(&str),
) -> Result<(SdanetModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let scale = model.config.scale;
    for p in train_set.iter().chain(val_set) {
        if p.lr.bands != model.config.bands || p.hr.height != p.lr.height * scale || p.hr.width != p.lr.width * scale {
            return Err(Error::dim(
                "patch",
                format!(
                    "{}×{}×{} → {}×{} does not fit a ×{scale} model with {} bands",
                    p.lr.height, p.lr.width, p.lr.bands, p.hr.height, p.hr.width, model.config.bands
                ),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = AdamState::new(&model.store);
    let mut history = TrainHistory::default();

    for step in 1..=cfg.total_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let lr_batch = batch_tensor(&idx.iter().map(|&i| &train_set[i].lr).collect::<Vec<_>>())?;
        let hr_batch = batch_tensor(&idx.iter().map(|&i| &train_set[i].hr).collect::<Vec<_>>())?;

        let lr = cosine_lr(step - 1, cfg.total_steps, cfg.lr0);
        let tape = Tape::new();
        let pred = model.forward(&tape, tape.constant(lr_batch))?;
        let (loss, breakdown) = total_loss(&tape, pred, tape.constant(hr_batch), cfg.lambda)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite loss (pix={} sam={})", breakdown.pix, breakdown.sam),
            });
        }
        model.store.zero_grad();
        tape.backward(loss, &mut model.store)?;
        drop(tape);
        adam_step(&mut model.store, &mut adam, lr, cfg.beta1, cfg.beta2, cfg.eps)?;

        let record = StepRecord { step, lr, loss: breakdown };
        on_line(&record.line());
        history.steps.push(record);

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !val_set.is_empty() {
            let eval = EvalRecord {
                step,
                report: evaluate_patches(&model, val_set)?,
            };
            on_line(&eval.line());
            history.evals.push(eval);
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(&model, path)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&model, path)?;
    }
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub param_count: usize,
    pub final_loss: LossBreakdown,
    pub report: MetricsReport,
}

/// Trains every variant with the same seed, data and schedule and reports
/// validation metrics (training patches when `val_set` is empty).
pub fn run_ablation(
    config: SdanetConfig,
    cfg: &TrainConfig,
    variants: &[Variant],
    train_set: &[PatchPair],
    val_set: &[PatchPair],
) -> Result<Vec<AblationRow>> {
    let cfg = TrainConfig {
        checkpoint: None,
        ..cfg.clone()
    };
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    variants
        .iter()
        .map(|&variant| {
            let model = init_variant(config, variant)?;
            let param_count = model.count_params();
            let (model, history) = train(model, train_set, val_set, &cfg)?;
            Ok(AblationRow {
                variant,
                param_count,
                final_loss: history.final_loss().expect("at least one step"),
                report: evaluate_patches(&model, eval_set)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_loss: LossBreakdown,
    pub report: MetricsReport,
}

/// One training run per loss weight, all from the same initialization.
pub fn lambda_sweep(
    config: SdanetConfig,
    cfg: &TrainConfig,
    lambdas: &[f64],
    train_set: &[PatchPair],
    val_set: &[PatchPair],
) -> Result<Vec<SweepRow>> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Config(format!("loss weight must be non-negative, got {l}")));
    }
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    lambdas
        .iter()
        .map(|&lambda| {
            let run_cfg = TrainConfig {
                lambda,
                checkpoint: None,
                ..cfg.clone()
            };
            let (model, history) = train(init_variant(config, Variant::Full)?, train_set, val_set, &run_cfg)?;
            Ok(SweepRow {
                lambda,
                final_loss: history.final_loss().expect("at least one step"),
                report: evaluate_patches(&model, eval_set)?,
            })
        })
        .collect()
}
