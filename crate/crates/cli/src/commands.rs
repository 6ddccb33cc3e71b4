//! One function per subcommand. Each resolves its flags into library
//! configurations, calls the library, and prints the library's own report
//! formatting.

use std::io::{self, Write};
use std::path::Path;

use sdanet::data::{degrade, load_cube, load_cube_dir, save_cube, scene_patches, synth_scene, HsiCube, PatchPair};
use sdanet::model::diagnostics::module_grad_checks;
use sdanet::model::{init_params, load_checkpoint, SdanetConfig, Variant};
use sdanet::objective::{evaluate_all, MetricsReport};
use sdanet::trainer::{lambda_sweep, run_ablation, train_with, TrainConfig};
use sdanet::{Error, Result};

use crate::args::{DegradeArgs, EvalArgs, GradcheckArgs, SweepArgs, SynthArgs, TrainArgs};

/// Gradient checks above this relative error are flagged.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Fails early when `path` cannot be created because its directory is missing.
fn check_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("directory {} does not exist", dir.display()),
        ))),
        _ => Ok(()),
    }
}

fn dims(c: &HsiCube) -> String {
    format!("{}×{}×{}", c.height, c.width, c.bands)
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    check_parent(&a.out)?;
    let cube = synth_scene(a.seed, a.height, a.width, a.bands, a.endmembers)?;
    save_cube(&cube, &a.out)?;
    writeln!(out, "wrote {} {}", a.out.display(), dims(&cube))?;
    Ok(())
}

pub fn degrade_cmd(a: &DegradeArgs, out: &mut dyn Write) -> Result<()> {
    check_parent(&a.out_lr)?;
    let hr = load_cube(&a.input)?;
    let lr = degrade(&hr, a.scale)?;
    save_cube(&lr, &a.out_lr)?;
    writeln!(out, "wrote {} {} from {}", a.out_lr.display(), dims(&lr), dims(&hr))?;
    Ok(())
}

/// Everything a training-style command needs, resolved and validated.
pub struct Prepared {
    pub model: SdanetConfig,
    pub train: TrainConfig,
    pub train_set: Vec<PatchPair>,
    pub val_set: Vec<PatchPair>,
}

impl Prepared {
    pub fn echo(&self, a: &TrainArgs) -> String {
        let (m, t) = (&self.model, &self.train);
        format!(
            "config bands={} channels={} blocks={} scale={} seed={} steps={} batch={} lr={:e} lambda={} patch={} stride={} val_frac={} eval_every={} train_patches={} val_patches={}",
            m.bands,
            m.feat_channels,
            m.num_blocks,
            m.scale,
            m.seed,
            t.total_steps,
            t.batch_size,
            t.lr0,
            t.lambda,
            a.patch,
            a.stride.unwrap_or(a.patch),
            a.val_frac,
            t.eval_every,
            self.train_set.len(),
            self.val_set.len(),
        )
    }
}

/// Validates every flag and output path, then loads and patches the scenes.
pub fn prepare(a: &TrainArgs) -> Result<Prepared> {
    let train = TrainConfig {
        batch_size: a.batch,
        lr0: a.lr,
        total_steps: a.steps,
        lambda: a.lambda,
        seed: u64::from(a.seed),
        eval_every: a.eval_every,
        checkpoint: a.ckpt.clone(),
        ..TrainConfig::default()
    };
    train.validate()?;
    let mut model = SdanetConfig {
        bands: 1,
        feat_channels: a.channels,
        num_blocks: a.blocks,
        scale: a.scale,
        seed: a.seed,
    };
    model.validate()?;
    if let Some(p) = &a.ckpt {
        check_parent(p)?;
    }
    let scenes = load_cube_dir(&a.data_dir)?;
    model.bands = scenes[0].bands;
    if let Some(c) = scenes.iter().find(|c| c.bands != model.bands) {
        return Err(Error::Dimension {
            axis: "bands".into(),
            detail: format!("scene {} has {} bands, expected {}", c.name, c.bands, model.bands),
        });
    }
    let stride = a.stride.unwrap_or(a.patch);
    let (train_set, val_set) = scene_patches(scenes, a.patch, a.scale, stride, a.val_frac, u64::from(a.seed))?;
    Ok(Prepared {
        model,
        train,
        train_set,
        val_set,
    })
}

pub fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let p = prepare(a)?;
    writeln!(out, "{}", p.echo(a))?;
    let mut write_err = None;
    let mut on_line = |line: &str| {
        if write_err.is_none() {
            if let Err(e) = writeln!(out, "{line}") {
                write_err = Some(e);
            }
        }
    };
    train_with(init_params(p.model)?, &p.train_set, &p.val_set, &p.train, &mut on_line)?;
    match write_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn report(out: &mut dyn Write, tsv: bool, r: &MetricsReport) -> Result<()> {
    if tsv {
        writeln!(out, "{}", MetricsReport::TSV_HEADER)?;
        writeln!(out, "{}", r.tsv_row())?;
    } else {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs, tsv: bool, out: &mut dyn Write) -> Result<()> {
    if let Some(p) = &a.out_sr {
        check_parent(p)?;
    }
    let hr = load_cube(&a.hr_cube)?;
    if a.bypass {
        if let Some(p) = &a.out_sr {
            save_cube(&hr, p)?;
        }
        return report(out, tsv, &evaluate_all(&hr, &hr, a.scale)?);
    }
    let (Some(ckpt), Some(lr_path)) = (&a.ckpt, &a.lr_cube) else {
        return Err(Error::Config("--ckpt and --lr-cube are required without --bypass".into()));
    };
    let model = load_checkpoint(ckpt)?;
    let lr = load_cube(lr_path)?;
    if lr.bands != model.config.bands {
        return Err(Error::Dimension {
            axis: "bands".into(),
            detail: format!("LR cube has {} bands, checkpoint expects {}", lr.bands, model.config.bands),
        });
    }
    let input = lr.to_tensor().reshape(&[1, lr.bands, lr.height, lr.width])?;
    let sr = HsiCube::from_tensor(&model.predict(&input)?, hr.name.clone())?;
    let r = evaluate_all(&sr, &hr, model.config.scale)?;
    if let Some(p) = &a.out_sr {
        save_cube(&sr, p)?;
    }
    report(out, tsv, &r)
}

pub fn ablate(a: &TrainArgs, tsv: bool, out: &mut dyn Write) -> Result<()> {
    let p = prepare(a)?;
    writeln!(out, "{}", p.echo(a))?;
    let rows = run_ablation(p.model, &p.train, &Variant::ALL, &p.train_set, &p.val_set)?;
    if tsv {
        writeln!(out, "variant\tparams\tpix\tsam\ttotal\t{}", MetricsReport::TSV_HEADER)?;
    }
    for r in &rows {
        let l = r.final_loss;
        if tsv {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.variant.name(),
                r.param_count,
                l.pix,
                l.sam,
                l.total,
                r.report.tsv_row()
            )?;
        } else {
            writeln!(
                out,
                "variant={} params={} pix={:.6} sam={:.6} total={:.6} {}",
                r.variant.name(),
                r.param_count,
                l.pix,
                l.sam,
                l.total,
                r.report
            )?;
        }
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs, tsv: bool, out: &mut dyn Write) -> Result<()> {
    let p = prepare(&a.train)?;
    writeln!(out, "{}", p.echo(&a.train))?;
    let rows = lambda_sweep(p.model, &p.train, &a.lambdas, &p.train_set, &p.val_set)?;
    if tsv {
        writeln!(out, "lambda\tpix\tsam\ttotal\t{}", MetricsReport::TSV_HEADER)?;
    }
    for r in &rows {
        let l = r.final_loss;
        if tsv {
            writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}\t{}", r.lambda, l.pix, l.sam, l.total, r.report.tsv_row())?;
        } else {
            writeln!(out, "lambda={} pix={:.6} sam={:.6} total={:.6} {}", r.lambda, l.pix, l.sam, l.total, r.report)?;
        }
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, tsv: bool, out: &mut dyn Write) -> Result<()> {
    let checks = module_grad_checks(a.size, a.seed)?;
    let verdict = |e: f64| if e < GRADCHECK_TOL { "ok" } else { "FAIL" };
    if tsv {
        writeln!(out, "module\tlayer\tmax_rel_error")?;
    }
    for c in &checks {
        let worst = c.report.max_rel_error;
        if tsv {
            writeln!(out, "{}\t*\t{worst:.3e}", c.module)?;
        } else {
            writeln!(
                out,
                "module={} max_rel_error={worst:.3e} coords={} {}",
                c.module,
                c.report.coords_checked,
                verdict(worst)
            )?;
        }
        for (layer, e) in c.per_layer() {
            if tsv {
                writeln!(out, "{}\t{layer}\t{e:.3e}", c.module)?;
            } else {
                writeln!(out, "  layer={layer} max_rel_error={e:.3e} {}", verdict(e))?;
            }
        }
    }
    Ok(())
}
