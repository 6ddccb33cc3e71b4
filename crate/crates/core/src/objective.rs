//! Training loss (pixel L1 plus a weighted spectral-angle term) and the
//! five evaluation metrics.

use std::f64::consts::PI;
use std::fmt;

use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Tape, Tensor, Var};

/// Default weight of the spectral-angle term.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Cosine clamp used for the arccos derivative.
const COS_CLAMP: f64 = 1.0 - 1e-7;
const NORM_FLOOR: f64 = 1e-8;

/// PSNR reported for bands whose MSE is below `1e-10`.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub pix: f64,
    pub sam: f64,
    pub total: f64,
    pub lambda: f64,
}

fn same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "shape",
            format!("prediction {:?} vs reference {:?}", pred.shape(), gt.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::dim("shape", "empty input"));
    }
    Ok(())
}

/// Mean absolute difference over every element; subgradient 0 at ties.
pub fn l1_loss<'a>(tape: &'a Tape, pred: Var<'a>, gt: Var<'a>) -> Result<Var<'a>> {
    let (p, g) = (pred.value(), gt.value());
    same_shape(&p, &g)?;
    let n = p.len() as f64;
    let value = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(tape.push(
        Tensor::scalar(value),
        &[pred, gt],
        Box::new(move |dy, ins, _, needs| {
            let s = dy.item() / n;
            let sign = Tensor::new(
                ins[0].shape(),
                ins[0]
                    .data()
                    .iter()
                    .zip(ins[1].data())
                    .map(|(a, b)| if a > b { s } else if a < b { -s } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            let neg = needs[1].then(|| sign.map(|v| -v));
            vec![needs[0].then_some(sign), neg]
        }),
    ))
}

/// Per-pixel cosines of `N×B×H×W` spectra, with the floored norms.
fn pixel_cosines(p: &Tensor, g: &Tensor) -> Result<Vec<(f64, f64, f64)>> {
    let (n, b, h, w) = p.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for px in 0..hw {
            let (mut dot, mut pp, mut gg) = (0.0, 0.0, 0.0);
            for c in 0..b {
                let i = (s * b + c) * hw + px;
                let (a, r) = (p.data()[i], g.data()[i]);
                dot += a * r;
                pp += a * a;
                gg += r * r;
            }
            let (np, ng) = (pp.sqrt().max(NORM_FLOOR), gg.sqrt().max(NORM_FLOOR));
            out.push((dot / (np * ng), np, ng));
        }
    }
    Ok(out)
}

/// Mean over pixels and batch of `arccos(cos θ)/π` between spectra.
///
/// The value uses the cosine clamped to `[−1, 1]`, so the clamp adds no bias
/// at parallel spectra; the derivative uses the cosine clamped to
/// `±(1 − 1e-7)`, which keeps it finite there.
pub fn sam_loss<'a>(tape: &'a Tape, pred: Var<'a>, gt: Var<'a>) -> Result<Var<'a>> {
    let (p, g) = (pred.value(), gt.value());
    same_shape(&p, &g)?;
    let cos = pixel_cosines(&p, &g)?;
    let count = cos.len() as f64;
    let value = cos.iter().map(|&(c, _, _)| c.clamp(-1.0, 1.0).acos()).sum::<f64>() / (PI * count);
    Ok(tape.push(
        Tensor::scalar(value),
        &[pred, gt],
        Box::new(move |dy, ins, _, needs| {
            let (p, g) = (&*ins[0], &*ins[1]);
            let (n, b, h, w) = p.dims4().unwrap();
            let hw = h * w;
            let scale = dy.item() / (PI * count);
            let mut dp = Tensor::zeros(p.shape());
            let mut dg = Tensor::zeros(g.shape());
            for s in 0..n {
                for px in 0..hw {
                    let (c, np, ng) = cos[s * hw + px];
                    let cc = c.clamp(-COS_CLAMP, COS_CLAMP);
                    let dacos = -scale / (1.0 - cc * cc).sqrt();
                    // The floored norm is constant below the floor.
                    let kp = if np > NORM_FLOOR { c / (np * np) } else { 0.0 };
                    let kg = if ng > NORM_FLOOR { c / (ng * ng) } else { 0.0 };
                    for ch in 0..b {
                        let i = (s * b + ch) * hw + px;
                        let (a, r) = (p.data()[i], g.data()[i]);
                        dp.data_mut()[i] = dacos * (r / (np * ng) - kp * a);
                        dg.data_mut()[i] = dacos * (a / (np * ng) - kg * r);
                    }
                }
            }
            vec![needs[0].then_some(dp), needs[1].then_some(dg)]
        }),
    ))
}

/// `pix + λ·sam`, recorded on the tape, with the scalar breakdown.
pub fn total_loss<'a>(tape: &'a Tape, pred: Var<'a>, gt: Var<'a>, lambda: f64) -> Result<(Var<'a>, LossBreakdown)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("loss weight must be finite and non-negative, got {lambda}")));
    }
    let pix = l1_loss(tape, pred, gt)?;
    let sam = sam_loss(tape, pred, gt)?;
    let total = tape.add(pix, tape.scale(sam, lambda))?;
    let breakdown = LossBreakdown {
        pix: pix.item(),
        sam: sam.item(),
        total: total.item(),
        lambda,
    };
    Ok((total, breakdown))
}

/// Validates a `B×H×W` pair with values in `[0, 1]`.
fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize)> {
    same_shape(pred, gt)?;
    let &[b, h, w] = pred.shape() else {
        return Err(Error::dim("rank", format!("metrics need B×H×W, got {:?}", pred.shape())));
    };
    for (which, t) in [("prediction", pred), ("reference", gt)] {
        if let Some(v) = t.data().iter().find(|v| !(-1e-6..=1.0 + 1e-6).contains(*v)) {
            return Err(Error::Domain(format!("{which} value {v} outside [0, 1]")));
        }
    }
    Ok((b, h, w))
}

fn band<'t>(t: &'t Tensor, i: usize, hw: usize) -> &'t [f64] {
    &t.data()[i * hw..(i + 1) * hw]
}

fn band_mse(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Band-averaged PSNR with peak 1.
pub fn metric_psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (b, h, w) = check_pair(pred, gt)?;
    let hw = h * w;
    let per_band = par::map_range(b, |i| {
        let mse = band_mse(band(pred, i, hw), band(gt, i, hw));
        if mse < 1e-10 {
            PSNR_CAP
        } else {
            -10.0 * mse.log10()
        }
    });
    Ok(mean(&per_band))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn ssim_band(p: &[f64], g: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut wsum, mut mp, mut mg, mut pp, mut gg, mut pg) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let k = taps[(dy + r) as usize] * taps[(dx + r) as usize];
                    let i = yy as usize * w + xx as usize;
                    let (a, b) = (p[i], g[i]);
                    wsum += k;
                    mp += k * a;
                    mg += k * b;
                    pp += k * a * a;
                    gg += k * b * b;
                    pg += k * a * b;
                }
            }
            let (mp, mg) = (mp / wsum, mg / wsum);
            let vp = pp / wsum - mp * mp;
            let vg = gg / wsum - mg * mg;
            let cov = pg / wsum - mp * mg;
            total += ((2.0 * mp * mg + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mp * mp + mg * mg + SSIM_C1) * (vp + vg + SSIM_C2));
        }
    }
    total / (h * w) as f64
}

/// Band-averaged SSIM with an 11×11 Gaussian window (σ = 1.5). The window is
/// truncated at the image border and its weights renormalized, so every pixel
/// contributes and images smaller than the window are handled.
pub fn metric_ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (b, h, w) = check_pair(pred, gt)?;
    let hw = h * w;
    let taps = gaussian_taps();
    let per_band = par::map_range(b, |i| ssim_band(band(pred, i, hw), band(gt, i, hw), h, w, &taps));
    Ok(mean(&per_band))
}

/// Mean per-pixel spectral angle in degrees.
pub fn metric_sam(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (b, h, w) = check_pair(pred, gt)?;
    let hw = h * w;
    let angles = par::map_range(hw, |px| {
        let norm = |t: &Tensor| (0..b).map(|c| t.data()[c * hw + px].powi(2)).sum::<f64>().sqrt().max(NORM_FLOOR);
        let (np, ng) = (norm(pred), norm(gt));
        let (mut diff, mut sum) = (0.0, 0.0);
        for c in 0..b {
            let (a, r) = (pred.data()[c * hw + px] / np, gt.data()[c * hw + px] / ng);
            diff += (a - r) * (a - r);
            sum += (a + r) * (a + r);
        }
        // Half-angle form: exact 0 for parallel spectra, stable near 0 and π.
        2.0 * diff.sqrt().atan2(sum.sqrt())
    });
    Ok(mean(&angles).to_degrees())
}

/// Band-averaged Pearson correlation.
pub fn metric_cc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (b, h, w) = check_pair(pred, gt)?;
    let hw = h * w;
    let per_band = par::map_range(b, |i| {
        let (p, g) = (band(pred, i, hw), band(gt, i, hw));
        let (mp, mg) = (mean(p), mean(g));
        let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
        for (a, r) in p.iter().zip(g) {
            let (da, dr) = (a - mp, r - mg);
            cov += da * dr;
            vp += da * da;
            vg += dr * dr;
        }
        let n = hw as f64;
        let (cov, vp, vg) = (cov / n, vp / n, vg / n);
        (cov / (vp.max(1e-12) * vg.max(1e-12)).sqrt()).clamp(-1.0, 1.0)
    });
    Ok(mean(&per_band))
}

/// `100/scale · sqrt(mean_b MSE_b / μ_b²)` with `μ_b` the reference band mean.
pub fn metric_ergas(pred: &Tensor, gt: &Tensor, scale: usize) -> Result<f64> {
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    let (b, h, w) = check_pair(pred, gt)?;
    let hw = h * w;
    let ratios = par::map_range(b, |i| {
        let (p, g) = (band(pred, i, hw), band(gt, i, hw));
        let mu = mean(g).max(1e-8);
        band_mse(p, g) / (mu * mu)
    });
    Ok(100.0 / scale as f64 * mean(&ratios).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    pub cc: f64,
    pub ergas: f64,
    pub scale: usize,
}

impl MetricsReport {
    pub const TSV_HEADER: &'static str = "psnr\tssim\tsam_deg\tcc\tergas";

    pub fn compute(pred: &Tensor, gt: &Tensor, scale: usize) -> Result<Self> {
        Ok(MetricsReport {
            psnr: metric_psnr(pred, gt)?,
            ssim: metric_ssim(pred, gt)?,
            sam_deg: metric_sam(pred, gt)?,
            cc: metric_cc(pred, gt)?,
            ergas: metric_ergas(pred, gt, scale)?,
            scale,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.psnr, self.ssim, self.sam_deg, self.cc, self.ergas].iter().all(|v| v.is_finite())
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.psnr, self.ssim, self.sam_deg, self.cc, self.ergas
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "psnr={:.6} ssim={:.6} sam_deg={:.6} cc={:.6} ergas={:.6}",
            self.psnr, self.ssim, self.sam_deg, self.cc, self.ergas
        )
    }
}

/// Clamps `pred` to `[0, 1]` and computes all five metrics against `gt`.
pub fn evaluate_all(pred: &HsiCube, gt: &HsiCube, scale: usize) -> Result<MetricsReport> {
    if (pred.height, pred.width, pred.bands) != (gt.height, gt.width, gt.bands) {
        return Err(Error::dim(
            "shape",
            format!(
                "prediction {}×{}×{} vs reference {}×{}×{}",
                pred.height, pred.width, pred.bands, gt.height, gt.width, gt.bands
            ),
        ));
    }
    let p = pred.to_tensor().map(|v| v.clamp(0.0, 1.0));
    MetricsReport::compute(&p, &gt.to_tensor(), scale)
}
