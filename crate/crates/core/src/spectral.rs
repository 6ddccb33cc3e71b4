//! 2-D discrete Fourier transforms over spatial planes and depthwise
//! filtering of the resulting complex features.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k,l] = Σ x[m,n]·exp(−2πi(km/H + ln/W))`, and keeps only the
//! Hermitian-reduced half `l < ⌊W/2⌋+1`. The inverse scales by `1/(H·W)` and
//! reconstructs the missing half by conjugate symmetry; on the self-mirrored
//! columns (DC and, for even `W`, Nyquist) the Hermitian part of the input is
//! used, so the inverse is always real.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Tape, Tensor, Var};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Width of the Hermitian-reduced spectrum of a real signal of width `w`.
pub fn reduced_width(w: usize) -> usize {
    w / 2 + 1
}

/// In-place full 2-D complex transform of an `h×w` row-major buffer.
fn fft2_full(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row = plan(w, inverse);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = plan(h, inverse);
    let mut tmp = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            tmp[r] = buf[r * w + c];
        }
        col.process(&mut tmp);
        for r in 0..h {
            buf[r * w + c] = tmp[r];
        }
    }
}

/// Forward transform of one real plane; returns the reduced half.
fn rfft2_plane(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let wf = reduced_width(w);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_full(&mut buf, h, w, false);
    let mut re = Vec::with_capacity(h * wf);
    let mut im = Vec::with_capacity(h * wf);
    for r in 0..h {
        for c in 0..wf {
            let z = buf[r * w + c];
            re.push(z.re);
            im.push(z.im);
        }
    }
    (re, im)
}

/// Normalized inverse of one reduced plane; also returns the largest
/// imaginary magnitude of the full inverse before it is discarded.
fn irfft2_plane(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, f64) {
    let wf = reduced_width(w);
    let at = |k: usize, l: usize| Complex64::new(re[k * wf + l], im[k * wf + l]);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        let mk = (h - k) % h;
        for l in 0..w {
            buf[k * w + l] = if l < wf {
                let mirrored = (w - l) % w;
                if mirrored == l {
                    (at(k, l) + at(mk, l).conj()) * 0.5
                } else {
                    at(k, l)
                }
            } else {
                at(mk, w - l).conj()
            };
        }
    }
    fft2_full(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let residue = buf.iter().map(|z| (z.im * norm).abs()).fold(0.0, f64::max);
    (buf.iter().map(|z| z.re * norm).collect(), residue)
}

/// Adjoint of [`rfft2_plane`]: `Re Σ_{k, l<wf} G[k,l]·exp(+2πi(km/H + ln/W))`.
fn rfft2_adjoint_plane(gre: &[f64], gim: &[f64], h: usize, w: usize) -> Vec<f64> {
    let wf = reduced_width(w);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..wf {
            buf[k * w + l] = Complex64::new(gre[k * wf + l], gim[k * wf + l]);
        }
    }
    fft2_full(&mut buf, h, w, true);
    buf.iter().map(|z| z.re).collect()
}

/// Adjoint of [`irfft2_plane`]: `(w_l / HW)·rfft2(ḡ)` with `w_l = 1` on
/// self-mirrored columns and 2 elsewhere.
fn irfft2_adjoint_plane(g: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let wf = reduced_width(w);
    let (mut re, mut im) = rfft2_plane(g, h, w);
    let norm = 1.0 / (h * w) as f64;
    for k in 0..h {
        for l in 0..wf {
            let weight = if (w - l) % w == l { norm } else { 2.0 * norm };
            re[k * wf + l] *= weight;
            im[k * wf + l] *= weight;
        }
    }
    (re, im)
}

/// Hermitian-reduced spectrum of the spatial planes of an `N×C×H×W` tensor.
///
/// `re` and `im` are `N×C×H×(⌊W/2⌋+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub re: Tensor,
    pub im: Tensor,
    /// Spatial width of the source, needed to undo the reduction.
    pub width: usize,
}

impl ComplexGrid {
    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    fn check(&self) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, wf) = self.re.dims4()?;
        if self.im.shape() != self.re.shape() {
            return Err(Error::dim("imag", "real and imaginary planes differ in shape"));
        }
        if reduced_width(self.width) != wf {
            return Err(Error::dim(
                "width",
                format!("original width {} does not reduce to {wf}", self.width),
            ));
        }
        Ok((n, c, h, wf))
    }
}

fn per_plane<T: Send>(planes: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    par::map_range(planes, f)
}

fn fft2_raw(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::dim("spatial", "empty plane"));
    }
    let wf = reduced_width(w);
    let planes = per_plane(n * c, |p| rfft2_plane(&x.data()[p * h * w..][..h * w], h, w));
    let (mut re, mut im) = (Vec::with_capacity(n * c * h * wf), Vec::with_capacity(n * c * h * wf));
    for (r, i) in planes {
        re.extend(r);
        im.extend(i);
    }
    Ok((Tensor::new(&[n, c, h, wf], re)?, Tensor::new(&[n, c, h, wf], im)?))
}

fn ifft2_raw(re: &Tensor, im: &Tensor, w: usize) -> Result<(Tensor, f64)> {
    let (n, c, h, wf) = re.dims4()?;
    let planes = per_plane(n * c, |p| {
        let s = p * h * wf;
        irfft2_plane(&re.data()[s..s + h * wf], &im.data()[s..s + h * wf], h, w)
    });
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut residue: f64 = 0.0;
    for (plane, r) in planes {
        out.extend(plane);
        residue = residue.max(r);
    }
    Ok((Tensor::new(&[n, c, h, w], out)?, residue))
}

/// Unnormalized forward transform of every spatial plane of `x`.
pub fn fft2(x: &Tensor) -> Result<ComplexGrid> {
    let (re, im) = fft2_raw(x)?;
    Ok(ComplexGrid { re, im, width: x.shape()[3] })
}

/// Inverse transform back to an `N×C×H×W` real tensor.
pub fn ifft2(grid: &ComplexGrid) -> Result<Tensor> {
    Ok(ifft2_with_residue(grid)?.0)
}

/// As [`ifft2`], also reporting the largest discarded imaginary magnitude.
pub fn ifft2_with_residue(grid: &ComplexGrid) -> Result<(Tensor, f64)> {
    grid.check()?;
    ifft2_raw(&grid.re, &grid.im, grid.width)
}

fn check_freq_kernel(kernel: &Tensor, channels: usize) -> Result<usize> {
    let (kc, one, k, k2) = kernel.dims4()?;
    if k % 2 == 0 || k != k2 {
        return Err(Error::Config(format!("frequency kernel must be odd and square, got {k}×{k2}")));
    }
    if kc != channels || one != 1 {
        return Err(Error::dim(
            "kernel",
            format!("expected {channels}×1×{k}×{k}, got {:?}", kernel.shape()),
        ));
    }
    Ok(k)
}

/// Depthwise convolution of the reduced frequency grid with a real kernel
/// shared by the real and imaginary planes; zero padding keeps the extents.
pub fn complex_depthwise_conv(grid: &ComplexGrid, kernel: &Tensor) -> Result<ComplexGrid> {
    let tape = Tape::new();
    let g = CVar {
        re: tape.constant(grid.re.clone()),
        im: tape.constant(grid.im.clone()),
        width: grid.width,
    };
    let k = tape.constant(kernel.clone());
    let out = tape.complex_depthwise_conv(g, k)?;
    Ok(ComplexGrid {
        re: (*out.re.value()).clone(),
        im: (*out.im.value()).clone(),
        width: grid.width,
    })
}

/// A [`ComplexGrid`] recorded on a tape as two real variables.
#[derive(Clone, Copy, Debug)]
pub struct CVar<'a> {
    pub re: Var<'a>,
    pub im: Var<'a>,
    pub width: usize,
}

impl Tape {
    /// Differentiable [`fft2`].
    pub fn fft2<'a>(&'a self, x: Var<'a>) -> Result<CVar<'a>> {
        let xv = x.value();
        let (_, _, h, w) = xv.dims4()?;
        let (re, im) = fft2_raw(&xv)?;
        let adjoint = move |g: &Tensor, real: bool| {
            let (n, c, _, wf) = g.dims4().unwrap();
            let zeros = vec![0.0; h * wf];
            let planes = per_plane(n * c, |p| {
                let gp = &g.data()[p * h * wf..][..h * wf];
                if real {
                    rfft2_adjoint_plane(gp, &zeros, h, w)
                } else {
                    rfft2_adjoint_plane(&zeros, gp, h, w)
                }
            });
            Tensor::new(&[n, c, h, w], planes.concat()).unwrap()
        };
        let re = self.push(re, &[x], Box::new(move |g, _, _, _| vec![Some(adjoint(g, true))]));
        let im = self.push(im, &[x], Box::new(move |g, _, _, _| vec![Some(adjoint(g, false))]));
        Ok(CVar { re, im, width: w })
    }

    /// Differentiable [`ifft2`].
    pub fn ifft2<'a>(&'a self, grid: CVar<'a>) -> Result<Var<'a>> {
        let (rv, iv) = (grid.re.value(), grid.im.value());
        let w = grid.width;
        let (_, _, h, wf) = rv.dims4()?;
        if iv.shape() != rv.shape() || reduced_width(w) != wf {
            return Err(Error::dim("width", "inconsistent complex grid"));
        }
        let (out, _) = ifft2_raw(&rv, &iv, w)?;
        Ok(self.push(
            out,
            &[grid.re, grid.im],
            Box::new(move |g, _, _, _| {
                let (n, c, _, _) = g.dims4().unwrap();
                let planes = per_plane(n * c, |p| irfft2_adjoint_plane(&g.data()[p * h * w..][..h * w], h, w));
                let (mut re, mut im) = (Vec::new(), Vec::new());
                for (r, i) in planes {
                    re.extend(r);
                    im.extend(i);
                }
                vec![
                    Tensor::new(&[n, c, h, wf], re).ok(),
                    Tensor::new(&[n, c, h, wf], im).ok(),
                ]
            }),
        ))
    }

    /// Differentiable [`complex_depthwise_conv`]: the same real kernel filters
    /// both planes, so its gradient collects contributions from each.
    pub fn complex_depthwise_conv<'a>(&'a self, grid: CVar<'a>, kernel: Var<'a>) -> Result<CVar<'a>> {
        let c = grid.re.value().dims4()?.1;
        let k = check_freq_kernel(&kernel.value(), c)?;
        let pad = (k - 1) / 2;
        let re = self.conv2d(grid.re, kernel, None, c, pad)?;
        let im = self.conv2d(grid.im, kernel, None, c, pad)?;
        Ok(CVar { re, im, width: grid.width })
    }

    /// Channels `[start, start+len)` of both planes.
    pub fn slice_grid<'a>(&'a self, grid: CVar<'a>, start: usize, len: usize) -> Result<CVar<'a>> {
        Ok(CVar {
            re: self.slice_channels(grid.re, start, len)?,
            im: self.slice_channels(grid.im, start, len)?,
            width: grid.width,
        })
    }

    /// Channel concatenation of grids sharing a source width.
    pub fn concat_grids<'a>(&'a self, parts: &[CVar<'a>]) -> Result<CVar<'a>> {
        let width = parts.first().ok_or_else(|| Error::dim("channels", "nothing to concatenate"))?.width;
        if parts.iter().any(|p| p.width != width) {
            return Err(Error::dim("width", "grids from different source widths"));
        }
        let re: Vec<_> = parts.iter().map(|p| p.re).collect();
        let im: Vec<_> = parts.iter().map(|p| p.im).collect();
        Ok(CVar {
            re: self.concat_channels(&re)?,
            im: self.concat_channels(&im)?,
            width,
        })
    }
}
