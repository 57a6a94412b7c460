//! PSNR and SSIM on 8-bit RGB images.
//!
//! MSE and PSNR average over all three channels; SSIM is computed per
//! channel and then averaged.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::data::ImageU8;
use crate::{Error, Result};

/// Peak value of an 8-bit channel.
pub const PEAK: f64 = 255.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Stabilizing constants of the three SSIM terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        let c1 = (SSIM_K1 * PEAK).powi(2);
        let c2 = (SSIM_K2 * PEAK).powi(2);
        SsimConstants { c1, c2, c3: c2 / 2.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsimMode {
    /// One set of statistics per channel plane.
    Global,
    /// 11x11 Gaussian windows (sigma 1.5), valid positions only, averaged.
    #[default]
    Windowed,
}

impl fmt::Display for SsimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsimMode::Global => "global",
            SsimMode::Windowed => "windowed",
        })
    }
}

/// PSNR in dB; identical images have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Psnr {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (PEAK * PEAK / mse).log10())
        }
    }

    /// `f64::INFINITY` for identical images.
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn check_same(op: &'static str, x: &ImageU8, y: &ImageU8) -> Result<()> {
    if x.same_size(y) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                x.width(),
                x.height(),
                y.width(),
                y.height()
            ),
        ))
    }
}

pub fn mse(x: &ImageU8, y: &ImageU8) -> Result<f64> {
    check_same("mse", x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.data().len() as f64)
}

pub fn psnr(x: &ImageU8, y: &ImageU8) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(x, y)?))
}

/// Normalized 2-D Gaussian window, row-major `size x size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `l * c * s` from weighted statistics of two equally sized samples.
fn ssim_stats(xs: &[f64], ys: &[f64], weights: Option<&[f64]>, k: &SsimConstants) -> f64 {
    let n = xs.len() as f64;
    let wt = |i: usize| weights.map_or(1.0 / n, |w| w[i]);
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..xs.len() {
        mx += wt(i) * xs[i];
        my += wt(i) * ys[i];
    }
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        vx += wt(i) * dx * dx;
        vy += wt(i) * dy * dy;
        cov += wt(i) * dx * dy;
    }
    let sxy = (vx * vy).sqrt();
    let l = (2.0 * mx * my + k.c1) / (mx * mx + my * my + k.c1);
    let c = (2.0 * sxy + k.c2) / (vx + vy + k.c2);
    let s = (cov + k.c3) / (sxy + k.c3);
    l * c * s
}

fn plane(img: &ImageU8, ch: usize) -> Vec<f64> {
    img.data().chunks_exact(3).map(|p| p[ch] as f64).collect()
}

pub fn ssim(x: &ImageU8, y: &ImageU8, mode: SsimMode) -> Result<f64> {
    check_same("ssim", x, y)?;
    let k = SsimConstants::default();
    let (w, h) = (x.width(), x.height());
    if mode == SsimMode::Windowed && (w < SSIM_WINDOW || h < SSIM_WINDOW) {
        return Err(Error::InvalidArgument(format!(
            "windowed SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..3 {
        let (px, py) = (plane(x, ch), plane(y, ch));
        total += match mode {
            SsimMode::Global => ssim_stats(&px, &py, None, &k),
            SsimMode::Windowed => {
                let n = SSIM_WINDOW;
                let mut bx = vec![0.0; n * n];
                let mut by = vec![0.0; n * n];
                let mut acc = 0.0;
                let mut count = 0usize;
                for y0 in 0..=h - n {
                    for x0 in 0..=w - n {
                        for j in 0..n {
                            let row = (y0 + j) * w + x0;
                            bx[j * n..(j + 1) * n].copy_from_slice(&px[row..row + n]);
                            by[j * n..(j + 1) * n].copy_from_slice(&py[row..row + n]);
                        }
                        acc += ssim_stats(&bx, &by, Some(&window), &k);
                        count += 1;
                    }
                }
                acc / count as f64
            }
        };
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Per-image scores plus means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: SsimMode,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Score `(id, prediction, ground truth)` triples in parallel.
    pub fn compute(pairs: &[(String, ImageU8, ImageU8)], mode: SsimMode) -> Result<EvalReport> {
        if pairs.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let rows = pairs
            .par_iter()
            .map(|(id, pred, gt)| {
                Ok(EvalRow {
                    id: id.clone(),
                    psnr: psnr(pred, gt)?,
                    ssim: ssim(pred, gt, mode)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport { mode, rows })
    }

    /// Infinite if any image is reproduced exactly.
    pub fn mean_psnr(&self) -> Psnr {
        if self.rows.iter().any(|r| r.psnr.is_infinite()) {
            return Psnr::Infinite;
        }
        let sum: f64 = self.rows.iter().map(|r| r.psnr.value()).sum();
        Psnr::Finite(sum / self.rows.len() as f64)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut out = format!("ssim mode: {}\n", self.mode);
        out += &format!("{:<width$}  {:>12}  {:>8}\n", "image", "psnr_db", "ssim");
        for r in &self.rows {
            out += &format!("{:<width$}  {:>12}  {:>8.6}\n", r.id, r.psnr.to_string(), r.ssim);
        }
        out += &format!(
            "{:<width$}  {:>12}  {:>8.6}\n",
            "mean",
            self.mean_psnr().to_string(),
            self.mean_ssim()
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr_db,ssim\n");
        for r in &self.rows {
            out += &format!("{},{},{:.6}\n", r.id, r.psnr, r.ssim);
        }
        out += &format!("mean,{},{:.6}\n", self.mean_psnr(), self.mean_ssim());
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
