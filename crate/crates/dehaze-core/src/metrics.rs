//! Image-quality metrics and dataset-level evaluation reports.
//!
//! All metric math runs in f64 regardless of the pipeline's scalar type, so
//! scores are comparable across f32 and f64 runs.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;

/// Peak signal-to-noise ratio in dB over the [0, 1] dynamic range.
/// Identical inputs yield `f64::INFINITY`.
pub fn psnr<F: Scalar>(reference: &ImagePlane<F>, candidate: &ImagePlane<F>) -> Result<f64> {
    check_pair(reference, candidate, "psnr")?;
    let mut acc = 0.0f64;
    for (&a, &b) in reference.data().iter().zip(candidate.data().iter()) {
        let d = Scalar::to_f64(a) - Scalar::to_f64(b);
        acc += d * d;
    }
    let mse = acc / reference.data().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Array1<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = Array1::from_shape_fn(SSIM_WINDOW, |i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// Valid-mode separable filter: output is (h - win + 1, w - win + 1).
fn filter_valid(x: &Array2<f64>, k: &Array1<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let win = k.len();
    let mut rows = Array2::<f64>::zeros((h, w - win + 1));
    for y in 0..h {
        for ox in 0..w - win + 1 {
            let mut acc = 0.0;
            for i in 0..win {
                acc += x[[y, ox + i]] * k[i];
            }
            rows[[y, ox]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - win + 1, w - win + 1));
    for oy in 0..h - win + 1 {
        for x2 in 0..w - win + 1 {
            let mut acc = 0.0;
            for i in 0..win {
                acc += rows[[oy + i, x2]] * k[i];
            }
            out[[oy, x2]] = acc;
        }
    }
    out
}

fn ssim_channel(a: &Array2<f64>, b: &Array2<f64>, k: &Array1<f64>) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid(&(a * a), k);
    let bb = filter_valid(&(b * b), k);
    let ab = filter_valid(&(a * b), k);
    let mut total = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter())
        .zip(bb.iter())
        .zip(ab.iter())
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) in valid
/// mode, averaged over channels. Inputs must be at least the window size.
pub fn ssim<F: Scalar>(reference: &ImagePlane<F>, candidate: &ImagePlane<F>) -> Result<f64> {
    check_pair(reference, candidate, "ssim")?;
    if reference.height() < SSIM_WINDOW || reference.width() < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!(
                "image {}x{} smaller than the {}x{} window",
                reference.height(),
                reference.width(),
                SSIM_WINDOW,
                SSIM_WINDOW
            ),
        ));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..reference.channels() {
        let a = reference
            .data()
            .index_axis(ndarray::Axis(2), c)
            .mapv(Scalar::to_f64);
        let b = candidate
            .data()
            .index_axis(ndarray::Axis(2), c)
            .mapv(Scalar::to_f64);
        total += ssim_channel(&a, &b, &k);
    }
    Ok(total / reference.channels() as f64)
}

fn check_pair<F: Scalar>(
    a: &ImagePlane<F>,
    b: &ImagePlane<F>,
    what: &str,
) -> Result<()> {
    if a.colorspace() != b.colorspace()
        || a.height() != b.height()
        || a.width() != b.width()
    {
        return Err(Error::shape(
            what,
            &[a.height(), a.width(), a.channels()],
            &[b.height(), b.width(), b.channels()],
        ));
    }
    Ok(())
}

/// Per-sample scores plus aggregates for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scores: Vec<SampleScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// Sample ids skipped because their files were unreadable or mismatched.
    pub skipped: Vec<String>,
    /// Free-form snapshot of the settings that produced this report
    /// (checkpoint path, baseline/quantized flags, ...). Carried into the
    /// JSON output so a report remains self-describing.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct SampleScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl EvalReport {
    /// Aggregates scores; the means are plain arithmetic means, so one
    /// perfect (infinite-PSNR) sample makes the aggregate infinite too.
    pub fn from_scores(scores: Vec<SampleScore>, skipped: Vec<String>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyDataset {
                context: "evaluation produced no scores".to_string(),
            });
        }
        let n = scores.len() as f64;
        let mean_psnr_db = scores.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(EvalReport {
            scores,
            mean_psnr_db,
            mean_ssim,
            skipped,
            config: None,
        })
    }

    /// Attaches a settings snapshot that `to_json` will include.
    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        let render = |v: f64| -> serde_json::Value {
            if v.is_infinite() {
                serde_json::Value::String(if v > 0.0 { "inf" } else { "-inf" }.to_string())
            } else {
                serde_json::json!(v)
            }
        };
        let mut out = serde_json::json!({
            "samples": self.scores.iter().map(|s| serde_json::json!({
                "id": s.id,
                "psnr_db": render(s.psnr_db),
                "ssim": render(s.ssim),
            })).collect::<Vec<_>>(),
            "mean_psnr_db": render(self.mean_psnr_db),
            "mean_ssim": render(self.mean_ssim),
            "skipped": self.skipped,
        });
        if let Some(config) = &self.config {
            out["config"] = config.clone();
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let render = |v: f64| {
            if v.is_infinite() {
                (if v > 0.0 { "inf" } else { "-inf" }).to_string()
            } else {
                format!("{v:.6}")
            }
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let try_io = |e: std::io::Error| Error::io(path, e);
        writeln!(w, "id,psnr_db,ssim").map_err(try_io)?;
        for s in &self.scores {
            writeln!(w, "{},{},{}", s.id, render(s.psnr_db), render(s.ssim)).map_err(try_io)?;
        }
        writeln!(w, "mean,{},{}", render(self.mean_psnr_db), render(self.mean_ssim))
            .map_err(try_io)?;
        w.flush().map_err(try_io)
    }
}
