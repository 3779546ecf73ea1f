//! Manifest-driven evaluation: run a dehazer over every test sample and
//! score its output against the clean ground truth.
//!
//! The entry points differ only in where the predictor comes from:
//! [`evaluate_with`] takes any closure (useful for baselines and tests),
//! [`evaluate_manifest`] wraps a network plus parameter store, and
//! [`evaluate_checkpoint`] starts from a checkpoint file the way the CLI
//! does. All of them share the same per-sample policy: samples whose files
//! are missing, unreadable, or shaped inconsistently are recorded in the
//! report's `skipped` list and excluded from the aggregates instead of
//! failing the whole run. A manifest with no scorable samples is an error.

use std::path::Path;

use crate::dataset::Manifest;
use crate::image::ImagePlane;
use crate::io::load_image;
use crate::metrics::{psnr, ssim, EvalReport, SampleScore};
use crate::net::DidNet;
use crate::scalar::Scalar;
use crate::tensor::ParamStore;
use crate::trainer::{infer, load_checkpoint};
use crate::{Error, Result};

/// Settings for one evaluation pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Score the hazy input itself instead of a model output. This is the
    /// no-op floor any trained model has to beat.
    pub baseline_noop: bool,
    /// Round prediction and ground truth through 8-bit levels before
    /// scoring, matching pipelines that save results to PNG first. Off by
    /// default: scores are computed on the [0, 1] float images directly.
    pub quantized: bool,
}

/// Evaluates an arbitrary predictor over every sample in a manifest.
///
/// `dir` is the directory the manifest's relative file names resolve
/// against. The predictor receives the hazy input and must return an image
/// of the same shape; a predictor error aborts the run (it signals a broken
/// model rather than a broken sample), while unreadable sample files only
/// skip that sample.
pub fn evaluate_with<F, P>(
    mut predict: P,
    manifest: &Manifest,
    dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport>
where
    F: Scalar,
    P: FnMut(&ImagePlane<F>) -> Result<ImagePlane<F>>,
{
    if manifest.samples.is_empty() {
        return Err(Error::EmptyDataset {
            context: "evaluation manifest has no samples".to_string(),
        });
    }
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for entry in &manifest.samples {
        let mut skip = |id: &str, what: &str, detail: String| {
            log::warn!("skipping sample {id}: {what}: {detail}");
            skipped.push(id.to_string());
        };
        let hazy = match load_image::<F>(&dir.join(&entry.hazy_file)) {
            Ok(img) => img,
            Err(e) => {
                skip(&entry.id, "hazy input unreadable", e.to_string());
                continue;
            }
        };
        let clean = match load_image::<F>(&dir.join(&entry.clean_file)) {
            Ok(img) => img,
            Err(e) => {
                skip(&entry.id, "ground truth unreadable", e.to_string());
                continue;
            }
        };
        let prediction = if opts.baseline_noop {
            hazy.clone()
        } else {
            predict(&hazy)?
        };
        let (prediction, clean) = if opts.quantized {
            (prediction.quantized_u8(), clean.quantized_u8())
        } else {
            (prediction, clean)
        };
        let psnr_db = match psnr(&clean, &prediction) {
            Ok(v) => v,
            Err(e) => {
                skip(&entry.id, "psnr failed", e.to_string());
                continue;
            }
        };
        let ssim_value = match ssim(&clean, &prediction) {
            Ok(v) => v,
            Err(e) => {
                skip(&entry.id, "ssim failed", e.to_string());
                continue;
            }
        };
        scores.push(SampleScore {
            id: entry.id.clone(),
            psnr_db,
            ssim: ssim_value,
        });
    }
    EvalReport::from_scores(scores, skipped)
}

/// Evaluates a network with the given parameters over a manifest.
pub fn evaluate_manifest<F: Scalar>(
    net: &DidNet,
    params: &ParamStore<F>,
    manifest: &Manifest,
    dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_with(|hazy| infer(net, params, hazy), manifest, dir, opts)
}

/// Loads a checkpoint and evaluates its student weights over a manifest
/// file. Relative file names in the manifest resolve against the manifest's
/// own directory. The returned report carries a snapshot of the run
/// settings in its `config` field.
pub fn evaluate_checkpoint<F: Scalar>(
    checkpoint: &Path,
    manifest_path: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let state = load_checkpoint::<F>(checkpoint)?;
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let report = evaluate_manifest(&state.net, &state.student, &manifest, dir, opts)?;
    Ok(report.with_config(serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "manifest": manifest_path.display().to_string(),
        "iterations_trained": state.t,
        "baseline_noop": opts.baseline_noop,
        "quantized": opts.quantized,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        materialize_dataset, procedural_clean_image, synthesize_dataset, synthetic_depth,
        CleanSource, SynthOptions, MANIFEST_VERSION,
    };
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    /// Synthesizes a small dataset on disk and returns (dir, manifest).
    fn disk_dataset(n: usize, h: usize, w: usize) -> (TempDir, Manifest) {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let sources: Vec<CleanSource<f32>> = (0..n)
            .map(|i| CleanSource {
                id: format!("s{i}"),
                image: procedural_clean_image(h, w, &mut rng),
                depth: Some(synthetic_depth(h, w, &mut rng)),
            })
            .collect();
        let opts = SynthOptions {
            settings_per_image: 1,
            ..SynthOptions::default()
        };
        let samples = synthesize_dataset(&sources, &opts, &mut rng).unwrap();
        let depths: Vec<(String, Array2<f32>)> = sources
            .iter()
            .map(|s| (s.id.clone(), s.depth.clone().unwrap()))
            .collect();
        let dir = TempDir::new().unwrap();
        let manifest = materialize_dataset(&samples, &depths, 91, &opts, dir.path()).unwrap();
        (dir, manifest)
    }

    #[test]
    fn ground_truth_as_prediction_scores_infinite_psnr_and_unit_ssim() {
        let (dir, manifest) = disk_dataset(3, 24, 24);
        // Predict by reading back the clean file for the matching sample:
        // entries are visited in manifest order, so a cursor suffices.
        let mut cursor = 0usize;
        let report = evaluate_with(
            |_hazy: &ImagePlane<f32>| {
                let entry = &manifest.samples[cursor];
                cursor += 1;
                load_image::<f32>(&dir.path().join(&entry.clean_file))
            },
            &manifest,
            dir.path(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.scores.len(), 3);
        assert!(report.mean_psnr_db.is_infinite() && report.mean_psnr_db > 0.0);
        assert!((report.mean_ssim - 1.0).abs() < 1e-12);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            seed: 7,
            settings_per_image: 1,
            per_channel_atmosphere: false,
            samples: Vec::new(),
        };
        let err = evaluate_with(
            |h: &ImagePlane<f32>| Ok(h.clone()),
            &manifest,
            Path::new("."),
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyDataset { .. }));
    }

    #[test]
    fn unreadable_sample_is_flagged_and_excluded() {
        let (dir, manifest) = disk_dataset(3, 24, 24);
        let victim = &manifest.samples[1];
        std::fs::remove_file(dir.path().join(&victim.hazy_file)).unwrap();
        let report = evaluate_with(
            |h: &ImagePlane<f32>| Ok(h.clone()),
            &manifest,
            dir.path(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, vec![victim.id.clone()]);
        assert_eq!(report.scores.len(), 2);
        assert!(report.scores.iter().all(|s| s.id != victim.id));
        assert!(report.mean_psnr_db.is_finite());
    }

    #[test]
    fn every_sample_unreadable_is_an_error_not_an_empty_report() {
        let (dir, manifest) = disk_dataset(2, 24, 24);
        for entry in &manifest.samples {
            std::fs::remove_file(dir.path().join(&entry.hazy_file)).unwrap();
        }
        let err = evaluate_with(
            |h: &ImagePlane<f32>| Ok(h.clone()),
            &manifest,
            dir.path(),
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyDataset { .. }));
    }

    #[test]
    fn baseline_noop_scores_the_hazy_input_itself() {
        let (dir, manifest) = disk_dataset(3, 24, 24);
        let opts = EvalOptions {
            baseline_noop: true,
            ..EvalOptions::default()
        };
        // The predictor must never be called in baseline mode.
        let report = evaluate_with(
            |_h: &ImagePlane<f32>| panic!("predictor called in baseline mode"),
            &manifest,
            dir.path(),
            &opts,
        )
        .unwrap();
        // Haze degrades the image, so the no-op floor is finite and low.
        assert!(report.mean_psnr_db.is_finite());
        assert!(report.mean_ssim < 1.0);
    }

    #[test]
    fn quantized_scoring_runs_and_keeps_perfect_pairs_perfect() {
        let (dir, manifest) = disk_dataset(2, 24, 24);
        let mut cursor = 0usize;
        let opts = EvalOptions {
            baseline_noop: false,
            quantized: true,
        };
        let report = evaluate_with(
            |_hazy: &ImagePlane<f32>| {
                let entry = &manifest.samples[cursor];
                cursor += 1;
                load_image::<f32>(&dir.path().join(&entry.clean_file))
            },
            &manifest,
            dir.path(),
            &opts,
        )
        .unwrap();
        // Identical images quantize identically: still a perfect score.
        assert!(report.mean_psnr_db.is_infinite());
        assert!((report.mean_ssim - 1.0).abs() < 1e-12);

        // And the quantized baseline differs from the float baseline, which
        // is the whole point of the flag.
        let base = EvalOptions {
            baseline_noop: true,
            quantized: false,
        };
        let base_q = EvalOptions {
            baseline_noop: true,
            quantized: true,
        };
        let id = |h: &ImagePlane<f32>| Ok(h.clone());
        let float_report = evaluate_with(id, &manifest, dir.path(), &base).unwrap();
        let quant_report = evaluate_with(id, &manifest, dir.path(), &base_q).unwrap();
        assert!(float_report.mean_psnr_db.is_finite());
        assert!(quant_report.mean_psnr_db.is_finite());
    }

    #[test]
    fn shape_mismatched_ground_truth_is_skipped_not_fatal() {
        let (dir, manifest) = disk_dataset(2, 24, 24);
        // Overwrite one clean file with a differently sized image.
        let victim = &manifest.samples[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wrong: ImagePlane<f32> = procedural_clean_image(16, 16, &mut rng);
        crate::io::save_image(&dir.path().join(&victim.clean_file), &wrong).unwrap();
        let report = evaluate_with(
            |h: &ImagePlane<f32>| Ok(h.clone()),
            &manifest,
            dir.path(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, vec![victim.id.clone()]);
        assert_eq!(report.scores.len(), 1);
    }
}
