//! Dataset synthesis and sampling: hazy/clean pair generation, manifests,
//! train/val splitting, random crops and the mixed labeled+unlabeled batches
//! the semi-supervised loop consumes.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Colorspace, ImagePlane, ScatteringParams, TransmissionMap};
use crate::io;
use crate::physics::{compose_hazy, transmission_from_depth};
use crate::scalar::Scalar;
use crate::tensor::resize_matrix;

/// A synthesized (or loaded) supervised training sample.
#[derive(Debug, Clone)]
pub struct LabeledSample<F: Scalar> {
    pub id: String,
    /// Identifier of the clean image this sample was synthesized from;
    /// the train/val split groups by this so no scene leaks across.
    pub clean_source: String,
    pub hazy: ImagePlane<F>,
    pub clean: ImagePlane<F>,
    pub transmission: TransmissionMap<F>,
    pub params: ScatteringParams,
}

impl<F: Scalar> LabeledSample<F> {
    /// The ground-truth atmospheric-light plane, rebuilt exactly from the
    /// stored parameters rather than stored as a (quantized) image.
    pub fn atmosphere(&self) -> ImagePlane<F> {
        self.params
            .atmosphere_plane(self.hazy.height(), self.hazy.width(), self.hazy.colorspace())
            .expect("params validated at construction")
    }

    pub fn crop(&self, spec: &CropSpec) -> LabeledSample<F> {
        LabeledSample {
            id: self.id.clone(),
            clean_source: self.clean_source.clone(),
            hazy: spec.apply_to_image(&self.hazy),
            clean: spec.apply_to_image(&self.clean),
            transmission: TransmissionMap::predicted(
                spec.apply_to_map(self.transmission.data()),
            )
            .expect("crop of a valid map stays valid"),
            params: self.params,
        }
    }
}

/// A real hazy image without ground truth.
#[derive(Debug, Clone)]
pub struct UnlabeledSample<F: Scalar> {
    pub id: String,
    pub hazy: ImagePlane<F>,
}

impl<F: Scalar> UnlabeledSample<F> {
    pub fn crop(&self, spec: &CropSpec) -> UnlabeledSample<F> {
        UnlabeledSample {
            id: self.id.clone(),
            hazy: spec.apply_to_image(&self.hazy),
        }
    }
}

/// One clean input to the synthesizer. Depth is optional; a smooth random
/// field is generated when absent.
#[derive(Debug, Clone)]
pub struct CleanSource<F: Scalar> {
    pub id: String,
    pub image: ImagePlane<F>,
    pub depth: Option<Array2<F>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Number of haze settings drawn per clean image.
    pub settings_per_image: usize,
    /// Draw atmospheric light per channel instead of one shared scalar.
    pub per_channel_atmosphere: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            settings_per_image: 4,
            per_channel_atmosphere: false,
        }
    }
}

/// Smooth random depth field in [0, 1]: a coarse uniform grid upsampled
/// bilinearly, plus a random linear ramp, min-max normalized.
pub fn synthetic_depth<F: Scalar, R: Rng>(h: usize, w: usize, rng: &mut R) -> Array2<F> {
    const GRID: usize = 4;
    let grid = Array2::<f64>::from_shape_fn((GRID, GRID), |_| rng.gen_range(0.0..1.0));
    let rh = resize_matrix::<f64>(GRID, h);
    let rw = resize_matrix::<f64>(GRID, w);
    let mut field = rh.dot(&grid).dot(&rw.t());

    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp_weight = rng.gen_range(0.2..0.8);
    let (dy, dx) = (theta.sin(), theta.cos());
    let diag = ((h * h + w * w) as f64).sqrt();
    for ((y, x), v) in field.indexed_iter_mut() {
        let proj = (y as f64 * dy + x as f64 * dx) / diag;
        *v += ramp_weight * proj;
    }

    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    field.mapv(|v| F::from_f64((v - min) / span))
}

/// Procedural clean test scene: a two-color gradient background with a few
/// soft-edged rectangles and disks, kept away from full black/white so haze
/// compositing never saturates.
pub fn procedural_clean_image<F: Scalar, R: Rng>(
    h: usize,
    w: usize,
    rng: &mut R,
) -> ImagePlane<F> {
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut img = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + (y as f64 * dy + x as f64 * dx) / diag;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[[y, x, c]] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let n_shapes = rng.gen_range(3..=6);
    for _ in 0..n_shapes {
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f64;
        let is_disk = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                // signed distance to the shape edge, >0 inside
                let (ddy, ddx) = (y as f64 - cy, x as f64 - cx);
                let sd = if is_disk {
                    r - (ddy * ddy + ddx * ddx).sqrt()
                } else {
                    r - ddy.abs().max(ddx.abs())
                };
                let alpha = (sd + 1.0).clamp(0.0, 1.0) * 0.9;
                if alpha > 0.0 {
                    for c in 0..3 {
                        img[[y, x, c]] = img[[y, x, c]] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }
    let data = img.mapv(|v| F::from_f64(0.03 + v.clamp(0.0, 1.0) * 0.94));
    ImagePlane::new(data, Colorspace::Rgb).expect("values constructed in range")
}

/// Synthesizes `settings_per_image` hazy variants of every clean source.
///
/// Sampling order is fixed (per image: depth if absent, then per setting:
/// atmosphere, beta), so one seed reproduces the dataset bit for bit.
pub fn synthesize_dataset<F: Scalar, R: Rng>(
    sources: &[CleanSource<F>],
    opts: &SynthOptions,
    rng: &mut R,
) -> Result<Vec<LabeledSample<F>>> {
    if sources.is_empty() {
        return Err(Error::EmptyDataset {
            context: "no clean images to synthesize from".to_string(),
        });
    }
    if opts.settings_per_image == 0 {
        return Err(Error::Config("settings_per_image must be at least 1".into()));
    }
    let (alo, ahi) = ScatteringParams::ATMOSPHERE_RANGE;
    let (blo, bhi) = ScatteringParams::BETA_RANGE;
    let mut out = Vec::with_capacity(sources.len() * opts.settings_per_image);
    for src in sources {
        let (h, w) = (src.image.height(), src.image.width());
        let depth = match &src.depth {
            Some(d) => {
                if d.dim() != (h, w) {
                    return Err(Error::shape(
                        format!("depth for {}", src.id),
                        &[h, w],
                        &[d.dim().0, d.dim().1],
                    ));
                }
                d.clone()
            }
            None => synthetic_depth(h, w, rng),
        };
        for k in 0..opts.settings_per_image {
            let atmosphere = if opts.per_channel_atmosphere {
                [
                    rng.gen_range(alo..=ahi),
                    rng.gen_range(alo..=ahi),
                    rng.gen_range(alo..=ahi),
                ]
            } else {
                let a = rng.gen_range(alo..=ahi);
                [a, a, a]
            };
            let beta = rng.gen_range(blo..=bhi);
            let params = ScatteringParams::new(atmosphere, beta)?;
            let transmission = transmission_from_depth(&depth, beta)?;
            let hazy = compose_hazy(&src.image, &transmission, &params)?;
            out.push(LabeledSample {
                id: format!("{}.s{}", src.id, k),
                clean_source: src.id.clone(),
                hazy,
                clean: src.image.clone(),
                transmission,
                params,
            });
        }
    }
    Ok(out)
}

pub const MANIFEST_VERSION: u32 = 1;

/// On-disk record of a synthesized dataset: file names are relative to the
/// manifest's directory, and the scattering parameters are stored exactly so
/// the atmospheric-light plane never passes through 8-bit quantization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub settings_per_image: usize,
    pub per_channel_atmosphere: bool,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_source: String,
    pub hazy_file: String,
    pub clean_file: String,
    pub transmission_file: String,
    pub depth_file: String,
    pub atmosphere: [f64; 3],
    pub beta: f64,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

/// Writes samples (plus their depth fields) into `dir` and returns the manifest.
///
/// Per sample: 8-bit hazy and clean PNGs, a 16-bit transmission PNG, and the
/// exact depth field in the raw-float container.
pub fn materialize_dataset<F: Scalar>(
    samples: &[LabeledSample<F>],
    depths: &[(String, Array2<F>)],
    seed: u64,
    opts: &SynthOptions,
    dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let hazy_file = format!("{}.hazy.png", s.id);
        let clean_file = format!("{}.clean.png", s.id);
        let transmission_file = format!("{}.trans.png", s.id);
        let depth_file = format!("{}.depth.dpt", s.clean_source);
        io::save_image(&dir.join(&hazy_file), &s.hazy)?;
        io::save_image(&dir.join(&clean_file), &s.clean)?;
        io::save_map_png16(&dir.join(&transmission_file), s.transmission.data())?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            clean_source: s.clean_source.clone(),
            hazy_file,
            clean_file,
            transmission_file,
            depth_file,
            atmosphere: s.params.atmosphere,
            beta: s.params.beta,
        });
    }
    for (source_id, depth) in depths {
        io::save_depth(&dir.join(format!("{source_id}.depth.dpt")), depth)?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        settings_per_image: opts.settings_per_image,
        per_channel_atmosphere: opts.per_channel_atmosphere,
        samples: entries,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads every sample listed in a manifest back into memory.
///
/// Transmission comes back through 16-bit quantization, so its values are
/// validated with the loose [0, 1] bounds.
pub fn load_labeled<F: Scalar>(manifest: &Manifest, dir: &Path) -> Result<Vec<LabeledSample<F>>> {
    let mut out = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let hazy = io::load_image(&dir.join(&e.hazy_file))?;
        let clean = io::load_image(&dir.join(&e.clean_file))?;
        let tmap = io::load_map_png16::<F>(&dir.join(&e.transmission_file))?;
        let transmission = TransmissionMap::predicted(tmap)?;
        let params = ScatteringParams::new(e.atmosphere, e.beta)?;
        out.push(LabeledSample {
            id: e.id.clone(),
            clean_source: e.clean_source.clone(),
            hazy,
            clean,
            transmission,
            params,
        });
    }
    Ok(out)
}

/// Recomposes every sample from its stored clean image, transmission and
/// parameters and reports the worst absolute deviation from the stored hazy
/// image. Deviations above `tolerance` (which must cover 8- and 16-bit
/// quantization) are an error.
pub fn verify_manifest<F: Scalar>(
    manifest: &Manifest,
    dir: &Path,
    tolerance: f64,
) -> Result<f64> {
    let samples = load_labeled::<F>(manifest, dir)?;
    let mut worst = 0.0f64;
    for s in &samples {
        let recomposed = compose_hazy(&s.clean, &s.transmission, &s.params)?;
        for (&a, &b) in recomposed.data().iter().zip(s.hazy.data().iter()) {
            let d = (Scalar::to_f64(a) - Scalar::to_f64(b)).abs();
            worst = worst.max(d);
        }
    }
    if worst > tolerance {
        return Err(Error::invalid(
            "manifest verification",
            format!("recomposition deviates by {worst:.6}, tolerance {tolerance:.6}"),
        ));
    }
    Ok(worst)
}

/// Splits manifest entries into train and validation parts, grouped by clean
/// source so no clean image contributes to both sides.
pub fn split_by_clean_source(
    manifest: &Manifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} outside [0, 1]"
        )));
    }
    let mut sources: Vec<String> = Vec::new();
    for e in &manifest.samples {
        if !sources.contains(&e.clean_source) {
            sources.push(e.clean_source.clone());
        }
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    sources.shuffle(&mut rng);
    let n_val = ((sources.len() as f64) * val_fraction).round() as usize;
    let val_sources: std::collections::HashSet<_> =
        sources.iter().take(n_val).cloned().collect();
    let (mut train, mut val) = (manifest.clone(), manifest.clone());
    train.samples.retain(|e| !val_sources.contains(&e.clean_source));
    val.samples.retain(|e| val_sources.contains(&e.clean_source));
    Ok((train, val))
}

/// One crop window plus flip decision, shared by every plane of a sample so
/// hazy, clean and transmission stay aligned.
#[derive(Debug, Clone, Copy)]
pub struct CropSpec {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropSpec {
    pub fn sample<R: Rng>(
        id: &str,
        h: usize,
        w: usize,
        size: usize,
        flip_enabled: bool,
        rng: &mut R,
    ) -> Result<CropSpec> {
        if size > h || size > w {
            return Err(Error::CropTooLarge {
                id: id.to_string(),
                h,
                w,
                crop: size,
            });
        }
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        let flip = flip_enabled && rng.gen_bool(0.5);
        Ok(CropSpec { y0, x0, size, flip })
    }

    pub fn apply_to_image<F: Scalar>(&self, img: &ImagePlane<F>) -> ImagePlane<F> {
        let window = img
            .data()
            .slice(s![self.y0..self.y0 + self.size, self.x0..self.x0 + self.size, ..]);
        let data = if self.flip {
            window.slice(s![.., ..;-1, ..]).to_owned()
        } else {
            window.to_owned()
        };
        ImagePlane::new(data, img.colorspace()).expect("crop of a valid image stays valid")
    }

    pub fn apply_to_map<F: Scalar>(&self, map: &Array2<F>) -> Array2<F> {
        let window = map.slice(s![self.y0..self.y0 + self.size, self.x0..self.x0 + self.size]);
        if self.flip {
            window.slice(s![.., ..;-1]).to_owned()
        } else {
            window.to_owned()
        }
    }
}

/// One training batch: cropped labeled samples plus (for the semi-supervised
/// mode) an equal number of cropped unlabeled samples.
#[derive(Debug, Clone)]
pub struct MixedBatch<F: Scalar> {
    pub labeled: Vec<LabeledSample<F>>,
    pub unlabeled: Vec<UnlabeledSample<F>>,
    pub crop_size: usize,
}

/// Draws `batch_size / 2` labeled and `batch_size / 2` unlabeled samples
/// (uniformly, with replacement) and crops each with its own window.
pub fn make_mixed_batch<F: Scalar, R: Rng>(
    labeled: &[LabeledSample<F>],
    unlabeled: &[UnlabeledSample<F>],
    batch_size: usize,
    crop: usize,
    flip: bool,
    rng: &mut R,
) -> Result<MixedBatch<F>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "mixed batch size {batch_size} must be even and positive"
        )));
    }
    if labeled.is_empty() {
        return Err(Error::EmptyDataset {
            context: "labeled pool for mixed batch".to_string(),
        });
    }
    if unlabeled.is_empty() {
        return Err(Error::EmptyDataset {
            context: "unlabeled pool for mixed batch".to_string(),
        });
    }
    let half = batch_size / 2;
    let mut out = MixedBatch {
        labeled: Vec::with_capacity(half),
        unlabeled: Vec::with_capacity(half),
        crop_size: crop,
    };
    for _ in 0..half {
        let s = &labeled[rng.gen_range(0..labeled.len())];
        let spec = CropSpec::sample(&s.id, s.hazy.height(), s.hazy.width(), crop, flip, rng)?;
        out.labeled.push(s.crop(&spec));
    }
    for _ in 0..half {
        let s = &unlabeled[rng.gen_range(0..unlabeled.len())];
        let spec = CropSpec::sample(&s.id, s.hazy.height(), s.hazy.width(), crop, flip, rng)?;
        out.unlabeled.push(s.crop(&spec));
    }
    Ok(out)
}

/// Labeled-only batch for the supervised ablations. The unlabeled half stays
/// empty, which downstream loss code treats as "no consistency term".
pub fn make_labeled_batch<F: Scalar, R: Rng>(
    labeled: &[LabeledSample<F>],
    batch_size: usize,
    crop: usize,
    flip: bool,
    rng: &mut R,
) -> Result<MixedBatch<F>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if labeled.is_empty() {
        return Err(Error::EmptyDataset {
            context: "labeled pool for batch".to_string(),
        });
    }
    let mut out = MixedBatch {
        labeled: Vec::with_capacity(batch_size),
        unlabeled: Vec::new(),
        crop_size: crop,
    };
    for _ in 0..batch_size {
        let s = &labeled[rng.gen_range(0..labeled.len())];
        let spec = CropSpec::sample(&s.id, s.hazy.height(), s.hazy.width(), crop, flip, rng)?;
        out.labeled.push(s.crop(&spec));
    }
    Ok(out)
}

/// Adds iid Gaussian noise and clips back into [0, 1] — the input
/// perturbation applied on the teacher side of the consistency pair.
pub fn perturb_with_noise<F: Scalar, R: Rng>(
    img: &ImagePlane<F>,
    sigma: f64,
    rng: &mut R,
) -> Result<ImagePlane<F>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid("noise", format!("sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let data = img
        .data()
        .mapv(|v| F::from_f64(Scalar::to_f64(v) + normal.sample(rng)));
    ImagePlane::new_clipped(data, img.colorspace())
}

/// Loads every PNG/JPEG in a directory as unlabeled hazy images, in sorted
/// filename order so ingestion is deterministic.
pub fn load_unlabeled_dir<F: Scalar>(dir: &Path) -> Result<Vec<UnlabeledSample<F>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset {
            context: format!("no images found in {}", dir.display()),
        });
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unnamed")
            .to_string();
        out.push(UnlabeledSample {
            id,
            hazy: io::load_image(&p)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn sources(n: usize, h: usize, w: usize, seed: u64) -> Vec<CleanSource<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| CleanSource {
                id: format!("img{i:03}"),
                image: procedural_clean_image(h, w, &mut rng),
                depth: None,
            })
            .collect()
    }

    #[test]
    fn synthesis_respects_ranges_and_cardinality() {
        let srcs = sources(10, 16, 16, 1);
        let opts = SynthOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = synthesize_dataset(&srcs, &opts, &mut rng).unwrap();
        assert_eq!(samples.len(), 40);
        let mut ids = std::collections::HashSet::new();
        for s in &samples {
            assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
            for a in s.params.atmosphere {
                assert!((0.5..=1.0).contains(&a));
            }
            assert!((0.5..=2.0).contains(&s.params.beta));
            // scalar atmosphere is replicated
            assert_eq!(s.params.atmosphere[0], s.params.atmosphere[1]);
        }
    }

    #[test]
    fn per_channel_atmosphere_varies_channels() {
        let srcs = sources(3, 8, 8, 2);
        let opts = SynthOptions {
            per_channel_atmosphere: true,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = synthesize_dataset(&srcs, &opts, &mut rng).unwrap();
        assert!(samples
            .iter()
            .any(|s| s.params.atmosphere[0] != s.params.atmosphere[1]));
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let srcs = sources(4, 12, 12, 4);
        let opts = SynthOptions::default();
        let a = synthesize_dataset(&srcs, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synthesize_dataset(&srcs, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = synthesize_dataset(&srcs, &opts, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.hazy.data(), y.hazy.data());
            assert_eq!(x.params, y.params);
        }
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.params != y.params));
    }

    #[test]
    fn in_memory_recomposition_is_exact() {
        let srcs = sources(3, 10, 10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples =
            synthesize_dataset(&srcs, &SynthOptions::default(), &mut rng).unwrap();
        for s in &samples {
            let re = compose_hazy(&s.clean, &s.transmission, &s.params).unwrap();
            for (&a, &b) in re.data().iter().zip(s.hazy.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_sources_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none: Vec<CleanSource<f32>> = Vec::new();
        assert!(matches!(
            synthesize_dataset(&none, &SynthOptions::default(), &mut rng),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn manifest_round_trip_and_verification() {
        let dir = TempDir::new().unwrap();
        let srcs = sources(3, 14, 14, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let opts = SynthOptions::default();
        let samples = synthesize_dataset(&srcs, &opts, &mut rng).unwrap();
        let depths: Vec<(String, Array2<f32>)> = srcs
            .iter()
            .map(|s| {
                // depth itself is not needed for verification; store zeros
                (s.id.clone(), Array2::zeros((14, 14)))
            })
            .collect();
        let manifest =
            materialize_dataset(&samples, &depths, 13, &opts, dir.path()).unwrap();
        let reread = Manifest::read(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reread.samples.len(), manifest.samples.len());
        // quantization: 8-bit on images, 16-bit on transmission
        let worst = verify_manifest::<f32>(&reread, dir.path(), 2.0 / 255.0).unwrap();
        assert!(worst <= 2.0 / 255.0);
        let loaded = load_labeled::<f32>(&reread, dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (l, s) in loaded.iter().zip(samples.iter()) {
            assert_eq!(l.params, s.params);
            // atmosphere plane rebuilt from params is exact
            assert_eq!(l.atmosphere().data(), s.atmosphere().data());
        }
    }

    #[test]
    fn materialized_manifests_are_byte_identical_across_runs() {
        let opts = SynthOptions::default();
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let dir = TempDir::new().unwrap();
            let srcs = sources(10, 8, 8, 20);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let samples = synthesize_dataset(&srcs, &opts, &mut rng).unwrap();
            assert_eq!(samples.len(), 40);
            materialize_dataset(&samples, &[], 21, &opts, dir.path()).unwrap();
            bytes.push(std::fs::read(dir.path().join("manifest.json")).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn split_never_shares_clean_sources() {
        let srcs = sources(10, 8, 8, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let opts = SynthOptions::default();
        let samples = synthesize_dataset(&srcs, &opts, &mut rng).unwrap();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            seed: 31,
            settings_per_image: opts.settings_per_image,
            per_channel_atmosphere: false,
            samples: samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    clean_source: s.clean_source.clone(),
                    hazy_file: String::new(),
                    clean_file: String::new(),
                    transmission_file: String::new(),
                    depth_file: String::new(),
                    atmosphere: s.params.atmosphere,
                    beta: s.params.beta,
                })
                .collect(),
        };
        let (train, val) = split_by_clean_source(&manifest, 0.2, 99).unwrap();
        assert_eq!(train.samples.len() + val.samples.len(), 40);
        assert_eq!(val.samples.len(), 8); // 2 of 10 sources * 4 settings
        let train_sources: std::collections::HashSet<_> =
            train.samples.iter().map(|e| &e.clean_source).collect();
        for e in &val.samples {
            assert!(!train_sources.contains(&e.clean_source));
        }
        // deterministic split
        let (train2, _) = split_by_clean_source(&manifest, 0.2, 99).unwrap();
        let ids1: Vec<_> = train.samples.iter().map(|e| &e.id).collect();
        let ids2: Vec<_> = train2.samples.iter().map(|e| &e.id).collect();
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn crops_are_aligned_and_flips_mirror() {
        let srcs = sources(1, 12, 12, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let samples =
            synthesize_dataset(&srcs, &SynthOptions::default(), &mut rng).unwrap();
        let spec = CropSpec {
            y0: 2,
            x0: 3,
            size: 6,
            flip: true,
        };
        let c = samples[0].crop(&spec);
        assert_eq!(c.hazy.height(), 6);
        assert_eq!(c.transmission.data().dim(), (6, 6));
        // flipped crop: column j maps to source column x0 + size-1-j
        let orig = samples[0].hazy.data();
        assert_eq!(c.hazy.data()[[0, 0, 0]], orig[[2, 3 + 5, 0]]);
        assert_eq!(
            c.transmission.data()[[1, 2]],
            samples[0].transmission.data()[[3, 3 + 3]]
        );
        // crop + compose still agree, i.e. all planes stayed aligned
        let re = compose_hazy(&c.clean, &c.transmission, &c.params).unwrap();
        for (&a, &b) in re.data().iter().zip(c.hazy.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_crop_is_rejected_with_sample_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let err = CropSpec::sample("tiny", 8, 8, 16, true, &mut rng).unwrap_err();
        match err {
            Error::CropTooLarge { id, crop, .. } => {
                assert_eq!(id, "tiny");
                assert_eq!(crop, 16);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mixed_batches_split_evenly_and_reject_odd_sizes() {
        let srcs = sources(3, 16, 16, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let labeled =
            synthesize_dataset(&srcs, &SynthOptions::default(), &mut rng).unwrap();
        let unlabeled: Vec<UnlabeledSample<f32>> = labeled
            .iter()
            .take(2)
            .map(|s| UnlabeledSample {
                id: format!("u-{}", s.id),
                hazy: s.hazy.clone(),
            })
            .collect();
        let batch = make_mixed_batch(&labeled, &unlabeled, 6, 8, true, &mut rng).unwrap();
        assert_eq!(batch.labeled.len(), 3);
        assert_eq!(batch.unlabeled.len(), 3);
        assert!(batch.labeled.iter().all(|s| s.hazy.height() == 8));
        assert!(make_mixed_batch(&labeled, &unlabeled, 5, 8, true, &mut rng).is_err());
        assert!(make_mixed_batch(&labeled, &[], 4, 8, true, &mut rng).is_err());
        let lab_only = make_labeled_batch(&labeled, 5, 8, false, &mut rng).unwrap();
        assert_eq!(lab_only.labeled.len(), 5);
        assert!(lab_only.unlabeled.is_empty());
    }

    #[test]
    fn noise_perturbation_is_bounded_and_seeded() {
        let img = ImagePlane::<f32>::constant(16, 16, &[0.5, 0.5, 0.5], Colorspace::Rgb)
            .unwrap();
        let a = perturb_with_noise(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(70)).unwrap();
        let b = perturb_with_noise(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(70)).unwrap();
        assert_eq!(a.data(), b.data());
        let mean: f32 = a.data().iter().sum::<f32>() / a.data().len() as f32;
        assert!((mean - 0.5).abs() < 0.02, "noise should be zero-mean, got {mean}");
        assert!(a.data().iter().any(|&v| v != 0.5));
        let zero = perturb_with_noise(&img, 0.0, &mut ChaCha8Rng::seed_from_u64(71)).unwrap();
        assert_eq!(zero.data(), img.data());
        assert!(perturb_with_noise(&img, -0.1, &mut ChaCha8Rng::seed_from_u64(72)).is_err());
    }

    #[test]
    fn unlabeled_dir_ingestion_is_sorted_and_validating() {
        let dir = TempDir::new().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for name in ["b.png", "a.png", "c.jpg"] {
            let img = procedural_clean_image::<f32, _>(8, 8, &mut rng);
            io::save_image(&dir.path().join(name), &img).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let loaded = load_unlabeled_dir::<f32>(dir.path()).unwrap();
        let ids: Vec<_> = loaded.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        let empty = TempDir::new().unwrap();
        assert!(load_unlabeled_dir::<f32>(empty.path()).is_err());
    }

    #[test]
    fn flipped_crops_come_out_in_standard_layout() {
        // an owned array cloned from a reversed view keeps its negative
        // stride; the sample types must normalize so reshapes keep working
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let sources = vec![CleanSource::<f32> {
            id: "img".to_string(),
            image: procedural_clean_image(40, 40, &mut rng),
            depth: Some(synthetic_depth(40, 40, &mut rng)),
        }];
        let opts = SynthOptions {
            settings_per_image: 1,
            per_channel_atmosphere: false,
        };
        let sample = synthesize_dataset(&sources, &opts, &mut rng)
            .unwrap()
            .remove(0);
        let spec = CropSpec { y0: 2, x0: 3, size: 32, flip: true };
        let cropped = sample.crop(&spec);
        assert!(cropped.hazy.data().is_standard_layout());
        assert!(cropped.transmission.data().is_standard_layout());
        // the operations that choke on exotic layouts
        let plane = cropped.transmission.to_plane();
        assert!(plane.to_chw().is_standard_layout());
        assert!(cropped.hazy.to_chw().is_standard_layout());
    }

    #[test]
    fn synthetic_depth_is_smooth_and_spans_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let d = synthetic_depth::<f64, _>(24, 24, &mut rng);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min.abs() < 1e-9 && (max - 1.0).abs() < 1e-9);
        // neighboring pixels move gently: bounded discrete gradient
        for y in 0..23 {
            for x in 0..23 {
                assert!((d[[y + 1, x]] - d[[y, x]]).abs() < 0.2);
                assert!((d[[y, x + 1]] - d[[y, x]]).abs() < 0.2);
            }
        }
    }
}
