//! The five subcommand bodies. Each one echoes its fully resolved
//! configuration before doing any work, so a run's stdout is enough to
//! reproduce it.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dehaze_core::dataset::{
    load_labeled, load_unlabeled_dir, materialize_dataset, procedural_clean_image,
    synthesize_dataset, synthetic_depth, CleanSource, Manifest, SynthOptions,
};
use dehaze_core::eval::{evaluate_checkpoint, EvalOptions};
use dehaze_core::io::{load_image, save_image, save_panel};
use dehaze_core::trainer::{load_checkpoint, train_loop, TrainHooks, TrainState};
use dehaze_core::{Error, Result, TrainFloat};

use crate::config::{require_exists, resolve_out, RunConfig};
use crate::{DehazeArgs, EvalArgs, InspectArgs, SynthArgs, TrainArgs};

fn echo_config(label: &str, value: &serde_json::Value) {
    let pretty = serde_json::to_string_pretty(value).expect("config serializes");
    println!("resolved {label} config:\n{pretty}");
}

/// Image files (png/jpg/jpeg) in a directory, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
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
    Ok(paths)
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    if let Some(input) = &args.input {
        require_exists(input, "input directory")?;
    }
    let out = resolve_out(&args.out);
    echo_config(
        "synth",
        &serde_json::json!({
            "out": out,
            "input": args.input,
            "images": args.images,
            "settings": args.settings,
            "height": args.height,
            "width": args.width,
            "seed": args.seed,
            "per_channel_atmosphere": args.per_channel_atmosphere,
        }),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    // Fixed draw order (per image: pixels then depth) keeps one seed
    // reproducing the whole dataset bit for bit.
    let sources: Vec<CleanSource<TrainFloat>> = match &args.input {
        Some(dir) => {
            let images = load_unlabeled_dir::<TrainFloat>(dir)?;
            if images.is_empty() {
                return Err(Error::Config(format!(
                    "input directory {} holds no images",
                    dir.display()
                )));
            }
            images
                .into_iter()
                .map(|s| {
                    let depth = synthetic_depth(s.hazy.height(), s.hazy.width(), &mut rng);
                    CleanSource {
                        id: s.id,
                        image: s.hazy,
                        depth: Some(depth),
                    }
                })
                .collect()
        }
        None => (0..args.images)
            .map(|i| {
                let image = procedural_clean_image(args.height, args.width, &mut rng);
                let depth = synthetic_depth(args.height, args.width, &mut rng);
                CleanSource {
                    id: format!("img{i:04}"),
                    image,
                    depth: Some(depth),
                }
            })
            .collect(),
    };

    let opts = SynthOptions {
        settings_per_image: args.settings,
        per_channel_atmosphere: args.per_channel_atmosphere,
    };
    let samples = synthesize_dataset(&sources, &opts, &mut rng)?;
    let depths: Vec<(String, Array2<TrainFloat>)> = sources
        .iter()
        .map(|s| (s.id.clone(), s.depth.clone().expect("depth assigned above")))
        .collect();
    let manifest = materialize_dataset(&samples, &depths, args.seed, &opts, &out)?;

    // Quantization tolerance: hazy pixels pass through 8-bit PNGs and
    // transmission through 16-bit, so recomposition can drift by about
    // 2/255 in the worst case.
    let worst = dehaze_core::dataset::verify_manifest::<TrainFloat>(&manifest, &out, 2.0 / 255.0)?;

    let manifest_path = out.join("manifest.json");
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut hasher = DefaultHasher::new();
    hasher.write(&bytes);

    let (mut a_lo, mut a_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut b_lo, mut b_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in &manifest.samples {
        for &a in &e.atmosphere {
            a_lo = a_lo.min(a);
            a_hi = a_hi.max(a);
        }
        b_lo = b_lo.min(e.beta);
        b_hi = b_hi.max(e.beta);
    }

    println!("wrote {}", manifest_path.display());
    println!(
        "{} clean images x {} settings = {} samples",
        sources.len(),
        args.settings,
        manifest.samples.len()
    );
    println!("atmosphere in [{a_lo:.4}, {a_hi:.4}], beta in [{b_lo:.4}, {b_hi:.4}]");
    println!("recomposition check: worst deviation {worst:.6}");
    println!("manifest hash: {:016x}", hasher.finish());
    Ok(())
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            require_exists(path, "config file")?;
            RunConfig::from_file(path)?
        }
        None => RunConfig::default(),
    };
    args.overrides.apply(&mut config);
    config.resolve()?;
    let out = resolve_out(&config.out_dir);

    // On resume the checkpoint's embedded settings govern the run; flags
    // only move the horizon and the output/logging plumbing.
    let mut state: TrainState<TrainFloat> = match &args.resume {
        Some(ckpt) => {
            require_exists(ckpt, "checkpoint")?;
            let mut state = load_checkpoint(ckpt)?;
            if let Some(t_max) = args.overrides.t_max {
                if t_max < state.t {
                    return Err(Error::Config(format!(
                        "t_max {t_max} is before the checkpoint's iteration {}",
                        state.t
                    )));
                }
                state.config.t_max = t_max;
            }
            state
        }
        None => TrainState::new(config.train.clone())?,
    };

    echo_config(
        "train",
        &serde_json::json!({
            "data_dir": config.data_dir,
            "unlabeled_dir": config.unlabeled_dir,
            "out_dir": out,
            "resume": args.resume,
            "resumed_at": args.resume.as_ref().map(|_| state.t),
            "log_every": config.log_every,
            "checkpoint_every": config.checkpoint_every,
            "train": serde_json::to_value(&state.config)?,
        }),
    );

    let manifest_path = config.data_dir.join("manifest.json");
    require_exists(&manifest_path, "manifest")?;
    let manifest = Manifest::read(&manifest_path)?;
    let labeled = load_labeled::<TrainFloat>(&manifest, &config.data_dir)?;
    let unlabeled = match &config.unlabeled_dir {
        Some(dir) => {
            require_exists(dir, "unlabeled directory")?;
            load_unlabeled_dir::<TrainFloat>(dir)?
        }
        None => Vec::new(),
    };

    // Surface undersized images as a config error before the loop starts.
    let crop = state.config.crop;
    for (what, h, w) in labeled
        .iter()
        .map(|s| (&s.id, s.hazy.height(), s.hazy.width()))
        .chain(unlabeled.iter().map(|s| (&s.id, s.hazy.height(), s.hazy.width())))
    {
        if h < crop || w < crop {
            return Err(Error::Config(format!(
                "sample {what} is {h}x{w}, smaller than the {crop}px training crop"
            )));
        }
    }

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("train_log.jsonl");
    let fresh = args.resume.is_none() || !log_path.exists();
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .truncate(fresh)
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log_writer = std::io::BufWriter::new(log_file);
    let checkpoint_path = out.join("checkpoint.bin");

    let mut hooks = TrainHooks {
        log_every: config.log_every,
        on_log: Some(Box::new(move |t, breakdown| {
            let mut line = serde_json::to_value(breakdown).expect("breakdown serializes");
            line["t"] = serde_json::json!(t);
            if writeln!(log_writer, "{line}").and_then(|_| log_writer.flush()).is_err() {
                log::warn!("could not append to the training log");
            }
        })),
        checkpoint_every: config.checkpoint_every,
        checkpoint_path: Some(checkpoint_path.clone()),
        ..TrainHooks::default()
    };

    train_loop(&mut state, &labeled, &unlabeled, &mut hooks)?;

    println!(
        "trained to t={} of {}; checkpoint at {}",
        state.t,
        state.config.t_max,
        checkpoint_path.display()
    );
    println!("log at {}", log_path.display());
    Ok(())
}

pub fn run_dehaze(args: &DehazeArgs) -> Result<()> {
    require_exists(&args.ckpt, "checkpoint")?;
    require_exists(&args.input, "input directory")?;
    if let Some(gt) = &args.gt {
        require_exists(gt, "ground-truth directory")?;
    }
    let out = resolve_out(&args.out);
    echo_config(
        "dehaze",
        &serde_json::json!({
            "ckpt": args.ckpt,
            "input": args.input,
            "out": out,
            "gt": args.gt,
            "panels": args.panels,
            "strict": args.strict,
        }),
    );

    let state: TrainState<TrainFloat> = load_checkpoint(&args.ckpt)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let files = list_images(&args.input)?;
    if files.is_empty() {
        return Err(Error::Config(format!(
            "input directory {} holds no images",
            args.input.display()
        )));
    }

    let mut done = 0usize;
    let mut skipped = 0usize;
    for file in &files {
        let hazy = match load_image::<TrainFloat>(file) {
            Ok(img) => img,
            Err(e) if !args.strict => {
                log::warn!("skipping {}: {e}", file.display());
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let dehazed = state.infer(&hazy)?;
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        save_image(&out.join(format!("{stem}.dehazed.png")), &dehazed)?;
        if args.panels {
            let mut planes = vec![&hazy, &dehazed];
            // Ground truth matches by file name; a missing or unreadable
            // one just narrows this sample's panel to input|output.
            let gt_image = args.gt.as_ref().and_then(|dir| {
                let name = file.file_name()?;
                load_image::<TrainFloat>(&dir.join(name)).ok()
            });
            if let Some(gt) = &gt_image {
                planes.push(gt);
            }
            save_panel(&out.join(format!("{stem}.panel.png")), &planes)?;
        }
        done += 1;
    }
    println!("dehazed {done} image(s) into {}, skipped {skipped}", out.display());
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    require_exists(&args.ckpt, "checkpoint")?;
    require_exists(&args.manifest, "manifest")?;
    let out = resolve_out(&args.out);
    echo_config(
        "eval",
        &serde_json::json!({
            "ckpt": args.ckpt,
            "manifest": args.manifest,
            "out": out,
            "baseline_noop": args.baseline_noop,
            "quantized": args.quantized,
        }),
    );

    let opts = EvalOptions {
        baseline_noop: args.baseline_noop,
        quantized: args.quantized,
    };
    let report = evaluate_checkpoint::<TrainFloat>(&args.ckpt, &args.manifest, &opts)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("report.csv"))?;

    println!(
        "{} sample(s): mean PSNR {:.2} dB, mean SSIM {:.4} ({} skipped)",
        report.scores.len(),
        report.mean_psnr_db,
        report.mean_ssim,
        report.skipped.len()
    );
    println!("report at {}", out.join("report.json").display());
    Ok(())
}

pub fn run_inspect(args: &InspectArgs) -> Result<()> {
    if args.ckpt.is_none() && args.manifest.is_none() {
        return Err(Error::Config(
            "nothing to inspect: pass --ckpt and/or --manifest".into(),
        ));
    }
    if let Some(ckpt) = &args.ckpt {
        require_exists(ckpt, "checkpoint")?;
        let state: TrainState<TrainFloat> = load_checkpoint(ckpt)?;
        println!("checkpoint {}", ckpt.display());
        println!(
            "  iteration {} of {}, seed {}",
            state.t, state.config.t_max, state.config.seed
        );
        println!(
            "  mode {:?}, batch {}, crop {}px",
            state.config.mode, state.config.batch_size, state.config.crop
        );
        println!(
            "  {} parameters across {} tensors, {} optimizer steps",
            state.student.total_scalars(),
            state.student.len(),
            state.adam.step_count()
        );
        println!(
            "  train config:\n{}",
            serde_json::to_string_pretty(&state.config)?
        );
    }
    if let Some(path) = &args.manifest {
        require_exists(path, "manifest")?;
        let manifest = Manifest::read(path)?;
        let (mut a_lo, mut a_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut b_lo, mut b_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for e in &manifest.samples {
            for &a in &e.atmosphere {
                a_lo = a_lo.min(a);
                a_hi = a_hi.max(a);
            }
            b_lo = b_lo.min(e.beta);
            b_hi = b_hi.max(e.beta);
        }
        println!("manifest {}", path.display());
        println!(
            "  version {}, seed {}, {} samples ({} settings per image)",
            manifest.version,
            manifest.seed,
            manifest.samples.len(),
            manifest.settings_per_image
        );
        println!("  atmosphere in [{a_lo:.4}, {a_hi:.4}], beta in [{b_lo:.4}, {b_hi:.4}]");
    }
    Ok(())
}
