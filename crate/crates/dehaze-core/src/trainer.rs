//! The student/teacher training loop.
//!
//! One [`TrainState`] owns both parameter sets, the optimizer moments and the
//! run RNG. Every stochastic draw of a run (batch indices, crop windows,
//! flips, teacher noise) comes from that single ChaCha stream in a fixed
//! order, so a `(seed, word position)` pair pins the whole trajectory and a
//! resumed run is bitwise identical to an uninterrupted one.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{Array3, ArrayD, Axis, IxDyn, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    make_labeled_batch, make_mixed_batch, perturb_with_noise, LabeledSample, MixedBatch,
    UnlabeledSample,
};
use crate::error::{Error, Result};
use crate::image::{stack_chw, ImagePlane};
use crate::loss::{
    consistency_loss, rampup_weight, supervised_loss, total_loss, LossBreakdown, LossWeights,
    SupervisedTargets,
};
use crate::net::{AblationMode, DidNet, NetworkConfig, MIN_INPUT};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape};

/// RNG stream id for training-time draws; parameter initialization uses the
/// default stream of the same seed, so the two never overlap.
const TRAIN_RNG_STREAM: u64 = 1;

/// Learning-rate and optimizer constants for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// Initial learning rate of the poly schedule.
    pub lr0: f64,
    /// Poly decay exponent.
    pub power: f64,
    /// Teacher EMA decay.
    pub ema_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr0: 1e-4,
            power: 0.9,
            ema_decay: 0.99,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be > 0", self.lr0)));
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(Error::Config(format!("power {} must be >= 0", self.power)));
        }
        for (name, v) in [
            ("ema_decay", self.ema_decay),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must be in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::Config(format!(
                "adam_eps {} must be > 0",
                self.adam_eps
            )));
        }
        Ok(())
    }
}

/// Poly learning rate: `lr0 * (1 - t/t_max)^power`, so the rate starts at
/// `lr0` and reaches 0 at `t = t_max`. The degenerate `t_max = 0` run never
/// takes a step; the value returned for it is `lr0`.
pub fn poly_lr(t: usize, t_max: usize, sched: &Schedule) -> f64 {
    debug_assert!(t <= t_max, "poly_lr called with t past t_max");
    if t_max == 0 {
        return sched.lr0;
    }
    let frac = 1.0 - t as f64 / t_max as f64;
    sched.lr0 * frac.powf(sched.power)
}

/// In-place EMA: every teacher parameter becomes
/// `decay * teacher + (1 - decay) * student`. The two stores must agree on
/// names and shapes; a mismatch is rejected naming the offending parameter.
pub fn ema_update<F: Scalar>(
    teacher: &mut ParamStore<F>,
    student: &ParamStore<F>,
    decay: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} must be in [0, 1)")));
    }
    teacher.check_same_structure(student)?;
    let d = F::from_f64(decay);
    let omd = F::from_f64(1.0 - decay);
    for (name, tp) in teacher.iter_mut() {
        let sp = student.get(name).expect("structure checked above");
        tp.zip_mut_with(sp, |t, s| *t = d * *t + omd * *s);
    }
    Ok(())
}

/// Adaptive-moment optimizer state: first/second moments per parameter plus
/// one shared step counter (all parameters step together).
pub struct Adam<F: Scalar> {
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
    step: u64,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Adam {
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn moments_mut(
        map: &mut IndexMap<String, ArrayD<F>>,
        name: &str,
        shape: &[usize],
    ) -> Result<&'static str> {
        // only validates; the caller re-borrows the entry
        if let Some(existing) = map.get(name) {
            if existing.shape() != shape {
                return Err(Error::StructuralMismatch {
                    name: name.to_string(),
                    detail: format!(
                        "optimizer moment shape {:?} does not match parameter {:?}",
                        existing.shape(),
                        shape
                    ),
                });
            }
        } else {
            map.insert(name.to_string(), ArrayD::zeros(IxDyn(shape)));
        }
        Ok("")
    }

    /// One update over every parameter in `params`. Parameters without an
    /// entry in `grads` are treated as having a zero gradient (their moments
    /// keep decaying).
    pub fn apply(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &HashMap<String, ArrayD<F>>,
        lr: f64,
        sched: &Schedule,
    ) -> Result<()> {
        self.step += 1;
        let b1 = F::from_f64(sched.adam_beta1);
        let b2 = F::from_f64(sched.adam_beta2);
        let omb1 = F::from_f64(1.0 - sched.adam_beta1);
        let omb2 = F::from_f64(1.0 - sched.adam_beta2);
        let bc1 = F::from_f64(1.0 - sched.adam_beta1.powi(self.step as i32));
        let bc2 = F::from_f64(1.0 - sched.adam_beta2.powi(self.step as i32));
        let eps = F::from_f64(sched.adam_eps);
        let lr = F::from_f64(lr);
        for (name, p) in params.iter_mut() {
            let zero_grad: ArrayD<F>;
            let g: &ArrayD<F> = match grads.get(name) {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(Error::StructuralMismatch {
                            name: name.to_string(),
                            detail: format!(
                                "gradient shape {:?} does not match parameter {:?}",
                                g.shape(),
                                p.shape()
                            ),
                        });
                    }
                    g
                }
                None => {
                    zero_grad = ArrayD::zeros(p.raw_dim());
                    &zero_grad
                }
            };
            Self::moments_mut(&mut self.m, name, p.shape())?;
            Self::moments_mut(&mut self.v, name, p.shape())?;
            let m = self.m.get_mut(name).expect("inserted above");
            m.zip_mut_with(g, |m, g| *m = b1 * *m + omb1 * *g);
            let v = self.v.get_mut(name).expect("inserted above");
            v.zip_mut_with(g, |v, g| *v = b2 * *v + omb2 * *g * *g);
            let m = self.m.get(name).expect("inserted above");
            let v = self.v.get(name).expect("inserted above");
            Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }

    fn sections(&self) -> [(&'static str, &IndexMap<String, ArrayD<F>>); 2] {
        [("adam.m", &self.m), ("adam.v", &self.v)]
    }
}

/// Everything one training run needs, snapshot into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub mode: AblationMode,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub seed: u64,
    pub t_max: usize,
    /// Samples per step; mixed batches split this evenly between halves.
    pub batch_size: usize,
    /// Square crop side for training windows.
    pub crop: usize,
    /// Random horizontal flips on training crops.
    pub flip: bool,
    /// Gaussian noise fed to the teacher's unlabeled input.
    pub teacher_noise_sigma: f64,
    /// Noise on the student's unlabeled input; 0 keeps the student input
    /// clean (the default), >0 switches to symmetric two-noise perturbation.
    pub student_noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            mode: AblationMode::Full,
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            seed: 0,
            t_max: 0,
            batch_size: 2,
            crop: 240,
            flip: true,
            teacher_noise_sigma: 0.05,
            student_noise_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.crop < MIN_INPUT {
            return Err(Error::Config(format!(
                "crop {} is below the network minimum {}",
                self.crop, MIN_INPUT
            )));
        }
        for (name, v) in [
            ("teacher_noise_sigma", self.teacher_noise_sigma),
            ("student_noise_sigma", self.student_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Live state of a training run.
pub struct TrainState<F: Scalar> {
    pub config: TrainConfig,
    pub net: DidNet,
    pub student: ParamStore<F>,
    pub teacher: ParamStore<F>,
    pub adam: Adam<F>,
    pub rng: ChaCha8Rng,
    /// Completed iterations, `0 ..= t_max`.
    pub t: usize,
}

impl<F: Scalar> TrainState<F> {
    /// Fresh state at `t = 0`: the teacher starts as an exact copy of the
    /// student, and both derive from the config seed.
    pub fn new(config: TrainConfig) -> Result<TrainState<F>> {
        config.validate()?;
        let net = DidNet::new(config.network.clone(), config.mode)?;
        let student = net.init_params::<F>(config.seed)?;
        let teacher = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_RNG_STREAM);
        Ok(TrainState {
            config,
            net,
            student,
            teacher,
            adam: Adam::new(),
            rng,
            t: 0,
        })
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    /// Consistency ramp weight at the current iteration.
    pub fn mu(&self) -> f64 {
        if self.config.t_max == 0 {
            self.config.weights.mu_max
        } else {
            rampup_weight(self.t, self.config.t_max, self.config.weights.mu_max)
        }
    }

    /// Dehazes one image with the student network (the teacher plays no part
    /// in inference).
    pub fn infer(&self, image: &ImagePlane<F>) -> Result<ImagePlane<F>> {
        infer(&self.net, &self.student, image)
    }
}

fn stack_refs<F: Scalar>(planes: &[&ImagePlane<F>]) -> Result<ArrayD<F>> {
    Ok(stack_chw(planes)?.into_dyn())
}

/// One optimization step.
///
/// The labeled half drives the supervised loss; the unlabeled half (if any)
/// runs through the student as-is and through the teacher with Gaussian
/// noise added, and their disagreement enters weighted by the ramp-up
/// `mu(t)`. A non-finite total aborts before any parameter is touched.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &MixedBatch<F>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if batch.labeled.is_empty() {
        return Err(Error::EmptyDataset {
            context: "train_step needs a labeled half".to_string(),
        });
    }

    // draw all randomness up front, in a fixed order, so the trajectory is a
    // pure function of (seed, word position)
    let mut student_unlabeled: Vec<ImagePlane<F>> = Vec::with_capacity(batch.unlabeled.len());
    let mut teacher_unlabeled: Vec<ImagePlane<F>> = Vec::with_capacity(batch.unlabeled.len());
    for u in &batch.unlabeled {
        student_unlabeled.push(perturb_with_noise(
            &u.hazy,
            state.config.student_noise_sigma,
            &mut state.rng,
        )?);
        teacher_unlabeled.push(perturb_with_noise(
            &u.hazy,
            state.config.teacher_noise_sigma,
            &mut state.rng,
        )?);
    }

    let tape = Tape::<F>::new();

    // supervised half
    let hazy_refs: Vec<&ImagePlane<F>> = batch.labeled.iter().map(|s| &s.hazy).collect();
    let clean_refs: Vec<&ImagePlane<F>> = batch.labeled.iter().map(|s| &s.clean).collect();
    let trans_planes: Vec<ImagePlane<F>> = batch
        .labeled
        .iter()
        .map(|s| s.transmission.to_plane())
        .collect();
    let trans_refs: Vec<&ImagePlane<F>> = trans_planes.iter().collect();
    let atm_planes: Vec<ImagePlane<F>> = batch.labeled.iter().map(|s| s.atmosphere()).collect();
    let atm_refs: Vec<&ImagePlane<F>> = atm_planes.iter().collect();

    let hazy = tape.constant(stack_refs(&hazy_refs)?);
    let targets = SupervisedTargets {
        hazy: hazy.clone(),
        clean: tape.constant(stack_refs(&clean_refs)?),
        transmission: tape.constant(stack_refs(&trans_refs)?),
        atmosphere: tape.constant(stack_refs(&atm_refs)?),
    };
    let labeled_out = state.net.forward(&tape, &state.student, &hazy)?;
    let sup = supervised_loss(&labeled_out, &targets, weights)?;

    // consistency half
    let mu = state.mu();
    let cons = if batch.unlabeled.is_empty() {
        None
    } else {
        let s_refs: Vec<&ImagePlane<F>> = student_unlabeled.iter().collect();
        let t_refs: Vec<&ImagePlane<F>> = teacher_unlabeled.iter().collect();
        let s_in = tape.constant(stack_refs(&s_refs)?);
        let s_out = state.net.forward(&tape, &state.student, &s_in)?;
        // the teacher runs on its own gradient-free tape; its outputs come
        // over as constants, so no gradient can reach teacher parameters
        let t_tape = Tape::<F>::no_grad();
        let t_in = t_tape.constant(stack_refs(&t_refs)?);
        let t_out = state
            .net
            .forward(&t_tape, &state.teacher, &t_in)?
            .to_constants_on(&tape);
        Some(consistency_loss(&s_out, &t_out, weights)?)
    };

    let total = total_loss(&sup.total, cons.as_ref().map(|c| &c.total), mu);
    let grand_total = Scalar::to_f64(total.item());
    let breakdown = LossBreakdown::new(&sup, cons.as_ref(), mu, grand_total);
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.t,
            breakdown: serde_json::to_string(&breakdown)?,
        });
    }

    let grads = total.backward().into_param_map();
    let lr = poly_lr(state.t, state.config.t_max, &state.config.schedule);
    state
        .adam
        .apply(&mut state.student, &grads, lr, &state.config.schedule)?;
    // the optimizer never sees the teacher; this is its only mutation point
    ema_update(
        &mut state.teacher,
        &state.student,
        state.config.schedule.ema_decay,
    )?;
    state.t += 1;
    Ok(breakdown)
}

/// Side channels of [`train_loop`]. An interval of 0 disables that hook;
/// an enabled hook fires exactly when `t % interval == 0` (counting the
/// just-completed iteration).
#[derive(Default)]
pub struct TrainHooks<'a, F: Scalar> {
    pub log_every: usize,
    pub on_log: Option<Box<dyn FnMut(usize, &LossBreakdown) + 'a>>,
    pub validate_every: usize,
    pub on_validate: Option<Box<dyn FnMut(&TrainState<F>) -> Result<()> + 'a>>,
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

/// Writes a checkpoint, retrying once on failure (the state lives in memory,
/// so one transient write error should not kill a long run).
fn save_with_retry<F: Scalar>(state: &TrainState<F>, path: &Path) -> Result<()> {
    if let Err(first) = save_checkpoint(state, path) {
        log::warn!("checkpoint write failed ({first}); retrying once");
        return save_checkpoint(state, path);
    }
    Ok(())
}

/// Runs [`train_step`] until `t` reaches `t_max`, building each batch from
/// the pools. Unlabeled data participates only in the mode that consumes it.
/// A final checkpoint is always written when a path is configured;
/// `t_max = 0` returns without touching anything.
pub fn train_loop<F: Scalar>(
    state: &mut TrainState<F>,
    labeled: &[LabeledSample<F>],
    unlabeled: &[UnlabeledSample<F>],
    hooks: &mut TrainHooks<'_, F>,
) -> Result<()> {
    if state.config.t_max == 0 {
        return Ok(());
    }
    let use_unlabeled = state.config.mode.uses_unlabeled() && !unlabeled.is_empty();
    while state.t < state.config.t_max {
        let batch = if use_unlabeled {
            make_mixed_batch(
                labeled,
                unlabeled,
                state.config.batch_size,
                state.config.crop,
                state.config.flip,
                &mut state.rng,
            )?
        } else {
            make_labeled_batch(
                labeled,
                state.config.batch_size,
                state.config.crop,
                state.config.flip,
                &mut state.rng,
            )?
        };
        let weights = state.config.weights;
        let breakdown = train_step(state, &batch, &weights)?;
        let t = state.t;
        if hooks.log_every > 0 && t % hooks.log_every == 0 {
            if let Some(f) = hooks.on_log.as_mut() {
                f(t, &breakdown);
            }
        }
        if hooks.validate_every > 0 && t % hooks.validate_every == 0 {
            if let Some(f) = hooks.on_validate.as_mut() {
                f(state)?;
            }
        }
        if hooks.checkpoint_every > 0 && t % hooks.checkpoint_every == 0 {
            if let Some(path) = hooks.checkpoint_path.clone() {
                save_with_retry(state, &path)?;
            }
        }
    }
    if let Some(path) = hooks.checkpoint_path.clone() {
        save_with_retry(state, &path)?;
    }
    Ok(())
}

/// Dehazes one image: replicate-pads anything below the network minimum up
/// to it, runs the student, and crops the refined prediction back to the
/// input size.
pub fn infer<F: Scalar>(
    net: &DidNet,
    params: &ParamStore<F>,
    image: &ImagePlane<F>,
) -> Result<ImagePlane<F>> {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.max(MIN_INPUT), w.max(MIN_INPUT));
    let padded = replicate_pad(image.to_chw(), ph, pw);
    let x = padded.insert_axis(Axis(0)).into_dyn();
    let tape = Tape::<F>::no_grad();
    let out = net.forward(&tape, params, &tape.constant(x))?;
    let y = out.best_j().array();
    let chw = y
        .index_axis(Axis(0), 0)
        .slice(ndarray::s![.., ..h, ..w])
        .to_owned()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("network output is NCHW");
    ImagePlane::from_chw(chw, image.colorspace())
}

/// Edge-replicate padding on the bottom/right of a CHW array.
fn replicate_pad<F: Scalar>(chw: Array3<F>, ph: usize, pw: usize) -> Array3<F> {
    let (c, h, w) = chw.dim();
    if h == ph && w == pw {
        return chw;
    }
    Array3::from_shape_fn((c, ph, pw), |(cc, y, x)| chw[[cc, y.min(h - 1), x.min(w - 1)]])
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DHZC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SectionMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    config: TrainConfig,
    t: usize,
    adam_step: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    sections: Vec<SectionMeta>,
}

fn write_values<F: Scalar, W: Write>(out: &mut W, arr: &ArrayD<F>) -> std::io::Result<()> {
    match F::dtype_name() {
        "f32" => {
            for v in arr.iter() {
                out.write_f32::<LittleEndian>(Scalar::to_f64(*v) as f32)?;
            }
        }
        _ => {
            for v in arr.iter() {
                out.write_f64::<LittleEndian>(Scalar::to_f64(*v))?;
            }
        }
    }
    Ok(())
}

fn read_values<F: Scalar, R: Read>(input: &mut R, len: usize) -> std::io::Result<Vec<F>> {
    let mut out = Vec::with_capacity(len);
    match F::dtype_name() {
        "f32" => {
            for _ in 0..len {
                out.push(F::from_f64(input.read_f32::<LittleEndian>()? as f64));
            }
        }
        _ => {
            for _ in 0..len {
                out.push(F::from_f64(input.read_f64::<LittleEndian>()?));
            }
        }
    }
    Ok(out)
}

/// Serializes the full state — both parameter sets, optimizer moments, the
/// iteration counter and the RNG position — into one binary container,
/// written atomically (temp file + rename).
pub fn save_checkpoint<F: Scalar>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let mut sections: Vec<SectionMeta> = Vec::new();
    let mut arrays: Vec<&ArrayD<F>> = Vec::new();
    for (group, store) in [("student", &state.student), ("teacher", &state.teacher)] {
        for (name, arr) in store.iter() {
            sections.push(SectionMeta {
                group: group.to_string(),
                name: name.to_string(),
                shape: arr.shape().to_vec(),
            });
            arrays.push(arr);
        }
    }
    for (group, map) in state.adam.sections() {
        for (name, arr) in map {
            sections.push(SectionMeta {
                group: group.to_string(),
                name: name.clone(),
                shape: arr.shape().to_vec(),
            });
            arrays.push(arr);
        }
    }
    let word_pos = state.rng.get_word_pos();
    let header = CheckpointHeader {
        dtype: F::dtype_name().to_string(),
        config: state.config.clone(),
        t: state.t,
        adam_step: state.adam.step_count(),
        rng_word_pos_hi: (word_pos >> 64) as u64,
        rng_word_pos_lo: word_pos as u64,
        sections,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    let io_err = |e: std::io::Error| Error::io(&tmp, e);
    let file = File::create(&tmp).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io_err)?;
    out.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .map_err(io_err)?;
    out.write_all(&header_bytes).map_err(io_err)?;
    for arr in arrays {
        write_values(&mut out, arr).map_err(io_err)?;
    }
    out.into_inner()
        .map_err(|e| Error::io(&tmp, e.into_error()))?
        .sync_all()
        .map_err(io_err)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Restores a [`TrainState`] from [`save_checkpoint`] output. The stored
/// dtype must match `F`; the parameter sets are checked against the
/// architecture the stored config describes; the RNG is repositioned so the
/// continued run follows the exact trajectory of an uninterrupted one.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let file = File::open(path).map_err(io_err)?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = input.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let header_len = input.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.dtype != F::dtype_name() {
        return Err(Error::Checkpoint(format!(
            "{}: stores {} parameters, this run uses {}",
            path.display(),
            header.dtype,
            F::dtype_name()
        )));
    }
    header.config.validate()?;

    let mut student = ParamStore::<F>::new();
    let mut teacher = ParamStore::<F>::new();
    let mut adam = Adam::<F>::new();
    adam.step = header.adam_step;
    for meta in &header.sections {
        let len: usize = meta.shape.iter().product();
        let values = read_values::<F, _>(&mut input, len).map_err(io_err)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| Error::Checkpoint(format!("section {}: {e}", meta.name)))?;
        match meta.group.as_str() {
            "student" => student.insert(&meta.name, arr)?,
            "teacher" => teacher.insert(&meta.name, arr)?,
            "adam.m" => {
                adam.m.insert(meta.name.clone(), arr);
            }
            "adam.v" => {
                adam.v.insert(meta.name.clone(), arr);
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unknown section group {other}",
                    path.display()
                )));
            }
        }
    }

    let net = DidNet::new(header.config.network.clone(), header.config.mode)?;
    // structural congruence with the architecture the config describes
    let expected = net.init_params::<F>(header.config.seed)?;
    expected.check_same_structure(&student)?;
    expected.check_same_structure(&teacher)?;

    let mut rng = ChaCha8Rng::seed_from_u64(header.config.seed);
    rng.set_stream(TRAIN_RNG_STREAM);
    rng.set_word_pos(((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128);

    Ok(TrainState {
        config: header.config,
        net,
        student,
        teacher,
        adam,
        rng,
        t: header.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_dataset, synthetic_depth, procedural_clean_image, CleanSource, SynthOptions};
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn tiny_config(mode: AblationMode, t_max: usize) -> TrainConfig {
        let mut network = NetworkConfig::desk_test();
        network.channels = [2, 3, 4, 4, 4];
        network.unet_width = 2;
        network.attention_reduction = 2;
        TrainConfig {
            network,
            mode,
            t_max,
            seed: 5,
            batch_size: 2,
            crop: 32,
            flip: true,
            ..TrainConfig::default()
        }
    }

    fn tiny_pools<F: Scalar>(
        n_sources: usize,
        hw: usize,
        seed: u64,
    ) -> (Vec<LabeledSample<F>>, Vec<UnlabeledSample<F>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources: Vec<CleanSource<F>> = (0..n_sources)
            .map(|i| CleanSource {
                id: format!("img{i}"),
                image: procedural_clean_image(hw, hw, &mut rng),
                depth: Some(synthetic_depth(hw, hw, &mut rng)),
            })
            .collect();
        let opts = SynthOptions {
            settings_per_image: 1,
            per_channel_atmosphere: false,
        };
        let labeled = synthesize_dataset(&sources, &opts, &mut rng).unwrap();
        let unlabeled = labeled
            .iter()
            .map(|s| UnlabeledSample {
                id: format!("{}/u", s.id),
                hazy: s.hazy.clone(),
            })
            .collect();
        (labeled, unlabeled)
    }

    fn store_bits(store: &ParamStore<f32>) -> Vec<u32> {
        store
            .iter()
            .flat_map(|(_, a)| a.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn poly_lr_matches_the_closed_form() {
        let sched = Schedule::default();
        assert_eq!(poly_lr(0, 1000, &sched), 1e-4);
        assert_eq!(poly_lr(1000, 1000, &sched), 0.0);
        let oracle = 1e-4 * 0.5f64.powf(0.9);
        assert!((poly_lr(500, 1000, &sched) - oracle).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = poly_lr(t, 100, &sched);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn ema_update_obeys_the_decay_arithmetic() {
        let mut teacher = ParamStore::<f64>::new();
        teacher.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0)).unwrap();
        let mut student = ParamStore::<f64>::new();
        student.insert("w", ArrayD::from_elem(IxDyn(&[2]), 0.0)).unwrap();

        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert!((teacher.get("w").unwrap()[0] - 0.99).abs() < 1e-15);

        // decay 0 copies the student exactly
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.get("w").unwrap()[0], 0.0);

        // teacher == student is a fixed point
        let mut t2 = student.clone();
        ema_update(&mut t2, &student, 0.7).unwrap();
        assert_eq!(t2.get("w").unwrap()[0], 0.0);

        // structural mismatch names the parameter
        let mut other = ParamStore::<f64>::new();
        other.insert("w2", ArrayD::zeros(IxDyn(&[2]))).unwrap();
        let err = ema_update(&mut teacher, &other, 0.99).unwrap_err();
        assert!(err.to_string().contains('w'), "error should name the parameter: {err}");
        assert!(ema_update(&mut teacher, &student, 1.0).is_err());
    }

    #[test]
    fn teacher_follows_the_closed_form_average_of_the_student_trajectory() {
        // 2-parameter toy model driven by a scripted student trajectory;
        // compare against theta_T(N) = d^N theta_T(0) + (1-d) sum d^(N-k) theta_S(k)
        let d = 0.99f64;
        let n = 100usize;
        let traj = |k: usize, p: usize| ((k * 7 + p * 3) % 13) as f64 / 13.0 - 0.5;

        let mut teacher = ParamStore::<f64>::new();
        teacher.insert("a", ArrayD::from_elem(IxDyn(&[1]), 0.25)).unwrap();
        teacher.insert("b", ArrayD::from_elem(IxDyn(&[1]), -0.5)).unwrap();
        let theta0 = [0.25, -0.5];
        let mut student = teacher.clone();

        for k in 1..=n {
            for (p, name) in ["a", "b"].iter().enumerate() {
                student
                    .set(name, ArrayD::from_elem(IxDyn(&[1]), traj(k, p)))
                    .unwrap();
            }
            ema_update(&mut teacher, &student, d).unwrap();
        }
        for (p, name) in ["a", "b"].iter().enumerate() {
            let mut expect = d.powi(n as i32) * theta0[p];
            for k in 1..=n {
                expect += (1.0 - d) * d.powi((n - k) as i32) * traj(k, p);
            }
            let got = teacher.get(name).unwrap()[0];
            assert!(
                (got - expect).abs() < 1e-10,
                "{name}: got {got}, closed form {expect}"
            );
        }
    }

    #[test]
    fn adam_first_step_moves_by_roughly_the_learning_rate() {
        // with bias correction, the very first update is lr * g/(|g| + ~0)
        let mut params = ParamStore::<f64>::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1.0)).unwrap();
        let mut adam = Adam::new();
        let sched = Schedule::default();
        let mut grads = HashMap::new();
        grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0));
        adam.apply(&mut params, &grads, 0.01, &sched).unwrap();
        let x = params.get("x").unwrap()[0];
        assert!((x - 0.99).abs() < 1e-6, "first step should be ~lr, got {x}");
        assert_eq!(adam.step_count(), 1);

        // a missing gradient decays moments but cannot blow up
        let empty = HashMap::new();
        adam.apply(&mut params, &empty, 0.01, &sched).unwrap();
        assert!(params.get("x").unwrap()[0].is_finite());
    }

    #[test]
    fn adam_drives_a_quadratic_toward_its_minimum() {
        let mut params = ParamStore::<f64>::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1.0)).unwrap();
        let mut adam = Adam::new();
        let sched = Schedule::default();
        for _ in 0..300 {
            let x = params.get("x").unwrap()[0];
            let mut grads = HashMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0 * x));
            adam.apply(&mut params, &grads, 0.05, &sched).unwrap();
        }
        let x = params.get("x").unwrap()[0];
        assert!(x.abs() < 0.05, "did not approach the minimum: {x}");
    }

    #[test]
    fn train_step_updates_student_teacher_and_iteration() {
        let config = tiny_config(AblationMode::Full, 10);
        let mut state = TrainState::<f64>::new(config).unwrap();
        let (labeled, unlabeled) = tiny_pools::<f64>(2, 32, 9);
        let batch = MixedBatch {
            labeled: vec![labeled[0].clone()],
            unlabeled: vec![unlabeled[0].clone()],
            crop_size: 32,
        };
        let student_before = state.student.clone();
        let teacher_before = state.teacher.clone();
        let weights = state.config.weights;
        let breakdown = train_step(&mut state, &batch, &weights).unwrap();

        assert_eq!(state.t, 1);
        assert!(breakdown.is_finite());
        assert!(breakdown.grand_total > 0.0);
        assert!((breakdown.mu - rampup_weight(0, 10, 1.0)).abs() < 1e-15);

        let moved = state
            .student
            .iter()
            .any(|(name, a)| a != student_before.get(name).unwrap());
        assert!(moved, "student parameters did not move");

        // the teacher moved, and only by the EMA rule applied to the new student
        let d = state.config.schedule.ema_decay;
        for (name, after) in state.teacher.iter() {
            let t0 = teacher_before.get(name).unwrap();
            let s1 = state.student.get(name).unwrap();
            for ((a, t0), s1) in after.iter().zip(t0.iter()).zip(s1.iter()) {
                let expect = d * *t0 + (1.0 - d) * *s1;
                assert!(
                    (*a - expect).abs() < 1e-12,
                    "{name}: teacher deviates from the EMA rule"
                );
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_without_touching_parameters() {
        let config = tiny_config(AblationMode::Full, 10);
        let mut state = TrainState::<f64>::new(config).unwrap();
        let (labeled, _) = tiny_pools::<f64>(1, 32, 9);
        let batch = MixedBatch {
            labeled: vec![labeled[0].clone()],
            unlabeled: vec![],
            crop_size: 32,
        };
        // poison one weight so the forward pass goes non-finite
        let name = state.student.names().next().unwrap().to_string();
        let shape = state.student.get(&name).unwrap().raw_dim();
        state.student.set(&name, ArrayD::from_elem(shape, f64::NAN)).unwrap();
        let before = state.teacher.clone();
        let weights = state.config.weights;
        let err = train_step(&mut state, &batch, &weights).unwrap_err();
        match err {
            Error::NonFiniteLoss { iteration, breakdown } => {
                assert_eq!(iteration, 0);
                assert!(breakdown.contains("l_j"), "dump should itemize the terms");
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
        assert_eq!(state.t, 0, "iteration must not advance");
        for (name, arr) in state.teacher.iter() {
            assert_eq!(arr, before.get(name).unwrap(), "teacher touched on abort");
        }
    }

    #[test]
    fn loop_with_zero_budget_returns_untouched() {
        let config = tiny_config(AblationMode::Full, 0);
        let mut state = TrainState::<f32>::new(config).unwrap();
        let (labeled, unlabeled) = tiny_pools::<f32>(1, 32, 9);
        let bits = store_bits(&state.student);
        let pos = state.rng.get_word_pos();
        let mut hooks = TrainHooks::default();
        train_loop(&mut state, &labeled, &unlabeled, &mut hooks).unwrap();
        assert_eq!(state.t, 0);
        assert_eq!(store_bits(&state.student), bits);
        assert_eq!(state.rng.get_word_pos(), pos);
    }

    #[test]
    fn hooks_fire_exactly_on_their_intervals() {
        let config = tiny_config(AblationMode::BasicStage1, 10);
        let mut state = TrainState::<f32>::new(config).unwrap();
        let (labeled, _) = tiny_pools::<f32>(2, 32, 9);
        let mut logged: Vec<usize> = Vec::new();
        let mut validated = 0usize;
        {
            let mut hooks = TrainHooks {
                log_every: 3,
                on_log: Some(Box::new(|t, _| logged.push(t))),
                validate_every: 5,
                on_validate: Some(Box::new(|_| {
                    validated += 1;
                    Ok(())
                })),
                ..TrainHooks::default()
            };
            train_loop(&mut state, &labeled, &[], &mut hooks).unwrap();
        }
        assert_eq!(logged, vec![3, 6, 9]);
        assert_eq!(validated, 2); // t = 5 and t = 10
        assert_eq!(state.t, 10);
    }

    #[test]
    fn checkpoint_survives_a_round_trip() {
        let config = tiny_config(AblationMode::Full, 6);
        let mut state = TrainState::<f32>::new(config).unwrap();
        let (labeled, unlabeled) = tiny_pools::<f32>(2, 32, 9);
        let mut hooks = TrainHooks::default();
        state.config.t_max = 2;
        train_loop(&mut state, &labeled, &unlabeled, &mut hooks).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();

        assert_eq!(loaded.t, state.t);
        assert_eq!(loaded.adam.step_count(), state.adam.step_count());
        assert_eq!(loaded.rng.get_word_pos(), state.rng.get_word_pos());
        assert_eq!(store_bits(&loaded.student), store_bits(&state.student));
        assert_eq!(store_bits(&loaded.teacher), store_bits(&state.teacher));
        assert_eq!(loaded.config, state.config);

        // dtype mismatch is refused
        assert!(load_checkpoint::<f64>(&path).is_err());
        //###### is not a checkpoint
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"######").unwrap();
        assert!(load_checkpoint::<f32>(&junk).is_err());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory_bitwise() {
        let make = || {
            let mut c = tiny_config(AblationMode::Full, 8);
            c.seed = 21;
            c
        };
        let (labeled, unlabeled) = tiny_pools::<f32>(2, 32, 9);

        // uninterrupted run to t=8
        let mut full = TrainState::<f32>::new(make()).unwrap();
        let mut full_losses: Vec<f64> = Vec::new();
        {
            let mut hooks = TrainHooks {
                log_every: 1,
                on_log: Some(Box::new(|_, b: &LossBreakdown| full_losses.push(b.grand_total))),
                ..TrainHooks::default()
            };
            train_loop(&mut full, &labeled, &unlabeled, &mut hooks).unwrap();
        }

        // same run killed at t=4 right after a checkpoint, then resumed;
        // t_max stays 8 throughout (it shapes both the LR and the ramp)
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = TrainState::<f32>::new(make()).unwrap();
        let mut resumed_losses: Vec<f64> = Vec::new();
        {
            let path = path.clone();
            let mut hooks = TrainHooks {
                log_every: 1,
                on_log: Some(Box::new(|_, b: &LossBreakdown| resumed_losses.push(b.grand_total))),
                validate_every: 4,
                on_validate: Some(Box::new(move |s: &TrainState<f32>| {
                    save_checkpoint(s, &path)?;
                    Err(Error::Config("simulated interruption".into()))
                })),
                ..TrainHooks::default()
            };
            let err = train_loop(&mut first, &labeled, &unlabeled, &mut hooks).unwrap_err();
            assert!(err.to_string().contains("interruption"));
        }
        assert_eq!(resumed_losses.len(), 4);
        let mut second = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(second.t, 4);
        assert_eq!(second.config.t_max, 8);
        {
            let mut hooks = TrainHooks {
                log_every: 1,
                on_log: Some(Box::new(|_, b: &LossBreakdown| resumed_losses.push(b.grand_total))),
                ..TrainHooks::default()
            };
            train_loop(&mut second, &labeled, &unlabeled, &mut hooks).unwrap();
        }

        assert_eq!(full_losses.len(), 8);
        assert_eq!(full_losses, resumed_losses, "loss trajectories diverge");
        assert_eq!(store_bits(&full.student), store_bits(&second.student));
        assert_eq!(store_bits(&full.teacher), store_bits(&second.teacher));
    }

    #[test]
    fn checkpoint_failure_leaves_state_usable() {
        let config = tiny_config(AblationMode::BasicStage1, 2);
        let mut state = TrainState::<f32>::new(config).unwrap();
        let (labeled, _) = tiny_pools::<f32>(1, 32, 9);
        let mut hooks = TrainHooks {
            checkpoint_every: 1,
            checkpoint_path: Some(PathBuf::from("/nonexistent-dir/run.ckpt")),
            ..TrainHooks::default()
        };
        let err = train_loop(&mut state, &labeled, &[], &mut hooks).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        // the step itself completed; state is intact and can keep training
        assert_eq!(state.t, 1);
        let mut hooks = TrainHooks::default();
        train_loop(&mut state, &labeled, &[], &mut hooks).unwrap();
        assert_eq!(state.t, 2);
    }

    #[test]
    fn infer_keeps_the_input_size_and_is_deterministic() {
        let config = tiny_config(AblationMode::Full, 1);
        let state = TrainState::<f32>::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(20, 45), (32, 32), (50, 34)] {
            let img = procedural_clean_image::<f32, _>(h, w, &mut rng);
            let out = state.infer(&img).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
            let again = state.infer(&img).unwrap();
            assert_eq!(out.data(), again.data(), "inference must be deterministic");
        }
    }
}
