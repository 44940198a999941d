//! Masked Dice training with Adam, slice-batch scheduling, validation-driven
//! checkpoint selection, and checkpoint files.

use std::fmt::Write as _;
use std::io::{self, Cursor, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, NetState, NetworkSpec};
use crate::recurrent::{PeepholeMode, StateVars};
use crate::tensor::serialize::{read_f64, read_tensor, read_u32, read_u64, write_tensor};
use crate::tensor::{Fault, Real, Tape, Tensor, Var};
use crate::volume::{extract_slices, Direction, Orientation, SliceSequence, VolumeSample};

/// Smoothing term added to both sides of the Dice ratio.
pub const DICE_SMOOTHING: f64 = 1e-6;

/// `1 - (2 Σ m p g + s) / (Σ m p² + Σ m g² + s)` over the voxels where the
/// mask is set.
pub fn dice_loss_masked<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
    tape.dice_loss(pred, target, mask, DICE_SMOOTHING)
}

/// How the loss of a slice batch is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossReduction {
    /// One Dice ratio over all voxels of the batch.
    #[default]
    Batch,
    /// Mean of the per-slice Dice losses.
    MeanOverSlices,
}

/// When validation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidationSchedule {
    EveryStep,
    /// After every `n`-th epoch and after the last one.
    EveryEpochs(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub slice_batch_axial: usize,
    pub slice_batch_other: usize,
    /// Batches with foreground are trained twice while the best validation
    /// DSI is below this value.
    pub oversample_until_val_dsi: f64,
    pub seed: u64,
    pub validation: ValidationSchedule,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            slice_batch_axial: 14,
            slice_batch_other: 16,
            oversample_until_val_dsi: 0.5,
            seed: 0,
            validation: ValidationSchedule::EveryStep,
            loss_reduction: LossReduction::Batch,
        }
    }
}

impl TrainConfig {
    /// Settings for small volumes on a single CPU.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            epochs: 100,
            slice_batch_axial: 8,
            slice_batch_other: 16,
            validation: ValidationSchedule::EveryEpochs(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::config("learning_rate and epsilon must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if self.slice_batch_axial == 0 || self.slice_batch_other == 0 {
            return Err(Error::config("slice batch sizes must be positive"));
        }
        if self.validation == ValidationSchedule::EveryEpochs(0) {
            return Err(Error::config("validation interval must be positive"));
        }
        Ok(())
    }

    pub fn batch_size(&self, orientation: Orientation) -> usize {
        match orientation {
            Orientation::Axial => self.slice_batch_axial,
            _ => self.slice_batch_other,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimizerState {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; the element arithmetic runs in f64.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != state.second.len() {
        return Err(Error::param("adam_step: parameter, gradient and moment counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() || p.shape() != state.second[i].shape() {
            return Err(Error::param(format!(
                "adam_step: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            let mk = cfg.beta1 * m[k].as_f64() + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v[k].as_f64() + (1.0 - cfg.beta2) * gk * gk;
            m[k] = T::from_f64(mk);
            v[k] = T::from_f64(vk);
            let update = cfg.learning_rate * (mk / c1) / ((vk / c2).sqrt() + cfg.epsilon);
            *w = T::from_f64(w.as_f64() - update);
        }
    }
    Ok(())
}

/// Contiguous batches covering `0..slices`.
pub fn make_slice_batches(slices: usize, batch_size: usize) -> Result<Vec<Range<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("slice batch size must be positive"));
    }
    if slices == 0 || !slices.is_multiple_of(batch_size) {
        let padded = slices.div_ceil(batch_size).max(1) * batch_size;
        return Err(Error::config(format!(
            "{slices} slices do not split into batches of {batch_size}; pad the volume to {padded} slices along this axis"
        )));
    }
    Ok((0..slices / batch_size).map(|b| b * batch_size..(b + 1) * batch_size).collect())
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub orientation: Orientation,
    pub direction: Direction,
    pub params: Vec<Tensor<f32>>,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// `-inf` before the first validation.
    pub best_val_dsi: f64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.spec.clone(), self.params.clone())
    }
}

const CKPT_MAGIC: &[u8; 9] = b"RUNETCKPT";
const CKPT_VERSION: u32 = 1;

fn orientation_code(o: Orientation) -> u8 {
    match o {
        Orientation::Axial => 0,
        Orientation::Coronal => 1,
        Orientation::Sagittal => 2,
    }
}

pub fn write_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<()> {
    let s = &ck.spec;
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    for v in [s.depth, s.base_filters, s.input_size.0, s.input_size.1, s.in_channels] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&s.dropout_rate.to_bits().to_le_bytes())?;
    out.write_all(&[match s.peephole {
        PeepholeMode::Full => 0,
        PeepholeMode::PerChannel => 1,
    }])?;
    out.write_all(&(s.clstm_levels.len() as u64).to_le_bytes())?;
    for &l in &s.clstm_levels {
        out.write_all(&(l as u64).to_le_bytes())?;
    }
    out.write_all(&[orientation_code(ck.orientation), (ck.direction == Direction::Reverse) as u8])?;
    out.write_all(&(ck.epoch as u64).to_le_bytes())?;
    out.write_all(&ck.step.to_le_bytes())?;
    out.write_all(&ck.best_val_dsi.to_bits().to_le_bytes())?;
    out.write_all(&ck.rng.seed)?;
    out.write_all(&ck.rng.stream.to_le_bytes())?;
    out.write_all(&ck.rng.word_pos.to_le_bytes())?;
    out.write_all(&ck.optimizer.step.to_le_bytes())?;
    out.write_all(&(ck.params.len() as u64).to_le_bytes())?;
    for group in [&ck.params, &ck.optimizer.first, &ck.optimizer.second] {
        if group.len() != ck.params.len() {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        for t in group {
            write_tensor(out, t)?;
        }
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn parse_checkpoint(r: &mut Cursor<&[u8]>) -> Result<Checkpoint> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, expected {CKPT_VERSION}"
        )));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = read_u64(r)? as usize;
    }
    let dropout_rate = read_f64(r)?;
    let peephole = match read_u8(r)? {
        0 => PeepholeMode::Full,
        1 => PeepholeMode::PerChannel,
        p => return Err(Error::Checkpoint(format!("unknown peephole mode {p}"))),
    };
    let n_levels = read_u64(r)?;
    if n_levels > 64 {
        return Err(Error::Checkpoint(format!("{n_levels} recurrent levels")));
    }
    let clstm_levels = (0..n_levels).map(|_| read_u64(r).map(|l| l as usize)).collect::<Result<_>>()?;
    let spec = NetworkSpec {
        depth: dims[0],
        base_filters: dims[1],
        clstm_levels,
        input_size: (dims[2], dims[3]),
        in_channels: dims[4],
        dropout_rate,
        peephole,
    };
    spec.validate().map_err(|e| Error::Checkpoint(format!("invalid network spec: {e}")))?;
    let orientation = match read_u8(r)? {
        0 => Orientation::Axial,
        1 => Orientation::Coronal,
        2 => Orientation::Sagittal,
        o => return Err(Error::Checkpoint(format!("unknown orientation code {o}"))),
    };
    let direction = match read_u8(r)? {
        0 => Direction::Forward,
        1 => Direction::Reverse,
        d => return Err(Error::Checkpoint(format!("unknown direction code {d}"))),
    };
    let epoch = read_u64(r)? as usize;
    let step = read_u64(r)?;
    let best_val_dsi = read_f64(r)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let stream = read_u64(r)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let opt_step = read_u64(r)?;
    let count = read_u64(r)? as usize;
    let expected = Model::<f32>::parameter_shapes(&spec);
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter tensors, the network needs {}",
            expected.len()
        )));
    }
    let mut groups: [Vec<Tensor<f32>>; 3] = Default::default();
    for group in &mut groups {
        for shape in &expected {
            let t = read_tensor(r)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor of shape {:?} where {shape:?} was expected",
                    t.shape()
                )));
            }
            group.push(t);
        }
    }
    if (r.position() as usize) != r.get_ref().len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    let [params, first, second] = groups;
    Ok(Checkpoint {
        spec,
        orientation,
        direction,
        params,
        optimizer: OptimizerState {
            first,
            second,
            step: opt_step,
        },
        epoch,
        step,
        best_val_dsi,
        rng: RngState {
            seed,
            stream,
            word_pos: u128::from_le_bytes(pos),
        },
    })
}

/// Decode a checkpoint held in memory. Truncation and corruption give
/// [`Error::Checkpoint`].
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    parse_checkpoint(&mut Cursor::new(bytes)).map_err(|e| match e {
        Error::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => Error::Checkpoint("checkpoint file is truncated".into()),
        Error::Format(m) => Error::Checkpoint(m),
        Error::Checkpoint(m) => Error::Checkpoint(m),
        other => Error::Checkpoint(other.to_string()),
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

/// A training or validation volume, sliced once.
#[derive(Clone, Debug)]
pub struct PreparedVolume {
    pub id: String,
    pub slices: SliceSequence,
}

impl PreparedVolume {
    pub fn new(v: &VolumeSample, orientation: Orientation, direction: Direction) -> Self {
        PreparedVolume {
            id: v.id.clone(),
            slices: extract_slices(v, orientation, direction),
        }
    }
}

pub fn prepare(volumes: &[VolumeSample], orientation: Orientation, direction: Direction) -> Vec<PreparedVolume> {
    volumes.iter().map(|v| PreparedVolume::new(v, orientation, direction)).collect()
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub volume: String,
    pub batch: usize,
    pub loss: f64,
    /// Second pass over a foreground batch.
    pub repeat: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub steps: Vec<StepLog>,
    /// Batches seen, counting each doubled batch once.
    pub batches: usize,
    pub doubled: usize,
    /// Validations run during the epoch (per-step schedule).
    pub validations: Vec<(u64, Validation)>,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum::<f64>() / self.steps.len().max(1) as f64
    }
}

/// Mean soft-Dice loss and mean hard DSI over validation volumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub dsi: f64,
}

/// Soft-Dice loss and hard DSI (threshold 0.5) of predicted slices, both
/// restricted to the field of view.
pub fn score_slices(pred: &[Tensor<f32>], seq: &SliceSequence) -> (f64, f64) {
    let (mut num, mut pp, mut gg) = (0.0, 0.0, 0.0);
    let (mut both, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (i, p) in pred.iter().enumerate() {
        for ((&pv, &g), &m) in p.data().iter().zip(seq.labels[i].data()).zip(seq.fov[i].data()) {
            if m <= 0.5 {
                continue;
            }
            let (pv, g) = (pv as f64, g as f64);
            num += pv * g;
            pp += pv * pv;
            gg += g * g;
            let (hp, hg) = (pv >= 0.5, g > 0.5);
            np += hp as usize;
            ng += hg as usize;
            both += (hp && hg) as usize;
        }
    }
    let loss = 1.0 - (2.0 * num + DICE_SMOOTHING) / (pp + gg + DICE_SMOOTHING);
    let dsi = if np + ng == 0 { 1.0 } else { 2.0 * both as f64 / (np + ng) as f64 };
    (loss, dsi)
}

/// Model plus optimizer plus schedule state for one orientation.
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub cfg: TrainConfig,
    pub orientation: Orientation,
    pub direction: Direction,
    pub epoch: usize,
    pub step: u64,
    pub best_val_dsi: f64,
    rng: ChaCha8Rng,
    fault: Option<Fault>,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, orientation: Orientation, direction: Direction) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        Ok(Trainer {
            optimizer: OptimizerState::new(model.params()),
            model,
            cfg,
            orientation,
            direction,
            epoch: 0,
            step: 0,
            best_val_dsi: f64::NEG_INFINITY,
            rng,
            fault: None,
            best: None,
        })
    }

    /// Continue from `last`; `best` is the best checkpoint written so far.
    pub fn resume(last: Checkpoint, best: Option<Checkpoint>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = last.model()?;
        Ok(Trainer {
            model,
            optimizer: last.optimizer,
            cfg,
            orientation: last.orientation,
            direction: last.direction,
            epoch: last.epoch,
            step: last.step,
            best_val_dsi: last.best_val_dsi,
            rng: last.rng.restore(),
            fault: None,
            best,
        })
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.model.spec().clone(),
            orientation: self.orientation,
            direction: self.direction,
            params: self.model.params().to_vec(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_dsi: self.best_val_dsi,
            rng: RngState::of(&self.rng),
        }
    }

    /// Best checkpoint so far, or the current state if nothing was validated.
    pub fn best_checkpoint(&self) -> Checkpoint {
        self.best.clone().unwrap_or_else(|| self.checkpoint())
    }

    fn doubling_active(&self) -> bool {
        self.best_val_dsi < self.cfg.oversample_until_val_dsi
    }

    /// Forward, backward and one Adam step on slices `idx` of `seq`,
    /// starting from `state`. Returns the loss and the outgoing state.
    fn train_batch(&mut self, seq: &SliceSequence, idx: &[usize], state: &NetState<f32>) -> Result<(f64, NetState<f32>)> {
        let mut tape = Tape::new();
        tape.inject_fault(self.fault);
        let bound = self.model.bind(&mut tape, true)?;
        let mut vars: Vec<StateVars> = state.iter().map(|s| StateVars::constant(&mut tape, s)).collect();
        let mut preds = Vec::with_capacity(idx.len());
        for &i in idx {
            let x = tape.constant(seq.images[i].clone());
            let rng: &mut dyn RngCore = &mut self.rng;
            preds.push(self.model.forward_slice(&mut tape, &bound, x, &mut vars, Some(rng))?);
        }
        let loss = match self.cfg.loss_reduction {
            LossReduction::Batch => {
                let p = tape.concat(&preds)?;
                let stack = |src: &[Tensor<f32>]| -> Result<Tensor<f32>> {
                    let (h, w) = (src[0].shape()[1], src[0].shape()[2]);
                    Tensor::new(&[idx.len(), h, w], idx.iter().flat_map(|&i| src[i].data().iter().copied()).collect())
                };
                dice_loss_masked(&mut tape, p, &stack(&seq.labels)?, &stack(&seq.fov)?)?
            }
            LossReduction::MeanOverSlices => {
                let mut total: Option<Var> = None;
                for (&i, &p) in idx.iter().zip(&preds) {
                    let l = dice_loss_masked(&mut tape, p, &seq.labels[i], &seq.fov[i])?;
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.ok_or_else(|| Error::param("empty slice batch"))?;
                tape.scale(total, 1.0 / idx.len() as f64)
            }
        };
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = bound
            .params
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adam_step(self.model.params_mut(), &grads, &mut self.optimizer, &self.cfg.adam())?;
        let next = vars.iter().map(|v| v.values(&tape)).collect();
        Ok((value, next))
    }

    /// Mean validation loss and DSI over `val`.
    pub fn validate(&self, val: &[PreparedVolume]) -> Result<Validation> {
        if val.is_empty() {
            return Err(Error::param("validation set is empty"));
        }
        let (mut loss, mut dsi) = (0.0, 0.0);
        for v in val {
            let pred = self.model.forward_volume(&v.slices.images, false, 0)?;
            let (l, d) = score_slices(&pred, &v.slices);
            loss += l;
            dsi += d;
        }
        Ok(Validation {
            loss: loss / val.len() as f64,
            dsi: dsi / val.len() as f64,
        })
    }

    /// Record a validation result; snapshots the model on strict improvement.
    pub fn observe(&mut self, v: Validation) -> bool {
        if v.dsi > self.best_val_dsi {
            self.best_val_dsi = v.dsi;
            self.best = Some(self.checkpoint());
            true
        } else {
            false
        }
    }

    /// One pass over `train` in a fresh random volume order. With a
    /// per-step schedule, `val` is scored after every optimizer step.
    pub fn train_epoch(&mut self, train: &[PreparedVolume], val: Option<&[PreparedVolume]>) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let per_step = self.cfg.validation == ValidationSchedule::EveryStep;
        let batch_size = self.cfg.batch_size(self.orientation);
        for vi in order {
            let vol = &train[vi];
            let seq = &vol.slices;
            let batches = make_slice_batches(seq.len(), batch_size)?;
            let mut slice_order: Vec<usize> = (0..seq.len()).collect();
            if !self.model.spec().is_recurrent() {
                slice_order.shuffle(&mut self.rng);
            }
            let mut state = self.model.zero_state();
            for (b, range) in batches.into_iter().enumerate() {
                let idx = &slice_order[range];
                let foreground = idx.iter().any(|&i| seq.labels[i].data().iter().any(|&g| g > 0.5));
                let passes = if foreground && self.doubling_active() { 2 } else { 1 };
                stats.batches += 1;
                stats.doubled += (passes == 2) as usize;
                let incoming = state.clone();
                for pass in 0..passes {
                    let (loss, next) = self.train_batch(seq, idx, &incoming)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite {
                            value: loss,
                            epoch: self.epoch,
                            volume: vol.id.clone(),
                            batch: b,
                        });
                    }
                    self.step += 1;
                    state = next;
                    stats.steps.push(StepLog {
                        step: self.step,
                        epoch: self.epoch,
                        volume: vol.id.clone(),
                        batch: b,
                        loss,
                        repeat: pass == 1,
                    });
                    if let (true, Some(val)) = (per_step, val) {
                        let v = self.validate(val)?;
                        self.observe(v);
                        stats.validations.push((self.step, v));
                    }
                }
            }
        }
        self.epoch += 1;
        Ok(stats)
    }
}

/// One row of the training curves; validation columns are empty on steps
/// without a validation.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dsi: Option<f64>,
}

pub const CURVES_HEADER: &str = "step,epoch,train_loss,val_loss,val_dsi";

pub fn curves_csv(rows: &[CurveRow], with_header: bool) -> String {
    let mut s = String::new();
    if with_header {
        s.push_str(CURVES_HEADER);
        s.push('\n');
    }
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step,
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_dsi)
        );
    }
    s
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVES_HEADER) {
        return Err(Error::Format("curves CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}`"))) };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("curves row `{l}` needs 5 fields")));
            }
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(CurveRow {
                step: num(f[0])? as u64,
                epoch: num(f[1])? as usize,
                train_loss: num(f[2])?,
                val_loss: opt(f[3])?,
                val_dsi: opt(f[4])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub curves: Vec<CurveRow>,
}

/// Where `fit` keeps its files; nothing is written when absent.
#[derive(Clone, Copy, Debug)]
pub struct FitOutput<'a> {
    pub dir: &'a Path,
}

impl FitOutput<'_> {
    pub fn best(&self) -> std::path::PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> std::path::PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn curves(&self) -> std::path::PathBuf {
        self.dir.join("curves.csv")
    }
}

/// Train until `cfg.epochs` epochs are complete, validating on schedule and
/// keeping the checkpoint with the highest validation DSI. With `output`,
/// `best.ckpt` is rewritten on every improvement, `last.ckpt` after every
/// epoch, and curve rows are appended to `curves.csv`.
pub fn fit(
    trainer: &mut Trainer,
    train: &[PreparedVolume],
    val: &[PreparedVolume],
    output: Option<FitOutput<'_>>,
    mut progress: impl FnMut(&Trainer, &EpochStats),
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if let Some(out) = output {
        std::fs::create_dir_all(out.dir)?;
        if !out.curves().exists() {
            std::fs::write(out.curves(), format!("{CURVES_HEADER}\n"))?;
        }
    }
    let mut curves = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let best_before = trainer.best_val_dsi;
        let mut stats = trainer.train_epoch(train, Some(val))?;
        let epoch_val = match trainer.cfg.validation {
            ValidationSchedule::EveryStep => None,
            ValidationSchedule::EveryEpochs(n) => {
                if trainer.epoch.is_multiple_of(n) || trainer.epoch == trainer.cfg.epochs {
                    let v = trainer.validate(val)?;
                    trainer.observe(v);
                    stats.validations.push((trainer.step, v));
                    Some(v)
                } else {
                    None
                }
            }
        };
        let mut rows: Vec<CurveRow> = stats
            .steps
            .iter()
            .map(|s| {
                let v = stats.validations.iter().find(|(step, _)| *step == s.step).map(|(_, v)| *v);
                CurveRow {
                    step: s.step,
                    epoch: s.epoch,
                    train_loss: s.loss,
                    val_loss: v.map(|v| v.loss),
                    val_dsi: v.map(|v| v.dsi),
                }
            })
            .collect();
        if let (Some(v), Some(last)) = (epoch_val, rows.last_mut()) {
            last.val_loss = Some(v.loss);
            last.val_dsi = Some(v.dsi);
        }
        if let Some(out) = output {
            if trainer.best_val_dsi > best_before {
                save_checkpoint(&trainer.best_checkpoint(), &out.best())?;
            }
            save_checkpoint(&trainer.checkpoint(), &out.last())?;
            let mut f = std::fs::OpenOptions::new().append(true).open(out.curves())?;
            f.write_all(curves_csv(&rows, false).as_bytes())?;
        }
        progress(trainer, &stats);
        curves.append(&mut rows);
    }
    Ok(FitOutcome {
        best: trainer.best_checkpoint(),
        last: trainer.checkpoint(),
        curves,
    })
}
