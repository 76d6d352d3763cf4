//! Optimizers, the step learning-rate schedule, seeded epoch loop and
//! top-k evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{labels, EfvConfig, EfvModel, Mode};
use crate::nn::{ParamStore, Tape};
use crate::representations::{FrameStack, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    /// Random ±2 pixel shift of the frame stack, drawn from the seeded epoch stream.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            lr_decay: 0.1,
            decay_period: 60,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            mode: Mode::Fused,
            optimizer: OptimizerConfig::default(),
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if self.decay_period == 0 {
            return bad("decay_period must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        match self.optimizer {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return bad("adam needs 0 <= beta < 1 and eps > 0");
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad("sgd momentum must lie in [0, 1)");
                }
            }
        }
        Ok(())
    }
}

/// `base_lr · lr_decay^⌊epoch / decay_period⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_period.max(1)) as i32;
    // dividing by 10 is exact where multiplying by 0.1 is not
    let inverse = 1.0 / cfg.lr_decay;
    if inverse.fract() == 0.0 {
        cfg.base_lr / inverse.powi(steps)
    } else {
        cfg.base_lr * cfg.lr_decay.powi(steps)
    }
}

/// Per-parameter optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.len()]).collect::<Vec<_>>();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second,
        }
    }

    /// Rebuilds an optimizer from saved moments, checking them against `store`.
    pub fn from_saved(
        config: OptimizerConfig,
        step: u64,
        first: Vec<Vec<f32>>,
        second: Vec<Vec<f32>>,
        store: &ParamStore<f32>,
    ) -> Result<Self> {
        let fresh = Self::new(config, store);
        let fits = |saved: &[Vec<f32>], want: &[Vec<f32>]| {
            saved.len() == want.len() && saved.iter().zip(want).all(|(a, b)| a.len() == b.len())
        };
        if !fits(&first, &fresh.first) || !fits(&second, &fresh.second) {
            return Err(Error::FormatMismatch("optimizer moments do not match the parameters".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    /// First and (for Adam) second moments, indexed like the store.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.first, &self.second)
    }

    /// Applies one update with learning rate `lr`; `grads` is indexed like the store.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        match self.config {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                let step = (lr / c1) as f32;
                let c2 = c2 as f32;
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
                for id in ids {
                    let (m, v, g) = (&mut self.first[id.0], &mut self.second[id.0], &grads[id.0]);
                    for ((w, (m, v)), &g) in store.values_mut(id).iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= step * *m / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                let (mu, lr) = (momentum as f32, lr as f32);
                for id in ids {
                    let (m, g) = (&mut self.first[id.0], &grads[id.0]);
                    for ((w, m), &g) in store.values_mut(id).iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = mu * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
        }
    }
}

/// Everything a training worker owns.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: EfvModel,
    pub params: ParamStore<f32>,
    pub optimizer: Optimizer,
    /// Completed epochs; training resumes at this epoch index.
    pub epochs_done: usize,
}

impl ModelState {
    pub fn new(config: EfvConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let (model, params) = EfvModel::new(config, train.mode)?;
        Ok(Self::from_parts(model, params, train.optimizer))
    }

    pub fn from_parts(model: EfvModel, params: ParamStore<f32>, optimizer: OptimizerConfig) -> Self {
        let optimizer = Optimizer::new(optimizer, &params);
        Self {
            model,
            params,
            optimizer,
            epochs_done: 0,
        }
    }

    /// Log-probabilities `[B · classes]` without recording gradients for later use.
    pub fn log_probs(&self, samples: &[&Sample]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.model.forward(&mut tape, &p, samples)?;
        Ok(tape.value(out).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub eval_top1: Option<f64>,
    pub eval_top5: Option<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_top1,eval_top1,eval_top5,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:.8},{:.6},{},{},{:.3}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_top1,
            opt(self.eval_top1),
            opt(self.eval_top5),
            self.seconds
        )
    }
}

pub fn format_log(logs: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Parses a training log written by [`format_log`].
pub fn parse_log(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        Some((i, _)) => {
            return Err(Error::MalformedLine {
                line: i + 1,
                reason: format!("expected header `{LOG_HEADER}`"),
            })
        }
        None => return Err(Error::EmptyDataset),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |reason: String| Error::MalformedLine { line: i + 1, reason };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|e| bad(format!("epoch `{}`: {e}", f[0])))?,
            lr: num(f[1])?,
            train_loss: num(f[2])?,
            train_top1: num(f[3])?,
            eval_top1: opt(f[4])?,
            eval_top5: opt(f[5])?,
            seconds: num(f[6])?,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Seeded RNG for a given epoch; independent of how many epochs ran before.
pub fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | purpose);
    rng
}

/// Sample order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    order
}

/// Shifts every frame by `(dy, dx)` pixels, filling with zeros.
pub fn shift_frames(frames: &FrameStack, dy: i32, dx: i32) -> FrameStack {
    let (h, w) = (frames.height as i32, frames.width as i32);
    let mut out = FrameStack::zeros(frames.frames, frames.height, frames.width);
    for plane in 0..frames.frames * 2 {
        let base = plane * (h * w) as usize;
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    out.data[base + (y * w + x) as usize] = frames.data[base + (sy * w + sx) as usize];
                }
            }
        }
    }
    out
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Position of `target` when classes are sorted by descending score, lower index first on ties.
pub fn rank_of(row: &[f32], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// One optimizer pass over `data` in the seeded order for `epoch`.
pub fn train_epoch(state: &mut ModelState, data: &[Sample], cfg: &TrainConfig, epoch: usize) -> Result<EpochLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let lr = lr_schedule(epoch, cfg);
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut aug_rng = epoch_rng(cfg.seed, epoch, 1);
    let classes = state.model.config.classes;
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);

    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let shifted: Vec<Sample>;
        let batch: Vec<&Sample> = if cfg.augment {
            shifted = chunk
                .iter()
                .map(|&i| {
                    let mut s = data[i].clone();
                    s.frames = shift_frames(&s.frames, aug_rng.random_range(-2..=2), aug_rng.random_range(-2..=2));
                    s
                })
                .collect();
            shifted.iter().collect()
        } else {
            chunk.iter().map(|&i| &data[i]).collect()
        };
        let targets = labels(&batch, classes)?;

        let mut tape = Tape::new();
        let p = state.params.bind(&mut tape);
        let (loss, log_probs) = state.model.loss(&mut tape, &p, &batch)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: value as f64,
                epoch,
                batch: b,
            });
        }
        loss_sum += value as f64 * batch.len() as f64;
        correct += tape
            .value(log_probs)
            .chunks(classes)
            .zip(&targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();

        let mut grads = tape.backward(loss);
        let grads = p.gradients(&state.params, &mut grads);
        drop(tape);
        state.optimizer.update(&mut state.params, &grads, lr);
    }

    state.epochs_done = epoch + 1;
    Ok(EpochLog {
        epoch,
        lr,
        train_loss: loss_sum / data.len() as f64,
        train_top1: correct as f64 / data.len() as f64,
        eval_top1: None,
        eval_top5: None,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Top-1/top-5 and confusion matrix from row-major scores `[n, classes]`.
pub fn score_predictions(scores: &[f32], targets: &[usize], classes: usize) -> EvalReport {
    let mut confusion = vec![vec![0u64; classes]; classes];
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0f64);
    for (row, &t) in scores.chunks(classes).zip(targets) {
        let rank = rank_of(row, t);
        top1 += (rank < 1) as usize;
        top5 += (rank < 5) as usize;
        confusion[t][argmax(row)] += 1;
        loss -= row[t] as f64;
    }
    let n = targets.len().max(1) as f64;
    EvalReport {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        mean_loss: loss / n,
        confusion,
    }
}

pub const EVAL_BATCH: usize = 32;

pub fn evaluate(state: &ModelState, data: &[Sample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = state.model.config.classes;
    let refs: Vec<&Sample> = data.iter().collect();
    let targets = labels(&refs, classes)?;
    let mut scores = Vec::with_capacity(data.len() * classes);
    for chunk in refs.chunks(EVAL_BATCH) {
        scores.extend(state.log_probs(chunk)?);
    }
    Ok(score_predictions(&scores, &targets, classes))
}

/// Trains from `state.epochs_done` up to `cfg.epochs`, evaluating on `eval`
/// after every epoch when given.
pub fn fit(
    state: &mut ModelState,
    train: &[Sample],
    eval: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in state.epochs_done..cfg.epochs {
        let mut log = train_epoch(state, train, cfg, epoch)?;
        if let Some(eval) = eval {
            let started = Instant::now();
            let r = evaluate(state, eval)?;
            log.eval_top1 = Some(r.top1);
            log.eval_top5 = Some(r.top5);
            log.seconds += started.elapsed().as_secs_f64();
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
