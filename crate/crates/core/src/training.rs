//! Joint spoofing/domain-adversarial training.
//!
//! Each step minimizes `L_s + alpha * L_d`, where `L_d` is computed on the
//! embedding after a gradient-reversal node of scale `lambda(p)`. The
//! reversal turns the domain loss into something the feature extractor
//! maximizes while the domain head still minimizes it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape};
use crate::corpus::{make_batches, CorpusSet, Example};
use crate::error::{Error, Result};
use crate::model::{DomainPath, ForwardOptions, Model};
use crate::stack::LayerStack;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeightMode {
    /// Inverse class frequency, `(N_bona + N_spoof) / (2 N_c)`.
    Ratio,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steepness of the reversal-strength warm-up.
    pub gamma: f64,
    pub class_weight_mode: ClassWeightMode,
    pub seed: u64,
    /// Training stacks longer than this are randomly cropped.
    pub segment_seconds: f64,
    /// Stack frames per second of audio.
    pub frame_rate: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            gamma: 10.0,
            class_weight_mode: ClassWeightMode::Ratio,
            seed: 0,
            segment_seconds: 4.0,
            frame_rate: 50.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha = {} must be finite and non-negative", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr = {} must be positive", self.lr));
        }
        if self.batch_size < 2 {
            problems.push(format!("batch_size = {} must be at least 2", self.batch_size));
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_owned());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            problems.push(format!("gamma = {} must be finite and non-negative", self.gamma));
        }
        if !(self.segment_seconds > 0.0) || !(self.frame_rate > 0.0) {
            problems.push("segment_seconds and frame_rate must be positive".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn segment_frames(&self) -> usize {
        ((self.segment_seconds * self.frame_rate).round() as usize).max(1)
    }
}

/// Reversal strength at training progress `p`: `2 / (1 + exp(-gamma p)) - 1`.
pub fn lambda_at(p: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("progress {p} outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-gamma * p).exp()) - 1.0)
}

/// Per-class loss weights `(N_bona + N_spoof) / (2 N_c)` from
/// `[bona fide, spoof]` counts.
pub fn class_weights(counts: [usize; 2]) -> Result<[f64; 2]> {
    if counts.contains(&0) {
        return Err(Error::Config(format!(
            "class weighting needs both classes, got {} bona fide and {} spoof",
            counts[0], counts[1]
        )));
    }
    let total = (counts[0] + counts[1]) as f64;
    Ok([total / (2.0 * counts[0] as f64), total / (2.0 * counts[1] as f64)])
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam with bias correction; moments are created lazily per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Parameter(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                let m_new = ADAM_BETA1 * mi.f64() + (1.0 - ADAM_BETA1) * gi;
                let v_new = ADAM_BETA2 * vi.f64() + (1.0 - ADAM_BETA2) * gi * gi;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let m_hat = m_new / c1;
                let v_hat = v_new / c2;
                *w = T::of(w.f64() - self.lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON));
            }
        }
        Ok(())
    }
}

/// Stacks and labels of one minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub stacks: Vec<Arc<LayerStack>>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    /// Gathers `indices` from `examples`, cropping stacks longer than
    /// `max_frames` to a random window.
    pub fn gather(examples: &[Example], indices: &[usize], max_frames: usize, rng: &mut ChaCha8Rng) -> Batch {
        let mut b = Batch {
            stacks: Vec::with_capacity(indices.len()),
            labels: Vec::with_capacity(indices.len()),
            domains: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let e = &examples[i];
            let stack = if e.stack.frames() > max_frames {
                Arc::new(e.stack.random_window(max_frames, rng))
            } else {
                Arc::clone(&e.stack)
            };
            b.stacks.push(stack);
            b.labels.push(e.label.index());
            b.domains.push(e.domain);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which loss a gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `L_s + alpha * L_d`, with `L_d` behind a reversal of scale `lambda`.
    Joint { alpha: f64, lambda: f64 },
    /// `L_s` alone.
    Spoof,
    /// `L_d` alone, through the given link.
    Domain(DomainPath),
}

/// Gradients of one objective on one batch, with both loss values.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub grads: BTreeMap<String, Tensor<T>>,
    pub loss_s: f64,
    /// NaN when the domain head was not evaluated.
    pub loss_d: f64,
    /// Correct domain predictions in the batch.
    pub domain_correct: usize,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn objective_gradients<T: Real>(
    model: &mut Model<T>,
    batch: &Batch,
    class_weights: [f64; 2],
    objective: Objective,
    mode: Mode,
    dropout_seed: u64,
) -> Result<StepGradients<T>> {
    let has_domain = model.config.domain_head.is_some();
    let domain = match objective {
        Objective::Joint { lambda, .. } if has_domain => DomainPath::Reversed(lambda),
        Objective::Joint { .. } | Objective::Spoof => DomainPath::Skip,
        Objective::Domain(path) => path,
    };
    let mut tape = Tape::new();
    let stacks: Vec<&LayerStack> = batch.stacks.iter().map(|s| s.as_ref()).collect();
    let out = model.forward(&mut tape, &stacks, ForwardOptions { mode, domain, dropout_seed })?;
    let weights = [T::of(class_weights[0]), T::of(class_weights[1])];
    let loss_s = tape.cross_entropy(out.spoof_logits, &batch.labels, &weights)?;
    let mut loss_d = None;
    let mut domain_correct = 0;
    if let Some(logits) = out.domain_logits {
        let d = model.config.num_domains();
        let ones = vec![T::one(); d];
        loss_d = Some(tape.cross_entropy(logits, &batch.domains, &ones)?);
        let values = tape.value(logits).data();
        domain_correct = batch
            .domains
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(&values[i * d..(i + 1) * d]) == y)
            .count();
    }
    let total = match (objective, loss_d) {
        (Objective::Joint { alpha, .. }, Some(ld)) => {
            let scaled = tape.scale(ld, T::of(alpha));
            tape.add(loss_s, scaled)?
        }
        (Objective::Domain(_), Some(ld)) => ld,
        (Objective::Domain(_), None) => {
            return Err(Error::Config("domain objective requested without a domain head".into()))
        }
        _ => loss_s,
    };
    let grads = tape.backward(total)?.named();
    Ok(StepGradients {
        grads,
        loss_s: tape.value(loss_s).item().f64(),
        loss_d: loss_d.map_or(f64::NAN, |v| tape.value(v).item().f64()),
        domain_correct,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss_s: f64,
    pub loss_d: f64,
    pub domain_correct: usize,
}

/// One optimizer step on `L_s + alpha * L_d`. `step` only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &Batch,
    class_weights: [f64; 2],
    alpha: f64,
    lambda: f64,
    dropout_seed: u64,
    step: usize,
) -> Result<StepStats> {
    let g = objective_gradients(model, batch, class_weights, Objective::Joint { alpha, lambda }, Mode::Train, dropout_seed)?;
    if !g.loss_s.is_finite() || g.loss_d.is_infinite() || (g.loss_d.is_nan() && model.config.domain_head.is_some()) {
        return Err(Error::Diverged {
            step,
            detail: format!("loss_s = {}, loss_d = {}", g.loss_s, g.loss_d),
        });
    }
    if let Some((name, _)) = g.grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite gradient for {name}"),
        });
    }
    opt.update(&mut model.params.tensors, &g.grads)?;
    Ok(StepStats {
        loss_s: g.loss_s,
        loss_d: g.loss_d,
        domain_correct: g.domain_correct,
    })
}

/// Mixes `(seed, epoch, step)` into one well-spread seed.
pub fn derive_seed(seed: u64, epoch: u64, step: u64) -> u64 {
    let mut z = seed;
    for v in [epoch, step] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss_s: f64,
    /// NaN without a domain head.
    pub loss_d: f64,
    /// Reversal strength of the epoch's last step.
    pub lambda: f64,
    /// Domain-head accuracy on the epoch's training batches; NaN without a
    /// domain head.
    pub domain_acc: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch\tloss_s\tloss_d\tlambda\tdomain_acc";

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.loss_s, self.loss_d, self.lambda, self.domain_acc
        )
    }
}

pub fn format_epoch_log(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(out, "{l}");
    }
    out
}

/// Checks that `model` can be trained on `set` under `cfg`.
pub fn check_compatible<T: Real>(model: &Model<T>, set: &CorpusSet, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let d = set.num_domains();
    if cfg.alpha > 0.0 && d < 2 {
        return Err(Error::Config(format!(
            "domain adversarial objective requires D ≥ 2 training corpora, got {d}"
        )));
    }
    if d >= 2 && model.config.num_domains() != d {
        return Err(Error::Config(format!(
            "model has {} domain outputs but the training set has {d} domains",
            model.config.num_domains()
        )));
    }
    if set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training utterances cannot fill one batch of {}",
            set.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

/// Trains `model` on `set`. `on_epoch` sees the log and model after every
/// epoch, e.g. to write a checkpoint.
pub fn train<T: Real>(
    model: &mut Model<T>,
    set: &CorpusSet,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    train_observed(model, set, cfg, |_| Ok(()), on_epoch)
}

/// One optimizer step as the trainer is about to take it.
pub struct StepView<'a, T> {
    /// 0-based over the whole run.
    pub step: usize,
    pub total_steps: usize,
    pub lambda: f64,
    pub batch: &'a Batch,
    /// Parameters before the update.
    pub model: &'a Model<T>,
    pub class_weights: [f64; 2],
    pub dropout_seed: u64,
}

/// [`train`] with a hook that sees every step before its update.
pub fn train_observed<T: Real>(
    model: &mut Model<T>,
    set: &CorpusSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepView<T>) -> Result<()>,
    mut on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    check_compatible(model, set, cfg)?;
    let examples = set.examples()?;
    for e in &examples {
        let m = &model.config.mhfa;
        if e.stack.layers() != m.num_layers || e.stack.dim() != m.frame_dim {
            return Err(Error::dim(
                "train",
                format!(
                    "{}: stack [{}, {}, {}] vs model layers {} dim {}",
                    e.utt_id,
                    e.stack.layers(),
                    e.stack.frames(),
                    e.stack.dim(),
                    m.num_layers,
                    m.frame_dim
                ),
            ));
        }
    }
    let weights = match cfg.class_weight_mode {
        ClassWeightMode::Ratio => class_weights(set.class_counts())?,
        ClassWeightMode::None => [1.0, 1.0],
    };
    let steps_per_epoch = examples.len() / cfg.batch_size;
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let max_frames = cfg.segment_frames();
    let mut opt = Adam::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut completed = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(examples.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let (mut sum_s, mut sum_d, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let mut lambda = 0.0;
        for (step, indices) in batches.iter().enumerate() {
            let step_seed = derive_seed(cfg.seed, epoch as u64, step as u64);
            let mut crop_rng = ChaCha8Rng::seed_from_u64(step_seed);
            let batch = Batch::gather(&examples, indices, max_frames, &mut crop_rng);
            lambda = lambda_at(completed as f64 / total_steps, cfg.gamma)?;
            on_step(&StepView {
                step: completed,
                total_steps: total_steps as usize,
                lambda,
                batch: &batch,
                model,
                class_weights: weights,
                dropout_seed: step_seed,
            })?;
            let stats = train_step(model, &mut opt, &batch, weights, cfg.alpha, lambda, step_seed, completed + 1)?;
            completed += 1;
            sum_s += stats.loss_s;
            sum_d += stats.loss_d;
            correct += stats.domain_correct;
            seen += batch.len();
        }
        let n = batches.len() as f64;
        let has_domain = model.config.domain_head.is_some();
        let log = EpochLog {
            epoch: epoch + 1,
            loss_s: sum_s / n,
            loss_d: sum_d / n,
            lambda,
            domain_acc: if has_domain { correct as f64 / seen as f64 } else { f64::NAN },
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}
