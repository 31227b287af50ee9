//! Optimization driver: batching, Adam, the temperature schedule, the epoch
//! loop with per-epoch evaluation, and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{pool_frames, Alignments, FeatureSequence};
use crate::kmeans::assign_targets;
use crate::model::{CodebookInit, LatentConfig, Model, Variant};
use crate::numerics::{Decimal, ParamSet, Rng, Tensor2};
use crate::objectives::{
    evaluation_loss, sample_noise, variant_loss, Batch, GumbelConfig, LossBreakdown, LossOptions,
};

/// Utterances sampled to seed the co-training codebook.
pub const CODEBOOK_SEED_UTTERANCES: usize = 3000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: LatentConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Multiplicative temperature decay per optimizer step.
    pub tau_decay: f64,
    pub straight_through: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Sub-batches evaluated in parallel per step. With 1 the run is
    /// bit-exactly reproducible; other values change the summation order.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CotrainExact,
            model: LatentConfig::default(),
            lr: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            tau_start: 2.0,
            tau_end: 0.5,
            tau_decay: 0.99995,
            straight_through: true,
            grad_clip: None,
            threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.variant)?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return bad(format!(
                "need 0 < tau_end <= tau_start, got {} and {}",
                self.tau_end, self.tau_start
            ));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return bad(format!(
                "tau_decay must be in (0, 1], got {}",
                self.tau_decay
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    /// Every setting as `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("variant", self.variant.to_string()),
            ("codebook_size", m.codebook_size.to_string()),
            ("shift", m.shift.to_string()),
            ("frame_dim", m.frame_dim.to_string()),
            ("hidden", m.hidden.to_string()),
            ("layers", m.layers.to_string()),
            ("codeword_dim", m.codeword_dim.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("tau_start", self.tau_start.to_string()),
            ("tau_end", self.tau_end.to_string()),
            ("tau_decay", self.tau_decay.to_string()),
            ("straight_through", self.straight_through.to_string()),
            (
                "grad_clip",
                self.grad_clip.map_or("none".to_string(), |c| c.to_string()),
            ),
            ("threads", self.threads.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "codebook_size" => m.codebook_size = parse(key, value)?,
            "shift" => m.shift = parse(key, value)?,
            "frame_dim" => m.frame_dim = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "codeword_dim" => m.codeword_dim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "tau_start" => self.tau_start = parse(key, value)?,
            "tau_end" => self.tau_end = parse(key, value)?,
            "tau_decay" => self.tau_decay = parse(key, value)?,
            "straight_through" => self.straight_through = parse(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value.trim() {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("expected key=value, got {line:?}"))
            })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

/// `max(tau_end, tau_start · tau_decay^step)`.
pub fn temperature(step: u64, cfg: &TrainConfig) -> f64 {
    let t = cfg.tau_start * cfg.tau_decay.powf(step as f64);
    t.max(cfg.tau_end)
}

/// Shuffled utterance indices cut into batches (the last may be short).
pub fn make_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Training utterances (those longer than the shift) and, for HuBERT-like
/// training, their targets.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub sequences: Vec<&'a FeatureSequence>,
    pub targets: Option<Alignments>,
}

impl<'a> TrainData<'a> {
    pub fn new(
        data: &'a [FeatureSequence],
        shift: usize,
        targets: Option<Alignments>,
    ) -> Result<Self> {
        let mut sequences = Vec::with_capacity(data.len());
        for s in data {
            if s.len() <= shift {
                log::warn!(
                    "utterance {} has {} frames, not more than the shift {shift}; skipped",
                    s.utt_id,
                    s.len()
                );
            } else {
                sequences.push(s);
            }
        }
        if sequences.is_empty() {
            return Err(Error::InvalidArgument(
                "no utterance is longer than the time shift".into(),
            ));
        }
        if let Some(t) = &targets {
            for s in &sequences {
                t.require(&s.utt_id, s.len())?;
            }
        }
        Ok(Self { sequences, targets })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn owned(&self) -> Vec<FeatureSequence> {
        self.sequences.iter().map(|s| (*s).clone()).collect()
    }

    /// Valid prediction positions over the whole set.
    pub fn valid_frames(&self, shift: usize) -> usize {
        self.sequences.iter().map(|s| s.len() - shift).sum()
    }
}

/// Per-epoch evaluation record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub objective: f64,
    pub ce: f64,
    pub recon: f64,
    pub entropy: f64,
}

impl EpochLog {
    fn from_breakdown(epoch: u64, b: &LossBreakdown) -> Self {
        Self {
            epoch,
            objective: b.per_frame_objective,
            ce: b.ce,
            recon: b.recon,
            entropy: b.entropy,
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,variant,objective,ce,recon,entropy";

pub fn loss_csv(variant: Variant, history: &[EpochLog]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            h.epoch,
            variant,
            Decimal(h.objective),
            Decimal(h.ce),
            Decimal(h.recon),
            Decimal(h.entropy)
        );
    }
    s
}

pub fn write_loss_csv(
    path: impl AsRef<Path>,
    variant: Variant,
    history: &[EpochLog],
) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(variant, history).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    /// Optimizer updates so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// Fresh model, optimizer and RNG, with the epoch-0 evaluation logged.
///
/// The co-training codebook is seeded by k-means++ over the frames of up to
/// [`CODEBOOK_SEED_UTTERANCES`] training utterances; HuBERT-like training
/// needs the k-means `centroids`; VQ-APC and APC start from random weights.
pub fn init_state(
    cfg: &TrainConfig,
    data: &mut TrainData<'_>,
    centroids: Option<&Tensor2<f32>>,
) -> Result<TrainState> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let pool;
    let codebook = match cfg.variant {
        Variant::CotrainExact | Variant::CotrainGumbel => {
            let mut pick = rng.sample_indices(data.len(), CODEBOOK_SEED_UTTERANCES);
            pick.sort_unstable();
            let sample: Vec<FeatureSequence> =
                pick.iter().map(|&i| data.sequences[i].clone()).collect();
            pool = pool_frames(&sample);
            CodebookInit::SampleFrames(&pool)
        }
        Variant::HubertLike => CodebookInit::Fixed(
            centroids
                .ok_or_else(|| {
                    Error::InvalidArgument("hubert-like training needs k-means centroids".into())
                })?
                .clone(),
        ),
        Variant::VqApc | Variant::Apc => CodebookInit::Random,
    };
    let model = Model::init(cfg.model.clone(), cfg.variant, codebook, &mut rng)?;
    prepare_targets(&model, data)?;
    let adam = AdamState::new(&model.params);
    let eval = evaluate(&model, data, cfg.batch_size)?;
    Ok(TrainState {
        model,
        adam,
        rng,
        epoch: 0,
        history: vec![EpochLog::from_breakdown(0, &eval)],
    })
}

/// HuBERT-like training without explicit targets uses the nearest codeword
/// of every frame under the (clamped) codebook.
pub fn prepare_targets(model: &Model<f32>, data: &mut TrainData<'_>) -> Result<()> {
    if model.variant == Variant::HubertLike && data.targets.is_none() {
        let v = model.codebook().expect("hubert-like model has a codebook");
        data.targets = Some(assign_targets(&data.owned(), v)?);
    }
    Ok(())
}

/// Noise-free evaluation over the whole set in its stored order.
pub fn evaluate(
    model: &Model<f32>,
    data: &TrainData<'_>,
    batch_size: usize,
) -> Result<LossBreakdown> {
    let k = model.config.shift;
    let opts = LossOptions {
        norm: Some(data.valid_frames(k) as f64),
        ..LossOptions::value_only()
    };
    let mut acc = LossBreakdown::default();
    for chunk in data.sequences.chunks(batch_size.max(1)) {
        let batch = Batch::from_sequences(chunk, None)?;
        acc.accumulate(&evaluation_loss(&batch, model, &opts)?);
    }
    Ok(acc)
}

/// Loss and gradients for one batch of utterance indices, split into
/// `threads` contiguous sub-batches that are reduced in order.
pub fn batch_gradients(
    model: &Model<f32>,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    indices: &[usize],
    tau: f64,
    rng: &mut Rng,
) -> Result<(LossBreakdown, ParamSet<f32>)> {
    let k = model.config.shift;
    let seqs: Vec<&FeatureSequence> = indices.iter().map(|&i| data.sequences[i]).collect();
    let per: Vec<usize> = seqs.iter().map(|s| s.len() - k).collect();
    let total: usize = per.iter().sum();
    let noise = model
        .variant
        .uses_gumbel()
        .then(|| sample_noise(rng, total, model.config.codebook_size));
    let gumbel = GumbelConfig {
        temperature: tau,
        straight_through: cfg.straight_through,
    };
    let targets = match model.variant {
        Variant::HubertLike => data.targets.as_ref(),
        _ => None,
    };
    let parts = cfg.threads.clamp(1, seqs.len());
    let size = seqs.len().div_ceil(parts);
    let mut jobs = vec![];
    let mut offset = 0;
    for chunk in seqs.chunks(size) {
        let frames: usize = chunk.iter().map(|s| s.len() - k).sum();
        jobs.push((chunk, offset..offset + frames));
        offset += frames;
    }
    let opts = LossOptions {
        norm: Some(total as f64),
        ..LossOptions::default()
    };
    let run = |(chunk, rows): &(&[&FeatureSequence], std::ops::Range<usize>)| {
        let batch = Batch::from_sequences(chunk, targets)?;
        let sub = noise.as_ref().map(|n| {
            if jobs.len() == 1 {
                n.clone()
            } else {
                n.gather_rows(&rows.clone().collect::<Vec<_>>())
            }
        });
        variant_loss(&batch, model, &gumbel, sub.as_ref(), &opts)
    };
    let outputs: Vec<_> = if jobs.len() == 1 {
        vec![run(&jobs[0])]
    } else {
        jobs.par_iter().map(run).collect()
    };
    let mut acc = LossBreakdown::default();
    let mut grads: Option<ParamSet<f32>> = None;
    for out in outputs {
        let out = out?;
        acc.accumulate(&out.breakdown);
        let g = out.grads.expect("gradients requested");
        match &mut grads {
            None => grads = Some(g),
            Some(sum) => sum.add_assign(&g),
        }
    }
    Ok((acc, grads.expect("at least one sub-batch")))
}

fn clip_gradients(grads: &mut ParamSet<f32>, names: &[String], max_norm: f64) {
    let norm: f64 = names
        .iter()
        .map(|n| grads.get(n).sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for n in names {
            grads.get_mut(n).scale(s);
        }
    }
}

/// One pass over the shuffled training set followed by an evaluation pass.
pub fn train_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
) -> Result<EpochLog> {
    let trainable = state.model.trainable();
    let plan = make_batches(data.len(), cfg.batch_size, &mut state.rng);
    for indices in plan {
        let tau = temperature(state.adam.step, cfg);
        let (loss, mut grads) =
            batch_gradients(&state.model, cfg, data, &indices, tau, &mut state.rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at epoch {} step {}",
                state.epoch + 1,
                state.adam.step
            )));
        }
        if let Some(c) = cfg.grad_clip {
            clip_gradients(&mut grads, &trainable, c);
        }
        adam_step(
            &mut state.model.params,
            &grads,
            &mut state.adam,
            cfg.lr,
            &trainable,
        )?;
    }
    state.epoch += 1;
    let eval = evaluate(&state.model, data, cfg.batch_size)?;
    if !eval.is_finite() {
        return Err(Error::NonFinite(format!(
            "evaluation after epoch {}",
            state.epoch
        )));
    }
    let log = EpochLog::from_breakdown(state.epoch, &eval);
    state.history.push(log);
    Ok(log)
}

/// Runs epochs until `cfg.epochs` are complete, calling `after_epoch` after
/// each one (for checkpointing and logging). On error the state holds the
/// last consistent parameters, suitable for a diagnostic checkpoint.
pub fn train<C>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    mut after_epoch: C,
) -> Result<()>
where
    C: FnMut(&TrainState) -> Result<()>,
{
    while state.epoch < cfg.epochs {
        let log = train_epoch(state, cfg, data)?;
        log::info!(
            "epoch {} {}: objective {:.4} ce {:.4} recon {:.4} entropy {:.4}",
            log.epoch,
            cfg.variant,
            log.objective,
            log.ce,
            log.recon,
            log.entropy
        );
        after_epoch(state)?;
    }
    Ok(())
}
