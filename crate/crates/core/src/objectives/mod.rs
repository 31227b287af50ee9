//! Per-batch training losses and their gradients.
//!
//! Every loss is a mean over the valid prediction positions of a batch (or
//! a sum divided by an externally supplied `norm`, so that sub-batches
//! evaluated on different threads add up to the full-batch value).
//!
//! The co-training summand for one position is
//! `Σ_z q(z) [-ln q(z) + ln p(x_{t+k} | z) + ln p(z | x_{1:t})]`
//! and the loss minimized is its negated mean.

mod batch;

pub use batch::{Batch, ValidFrames};

use crate::error::{Error, Result};
use crate::features::Alignments;
use crate::model::{
    gaussian_log_norm, LstmTrace, Model, Variant, APC_HEAD, CODEBOOK, OUT_W, PROJ_U,
};
use crate::model::{lstm_backward, lstm_forward};
use crate::numerics::{
    argmax, argmin, grad_check, log_softmax_in_place, logsumexp_unchecked, sq_dist_matrix,
    GradCheckReport, Op, ParamSet, Real, Rng, Tensor2,
};

/// Per-frame code targets `z*_t`, for HuBERT-like training.
pub type HardTargets = Alignments;

/// Loss terms, each a sum over positions divided by the normalizer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// The value minimized.
    pub total: f64,
    /// `E_q[-ln p(z | x_{1:t})]`.
    pub ce: f64,
    /// `E_q[-ln p(x_{t+k} | z)]`.
    pub recon: f64,
    /// `H(q)`.
    pub entropy: f64,
    /// Mean co-training summand (larger is better).
    pub per_frame_objective: f64,
    /// Positions that contributed.
    pub frames: usize,
}

impl LossBreakdown {
    /// Adds another partial result computed with the same normalizer.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.ce += other.ce;
        self.recon += other.recon;
        self.entropy += other.entropy;
        self.per_frame_objective += other.per_frame_objective;
        self.frames += other.frames;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.ce,
            self.recon,
            self.entropy,
            self.per_frame_objective,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Unnormalized terms of one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTerms {
    pub ce: f64,
    pub recon: f64,
    pub entropy: f64,
}

impl FrameTerms {
    /// `H(q) + E_q[ln p(x|z)] + E_q[ln p(z|x_{1:t})]`.
    pub fn objective(&self) -> f64 {
        self.entropy - self.recon - self.ce
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub breakdown: LossBreakdown,
    /// Gradients of `breakdown.total`, zero for blocks the loss does not touch.
    pub grads: Option<ParamSet<F>>,
    /// Filled when [`LossOptions::keep_frame_terms`] is set.
    pub frame_terms: Vec<FrameTerms>,
}

/// Which distribution plays the role of `q` in the exact loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QSource {
    /// The confirmation network.
    #[default]
    Confirmation,
    /// The exact posterior `p(z | x_{1:t}, x_{t+k})`; makes the summand equal
    /// to the marginal log-likelihood. Value only, no gradients.
    Posterior,
    /// One-hot at the nearest codeword (the k-means assignment). Value only.
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOptions {
    /// Divisor for all sums; defaults to the batch's own valid-position count.
    pub norm: Option<f64>,
    pub need_grad: bool,
    /// Scale `β` in `q ∝ exp(-β ||x - v||²)`; 1 is the model as defined.
    pub sharpness: f64,
    pub q_source: QSource,
    pub keep_frame_terms: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            norm: None,
            need_grad: true,
            sharpness: 1.0,
            q_source: QSource::Confirmation,
            keep_frame_terms: false,
        }
    }
}

impl LossOptions {
    pub fn value_only() -> Self {
        Self {
            need_grad: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// One-hot forward value with the relaxed sample's gradient.
    pub straight_through: bool,
}

impl GumbelConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            temperature,
            straight_through: true,
        })
    }
}

/// Relaxed sample `softmax((logits + g) / τ)`.
pub fn gumbel_softmax<F: Real>(logits: &[F], noise: &[f64], tau: f64) -> Vec<f64> {
    let mut y: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(&l, &g)| (l.f64() + g) / tau)
        .collect();
    log_softmax_in_place(&mut y);
    y.iter_mut().for_each(|v| *v = v.exp());
    y
}

/// One-hot vector at the first maximum of `y`.
pub fn one_hot_argmax(y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    out[argmax(y)] = 1.0;
    out
}

/// Standard Gumbel noise for `frames` positions over `codes` codes.
pub fn sample_noise(rng: &mut Rng, frames: usize, codes: usize) -> Tensor2<f64> {
    Tensor2::from_vec(frames, codes, rng.gumbel(frames * codes)).expect("shape")
}

struct Forward<F> {
    valid: ValidFrames,
    trace: LstmTrace<F>,
    hv: Tensor2<F>,
    x: Tensor2<F>,
    norm: f64,
}

fn forward<F: Real>(batch: &Batch<F>, model: &Model<F>, opts: &LossOptions) -> Result<Forward<F>> {
    let k = model.config.shift;
    if batch.frame_dim() != model.config.frame_dim {
        return Err(Error::Shape(format!(
            "batch frames have dimension {}, model expects {}",
            batch.frame_dim(),
            model.config.frame_dim
        )));
    }
    for (id, &len) in batch.utt_ids.iter().zip(&batch.lengths) {
        if len <= k {
            log::warn!("utterance {id} has {len} frames, not more than the shift {k}; skipped");
        }
    }
    let valid = batch.valid_frames(k);
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "batch has no frame with a future frame inside its utterance".into(),
        ));
    }
    let norm = opts.norm.unwrap_or(valid.len() as f64);
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss normalizer {norm} must be positive"
        )));
    }
    let trace = lstm_forward(
        &model.params,
        model.config.layers,
        &batch.inputs,
        batch.batch,
    );
    let hv = trace.top().gather_rows(&valid.hidden_rows);
    let x = batch.inputs.gather_rows(&valid.future_rows);
    Ok(Forward {
        valid,
        trace,
        hv,
        x,
        norm,
    })
}

fn block<'a, F: Real>(model: &'a Model<F>, name: &str) -> Result<&'a Tensor2<F>> {
    model.params.try_get(name).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{} model has no {name} block",
            model.variant.name()
        ))
    })
}

/// Row-wise `log softmax(h_t U)` in `f64`.
fn predictor_log_probs<F: Real>(hv: &Tensor2<F>, u: &Tensor2<F>) -> Tensor2<f64> {
    let mut logp: Tensor2<f64> = Tensor2::matmul(hv, Op::N, u, Op::N).cast();
    for i in 0..logp.rows() {
        log_softmax_in_place(logp.row_mut(i));
    }
    logp
}

/// Backpropagates `d_hv` (gradient w.r.t. the gathered top hidden states)
/// through the LSTM.
fn backward_hidden<F: Real>(
    model: &Model<F>,
    fwd: &Forward<F>,
    d_hv: &Tensor2<F>,
    grads: &mut ParamSet<F>,
) {
    let mut d_top = Tensor2::zeros(fwd.trace.top().rows(), fwd.trace.top().cols());
    for (i, &r) in fwd.valid.hidden_rows.iter().enumerate() {
        d_top.row_mut(r).copy_from_slice(d_hv.row(i));
    }
    lstm_backward(&model.params, &fwd.trace, d_top, grads);
}

/// Gradient through the predictor scores `h_t U`.
fn backward_predictor<F: Real>(
    model: &Model<F>,
    fwd: &Forward<F>,
    d_scores: &Tensor2<f64>,
    grads: &mut ParamSet<F>,
) {
    let d_scores: Tensor2<F> = d_scores.cast();
    let u = model.params.get(PROJ_U);
    grads
        .get_mut(PROJ_U)
        .gemm(F::one(), &fwd.hv, Op::T, &d_scores, Op::N, F::one());
    let d_hv = Tensor2::matmul(&d_scores, Op::N, u, Op::T);
    backward_hidden(model, fwd, &d_hv, grads);
}

/// Gradient w.r.t. codewords from a gradient w.r.t. `D_ij = ||x_i - v_j||²`:
/// `dV_j = Σ_i dD_ij · 2 (v_j - x_i)`.
fn backward_distances<F: Real>(
    x: &Tensor2<F>,
    v: &Tensor2<F>,
    d_dist: &Tensor2<f64>,
    grads: &mut ParamSet<F>,
) {
    let d_dist_f: Tensor2<F> = d_dist.cast();
    let col = d_dist.col_sums();
    let g = grads.get_mut(CODEBOOK);
    g.gemm(F::of(-2.0), &d_dist_f, Op::T, x, Op::N, F::one());
    for j in 0..v.rows() {
        let s = F::of(2.0 * col[j]);
        for (gv, &vv) in g.row_mut(j).iter_mut().zip(v.row(j)) {
            *gv += s * vv;
        }
    }
}

fn finish<F: Real>(
    sums: [f64; 5],
    fwd: &Forward<F>,
    grads: Option<ParamSet<F>>,
    frame_terms: Vec<FrameTerms>,
) -> LossOutput<F> {
    let n = fwd.norm;
    LossOutput {
        breakdown: LossBreakdown {
            total: sums[0] / n,
            ce: sums[1] / n,
            recon: sums[2] / n,
            entropy: sums[3] / n,
            per_frame_objective: sums[4] / n,
            frames: fwd.valid.len(),
        },
        grads,
        frame_terms,
    }
}

/// `ln p(x|z)` for every code, from squared distances.
fn log_generation(dist: &[f64], log_norm: f64) -> Vec<f64> {
    dist.iter().map(|&d| log_norm - 0.5 * d).collect()
}

/// `(-E_q[ln p], -E_q[ln g], H(q))` skipping zero-probability codes.
fn expectations(q: &[f64], logq: &[f64], logg: &[f64], logp: &[f64]) -> FrameTerms {
    let mut t = FrameTerms {
        ce: 0.0,
        recon: 0.0,
        entropy: 0.0,
    };
    for j in 0..q.len() {
        if q[j] > 0.0 {
            t.ce -= q[j] * logp[j];
            t.recon -= q[j] * logg[j];
            t.entropy -= q[j] * logq[j];
        }
    }
    t
}

/// Co-training loss with the expectation over `q` computed exactly.
pub fn cotrain_exact_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    opts: &LossOptions,
) -> Result<LossOutput<F>> {
    if opts.q_source != QSource::Confirmation && opts.need_grad {
        return Err(Error::InvalidArgument(
            "only the confirmation network's q supports gradients".into(),
        ));
    }
    let fwd = forward(batch, model, opts)?;
    let u = block(model, PROJ_U)?;
    let v = block(model, CODEBOOK)?;
    let logp = predictor_log_probs(&fwd.hv, u);
    let dist: Tensor2<f64> = sq_dist_matrix(&fwd.x, v)?.cast();
    let log_norm = gaussian_log_norm(v.cols());
    let (n, codes) = (fwd.valid.len(), v.rows());
    let beta = opts.sharpness;
    let mut d_scores = Tensor2::zeros(n, codes);
    let mut d_dist = Tensor2::zeros(n, codes);
    let mut sums = [0.0; 5];
    let mut frame_terms = vec![];
    for i in 0..n {
        let logg = log_generation(dist.row(i), log_norm);
        let lp = logp.row(i);
        let mut logq: Vec<f64> = match opts.q_source {
            QSource::Confirmation => dist.row(i).iter().map(|&d| -beta * d).collect(),
            QSource::Posterior => logg.iter().zip(lp).map(|(a, b)| a + b).collect(),
            QSource::Nearest => {
                let z = argmin(dist.row(i));
                (0..codes)
                    .map(|j| if j == z { 0.0 } else { f64::NEG_INFINITY })
                    .collect()
            }
        };
        log_softmax_in_place(&mut logq);
        let q: Vec<f64> = logq.iter().map(|l| l.exp()).collect();
        let t = expectations(&q, &logq, &logg, lp);
        let s = t.objective();
        sums[1] += t.ce;
        sums[2] += t.recon;
        sums[3] += t.entropy;
        sums[4] += s;
        if opts.keep_frame_terms {
            frame_terms.push(t);
        }
        if opts.need_grad {
            for j in 0..codes {
                d_scores[(i, j)] = (lp[j].exp() - q[j]) / fwd.norm;
                if q[j] > 0.0 {
                    let a = -logq[j] + logg[j] + lp[j];
                    d_dist[(i, j)] = (0.5 * q[j] + beta * q[j] * (a - s)) / fwd.norm;
                }
            }
        }
    }
    sums[0] = -sums[4];
    let grads = opts.need_grad.then(|| {
        let mut g = model.params.zeros_like();
        backward_distances(&fwd.x, v, &d_dist, &mut g);
        backward_predictor(model, &fwd, &d_scores, &mut g);
        g
    });
    Ok(finish(sums, &fwd, grads, frame_terms))
}

fn check_noise(noise: &Tensor2<f64>, n: usize, codes: usize) -> Result<()> {
    if noise.shape() != (n, codes) {
        return Err(Error::Shape(format!(
            "Gumbel noise is {:?}, need {n}x{codes}",
            noise.shape()
        )));
    }
    Ok(())
}

/// Co-training loss with the cross-entropy term replaced by a single
/// Gumbel-softmax sample from `q`. Entropy and reconstruction stay exact, and
/// `per_frame_objective` is the exact co-training objective.
///
/// `noise` holds one row of standard Gumbel draws per valid position, in
/// [`Batch::valid_frames`] order.
pub fn cotrain_gumbel_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    gumbel: &GumbelConfig,
    noise: &Tensor2<f64>,
    opts: &LossOptions,
) -> Result<LossOutput<F>> {
    let fwd = forward(batch, model, opts)?;
    let u = block(model, PROJ_U)?;
    let v = block(model, CODEBOOK)?;
    let logp = predictor_log_probs(&fwd.hv, u);
    let dist: Tensor2<f64> = sq_dist_matrix(&fwd.x, v)?.cast();
    let log_norm = gaussian_log_norm(v.cols());
    let (n, codes) = (fwd.valid.len(), v.rows());
    check_noise(noise, n, codes)?;
    let tau = gumbel.temperature;
    let mut d_scores = Tensor2::zeros(n, codes);
    let mut d_dist = Tensor2::zeros(n, codes);
    let mut sums = [0.0; 5];
    let mut frame_terms = vec![];
    for i in 0..n {
        let logg = log_generation(dist.row(i), log_norm);
        let lp = logp.row(i);
        let mut logq: Vec<f64> = dist.row(i).iter().map(|&d| -d).collect();
        log_softmax_in_place(&mut logq);
        let q: Vec<f64> = logq.iter().map(|l| l.exp()).collect();
        let exact = expectations(&q, &logq, &logg, lp);

        let y = gumbel_softmax(&logq, noise.row(i), tau);
        let y_fwd = if gumbel.straight_through {
            one_hot_argmax(&y)
        } else {
            y.clone()
        };
        let ce: f64 = y_fwd
            .iter()
            .zip(lp)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, l)| -w * l)
            .sum();
        let t = FrameTerms { ce, ..exact };
        sums[0] += ce + exact.recon - exact.entropy;
        sums[1] += ce;
        sums[2] += exact.recon;
        sums[3] += exact.entropy;
        sums[4] += exact.objective();
        if opts.keep_frame_terms {
            frame_terms.push(t);
        }
        if opts.need_grad {
            // R = Σ q (ln g - ln q); the exact part of the loss is -R.
            let r = exact.entropy - exact.recon;
            let c_bar: f64 = y.iter().zip(lp).map(|(a, l)| -a * l).sum();
            for j in 0..codes {
                d_scores[(i, j)] = (lp[j].exp() - y_fwd[j]) / fwd.norm;
                let mut g = 0.0;
                if q[j] > 0.0 {
                    g += 0.5 * q[j] + q[j] * (logg[j] - logq[j] - r);
                }
                g -= y[j] * (-lp[j] - c_bar) / tau;
                d_dist[(i, j)] = g / fwd.norm;
            }
        }
    }
    let grads = opts.need_grad.then(|| {
        let mut g = model.params.zeros_like();
        backward_distances(&fwd.x, v, &d_dist, &mut g);
        backward_predictor(model, &fwd, &d_scores, &mut g);
        g
    });
    Ok(finish(sums, &fwd, grads, frame_terms))
}

/// Cross-entropy to precomputed hard targets (carried by the batch). The
/// codebook is treated as fixed; `recon` is reported for the target codeword
/// so that `per_frame_objective` is the co-training summand with one-hot `q`.
pub fn hubert_like_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    opts: &LossOptions,
) -> Result<LossOutput<F>> {
    let targets = batch.targets.as_ref().ok_or_else(|| {
        Error::InvalidArgument("hubert-like loss needs hard targets for every utterance".into())
    })?;
    let fwd = forward(batch, model, opts)?;
    let u = block(model, PROJ_U)?;
    let v = block(model, CODEBOOK)?;
    let logp = predictor_log_probs(&fwd.hv, u);
    let log_norm = gaussian_log_norm(v.cols());
    let k = model.config.shift;
    let (n, codes) = (fwd.valid.len(), v.rows());
    let mut d_scores = Tensor2::zeros(n, codes);
    let mut sums = [0.0; 5];
    let mut frame_terms = vec![];
    for i in 0..n {
        let (b, t) = (fwd.valid.seq[i], fwd.valid.time[i]);
        let z = targets[b][t + k];
        if z >= codes {
            return Err(Error::Utterance {
                utt: batch.utt_ids[b].clone(),
                reason: format!("target {z} at frame {} is not below {codes}", t + k),
            });
        }
        let ce = -logp[(i, z)];
        let dz: f64 = fwd
            .x
            .row(i)
            .iter()
            .zip(v.row(z))
            .map(|(&a, &c)| (a.f64() - c.f64()).powi(2))
            .sum();
        let terms = FrameTerms {
            ce,
            recon: -(log_norm - 0.5 * dz),
            entropy: 0.0,
        };
        sums[0] += ce;
        sums[1] += ce;
        sums[2] += terms.recon;
        sums[4] += terms.objective();
        if opts.keep_frame_terms {
            frame_terms.push(terms);
        }
        if opts.need_grad {
            for j in 0..codes {
                let target = if j == z { 1.0 } else { 0.0 };
                d_scores[(i, j)] = (logp[(i, j)].exp() - target) / fwd.norm;
            }
        }
    }
    let grads = opts.need_grad.then(|| {
        let mut g = model.params.zeros_like();
        backward_predictor(model, &fwd, &d_scores, &mut g);
        g
    });
    Ok(finish(sums, &fwd, grads, frame_terms))
}

/// VQ-APC: a Gumbel-softmax sample of the predictor's code selects a
/// codeword, which is projected by `W` to reconstruct the future frame.
pub fn vq_apc_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    gumbel: &GumbelConfig,
    noise: &Tensor2<f64>,
    opts: &LossOptions,
) -> Result<LossOutput<F>> {
    let fwd = forward(batch, model, opts)?;
    let u = block(model, PROJ_U)?;
    let v = block(model, CODEBOOK)?;
    let w = block(model, OUT_W)?;
    let (n, codes) = (fwd.valid.len(), v.rows());
    check_noise(noise, n, codes)?;
    let tau = gumbel.temperature;
    let scores = predictor_log_probs(&fwd.hv, u);
    let mut y = Tensor2::zeros(n, codes);
    let mut y_fwd = Tensor2::zeros(n, codes);
    for i in 0..n {
        let yi = gumbel_softmax(scores.row(i), noise.row(i), tau);
        let fi = if gumbel.straight_through {
            one_hot_argmax(&yi)
        } else {
            yi.clone()
        };
        y.row_mut(i).copy_from_slice(&yi);
        y_fwd.row_mut(i).copy_from_slice(&fi);
    }
    let y_fwd_f: Tensor2<F> = y_fwd.cast();
    let e = Tensor2::matmul(&y_fwd_f, Op::N, v, Op::N);
    let mut r = Tensor2::matmul(&e, Op::N, w, Op::T);
    r.axpy(-F::one(), &fwd.x);
    let log_norm = gaussian_log_norm(fwd.x.cols());
    let mut sums = [0.0; 5];
    let mut frame_terms = vec![];
    for i in 0..n {
        let sq: f64 = r.row(i).iter().map(|a| a.f64() * a.f64()).sum();
        let loss = -log_norm + 0.5 * sq;
        sums[0] += loss;
        sums[2] += loss;
        sums[4] -= loss;
        if opts.keep_frame_terms {
            frame_terms.push(FrameTerms {
                ce: 0.0,
                recon: loss,
                entropy: 0.0,
            });
        }
    }
    let grads = opts.need_grad.then(|| {
        let mut g = model.params.zeros_like();
        let scale = F::of(1.0 / fwd.norm);
        g.get_mut(OUT_W).gemm(scale, &r, Op::T, &e, Op::N, F::one());
        let de = {
            let mut m = Tensor2::matmul(&r, Op::N, w, Op::N);
            m.scale(scale);
            m
        };
        g.get_mut(CODEBOOK)
            .gemm(F::one(), &y_fwd_f, Op::T, &de, Op::N, F::one());
        let dy: Tensor2<f64> = Tensor2::matmul(&de, Op::N, v, Op::T).cast();
        let mut d_scores = Tensor2::zeros(n, codes);
        for i in 0..n {
            let yi = y.row(i);
            let mean: f64 = yi.iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..codes {
                d_scores[(i, j)] = yi[j] * (dy[(i, j)] - mean) / tau;
            }
        }
        backward_predictor(model, &fwd, &d_scores, &mut g);
        g
    });
    Ok(finish(sums, &fwd, grads, frame_terms))
}

/// APC: regress the future frame from `h_t` with a linear head, Gaussian
/// negative log-likelihood.
pub fn apc_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    opts: &LossOptions,
) -> Result<LossOutput<F>> {
    let fwd = forward(batch, model, opts)?;
    let head = block(model, APC_HEAD)?;
    let mut r = Tensor2::matmul(&fwd.hv, Op::N, head, Op::T);
    r.axpy(-F::one(), &fwd.x);
    let log_norm = gaussian_log_norm(fwd.x.cols());
    let mut sums = [0.0; 5];
    let mut frame_terms = vec![];
    for i in 0..fwd.valid.len() {
        let sq: f64 = r.row(i).iter().map(|a| a.f64() * a.f64()).sum();
        let loss = -log_norm + 0.5 * sq;
        sums[0] += loss;
        sums[2] += loss;
        sums[4] -= loss;
        if opts.keep_frame_terms {
            frame_terms.push(FrameTerms {
                ce: 0.0,
                recon: loss,
                entropy: 0.0,
            });
        }
    }
    let grads = opts.need_grad.then(|| {
        let mut g = model.params.zeros_like();
        let scale = F::of(1.0 / fwd.norm);
        g.get_mut(APC_HEAD)
            .gemm(scale, &r, Op::T, &fwd.hv, Op::N, F::one());
        let mut d_hv = Tensor2::matmul(&r, Op::N, head, Op::N);
        d_hv.scale(scale);
        backward_hidden(model, &fwd, &d_hv, &mut g);
        g
    });
    Ok(finish(sums, &fwd, grads, frame_terms))
}

/// The training loss of `model.variant`. Gumbel variants read `noise`
/// (zero noise when `None`).
pub fn variant_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    gumbel: &GumbelConfig,
    noise: Option<&Tensor2<f64>>,
    opts: &LossOptions,
) -> Result<LossOutput<F>> {
    let zero;
    let noise = match noise {
        Some(n) => n,
        None => {
            let codes = model.config.codebook_size;
            zero = Tensor2::zeros(batch.valid_frames(model.config.shift).len(), codes);
            &zero
        }
    };
    match model.variant {
        Variant::CotrainExact => cotrain_exact_loss(batch, model, opts),
        Variant::CotrainGumbel => cotrain_gumbel_loss(batch, model, gumbel, noise, opts),
        Variant::HubertLike => hubert_like_loss(batch, model, opts),
        Variant::VqApc => vq_apc_loss(batch, model, gumbel, noise, opts),
        Variant::Apc => apc_loss(batch, model, opts),
    }
}

/// Noise-free value used for logging: the exact co-training objective for
/// the co-training and HuBERT-like variants (the latter with its clamped
/// codebook), the deterministic reconstruction loss for VQ-APC and APC.
pub fn evaluation_loss<F: Real>(
    batch: &Batch<F>,
    model: &Model<F>,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let opts = LossOptions {
        need_grad: false,
        ..opts.clone()
    };
    let out = match model.variant {
        Variant::CotrainExact | Variant::CotrainGumbel | Variant::HubertLike => {
            cotrain_exact_loss(batch, model, &opts)?
        }
        Variant::VqApc | Variant::Apc => {
            variant_loss(batch, model, &GumbelConfig::new(1.0)?, None, &opts)?
        }
    };
    Ok(out.breakdown)
}

/// `ln p(x_{t+k} | x_{1:t})` for every valid position.
pub fn marginal_log_likelihoods<F: Real>(batch: &Batch<F>, model: &Model<F>) -> Result<Vec<f64>> {
    let fwd = forward(batch, model, &LossOptions::value_only())?;
    let u = block(model, PROJ_U)?;
    let v = block(model, CODEBOOK)?;
    let w = model.params.try_get(OUT_W);
    let logp = predictor_log_probs(&fwd.hv, u);
    let means = match w {
        Some(w) => Tensor2::matmul(v, Op::N, w, Op::T),
        None => v.clone(),
    };
    let dist: Tensor2<f64> = sq_dist_matrix(&fwd.x, &means)?.cast();
    let log_norm = gaussian_log_norm(fwd.x.cols());
    Ok((0..fwd.valid.len())
        .map(|i| {
            let joint: Vec<f64> = dist
                .row(i)
                .iter()
                .zip(logp.row(i))
                .map(|(&d, &l)| log_norm - 0.5 * d + l)
                .collect();
            logsumexp_unchecked(&joint)
        })
        .collect())
}

/// Finite-difference check of the variant's gradients over every trainable
/// block. Gumbel variants are checked with the relaxed sample (no
/// straight-through) and fixed `noise`, because the straight-through forward
/// value is piecewise constant in the scores.
pub fn check_variant_gradients(
    model: &Model<f64>,
    batch: &Batch<f64>,
    temperature: f64,
    noise: Option<&Tensor2<f64>>,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let gumbel = GumbelConfig {
        straight_through: false,
        ..GumbelConfig::new(temperature)?
    };
    let opts = LossOptions::default();
    let analytic = variant_loss(batch, model, &gumbel, noise, &opts)?
        .grads
        .expect("gradients requested");
    let trainable = model.trainable();
    let blocks: Vec<&str> = trainable.iter().map(String::as_str).collect();
    let mut probe = model.clone();
    let value = LossOptions::value_only();
    grad_check(&model.params, &analytic, &blocks, epsilon, rng, |p| {
        probe.params = p.clone();
        Ok(variant_loss(batch, &probe, &gumbel, noise, &value)?
            .breakdown
            .total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodebookInit, LatentConfig};

    fn setup(variant: Variant) -> (Model<f64>, Batch<f64>) {
        let mut rng = Rng::new(5);
        let cfg = LatentConfig {
            codebook_size: 3,
            shift: 1,
            frame_dim: 2,
            hidden: 4,
            layers: 1,
            codeword_dim: 2,
        };
        let model = Model::init(cfg, variant, CodebookInit::Random, &mut rng).unwrap();
        let f = Tensor2::from_vec(5, 2, (0..10).map(|_| rng.normal()).collect()).unwrap();
        let targets = Some(vec![vec![0, 1, 2, 1, 0]]);
        let batch = Batch::from_frames(vec!["u".into()], &[&f], targets).unwrap();
        (model, batch)
    }

    #[test]
    fn cotrain_total_matches_terms() {
        let (m, b) = setup(Variant::CotrainExact);
        let out = cotrain_exact_loss(&b, &m, &LossOptions::default()).unwrap();
        let l = out.breakdown;
        assert!((l.total - (l.ce + l.recon - l.entropy)).abs() < 1e-12);
        assert!((l.per_frame_objective + l.total).abs() < 1e-12);
        assert!(l.entropy >= 0.0 && l.entropy <= 3f64.ln() + 1e-12);
        assert_eq!(l.frames, 4);
    }

    #[test]
    fn short_batch_is_an_error() {
        let (m, _) = setup(Variant::CotrainExact);
        let f = Tensor2::<f64>::zeros(1, 2);
        let b = Batch::from_frames(vec!["short".into()], &[&f], None).unwrap();
        assert!(cotrain_exact_loss(&b, &m, &LossOptions::default()).is_err());
    }

    #[test]
    fn hubert_requires_targets() {
        let (m, mut b) = setup(Variant::HubertLike);
        b.targets = None;
        assert!(hubert_like_loss(&b, &m, &LossOptions::default()).is_err());
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let y = gumbel_softmax(&[0.2f64, 1.0, -0.3], &[0.1, -0.5, 2.0], 0.7);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = one_hot_argmax(&y);
        assert_eq!(h.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn posterior_hook_refuses_gradients() {
        let (m, b) = setup(Variant::CotrainExact);
        let opts = LossOptions {
            q_source: QSource::Posterior,
            ..LossOptions::default()
        };
        assert!(cotrain_exact_loss(&b, &m, &opts).is_err());
    }
}
