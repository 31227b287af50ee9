//! Frozen-model evaluation: linear phone probes on hidden layers and
//! code–phone co-occurrence matrices.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Alignments, FeatureSequence, PhoneInventory};
use crate::kmeans::nearest;
use crate::model::{Model, PROJ_U};
use crate::numerics::{argmax, log_softmax_in_place, Decimal, Op, ParamSet, Rng, Tensor2};
use crate::training::{adam_step, make_batches, AdamState};

const PROBE_W: &str = "probe.w";
const PROBE_B: &str = "probe.b";

/// Hex SHA-256 over every parameter block (name, shape, f32 bytes).
pub fn model_digest(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    for p in model.params.iter() {
        h.update(p.name.as_bytes());
        h.update((p.value.rows() as u64).to_le_bytes());
        h.update((p.value.cols() as u64).to_le_bytes());
        for v in p.value.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// 1-based LSTM layer whose hidden states are probed.
    pub layer: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Utterances per probe update.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            layer: 2,
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub layer: usize,
    /// Frame error rate on the evaluation split.
    pub per: f64,
    pub frames: usize,
    /// `confusion[(true, predicted)]` frame counts, `P × P`.
    pub confusion: Tensor2<f64>,
}

impl ProbeResult {
    pub fn csv(&self) -> String {
        format!(
            "layer,per,frames\n{},{},{}\n",
            self.layer,
            Decimal(self.per),
            self.frames
        )
    }

    pub fn confusion_csv(&self, phones: &PhoneInventory) -> String {
        matrix_csv(&self.confusion, &phones.names, &phones.names)
    }
}

/// Header row of column names, then one row per named row.
fn matrix_csv(m: &Tensor2<f64>, row_names: &[String], col_names: &[String]) -> String {
    let mut s = String::from("phone");
    for c in col_names {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (i, name) in row_names.iter().enumerate() {
        s.push_str(name);
        for v in m.row(i) {
            let _ = write!(s, ",{}", Decimal(*v));
        }
        s.push('\n');
    }
    s
}

/// Hidden states of one layer plus the frame labels, for a labeled set.
struct Probed {
    hidden: Vec<Tensor2<f32>>,
    labels: Vec<Vec<usize>>,
}

fn collect_layer(
    model: &Model<f32>,
    layer: usize,
    data: &[FeatureSequence],
    align: &Alignments,
    phones: usize,
) -> Result<Probed> {
    if layer == 0 || layer > model.config.layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range 1..={}",
            model.config.layers
        )));
    }
    let mut out = Probed {
        hidden: vec![],
        labels: vec![],
    };
    for seq in data {
        let labels = align.require(&seq.utt_id, seq.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= phones) {
            return Err(Error::Utterance {
                utt: seq.utt_id.clone(),
                reason: format!("label {bad} outside the inventory of {phones} phones"),
            });
        }
        let mut hs = model.hidden_states(&seq.frames);
        out.hidden.push(hs.swap_remove(layer - 1));
        out.labels.push(labels.to_vec());
    }
    Ok(out)
}

fn probe_logits(params: &ParamSet<f32>, h: &Tensor2<f32>) -> Tensor2<f32> {
    let mut z = Tensor2::matmul(h, Op::N, params.get(PROBE_W), Op::N);
    let b = params.get(PROBE_B);
    for i in 0..z.rows() {
        for (v, &bb) in z.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v += bb;
        }
    }
    z
}

/// Trains a linear softmax classifier `H → P` on the hidden states of
/// `cfg.layer` over `train`, then reports its frame error rate on `test`.
///
/// The weights start at zero and the bias at the smoothed log label
/// frequencies, so with `epochs = 0` every frame gets the majority label.
/// The backbone is only read.
pub fn probe_train(
    model: &Model<f32>,
    cfg: &ProbeConfig,
    train: (&[FeatureSequence], &Alignments),
    test: (&[FeatureSequence], &Alignments),
    phones: usize,
) -> Result<ProbeResult> {
    if phones == 0 {
        return Err(Error::InvalidArgument("empty phone inventory".into()));
    }
    if train.0.is_empty() || test.0.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tr = collect_layer(model, cfg.layer, train.0, train.1, phones)?;
    let te = collect_layer(model, cfg.layer, test.0, test.1, phones)?;
    let h = model.config.hidden;

    let mut counts = vec![0usize; phones];
    for l in tr.labels.iter().flatten() {
        counts[*l] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut params = ParamSet::new();
    params.push(PROBE_W, Tensor2::zeros(h, phones));
    let bias = counts
        .iter()
        .map(|&c| ((c as f64 + 1.0) / (total + phones) as f64).ln() as f32)
        .collect();
    params.push(PROBE_B, Tensor2::from_vec(1, phones, bias)?);
    let mut adam = AdamState::new(&params);
    let names = vec![PROBE_W.to_string(), PROBE_B.to_string()];
    let mut rng = Rng::new(cfg.seed);

    for _ in 0..cfg.epochs {
        for batch in make_batches(tr.hidden.len(), cfg.batch_size, &mut rng) {
            let rows: usize = batch.iter().map(|&i| tr.hidden[i].rows()).sum();
            if rows == 0 {
                continue;
            }
            let mut hb = Vec::with_capacity(rows * h);
            let mut lb = Vec::with_capacity(rows);
            for &i in &batch {
                hb.extend_from_slice(tr.hidden[i].as_slice());
                lb.extend_from_slice(&tr.labels[i]);
            }
            let hb = Tensor2::from_vec(rows, h, hb)?;
            let mut d = probe_logits(&params, &hb);
            for (r, &l) in lb.iter().enumerate() {
                let row = d.row_mut(r);
                log_softmax_in_place(row);
                for (j, v) in row.iter_mut().enumerate() {
                    let target = if j == l { 1.0 } else { 0.0 };
                    *v = (v.exp() - target) / rows as f32;
                }
            }
            let mut grads = params.zeros_like();
            grads.get_mut(PROBE_W).gemm(1.0, &hb, Op::T, &d, Op::N, 0.0);
            grads
                .get_mut(PROBE_B)
                .as_mut_slice()
                .copy_from_slice(&d.col_sums());
            adam_step(&mut params, &grads, &mut adam, cfg.lr, &names)?;
        }
    }

    let mut confusion = Tensor2::zeros(phones, phones);
    let mut frames = 0usize;
    let mut errors = 0usize;
    for (hs, labels) in te.hidden.iter().zip(&te.labels) {
        let z = probe_logits(&params, hs);
        for (t, &l) in labels.iter().enumerate() {
            let p = argmax(z.row(t));
            confusion[(l, p)] += 1.0;
            frames += 1;
            if p != l {
                errors += 1;
            }
        }
    }
    if frames == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(ProbeResult {
        layer: cfg.layer,
        per: errors as f64 / frames as f64,
        frames,
        confusion,
    })
}

/// Where a frame's code comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSource {
    /// Mode of the prediction network at `t`, for frame `t + k`.
    Predictor,
    /// Nearest codeword of frame `t + k`.
    Confirmer,
}

impl std::str::FromStr for CodeSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predictor" => Ok(CodeSource::Predictor),
            "confirmer" => Ok(CodeSource::Confirmer),
            _ => Err(Error::InvalidArgument(format!(
                "code source must be predictor or confirmer, got {s:?}"
            ))),
        }
    }
}

/// Codes for frames `k..T` of every utterance: entry `t` is the code of
/// frame `t + k`.
pub fn extract_codes(
    model: &Model<f32>,
    data: &[FeatureSequence],
    source: CodeSource,
) -> Result<Alignments> {
    let v = model.codebook().ok_or_else(|| {
        Error::InvalidArgument(format!("{} model has no codebook", model.variant))
    })?;
    let k = model.config.shift;
    let mut out = Alignments::new();
    for seq in data {
        if seq.dim() != model.config.frame_dim {
            return Err(Error::Utterance {
                utt: seq.utt_id.clone(),
                reason: format!(
                    "frame dimension {} vs model {}",
                    seq.dim(),
                    model.config.frame_dim
                ),
            });
        }
        let n = seq.len().saturating_sub(k);
        let codes = match source {
            CodeSource::Confirmer => (0..n)
                .map(|t| nearest(seq.frames.row(t + k), v).0)
                .collect(),
            CodeSource::Predictor => {
                if n == 0 {
                    vec![]
                } else {
                    let hs = model.hidden_states(&seq.frames);
                    let top = hs.last().expect("at least one layer");
                    let scores = Tensor2::matmul(top, Op::N, model.params.get(PROJ_U), Op::N);
                    (0..n).map(|t| argmax(scores.row(t))).collect()
                }
            }
        };
        out.insert(seq.utt_id.clone(), codes);
    }
    Ok(out)
}

/// `p(phone | code)` estimated from co-occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CodePhoneMatrix {
    /// `P × N` co-occurrence counts.
    pub counts: Tensor2<f64>,
    /// `P × N`; each occupied column sums to one, unoccupied columns are zero.
    pub probs: Tensor2<f64>,
    pub occupancy: Vec<u64>,
}

impl CodePhoneMatrix {
    pub fn from_counts(counts: Tensor2<f64>) -> Self {
        let (p, n) = counts.shape();
        let mut probs = Tensor2::zeros(p, n);
        let mut occupancy = vec![0u64; n];
        for j in 0..n {
            let total: f64 = (0..p).map(|i| counts[(i, j)]).sum();
            occupancy[j] = total as u64;
            if total > 0.0 {
                for i in 0..p {
                    probs[(i, j)] = counts[(i, j)] / total;
                }
            }
        }
        Self {
            counts,
            probs,
            occupancy,
        }
    }

    pub fn total(&self) -> u64 {
        self.occupancy.iter().sum()
    }

    pub fn csv(&self, phones: &PhoneInventory) -> String {
        let codes: Vec<String> = (0..self.probs.cols()).map(|j| j.to_string()).collect();
        matrix_csv(&self.probs, &phones.names, &codes)
    }
}

/// Counts the phone at frame `t + k` against the code for that frame over
/// every valid position.
pub fn code_phone_matrix(
    model: &Model<f32>,
    data: &[FeatureSequence],
    align: &Alignments,
    phones: usize,
    source: CodeSource,
) -> Result<CodePhoneMatrix> {
    let k = model.config.shift;
    let codes = extract_codes(model, data, source)?;
    let mut counts = Tensor2::zeros(phones, model.config.codebook_size);
    for seq in data {
        let labels = align.require(&seq.utt_id, seq.len())?;
        for (t, &c) in codes.get(&seq.utt_id).unwrap_or(&[]).iter().enumerate() {
            let l = labels[t + k];
            if l >= phones {
                return Err(Error::Utterance {
                    utt: seq.utt_id.clone(),
                    reason: format!("label {l} outside the inventory of {phones} phones"),
                });
            }
            counts[(l, c)] += 1.0;
        }
    }
    Ok(CodePhoneMatrix::from_counts(counts))
}

/// Occupancy-weighted mean over codes of the largest `p(phone | code)`.
pub fn purity(m: &CodePhoneMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "code-phone matrix has no occupied code".into(),
        ));
    }
    let mut acc = 0.0;
    for (j, &occ) in m.occupancy.iter().enumerate() {
        if occ > 0 {
            let best = (0..m.probs.rows())
                .map(|i| m.probs[(i, j)])
                .fold(0.0, f64::max);
            acc += occ as f64 * best;
        }
    }
    Ok(acc / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_examples() {
        let perm = Tensor2::from_rows(&[
            vec![0.0, 5.0, 0.0],
            vec![3.0, 0.0, 0.0],
            vec![0.0, 0.0, 9.0],
        ])
        .unwrap();
        assert_eq!(purity(&CodePhoneMatrix::from_counts(perm)).unwrap(), 1.0);

        let uniform = Tensor2::filled(4, 2, 2.0);
        assert_eq!(
            purity(&CodePhoneMatrix::from_counts(uniform)).unwrap(),
            0.25
        );

        // code 0: 3 of phone 0, 1 of phone 1; code 1 empty; code 2: 2 of phone 1
        let hand = Tensor2::from_rows(&[vec![3.0, 0.0, 0.0], vec![1.0, 0.0, 2.0]]).unwrap();
        let m = CodePhoneMatrix::from_counts(hand);
        assert_eq!(m.occupancy, vec![4, 0, 2]);
        assert_eq!(m.probs[(0, 1)], 0.0);
        let expected = (4.0 * 0.75 + 2.0 * 1.0) / 6.0;
        assert!((purity(&m).unwrap() - expected).abs() < 1e-15);

        assert!(purity(&CodePhoneMatrix::from_counts(Tensor2::zeros(2, 2))).is_err());
    }

    #[test]
    fn matrix_csv_layout() {
        let m = CodePhoneMatrix::from_counts(
            Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0]]).unwrap(),
        );
        let phones = PhoneInventory::numbered(2, "p");
        assert_eq!(m.csv(&phones), "phone,0,1\np0,0.5,0\np1,0.5,1\n");
    }
}
