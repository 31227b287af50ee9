//! Padded, time-major mini-batches.

use crate::error::{Error, Result};
use crate::features::{Alignments, FeatureSequence};
use crate::numerics::{Real, Tensor2};

/// Several utterances padded to a common length and interleaved time-major:
/// row `t * batch + b` holds frame `t` of utterance `b` (zeros past its end).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub inputs: Tensor2<F>,
    pub batch: usize,
    pub steps: usize,
    pub lengths: Vec<usize>,
    pub utt_ids: Vec<String>,
    /// Per-frame hard targets, one vector per utterance, same length as it.
    pub targets: Option<Vec<Vec<usize>>>,
}

/// Positions `(b, t)` whose future frame `t + k` exists, ordered by utterance
/// then time, with their rows in the time-major layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidFrames {
    pub seq: Vec<usize>,
    pub time: Vec<usize>,
    /// Row of `h_t`.
    pub hidden_rows: Vec<usize>,
    /// Row of `x_{t+k}`.
    pub future_rows: Vec<usize>,
}

impl ValidFrames {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }
}

impl<F: Real> Batch<F> {
    pub fn from_frames(
        utt_ids: Vec<String>,
        frames: &[&Tensor2<F>],
        targets: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput);
        }
        if utt_ids.len() != frames.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} utterances",
                utt_ids.len(),
                frames.len()
            )));
        }
        let d = frames[0].cols();
        let batch = frames.len();
        let steps = frames.iter().map(|f| f.rows()).max().unwrap_or(0);
        let mut inputs = Tensor2::zeros(steps * batch, d);
        for (b, f) in frames.iter().enumerate() {
            if f.cols() != d {
                return Err(Error::Utterance {
                    utt: utt_ids[b].clone(),
                    reason: format!("frame dimension {} differs from {d}", f.cols()),
                });
            }
            for t in 0..f.rows() {
                inputs.row_mut(t * batch + b).copy_from_slice(f.row(t));
            }
        }
        let lengths: Vec<usize> = frames.iter().map(|f| f.rows()).collect();
        if let Some(tg) = &targets {
            if tg.len() != batch {
                return Err(Error::Shape(format!(
                    "{} target sequences for {batch} utterances",
                    tg.len()
                )));
            }
            for (b, labels) in tg.iter().enumerate() {
                if labels.len() != lengths[b] {
                    return Err(Error::Utterance {
                        utt: utt_ids[b].clone(),
                        reason: format!("{} targets for {} frames", labels.len(), lengths[b]),
                    });
                }
            }
        }
        Ok(Self {
            inputs,
            batch,
            steps,
            lengths,
            utt_ids,
            targets,
        })
    }

    pub fn frame_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Valid prediction positions for shift `k`.
    pub fn valid_frames(&self, k: usize) -> ValidFrames {
        let mut v = ValidFrames {
            seq: vec![],
            time: vec![],
            hidden_rows: vec![],
            future_rows: vec![],
        };
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len.saturating_sub(k) {
                v.seq.push(b);
                v.time.push(t);
                v.hidden_rows.push(t * self.batch + b);
                v.future_rows.push((t + k) * self.batch + b);
            }
        }
        v
    }

    /// Number of valid positions contributed by each utterance.
    pub fn valid_per_sequence(&self, k: usize) -> Vec<usize> {
        self.lengths.iter().map(|&l| l.saturating_sub(k)).collect()
    }
}

impl Batch<f32> {
    /// Batch of dataset utterances, with targets looked up in `targets`.
    pub fn from_sequences(seqs: &[&FeatureSequence], targets: Option<&Alignments>) -> Result<Self> {
        let ids = seqs.iter().map(|s| s.utt_id.clone()).collect();
        let frames: Vec<&Tensor2<f32>> = seqs.iter().map(|s| &s.frames).collect();
        let tg = match targets {
            None => None,
            Some(a) => Some(
                seqs.iter()
                    .map(|s| a.require(&s.utt_id, s.len()).map(<[usize]>::to_vec))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Self::from_frames(ids, &frames, tg)
    }
}
