//! Acoustic features: log-Mel extraction, per-dimension normalization, and
//! the FTR1 archive format.

mod archive;
mod mel;

pub use archive::{
    archive_read, archive_write, decode_ftr, encode_ftr, read_ftr, read_manifest, write_ftr,
    Alignments, PhoneInventory, FTR_MAGIC, MANIFEST_NAME,
};
pub use mel::{
    frame_count, hamming, hz_to_mel, log_mel, mel_to_hz, wav_read, LogMel, MelConfig,
    MelFilterbank, ENERGY_FLOOR,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Smallest standard deviation kept by [`compute_norm_stats`].
pub const MIN_STD: f64 = 1e-8;

/// One utterance worth of frames, `T × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utt_id: String,
    pub frames: Tensor2<f32>,
    pub frame_hop_ms: f64,
}

impl FeatureSequence {
    pub fn new(utt_id: impl Into<String>, frames: Tensor2<f32>) -> Self {
        Self {
            utt_id: utt_id.into(),
            frames,
            frame_hop_ms: 10.0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Common frame dimension of a dataset.
pub fn dataset_dim(data: &[FeatureSequence]) -> Result<usize> {
    let d = data.first().ok_or(Error::EmptyInput)?.dim();
    if let Some(bad) = data.iter().find(|s| s.dim() != d) {
        return Err(Error::Utterance {
            utt: bad.utt_id.clone(),
            reason: format!(
                "frame dimension {} differs from dataset dimension {d}",
                bad.dim()
            ),
        });
    }
    Ok(d)
}

/// All frames of a dataset stacked into one matrix.
pub fn pool_frames(data: &[FeatureSequence]) -> Tensor2<f32> {
    let d = data.first().map_or(0, FeatureSequence::dim);
    let mut out = Vec::with_capacity(data.iter().map(|s| s.frames.len()).sum());
    for s in data {
        out.extend_from_slice(s.frames.as_slice());
    }
    let rows = if d == 0 { 0 } else { out.len() / d };
    Tensor2::from_vec(rows, d, out).expect("consistent dims")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// FTR1 with two rows: mean, then std.
    pub fn to_matrix(&self) -> Tensor2<f32> {
        Tensor2::from_rows(&[self.mean.clone(), self.std.clone()]).expect("equal lengths")
    }

    pub fn from_matrix(m: &Tensor2<f32>) -> Result<Self> {
        if m.rows() != 2 {
            return Err(Error::Shape(format!(
                "normalization stats need 2 rows, got {}",
                m.rows()
            )));
        }
        Ok(Self {
            mean: m.row(0).to_vec(),
            std: m.row(1).to_vec(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_ftr(path, &self.to_matrix())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_matrix(&read_ftr(path)?)
    }
}

/// Per-dimension mean and population standard deviation over every frame of
/// the dataset (two passes, `f64` accumulation).
pub fn compute_norm_stats(data: &[FeatureSequence]) -> Result<NormStats> {
    let d = dataset_dim(data)?;
    let mut count = 0usize;
    let mut sum = vec![0.0f64; d];
    for s in data {
        for t in 0..s.len() {
            for (a, &v) in sum.iter_mut().zip(s.frames.row(t)) {
                *a += v as f64;
            }
        }
        count += s.len();
    }
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; d];
    for s in data {
        for t in 0..s.len() {
            for ((a, &v), m) in sq.iter_mut().zip(s.frames.row(t)).zip(&mean) {
                let c = v as f64 - m;
                *a += c * c;
            }
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(MIN_STD) as f32)
            .collect(),
    })
}

/// `(x - mean) / std`, elementwise.
pub fn normalize(seq: &FeatureSequence, stats: &NormStats) -> Result<FeatureSequence> {
    if seq.dim() != stats.dim() {
        return Err(Error::Shape(format!(
            "utterance {} has dimension {}, stats have {}",
            seq.utt_id,
            seq.dim(),
            stats.dim()
        )));
    }
    let mut frames = seq.frames.clone();
    for t in 0..frames.rows() {
        for ((v, m), s) in frames
            .row_mut(t)
            .iter_mut()
            .zip(&stats.mean)
            .zip(&stats.std)
        {
            *v = ((*v as f64 - *m as f64) / *s as f64) as f32;
        }
    }
    Ok(FeatureSequence {
        utt_id: seq.utt_id.clone(),
        frames,
        frame_hop_ms: seq.frame_hop_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn seq(id: &str, rows: &[Vec<f32>]) -> FeatureSequence {
        FeatureSequence::new(id, Tensor2::from_rows(rows).unwrap())
    }

    #[test]
    fn single_frame_stats() {
        let s = compute_norm_stats(&[seq("a", &[vec![3.0, -1.0]])]).unwrap();
        assert_eq!(s.mean, vec![3.0, -1.0]);
        assert_eq!(s.std, vec![MIN_STD as f32; 2]);
    }

    #[test]
    fn two_frame_stats() {
        let s = compute_norm_stats(&[seq("a", &[vec![0.0]]), seq("b", &[vec![2.0]])]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(compute_norm_stats(&[]).is_err());
    }

    fn random_dataset(rng: &mut Rng) -> Vec<FeatureSequence> {
        (0..6)
            .map(|u| {
                let t = 3 + rng.below(20);
                let data = (0..t * 5)
                    .map(|i| (rng.normal() * (1.0 + i as f64 % 5.0) + 10.0 * (i % 5) as f64) as f32)
                    .collect();
                FeatureSequence::new(format!("u{u}"), Tensor2::from_vec(t, 5, data).unwrap())
            })
            .collect()
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let data = random_dataset(&mut Rng::new(3));
        let s = compute_norm_stats(&data).unwrap();
        let all: Vec<&[f32]> = data
            .iter()
            .flat_map(|u| (0..u.len()).map(move |t| u.frames.row(t)))
            .collect();
        for j in 0..5 {
            let n = all.len() as f64;
            let m = all.iter().map(|r| r[j] as f64).sum::<f64>() / n;
            let v = all.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / n;
            assert!((s.mean[j] as f64 - m).abs() < 1e-6 * m.abs().max(1.0));
            assert!((s.std[j] as f64 - v.sqrt()).abs() < 1e-6 * v.sqrt().max(1.0));
        }
    }

    #[test]
    fn normalize_examples() {
        let x = seq("a", &[vec![1.5, -2.0]]);
        let ident = NormStats {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        };
        assert_eq!(normalize(&x, &ident).unwrap().frames, x.frames);
        let at_mean = NormStats {
            mean: vec![1.5, -2.0],
            std: vec![0.3, 7.0],
        };
        assert!(normalize(&x, &at_mean)
            .unwrap()
            .frames
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        let stats = NormStats {
            mean: vec![0.5, 1.0],
            std: vec![2.0, 4.0],
        };
        assert_eq!(
            normalize(&x, &stats).unwrap().frames.as_slice(),
            &[0.5, -0.75]
        );
        let bad = NormStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(normalize(&x, &bad).is_err());
    }

    #[test]
    fn renormalized_set_has_unit_stats() {
        let data = random_dataset(&mut Rng::new(8));
        let stats = compute_norm_stats(&data).unwrap();
        let normed: Vec<_> = data.iter().map(|s| normalize(s, &stats).unwrap()).collect();
        let again = compute_norm_stats(&normed).unwrap();
        for j in 0..5 {
            assert!(again.mean[j].abs() < 1e-5);
            assert!((again.std[j] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn stats_round_trip_through_ftr() {
        let dir = tempfile::tempdir().unwrap();
        let s = NormStats {
            mean: vec![1.0, 2.0],
            std: vec![0.5, 0.25],
        };
        let p = dir.path().join("stats.ftr");
        s.write(&p).unwrap();
        assert_eq!(NormStats::read(&p).unwrap(), s);
    }
}
