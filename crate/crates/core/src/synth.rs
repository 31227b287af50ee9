//! Synthetic corpus drawn from the generative model itself: a Markov chain
//! over `M` hidden states, each emitting `x_t = μ_{s_t} + σ ε`.
//! The state sequence doubles as a ground-truth alignment.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{archive_write, Alignments, FeatureSequence, PhoneInventory};
use crate::numerics::{Rng, Tensor2};

/// File names used by [`write_corpus`].
pub const ALIGNMENTS_NAME: &str = "alignments.tsv";
pub const PHONES_NAME: &str = "phones.txt";
pub const CENTROIDS_NAME: &str = "centroids.ftr";

/// Draws allowed per centroid before giving up on the separation constraint.
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub states: usize,
    pub dim: usize,
    /// Self-transition probability `γ`; the remaining mass is spread evenly.
    pub self_prob: f64,
    /// Emission noise `σ`.
    pub noise: f64,
    /// Minimum pairwise centroid distance `s`; centroids are drawn from
    /// `N(0, s²)` per dimension until every pair is at least this far apart.
    pub separation: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub utterances: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            states: 8,
            dim: 40,
            self_prob: 0.7,
            noise: 0.5,
            separation: 3.0,
            min_len: 80,
            max_len: 160,
            utterances: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.states == 0 || self.dim == 0 {
            return bad("need at least one state and one dimension");
        }
        if !(0.0..=1.0).contains(&self.self_prob) {
            return bad("self-transition probability must be in [0, 1]");
        }
        if self.states == 1 && self.self_prob != 1.0 {
            return bad("a single state must have self-transition probability 1");
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0) {
            return bad("noise and separation must be non-negative");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        Ok(())
    }

    /// Row-stochastic `M × M` transition matrix.
    pub fn transition_matrix(&self) -> Tensor2<f64> {
        let m = self.states;
        let off = if m > 1 {
            (1.0 - self.self_prob) / (m - 1) as f64
        } else {
            0.0
        };
        let mut t = Tensor2::filled(m, m, off);
        for i in 0..m {
            t[(i, i)] = if m > 1 { self.self_prob } else { 1.0 };
        }
        t
    }

    fn rng(&self) -> Rng {
        Rng::new(self.seed)
    }
}

/// Emission centroids `μ_1..μ_M`.
pub fn oracle_codebook(cfg: &SynthConfig) -> Result<Tensor2<f32>> {
    cfg.validate()?;
    let mut rng = cfg.rng().split(0);
    let s = cfg.separation;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.states);
    while rows.len() < cfg.states {
        let mut accepted = false;
        for _ in 0..MAX_REJECTIONS {
            let c: Vec<f64> = (0..cfg.dim).map(|_| rng.normal() * s).collect();
            let ok = rows.iter().all(|r| {
                let d2: f64 = r.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= s
            });
            if ok {
                rows.push(c);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::InvalidArgument(format!(
                "could not place {} centroids {s} apart in {} dimensions",
                cfg.states, cfg.dim
            )));
        }
    }
    let data = rows.concat().into_iter().map(|v| v as f32).collect();
    Tensor2::from_vec(cfg.states, cfg.dim, data)
}

fn draw_categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Utterance `u`'s state sequence and frames. Each utterance has its own
/// RNG stream, so the corpus does not depend on generation order.
fn utterance(
    cfg: &SynthConfig,
    trans: &Tensor2<f64>,
    mu: &Tensor2<f32>,
    u: usize,
) -> (Vec<usize>, Tensor2<f32>) {
    let mut rng = cfg.rng().split(1 + u as u64);
    let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
    let mut states = Vec::with_capacity(len);
    let mut s = rng.below(cfg.states);
    let mut frames = Tensor2::zeros(len, cfg.dim);
    for t in 0..len {
        if t > 0 {
            s = draw_categorical(&mut rng, trans.row(s));
        }
        states.push(s);
        for (x, &m) in frames.row_mut(t).iter_mut().zip(mu.row(s)) {
            *x = (m as f64 + cfg.noise * rng.normal()) as f32;
        }
    }
    (states, frames)
}

/// Generates `cfg.utterances` utterances and their state alignments.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<FeatureSequence>, Alignments)> {
    let mu = oracle_codebook(cfg)?;
    let trans = cfg.transition_matrix();
    let made: Vec<(Vec<usize>, Tensor2<f32>)> = (0..cfg.utterances)
        .into_par_iter()
        .map(|u| utterance(cfg, &trans, &mu, u))
        .collect();
    let mut feats = Vec::with_capacity(made.len());
    let mut align = Alignments::new();
    for (u, (states, frames)) in made.into_iter().enumerate() {
        let id = format!("synth-{u:05}");
        align.insert(id.clone(), states);
        feats.push(FeatureSequence::new(id, frames));
    }
    Ok((feats, align))
}

/// State names `s0..s{M-1}`.
pub fn state_inventory(cfg: &SynthConfig) -> PhoneInventory {
    PhoneInventory::numbered(cfg.states, "s")
}

/// Writes the corpus as an FTR1 archive plus alignments, state inventory and
/// true centroids. Returns the manifest path.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    cfg: &SynthConfig,
    feats: &[FeatureSequence],
    align: &Alignments,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let manifest = archive_write(feats, dir)?;
    align.write(dir.join(ALIGNMENTS_NAME))?;
    state_inventory(cfg).write(dir.join(PHONES_NAME))?;
    crate::features::write_ftr(dir.join(CENTROIDS_NAME), &oracle_codebook(cfg)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_rows_sum_to_one() {
        for (m, g) in [(8, 0.7), (3, 0.0), (1, 1.0), (5, 1.0)] {
            let cfg = SynthConfig {
                states: m,
                self_prob: g,
                ..SynthConfig::default()
            };
            let t = cfg.transition_matrix();
            for i in 0..m {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn default_centroids_are_separated() {
        let cfg = SynthConfig::default();
        let mu = oracle_codebook(&cfg).unwrap();
        assert_eq!(mu.shape(), (8, 40));
        for i in 0..8 {
            for j in i + 1..8 {
                let d: f64 = mu
                    .row(i)
                    .iter()
                    .zip(mu.row(j))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                assert!(d.sqrt() >= cfg.separation);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_aligned() {
        let cfg = SynthConfig {
            utterances: 12,
            ..SynthConfig::default()
        };
        let (a, al) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(al.get(&s.utt_id).unwrap().len(), s.len());
            assert!((80..=160).contains(&s.len()));
        }
    }

    #[test]
    fn absorbing_chain_keeps_one_state() {
        let cfg = SynthConfig {
            self_prob: 1.0,
            utterances: 5,
            ..SynthConfig::default()
        };
        let (_, al) = generate(&cfg).unwrap();
        for (_, states) in al.iter() {
            assert!(states.iter().all(|&s| s == states[0]));
        }
    }
}
