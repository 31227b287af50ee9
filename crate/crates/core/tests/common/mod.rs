//! Tiny models and an independent per-position oracle shared by the
//! objective tests and the acceptance report.
#![allow(dead_code)]

use std::f64::consts::PI;

use arcot::model::{CodebookInit, LatentConfig, Model, Variant, CODEBOOK, PROJ_U};
use arcot::numerics::{Rng, Tensor2};
use arcot::objectives::Batch;

pub fn tiny_config(variant: Variant) -> LatentConfig {
    LatentConfig {
        codebook_size: 5,
        shift: 2,
        frame_dim: 4,
        hidden: 8,
        layers: 2,
        codeword_dim: if variant == Variant::VqApc { 6 } else { 4 },
    }
}

pub fn random_frames(rng: &mut Rng, t: usize, d: usize, scale: f64) -> Tensor2<f64> {
    Tensor2::from_vec(t, d, (0..t * d).map(|_| rng.normal() * scale).collect()).unwrap()
}

pub fn tiny_batch(rng: &mut Rng, cfg: &LatentConfig, lengths: &[usize]) -> Batch<f64> {
    let frames: Vec<Tensor2<f64>> = lengths
        .iter()
        .map(|&t| random_frames(rng, t, cfg.frame_dim, 1.0))
        .collect();
    let targets = lengths
        .iter()
        .map(|&t| (0..t).map(|_| rng.below(cfg.codebook_size)).collect())
        .collect();
    let ids = (0..lengths.len()).map(|i| format!("u{i}")).collect();
    let refs: Vec<&Tensor2<f64>> = frames.iter().collect();
    Batch::from_frames(ids, &refs, Some(targets)).unwrap()
}

pub fn tiny_model(variant: Variant, rng: &mut Rng) -> Model<f64> {
    Model::init(tiny_config(variant), variant, CodebookInit::Random, rng).unwrap()
}

/// Independent per-position evaluation: hidden states from one utterance at
/// a time, distributions written out with explicit sums.
pub struct Oracle {
    pub logp: Vec<f64>,
    pub logq: Vec<f64>,
    pub logg: Vec<f64>,
}

pub fn oracle_positions(model: &Model<f64>, batch: &Batch<f64>) -> Vec<Oracle> {
    let k = model.config.shift;
    let u = model.params.get(PROJ_U);
    let v = model.params.get(CODEBOOK);
    let d = model.config.frame_dim as f64;
    let mut out = vec![];
    for b in 0..batch.batch {
        let len = batch.lengths[b];
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|t| batch.inputs.row(t * batch.batch + b).to_vec())
            .collect();
        let frames = Tensor2::from_rows(&rows).unwrap();
        let hs = model.hidden_states(&frames);
        let top = hs.last().unwrap();
        for t in 0..len.saturating_sub(k) {
            let x = frames.row(t + k);
            let scores: Vec<f64> = (0..u.cols())
                .map(|j| (0..u.rows()).map(|r| top[(t, r)] * u[(r, j)]).sum())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let logp = scores.iter().map(|s| s - z.ln()).collect();
            let dist: Vec<f64> = (0..v.rows())
                .map(|j| x.iter().zip(v.row(j)).map(|(a, c)| (a - c) * (a - c)).sum())
                .collect();
            let zq: f64 = dist.iter().map(|dd| (-dd).exp()).sum();
            let logq = dist.iter().map(|dd| -dd - zq.ln()).collect();
            let logg = dist
                .iter()
                .map(|dd| -0.5 * d * (2.0 * PI).ln() - 0.5 * dd)
                .collect();
            out.push(Oracle { logp, logq, logg });
        }
    }
    out
}
