//! The four distributions of the latent-code model, for single frames.
//!
//! * prediction network `p(z | x_{1:t})`: softmax of `h_tᵀ U`
//! * confirmation network `q(z | x)`: softmax of `-||x - v_z||²`
//! * generator `p(x | z)`: unit-variance Gaussian centred on `W v_z`
//! * posterior `p(z | x_{1:t}, x) ∝ p(x | z) p(z | x_{1:t})`
//!
//! `U` is `H × N`; the score of code `j` is `h · U[:, j]`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{argmin, log_softmax_in_place, logsumexp_unchecked, sq_dist, Real, Tensor2};

/// A distribution over `N` codes, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDistribution<F> {
    pub log_probs: Vec<F>,
    pub probs: Vec<F>,
}

impl<F: Real> CodeDistribution<F> {
    /// Normalizes arbitrary finite scores.
    pub fn from_logits(mut logits: Vec<F>) -> Self {
        log_softmax_in_place(&mut logits);
        let probs = logits.iter().map(|l| l.exp()).collect();
        Self {
            log_probs: logits,
            probs,
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_logits(vec![F::zero(); n])
    }

    pub fn one_hot(n: usize, z: usize) -> Self {
        let log_probs = (0..n)
            .map(|j| if j == z { F::zero() } else { F::neg_infinity() })
            .collect();
        let probs = (0..n)
            .map(|j| if j == z { F::one() } else { F::zero() })
            .collect();
        Self { log_probs, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable code, lowest index on ties.
    pub fn mode(&self) -> usize {
        crate::numerics::argmax(&self.log_probs)
    }
}

/// `ln (2π)^{-d/2}`.
pub fn gaussian_log_norm(d: usize) -> f64 {
    -0.5 * d as f64 * (2.0 * PI).ln()
}

/// Prediction-network distribution from a hidden state.
pub fn predictor_distribution<F: Real>(h: &[F], u: &Tensor2<F>) -> Result<CodeDistribution<F>> {
    if h.len() != u.rows() {
        return Err(Error::Shape(format!(
            "hidden size {} vs projection rows {}",
            h.len(),
            u.rows()
        )));
    }
    let mut scores = vec![F::zero(); u.cols()];
    for (k, &hk) in h.iter().enumerate() {
        for (s, &w) in scores.iter_mut().zip(u.row(k)) {
            *s += hk * w;
        }
    }
    Ok(CodeDistribution::from_logits(scores))
}

/// Confirmation-network distribution, `softmax(-||x - v_j||²)`.
pub fn confirmation_distribution<F: Real>(x: &[F], v: &Tensor2<F>) -> Result<CodeDistribution<F>> {
    confirmation_distribution_scaled(x, v, F::one())
}

/// `softmax(-beta ||x - v_j||²)`; large `beta` approaches the one-hot of the
/// nearest codeword.
pub fn confirmation_distribution_scaled<F: Real>(
    x: &[F],
    v: &Tensor2<F>,
    beta: F,
) -> Result<CodeDistribution<F>> {
    check_codeword_dim(x.len(), v)?;
    if v.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let logits = (0..v.rows())
        .map(|j| -beta * sq_dist(x, v.row(j)))
        .collect();
    Ok(CodeDistribution::from_logits(logits))
}

/// Index of the nearest codeword, lowest index on ties.
pub fn nearest_codeword<F: Real>(x: &[F], v: &Tensor2<F>) -> usize {
    let d: Vec<F> = (0..v.rows()).map(|j| sq_dist(x, v.row(j))).collect();
    argmin(&d)
}

fn check_codeword_dim<F: Real>(d: usize, v: &Tensor2<F>) -> Result<()> {
    if d != v.cols() {
        return Err(Error::Shape(format!(
            "frame dimension {d} vs codeword dimension {}",
            v.cols()
        )));
    }
    Ok(())
}

/// The generator's mean for code `z`: `W v_z`, or `v_z` when `w` is `None`
/// (identity projection).
pub fn generator_mean<F: Real>(z: usize, v: &Tensor2<F>, w: Option<&Tensor2<F>>) -> Vec<F> {
    let vz = v.row(z);
    match w {
        None => vz.to_vec(),
        Some(w) => (0..w.rows())
            .map(|i| w.row(i).iter().zip(vz).map(|(&a, &b)| a * b).sum())
            .collect(),
    }
}

/// `ln p(x | z) = -(d/2) ln 2π - ½ ||x - W v_z||²`.
pub fn generation_log_density<F: Real>(
    x: &[F],
    z: usize,
    v: &Tensor2<F>,
    w: Option<&Tensor2<F>>,
) -> Result<F> {
    if z >= v.rows() {
        return Err(Error::InvalidArgument(format!(
            "code {z} out of range for codebook of size {}",
            v.rows()
        )));
    }
    let out_dim = w.map_or(v.cols(), Tensor2::rows);
    if let Some(w) = w {
        if w.cols() != v.cols() {
            return Err(Error::Shape(format!(
                "projection has {} columns, codewords have {}",
                w.cols(),
                v.cols()
            )));
        }
    }
    if x.len() != out_dim {
        return Err(Error::Shape(format!(
            "frame dimension {} vs generator output {out_dim}",
            x.len()
        )));
    }
    let mean = generator_mean(z, v, w);
    Ok(F::of(gaussian_log_norm(x.len())) - F::of(0.5) * sq_dist(x, &mean))
}

fn joint_log_scores<F: Real>(
    x: &[F],
    prior: &CodeDistribution<F>,
    v: &Tensor2<F>,
    w: Option<&Tensor2<F>>,
) -> Result<Vec<F>> {
    if prior.len() != v.rows() {
        return Err(Error::Shape(format!(
            "prior over {} codes vs codebook of {}",
            prior.len(),
            v.rows()
        )));
    }
    (0..v.rows())
        .map(|z| Ok(generation_log_density(x, z, v, w)? + prior.log_probs[z]))
        .collect()
}

/// Posterior over codes given the past (through `prior`) and the future frame.
pub fn posterior_distribution<F: Real>(
    x: &[F],
    prior: &CodeDistribution<F>,
    v: &Tensor2<F>,
    w: Option<&Tensor2<F>>,
) -> Result<CodeDistribution<F>> {
    Ok(CodeDistribution::from_logits(joint_log_scores(
        x, prior, v, w,
    )?))
}

/// `ln Σ_z p(x | z) prior(z)`.
pub fn marginal_log_likelihood<F: Real>(
    x: &[F],
    prior: &CodeDistribution<F>,
    v: &Tensor2<F>,
    w: Option<&Tensor2<F>>,
) -> Result<F> {
    Ok(logsumexp_unchecked(&joint_log_scores(x, prior, v, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor2<f64> {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn predictor_examples() {
        let p = predictor_distribution(&[0.3f64, -2.0], &Tensor2::zeros(2, 5)).unwrap();
        assert!(p.probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let u = t(&[vec![1.0, -0.5, 2.0], vec![0.25, 0.0, -1.0]]);
        let h = [0.4, 1.2];
        let p = predictor_distribution(&h, &u).unwrap();
        let scores: Vec<f64> = (0..3)
            .map(|j| h[0] * u[(0, j)] + h[1] * u[(1, j)])
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..3 {
            assert!((p.probs[j] - scores[j].exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn confirmation_examples() {
        let v = t(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let q = confirmation_distribution(&[1.0, 2.0], &v).unwrap();
        assert!(q.probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let q = confirmation_distribution(&[0.0], &t(&[vec![0.0], vec![1.0]])).unwrap();
        assert!((q.probs[0] - 0.7310586).abs() < 1e-7);
        assert!((q.probs[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-14);

        let q = confirmation_distribution(&[5.0], &t(&[vec![-3.0]])).unwrap();
        assert_eq!(q.probs, vec![1.0]);
    }

    #[test]
    fn generation_examples() {
        let v = t(&[vec![0.7]]);
        let l = generation_log_density(&[0.7], 0, &v, None).unwrap();
        assert!((l + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((l + 0.91894).abs() < 1e-5);

        let v = t(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let l = generation_log_density(&[0.0, 0.0], 1, &v, None).unwrap();
        assert!((l - (-(2.0 * PI).ln() - 1.0)).abs() < 1e-14);
        assert!((l + 2.83788).abs() < 1e-5);

        assert!(generation_log_density(&[0.0, 0.0], 2, &v, None).is_err());
    }

    #[test]
    fn generator_density_integrates_to_one() {
        let v = t(&[vec![0.3]]);
        let (lo, hi, n) = (-12.0, 12.0, 24_000);
        let h = (hi - lo) / n as f64;
        // composite Simpson
        let f = |x: f64| generation_log_density(&[x], 0, &v, None).unwrap().exp();
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn projection_changes_generator_mean() {
        let v = t(&[vec![1.0, 2.0, 3.0]]);
        let w = t(&[vec![1.0, 0.0, 1.0], vec![0.0, 2.0, 0.0]]);
        assert_eq!(generator_mean(0, &v, Some(&w)), vec![4.0, 4.0]);
        let l = generation_log_density(&[4.0, 4.0], 0, &v, Some(&w)).unwrap();
        assert!((l - gaussian_log_norm(2)).abs() < 1e-15);
    }

    #[test]
    fn posterior_examples() {
        let v = t(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let prior = CodeDistribution::uniform(3);
        let post = posterior_distribution(&[0.0, 0.0], &prior, &v, None).unwrap();
        assert!(post.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-14));

        let prior = CodeDistribution::one_hot(3, 2);
        let post = posterior_distribution(&[5.0, -4.0], &prior, &v, None).unwrap();
        assert_eq!(post.probs, vec![0.0, 0.0, 1.0]);

        // N=2 against product-then-normalize
        let v = t(&[vec![0.2], vec![1.5]]);
        let prior = CodeDistribution::from_logits(vec![0.3, -0.4]);
        let x = [0.9];
        let post = posterior_distribution(&x, &prior, &v, None).unwrap();
        let gauss = |m: f64| (-0.5 * (x[0] - m).powi(2)).exp() / (2.0 * PI).sqrt();
        let a = gauss(0.2) * prior.probs[0];
        let b = gauss(1.5) * prior.probs[1];
        assert!((post.probs[0] - a / (a + b)).abs() < 1e-14);
    }

    #[test]
    fn marginal_examples() {
        let v = t(&[vec![0.4, -0.2]]);
        let m =
            marginal_log_likelihood(&[1.0, 1.0], &CodeDistribution::uniform(1), &v, None).unwrap();
        let g = generation_log_density(&[1.0, 1.0], 0, &v, None).unwrap();
        assert!((m - g).abs() < 1e-14);

        let v = t(&[vec![0.0], vec![2.0]]);
        let x = [0.5];
        let m = marginal_log_likelihood(&x, &CodeDistribution::uniform(2), &v, None).unwrap();
        let l1 = generation_log_density(&x, 0, &v, None).unwrap();
        let l2 = generation_log_density(&x, 1, &v, None).unwrap();
        assert!((m - ((l1.exp() + l2.exp()) / 2.0).ln()).abs() < 1e-14);
    }

    fn random_case(
        rng: &mut Rng,
        n: usize,
        d: usize,
    ) -> (Vec<f64>, CodeDistribution<f64>, Tensor2<f64>) {
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let v = Tensor2::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let prior = CodeDistribution::from_logits((0..n).map(|_| 2.0 * rng.normal()).collect());
        (x, prior, v)
    }

    #[test]
    fn posterior_and_marginal_match_brute_force() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let n = 1 + rng.below(64);
            let d = 1 + rng.below(6);
            let (x, prior, v) = random_case(&mut rng, n, d);
            let joint: Vec<f64> = (0..n)
                .map(|z| {
                    let r: f64 = x.iter().zip(v.row(z)).map(|(a, b)| (a - b).powi(2)).sum();
                    (2.0 * PI).powf(-(d as f64) / 2.0) * (-0.5 * r).exp() * prior.probs[z]
                })
                .collect();
            let total: f64 = joint.iter().sum();
            let post = posterior_distribution(&x, &prior, &v, None).unwrap();
            for z in 0..n {
                assert!((post.probs[z] - joint[z] / total).abs() < 1e-10);
            }
            let m = marginal_log_likelihood(&x, &prior, &v, None).unwrap();
            assert!((m - total.ln()).abs() < 1e-10);
            let best = (0..n)
                .map(|z| generation_log_density(&x, z, &v, None).unwrap() + prior.log_probs[z])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(m >= best);
        }
    }

    #[test]
    fn confirmation_mode_is_nearest_codeword() {
        let mut rng = Rng::new(4);
        for _ in 0..500 {
            let n = 1 + rng.below(20);
            let (x, _, v) = random_case(&mut rng, n, 3);
            let q = confirmation_distribution(&x, &v).unwrap();
            assert_eq!(q.mode(), nearest_codeword(&x, &v));
        }
    }

    #[test]
    fn large_beta_gives_point_mass() {
        let v = t(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]]);
        let q = confirmation_distribution_scaled(&[2.9, 0.2], &v, 1e4).unwrap();
        assert!(q.probs[1] > 1.0 - 1e-6);
        assert_eq!(q.mode(), 1);
    }
}
