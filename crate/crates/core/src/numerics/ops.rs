//! Log-space vector primitives.

use super::tensor::{Op, Real, Tensor2};
use crate::error::{Error, Result};

/// `ln Σ exp(v_i)` with max-shift.
pub fn logsumexp<F: Real>(v: &[F]) -> Result<F> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked<F: Real>(v: &[F]) -> F {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    let s: F = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Normalized log-probabilities, written in place.
pub fn log_softmax_in_place<F: Real>(v: &mut [F]) {
    let lse = logsumexp_unchecked(v);
    v.iter_mut().for_each(|x| *x -= lse);
}

pub fn log_softmax<F: Real>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = v.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

pub fn softmax<F: Real>(v: &[F]) -> Result<Vec<F>> {
    let mut out = log_softmax(v)?;
    out.iter_mut().for_each(|x| *x = x.exp());
    Ok(out)
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax_rows<F: Real>(m: &mut Tensor2<F>) {
    for i in 0..m.rows() {
        log_softmax_in_place(m.row_mut(i));
    }
}

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy<F: Real>(p: &[F]) -> Result<F> {
    if p.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(x) = p.iter().find(|x| **x < F::zero() || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "probability entry {x} is not a non-negative finite number"
        )));
    }
    let total: F = p.iter().copied().sum();
    if (total - F::one()).abs() > F::of(1e-6) {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(p.iter()
        .filter(|&&x| x > F::zero())
        .map(|&x| -x * x.ln())
        .sum())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin<F: PartialOrd + Copy>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Pairwise squared Euclidean distances between the rows of `x` (M×d) and
/// `v` (N×d). Entries are clamped at zero against cancellation.
pub fn sq_dist_matrix<F: Real>(x: &Tensor2<F>, v: &Tensor2<F>) -> Result<Tensor2<F>> {
    if x.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "row dimension {} vs {}",
            x.cols(),
            v.cols()
        )));
    }
    let mut d = Tensor2::matmul(x, Op::N, v, Op::T);
    let xn: Vec<F> = (0..x.rows()).map(|i| sq_norm(x.row(i))).collect();
    let vn: Vec<F> = (0..v.rows()).map(|j| sq_norm(v.row(j))).collect();
    let two = F::of(2.0);
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..v.rows() {
            let dot = d[(i, j)];
            let mut val = xn[i] - two * dot + vn[j];
            // The expanded form loses exactness for identical rows; recompute
            // near-zero entries directly so that equality gives exactly 0.
            if val <= F::of(1e-6) * (xn[i] + vn[j] + F::one()) {
                val = sq_dist(xi, v.row(j));
            }
            d[(i, j)] = val.max(F::zero());
        }
    }
    Ok(d)
}

pub fn sq_norm<F: Real>(v: &[F]) -> F {
    v.iter().map(|&a| a * a).sum()
}

pub fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0f64]).unwrap(), 0.0);
        let v = logsumexp(&[1000.0f64, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let xs = [0.3f64, -1.2, 2.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs).unwrap() - naive).abs() < 1e-12);
        assert!(matches!(logsumexp::<f64>(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[-3.5f64; 4]).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let p = softmax(&[0.0f64, -1.0]).unwrap();
        let logistic = 1.0 / (1.0 + (-1f64).exp());
        assert!((p[0] - logistic).abs() < 1e-12);
        assert!((p[0] - 0.7310586).abs() < 1e-7);
        assert!((p[1] - 0.2689414).abs() < 1e-7);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
        let u = vec![1.0 / 256.0; 256];
        assert!((entropy(&u).unwrap() - 256f64.ln()).abs() < 1e-12);
        let h = entropy(&[0.5f64, 0.25, 0.25]).unwrap();
        let direct = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 1.0397).abs() < 1e-4);
        assert!(entropy(&[1.2f64, -0.2]).is_err());
    }

    #[test]
    fn sq_dist_examples() {
        let x = Tensor2::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        let v = Tensor2::from_rows(&[vec![3.0f64, 4.0]]).unwrap();
        assert_eq!(sq_dist_matrix(&x, &v).unwrap()[(0, 0)], 25.0);

        let m = Tensor2::from_rows(&[vec![0.1f64, 7.3, -2.0], vec![1e3, 2.0, 0.5]]).unwrap();
        let d = sq_dist_matrix(&m, &m).unwrap();
        assert_eq!(d[(0, 0)], 0.0);
        assert_eq!(d[(1, 1)], 0.0);

        let mut seed = 0.37f64;
        let mut next = || {
            seed = (seed * 9301.0 + 49297.0) % 233280.0;
            seed / 233280.0 * 4.0 - 2.0
        };
        let a = Tensor2::from_vec(5, 3, (0..15).map(|_| next()).collect()).unwrap();
        let b = Tensor2::from_vec(4, 3, (0..12).map(|_| next()).collect()).unwrap();
        let d = sq_dist_matrix(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut want = 0.0;
                for c in 0..3 {
                    want += (a[(i, c)] - b[(j, c)]).powi(2);
                }
                assert!((d[(i, j)] - want).abs() < 1e-10);
            }
        }
        assert!(sq_dist_matrix(&a, &Tensor2::<f64>::zeros(2, 2)).is_err());
    }

    #[test]
    fn arg_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }

        #[test]
        fn logsumexp_bounds(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&v).unwrap();
            prop_assert!(l >= m);
            prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn entropy_within_bounds(v in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            let p = softmax(&v).unwrap();
            let h = entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }
    }
}

/// Display wrapper for floats in text output: shortest round-trip digits,
/// switching to exponent form where plain decimals would run long.
#[derive(Debug, Clone, Copy)]
pub struct Decimal(pub f64);

impl std::fmt::Display for Decimal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
            write!(f, "{:e}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[cfg(test)]
mod decimal_tests {
    use super::Decimal;

    #[test]
    fn round_trips_and_stays_short() {
        for x in [
            0.0,
            -0.0,
            1.5,
            -45.12790116709218,
            6.1e-170,
            3e20,
            1e-4,
            f64::MIN_POSITIVE,
        ] {
            let s = Decimal(x).to_string();
            assert!(s.len() < 26, "{s}");
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(Decimal(0.25).to_string(), "0.25");
        assert_eq!(Decimal(6.1e-170).to_string(), "6.1e-170");
    }
}
