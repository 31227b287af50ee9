//! Central-difference verification of analytic gradients.

use super::params::ParamSet;
use super::rng::Rng;
use crate::error::{Error, Result};

/// Coordinates probed per block when the block is larger than this.
pub const MIN_PROBES_PER_BLOCK: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    /// `|ga - gn| / max(1, |ga|, |gn|)`, maximized over probed coordinates.
    pub max_rel_error: f64,
    /// Flat row-major index of the worst coordinate.
    pub worst_coord: usize,
    pub probed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Blocks whose error exceeds `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| !(b.max_rel_error < tol))
            .map(|b| b.name.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare `analytic` against central differences of `loss` around `params`.
///
/// Only blocks named in `blocks` are probed. Each probed block gets every
/// coordinate if it has at most [`MIN_PROBES_PER_BLOCK`] entries, otherwise a
/// uniform sample of that many distinct coordinates drawn from `rng`.
pub fn grad_check<L>(
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    blocks: &[&str],
    epsilon: f64,
    rng: &mut Rng,
    mut loss: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for &name in blocks {
        let n = params.get(name).len();
        let coords = if n <= MIN_PROBES_PER_BLOCK {
            (0..n).collect()
        } else {
            let mut c = rng.sample_indices(n, MIN_PROBES_PER_BLOCK);
            c.sort_unstable();
            c
        };
        let mut block = BlockReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_coord: coords.first().copied().unwrap_or(0),
            probed: coords.len(),
        };
        for &c in &coords {
            let orig = params.get(name).as_slice()[c];
            probe.get_mut(name).as_mut_slice()[c] = orig + epsilon;
            let up = loss(&probe)?;
            probe.get_mut(name).as_mut_slice()[c] = orig - epsilon;
            let down = loss(&probe)?;
            probe.get_mut(name).as_mut_slice()[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing block {name} coordinate {c}"
                )));
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let err = relative_error(analytic.get(name).as_slice()[c], numeric);
            if err > block.max_rel_error || err.is_nan() {
                block.max_rel_error = err;
                block.worst_coord = c;
            }
        }
        report.blocks.push(block);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;

    fn quadratic_setup() -> (ParamSet<f64>, ParamSet<f64>) {
        let mut p = ParamSet::new();
        p.push(
            "a",
            Tensor2::from_vec(20, 15, (0..300).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        p.push("b", Tensor2::from_vec(1, 3, vec![0.5, -2.0, 4.0]).unwrap());
        // gradient of ½||θ||² is θ
        let g = p.clone();
        (p, g)
    }

    fn half_sq_norm(p: &ParamSet<f64>) -> Result<f64> {
        Ok(0.5 * p.iter().map(|b| b.value.sq_norm()).sum::<f64>())
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let (p, g) = quadratic_setup();
        let report = grad_check(&p, &g, &["a", "b"], 1e-5, &mut Rng::new(0), half_sq_norm).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
        assert_eq!(report.blocks[0].probed, MIN_PROBES_PER_BLOCK);
        assert_eq!(report.blocks[1].probed, 3);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (p, mut g) = quadratic_setup();
        g.get_mut("b").as_mut_slice()[2] *= 1.1;
        let report = grad_check(&p, &g, &["a", "b"], 1e-5, &mut Rng::new(0), half_sq_norm).unwrap();
        assert_eq!(report.flagged(1e-4), vec!["b"]);
        assert_eq!(report.blocks[1].worst_coord, 2);
    }

    #[test]
    fn non_finite_loss_names_block() {
        let (p, g) = quadratic_setup();
        let err = grad_check(&p, &g, &["b"], 1e-5, &mut Rng::new(0), |_| Ok(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("block b"));
    }
}
