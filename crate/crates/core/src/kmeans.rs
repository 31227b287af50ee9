//! k-means++ seeding and Lloyd iterations over pooled acoustic frames.
//!
//! The assignment step is the hard confirmation distribution (each frame goes
//! to its nearest centroid) and the update step moves each centroid to the
//! mean of its frames, which minimizes the expected Gaussian reconstruction
//! loss under that hard assignment.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{pool_frames, Alignments, FeatureSequence};
use crate::numerics::{Real, Rng, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult<F> {
    pub centroids: Tensor2<F>,
    /// Nearest-centroid index of every frame under `centroids`.
    pub assignments: Vec<usize>,
    /// Sum of squared distances of frames to their assigned centroid.
    pub objective: f64,
    /// Objective after the initial assignment and after every update.
    pub history: Vec<f64>,
    /// Number of update steps performed.
    pub iterations: usize,
}

fn dist_f64<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
pub fn nearest<F: Real>(x: &[F], centroids: &Tensor2<F>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = dist_f64(x, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest-centroid assignment for every row of `frames`.
pub fn assign<F: Real>(frames: &Tensor2<F>, centroids: &Tensor2<F>) -> (Vec<usize>, Vec<f64>) {
    (0..frames.rows())
        .into_par_iter()
        .map(|i| nearest(frames.row(i), centroids))
        .unzip()
}

/// k-means++ seeding: the first centroid is a uniformly chosen frame, each
/// further one a frame drawn with probability proportional to its squared
/// distance from the nearest centroid chosen so far. If every remaining
/// distance is zero the draw falls back to uniform.
pub fn kmeanspp_init<F: Real>(frames: &Tensor2<F>, n: usize, rng: &mut Rng) -> Result<Tensor2<F>> {
    let m = frames.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one centroid".into()));
    }
    if m < n {
        return Err(Error::InvalidArgument(format!(
            "{n} centroids requested but only {m} frames available"
        )));
    }
    let mut centroids = Tensor2::zeros(n, frames.cols());
    let first = rng.below(m);
    centroids.row_mut(0).copy_from_slice(frames.row(first));
    let mut d2: Vec<f64> = (0..m)
        .map(|i| dist_f64(frames.row(i), frames.row(first)))
        .collect();
    for c in 1..n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            rng.below(m)
        };
        centroids.row_mut(c).copy_from_slice(frames.row(pick));
        let chosen = centroids.row(c).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist_f64(frames.row(i), &chosen));
        }
    }
    Ok(centroids)
}

/// Lloyd iterations from `init`, at most `iters` updates, stopping early once
/// assignments stop changing.
///
/// A cluster that loses all its frames is re-seeded with the frame farthest
/// from its current centroid.
pub fn lloyd<F: Real>(
    frames: &Tensor2<F>,
    init: &Tensor2<F>,
    iters: usize,
) -> Result<KmeansResult<F>> {
    if frames.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if init.cols() != frames.cols() || init.rows() == 0 {
        return Err(Error::Shape(format!(
            "centroids {:?} vs frames of dimension {}",
            init.shape(),
            frames.cols()
        )));
    }
    let n = init.rows();
    let d = frames.cols();
    let mut centroids = init.clone();
    let (mut assignments, mut dists) = assign(frames, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    for _ in 0..iters {
        let mut sums = vec![0.0f64; n * d];
        let mut counts = vec![0usize; n];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(frames.row(i)) {
                *s += v.f64();
            }
        }
        for j in 0..n {
            if counts[j] > 0 {
                for (c, s) in centroids
                    .row_mut(j)
                    .iter_mut()
                    .zip(&sums[j * d..(j + 1) * d])
                {
                    *c = F::of(s / counts[j] as f64);
                }
            }
        }
        let empty: Vec<usize> = (0..n).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(usize, f64)> = assignments
                .iter()
                .enumerate()
                .map(|(i, &a)| (i, dist_f64(frames.row(i), centroids.row(a))))
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (&j, &(i, _)) in empty.iter().zip(&far) {
                let row = frames.row(i).to_vec();
                centroids.row_mut(j).copy_from_slice(&row);
            }
        }
        iterations += 1;
        let (next, next_d) = assign(frames, &centroids);
        history.push(next_d.iter().sum());
        let converged = next == assignments;
        assignments = next;
        dists = next_d;
        if converged {
            break;
        }
    }
    Ok(KmeansResult {
        centroids,
        assignments,
        objective: dists.iter().sum(),
        history,
        iterations,
    })
}

/// Settings for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub clusters: usize,
    pub iters: usize,
    /// Utterances sampled (without replacement) for seeding and, unless
    /// `lloyd_on_full_data` is set, for the Lloyd iterations.
    pub init_utterances: usize,
    pub lloyd_on_full_data: bool,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            clusters: 256,
            iters: 10,
            init_utterances: 3000,
            lloyd_on_full_data: false,
        }
    }
}

/// Sample utterances, seed with k-means++, refine with Lloyd.
pub fn fit(
    data: &[FeatureSequence],
    cfg: &KmeansConfig,
    rng: &mut Rng,
) -> Result<KmeansResult<f32>> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut picked = rng.sample_indices(data.len(), cfg.init_utterances);
    picked.sort_unstable();
    let sample: Vec<FeatureSequence> = picked.iter().map(|&i| data[i].clone()).collect();
    let sample_frames = pool_frames(&sample);
    let init = kmeanspp_init(&sample_frames, cfg.clusters, rng)?;
    if cfg.lloyd_on_full_data {
        lloyd(&pool_frames(data), &init, cfg.iters)
    } else {
        lloyd(&sample_frames, &init, cfg.iters)
    }
}

/// Nearest-centroid code for every frame of every utterance.
pub fn assign_targets(data: &[FeatureSequence], centroids: &Tensor2<f32>) -> Result<Alignments> {
    let mut out = Alignments::new();
    for seq in data {
        if seq.dim() != centroids.cols() {
            return Err(Error::Utterance {
                utt: seq.utt_id.clone(),
                reason: format!(
                    "frame dimension {} vs centroid dimension {}",
                    seq.dim(),
                    centroids.cols()
                ),
            });
        }
        out.insert(seq.utt_id.clone(), assign(&seq.frames, centroids).0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn col(xs: &[f64]) -> Tensor2<f64> {
        Tensor2::from_vec(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn already_converged() {
        let pts = Tensor2::from_rows(&[vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap();
        let r = lloyd(&pts, &pts, 10).unwrap();
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn four_points_two_clusters() {
        let pts = col(&[0.0, 1.0, 10.0, 11.0]);
        let mut brute = f64::INFINITY;
        for mask in 0u32..16 {
            let mut groups = [vec![], vec![]];
            for i in 0..4 {
                groups[((mask >> i) & 1) as usize].push(pts[(i, 0)]);
            }
            let cost: f64 = groups
                .iter()
                .filter(|g| !g.is_empty())
                .map(|g| {
                    let m = g.iter().sum::<f64>() / g.len() as f64;
                    g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
                })
                .sum();
            brute = brute.min(cost);
        }
        assert_eq!(brute, 1.0);
        for init in [[0.0, 11.0], [1.0, 10.0], [-3.0, 4.0], [6.0, 20.0]] {
            let r = lloyd(&pts, &col(&init), 10).unwrap();
            let mut c = [r.centroids[(0, 0)], r.centroids[(1, 0)]];
            c.sort_by(f64::total_cmp);
            assert_eq!(c, [0.5, 10.5]);
            assert_eq!(r.objective, brute);
        }
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let pts = col(&[1.0, 2.0, 6.0, 7.0]);
        let r = lloyd(&pts, &col(&[100.0]), 10).unwrap();
        assert_eq!(r.centroids[(0, 0)], 4.0);
        let var = [1.0f64, 2.0, 6.0, 7.0]
            .iter()
            .map(|x| (x - 4.0).powi(2))
            .sum::<f64>()
            / 4.0;
        assert!((r.objective - var * 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let pts = col(&[0.0, 1.0, 2.0, 50.0]);
        // centroid 1 starts far away and captures nothing
        let r = lloyd(&pts, &col(&[1.0, -1000.0]), 10).unwrap();
        let counts = (0..2)
            .map(|j| r.assignments.iter().filter(|&&a| a == j).count())
            .collect::<Vec<_>>();
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn kmeanspp_with_all_frames_is_permutation() {
        let pts = col(&[3.0, -1.0, 8.0, 0.5, 2.0]);
        let c = kmeanspp_init(&pts, 5, &mut Rng::new(4)).unwrap();
        let mut got: Vec<f64> = c.as_slice().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![-1.0, 0.5, 2.0, 3.0, 8.0]);
    }

    #[test]
    fn kmeanspp_duplicates_fall_back() {
        let pts = Tensor2::filled(6, 2, 1.25);
        let c = kmeanspp_init(&pts, 3, &mut Rng::new(0)).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 1.25));
        assert!(kmeanspp_init(&pts, 7, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn kmeanspp_is_seed_deterministic() {
        let mut rng = Rng::new(2);
        let pts = Tensor2::from_vec(50, 3, (0..150).map(|_| rng.normal()).collect()).unwrap();
        let a = kmeanspp_init(&pts, 6, &mut Rng::new(77)).unwrap();
        let b = kmeanspp_init(&pts, 6, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assign_targets_examples() {
        let cents = Tensor2::from_rows(&[vec![0.0f32], vec![2.0], vec![5.0], vec![9.0]]).unwrap();
        let seq = FeatureSequence::new(
            "u",
            Tensor2::from_rows(&[vec![9.0f32], vec![1.0], vec![5.1]]).unwrap(),
        );
        let t = assign_targets(&[seq], &cents).unwrap();
        // frame at 1.0 is equidistant from centroids 0 and 1
        assert_eq!(t.get("u").unwrap(), &[3, 0, 2]);
    }

    #[test]
    fn assign_matches_loop_oracle() {
        let mut rng = Rng::new(10);
        let pts = Tensor2::from_vec(40, 3, (0..120).map(|_| rng.normal()).collect()).unwrap();
        let cents = Tensor2::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let (a, _) = assign(&pts, &cents);
        for i in 0..40 {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for j in 0..5 {
                let d: f64 = (0..3).map(|c| (pts[(i, c)] - cents[(j, c)]).powi(2)).sum();
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            assert_eq!(a[i], best);
        }
    }

    #[test]
    fn centroids_are_local_minimizers() {
        let mut rng = Rng::new(6);
        let pts = Tensor2::from_vec(30, 2, (0..60).map(|_| rng.normal() * 3.0).collect()).unwrap();
        let init = kmeanspp_init(&pts, 3, &mut rng).unwrap();
        let r = lloyd(&pts, &init, 50).unwrap();
        let cost = |c: &Tensor2<f64>| -> f64 {
            r.assignments
                .iter()
                .enumerate()
                .map(|(i, &a)| dist_f64(pts.row(i), c.row(a)))
                .sum()
        };
        let base = cost(&r.centroids);
        for j in 0..3 {
            for k in 0..2 {
                for eps in [1e-3, -1e-3] {
                    let mut c = r.centroids.clone();
                    c[(j, k)] += eps;
                    assert!(cost(&c) >= base);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn objective_never_increases(
            data in prop::collection::vec(-20.0f64..20.0, 12..90),
            n in 1usize..5,
            seed in 0u64..1000,
        ) {
            let rows = data.len() / 3;
            let pts = Tensor2::from_vec(rows, 3, data[..rows * 3].to_vec()).unwrap();
            let init = kmeanspp_init(&pts, n.min(rows), &mut Rng::new(seed)).unwrap();
            let r = lloyd(&pts, &init, 10).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            for (i, &a) in r.assignments.iter().enumerate() {
                prop_assert_eq!(a, nearest(pts.row(i), &r.centroids).0);
            }
        }
    }
}
