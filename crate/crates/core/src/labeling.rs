//! Pseudo temporal-state labeling: soft centroid initialization, cosine
//! distance/penalty matrices, the minimum-cost state path and the
//! nearest-centroid refinement.

use crate::data::{Window, WindowedDataset};
use crate::scalar::Real;
use crate::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

/// 1 - <a,b>/(|a||b|), in [0, 2]. Near-zero norms give distance 1
/// (maximal uncertainty).
pub fn cosine_distance<S: Real>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "cosine_distance: dimension mismatch");
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let floor = S::from_f64_c(NORM_FLOOR);
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < floor || nb < floor {
        return S::one();
    }
    S::one() - dot / (na * nb)
}

#[derive(Clone, Debug)]
pub struct Centroids<S> {
    /// One row per state, `[T][feature_dim]`.
    pub u: Vec<Vec<S>>,
}

/// Probability-weighted centroid per state. A state whose total weight
/// is below threshold falls back to the global feature mean.
pub fn soft_init_centroids<S: Real>(
    features: &[Vec<S>],
    probs: &[Vec<S>],
) -> Result<Centroids<S>> {
    if features.is_empty() {
        return Err(Error::Data("soft_init_centroids: no samples".into()));
    }
    assert_eq!(features.len(), probs.len(), "features/probs length mismatch");
    let dim = features[0].len();
    let states = probs[0].len();
    let n = S::from_f64_c(features.len() as f64);
    let mut global = vec![S::zero(); dim];
    for f in features {
        for (g, &v) in global.iter_mut().zip(f) {
            *g += v / n;
        }
    }
    let floor = S::from_f64_c(NORM_FLOOR);
    let mut u = Vec::with_capacity(states);
    for t in 0..states {
        let mut num = vec![S::zero(); dim];
        let mut den = S::zero();
        for (f, p) in features.iter().zip(probs) {
            let w = p[t];
            den += w;
            for (acc, &v) in num.iter_mut().zip(f) {
                *acc += w * v;
            }
        }
        if den < floor {
            u.push(global.clone());
        } else {
            u.push(num.into_iter().map(|v| v / den).collect());
        }
    }
    Ok(Centroids { u })
}

/// Per-state means of the features assigned to each state. Empty states
/// keep their previous centroid.
pub fn hard_centroids<S: Real>(
    features: &[Vec<S>],
    path: &[usize],
    prev: &Centroids<S>,
) -> Centroids<S> {
    assert_eq!(features.len(), path.len(), "features/path length mismatch");
    let states = prev.u.len();
    let dim = prev.u[0].len();
    let mut sums = vec![vec![S::zero(); dim]; states];
    let mut counts = vec![0usize; states];
    for (f, &t) in features.iter().zip(path) {
        counts[t] += 1;
        for (acc, &v) in sums[t].iter_mut().zip(f) {
            *acc += v;
        }
    }
    let u = (0..states)
        .map(|t| {
            if counts[t] == 0 {
                prev.u[t].clone()
            } else {
                let c = S::from_f64_c(counts[t] as f64);
                sums[t].iter().map(|&v| v / c).collect()
            }
        })
        .collect();
    Centroids { u }
}

/// `[T x N]` cosine distances between temporally ordered features and
/// state centroids.
#[derive(Clone, Debug)]
pub struct DistanceMatrix<S> {
    pub m: Vec<Vec<S>>,
}

pub fn build_distance_matrix<S: Real>(
    features: &[Vec<S>],
    centroids: &Centroids<S>,
) -> Result<DistanceMatrix<S>> {
    if features.is_empty() {
        return Err(Error::Data("build_distance_matrix: no features".into()));
    }
    let m = centroids
        .u
        .iter()
        .map(|u| features.iter().map(|f| cosine_distance(f, u)).collect())
        .collect();
    Ok(DistanceMatrix { m })
}

/// `[T x T]` switch penalties: zero diagonal, `gamma` off-diagonal.
#[derive(Clone, Debug)]
pub struct PenaltyMatrix<S> {
    pub m: Vec<Vec<S>>,
    pub gamma: S,
}

pub fn build_penalty_matrix<S: Real>(states: usize, gamma: S) -> Result<PenaltyMatrix<S>> {
    if gamma < S::zero() {
        return Err(Error::Config("switch penalty gamma must be non-negative".into()));
    }
    if states == 0 {
        return Err(Error::Config("need at least one state".into()));
    }
    let m = (0..states)
        .map(|i| (0..states).map(|j| if i == j { S::zero() } else { gamma }).collect())
        .collect();
    Ok(PenaltyMatrix { m, gamma })
}

#[derive(Clone, Debug)]
pub struct StatePath<S> {
    pub path: Vec<usize>,
    pub total_cost: S,
    pub switch_count: usize,
}

fn argmin<S: Real>(costs: &[S]) -> usize {
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate().skip(1) {
        if c < costs[best] {
            best = i;
        }
    }
    best
}

/// Minimum-cost state sequence through the distance matrix with switch
/// penalties: a backward pass fills a future-cost table, then a forward
/// pass selects states greedily against it. Ties break toward the lower
/// state index.
pub fn min_cost_state_path<S: Real>(
    dist: &DistanceMatrix<S>,
    penalty: &PenaltyMatrix<S>,
) -> Result<StatePath<S>> {
    let states = dist.m.len();
    if states == 0 || dist.m[0].is_empty() {
        return Err(Error::Data("min_cost_state_path: empty distance matrix".into()));
    }
    let n = dist.m[0].len();
    assert_eq!(penalty.m.len(), states, "penalty matrix size mismatch");
    for row in &dist.m {
        assert_eq!(row.len(), n, "ragged distance matrix");
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite distance entry".into()));
        }
    }

    // future_costs[t][i]: minimum cost of steps i+1..N-1 given state t at i.
    let mut future = vec![vec![S::zero(); n]; states];
    let mut scratch = vec![S::zero(); states];
    for i in (0..n.saturating_sub(1)).rev() {
        let j = i + 1;
        for state in 0..states {
            for next in 0..states {
                scratch[next] = future[next][j] + dist.m[next][j] + penalty.m[state][next];
            }
            future[state][i] = scratch[argmin(&scratch)];
        }
    }

    let mut path = vec![0usize; n];
    for state in 0..states {
        scratch[state] = future[state][0] + dist.m[state][0];
    }
    path[0] = argmin(&scratch);
    let total_cost = scratch[path[0]];
    for i in 0..n - 1 {
        let j = i + 1;
        for next in 0..states {
            scratch[next] = future[next][j] + dist.m[next][j] + penalty.m[path[i]][next];
        }
        path[j] = argmin(&scratch);
    }

    let switch_count = path.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(StatePath { path, total_cost, switch_count })
}

/// Nearest-centroid assignment, ties to the lower state index.
pub fn assign_pseudo_temporal_states<S: Real>(
    features: &[Vec<S>],
    centroids: &Centroids<S>,
) -> Vec<usize> {
    features
        .iter()
        .map(|f| {
            let d: Vec<S> = centroids.u.iter().map(|u| cosine_distance(f, u)).collect();
            argmin(&d)
        })
        .collect()
}

/// One refinement pass for a single temporally ordered group:
/// soft centroids -> distance matrix -> minimum-cost path -> hard
/// centroids -> nearest-centroid assignment.
pub fn refine_group<S: Real>(
    features: &[Vec<S>],
    probs: &[Vec<S>],
    gamma: S,
) -> Result<Vec<usize>> {
    let soft = soft_init_centroids(features, probs)?;
    let dist = build_distance_matrix(features, &soft)?;
    let penalty = build_penalty_matrix(soft.u.len(), gamma)?;
    let sp = min_cost_state_path(&dist, &penalty)?;
    let hard = hard_centroids(features, &sp.path, &soft);
    Ok(assign_pseudo_temporal_states(features, &hard))
}

/// Statistics of one relabeling sweep.
#[derive(Clone, Debug, Default)]
pub struct RelabelStats {
    pub windows: usize,
    pub changed: usize,
}

impl RelabelStats {
    pub fn change_fraction(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.changed as f64 / self.windows as f64
        }
    }
}

/// Refresh `ts` on every window of the dataset. Each (domain, class,
/// segment) group is processed independently in temporal order; the
/// model supplies bottleneck features and temporal-state softmax rows
/// through the two closures. Exactly one refinement pass per call.
pub fn relabel_dataset(
    dataset: &mut WindowedDataset,
    feature_fn: &mut dyn FnMut(&[&Window]) -> Vec<Vec<f64>>,
    probs_fn: &mut dyn FnMut(&[&Window]) -> Vec<Vec<f64>>,
    gamma: f64,
) -> Result<RelabelStats> {
    let mut stats = RelabelStats::default();
    let mut updates: Vec<(usize, usize)> = Vec::new();
    for group in dataset.group_indices() {
        if group.is_empty() {
            continue;
        }
        let windows: Vec<&Window> = group.iter().map(|&i| &dataset.windows[i]).collect();
        let features = feature_fn(&windows);
        let probs = probs_fn(&windows);
        let new_ts = refine_group(&features, &probs, gamma)?;
        for (&idx, &ts) in group.iter().zip(&new_ts) {
            updates.push((idx, ts));
        }
    }
    // single-writer commit
    for (idx, ts) in updates {
        stats.windows += 1;
        if dataset.windows[idx].ts != ts {
            stats.changed += 1;
        }
        dataset.windows[idx].ts = ts;
    }
    Ok(stats)
}
