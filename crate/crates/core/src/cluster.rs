//! Per-class k-means and the conditioning-initialization manifests built
//! from its clusters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{pseudoword_init, simple_prompt, ClassSynset, PromptError, PseudowordInit};
use crate::scalar::Scalar;
use crate::seed::derived_rng;

/// Cluster counts used for per-class conditioning sweeps.
pub const K_PRESETS: [usize; 4] = [1, 5, 10, 15];

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least k = {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("point {0} has a different dimension or non-finite values")]
    BadPoint(usize),
    #[error("{ids} image ids for {points} clustered points")]
    IdCountMismatch { ids: usize, points: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel<T> {
    pub k: usize,
    pub centroids: Vec<Vec<T>>,
    /// Cluster index per input point, in input order.
    pub assignments: Vec<usize>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl<T> ClusterModel<T> {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn seed_centers(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = derived_rng(seed, &["kmeans++"]);
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if t < d {
                        break;
                    }
                    t -= d;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Nearest centroid per point (ties to the lower index) and its squared
/// distance.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its centroid.
pub fn kmeans<T: Scalar, R: AsRef<[T]>>(
    points: &[R],
    k: usize,
    seed: u64,
    config: KMeansConfig,
) -> Result<ClusterModel<T>, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints { n: points.len(), k });
    }
    let dim = points[0].as_ref().len();
    let pts: Vec<Vec<f64>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let p = p.as_ref();
            if p.len() != dim || p.iter().any(|x| !x.is_finite()) {
                return Err(ClusterError::BadPoint(i));
            }
            Ok(p.iter().map(|x| x.as_f64()).collect())
        })
        .collect::<Result<_, _>>()?;

    let mut centroids = seed_centers(&pts, k, seed);
    let mut state = assign(&pts, &centroids);
    let inertia_of = |s: &[(usize, f64)]| s.iter().map(|(_, d)| d).sum::<f64>();
    let mut history = vec![inertia_of(&state)];
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        let mut sizes = vec![0usize; k];
        for (c, _) in &state {
            sizes[*c] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let donor = state
                .iter()
                .enumerate()
                .filter(|(_, (c, _))| sizes[*c] > 1)
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("n >= k leaves a cluster with two or more points");
            sizes[state[donor].0] -= 1;
            sizes[empty] = 1;
            state[donor] = (empty, 0.0);
        }

        let mut sums = vec![vec![0.0f64; dim]; k];
        for (p, (c, _)) in pts.iter().zip(&state) {
            for (s, x) in sums[*c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for (j, s) in sums.into_iter().enumerate() {
            let n = sizes[j] as f64;
            let mean: Vec<f64> = s.into_iter().map(|v| v / n).collect();
            shift = shift.max(sq_dist(&mean, &centroids[j]).sqrt());
            centroids[j] = mean;
        }

        let next = assign(&pts, &centroids);
        let changed = next.iter().zip(&state).any(|(a, b)| a.0 != b.0);
        state = next;
        history.push(inertia_of(&state));
        if !changed || shift < config.tol {
            break;
        }
    }

    Ok(ClusterModel {
        k,
        centroids: centroids
            .into_iter()
            .map(|c| c.into_iter().map(T::from_f64_lossy).collect())
            .collect(),
        assignments: state.iter().map(|(c, _)| *c).collect(),
        inertia: *history.last().expect("history is never empty"),
        inertia_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    SimpleNoWs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningEntry {
    pub class_wnid: String,
    pub cluster: usize,
    pub member_count: usize,
    pub member_ids: Vec<String>,
    pub init_prompt: String,
    pub pseudoword: PseudowordInit,
}

/// Per-cluster initialization records for an external text-encoder pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningManifest {
    pub class_wnid: String,
    pub k: usize,
    pub prompt_source: PromptSource,
    pub entries: Vec<ConditioningEntry>,
}

pub fn conditioning_manifest<T>(
    class: &ClassSynset,
    clusters: &ClusterModel<T>,
    image_ids: &[String],
    prompt_source: PromptSource,
) -> Result<ConditioningManifest, ClusterError> {
    if image_ids.len() != clusters.assignments.len() {
        return Err(ClusterError::IdCountMismatch {
            ids: image_ids.len(),
            points: clusters.assignments.len(),
        });
    }
    let init_prompt = match prompt_source {
        PromptSource::SimpleNoWs => simple_prompt(class, true)?.text,
    };
    let pseudoword = pseudoword_init(class)?;
    let entries = (0..clusters.k)
        .map(|c| {
            let member_ids: Vec<String> = clusters.members(c).map(|i| image_ids[i].clone()).collect();
            ConditioningEntry {
                class_wnid: class.wnid.clone(),
                cluster: c,
                member_count: member_ids.len(),
                member_ids,
                init_prompt: init_prompt.clone(),
                pseudoword: pseudoword.clone(),
            }
        })
        .collect();
    Ok(ConditioningManifest {
        class_wnid: class.wnid.clone(),
        k: clusters.k,
        prompt_source,
        entries,
    })
}
