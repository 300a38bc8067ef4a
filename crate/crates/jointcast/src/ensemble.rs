//! Scene-level ensembling: cluster many models' joint predictions with
//! weighted k-means and average each cluster into one output world.
//!
//! Every input prediction contributes one feature vector — the flattened
//! joint endpoints of all target agents — and its scene score as a sample
//! weight. Clustering is k-means++-seeded weighted Lloyd iteration. Each
//! cluster becomes an output world: the weight-weighted average of its
//! members' full joint trajectories, scored by its share of the total weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::Result;

/// Clustering outcome. `costs[i]` is the weighted within-cluster squared
/// distance after iteration `i`; Lloyd steps never increase it.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Samples an index with probability proportional to `mass`; masses must be
/// non-negative with positive total.
fn sample_index(rng: &mut ChaCha8Rng, mass: &[f64]) -> usize {
    let total: f64 = mass.iter().sum();
    let r = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for (i, &m) in mass.iter().enumerate() {
        acc += m;
        if r < acc {
            return i;
        }
    }
    mass.len() - 1
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Weighted k-means over `points` (`[N][P]`). Seeding picks the first
/// centroid with probability proportional to weight, then each next centroid
/// proportional to weight times squared distance to the nearest chosen
/// centroid. Lloyd iterations reassign and recompute weighted means until the
/// assignment stops changing or `iters` passes run; a cluster left empty is
/// re-seeded to the point farthest from its assigned centroid.
pub fn weighted_kmeans(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KmeansResult> {
    let n = points.len();
    if k == 0 || iters == 0 {
        return Err(Error::Config("weighted_kmeans: K and iters must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Validation(format!(
            "weighted_kmeans: {n} samples cannot fill {k} clusters"
        )));
    }
    if weights.len() != n {
        return Err(Error::Dimension(format!(
            "weighted_kmeans: {n} points but {} weights",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
        return Err(Error::Validation("weighted_kmeans: weights must be positive".into()));
    }
    let p = points[0].len();
    if points.iter().any(|x| x.len() != p) {
        return Err(Error::Dimension("weighted_kmeans: ragged feature rows".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding with weight-proportional mass.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[sample_index(&mut rng, weights)].clone());
    while centroids.len() < k {
        let mass: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(x, &w)| w * nearest(x, &centroids).1)
            .collect();
        let next = if mass.iter().sum::<f64>() > 0.0 {
            sample_index(&mut rng, &mass)
        } else {
            // Every point coincides with a centroid; any point works.
            centroids.len() % n
        };
        centroids.push(points[next].clone());
    }

    let mut assignments = vec![0usize; n];
    let mut costs = Vec::new();
    for _ in 0..iters {
        // Assign.
        let mut changed = false;
        for (i, x) in points.iter().enumerate() {
            let (c, _) = nearest(x, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }

        // Re-seed empty clusters to the farthest point, stealing only from
        // clusters that keep at least one member so the fix terminates even
        // when every point coincides.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&i, &j| {
                    let di = sq_dist(&points[i], &centroids[assignments[i]]);
                    let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                    di.partial_cmp(&dj).unwrap()
                })
                .expect("weighted_kmeans: N >= K guarantees a donor cluster");
            centroids[empty] = points[far].clone();
            assignments[far] = empty;
            changed = true;
        }

        // Recenter: weighted means.
        for c in 0..k {
            let mut sum = vec![0.0; p];
            let mut mass = 0.0;
            for (i, x) in points.iter().enumerate() {
                if assignments[i] == c {
                    for (s, v) in sum.iter_mut().zip(x) {
                        *s += weights[i] * v;
                    }
                    mass += weights[i];
                }
            }
            for s in &mut sum {
                *s /= mass;
            }
            centroids[c] = sum;
        }

        let cost: f64 = points
            .iter()
            .zip(weights)
            .zip(&assignments)
            .map(|((x, &w), &a)| w * sq_dist(x, &centroids[a]))
            .sum();
        costs.push(cost);
        if !changed {
            break;
        }
    }

    Ok(KmeansResult { assignments, centroids, costs })
}

/// One candidate joint prediction entering the ensemble: a full trajectory
/// set `[A'][T']` with its scene score as weight.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub weight: f64,
    pub agent_ids: Vec<u64>,
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

/// Ensembled scene: exactly `k` output worlds with normalized scores.
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub agent_ids: Vec<u64>,
    /// `[K][A'][T']` world trajectories.
    pub worlds: Vec<Vec<Vec<[f64; 2]>>>,
    pub pi: Vec<f64>,
}

/// Clusters members by joint endpoints and averages each cluster.
///
/// `weighted_average` selects weight-weighted trajectory means (the default
/// pairing with weighted clustering) or plain means. Output `pi` is each
/// cluster's share of the total member weight; a cluster that ends empty
/// (possible only when members coincide) falls back to the all-member
/// average with zero score.
pub fn ensemble_scene(
    members: &[EnsembleMember],
    k: usize,
    iters: usize,
    seed: u64,
    weighted_average: bool,
) -> Result<EnsembleOutput> {
    let n = members.len();
    if n == 0 {
        return Err(Error::Validation("ensemble_scene: no members".into()));
    }
    let ids = &members[0].agent_ids;
    let a = members[0].trajectories.len();
    let t = members[0].trajectories.first().map(|tr| tr.len()).unwrap_or(0);
    if a == 0 || t == 0 || ids.len() != a {
        return Err(Error::Validation(
            "ensemble_scene: members must cover at least one agent and one step".into(),
        ));
    }
    for m in members {
        if m.agent_ids != *ids {
            return Err(Error::Validation(
                "ensemble_scene: members disagree on the target agent set".into(),
            ));
        }
        if m.trajectories.len() != a || m.trajectories.iter().any(|tr| tr.len() != t) {
            return Err(Error::Validation(
                "ensemble_scene: members disagree on trajectory shape".into(),
            ));
        }
    }

    let points: Vec<Vec<f64>> = members
        .iter()
        .map(|m| m.trajectories.iter().flat_map(|tr| tr[t - 1]).collect())
        .collect();
    let weights: Vec<f64> = members.iter().map(|m| m.weight).collect();
    let km = weighted_kmeans(&points, &weights, k, iters, seed)?;

    let total_weight: f64 = weights.iter().sum();
    let average = |member_idx: &[usize]| -> Vec<Vec<[f64; 2]>> {
        let mass: f64 = if weighted_average {
            member_idx.iter().map(|&i| weights[i]).sum()
        } else {
            member_idx.len() as f64
        };
        (0..a)
            .map(|agent| {
                (0..t)
                    .map(|step| {
                        let mut acc = [0.0, 0.0];
                        for &i in member_idx {
                            let w = if weighted_average { weights[i] } else { 1.0 };
                            let pnt = members[i].trajectories[agent][step];
                            acc[0] += w * pnt[0];
                            acc[1] += w * pnt[1];
                        }
                        [acc[0] / mass, acc[1] / mass]
                    })
                    .collect()
            })
            .collect()
    };

    let all: Vec<usize> = (0..n).collect();
    let mut worlds = Vec::with_capacity(k);
    let mut pi = Vec::with_capacity(k);
    for c in 0..k {
        let member_idx: Vec<usize> =
            (0..n).filter(|&i| km.assignments[i] == c).collect();
        if member_idx.is_empty() {
            worlds.push(average(&all));
            pi.push(0.0);
        } else {
            let mass: f64 = member_idx.iter().map(|&i| weights[i]).sum();
            worlds.push(average(&member_idx));
            pi.push(mass / total_weight);
        }
    }
    let z: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= z;
    }
    Ok(EnsembleOutput { agent_ids: ids.clone(), worlds, pi })
}
