//! Multi-world (scene-level) and marginal forecasting metrics.
//!
//! Multi-world metrics judge each predicted world as one joint outcome: the
//! best world k* minimizes the average final displacement error over agents,
//! and miss/collision rates are evaluated inside that single world. Marginal
//! metrics judge each agent independently, minimizing over modes per agent.
//!
//! Shapes: predictions are `[K][A'][T'][x, y]`, ground truth `[A'][T'][x, y]`.

use std::path::Path;

use crate::error::Error;
use crate::Result;

/// Distance thresholds in meters.
#[derive(Debug, Clone, Copy)]
pub struct MetricThresholds {
    /// Final-step error above this counts as a miss.
    pub miss: f64,
    /// Predicted agents closer than this at the same step count as colliding.
    pub collision: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds { miss: 2.0, collision: 2.0 }
    }
}

/// One evaluated scenario: multi-world and marginal values side by side.
/// Fraction-valued fields are over this scenario's target agents.
#[derive(Debug, Clone)]
pub struct ScenarioMetrics {
    pub scenario_id: String,
    pub num_actors: usize,
    pub avg_min_fde: f64,
    pub avg_min_fde_top: f64,
    pub avg_min_ade: f64,
    pub avg_min_ade_top: f64,
    pub actor_mr: f64,
    pub avg_brier_min_fde: f64,
    pub actor_cr: f64,
    pub min_fde: f64,
    pub min_ade: f64,
    pub mr: f64,
    pub b_min_fde: f64,
}

/// Scenario rows plus the dataset aggregate. Scenario-level metrics average
/// over scenarios; actor-level metrics (miss/collision rates and the marginal
/// family) pool every actor across the dataset.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub scenarios: Vec<ScenarioMetrics>,
    pub aggregate: ScenarioMetrics,
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn validate(
    scenario_id: &str,
    modes: &[Vec<Vec<[f64; 2]>>],
    pi: &[f64],
    gt: &[Vec<[f64; 2]>],
) -> Result<()> {
    if modes.is_empty() || gt.is_empty() {
        return Err(Error::Validation(format!(
            "scenario {scenario_id}: need at least one mode and one agent"
        )));
    }
    if pi.len() != modes.len() {
        return Err(Error::Validation(format!(
            "scenario {scenario_id}: {} modes but {} probabilities",
            modes.len(),
            pi.len()
        )));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::Validation(format!(
            "scenario {scenario_id}: probabilities sum to {total}, not 1"
        )));
    }
    let t = gt.first().map(|g| g.len()).unwrap_or(0);
    if t == 0 || gt.iter().any(|g| g.len() != t) {
        return Err(Error::Validation(format!(
            "scenario {scenario_id}: ground-truth horizons are empty or ragged"
        )));
    }
    for (k, mode) in modes.iter().enumerate() {
        if mode.len() != gt.len() {
            return Err(Error::Validation(format!(
                "scenario {scenario_id}: mode {k} covers {} agents, ground truth {}",
                mode.len(),
                gt.len()
            )));
        }
        if mode.iter().any(|traj| traj.len() != t) {
            return Err(Error::Validation(format!(
                "scenario {scenario_id}: mode {k} horizon differs from ground truth"
            )));
        }
    }
    Ok(())
}

/// Multi-world scenario metrics. See the module docs for shapes.
pub fn multiworld_metrics(
    scenario_id: &str,
    modes: &[Vec<Vec<[f64; 2]>>],
    pi: &[f64],
    gt: &[Vec<[f64; 2]>],
    thresholds: &MetricThresholds,
) -> Result<MultiworldScenario> {
    validate(scenario_id, modes, pi, gt)?;
    let a = gt.len();
    let t = gt[0].len();

    let avg_fde: Vec<f64> = modes
        .iter()
        .map(|mode| {
            mode.iter()
                .zip(gt)
                .map(|(traj, g)| dist(traj[t - 1], g[t - 1]))
                .sum::<f64>()
                / a as f64
        })
        .collect();
    let avg_ade: Vec<f64> = modes
        .iter()
        .map(|mode| {
            mode.iter()
                .zip(gt)
                .map(|(traj, g)| {
                    traj.iter().zip(g).map(|(p, q)| dist(*p, *q)).sum::<f64>() / t as f64
                })
                .sum::<f64>()
                / a as f64
        })
        .collect();

    let k_star = argmin(&avg_fde);
    let k_top = argmax(pi);
    let best = &modes[k_star];

    let missed = (0..a)
        .filter(|&i| dist(best[i][t - 1], gt[i][t - 1]) > thresholds.miss)
        .count();
    let colliding = (0..a)
        .filter(|&i| {
            (0..a).any(|j| {
                j != i && (0..t).any(|s| dist(best[i][s], best[j][s]) < thresholds.collision)
            })
        })
        .count();

    Ok(MultiworldScenario {
        num_actors: a,
        avg_min_fde: avg_fde[k_star],
        avg_min_fde_top: avg_fde[k_top],
        avg_min_ade: avg_ade[argmin(&avg_ade)],
        avg_min_ade_top: avg_ade[k_top],
        actor_missed: missed,
        avg_brier_min_fde: avg_fde[k_star] + (1.0 - pi[k_star]).powi(2),
        actor_colliding: colliding,
        best_world: k_star,
    })
}

/// Multi-world values for one scenario, with actor counts kept for pooling.
#[derive(Debug, Clone)]
pub struct MultiworldScenario {
    pub num_actors: usize,
    pub avg_min_fde: f64,
    pub avg_min_fde_top: f64,
    pub avg_min_ade: f64,
    pub avg_min_ade_top: f64,
    pub actor_missed: usize,
    pub avg_brier_min_fde: f64,
    pub actor_colliding: usize,
    pub best_world: usize,
}

/// Marginal values for one scenario: per-agent minima over modes, summed so
/// callers can pool across scenarios.
#[derive(Debug, Clone)]
pub struct MarginalScenario {
    pub num_actors: usize,
    pub min_fde_sum: f64,
    pub min_ade_sum: f64,
    pub missed: usize,
    pub b_min_fde_sum: f64,
}

/// Marginal per-agent metrics: each agent independently picks its best mode.
pub fn marginal_metrics(
    scenario_id: &str,
    modes: &[Vec<Vec<[f64; 2]>>],
    pi: &[f64],
    gt: &[Vec<[f64; 2]>],
    thresholds: &MetricThresholds,
) -> Result<MarginalScenario> {
    validate(scenario_id, modes, pi, gt)?;
    let a = gt.len();
    let t = gt[0].len();

    let mut out = MarginalScenario {
        num_actors: a,
        min_fde_sum: 0.0,
        min_ade_sum: 0.0,
        missed: 0,
        b_min_fde_sum: 0.0,
    };
    for i in 0..a {
        let fde: Vec<f64> = modes.iter().map(|m| dist(m[i][t - 1], gt[i][t - 1])).collect();
        let ade: Vec<f64> = modes
            .iter()
            .map(|m| m[i].iter().zip(&gt[i]).map(|(p, q)| dist(*p, *q)).sum::<f64>() / t as f64)
            .collect();
        let k_hat = argmin(&fde);
        out.min_fde_sum += fde[k_hat];
        out.min_ade_sum += ade[argmin(&ade)];
        if fde[k_hat] > thresholds.miss {
            out.missed += 1;
        }
        out.b_min_fde_sum += fde[k_hat] + (1.0 - pi[k_hat]).powi(2);
    }
    Ok(out)
}

/// Both metric families for one scenario, merged into a report row.
pub fn scenario_metrics(
    scenario_id: &str,
    modes: &[Vec<Vec<[f64; 2]>>],
    pi: &[f64],
    gt: &[Vec<[f64; 2]>],
    thresholds: &MetricThresholds,
) -> Result<ScenarioMetrics> {
    let mw = multiworld_metrics(scenario_id, modes, pi, gt, thresholds)?;
    let mg = marginal_metrics(scenario_id, modes, pi, gt, thresholds)?;
    let a = mw.num_actors as f64;
    Ok(ScenarioMetrics {
        scenario_id: scenario_id.to_string(),
        num_actors: mw.num_actors,
        avg_min_fde: mw.avg_min_fde,
        avg_min_fde_top: mw.avg_min_fde_top,
        avg_min_ade: mw.avg_min_ade,
        avg_min_ade_top: mw.avg_min_ade_top,
        actor_mr: mw.actor_missed as f64 / a,
        avg_brier_min_fde: mw.avg_brier_min_fde,
        actor_cr: mw.actor_colliding as f64 / a,
        min_fde: mg.min_fde_sum / a,
        min_ade: mg.min_ade_sum / a,
        mr: mg.missed as f64 / a,
        b_min_fde: mg.b_min_fde_sum / a,
    })
}

/// Dataset aggregate: scenario-mean for the scene-level family, actor-pooled
/// for miss/collision rates and the marginal family.
pub fn aggregate_metrics(rows: &[ScenarioMetrics]) -> Result<ScenarioMetrics> {
    if rows.is_empty() {
        return Err(Error::Validation("no scenarios to aggregate".into()));
    }
    let n = rows.len() as f64;
    let actors: usize = rows.iter().map(|r| r.num_actors).sum();
    let af = actors as f64;
    let scene_mean = |f: fn(&ScenarioMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let actor_pool = |f: fn(&ScenarioMetrics) -> f64| {
        rows.iter().map(|r| f(r) * r.num_actors as f64).sum::<f64>() / af
    };
    Ok(ScenarioMetrics {
        scenario_id: "aggregate".to_string(),
        num_actors: actors,
        avg_min_fde: scene_mean(|r| r.avg_min_fde),
        avg_min_fde_top: scene_mean(|r| r.avg_min_fde_top),
        avg_min_ade: scene_mean(|r| r.avg_min_ade),
        avg_min_ade_top: scene_mean(|r| r.avg_min_ade_top),
        actor_mr: actor_pool(|r| r.actor_mr),
        avg_brier_min_fde: scene_mean(|r| r.avg_brier_min_fde),
        actor_cr: actor_pool(|r| r.actor_cr),
        min_fde: actor_pool(|r| r.min_fde),
        min_ade: actor_pool(|r| r.min_ade),
        mr: actor_pool(|r| r.mr),
        b_min_fde: actor_pool(|r| r.b_min_fde),
    })
}

impl MetricReport {
    pub fn build(scenarios: Vec<ScenarioMetrics>) -> Result<Self> {
        let aggregate = aggregate_metrics(&scenarios)?;
        Ok(MetricReport { scenarios, aggregate })
    }

    /// CSV with one row per scenario plus the aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "scenario_id,avgMinFDE_K,avgMinFDE_1,avgMinADE_K,avgMinADE_1,\
             actorMR_K,avgBrierMinFDE_K,actorCR_K,minFDE_K,minADE_K,MR_K,b-minFDE_K\n",
        );
        for row in self.scenarios.iter().chain(std::iter::once(&self.aggregate)) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.scenario_id,
                row.avg_min_fde,
                row.avg_min_fde_top,
                row.avg_min_ade,
                row.avg_min_ade_top,
                row.actor_mr,
                row.avg_brier_min_fde,
                row.actor_cr,
                row.min_fde,
                row.min_ade,
                row.mr,
                row.b_min_fde,
            ));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn th() -> MetricThresholds {
        MetricThresholds::default()
    }

    type Modes = Vec<Vec<Vec<[f64; 2]>>>;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        k: usize,
        a: usize,
        t: usize,
        span: f64,
    ) -> (Modes, Vec<f64>, Vec<Vec<[f64; 2]>>) {
        let traj = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
            (0..t).map(|_| [rng.gen_range(-span..span), rng.gen_range(-span..span)]).collect()
        };
        let gt: Vec<Vec<[f64; 2]>> = (0..a).map(|_| traj(rng)).collect();
        let modes: Modes = (0..k).map(|_| (0..a).map(|_| traj(rng)).collect()).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|p| p / z).collect();
        (modes, pi, gt)
    }

    #[test]
    fn hand_computed_brier_example() {
        // One agent, one step: world 0 lands at (3,4), world 1 at (0,1),
        // ground truth (0,0). 3-4-5 triangle vs unit distance.
        let modes: Modes = vec![vec![vec![[3.0, 4.0]]], vec![vec![[0.0, 1.0]]]];
        let gt = vec![vec![[0.0, 0.0]]];
        let pi = vec![0.3, 0.7];
        let m = multiworld_metrics("s", &modes, &pi, &gt, &th()).unwrap();
        assert_eq!(m.best_world, 1);
        assert!((m.avg_min_fde - 1.0).abs() < 1e-12);
        assert!((m.avg_brier_min_fde - 1.09).abs() < 1e-12);
        assert_eq!(m.actor_missed, 0);
    }

    #[test]
    fn perfect_world_with_full_confidence_scores_zero() {
        let gt = vec![
            vec![[1.0, 1.0], [2.0, 2.0]],
            vec![[10.0, 0.0], [20.0, 0.0]],
        ];
        let bad: Vec<Vec<[f64; 2]>> = gt
            .iter()
            .map(|tr| tr.iter().map(|p| [p[0] + 50.0, p[1]]).collect())
            .collect();
        let modes: Modes = vec![gt.clone(), bad];
        let pi = vec![1.0, 0.0];
        let m = multiworld_metrics("s", &modes, &pi, &gt, &th()).unwrap();
        assert_eq!(m.avg_min_fde, 0.0);
        assert_eq!(m.avg_brier_min_fde, 0.0);
        assert_eq!(m.actor_missed, 0);
        assert_eq!(m.best_world, 0);
    }

    #[test]
    fn coincident_agents_both_collide() {
        // Two agents share a point at step 1 in the best world.
        let modes: Modes = vec![vec![
            vec![[0.0, 0.0], [5.0, 5.0]],
            vec![[100.0, 0.0], [5.0, 5.0]],
        ]];
        let gt = vec![
            vec![[0.0, 0.0], [5.0, 5.0]],
            vec![[100.0, 0.0], [5.0, 5.0]],
        ];
        let m = multiworld_metrics("s", &modes, &[1.0], &gt, &th()).unwrap();
        assert_eq!(m.actor_colliding, 2);
        let row = scenario_metrics("s", &modes, &[1.0], &gt, &th()).unwrap();
        assert_eq!(row.actor_cr, 1.0);
    }

    #[test]
    fn lone_agent_cannot_collide() {
        let modes: Modes = vec![vec![vec![[0.0, 0.0], [1.0, 0.0]]]];
        let gt = vec![vec![[0.0, 0.0], [1.0, 0.0]]];
        let m = multiworld_metrics("s", &modes, &[1.0], &gt, &th()).unwrap();
        assert_eq!(m.actor_colliding, 0);
    }

    #[test]
    fn unnormalized_probabilities_are_rejected() {
        let modes: Modes = vec![vec![vec![[0.0, 0.0]]]];
        let gt = vec![vec![[0.0, 0.0]]];
        assert!(matches!(
            multiworld_metrics("s", &modes, &[0.9], &gt, &th()),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            marginal_metrics("s", &modes, &[1.2], &gt, &th()),
            Err(Error::Validation(_))
        ));
        // Within tolerance passes.
        assert!(multiworld_metrics("s", &modes, &[1.00005], &gt, &th()).is_ok());
    }

    #[test]
    fn single_agent_scenarios_make_families_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (modes, pi, gt) = random_instance(&mut rng, 4, 1, 6, 30.0);
            let row = scenario_metrics("s", &modes, &pi, &gt, &th()).unwrap();
            assert_eq!(row.avg_min_fde.to_bits(), row.min_fde.to_bits());
            assert_eq!(row.avg_min_ade.to_bits(), row.min_ade.to_bits());
            assert_eq!(row.actor_mr.to_bits(), row.mr.to_bits());
            assert_eq!(row.avg_brier_min_fde.to_bits(), row.b_min_fde.to_bits());
        }
    }

    #[test]
    fn marginal_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.gen_range(1..=5);
            let a = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=7);
            let (modes, pi, gt) = random_instance(&mut rng, k, a, t, 20.0);
            let mg = marginal_metrics("s", &modes, &pi, &gt, &th()).unwrap();

            // Brute force, written independently over (agent, mode) pairs.
            let mut fde_sum = 0.0;
            let mut ade_sum = 0.0;
            let mut missed = 0usize;
            let mut brier_sum = 0.0;
            for i in 0..a {
                let mut best_fde = f64::INFINITY;
                let mut best_fde_k = 0usize;
                let mut best_ade = f64::INFINITY;
                for m in 0..k {
                    let p = modes[m][i][t - 1];
                    let q = gt[i][t - 1];
                    let f = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    if f < best_fde {
                        best_fde = f;
                        best_fde_k = m;
                    }
                    let mut s = 0.0;
                    for step in 0..t {
                        let p = modes[m][i][step];
                        let q = gt[i][step];
                        s += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    }
                    best_ade = best_ade.min(s / t as f64);
                }
                fde_sum += best_fde;
                ade_sum += best_ade;
                if best_fde > 2.0 {
                    missed += 1;
                }
                brier_sum += best_fde + (1.0 - pi[best_fde_k]).powi(2);
            }
            assert!((mg.min_fde_sum - fde_sum).abs() < 1e-10);
            assert!((mg.min_ade_sum - ade_sum).abs() < 1e-10);
            assert_eq!(mg.missed, missed);
            assert!((mg.b_min_fde_sum - brier_sum).abs() < 1e-10);
        }
    }

    #[test]
    fn metrics_are_invariant_under_joint_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (modes, pi, gt) = random_instance(&mut rng, 3, 3, 5, 40.0);
        let (cs, sn) = (1.1f64.cos(), 1.1f64.sin());
        let map = |p: [f64; 2]| -> [f64; 2] {
            [cs * p[0] - sn * p[1] + 200.0, sn * p[0] + cs * p[1] - 75.0]
        };
        let modes2: Modes = modes
            .iter()
            .map(|m| m.iter().map(|tr| tr.iter().map(|&p| map(p)).collect()).collect())
            .collect();
        let gt2: Vec<Vec<[f64; 2]>> =
            gt.iter().map(|tr| tr.iter().map(|&p| map(p)).collect()).collect();
        let a = scenario_metrics("s", &modes, &pi, &gt, &th()).unwrap();
        let b = scenario_metrics("s", &modes2, &pi, &gt2, &th()).unwrap();
        for (x, y) in [
            (a.avg_min_fde, b.avg_min_fde),
            (a.avg_min_ade, b.avg_min_ade),
            (a.avg_brier_min_fde, b.avg_brier_min_fde),
            (a.min_fde, b.min_fde),
            (a.min_ade, b.min_ade),
            (a.b_min_fde, b.b_min_fde),
            (a.actor_mr, b.actor_mr),
            (a.actor_cr, b.actor_cr),
            (a.mr, b.mr),
        ] {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn inflating_errors_never_shrinks_avg_min_fde() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (modes, pi, gt) = random_instance(&mut rng, 3, 2, 4, 15.0);
            let base = multiworld_metrics("s", &modes, &pi, &gt, &th()).unwrap();
            for scale in [1.5, 3.0, 10.0] {
                let inflated: Modes = modes
                    .iter()
                    .map(|m| {
                        m.iter()
                            .enumerate()
                            .map(|(i, tr)| {
                                tr.iter()
                                    .enumerate()
                                    .map(|(s, p)| {
                                        let g = gt[i][s];
                                        [g[0] + scale * (p[0] - g[0]), g[1] + scale * (p[1] - g[1])]
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                let up = multiworld_metrics("s", &inflated, &pi, &gt, &th()).unwrap();
                assert!(
                    up.avg_min_fde >= base.avg_min_fde - 1e-12,
                    "scale {scale}: {} < {}",
                    up.avg_min_fde,
                    base.avg_min_fde
                );
            }
        }
    }

    #[test]
    fn brier_term_is_the_exact_probability_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (modes, pi, gt) = random_instance(&mut rng, 4, 2, 3, 25.0);
            let m = multiworld_metrics("s", &modes, &pi, &gt, &th()).unwrap();
            let gap = m.avg_brier_min_fde - m.avg_min_fde;
            let expect = (1.0 - pi[m.best_world]).powi(2);
            assert!((gap - expect).abs() < 1e-12, "{gap} vs {expect}");
            assert!((-1e-12..=1.0 + 1e-12).contains(&gap));
        }
    }

    #[test]
    fn aggregate_pools_actors_and_averages_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m1, p1, g1) = random_instance(&mut rng, 3, 1, 4, 20.0);
        let (m2, p2, g2) = random_instance(&mut rng, 3, 3, 4, 20.0);
        let r1 = scenario_metrics("a", &m1, &p1, &g1, &th()).unwrap();
        let r2 = scenario_metrics("b", &m2, &p2, &g2, &th()).unwrap();
        let report = MetricReport::build(vec![r1.clone(), r2.clone()]).unwrap();
        let agg = &report.aggregate;
        assert_eq!(agg.num_actors, 4);
        assert!((agg.avg_min_fde - (r1.avg_min_fde + r2.avg_min_fde) / 2.0).abs() < 1e-12);
        let pooled = (r1.min_fde * 1.0 + r2.min_fde * 3.0) / 4.0;
        assert!((agg.min_fde - pooled).abs() < 1e-12);
    }

    #[test]
    fn csv_report_has_the_exact_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, p, g) = random_instance(&mut rng, 2, 2, 3, 10.0);
        let row = scenario_metrics("scn-7", &m, &p, &g, &th()).unwrap();
        let report = MetricReport::build(vec![row]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario_id,avgMinFDE_K,avgMinFDE_1,avgMinADE_K,avgMinADE_1,\
             actorMR_K,avgBrierMinFDE_K,actorCR_K,minFDE_K,minADE_K,MR_K,b-minFDE_K"
        );
        assert_eq!(lines.clone().count(), 2);
        assert!(lines.next().unwrap().starts_with("scn-7,"));
        assert!(lines.next().unwrap().starts_with("aggregate,"));
    }
}
