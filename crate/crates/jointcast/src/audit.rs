//! Invariance audit: runs the full pipeline on randomly transformed copies
//! of scenes and reports the worst deviation per symmetry family.
//!
//! Families checked per scene:
//! - rigid motion + time shift: encoder outputs and scores must not move;
//!   world trajectories must map by exactly the same rigid motion
//!   (equivariance), measured after mapping the base prediction forward;
//! - agent/polygon permutation: every output must be a bit-exact
//!   permutation of the base outputs.
//!
//! Deviations for the rigid family are relative: max |a - b| over
//! max(1, max |b|). Permutation deviations are absolute and expected to be
//! exactly zero, since every attention neighborhood is built in a canonical
//! (distance, id) or time order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, SceneOutput};
use crate::scene::Scene;
use crate::Result as CrateResult;

/// Worst observed deviation at 64-bit for the rigid/time family; fails the
/// audit when exceeded.
pub const RIGID_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub name: &'static str,
    pub max_dev: f64,
    pub tolerance: f64,
}

impl FamilyResult {
    pub fn passed(&self) -> bool {
        self.max_dev <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub scenes: usize,
    pub families: Vec<FamilyResult>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(FamilyResult::passed)
    }

    /// One human-readable line per family.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.families {
            out.push_str(&format!(
                "{}: max deviation {:.3e} (tolerance {:.1e}) ... {}\n",
                f.name,
                f.max_dev,
                f.tolerance,
                if f.passed() { "ok" } else { "EXCEEDED" }
            ));
        }
        out.push_str(&format!("scenes audited: {}\n", self.scenes));
        out
    }
}

fn rel_dev(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
        / scale
}

fn abs_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}

struct Snapshot {
    map: Vec<f64>,
    agents: Vec<f64>,
    proposal: Vec<f64>,
    refined: Vec<f64>,
    pi: Vec<f64>,
    /// Target agent ids in prediction row order.
    target_ids: Vec<u64>,
    t_prime: usize,
    k: usize,
}

fn snapshot(out: &SceneOutput, scene: &Scene) -> Snapshot {
    Snapshot {
        map: out.tape.value(out.enc.map).to_vec(),
        agents: out.tape.value(out.enc.agents).to_vec(),
        proposal: out.tape.value(out.pred.proposal_traj).to_vec(),
        refined: out.tape.value(out.pred.refined_traj).to_vec(),
        pi: out.pred.pi.clone(),
        target_ids: out
            .pred
            .targets
            .iter()
            .map(|&i| scene.agents[i].id)
            .collect(),
        t_prime: out.pred.t_prime,
        k: out.pred.k,
    }
}

/// Applies the audit's rigid motion to flattened `[.., 2*T']` world rows.
fn map_points(values: &[f64], angle: f64, translation: [f64; 2]) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    values
        .chunks(2)
        .flat_map(|p| {
            [
                c * p[0] - s * p[1] + translation[0],
                s * p[0] + c * p[1] + translation[1],
            ]
        })
        .collect()
}

/// Reorders `rows` (flattened `[K*A', W]`) so target rows follow `ids_to`
/// instead of `ids_from` within every mode block.
fn reorder_rows(
    rows: &[f64],
    width: usize,
    k: usize,
    ids_from: &[u64],
    ids_to: &[u64],
) -> CrateResult<Vec<f64>> {
    let ap = ids_from.len();
    let mut out = Vec::with_capacity(rows.len());
    for m in 0..k {
        for id in ids_to {
            let p = ids_from
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::Validation(format!("audit: target id {id} missing")))?;
            let start = (m * ap + p) * width;
            out.extend_from_slice(&rows[start..start + width]);
        }
    }
    Ok(out)
}

/// Runs the audit over `scenes`, drawing one rigid motion (angle uniform,
/// translation length <= 100 m, time shift <= 1000 s) and one agent/polygon
/// permutation per scene from `seed`.
pub fn check_invariance(model: &Model, scenes: &[Scene], seed: u64) -> Result<InvarianceReport> {
    if scenes.is_empty() {
        return Err(Error::Config("audit: no scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev_map = 0.0f64;
    let mut dev_agents = 0.0f64;
    let mut dev_traj = 0.0f64;
    let mut dev_pi = 0.0f64;
    let mut dev_perm = 0.0f64;

    for scene in scenes {
        let base_out = model.forward(scene)?;
        let base = snapshot(&base_out, scene);
        drop(base_out);

        // --- rigid motion + time shift ---
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let dir = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let r = rng.gen_range(0.0..100.0);
        let translation = [r * dir.cos(), r * dir.sin()];
        let tau = rng.gen_range(0.0..1000.0);
        let moved_scene = scene.rigid_transformed(angle, translation, tau);
        let moved_out = model.forward(&moved_scene)?;
        let moved = snapshot(&moved_out, &moved_scene);
        drop(moved_out);

        dev_map = dev_map.max(rel_dev(&moved.map, &base.map));
        dev_agents = dev_agents.max(rel_dev(&moved.agents, &base.agents));
        let expect_prop = map_points(&base.proposal, angle, translation);
        let expect_ref = map_points(&base.refined, angle, translation);
        dev_traj = dev_traj.max(rel_dev(&moved.proposal, &expect_prop));
        dev_traj = dev_traj.max(rel_dev(&moved.refined, &expect_ref));
        dev_pi = dev_pi.max(abs_dev(&moved.pi, &base.pi));

        // --- agent/polygon permutation ---
        let mut agent_perm: Vec<usize> = (0..scene.agents.len()).collect();
        agent_perm.shuffle(&mut rng);
        let mut poly_perm: Vec<usize> = (0..scene.polygons.len()).collect();
        poly_perm.shuffle(&mut rng);
        let permuted_scene = scene.permuted(&agent_perm, &poly_perm);
        let perm_out = model.forward(&permuted_scene)?;
        let perm = snapshot(&perm_out, &permuted_scene);
        drop(perm_out);

        let d = model.cfg.d;
        let t = scene.history_len();
        for (new, &old) in poly_perm.iter().enumerate() {
            dev_perm = dev_perm.max(abs_dev(
                &perm.map[new * d..(new + 1) * d],
                &base.map[old * d..(old + 1) * d],
            ));
        }
        for (new, &old) in agent_perm.iter().enumerate() {
            dev_perm = dev_perm.max(abs_dev(
                &perm.agents[new * t * d..(new + 1) * t * d],
                &base.agents[old * t * d..(old + 1) * t * d],
            ));
        }
        let width = 2 * base.t_prime;
        for (ours, theirs) in [(&base.proposal, &perm.proposal), (&base.refined, &perm.refined)] {
            let aligned = reorder_rows(ours, width, base.k, &base.target_ids, &perm.target_ids)?;
            dev_perm = dev_perm.max(abs_dev(theirs, &aligned));
        }
        dev_perm = dev_perm.max(abs_dev(&perm.pi, &base.pi));
    }

    Ok(InvarianceReport {
        scenes: scenes.len(),
        families: vec![
            FamilyResult {
                name: "map encoding invariance (rigid+time)",
                max_dev: dev_map,
                tolerance: RIGID_TOLERANCE,
            },
            FamilyResult {
                name: "agent encoding invariance (rigid+time)",
                max_dev: dev_agents,
                tolerance: RIGID_TOLERANCE,
            },
            FamilyResult {
                name: "trajectory equivariance (rigid+time)",
                max_dev: dev_traj,
                tolerance: RIGID_TOLERANCE,
            },
            FamilyResult {
                name: "score invariance (rigid+time)",
                max_dev: dev_pi,
                tolerance: RIGID_TOLERANCE,
            },
            FamilyResult {
                name: "agent/polygon permutation equivariance",
                max_dev: dev_perm,
                tolerance: 0.0,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::generator::{generate_synthetic_scene, GeneratorConfig};

    fn audit_cfg() -> RunConfig {
        RunConfig {
            d: 16,
            h: 2,
            k: 3,
            l_enc: 1,
            l_dec: 1,
            recurrent_steps: 2,
            chunk_steps: 2,
            t: 6,
            t_prime: 4,
            dropout: 0.0,
            ..RunConfig::default()
        }
        .validated()
        .unwrap()
    }

    fn scenes(n: usize, cfg: &RunConfig) -> Vec<Scene> {
        (0..n)
            .map(|i| generate_synthetic_scene(500 + i as u64, &cfg.generator).unwrap())
            .collect()
    }

    #[test]
    fn identity_transform_has_zero_deviation() {
        let cfg = audit_cfg();
        let model = Model::init(cfg.clone(), 31).unwrap();
        let scene = &scenes(1, &cfg)[0];
        let a = model.forward(scene).unwrap();
        let b = model.forward(&scene.rigid_transformed(0.0, [0.0, 0.0], 0.0)).unwrap();
        assert_eq!(a.tape.value(a.enc.map), b.tape.value(b.enc.map));
        assert_eq!(
            a.tape.value(a.pred.refined_traj),
            b.tape.value(b.pred.refined_traj)
        );
        assert_eq!(a.pred.pi, b.pred.pi);
    }

    #[test]
    fn random_transforms_stay_inside_tolerance() {
        let cfg = audit_cfg();
        let model = Model::init(cfg.clone(), 32).unwrap();
        let scenes = scenes(5, &cfg);
        let report = check_invariance(&model, &scenes, 99).unwrap();
        assert!(report.passed(), "audit failed:\n{}", report.render());
        let perm = report
            .families
            .iter()
            .find(|f| f.name.contains("permutation"))
            .unwrap();
        assert_eq!(perm.max_dev, 0.0, "permutation must be bit-exact");
    }

    #[test]
    fn render_lists_every_family_with_verdict() {
        let cfg = audit_cfg();
        let model = Model::init(cfg.clone(), 33).unwrap();
        let scenes = scenes(1, &cfg);
        let report = check_invariance(&model, &scenes, 1).unwrap();
        let text = report.render();
        assert_eq!(text.matches("ok").count() + text.matches("EXCEEDED").count(), 5);
        assert!(text.contains("scenes audited: 1"));
    }

    #[test]
    fn a_noninvariant_model_is_caught() {
        // Breaking invariance by hand: feed the audit a model whose scores
        // depend on absolute position through a doctored scene comparison is
        // impossible from outside, so instead check the report arithmetic.
        let fam = FamilyResult {
            name: "x",
            max_dev: 1e-3,
            tolerance: RIGID_TOLERANCE,
        };
        assert!(!fam.passed());
        let report = InvarianceReport {
            scenes: 1,
            families: vec![fam],
        };
        assert!(!report.passed());
        assert!(report.render().contains("EXCEEDED"));
    }
}
