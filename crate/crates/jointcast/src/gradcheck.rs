//! Central-difference gradient verification, including a whole-pipeline
//! check of the training loss against numeric derivatives.

use crate::decoder::{build_decoder_pairs, decode_pinned, gt_agent_frame, propose, PinnedAnchors};
use crate::encoder::{encode_scene, SceneLayout};
use crate::error::{Error, Result};
use crate::model::{canonical_pool_rows, Model};
use crate::objective::{mixture_nll, wta_regression};
use crate::scene::Scene;
use crate::scoring::score_scene;
use crate::store::{Bound, ParameterStore};
use crate::tape::Tape;

/// Relative error between an analytic derivative and its central-difference
/// estimate, normalized by `max(1, |estimate|)` so tiny derivatives do not
/// blow the ratio up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks `analytic` against central differences of `f` around `x0` at the
/// coordinates in `coords` (all coordinates if empty). Returns the maximum
/// relative error. `eps` must lie in `[1e-7, 1e-4]`; non-finite function
/// values or derivatives are numeric errors.
pub fn finite_diff_check<F>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!(
            "finite difference step {eps:e} outside [1e-7, 1e-4]"
        )));
    }
    if x0.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "gradient length {} does not match input length {}",
            analytic.len(),
            x0.len()
        )));
    }
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..x0.len()).collect();
        &all
    } else {
        coords
    };
    let mut max_err = 0.0f64;
    let mut x = x0.to_vec();
    for &i in coords {
        if i >= x0.len() {
            return Err(Error::Dimension(format!(
                "coordinate {i} out of bounds for input of length {}",
                x0.len()
            )));
        }
        x[i] = x0[i] + eps;
        let fp = f(&x)?;
        x[i] = x0[i] - eps;
        let fm = f(&x)?;
        x[i] = x0[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        if !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite analytic derivative at coordinate {i}"
            )));
        }
        max_err = max_err.max(relative_error(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Parameters probed by default: one per family (encoder features, mode
/// seeds, proposal head, refinement init and head, scoring query and head).
pub const DEFAULT_GRADCHECK_PARAMS: [&str; 7] = [
    "enc.agentfeat.0.w",
    "dec.seed",
    "dec.traj.0.w",
    "ref.offset.1.w",
    "ref.init.0.w",
    "score.query",
    "score.head.0.w",
];

/// Max relative error per probed parameter of the full training loss
/// against central differences.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_err(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_err() < self.tolerance
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.entries {
            out.push_str(&format!(
                "{name}: rel err {err:.3e} ... {}\n",
                if *err < self.tolerance { "ok" } else { "EXCEEDED" }
            ));
        }
        out.push_str(&format!(
            "max {:.3e} (tolerance {:.1e})\n",
            self.max_err(),
            self.tolerance
        ));
        out
    }
}

/// Checks the full pipeline's analytic gradients on one scene.
///
/// Finite differences cannot see through stop-gradients: the refinement
/// anchors and the mixture's locations/scales are detached in the live loss,
/// so the numeric side holds them pinned at their base-point values (which
/// reproduces the live loss bitwise at the base point and defines the same
/// gradient). Up to `samples` coordinates per parameter are probed.
pub fn end_to_end(
    model: &Model,
    scene: &Scene,
    params: &[&str],
    eps: f64,
    samples: usize,
    tolerance: f64,
) -> Result<GradcheckReport> {
    if model.cfg.dropout != 0.0 {
        return Err(Error::Config(
            "gradcheck requires dropout = 0 (stochastic losses have no pointwise derivative)"
                .into(),
        ));
    }
    let cfg = model.cfg.clone();
    let layout = SceneLayout::new(scene)?;

    // Live analytic pass.
    let (mut out, lb) = model.scene_loss(Tape::new(), scene)?;
    out.tape.backward(lb.node);
    let mut store = model.store.clone();
    store.harvest_grads(&out.tape, &out.bound)?;
    let a_prime = out.pred.num_targets();
    let refined0 = out.tape.value(out.pred.refined_agent).to_vec();
    let scales0 = out.tape.value(out.pred.scales).to_vec();
    let winner0 = lb.winner_index;

    // Anchor values the numeric side must hold fixed.
    let pinned = {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let enc = encode_scene(&mut tape, &store, &mut bound, &cfg, scene, &layout)?;
        let pairs = build_decoder_pairs(&cfg, scene, &layout);
        let prop = propose(&mut tape, &store, &mut bound, &cfg, &layout, &enc, &pairs)?;
        PinnedAnchors::capture(&tape, &prop)
    };

    let eval = |st: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let enc = encode_scene(&mut tape, st, &mut bound, &cfg, scene, &layout)?;
        let pred = decode_pinned(&mut tape, st, &mut bound, &cfg, scene, &layout, &enc, Some(&pinned))?;
        let rows = canonical_pool_rows(scene, &pred.targets, cfg.k);
        let pooled_order = tape.gather_rows(pred.mode_emb, rows);
        let scores = score_scene(&mut tape, st, &mut bound, &cfg, pooled_order, cfg.k, a_prime)?;
        let gt_rows = gt_agent_frame(scene, &layout)?;
        let gt = tape.constant(a_prime, 2 * cfg.t_prime, gt_rows);
        let lp = wta_regression(
            &mut tape, pred.proposal_agent, pred.proposal_scales, gt, winner0, a_prime,
        )?;
        let lr = wta_regression(&mut tape, pred.refined_agent, pred.scales, gt, winner0, a_prime)?;
        let mu0 = tape.constant(cfg.k * a_prime, 2 * cfg.t_prime, refined0.clone());
        let b0 = tape.constant(cfg.k * a_prime, 2 * cfg.t_prime, scales0.clone());
        let lc = mixture_nll(&mut tape, mu0, b0, scores.log_pi, gt, cfg.k, a_prime)?;
        let partial = tape.add(lp, lr);
        let total = tape.add(partial, lc);
        Ok(tape.value(total)[0])
    };

    // Pinning must reproduce the live loss exactly at the base point.
    let base_val = eval(&store)?;
    if base_val.to_bits() != lb.total.to_bits() {
        return Err(Error::Numeric(format!(
            "pinned evaluation ({base_val}) diverged from the live loss ({}) at the base point",
            lb.total
        )));
    }

    let mut entries = Vec::with_capacity(params.len());
    for &name in params {
        let tensor = store.get(name)?;
        let x0 = tensor.data.clone();
        let analytic = tensor.grad.clone().unwrap_or_else(|| vec![0.0; x0.len()]);
        let stride = (x0.len() / samples.max(1)).max(1);
        let coords: Vec<usize> = (0..x0.len()).step_by(stride).collect();
        let base = store.clone();
        let f = |x: &[f64]| -> Result<f64> {
            let mut st = base.clone();
            st.get_mut(name)?.data = x.to_vec();
            eval(&st)
        };
        let err = finite_diff_check(f, &x0, &analytic, eps, &coords)?;
        entries.push((name.to_string(), err));
    }
    Ok(GradcheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        // f(x) = sum x_i^2, grad = 2x
        let x0 = vec![1.0, -2.0, 0.5];
        let grad = vec![2.0, -4.0, 1.0];
        let err = finite_diff_check(
            |x| Ok(x.iter().map(|v| v * v).sum()),
            &x0,
            &grad,
            1e-5,
            &[],
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x0 = vec![1.0, 2.0];
        let grad = vec![2.0, 3.9]; // second entry should be 4.0
        let err = finite_diff_check(
            |x| Ok(x.iter().map(|v| v * v).sum()),
            &x0,
            &grad,
            1e-5,
            &[],
        )
        .unwrap();
        assert!(err > 1e-2, "error {err} too small for a wrong gradient");
    }

    #[test]
    fn eps_outside_range_rejected() {
        let r = finite_diff_check(|_| Ok(0.0), &[0.0], &[0.0], 1e-3, &[]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = finite_diff_check(|_| Ok(0.0), &[0.0], &[0.0], 1e-8, &[]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        // ln at -eps is NaN
        let r = finite_diff_check(|x| Ok(x[0].ln()), &[0.0], &[0.0], 1e-5, &[]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn sampled_coordinates_only_probe_requested_entries() {
        let x0 = vec![1.0, 2.0, 3.0, 4.0];
        let mut grad = vec![2.0, 4.0, 6.0, 8.0];
        grad[3] = 999.0; // wrong, but never probed
        let err = finite_diff_check(
            |x| Ok(x.iter().map(|v| v * v).sum()),
            &x0,
            &grad,
            1e-5,
            &[0, 1, 2],
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn pipeline_gradcheck_on_a_two_agent_scene() {
        let cfg = crate::config::RunConfig {
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
            generator: crate::generator::GeneratorConfig {
                lanes: 2,
                agents: 2,
                static_agents: 0,
                crosswalks: 0,
                ..crate::generator::GeneratorConfig::default()
            },
            ..crate::config::RunConfig::default()
        }
        .validated()
        .unwrap();
        let model = Model::init(cfg.clone(), 77).unwrap();
        let scene = crate::generator::generate_synthetic_scene(6, &cfg.generator).unwrap();
        let report = end_to_end(
            &model,
            &scene,
            &DEFAULT_GRADCHECK_PARAMS,
            1e-5,
            6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.entries.len(), 7);
    }

    #[test]
    fn pipeline_gradcheck_refuses_dropout() {
        let cfg = crate::config::RunConfig {
            d: 16,
            h: 2,
            k: 2,
            l_enc: 1,
            l_dec: 1,
            recurrent_steps: 2,
            chunk_steps: 2,
            t: 6,
            t_prime: 4,
            dropout: 0.1,
            ..crate::config::RunConfig::default()
        }
        .validated()
        .unwrap();
        let model = Model::init(cfg.clone(), 78).unwrap();
        let scene = crate::generator::generate_synthetic_scene(7, &cfg.generator).unwrap();
        let err = end_to_end(&model, &scene, &["dec.seed"], 1e-5, 2, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
