//! Training objective: Laplace mixture likelihood, scene-level
//! winner-take-all selection, and the composite loss.
//!
//! The regression terms pick one winner mode per scene — the joint proposal
//! with the smallest total displacement error against ground truth — and
//! minimize the Laplace negative log-likelihood of that mode's proposal and
//! refinement. The classification term scores the whole mixture but only
//! trains the mixing coefficients: component locations and scales enter as
//! constants.

use crate::decoder::{gt_agent_frame, JointPrediction};
use crate::encoder::SceneLayout;
use crate::error::Error;
use crate::scene::Scene;
use crate::scoring::SceneScores;
use crate::tape::{NodeId, Tape};
use crate::Result;

/// Per-scene loss values, plus the tape node that backpropagates the total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_propose: f64,
    pub l_refine: f64,
    pub l_cls: f64,
    pub total: f64,
    pub winner_index: usize,
    /// Total-loss node; call `tape.backward` on it.
    pub node: NodeId,
}

/// Laplace negative log-likelihood summed over every coordinate:
/// `Σ log(2b) + |x − mu| / b`. All three nodes must have identical shape.
pub fn laplace_nll(tape: &mut Tape, x: NodeId, mu: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.dims(x) != tape.dims(mu) || tape.dims(x) != tape.dims(b) {
        return Err(Error::Dimension(format!(
            "laplace_nll: mismatched shapes {:?}, {:?}, {:?}",
            tape.dims(x),
            tape.dims(mu),
            tape.dims(b)
        )));
    }
    if tape.value(b).iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(
            "laplace_nll: scale must be strictly positive".into(),
        ));
    }
    let diff = tape.sub(x, mu);
    let adiff = tape.abs(diff);
    let binv = tape.recip(b);
    let z = tape.mul(adiff, binv);
    let twob = tape.scale(b, 2.0);
    let logb = tape.ln(twob);
    let per_coord = tape.add(logb, z);
    Ok(tape.sum_all(per_coord))
}

/// Value-domain twin of [`laplace_nll`] for oracles and reporting.
pub fn laplace_nll_value(x: &[f64], mu: &[f64], b: &[f64]) -> Result<f64> {
    if x.len() != mu.len() || x.len() != b.len() {
        return Err(Error::Dimension(format!(
            "laplace_nll: {} observations vs {} locations vs {} scales",
            x.len(),
            mu.len(),
            b.len()
        )));
    }
    if b.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(
            "laplace_nll: scale must be strictly positive".into(),
        ));
    }
    Ok(x.iter()
        .zip(mu)
        .zip(b)
        .map(|((x, mu), b)| (2.0 * b).ln() + (x - mu).abs() / b)
        .sum())
}

/// Index of the joint proposal with the smallest total displacement error
/// `Σ_{agents, steps} ‖proposal − gt‖₂`; ties go to the smallest index.
/// Shapes are `[K][A'][T'][2]` and `[A'][T'][2]`.
pub fn select_winner(proposal: &[Vec<Vec<[f64; 2]>>], gt: &[Vec<[f64; 2]>]) -> usize {
    let mut best = 0usize;
    let mut best_err = f64::INFINITY;
    for (k, mode) in proposal.iter().enumerate() {
        let mut err = 0.0;
        for (traj, gt_traj) in mode.iter().zip(gt) {
            for (p, q) in traj.iter().zip(gt_traj) {
                err += (p[0] - q[0]).hypot(p[1] - q[1]);
            }
        }
        if err < best_err {
            best_err = err;
            best = k;
        }
    }
    best
}

/// Laplace NLL of the ground truth under one winner mode. `traj` and
/// `scales` are `[K*A', 2T']` mode-major; `gt` is `[A', 2T']`. Gradients
/// reach only the winner's rows.
pub fn wta_regression(
    tape: &mut Tape,
    traj: NodeId,
    scales: NodeId,
    gt: NodeId,
    winner: usize,
    a_prime: usize,
) -> Result<NodeId> {
    let rows: Vec<usize> = (0..a_prime).map(|i| winner * a_prime + i).collect();
    let mu = tape.gather_rows(traj, rows.clone());
    let b = tape.gather_rows(scales, rows);
    laplace_nll(tape, gt, mu, b)
}

/// Mixture negative log-likelihood
/// `−log Σ_k pi_k · exp(log f(gt | mu_k, b_k))`, evaluated in log space.
/// Locations and scales are detached: the gradient trains the mixing
/// coefficients only.
pub fn mixture_nll(
    tape: &mut Tape,
    refined: NodeId,
    scales: NodeId,
    log_pi: NodeId,
    gt: NodeId,
    k: usize,
    a_prime: usize,
) -> Result<NodeId> {
    let mu_all = tape.detach(refined);
    let b_all = tape.detach(scales);
    let mut comps: Option<NodeId> = None;
    for m in 0..k {
        let rows: Vec<usize> = (0..a_prime).map(|i| m * a_prime + i).collect();
        let mu = tape.gather_rows(mu_all, rows.clone());
        let b = tape.gather_rows(b_all, rows);
        let nll = laplace_nll(tape, gt, mu, b)?;
        let ll = tape.neg(nll);
        comps = Some(match comps {
            None => ll,
            Some(prev) => tape.concat_rows(prev, ll),
        });
    }
    let ll = comps.expect("mixture_nll: K >= 1");
    let joint = tape.add(log_pi, ll);
    let lse = tape.logsumexp(joint);
    if !tape.value(lse)[0].is_finite() {
        return Err(Error::Numeric(
            "mixture_nll: every component assigns zero density to the ground truth".into(),
        ));
    }
    Ok(tape.neg(lse))
}

/// Composite loss: winner-take-all proposal and refinement regression plus
/// the mixture classification term, summed with unit weights.
pub fn total_loss(
    tape: &mut Tape,
    pred: &JointPrediction,
    scores: &SceneScores,
    scene: &Scene,
    layout: &SceneLayout,
) -> Result<LossBreakdown> {
    let a_prime = pred.num_targets();
    if a_prime == 0 {
        return Err(Error::Validation(format!(
            "scene {}: no target agents to score",
            scene.scenario_id
        )));
    }
    let gt_rows = gt_agent_frame(scene, layout)?;
    let gt = tape.constant(a_prime, 2 * pred.t_prime, gt_rows);

    let proposal_world = pred.world_trajectories(tape, pred.proposal_traj);
    let mut gt_world = Vec::with_capacity(a_prime);
    for &i in &layout.targets {
        let fut = scene.agents[i].future_gt.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "scene {}: target agent {} lacks ground truth",
                scene.scenario_id, scene.agents[i].id
            ))
        })?;
        gt_world.push(fut.clone());
    }
    let winner = select_winner(&proposal_world, &gt_world);

    let lp = wta_regression(tape, pred.proposal_agent, pred.proposal_scales, gt, winner, a_prime)?;
    let lr = wta_regression(tape, pred.refined_agent, pred.scales, gt, winner, a_prime)?;
    let lc = mixture_nll(tape, pred.refined_agent, pred.scales, scores.log_pi, gt, pred.k, a_prime)?;
    let partial = tape.add(lp, lr);
    let node = tape.add(partial, lc);
    Ok(LossBreakdown {
        l_propose: tape.value(lp)[0],
        l_refine: tape.value(lr)[0],
        l_cls: tape.value(lc)[0],
        total: tape.value(node)[0],
        winner_index: winner,
        node,
    })
}
