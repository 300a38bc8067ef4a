//! Scene-level confidence scoring.
//!
//! A single learned query vector attends over each joint mode's target-agent
//! embeddings (attentive pooling), and a small head MLP maps each pooled
//! embedding to one logit per mode. A softmax across modes yields the mixing
//! probabilities written into predictions.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Error;
use crate::nn::{init_linear, init_mlp, linear, mlp};
use crate::store::{Bound, ParameterStore};
use crate::tape::{NodeId, Segments, Tape};
use crate::Result;

/// Scoring outputs, all `[K, 1]` nodes on the tape. `pi = exp(log_pi)` is the
/// softmax of the logits; `log_pi` is kept separately so losses can avoid a
/// redundant `ln(exp(..))` round trip.
pub struct SceneScores {
    pub logits: NodeId,
    pub log_pi: NodeId,
    pub pi: NodeId,
}

impl SceneScores {
    /// Mixing probabilities as a plain vector.
    pub fn probabilities(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.pi).to_vec()
    }
}

/// Registers the pooling query, key/value projections, and the logit head.
pub fn init_scoring(store: &mut ParameterStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Result<()> {
    let d = cfg.d;
    store.register_table("score.query", 1, d, rng)?;
    init_linear(store, rng, "score.k", d, d)?;
    init_linear(store, rng, "score.v", d, d)?;
    init_mlp(store, rng, "score.head", &[d, d, 1])
}

/// Pools `[K*A', D]` mode embeddings (mode-major rows) down to `[K, D]`: one
/// learned query scores every agent embedding, weights are softmaxed within
/// each mode, and the output is the weight-averaged value projection. With a
/// single agent the weight is exactly 1 and the output is exactly that
/// agent's value projection.
pub fn attentive_pool(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    mode_emb: NodeId,
    k: usize,
    a_prime: usize,
) -> Result<NodeId> {
    let (rows, _) = tape.dims(mode_emb);
    if a_prime == 0 || rows != k * a_prime {
        return Err(Error::Dimension(format!(
            "attentive_pool: {rows} embedding rows do not tile K={k} modes of A'={a_prime} agents"
        )));
    }
    let n = k * a_prime;
    let keys = linear(tape, store, bound, "score.k", mode_emb)?;
    let values = linear(tape, store, bound, "score.v", mode_emb)?;
    let query = bound.param(tape, store, "score.query")?;
    let q_rows = tape.gather_rows(query, vec![0; n]);
    let logits = tape.head_dot(q_rows, keys, 1);
    let segs: Segments = (0..k).map(|m| (m * a_prime, a_prime)).collect();
    let alpha = tape.segment_softmax(logits, segs.clone());
    Ok(tape.segment_weighted_sum(alpha, values, segs, 1))
}

/// Softmax across modes: `log_pi = logits - logsumexp(logits)`,
/// `pi = exp(log_pi)`.
pub fn softmax_scores(tape: &mut Tape, logits: NodeId) -> SceneScores {
    let lse = tape.logsumexp(logits);
    let neg = tape.neg(lse);
    let log_pi = tape.add_broadcast_all(logits, neg);
    let pi = tape.exp(log_pi);
    SceneScores { logits, log_pi, pi }
}

/// Full scoring head: attentive pooling, logit MLP, softmax over modes.
pub fn score_scene(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    cfg: &RunConfig,
    mode_emb: NodeId,
    k: usize,
    a_prime: usize,
) -> Result<SceneScores> {
    let pooled = attentive_pool(tape, store, bound, mode_emb, k, a_prime)?;
    let logits = mlp(tape, store, bound, "score.head", 2, pooled, cfg.dropout)?;
    Ok(softmax_scores(tape, logits))
}
