//! Whole-model wrapper: one struct owning the configuration and parameters,
//! with forward, loss, and prediction entry points per scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decoder::{decode, init_decoder, JointPrediction};
use crate::encoder::{encode_scene, init_encoder, SceneEncoding, SceneLayout};
use crate::objective::{total_loss, LossBreakdown};
use crate::prediction::PredictionEntry;
use crate::scene::Scene;
use crate::scoring::{init_scoring, score_scene, SceneScores};
use crate::store::{Bound, ParameterStore};
use crate::tape::Tape;
use crate::Result;

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParameterStore,
}

/// Row order that pools mode embeddings by ascending agent id within each
/// mode, making the scene scores independent of input agent order.
pub fn canonical_pool_rows(scene: &Scene, targets: &[usize], k: usize) -> Vec<usize> {
    let ap = targets.len();
    let mut by_id: Vec<usize> = (0..ap).collect();
    by_id.sort_by_key(|&i| scene.agents[targets[i]].id);
    (0..k)
        .flat_map(|m| by_id.iter().map(move |&i| m * ap + i))
        .collect()
}

/// One scene's forward pass. The tape stays alive so callers can attach a
/// loss and backpropagate.
pub struct SceneOutput {
    pub tape: Tape,
    pub bound: Bound,
    pub enc: SceneEncoding,
    pub pred: JointPrediction,
    pub scores: SceneScores,
}

impl Model {
    /// Fresh model: encoder, decoder, and scoring parameters seeded from one
    /// RNG stream.
    pub fn init(cfg: RunConfig, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::default();
        init_encoder(&mut store, &mut rng, &cfg)?;
        init_decoder(&mut store, &mut rng, &cfg)?;
        init_scoring(&mut store, &mut rng, &cfg)?;
        Ok(Model { cfg, store })
    }

    pub fn from_store(cfg: RunConfig, store: ParameterStore) -> Model {
        Model { cfg, store }
    }

    /// Wraps a loaded checkpoint, verifying that every parameter the
    /// configuration requires exists with the right shape.
    pub fn from_checkpoint(cfg: RunConfig, loaded: ParameterStore) -> Result<Model> {
        let reference = Model::init(cfg.clone(), 0)?;
        for (name, t) in reference.store.iter() {
            let lt = loaded.get(name).map_err(|_| {
                crate::Error::Config(format!(
                    "checkpoint is missing parameter {name:?} required by the configuration"
                ))
            })?;
            if lt.shape != t.shape {
                return Err(crate::Error::Config(format!(
                    "checkpoint parameter {name:?} has shape {:?} but the configuration expects {:?}",
                    lt.shape, t.shape
                )));
            }
        }
        Ok(Model { cfg, store: loaded })
    }

    /// Encoder, decoder, and scoring on one scene. `tape` controls dropout:
    /// pass `Tape::new()` for deterministic evaluation or `Tape::training`
    /// for training-mode dropout.
    pub fn forward_on(&self, mut tape: Tape, scene: &Scene) -> Result<SceneOutput> {
        let layout = SceneLayout::new(scene)?;
        let mut bound = Bound::new();
        let enc = encode_scene(&mut tape, &self.store, &mut bound, &self.cfg, scene, &layout)?;
        let mut pred = decode(&mut tape, &self.store, &mut bound, &self.cfg, scene, &layout, &enc)?;
        // Pool mode embeddings in agent-id order so the scores come out
        // bit-identical however the input file happens to order the agents.
        let ap = pred.num_targets();
        let rows = canonical_pool_rows(scene, &pred.targets, self.cfg.k);
        let pooled_order = tape.gather_rows(pred.mode_emb, rows);
        let scores = score_scene(
            &mut tape,
            &self.store,
            &mut bound,
            &self.cfg,
            pooled_order,
            self.cfg.k,
            ap,
        )?;
        pred.pi = scores.probabilities(&tape);
        Ok(SceneOutput { tape, bound, enc, pred, scores })
    }

    /// Deterministic evaluation pass (dropout off).
    pub fn forward(&self, scene: &Scene) -> Result<SceneOutput> {
        self.forward_on(Tape::new(), scene)
    }

    /// Forward plus composite loss; gradients are not yet propagated.
    pub fn scene_loss(&self, tape: Tape, scene: &Scene) -> Result<(SceneOutput, LossBreakdown)> {
        let layout = SceneLayout::new(scene)?;
        let mut out = self.forward_on(tape, scene)?;
        let breakdown = total_loss(&mut out.tape, &out.pred, &out.scores, scene, &layout)?;
        Ok((out, breakdown))
    }

    /// Prediction-file entry for one scene, deterministic.
    pub fn predict(&self, scene: &Scene) -> Result<PredictionEntry> {
        let out = self.forward(scene)?;
        Ok(PredictionEntry::from_decoder(&out.tape, &out.pred, scene, &out.pred.pi))
    }
}
