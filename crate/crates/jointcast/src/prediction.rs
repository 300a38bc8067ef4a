//! Prediction files: one JSON line per scenario with K joint worlds over the
//! target agents, plus a constant-velocity baseline producer.
//!
//! Schema: `{scenario_id, pi: [K], agents: [{id, modes: [[ [x,y] × T' ] × K]}]}`.
//! Floats serialize as shortest-round-trip decimals, so write-then-read is
//! bit exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::JointPrediction;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModes {
    pub id: u64,
    /// `[K][T']` predicted positions for this agent, world frame.
    pub modes: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub scenario_id: String,
    pub pi: Vec<f64>,
    pub agents: Vec<AgentModes>,
}

impl PredictionEntry {
    /// Checks internal consistency: every agent carries K modes of one
    /// shared horizon.
    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || self.agents.is_empty() {
            return Err(Error::Validation(format!(
                "prediction {}: needs at least one mode and one agent",
                self.scenario_id
            )));
        }
        let t = self.agents[0].modes.first().map(|m| m.len()).unwrap_or(0);
        for agent in &self.agents {
            if agent.modes.len() != k {
                return Err(Error::Validation(format!(
                    "prediction {}: agent {} has {} modes, expected {k}",
                    self.scenario_id,
                    agent.id,
                    agent.modes.len()
                )));
            }
            if agent.modes.iter().any(|m| m.len() != t || m.is_empty()) {
                return Err(Error::Validation(format!(
                    "prediction {}: agent {} has ragged or empty trajectories",
                    self.scenario_id, agent.id
                )));
            }
        }
        Ok(())
    }

    /// Reshapes to world-major `[K][A'][T']` for metrics and ensembling.
    pub fn worlds(&self) -> Vec<Vec<Vec<[f64; 2]>>> {
        let k = self.pi.len();
        (0..k)
            .map(|m| self.agents.iter().map(|a| a.modes[m].clone()).collect())
            .collect()
    }

    /// Builds an entry from decoder output: refined world trajectories,
    /// agent ids resolved through the scene.
    pub fn from_decoder(
        tape: &Tape,
        pred: &JointPrediction,
        scene: &Scene,
        pi: &[f64],
    ) -> PredictionEntry {
        let worlds = pred.world_trajectories(tape, pred.refined_traj);
        let agents = pred
            .targets
            .iter()
            .enumerate()
            .map(|(i, &agent_idx)| AgentModes {
                id: scene.agents[agent_idx].id,
                modes: (0..pred.k).map(|m| worlds[m][i].clone()).collect(),
            })
            .collect();
        PredictionEntry {
            scenario_id: scene.scenario_id.clone(),
            pi: pi.to_vec(),
            agents,
        }
    }
}

pub fn write_predictions(entries: &[PredictionEntry], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for entry in entries {
        serde_json::to_writer(&mut w, entry)
            .map_err(|e| Error::Validation(format!("cannot serialize prediction: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PredictionEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        entry.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Constant-velocity baseline: every target agent continues its last
/// observed per-step displacement for the whole horizon, identically in all
/// K worlds, with uniform scores.
pub fn constant_velocity_prediction(scene: &Scene, k: usize) -> Result<PredictionEntry> {
    if k == 0 {
        return Err(Error::Config("baseline needs K >= 1".into()));
    }
    let mut agents = Vec::new();
    for track in scene.agents.iter().filter(|a| a.is_target) {
        let last = track
            .valid
            .iter()
            .rposition(|&v| v)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "scene {}: target agent {} has no valid state",
                    scene.scenario_id, track.id
                ))
            })?;
        let prev = track.valid[..last].iter().rposition(|&v| v);
        let delta = match prev {
            Some(p) => {
                let steps = (last - p) as f64;
                [
                    (track.positions[last][0] - track.positions[p][0]) / steps,
                    (track.positions[last][1] - track.positions[p][1]) / steps,
                ]
            }
            None => [0.0, 0.0],
        };
        let origin = track.positions[last];
        let traj: Vec<[f64; 2]> = (1..=scene.horizon)
            .map(|s| [origin[0] + delta[0] * s as f64, origin[1] + delta[1] * s as f64])
            .collect();
        agents.push(AgentModes {
            id: track.id,
            modes: vec![traj; k],
        });
    }
    if agents.is_empty() {
        return Err(Error::Validation(format!(
            "scene {}: no target agents",
            scene.scenario_id
        )));
    }
    Ok(PredictionEntry {
        scenario_id: scene.scenario_id.clone(),
        pi: vec![1.0 / k as f64; k],
        agents,
    })
}
