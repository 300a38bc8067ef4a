//! Deterministic synthetic driving scenes: lanes, lane-following agents,
//! lead-follow pairs, and static bystanders.
//!
//! Kinematics are closed-form. An agent anchored at arc-length `s0` on its
//! lane sits at arc-length `s0 + v·τ + a·τ²/2` at elapsed time
//! `τ = (step+1)·Δt`, so ground-truth futures are exact continuations of the
//! history. Followers on the same lane are never faster than their leader,
//! which keeps the initial gap a lower bound for all time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    AgentCategory, AgentTrack, MapPolygon, PolygonKind, Scene, DEFAULT_HORIZON, TIME_STEP,
};

pub const SLOTS_PER_LANE: usize = 3;
const SLOT_GAP_MIN: f64 = 8.0;
const SLOT_GAP_MAX: f64 = 15.0;
const LANE_SAMPLE_SPACING: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub lanes: usize,
    pub agents: usize,
    pub static_agents: usize,
    pub crosswalks: usize,
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub accel_max: f64,
    pub follow_slowdown_max: f64,
    pub invalid_prefix_prob: f64,
    pub arc_lane_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            lanes: 4,
            agents: 6,
            static_agents: 1,
            crosswalks: 1,
            history_steps: 50,
            horizon_steps: DEFAULT_HORIZON,
            speed_min: 5.0,
            speed_max: 12.0,
            accel_max: 0.2,
            follow_slowdown_max: 0.4,
            invalid_prefix_prob: 0.2,
            arc_lane_prob: 0.4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.lanes) {
            return Err(Error::Config(format!(
                "generator: lanes must be in 2..=8, got {}",
                self.lanes
            )));
        }
        if !(1..=10).contains(&self.agents) {
            return Err(Error::Config(format!(
                "generator: agents must be in 1..=10, got {}",
                self.agents
            )));
        }
        if self.agents > self.lanes * SLOTS_PER_LANE {
            return Err(Error::Config(format!(
                "generator: {} agents exceed capacity of {} lanes x {} slots",
                self.agents, self.lanes, SLOTS_PER_LANE
            )));
        }
        if self.history_steps < 2 || self.horizon_steps < 1 {
            return Err(Error::Config(
                "generator: need history_steps >= 2 and horizon_steps >= 1".into(),
            ));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::Config(format!(
                "generator: bad speed range [{}, {}]",
                self.speed_min, self.speed_max
            )));
        }
        if self.accel_max < 0.0 || self.follow_slowdown_max < 0.0 {
            return Err(Error::Config("generator: noise ranges must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.invalid_prefix_prob)
            || !(0.0..=1.0).contains(&self.arc_lane_prob)
        {
            return Err(Error::Config("generator: probabilities must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
enum LaneShape {
    Straight {
        start: [f64; 2],
        dir: f64,
    },
    Arc {
        center: [f64; 2],
        radius: f64,
        phi0: f64,
        turn: f64, // +1 counter-clockwise, -1 clockwise
    },
}

impl LaneShape {
    /// Point and tangent heading at arc length `s` from the lane start.
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        match self {
            LaneShape::Straight { start, dir } => {
                let (sin, cos) = dir.sin_cos();
                ([start[0] + s * cos, start[1] + s * sin], *dir)
            }
            LaneShape::Arc {
                center,
                radius,
                phi0,
                turn,
            } => {
                let phi = phi0 + turn * s / radius;
                let (sin, cos) = phi.sin_cos();
                (
                    [center[0] + radius * cos, center[1] + radius * sin],
                    phi + turn * std::f64::consts::FRAC_PI_2,
                )
            }
        }
    }
}

fn sample_lane(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> LaneShape {
    let cx = rng.gen_range(-40.0..40.0);
    let cy = rng.gen_range(-40.0..40.0);
    let ang = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    if rng.gen::<f64>() < cfg.arc_lane_prob {
        let radius = rng.gen_range(80.0..160.0);
        let turn = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        LaneShape::Arc {
            center: [cx, cy],
            radius,
            phi0: ang,
            turn,
        }
    } else {
        LaneShape::Straight {
            start: [cx, cy],
            dir: ang,
        }
    }
}

fn lane_polygon(id: u64, shape: &LaneShape, length: f64) -> MapPolygon {
    let n = (length / LANE_SAMPLE_SPACING).ceil() as usize + 1;
    let mut points = Vec::with_capacity(n);
    let mut headings = Vec::with_capacity(n);
    for i in 0..n {
        let s = length * i as f64 / (n - 1) as f64;
        let (p, h) = shape.at(s);
        points.push(p);
        headings.push(h);
    }
    MapPolygon {
        id,
        kind: PolygonKind::Lane,
        points,
        headings,
    }
}

struct AgentPlan {
    lane: usize,
    anchor_s: f64,
    speed: f64,
    accel: f64,
}

/// Fully deterministic scene synthesis from (seed, cfg).
pub fn generate_synthetic_scene(seed: u64, cfg: &GeneratorConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_steps = cfg.history_steps + cfg.horizon_steps;
    let max_travel =
        cfg.speed_max * (total_steps + 1) as f64 * TIME_STEP + 0.5 * cfg.accel_max
            * ((total_steps + 1) as f64 * TIME_STEP).powi(2);
    let lane_length = max_travel + SLOT_GAP_MAX * SLOTS_PER_LANE as f64 + 20.0;

    let lanes: Vec<LaneShape> = (0..cfg.lanes)
        .map(|_| sample_lane(&mut rng, cfg))
        .collect();
    let mut polygons: Vec<MapPolygon> = lanes
        .iter()
        .enumerate()
        .map(|(i, l)| lane_polygon(i as u64, l, lane_length))
        .collect();
    for i in 0..cfg.crosswalks {
        let cx = rng.gen_range(-30.0..30.0);
        let cy = rng.gen_range(-30.0..30.0);
        let ang: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (s, c) = ang.sin_cos();
        let half = 4.0;
        polygons.push(MapPolygon {
            id: (cfg.lanes + i) as u64,
            kind: PolygonKind::Crosswalk,
            points: vec![
                [cx - half * c, cy - half * s],
                [cx, cy],
                [cx + half * c, cy + half * s],
            ],
            headings: vec![ang, ang, ang],
        });
    }

    // Fill lanes round-robin; slot k trails slot k-1 and is never faster.
    let mut plans: Vec<AgentPlan> = Vec::with_capacity(cfg.agents);
    let mut lane_occupancy = vec![0usize; cfg.lanes];
    let mut lane_leader: Vec<Option<(f64, f64, f64)>> = vec![None; cfg.lanes]; // (s, v, a)
    for i in 0..cfg.agents {
        let lane = i % cfg.lanes;
        let slot = lane_occupancy[lane];
        lane_occupancy[lane] += 1;
        debug_assert!(slot < SLOTS_PER_LANE);
        let plan = match lane_leader[lane] {
            None => {
                let anchor_s = rng.gen_range(5.0..20.0);
                let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
                let accel = if cfg.accel_max > 0.0 {
                    rng.gen_range(-cfg.accel_max..=cfg.accel_max)
                } else {
                    0.0
                };
                AgentPlan {
                    lane,
                    anchor_s,
                    speed,
                    accel,
                }
            }
            Some((lead_s, lead_v, lead_a)) => {
                let gap = rng.gen_range(SLOT_GAP_MIN..SLOT_GAP_MAX);
                let slowdown = if cfg.follow_slowdown_max > 0.0 {
                    rng.gen_range(0.0..=cfg.follow_slowdown_max)
                } else {
                    0.0
                };
                let speed = (lead_v - slowdown).max(0.5 * cfg.speed_min);
                AgentPlan {
                    lane,
                    anchor_s: lead_s - gap,
                    speed: speed.min(lead_v),
                    accel: lead_a,
                }
            }
        };
        lane_leader[lane] = Some((plan.anchor_s, plan.speed, plan.accel));
        plans.push(plan);
    }

    let timestamps: Vec<f64> = (0..cfg.history_steps).map(|t| t as f64 * TIME_STEP).collect();
    let mut agents = Vec::with_capacity(cfg.agents + cfg.static_agents);
    for (i, plan) in plans.iter().enumerate() {
        let shape = &lanes[plan.lane];
        let state_at = |global_step: usize| {
            let tau = (global_step + 1) as f64 * TIME_STEP;
            let s = plan.anchor_s + plan.speed * tau + 0.5 * plan.accel * tau * tau;
            shape.at(s)
        };
        let invalid_prefix = if cfg.invalid_prefix_prob > 0.0
            && rng.gen::<f64>() < cfg.invalid_prefix_prob
        {
            rng.gen_range(1..(cfg.history_steps / 2).max(2))
        } else {
            0
        };
        let mut positions = Vec::with_capacity(cfg.history_steps);
        let mut headings = Vec::with_capacity(cfg.history_steps);
        let mut valid = Vec::with_capacity(cfg.history_steps);
        for t in 0..cfg.history_steps {
            if t < invalid_prefix {
                positions.push([0.0, 0.0]);
                headings.push(0.0);
                valid.push(false);
            } else {
                let (p, h) = state_at(t);
                positions.push(p);
                headings.push(h);
                valid.push(true);
            }
        }
        let future_gt: Vec<[f64; 2]> = (0..cfg.horizon_steps)
            .map(|j| state_at(cfg.history_steps + j).0)
            .collect();
        agents.push(AgentTrack {
            id: i as u64,
            category: AgentCategory::Vehicle,
            positions,
            headings,
            timestamps: timestamps.clone(),
            valid,
            is_target: true,
            future_gt: Some(future_gt),
        });
    }
    for i in 0..cfg.static_agents {
        let x = rng.gen_range(-40.0..40.0);
        let y = rng.gen_range(-40.0..40.0);
        let h = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let category = if i % 2 == 0 {
            AgentCategory::Pedestrian
        } else {
            AgentCategory::Cyclist
        };
        agents.push(AgentTrack {
            id: (cfg.agents + i) as u64,
            category,
            positions: vec![[x, y]; cfg.history_steps],
            headings: vec![h; cfg.history_steps],
            timestamps: timestamps.clone(),
            valid: vec![true; cfg.history_steps],
            is_target: false,
            future_gt: None,
        });
    }

    let scene = Scene {
        scenario_id: format!("scene-{seed:08}"),
        polygons,
        agents,
        horizon: cfg.horizon_steps,
    };
    scene.validate(true)?;
    Ok(scene)
}
