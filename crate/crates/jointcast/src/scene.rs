//! Scene data model and local-frame geometry.
//!
//! Every scene element carries its own spacetime frame (origin, heading,
//! time). Relations between elements are expressed as rigid-invariant
//! descriptors measured in the query element's frame, which is what makes
//! the encoder's output independent of the global pose of the scene.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of tracks, seconds.
pub const TIME_STEP: f64 = 0.1;
/// Default prediction horizon, steps.
pub const DEFAULT_HORIZON: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolygonKind {
    Lane,
    Crosswalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentCategory {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            AgentCategory::Vehicle => [1.0, 0.0, 0.0],
            AgentCategory::Pedestrian => [0.0, 1.0, 0.0],
            AgentCategory::Cyclist => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolygon {
    pub id: u64,
    pub kind: PolygonKind,
    pub points: Vec<[f64; 2]>,
    pub headings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub category: AgentCategory,
    pub positions: Vec<[f64; 2]>,
    pub headings: Vec<f64>,
    pub timestamps: Vec<f64>,
    pub valid: Vec<bool>,
    pub is_target: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub future_gt: Option<Vec<[f64; 2]>>,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scenario_id: String,
    pub polygons: Vec<MapPolygon>,
    pub agents: Vec<AgentTrack>,
    #[serde(skip, default = "default_horizon")]
    pub horizon: usize,
}

/// A spacetime coordinate frame attached to one scene element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: [f64; 2],
    pub heading: f64,
    pub time: f64,
}

/// Relation between two frames, measured in the query frame. Invariant to
/// global rigid transforms and global time shifts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelDescriptor {
    pub distance: f64,
    pub bearing: f64,
    pub heading_diff: f64,
    pub time_diff: f64,
}

impl RelDescriptor {
    pub fn scalars(&self) -> [f64; 4] {
        [self.distance, self.bearing, self.heading_diff, self.time_diff]
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let x = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if x == 0.0 {
        std::f64::consts::PI
    } else {
        x - std::f64::consts::PI
    }
}

pub fn rel_descriptor(query: &LocalFrame, key: &LocalFrame) -> RelDescriptor {
    let dx = key.origin[0] - query.origin[0];
    let dy = key.origin[1] - query.origin[1];
    let distance = dx.hypot(dy);
    let (sin_q, cos_q) = query.heading.sin_cos();
    // offset expressed in the query frame
    let local_x = cos_q * dx + sin_q * dy;
    let local_y = -sin_q * dx + cos_q * dy;
    // a zero offset has no direction; atan2 of signed zeros would otherwise
    // report 0 or ±π depending on the query heading's quadrant
    let bearing = if distance == 0.0 {
        0.0
    } else {
        local_y.atan2(local_x)
    };
    RelDescriptor {
        distance,
        bearing,
        heading_diff: wrap_angle(key.heading - query.heading),
        time_diff: key.time - query.time,
    }
}

/// Frames for every agent state (`[A][T]`) and every polygon (`[M]`).
pub struct SceneFrames {
    pub agent: Vec<Vec<LocalFrame>>,
    pub polygon: Vec<LocalFrame>,
}

pub fn build_local_frames(scene: &Scene) -> Result<SceneFrames> {
    let mut polygon = Vec::with_capacity(scene.polygons.len());
    for p in &scene.polygons {
        if p.points.len() < 2 {
            return Err(Error::Geometry(format!(
                "polygon {} has {} points, need at least 2",
                p.id,
                p.points.len()
            )));
        }
        let [x0, y0] = p.points[0];
        let [x1, y1] = p.points[1];
        if x0 == x1 && y0 == y1 {
            return Err(Error::Geometry(format!(
                "polygon {} first segment is degenerate", p.id
            )));
        }
        polygon.push(LocalFrame {
            origin: [x0, y0],
            heading: (y1 - y0).atan2(x1 - x0),
            time: 0.0,
        });
    }
    let mut agent = Vec::with_capacity(scene.agents.len());
    for a in &scene.agents {
        let mut frames = Vec::with_capacity(a.positions.len());
        for t in 0..a.positions.len() {
            frames.push(LocalFrame {
                origin: a.positions[t],
                heading: wrap_angle(a.headings[t]),
                time: a.timestamps[t],
            });
        }
        agent.push(frames);
    }
    Ok(SceneFrames { agent, polygon })
}

impl Scene {
    pub fn num_targets(&self) -> usize {
        self.agents.iter().filter(|a| a.is_target).count()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| self.agents[i].is_target)
            .collect()
    }

    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.positions.len())
    }

    /// Structural validation. With `require_future`, every target agent must
    /// carry a ground-truth future of the scene horizon's length.
    pub fn validate(&self, require_future: bool) -> Result<()> {
        for p in &self.polygons {
            if p.points.len() < 2 {
                return Err(Error::Validation(format!(
                    "scene {}: polygon {} has fewer than 2 points",
                    self.scenario_id, p.id
                )));
            }
            if p.headings.len() != p.points.len() {
                return Err(Error::Validation(format!(
                    "scene {}: polygon {} has {} headings for {} points",
                    self.scenario_id,
                    p.id,
                    p.headings.len(),
                    p.points.len()
                )));
            }
            if p.headings.iter().any(|h| !h.is_finite()) {
                return Err(Error::Validation(format!(
                    "scene {}: polygon {} has non-finite heading",
                    self.scenario_id, p.id
                )));
            }
            for w in p.points.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::Validation(format!(
                        "scene {}: polygon {} repeats a centerline point",
                        self.scenario_id, p.id
                    )));
                }
            }
        }
        let t_len = self.history_len();
        for a in &self.agents {
            if a.positions.len() != t_len
                || a.headings.len() != t_len
                || a.timestamps.len() != t_len
                || a.valid.len() != t_len
            {
                return Err(Error::Validation(format!(
                    "scene {}: agent {} track arrays disagree on length",
                    self.scenario_id, a.id
                )));
            }
            for w in a.timestamps.windows(2) {
                let dt = w[1] - w[0];
                if dt <= 0.0 || (dt - TIME_STEP).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "scene {}: agent {} timestamps must increase by {TIME_STEP} s",
                        self.scenario_id, a.id
                    )));
                }
            }
            for t in 0..t_len {
                if a.valid[t]
                    && (!a.positions[t][0].is_finite()
                        || !a.positions[t][1].is_finite()
                        || !a.headings[t].is_finite())
                {
                    return Err(Error::Validation(format!(
                        "scene {}: agent {} has non-finite state at valid step {t}",
                        self.scenario_id, a.id
                    )));
                }
            }
            if let Some(fut) = &a.future_gt {
                if fut.len() != self.horizon {
                    return Err(Error::Validation(format!(
                        "scene {}: agent {} future has {} steps, horizon is {}",
                        self.scenario_id,
                        a.id,
                        fut.len(),
                        self.horizon
                    )));
                }
            } else if require_future && a.is_target {
                return Err(Error::Validation(format!(
                    "scene {}: target agent {} is missing future_gt",
                    self.scenario_id, a.id
                )));
            }
        }
        if !self.agents.iter().any(|a| a.is_target) {
            return Err(Error::Validation(format!(
                "scene {}: no target agents",
                self.scenario_id
            )));
        }
        Ok(())
    }

    /// Applies one rigid transform (rotation `angle`, then translation) to
    /// all spatial quantities and shifts all timestamps.
    pub fn rigid_transformed(&self, angle: f64, translation: [f64; 2], time_shift: f64) -> Scene {
        let (s, c) = angle.sin_cos();
        let map_pt = |p: [f64; 2]| {
            [
                c * p[0] - s * p[1] + translation[0],
                s * p[0] + c * p[1] + translation[1],
            ]
        };
        let mut out = self.clone();
        for poly in &mut out.polygons {
            for p in &mut poly.points {
                *p = map_pt(*p);
            }
            for h in &mut poly.headings {
                *h = wrap_angle(*h + angle);
            }
        }
        for a in &mut out.agents {
            for p in &mut a.positions {
                *p = map_pt(*p);
            }
            for h in &mut a.headings {
                *h = wrap_angle(*h + angle);
            }
            for t in &mut a.timestamps {
                *t += time_shift;
            }
            if let Some(fut) = &mut a.future_gt {
                for p in fut {
                    *p = map_pt(*p);
                }
            }
        }
        out
    }

    /// Reorders agents and polygons by the given permutations
    /// (`perm[new_index] = old_index`).
    pub fn permuted(&self, agent_perm: &[usize], polygon_perm: &[usize]) -> Scene {
        let mut out = self.clone();
        out.agents = agent_perm.iter().map(|&i| self.agents[i].clone()).collect();
        out.polygons = polygon_perm
            .iter()
            .map(|&i| self.polygons[i].clone())
            .collect();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_scene() -> Scene {
        Scene {
            scenario_id: "toy".into(),
            polygons: vec![MapPolygon {
                id: 0,
                kind: PolygonKind::Lane,
                points: vec![[0.0, 0.0], [10.0, 0.0]],
                headings: vec![0.0, 0.0],
            }],
            agents: vec![AgentTrack {
                id: 0,
                category: AgentCategory::Vehicle,
                positions: vec![[0.0, 0.0], [1.0, 0.0]],
                headings: vec![0.0, 0.0],
                timestamps: vec![0.0, 0.1],
                valid: vec![true, true],
                is_target: true,
                future_gt: Some(vec![[2.0, 0.0]; 60]),
            }],
            horizon: 60,
        }
    }

    #[test]
    fn frames_identity_and_straight_lane() {
        let scene = toy_scene();
        let frames = build_local_frames(&scene).unwrap();
        assert_eq!(frames.agent[0][0].origin, [0.0, 0.0]);
        assert_eq!(frames.agent[0][0].heading, 0.0);
        assert_eq!(frames.polygon[0].origin, [0.0, 0.0]);
        assert_eq!(frames.polygon[0].heading, 0.0);
        assert_eq!(frames.polygon[0].time, 0.0);
    }

    #[test]
    fn degenerate_polygon_is_geometry_error() {
        let mut scene = toy_scene();
        scene.polygons[0].points = vec![[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(
            build_local_frames(&scene),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn frames_are_rigid_equivariant() {
        let scene = toy_scene();
        let angle = 0.7;
        let t = [3.0, -4.0];
        let moved = scene.rigid_transformed(angle, t, 2.5);
        let f0 = build_local_frames(&scene).unwrap();
        let f1 = build_local_frames(&moved).unwrap();
        let (s, c) = angle.sin_cos();
        for (a0, a1) in f0.agent.iter().zip(&f1.agent) {
            for (fr0, fr1) in a0.iter().zip(a1) {
                let expect = [
                    c * fr0.origin[0] - s * fr0.origin[1] + t[0],
                    s * fr0.origin[0] + c * fr0.origin[1] + t[1],
                ];
                assert!((fr1.origin[0] - expect[0]).abs() < 1e-12);
                assert!((fr1.origin[1] - expect[1]).abs() < 1e-12);
                assert!((wrap_angle(fr1.heading - fr0.heading - angle)).abs() < 1e-12);
                assert!((fr1.time - fr0.time - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_descriptor_is_zero() {
        let f = LocalFrame {
            origin: [2.0, 3.0],
            heading: 1.0,
            time: 5.0,
        };
        let d = rel_descriptor(&f, &f);
        assert_eq!(d.scalars(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_computed_descriptor() {
        let q = LocalFrame {
            origin: [0.0, 0.0],
            heading: 0.0,
            time: 0.0,
        };
        let k = LocalFrame {
            origin: [3.0, 4.0],
            heading: std::f64::consts::FRAC_PI_2,
            time: 0.5,
        };
        let d = rel_descriptor(&q, &k);
        assert!((d.distance - 5.0).abs() < 1e-12);
        assert!((d.bearing - 4.0f64.atan2(3.0)).abs() < 1e-12);
        assert!((d.heading_diff - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((d.time_diff - 0.5).abs() < 1e-12);
    }

    #[test]
    fn permutation_reorders_frames_exactly() {
        let mut scene = toy_scene();
        let mut second = scene.agents[0].clone();
        second.id = 1;
        second.positions = vec![[5.0, 5.0], [6.0, 5.0]];
        scene.agents.push(second);
        let permuted = scene.permuted(&[1, 0], &[0]);
        let f0 = build_local_frames(&scene).unwrap();
        let f1 = build_local_frames(&permuted).unwrap();
        assert_eq!(f0.agent[0], f1.agent[1]);
        assert_eq!(f0.agent[1], f1.agent[0]);
    }

    #[test]
    fn validate_catches_missing_future() {
        let mut scene = toy_scene();
        scene.agents[0].future_gt = None;
        assert!(scene.validate(false).is_ok());
        assert!(matches!(scene.validate(true), Err(Error::Validation(_))));
    }

    #[test]
    fn validate_catches_bad_timestamps() {
        let mut scene = toy_scene();
        scene.agents[0].timestamps = vec![0.0, 0.3];
        assert!(scene.validate(false).is_err());
    }

    proptest! {
        #[test]
        fn wrap_angle_stays_in_range(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            // same angle modulo 2*pi
            prop_assert!(((w - a).rem_euclid(2.0 * std::f64::consts::PI)).abs() < 1e-9
                || ((w - a).rem_euclid(2.0 * std::f64::consts::PI) - 2.0 * std::f64::consts::PI).abs() < 1e-9);
        }

        #[test]
        fn descriptor_invariant_under_rigid_transform_and_time_shift(
            qx in -50.0f64..50.0, qy in -50.0f64..50.0, qh in -3.0f64..3.0, qt in 0.0f64..10.0,
            kx in -50.0f64..50.0, ky in -50.0f64..50.0, kh in -3.0f64..3.0, kt in 0.0f64..10.0,
            angle in -3.0f64..3.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0,
            shift in -1000.0f64..1000.0,
        ) {
            let q = LocalFrame { origin: [qx, qy], heading: qh, time: qt };
            let k = LocalFrame { origin: [kx, ky], heading: kh, time: kt };
            let (s, c) = angle.sin_cos();
            let mv = |f: &LocalFrame| LocalFrame {
                origin: [c * f.origin[0] - s * f.origin[1] + tx,
                         s * f.origin[0] + c * f.origin[1] + ty],
                heading: wrap_angle(f.heading + angle),
                time: f.time + shift,
            };
            let d0 = rel_descriptor(&q, &k);
            let d1 = rel_descriptor(&mv(&q), &mv(&k));
            prop_assert!((d0.distance - d1.distance).abs() < 1e-9);
            prop_assert!(wrap_angle(d0.bearing - d1.bearing).abs() < 1e-9);
            prop_assert!(wrap_angle(d0.heading_diff - d1.heading_diff).abs() < 1e-9);
            prop_assert!((d0.time_diff - d1.time_diff).abs() < 1e-9);
        }
    }
}
