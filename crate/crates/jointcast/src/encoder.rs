//! Query-centric scene encoder.
//!
//! Map polygons and agent states are embedded from frame-local, rigid-
//! invariant features only; every attention edge carries a relative
//! descriptor embedding. Global pose and absolute time therefore never enter
//! the computation, which yields roto-translation and time-shift invariance
//! up to floating-point error.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{
    descriptor_features, feature_embed, gated_attention, init_feature_embed,
    init_gated_attention, init_mlp, mlp, PairList, DESCRIPTOR_DIM,
};
use crate::scene::{
    build_local_frames, rel_descriptor, wrap_angle, LocalFrame, Scene, SceneFrames, TIME_STEP,
};
use crate::store::{Bound, ParameterStore};
use crate::tape::{NodeId, Tape};

/// Per-step invariant agent features: speed, yaw rate, motion bearing,
/// category one-hot (3), validity flag.
pub const AGENT_FEATURES: usize = 7;
/// Per-segment map features: length, turning angle.
pub const SEGMENT_FEATURES: usize = 2;

/// Precomputed indexing and geometry for one scene, independent of the tape.
pub struct SceneLayout {
    pub a: usize,
    pub t: usize,
    pub m: usize,
    pub frames: SceneFrames,
    pub valid: Vec<Vec<bool>>,
    /// Last valid history step per agent (the "current" state).
    pub anchor_step: Vec<usize>,
    pub targets: Vec<usize>,
}

impl SceneLayout {
    pub fn new(scene: &Scene) -> Result<Self> {
        let frames = build_local_frames(scene)?;
        let t = scene.history_len();
        let a = scene.agents.len();
        let m = scene.polygons.len();
        let valid: Vec<Vec<bool>> = scene.agents.iter().map(|ag| ag.valid.clone()).collect();
        let mut anchor_step = Vec::with_capacity(a);
        for (i, v) in valid.iter().enumerate() {
            match (0..t).rev().find(|&s| v[s]) {
                Some(s) => anchor_step.push(s),
                None => {
                    return Err(Error::Validation(format!(
                        "scene {}: agent {} has no valid state",
                        scene.scenario_id, scene.agents[i].id
                    )))
                }
            }
        }
        Ok(SceneLayout {
            a,
            t,
            m,
            frames,
            valid,
            anchor_step,
            targets: scene.target_indices(),
        })
    }

    pub fn state_row(&self, agent: usize, step: usize) -> usize {
        agent * self.t + step
    }

    pub fn anchor_frame(&self, agent: usize) -> LocalFrame {
        self.frames.agent[agent][self.anchor_step[agent]]
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Sorts candidate (distance², id, index) keys into a canonical order:
/// by distance, ties by id. Returns indices.
fn rank_neighbors(mut cands: Vec<(f64, u64, usize)>) -> Vec<usize> {
    cands.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.1.cmp(&y.1))
    });
    cands.into_iter().map(|(_, _, i)| i).collect()
}

/// Map-to-map neighborhoods: k nearest other polygons by frame origin.
pub fn map_map_pairs(layout: &SceneLayout, scene: &Scene, k: usize) -> PairList {
    let mut neighbors = Vec::with_capacity(layout.m);
    for qi in 0..layout.m {
        let q = layout.frames.polygon[qi].origin;
        let cands: Vec<(f64, u64, usize)> = (0..layout.m)
            .filter(|&ki| ki != qi)
            .map(|ki| (dist2(q, layout.frames.polygon[ki].origin), scene.polygons[ki].id, ki))
            .collect();
        let mut ranked = rank_neighbors(cands);
        ranked.truncate(k);
        neighbors.push(ranked);
    }
    PairList::from_neighbors(&neighbors)
}

/// Causal temporal neighborhoods: state (a, t) attends to (a, t') for valid
/// t' <= t. Invalid query steps get empty lists.
pub fn temporal_pairs(layout: &SceneLayout) -> PairList {
    let mut neighbors = Vec::with_capacity(layout.a * layout.t);
    for a in 0..layout.a {
        for t in 0..layout.t {
            if !layout.valid[a][t] {
                neighbors.push(Vec::new());
                continue;
            }
            let keys: Vec<usize> = (0..=t)
                .filter(|&tp| layout.valid[a][tp])
                .map(|tp| layout.state_row(a, tp))
                .collect();
            neighbors.push(keys);
        }
    }
    PairList::from_neighbors(&neighbors)
}

/// Agent-state to map neighborhoods: polygons within `radius`, else the
/// `fallback` nearest.
pub fn agent_map_pairs(
    layout: &SceneLayout,
    scene: &Scene,
    radius: f64,
    fallback: usize,
) -> PairList {
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(layout.a * layout.t);
    for a in 0..layout.a {
        for t in 0..layout.t {
            if !layout.valid[a][t] {
                neighbors.push(Vec::new());
                continue;
            }
            let pos = layout.frames.agent[a][t].origin;
            let cands: Vec<(f64, u64, usize)> = (0..layout.m)
                .map(|m| (dist2(pos, layout.frames.polygon[m].origin), scene.polygons[m].id, m))
                .collect();
            let ranked = rank_neighbors(cands);
            let within: Vec<usize> = ranked
                .iter()
                .copied()
                .filter(|&m| dist2(pos, layout.frames.polygon[m].origin) <= r2)
                .collect();
            if within.is_empty() {
                neighbors.push(ranked.into_iter().take(fallback).collect());
            } else {
                neighbors.push(within);
            }
        }
    }
    PairList::from_neighbors(&neighbors)
}

/// Same-step social neighborhoods among valid states of other agents.
pub fn social_pairs(
    layout: &SceneLayout,
    scene: &Scene,
    radius: f64,
    fallback: usize,
) -> PairList {
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(layout.a * layout.t);
    for a in 0..layout.a {
        for t in 0..layout.t {
            if !layout.valid[a][t] {
                neighbors.push(Vec::new());
                continue;
            }
            let pos = layout.frames.agent[a][t].origin;
            let cands: Vec<(f64, u64, usize)> = (0..layout.a)
                .filter(|&b| b != a && layout.valid[b][t])
                .map(|b| {
                    (
                        dist2(pos, layout.frames.agent[b][t].origin),
                        scene.agents[b].id,
                        layout.state_row(b, t),
                    )
                })
                .collect();
            let ranked = rank_neighbors(cands);
            let within: Vec<usize> = ranked
                .iter()
                .copied()
                .filter(|&row| {
                    let b = row / layout.t;
                    dist2(pos, layout.frames.agent[b][t].origin) <= r2
                })
                .collect();
            if within.is_empty() {
                neighbors.push(ranked.into_iter().take(fallback).collect());
            } else {
                neighbors.push(within);
            }
        }
    }
    PairList::from_neighbors(&neighbors)
}

/// Fourier features of the relative descriptor for every pair. The key
/// frame closure also receives the query index, letting static elements
/// (map polygons) take the query's own timestamp so agent-map edges carry
/// zero time difference.
pub fn pair_descriptor_features(
    pairs: &PairList,
    query_frame: impl Fn(usize) -> LocalFrame,
    key_frame: impl Fn(usize, usize) -> LocalFrame,
) -> Vec<f64> {
    let mut rows = Vec::with_capacity(pairs.len() * DESCRIPTOR_DIM);
    for (q, &(start, len)) in pairs.segs.iter().enumerate() {
        let qf = query_frame(q);
        for p in start..start + len {
            let kf = key_frame(q, pairs.key_idx[p]);
            let d = rel_descriptor(&qf, &kf);
            rows.extend(descriptor_features(&d));
        }
    }
    rows
}

/// Registers all encoder parameters.
pub fn init_encoder(store: &mut ParameterStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Result<()> {
    let d = cfg.d;
    init_mlp(store, rng, "enc.seg", &[SEGMENT_FEATURES, d, d])?;
    init_mlp(store, rng, "enc.mapfeat", &[d + 2, d, d])?;
    init_mlp(store, rng, "enc.agentfeat", &[AGENT_FEATURES, d, d])?;
    for l in 0..cfg.l_enc {
        for family in ["mapmap", "temporal", "agentmap", "social"] {
            init_gated_attention(store, rng, &format!("enc.{family}{l}"), d)?;
            init_feature_embed(store, rng, &format!("enc.{family}{l}.pe"), DESCRIPTOR_DIM, d)?;
        }
    }
    Ok(())
}

/// Encoded scene: map rows `[M, D]` and agent-state rows `[A*T, D]`.
pub struct SceneEncoding {
    pub map: NodeId,
    pub agents: NodeId,
}

fn embed_pairs(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    name: &str,
    features: &[f64],
    pairs: &PairList,
    dropout: f64,
) -> Result<NodeId> {
    let node = tape.constant(pairs.len(), DESCRIPTOR_DIM, features.to_vec());
    feature_embed(tape, store, bound, name, node, dropout)
}

/// Map encoding: invariant per-segment features pooled per polygon, then
/// `L_enc` rounds of map-to-map attention.
pub fn encode_map(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    cfg: &RunConfig,
    scene: &Scene,
    layout: &SceneLayout,
) -> Result<NodeId> {
    // per-segment rows, contiguous per polygon
    let mut seg_rows = Vec::new();
    let mut seg_segments = Vec::with_capacity(layout.m);
    let mut kind_rows = Vec::with_capacity(layout.m * 2);
    for poly in &scene.polygons {
        let n_seg = poly.points.len() - 1;
        seg_segments.push((seg_rows.len() / SEGMENT_FEATURES, n_seg));
        let mut prev_heading: Option<f64> = None;
        for w in poly.points.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let len = dx.hypot(dy);
            let heading = dy.atan2(dx);
            let turn = match prev_heading {
                Some(ph) => wrap_angle(heading - ph),
                None => 0.0,
            };
            prev_heading = Some(heading);
            seg_rows.push(len);
            seg_rows.push(turn);
        }
        let kind = match poly.kind {
            crate::scene::PolygonKind::Lane => [1.0, 0.0],
            crate::scene::PolygonKind::Crosswalk => [0.0, 1.0],
        };
        kind_rows.extend_from_slice(&kind);
    }
    let n_segments = seg_rows.len() / SEGMENT_FEATURES;
    let seg_node = tape.constant(n_segments, SEGMENT_FEATURES, seg_rows);
    let seg_emb = mlp(tape, store, bound, "enc.seg", 2, seg_node, cfg.dropout)?;
    let pooled = tape.segment_mean(seg_emb, seg_segments);
    let kinds = tape.constant(layout.m, 2, kind_rows);
    let cat = tape.concat_cols(pooled, kinds);
    let mut map = mlp(tape, store, bound, "enc.mapfeat", 2, cat, cfg.dropout)?;

    let pairs = map_map_pairs(layout, scene, cfg.map_knn);
    let feats = pair_descriptor_features(
        &pairs,
        |q| layout.frames.polygon[q],
        |_, k| layout.frames.polygon[k],
    );
    for l in 0..cfg.l_enc {
        let pe = embed_pairs(
            tape,
            store,
            bound,
            &format!("enc.mapmap{l}.pe"),
            &feats,
            &pairs,
            cfg.dropout,
        )?;
        map = gated_attention(
            tape,
            store,
            bound,
            &format!("enc.mapmap{l}"),
            map,
            map,
            pe,
            &pairs,
            cfg.h,
            cfg.dropout,
        )?;
    }
    Ok(map)
}

/// Per-step invariant motion features for every agent state.
fn agent_state_features(scene: &Scene, layout: &SceneLayout) -> Vec<f64> {
    let mut rows = Vec::with_capacity(layout.a * layout.t * AGENT_FEATURES);
    for (a, agent) in scene.agents.iter().enumerate() {
        let cat = agent.category.one_hot();
        for t in 0..layout.t {
            let valid_now = layout.valid[a][t];
            let valid_pair = valid_now && t > 0 && layout.valid[a][t - 1];
            let (speed, yaw_rate, bearing) = if valid_pair {
                let p0 = agent.positions[t - 1];
                let p1 = agent.positions[t];
                let dx = p1[0] - p0[0];
                let dy = p1[1] - p0[1];
                let speed = dx.hypot(dy) / TIME_STEP;
                let yaw = wrap_angle(agent.headings[t] - agent.headings[t - 1]) / TIME_STEP;
                let bearing = if dx == 0.0 && dy == 0.0 {
                    0.0
                } else {
                    wrap_angle(dy.atan2(dx) - agent.headings[t])
                };
                (speed, yaw, bearing)
            } else {
                (0.0, 0.0, 0.0)
            };
            rows.extend_from_slice(&[
                speed,
                yaw_rate,
                bearing,
                cat[0],
                cat[1],
                cat[2],
                if valid_now { 1.0 } else { 0.0 },
            ]);
        }
    }
    rows
}

/// Agent encoding: invariant per-step features, then `L_enc` interleaved
/// blocks of causal temporal, agent-map, and social attention.
pub fn encode_agents(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    cfg: &RunConfig,
    scene: &Scene,
    layout: &SceneLayout,
    map_enc: NodeId,
) -> Result<NodeId> {
    let feats = agent_state_features(scene, layout);
    let feat_node = tape.constant(layout.a * layout.t, AGENT_FEATURES, feats);
    let mut agents = mlp(tape, store, bound, "enc.agentfeat", 2, feat_node, cfg.dropout)?;

    let state_frame = |row: usize| layout.frames.agent[row / layout.t][row % layout.t];

    let t_pairs = temporal_pairs(layout);
    let t_feats = pair_descriptor_features(&t_pairs, state_frame, |_, k| state_frame(k));
    let m_pairs = agent_map_pairs(layout, scene, cfg.neighbor_radius, cfg.knn_fallback);
    let m_feats = pair_descriptor_features(&m_pairs, state_frame, |q, k| LocalFrame {
        time: state_frame(q).time,
        ..layout.frames.polygon[k]
    });
    let s_pairs = social_pairs(layout, scene, cfg.neighbor_radius, cfg.knn_fallback);
    let s_feats = pair_descriptor_features(&s_pairs, state_frame, |_, k| state_frame(k));

    for l in 0..cfg.l_enc {
        let pe = embed_pairs(
            tape, store, bound,
            &format!("enc.temporal{l}.pe"),
            &t_feats, &t_pairs, cfg.dropout,
        )?;
        agents = gated_attention(
            tape, store, bound,
            &format!("enc.temporal{l}"),
            agents, agents, pe, &t_pairs, cfg.h, cfg.dropout,
        )?;
        let pe = embed_pairs(
            tape, store, bound,
            &format!("enc.agentmap{l}.pe"),
            &m_feats, &m_pairs, cfg.dropout,
        )?;
        agents = gated_attention(
            tape, store, bound,
            &format!("enc.agentmap{l}"),
            agents, map_enc, pe, &m_pairs, cfg.h, cfg.dropout,
        )?;
        let pe = embed_pairs(
            tape, store, bound,
            &format!("enc.social{l}.pe"),
            &s_feats, &s_pairs, cfg.dropout,
        )?;
        agents = gated_attention(
            tape, store, bound,
            &format!("enc.social{l}"),
            agents, agents, pe, &s_pairs, cfg.h, cfg.dropout,
        )?;
    }
    Ok(agents)
}

pub fn encode_scene(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    cfg: &RunConfig,
    scene: &Scene,
    layout: &SceneLayout,
) -> Result<SceneEncoding> {
    let map = encode_map(tape, store, bound, cfg, scene, layout)?;
    let agents = encode_agents(tape, store, bound, cfg, scene, layout, map)?;
    Ok(SceneEncoding { map, agents })
}
