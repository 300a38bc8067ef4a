//! Neural building blocks on top of the tape: linear layers, MLPs, Fourier
//! positional features, and gated multi-head attention over ragged
//! neighborhoods.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::store::{Bound, ParameterStore};
use crate::tape::{NodeId, Segments, Tape};

/// Ragged attention structure: pair p attends query `segment(p)` to key
/// `key_idx[p]`. Pairs of one query are contiguous; `segs[q]` is that range.
#[derive(Debug, Clone, Default)]
pub struct PairList {
    pub key_idx: Vec<usize>,
    pub segs: Segments,
}

impl PairList {
    /// Builds the flat pair layout from one key list per query.
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Self {
        let mut key_idx = Vec::new();
        let mut segs = Vec::with_capacity(neighbors.len());
        for keys in neighbors {
            segs.push((key_idx.len(), keys.len()));
            key_idx.extend_from_slice(keys);
        }
        PairList { key_idx, segs }
    }

    pub fn len(&self) -> usize {
        self.key_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_idx.is_empty()
    }

    pub fn num_queries(&self) -> usize {
        self.segs.len()
    }

    /// Query index of each pair, for gathering query rows pairwise.
    pub fn query_gather(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.key_idx.len());
        for (q, &(_, len)) in self.segs.iter().enumerate() {
            out.extend(std::iter::repeat(q).take(len));
        }
        out
    }
}

// ---- Fourier positional features ----

/// Log-spaced frequencies used for the positional features.
pub const FOURIER_FREQS: [f64; 4] = [0.1, 0.368_403_149_864_039_1, 1.357_208_808_297_453_6, 5.0];

/// Per input scalar: the raw value plus sin/cos at each frequency.
pub const FOURIER_PER_SCALAR: usize = 1 + 2 * FOURIER_FREQS.len();

/// Encodes scalars as `[raw, sin(2πf_k x), cos(2πf_k x), ...]` per scalar.
pub fn fourier_features(scalars: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(scalars.len() * FOURIER_PER_SCALAR);
    for &s in scalars {
        out.push(s);
        for f in FOURIER_FREQS {
            let a = 2.0 * std::f64::consts::PI * f * s;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Integer harmonics used for angular scalars.
pub const ANGULAR_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Feature width of one embedded relative descriptor: two linear scalars
/// (distance, time difference) at `FOURIER_PER_SCALAR` dims each plus two
/// angular scalars (bearing, heading difference) at sin/cos per harmonic.
pub const DESCRIPTOR_DIM: usize = 2 * FOURIER_PER_SCALAR + 2 * (2 * ANGULAR_FREQS.len());

fn push_linear_features(out: &mut Vec<f64>, s: f64) {
    out.push(s);
    for f in FOURIER_FREQS {
        let a = 2.0 * std::f64::consts::PI * f * s;
        out.push(a.sin());
        out.push(a.cos());
    }
}

fn push_angular_features(out: &mut Vec<f64>, theta: f64) {
    for k in ANGULAR_FREQS {
        let a = k * theta;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Fourier features of a relative descriptor. Angular scalars use integer
/// harmonics only (no raw term), which keeps the features exactly
/// 2π-periodic: a wrapped angle that lands on either side of ±π produces
/// the same embedding, so encodings stay rigid-invariant even for keys
/// directly behind the query.
pub fn descriptor_features(d: &crate::scene::RelDescriptor) -> Vec<f64> {
    let mut out = Vec::with_capacity(DESCRIPTOR_DIM);
    push_linear_features(&mut out, d.distance);
    push_angular_features(&mut out, d.bearing);
    push_angular_features(&mut out, d.heading_diff);
    push_linear_features(&mut out, d.time_diff);
    out
}

// ---- plain-value helpers ----

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Numerically stable log(sum(exp(xs))).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

// ---- linear ----

pub fn init_linear(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    store.register_weight(&format!("{name}.w"), din, dout, rng)?;
    store.register_bias(&format!("{name}.b"), dout)
}

/// y = xW + b.
pub fn linear(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = bound.param(tape, store, &format!("{name}.w"))?;
    let b = bound.param(tape, store, &format!("{name}.b"))?;
    let (_, xc) = tape.dims(x);
    let (wr, _) = tape.dims(w);
    if xc != wr {
        return Err(Error::Dimension(format!(
            "linear {name}: input has {xc} columns but weight {name}.w expects {wr}"
        )));
    }
    let xw = tape.matmul(x, w);
    Ok(tape.add_row_broadcast(xw, b))
}

// ---- mlp ----

/// Registers `name.0 .. name.{n-1}` linear layers; `dims` lists the input
/// width followed by each layer's output width.
pub fn init_mlp(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    dims: &[usize],
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "mlp {name}: need at least input and one layer width"
        )));
    }
    for i in 0..dims.len() - 1 {
        init_linear(store, rng, &format!("{name}.{i}"), dims[i], dims[i + 1])?;
    }
    Ok(())
}

/// Alternating linear + GELU; the final layer stays linear. Hidden
/// activations get dropout in training mode.
pub fn mlp(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    name: &str,
    layers: usize,
    x: NodeId,
    dropout: f64,
) -> Result<NodeId> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, store, bound, &format!("{name}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.gelu(h);
            h = tape.dropout(h, dropout);
        }
    }
    Ok(h)
}

// ---- descriptor embedding ----

/// Registers the feature-embedding MLP (`in_dim -> d -> d`).
pub fn init_feature_embed(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    d: usize,
) -> Result<()> {
    init_mlp(store, rng, name, &[in_dim, d, d])
}

/// Embeds pre-computed Fourier feature rows to width D.
pub fn feature_embed(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    name: &str,
    features: NodeId,
    dropout: f64,
) -> Result<NodeId> {
    mlp(tape, store, bound, name, 2, features, dropout)
}

// ---- gated multi-head attention ----

pub fn init_gated_attention(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    d: usize,
) -> Result<()> {
    init_linear(store, rng, &format!("{name}.q"), d, d)?;
    init_linear(store, rng, &format!("{name}.k"), 2 * d, d)?;
    init_linear(store, rng, &format!("{name}.v"), 2 * d, d)?;
    init_linear(store, rng, &format!("{name}.out"), d, d)?;
    init_linear(store, rng, &format!("{name}.gate"), 2 * d, d)?;
    init_mlp(store, rng, &format!("{name}.self"), &[d, d, d])
}

/// Gated multi-head attention over a pair list.
///
/// Keys and values are projections of `[kv_row ‖ rel_pe]`; the attended
/// context is fused with a per-coordinate sigmoid gate:
/// `out = g ⊙ attn + (1 − g) ⊙ mlp(q)`. Queries with no pairs get `g = 0`
/// exactly, so their output is the self path alone.
pub fn gated_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    name: &str,
    q: NodeId,
    kv: NodeId,
    rel_pe: NodeId,
    pairs: &PairList,
    heads: usize,
    dropout: f64,
) -> Result<NodeId> {
    let (nq, d) = tape.dims(q);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention {name}: {heads} heads do not divide width {d}"
        )));
    }
    if nq != pairs.num_queries() {
        return Err(Error::Dimension(format!(
            "attention {name}: {nq} query rows but pair list covers {} queries",
            pairs.num_queries()
        )));
    }
    let (pe_rows, pe_cols) = tape.dims(rel_pe);
    if pe_rows != pairs.len() || pe_cols != d {
        return Err(Error::Dimension(format!(
            "attention {name}: rel_pe is [{pe_rows}, {pe_cols}], expected [{}, {d}]",
            pairs.len()
        )));
    }
    for (label, node) in [("q", q), ("kv", kv), ("rel_pe", rel_pe)] {
        if tape.value(node).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "attention {name}: non-finite values in {label}"
            )));
        }
    }

    let self_path = mlp(tape, store, bound, &format!("{name}.self"), 2, q, dropout)?;
    if pairs.is_empty() {
        return Ok(self_path);
    }

    let q_proj = linear(tape, store, bound, &format!("{name}.q"), q)?;
    let q_pairs = tape.gather_rows(q_proj, pairs.query_gather());
    let kv_pairs = tape.gather_rows(kv, pairs.key_idx.clone());
    let kv_cat = tape.concat_cols(kv_pairs, rel_pe);
    let k = linear(tape, store, bound, &format!("{name}.k"), kv_cat)?;
    let v = linear(tape, store, bound, &format!("{name}.v"), kv_cat)?;

    let scores = tape.head_dot(q_pairs, k, heads);
    let alpha = tape.segment_softmax(scores, pairs.segs.clone());
    let ctx = tape.segment_weighted_sum(alpha, v, pairs.segs.clone(), heads);
    let ctx = linear(tape, store, bound, &format!("{name}.out"), ctx)?;
    let ctx = tape.dropout(ctx, dropout);

    let gate_in = tape.concat_cols(q, ctx);
    let gate_lin = linear(tape, store, bound, &format!("{name}.gate"), gate_in)?;
    let mut gate = tape.sigmoid(gate_lin);
    if pairs.segs.iter().any(|&(_, len)| len == 0) {
        let factors: Vec<f64> = pairs
            .segs
            .iter()
            .map(|&(_, len)| if len == 0 { 0.0 } else { 1.0 })
            .collect();
        gate = tape.scale_rows(gate, factors);
    }

    // self + g * (ctx - self) == g*ctx + (1-g)*self
    let diff = tape.sub(ctx, self_path);
    let gated = tape.mul(gate, diff);
    Ok(tape.add(self_path, gated))
}

/// Dense-mask convenience wrapper: `rel_pe` is `[Nq*Nk, D]` row-major over
/// (query, key) and `mask[q][k] = true` means q attends to k.
pub fn gated_attention_dense(
    tape: &mut Tape,
    store: &ParameterStore,
    bound: &mut Bound,
    name: &str,
    q: NodeId,
    kv: NodeId,
    rel_pe_all: NodeId,
    mask: &[Vec<bool>],
    heads: usize,
    dropout: f64,
) -> Result<NodeId> {
    let (nk, _) = tape.dims(kv);
    let mut neighbors = Vec::with_capacity(mask.len());
    let mut pe_rows = Vec::new();
    for (qi, row) in mask.iter().enumerate() {
        if row.len() != nk {
            return Err(Error::Dimension(format!(
                "attention {name}: mask row {qi} has {} entries, expected {nk}",
                row.len()
            )));
        }
        let keys: Vec<usize> = (0..nk).filter(|&k| row[k]).collect();
        for &k in &keys {
            pe_rows.push(qi * nk + k);
        }
        neighbors.push(keys);
    }
    let pairs = PairList::from_neighbors(&neighbors);
    let pe = tape.gather_rows(rel_pe_all, pe_rows);
    gated_attention(tape, store, bound, name, q, kv, pe, &pairs, heads, dropout)
}
