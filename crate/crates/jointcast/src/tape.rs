//! Reverse-mode autodiff over a flat operation tape.
//!
//! Values are dense row-major f64 matrices. The tape records every forward
//! operation eagerly; `backward` replays it in reverse and accumulates
//! gradients by the chain rule. Ragged multi-head attention is supported
//! through pair-list primitives (`head_dot`, `segment_softmax`,
//! `segment_weighted_sum`) so that a whole attention layer costs a handful
//! of tape nodes regardless of the neighborhood structure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Contiguous (start, len) row ranges; one per query, covering pair rows.
pub type Segments = Vec<(usize, usize)>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleRows(NodeId, Vec<f64>),
    AddRowBroadcast(NodeId, NodeId),
    AddBroadcastAll(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Softplus(NodeId),
    Recip(NodeId),
    RowSum(NodeId),
    SumAll(NodeId),
    LogSumExp(NodeId),
    HeadDot {
        a: NodeId,
        b: NodeId,
        heads: usize,
    },
    SegmentSoftmax {
        x: NodeId,
        segs: Segments,
    },
    SegmentWeightedSum {
        alpha: NodeId,
        values: NodeId,
        segs: Segments,
        heads: usize,
    },
    SegmentSum {
        x: NodeId,
        segs: Segments,
    },
    SegmentMean {
        x: NodeId,
        segs: Segments,
    },
    CumsumPairs(NodeId),
    RotatePairs {
        x: NodeId,
        rot: Vec<[f64; 2]>,
    },
    AddPairConst(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Detach,
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// The computation tape. Build one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// out(+)= a @ b with optional logical transposes of the stored row-major
/// operands. `beta` = 0 overwrites, 1 accumulates.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Evaluation-mode tape: dropout is a no-op.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// Training-mode tape: dropout draws masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            grad: None,
            needs_grad: needs,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- leaves ----

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf data length mismatch");
        self.push(Op::Leaf, rows, cols, value, needs_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.leaf(rows, cols, value, false)
    }

    // ---- elementwise ----

    fn assert_same(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(self.dims(a), self.dims(b), "{what}: operand shape mismatch");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same(a, b, "add");
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), r, c, v, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same(a, b, "sub");
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), r, c, v, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same(a, b, "mul");
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), r, c, v, needs)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| -x).collect();
        let needs = self.needs(a);
        self.push(Op::Neg(a), r, c, v, needs)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), r, c, v, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + s).collect();
        let needs = self.needs(a);
        self.push(Op::AddScalar(a), r, c, v, needs)
    }

    /// Multiplies every entry of row r by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!(factors.len(), r, "scale_rows: factor count mismatch");
        let mut v = self.nodes[a.0].value.clone();
        for (i, row) in v.chunks_mut(c).enumerate() {
            for x in row {
                *x *= factors[i];
            }
        }
        let needs = self.needs(a);
        self.push(Op::ScaleRows(a, factors), r, c, v, needs)
    }

    /// `[n, m] + [1, m]` (bias add).
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let (rb, cb) = self.dims(b);
        assert!(rb == 1 && cb == c, "add_row_broadcast: bias shape mismatch");
        let bias = &self.nodes[b.0].value;
        let mut v = self.nodes[a.0].value.clone();
        for row in v.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(bias) {
                *x += y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::AddRowBroadcast(a, b), r, c, v, needs)
    }

    /// `[n, m] + [1, 1]` (scalar-node add).
    pub fn add_broadcast_all(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(s), (1, 1), "add_broadcast_all: scalar expected");
        let sv = self.nodes[s.0].value[0];
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + sv).collect();
        let needs = self.needs(a) || self.needs(s);
        self.push(Op::AddBroadcastAll(a, s), r, c, v, needs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (kb, n) = self.dims(b);
        assert_eq!(k, kb, "matmul: inner dimensions differ ({k} vs {kb})");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), m, n, out, needs)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].value;
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "gather_rows: index {i} out of bounds ({r} rows)");
            v.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        let needs = self.needs(a);
        self.push(Op::GatherRows(a, idx), rows, c, v, needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        assert_eq!(ra, rb, "concat_cols: row count mismatch");
        let mut v = Vec::with_capacity(ra * (ca + cb));
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..ra {
            v.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            v.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), ra, ca + cb, v, needs)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        assert_eq!(ca, cb, "concat_rows: column count mismatch");
        let mut v = self.nodes[a.0].value.clone();
        v.extend_from_slice(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a, b), ra + rb, ca, v, needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols: range out of bounds");
        let src = &self.nodes[a.0].value;
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        self.push(Op::SliceCols(a, start, len), r, len, v, needs)
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), r, c, v, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Gelu(a), r, c, v, needs)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self
            .nodes[a.0]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let needs = self.needs(a);
        self.push(Op::Silu(a), r, c, v, needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        let needs = self.needs(a);
        self.push(Op::Ln(a), r, c, v, needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(Op::Exp(a), r, c, v, needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.abs()).collect();
        let needs = self.needs(a);
        self.push(Op::Abs(a), r, c, v, needs)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| softplus(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Softplus(a), r, c, v, needs)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| 1.0 / x).collect();
        let needs = self.needs(a);
        self.push(Op::Recip(a), r, c, v, needs)
    }

    // ---- reductions ----

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .chunks(c)
            .map(|row| row.iter().sum())
            .collect();
        let needs = self.needs(a);
        self.push(Op::RowSum(a), r, 1, v, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), 1, 1, vec![v], needs)
    }

    /// log(sum(exp(x))) over every entry, computed stably.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = if m == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
            m + s.ln()
        };
        let needs = self.needs(a);
        self.push(Op::LogSumExp(a), 1, 1, vec![v], needs)
    }

    // ---- attention primitives ----

    /// Per-row, per-head scaled dot products: `[P, D] x [P, D] -> [P, H]`,
    /// scaled by `1/sqrt(D/H)`.
    pub fn head_dot(&mut self, a: NodeId, b: NodeId, heads: usize) -> NodeId {
        self.assert_same(a, b, "head_dot");
        let (p, d) = self.dims(a);
        assert!(heads > 0 && d % heads == 0, "head_dot: heads must divide D");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut v = vec![0.0; p * heads];
        for i in 0..p {
            for h in 0..heads {
                let off = i * d + h * dh;
                let mut s = 0.0;
                for j in 0..dh {
                    s += av[off + j] * bv[off + j];
                }
                v[i * heads + h] = s * scale;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::HeadDot { a, b, heads }, p, heads, v, needs)
    }

    /// Softmax over each segment of rows, independently per column.
    /// Segments must tile `0..P` contiguously; empty segments are allowed.
    pub fn segment_softmax(&mut self, x: NodeId, segs: Segments) -> NodeId {
        let (p, h) = self.dims(x);
        debug_assert_eq!(segs.iter().map(|s| s.1).sum::<usize>(), p);
        let xv = &self.nodes[x.0].value;
        let mut v = vec![0.0; p * h];
        for &(start, len) in &segs {
            if len == 0 {
                continue;
            }
            for col in 0..h {
                let mut m = f64::NEG_INFINITY;
                for i in start..start + len {
                    m = m.max(xv[i * h + col]);
                }
                let mut s = 0.0;
                for i in start..start + len {
                    let e = (xv[i * h + col] - m).exp();
                    v[i * h + col] = e;
                    s += e;
                }
                for i in start..start + len {
                    v[i * h + col] /= s;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::SegmentSoftmax { x, segs }, p, h, v, needs)
    }

    /// Attention readout: `out[q, (h,d)] = sum_{p in seg(q)} alpha[p,h] * v[p,(h,d)]`.
    pub fn segment_weighted_sum(
        &mut self,
        alpha: NodeId,
        values: NodeId,
        segs: Segments,
        heads: usize,
    ) -> NodeId {
        let (p, h) = self.dims(alpha);
        let (pv, d) = self.dims(values);
        assert_eq!(p, pv, "segment_weighted_sum: pair count mismatch");
        assert_eq!(h, heads, "segment_weighted_sum: head count mismatch");
        assert!(d % heads == 0, "segment_weighted_sum: heads must divide D");
        debug_assert_eq!(segs.iter().map(|s| s.1).sum::<usize>(), p);
        let dh = d / heads;
        let nq = segs.len();
        let av = &self.nodes[alpha.0].value;
        let vv = &self.nodes[values.0].value;
        let mut out = vec![0.0; nq * d];
        for (q, &(start, len)) in segs.iter().enumerate() {
            for i in start..start + len {
                for hh in 0..heads {
                    let a = av[i * heads + hh];
                    let src = i * d + hh * dh;
                    let dst = q * d + hh * dh;
                    for j in 0..dh {
                        out[dst + j] += a * vv[src + j];
                    }
                }
            }
        }
        let needs = self.needs(alpha) || self.needs(values);
        self.push(
            Op::SegmentWeightedSum {
                alpha,
                values,
                segs,
                heads,
            },
            nq,
            d,
            out,
            needs,
        )
    }

    /// Row-segment sums: `[P, C] -> [S, C]`.
    pub fn segment_sum(&mut self, x: NodeId, segs: Segments) -> NodeId {
        let (p, c) = self.dims(x);
        debug_assert_eq!(segs.iter().map(|s| s.1).sum::<usize>(), p);
        let xv = &self.nodes[x.0].value;
        let s = segs.len();
        let mut out = vec![0.0; s * c];
        for (q, &(start, len)) in segs.iter().enumerate() {
            for i in start..start + len {
                for j in 0..c {
                    out[q * c + j] += xv[i * c + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::SegmentSum { x, segs }, s, c, out, needs)
    }

    /// Row-segment means; empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: NodeId, segs: Segments) -> NodeId {
        let (p, c) = self.dims(x);
        debug_assert_eq!(segs.iter().map(|s| s.1).sum::<usize>(), p);
        let xv = &self.nodes[x.0].value;
        let s = segs.len();
        let mut out = vec![0.0; s * c];
        for (q, &(start, len)) in segs.iter().enumerate() {
            if len == 0 {
                continue;
            }
            let inv = 1.0 / len as f64;
            for i in start..start + len {
                for j in 0..c {
                    out[q * c + j] += xv[i * c + j] * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::SegmentMean { x, segs }, s, c, out, needs)
    }

    // ---- trajectory helpers ----

    /// Treats columns as (x, y) pairs and forms their running sum along the
    /// row: `out[:, 2t..2t+2] = sum_{s<=t} in[:, 2s..2s+2]`.
    pub fn cumsum_pairs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(c % 2 == 0, "cumsum_pairs: column count must be even");
        let mut v = self.nodes[a.0].value.clone();
        for row in v.chunks_mut(c) {
            for t in 1..c / 2 {
                row[2 * t] += row[2 * (t - 1)];
                row[2 * t + 1] += row[2 * (t - 1) + 1];
            }
        }
        let needs = self.needs(a);
        self.push(Op::CumsumPairs(a), r, c, v, needs)
    }

    /// Rotates each (x, y) column pair of row r by the constant rotation
    /// `rot[r] = (cos, sin)`.
    pub fn rotate_pairs(&mut self, a: NodeId, rot: Vec<[f64; 2]>) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(c % 2 == 0, "rotate_pairs: column count must be even");
        assert_eq!(rot.len(), r, "rotate_pairs: rotation count mismatch");
        let mut v = self.nodes[a.0].value.clone();
        for (i, row) in v.chunks_mut(c).enumerate() {
            let [cs, sn] = rot[i];
            for t in 0..c / 2 {
                let x = row[2 * t];
                let y = row[2 * t + 1];
                row[2 * t] = cs * x - sn * y;
                row[2 * t + 1] = sn * x + cs * y;
            }
        }
        let needs = self.needs(a);
        self.push(Op::RotatePairs { x: a, rot }, r, c, v, needs)
    }

    /// Adds the constant offset `offsets[r]` to every (x, y) pair of row r.
    pub fn add_pair_const(&mut self, a: NodeId, offsets: Vec<[f64; 2]>) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(c % 2 == 0, "add_pair_const: column count must be even");
        assert_eq!(offsets.len(), r, "add_pair_const: offset count mismatch");
        let mut v = self.nodes[a.0].value.clone();
        for (i, row) in v.chunks_mut(c).enumerate() {
            let [ox, oy] = offsets[i];
            for t in 0..c / 2 {
                row[2 * t] += ox;
                row[2 * t + 1] += oy;
            }
        }
        let needs = self.needs(a);
        self.push(Op::AddPairConst(a), r, c, v, needs)
    }

    // ---- regularization / flow control ----

    /// Inverted dropout. Identity (records nothing) unless the tape is in
    /// training mode and `rate > 0`.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        let rng = match &mut self.rng {
            Some(r) => r,
            None => return a,
        };
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let (r, c) = self.dims(a);
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let needs = self.needs(a);
        self.push(Op::Dropout { x: a, mask }, r, c, v, needs)
    }

    /// Value passes through, gradient does not.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v = self.nodes[a.0].value.clone();
        self.push(Op::Detach, r, c, v, false)
    }

    // ---- backward ----

    /// Reverse pass from a scalar node; seeds its gradient with 1 and
    /// accumulates into every ancestor that requires gradients.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.dims(loss), (1, 1), "backward: loss must be a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad && i != loss.0 {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                node.grad = g;
            }
        }
    }

    fn accum(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(buf);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let cols = node.cols;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (x, y) in db.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (x, y) in db.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * bv[k];
                    }
                });
                self.accum(grads, *b, |db| {
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                });
            }
            Op::Neg(a) => self.accum(grads, *a, |da| {
                for (x, y) in da.iter_mut().zip(g) {
                    *x -= y;
                }
            }),
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y * s;
                    }
                })
            }
            Op::AddScalar(a) => self.accum(grads, *a, |da| {
                for (x, y) in da.iter_mut().zip(g) {
                    *x += y;
                }
            }),
            Op::ScaleRows(a, factors) => self.accum(grads, *a, |da| {
                for (r, row) in da.chunks_mut(cols).enumerate() {
                    for (k, x) in row.iter_mut().enumerate() {
                        *x += g[r * cols + k] * factors[r];
                    }
                }
            }),
            Op::AddRowBroadcast(a, b) => {
                self.accum(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |db| {
                    for row in g.chunks(cols) {
                        for (x, y) in db.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::AddBroadcastAll(a, s) => {
                self.accum(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accum(grads, *s, |ds| ds[0] += g.iter().sum::<f64>());
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, nn) = self.dims(*b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |da| {
                    // dA += G @ B^T : [m, n] x [n, k]
                    gemm(m, nn, k, g, false, bv, true, 1.0, da);
                });
                self.accum(grads, *b, |db| {
                    // dB += A^T @ G : [k, m] x [m, n]
                    gemm(k, m, nn, av, true, g, false, 1.0, db);
                });
            }
            Op::GatherRows(a, idx) => self.accum(grads, *a, |da| {
                for (r, &src) in idx.iter().enumerate() {
                    for k in 0..cols {
                        da[src * cols + k] += g[r * cols + k];
                    }
                }
            }),
            Op::ConcatCols(a, b) => {
                let (ra, ca) = self.dims(*a);
                let (_, cb) = self.dims(*b);
                self.accum(grads, *a, |da| {
                    for r in 0..ra {
                        for k in 0..ca {
                            da[r * ca + k] += g[r * (ca + cb) + k];
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    for r in 0..ra {
                        for k in 0..cb {
                            db[r * cb + k] += g[r * (ca + cb) + ca + k];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let (ra, _) = self.dims(*a);
                let na = ra * cols;
                self.accum(grads, *a, |da| {
                    for (x, y) in da.iter_mut().zip(&g[..na]) {
                        *x += y;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (x, y) in db.iter_mut().zip(&g[na..]) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let (r, ca) = self.dims(*a);
                let (start, len) = (*start, *len);
                self.accum(grads, *a, |da| {
                    for i in 0..r {
                        for k in 0..len {
                            da[i * ca + start + k] += g[i * len + k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * yv[k] * (1.0 - yv[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * gelu_deriv(xv[k]);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        let s = sigmoid(xv[k]);
                        da[k] += g[k] * s * (1.0 + xv[k] * (1.0 - s));
                    }
                });
            }
            Op::Ln(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Exp(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * xv[k].exp();
                    }
                });
            }
            Op::Abs(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * xv[k].signum() * if xv[k] == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::Softplus(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * sigmoid(xv[k]);
                    }
                });
            }
            Op::Recip(a) => {
                let xv = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for k in 0..g.len() {
                        da[k] -= g[k] / (xv[k] * xv[k]);
                    }
                });
            }
            Op::RowSum(a) => {
                let (_, ca) = self.dims(*a);
                self.accum(grads, *a, |da| {
                    for (r, row) in da.chunks_mut(ca).enumerate() {
                        for x in row {
                            *x += g[r];
                        }
                    }
                });
            }
            Op::SumAll(a) => self.accum(grads, *a, |da| {
                for x in da {
                    *x += g[0];
                }
            }),
            Op::LogSumExp(a) => {
                let xv = &self.nodes[a.0].value;
                let y = node.value[0];
                self.accum(grads, *a, |da| {
                    for k in 0..da.len() {
                        da[k] += g[0] * (xv[k] - y).exp();
                    }
                });
            }
            Op::HeadDot { a, b, heads } => {
                let (p, d) = self.dims(*a);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let heads = *heads;
                self.accum(grads, *a, |da| {
                    for i in 0..p {
                        for h in 0..heads {
                            let gs = g[i * heads + h] * scale;
                            let off = i * d + h * dh;
                            for j in 0..dh {
                                da[off + j] += gs * bv[off + j];
                            }
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..p {
                        for h in 0..heads {
                            let gs = g[i * heads + h] * scale;
                            let off = i * d + h * dh;
                            for j in 0..dh {
                                db[off + j] += gs * av[off + j];
                            }
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, segs } => {
                let yv = &node.value;
                let h = cols;
                self.accum(grads, *x, |dx| {
                    for &(start, len) in segs {
                        if len == 0 {
                            continue;
                        }
                        for col in 0..h {
                            let mut dot = 0.0;
                            for i in start..start + len {
                                dot += g[i * h + col] * yv[i * h + col];
                            }
                            for i in start..start + len {
                                dx[i * h + col] +=
                                    yv[i * h + col] * (g[i * h + col] - dot);
                            }
                        }
                    }
                });
            }
            Op::SegmentWeightedSum {
                alpha,
                values,
                segs,
                heads,
            } => {
                let (_, d) = self.dims(*values);
                let dh = d / heads;
                let av = &self.nodes[alpha.0].value;
                let vv = &self.nodes[values.0].value;
                let heads = *heads;
                self.accum(grads, *alpha, |da| {
                    for (q, &(start, len)) in segs.iter().enumerate() {
                        for i in start..start + len {
                            for h in 0..heads {
                                let mut s = 0.0;
                                for j in 0..dh {
                                    s += g[q * d + h * dh + j] * vv[i * d + h * dh + j];
                                }
                                da[i * heads + h] += s;
                            }
                        }
                    }
                });
                self.accum(grads, *values, |dv| {
                    for (q, &(start, len)) in segs.iter().enumerate() {
                        for i in start..start + len {
                            for h in 0..heads {
                                let a = av[i * heads + h];
                                for j in 0..dh {
                                    dv[i * d + h * dh + j] += a * g[q * d + h * dh + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentSum { x, segs } => {
                let (_, c) = self.dims(*x);
                self.accum(grads, *x, |dx| {
                    for (q, &(start, len)) in segs.iter().enumerate() {
                        for i in start..start + len {
                            for j in 0..c {
                                dx[i * c + j] += g[q * c + j];
                            }
                        }
                    }
                });
            }
            Op::SegmentMean { x, segs } => {
                let (_, c) = self.dims(*x);
                self.accum(grads, *x, |dx| {
                    for (q, &(start, len)) in segs.iter().enumerate() {
                        if len == 0 {
                            continue;
                        }
                        let inv = 1.0 / len as f64;
                        for i in start..start + len {
                            for j in 0..c {
                                dx[i * c + j] += g[q * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::CumsumPairs(a) => {
                let (r, c) = self.dims(*a);
                self.accum(grads, *a, |da| {
                    // d in[t] = sum_{s >= t} g[s] (suffix sums per pair lane)
                    for i in 0..r {
                        let row = &g[i * c..(i + 1) * c];
                        let drow = &mut da[i * c..(i + 1) * c];
                        let mut sx = 0.0;
                        let mut sy = 0.0;
                        for t in (0..c / 2).rev() {
                            sx += row[2 * t];
                            sy += row[2 * t + 1];
                            drow[2 * t] += sx;
                            drow[2 * t + 1] += sy;
                        }
                    }
                });
            }
            Op::RotatePairs { x, rot } => {
                let (r, c) = self.dims(*x);
                self.accum(grads, *x, |dx| {
                    for i in 0..r {
                        let [cs, sn] = rot[i];
                        for t in 0..c / 2 {
                            let gx = g[i * c + 2 * t];
                            let gy = g[i * c + 2 * t + 1];
                            dx[i * c + 2 * t] += cs * gx + sn * gy;
                            dx[i * c + 2 * t + 1] += -sn * gx + cs * gy;
                        }
                    }
                });
            }
            Op::AddPairConst(x) => self.accum(grads, *x, |dx| {
                for (a, b) in dx.iter_mut().zip(g) {
                    *a += b;
                }
            }),
            Op::Dropout { x, mask } => self.accum(grads, *x, |dx| {
                for k in 0..g.len() {
                    dx[k] += g[k] * mask[k];
                }
            }),
            Op::Detach => {}
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
