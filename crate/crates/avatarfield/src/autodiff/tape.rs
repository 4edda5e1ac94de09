//! Reverse-mode differentiation tape over batched matrix values.
//!
//! Nodes hold dense (rows x cols) buffers with columns as the batch
//! dimension. Ops are evaluated eagerly at recording time; `backward` walks
//! the node list once in reverse and accumulates leaf gradients into a flat
//! vector aligned with the [`ParamStore`] layout. Nodes are appended in
//! topological order by construction.

use std::sync::Arc;

use crate::autodiff::buf::Buf;
use crate::autodiff::kernels;
use crate::autodiff::params::{ParamStore, Segment};
use crate::error::{AvatarError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Neg,
    Square,
    Sin,
    Cos,
    Signum,
    Recip,
    /// min(x, 1); upper clamp used after shading modulation.
    ClampMax1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Hash-grid encoding configuration (normalization box included so the op
/// can consume world-space points directly).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashGridCfg {
    pub levels: usize,
    pub table_size: usize,
    pub feats: usize,
    pub base_res: usize,
    pub growth: f64,
    pub box_min: [f64; 3],
    pub box_ext: [f64; 3],
}

impl HashGridCfg {
    pub fn out_dim(&self) -> usize {
        self.levels * self.feats
    }

    pub fn level_res(&self, level: usize) -> usize {
        ((self.base_res as f64) * self.growth.powi(level as i32)).floor() as usize
    }

    pub fn table_len(&self) -> usize {
        self.levels * self.table_size * self.feats
    }
}

const HASH_P1: u64 = 0x9E37_79B1_85EB_CA87;
const HASH_P2: u64 = 0xC2B2_AE3D_27D4_EB4F;
const HASH_P3: u64 = 0x1656_67B1_9E37_79F9;
const HASH_P4: u64 = 0x27D4_EB2F_1656_67C5;

#[inline]
fn corner_hash(q: [i64; 3], level: usize, table_size: usize) -> usize {
    let h = (q[0] as u64).wrapping_mul(HASH_P1)
        ^ (q[1] as u64).wrapping_mul(HASH_P2)
        ^ (q[2] as u64).wrapping_mul(HASH_P3)
        ^ (level as u64).wrapping_mul(HASH_P4);
    (h % table_size as u64) as usize
}

/// Source of a 2D map for bilinear sampling: either a tape node (trainable
/// feature map) or fixed data (input image).
#[derive(Debug, Clone)]
pub enum MapSrc {
    Node(NodeId),
    Fixed(Arc<Buf>),
}

/// One compositing sample along a ray.
#[derive(Debug, Clone, Copy)]
pub struct CompSample {
    /// Column into the density node.
    pub sigma_col: usize,
    /// Column into the color node, or None for colorless samples.
    pub color_col: Option<usize>,
    /// Distance to the next sample (last sample: far - t).
    pub delta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RayComp {
    pub samples: Vec<CompSample>,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// View of the parameter vector as a column (len x 1).
    ParamSlice { seg: Segment },
    Linear {
        w: Segment,
        b: Option<Segment>,
        x: NodeId,
        m: usize,
        k: usize,
    },
    Unary { kind: UnaryKind, x: NodeId },
    Binary { kind: BinaryKind, a: NodeId, b: NodeId },
    AddConst { c: f64, x: NodeId },
    MulConst { c: f64, x: NodeId },
    /// y[i][j] = a[i][j] * s[0][j]
    BroadcastMulRow { a: NodeId, s: NodeId },
    /// y[i][j] = a[i][j] * s[0][0]
    BroadcastMulScalar { a: NodeId, s: NodeId },
    Reshape { x: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    GatherCols { x: NodeId, idx: Arc<Vec<usize>> },
    /// Places column j of x at column idx[j] of a wider zero buffer.
    ScatterCols {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    SumAll { x: NodeId },
    /// y[0][j] = sum_i x[i][j]
    SumOverRows { x: NodeId },
    /// y[i][0] = sum_j x[i][j]
    SumOverCols { x: NodeId },
    SoftmaxCols {
        x: NodeId,
        mask: Option<Arc<Vec<f64>>>,
    },
    MinPerSegment {
        x: NodeId,
        segs: Arc<Vec<(usize, usize)>>,
        argmin: Vec<usize>,
    },
    Fourier { x: NodeId, bands: usize },
    HashEncode {
        x: NodeId,
        table: Segment,
        cfg: Arc<HashGridCfg>,
        with_jvp: bool,
    },
    BilinearSample {
        map: MapSrc,
        h: usize,
        w: usize,
        uv: NodeId,
    },
    Conv2d {
        w: Segment,
        b: Segment,
        x: NodeId,
        cin: usize,
        cout: usize,
        h: usize,
        wdt: usize,
        stride: usize,
    },
    Conv2dFixed {
        kern: Arc<Vec<f64>>,
        x: NodeId,
        cin: usize,
        cout: usize,
        h: usize,
        wdt: usize,
        stride: usize,
    },
    /// y_j = sum_i w[i][j] * (R_i x_j + t_i), rigid transforms as 3x4 rows.
    BlendPoints {
        mats: Arc<Vec<[f64; 12]>>,
        w: NodeId,
        x: NodeId,
    },
    /// y_j = sum_i w[i][j] * R_i v_j (rotation-only blend).
    BlendVecs {
        rots: Arc<Vec<[f64; 9]>>,
        w: NodeId,
        v: NodeId,
    },
    NormalizeCols { x: NodeId, norms: Vec<f64> },
    Composite {
        sigma: NodeId,
        color: Option<NodeId>,
        rays: Arc<Vec<RayComp>>,
    },
}

struct Node {
    op: Op,
    val: Buf,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &Buf {
        &self.nodes[id].val
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].val.len(), 1, "node is not scalar");
        self.nodes[id].val.data[0]
    }

    fn push(&mut self, op: Op, val: Buf) -> NodeId {
        self.nodes.push(Node { op, val });
        self.nodes.len() - 1
    }

    // ---- constructors -------------------------------------------------

    pub fn constant(&mut self, val: Buf) -> NodeId {
        self.push(Op::Const, val)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Buf::scalar(v))
    }

    /// Parameter segment as a (len x 1) column with gradient flow.
    pub fn param_slice(&mut self, seg: Segment) -> NodeId {
        let val = Buf::col(self.params.get(seg));
        self.push(Op::ParamSlice { seg }, val)
    }

    /// y = W x + b. W is (m x k) stored row-major in `w`.
    pub fn linear(&mut self, w: Segment, b: Option<Segment>, x: NodeId, m: usize) -> NodeId {
        let xb = &self.nodes[x].val;
        let (k, n) = (xb.rows, xb.cols);
        assert_eq!(w.len, m * k, "weight segment does not match (m x k)");
        let mut y = Buf::zeros(m, n);
        kernels::matmul_acc(&mut y.data, self.params.get(w), &xb.data, m, k, n);
        if let Some(bseg) = b {
            assert_eq!(bseg.len, m);
            kernels::add_bias(&mut y.data, self.params.get(bseg), m, n);
        }
        self.push(Op::Linear { w, b, x, m, k }, y)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let xb = &self.nodes[x].val;
        let mut y = Buf::zeros(xb.rows, xb.cols);
        for (o, &v) in y.data.iter_mut().zip(xb.data.iter()) {
            *o = match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Ln => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Neg => -v,
                UnaryKind::Square => v * v,
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Signum => {
                    if v == 0.0 {
                        0.0
                    } else {
                        v.signum()
                    }
                }
                UnaryKind::Recip => 1.0 / v,
                UnaryKind::ClampMax1 => v.min(1.0),
            };
        }
        self.push(Op::Unary { kind, x }, y)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> NodeId {
        let (ab, bb) = (&self.nodes[a].val, &self.nodes[b].val);
        assert!(ab.same_shape(bb), "binary op shape mismatch");
        let mut y = Buf::zeros(ab.rows, ab.cols);
        for ((o, &x), &z) in y.data.iter_mut().zip(ab.data.iter()).zip(bb.data.iter()) {
            *o = match kind {
                BinaryKind::Add => x + z,
                BinaryKind::Sub => x - z,
                BinaryKind::Mul => x * z,
                BinaryKind::Div => x / z,
            };
        }
        self.push(Op::Binary { kind, a, b }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let xb = &self.nodes[x].val;
        let y = Buf::from_vec(xb.rows, xb.cols, xb.data.iter().map(|v| v + c).collect());
        self.push(Op::AddConst { c, x }, y)
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let xb = &self.nodes[x].val;
        let y = Buf::from_vec(xb.rows, xb.cols, xb.data.iter().map(|v| v * c).collect());
        self.push(Op::MulConst { c, x }, y)
    }

    pub fn broadcast_mul_row(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (ab, sb) = (&self.nodes[a].val, &self.nodes[s].val);
        assert_eq!(sb.rows, 1);
        assert_eq!(sb.cols, ab.cols, "row broadcast width mismatch");
        let mut y = Buf::zeros(ab.rows, ab.cols);
        for i in 0..ab.rows {
            for j in 0..ab.cols {
                y.set(i, j, ab.at(i, j) * sb.data[j]);
            }
        }
        self.push(Op::BroadcastMulRow { a, s }, y)
    }

    pub fn broadcast_mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (ab, sb) = (&self.nodes[a].val, &self.nodes[s].val);
        assert_eq!(sb.len(), 1);
        let sv = sb.data[0];
        let y = Buf::from_vec(ab.rows, ab.cols, ab.data.iter().map(|v| v * sv).collect());
        self.push(Op::BroadcastMulScalar { a, s }, y)
    }

    /// Reinterprets a buffer with new dimensions (row-major order preserved).
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xb = &self.nodes[x].val;
        assert_eq!(xb.len(), rows * cols, "reshape element count mismatch");
        let y = Buf::from_vec(rows, cols, xb.data.clone());
        self.push(Op::Reshape { x }, y)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].val.cols;
        let rows: usize = parts.iter().map(|&p| self.nodes[p].val.rows).sum();
        let mut y = Buf::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let pb = &self.nodes[p].val;
            assert_eq!(pb.cols, cols, "concat_rows width mismatch");
            y.data[r0 * cols..(r0 + pb.rows) * cols].copy_from_slice(&pb.data);
            r0 += pb.rows;
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            y,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].val.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].val.cols).sum();
        let mut y = Buf::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pb = &self.nodes[p].val;
            assert_eq!(pb.rows, rows, "concat_cols height mismatch");
            for i in 0..rows {
                y.row_mut(i)[c0..c0 + pb.cols].copy_from_slice(pb.row(i));
            }
            c0 += pb.cols;
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            y,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> NodeId {
        let xb = &self.nodes[x].val;
        assert!(start + rows <= xb.rows);
        let cols = xb.cols;
        let y = Buf::from_vec(
            rows,
            cols,
            xb.data[start * cols..(start + rows) * cols].to_vec(),
        );
        self.push(Op::SliceRows { x, start }, y)
    }

    pub fn gather_cols(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let xb = &self.nodes[x].val;
        let mut y = Buf::zeros(xb.rows, idx.len());
        for (j, &src) in idx.iter().enumerate() {
            for i in 0..xb.rows {
                y.set(i, j, xb.at(i, src));
            }
        }
        self.push(Op::GatherCols { x, idx }, y)
    }

    /// Inverse of [`Tape::gather_cols`]: column j of x lands at column
    /// idx[j] of an (rows x out_cols) zero buffer. Indices must be unique.
    pub fn scatter_cols(&mut self, x: NodeId, idx: Arc<Vec<usize>>, out_cols: usize) -> NodeId {
        let xb = &self.nodes[x].val;
        assert_eq!(xb.cols, idx.len());
        let mut y = Buf::zeros(xb.rows, out_cols);
        for (j, &dst) in idx.iter().enumerate() {
            for i in 0..xb.rows {
                y.set(i, dst, xb.at(i, j));
            }
        }
        self.push(Op::ScatterCols { x, idx }, y)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].val.data.iter().sum();
        self.push(Op::SumAll { x }, Buf::scalar(s))
    }

    pub fn sum_over_cols(&mut self, x: NodeId) -> NodeId {
        let xb = &self.nodes[x].val;
        let mut y = Buf::zeros(xb.rows, 1);
        for i in 0..xb.rows {
            y.data[i] = xb.row(i).iter().sum();
        }
        self.push(Op::SumOverCols { x }, y)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].val.len();
        let s = self.sum_all(x);
        self.mul_const(s, 1.0 / n as f64)
    }

    pub fn sum_over_rows(&mut self, x: NodeId) -> NodeId {
        let xb = &self.nodes[x].val;
        let mut y = Buf::zeros(1, xb.cols);
        for i in 0..xb.rows {
            for j in 0..xb.cols {
                y.data[j] += xb.at(i, j);
            }
        }
        self.push(Op::SumOverRows { x }, y)
    }

    /// Column-wise softmax over rows. Masked lanes (mask 0) output exactly 0
    /// and receive no gradient.
    pub fn softmax_cols(&mut self, x: NodeId, mask: Option<Arc<Vec<f64>>>) -> NodeId {
        let xb = &self.nodes[x].val;
        if let Some(m) = &mask {
            assert_eq!(m.len(), xb.len(), "softmax mask shape mismatch");
        }
        let (r, n) = (xb.rows, xb.cols);
        let mut y = Buf::zeros(r, n);
        for j in 0..n {
            let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i * n + j] != 0.0);
            let mut mx = f64::NEG_INFINITY;
            for i in 0..r {
                if valid(i) {
                    mx = mx.max(xb.at(i, j));
                }
            }
            assert!(mx.is_finite(), "softmax column {j} has no valid lane");
            let mut z = 0.0;
            for i in 0..r {
                if valid(i) {
                    let e = (xb.at(i, j) - mx).exp();
                    y.set(i, j, e);
                    z += e;
                }
            }
            for i in 0..r {
                if valid(i) {
                    y.set(i, j, y.at(i, j) / z);
                }
            }
        }
        self.push(Op::SoftmaxCols { x, mask }, y)
    }

    /// Per-segment minimum of a (1 x N) row. Gradient routes to the argmin.
    pub fn min_per_segment(&mut self, x: NodeId, segs: Arc<Vec<(usize, usize)>>) -> NodeId {
        let xb = &self.nodes[x].val;
        assert_eq!(xb.rows, 1);
        let mut y = Buf::zeros(1, segs.len());
        let mut argmin = vec![0usize; segs.len()];
        for (s, &(start, len)) in segs.iter().enumerate() {
            assert!(len > 0 && start + len <= xb.cols);
            let mut best = f64::INFINITY;
            let mut bi = start;
            for j in start..start + len {
                if xb.data[j] < best {
                    best = xb.data[j];
                    bi = j;
                }
            }
            y.data[s] = best;
            argmin[s] = bi;
        }
        self.push(Op::MinPerSegment { x, segs, argmin }, y)
    }

    /// Fourier features: for each input row c and band l, rows
    /// [sin(2^l pi x_c); cos(2^l pi x_c)] in that order.
    pub fn fourier(&mut self, x: NodeId, bands: usize) -> NodeId {
        let xb = &self.nodes[x].val;
        let (d, n) = (xb.rows, xb.cols);
        let mut y = Buf::zeros(2 * bands * d, n);
        for c in 0..d {
            for l in 0..bands {
                let freq = (1u64 << l) as f64 * std::f64::consts::PI;
                let rs = (c * bands + l) * 2;
                for j in 0..n {
                    let arg = freq * xb.at(c, j);
                    y.set(rs, j, arg.sin());
                    y.set(rs + 1, j, arg.cos());
                }
            }
        }
        self.push(Op::Fourier { x, bands }, y)
    }

    /// Multiresolution hash-grid encoding of world-space points (3 x N).
    /// Output rows: `levels*feats` features; with `with_jvp`, three further
    /// blocks of the same height holding d(feat)/dx, d(feat)/dy, d(feat)/dz.
    pub fn hash_encode(
        &mut self,
        x: NodeId,
        table: Segment,
        cfg: Arc<HashGridCfg>,
        with_jvp: bool,
    ) -> NodeId {
        assert_eq!(table.len, cfg.table_len(), "hash table segment length");
        let xb = &self.nodes[x].val;
        assert_eq!(xb.rows, 3);
        let n = xb.cols;
        let fdim = cfg.out_dim();
        let rows = if with_jvp { 4 * fdim } else { fdim };
        let mut y = Buf::zeros(rows, n);
        let tbl = self.params.get(table);
        hash_forward(&mut y, tbl, xb, &cfg, with_jvp);
        self.push(
            Op::HashEncode {
                x,
                table,
                cfg,
                with_jvp,
            },
            y,
        )
    }

    /// Bilinear sample of a (C x h*w) map at continuous pixel coords
    /// uv (2 x N); uv is clamped to the map rectangle.
    pub fn bilinear_sample(&mut self, map: MapSrc, h: usize, w: usize, uv: NodeId) -> NodeId {
        let c = match &map {
            MapSrc::Node(id) => {
                let mb = &self.nodes[*id].val;
                assert_eq!(mb.cols, h * w, "map node dims mismatch");
                mb.rows
            }
            MapSrc::Fixed(b) => {
                assert_eq!(b.cols, h * w, "fixed map dims mismatch");
                b.rows
            }
        };
        let uvb = &self.nodes[uv].val;
        assert_eq!(uvb.rows, 2);
        let n = uvb.cols;
        let mut y = Buf::zeros(c, n);
        {
            let mapbuf: &Buf = match &map {
                MapSrc::Node(id) => &self.nodes[*id].val,
                MapSrc::Fixed(b) => b,
            };
            for j in 0..n {
                let (ws, idxs) = bilinear_taps(uvb.at(0, j), uvb.at(1, j), w, h);
                for ch in 0..c {
                    let mrow = mapbuf.row(ch);
                    let mut acc = 0.0;
                    for t in 0..4 {
                        acc += ws[t] * mrow[idxs[t]];
                    }
                    y.set(ch, j, acc);
                }
            }
        }
        self.push(Op::BilinearSample { map, h, w, uv }, y)
    }

    /// 3x3 convolution, padding 1. Input (cin x h*w), output (cout x ho*wo).
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        w: Segment,
        b: Segment,
        x: NodeId,
        cin: usize,
        cout: usize,
        h: usize,
        wdt: usize,
        stride: usize,
    ) -> NodeId {
        assert_eq!(w.len, cout * cin * 9);
        assert_eq!(b.len, cout);
        let xb = &self.nodes[x].val;
        assert_eq!(xb.rows, cin);
        assert_eq!(xb.cols, h * wdt);
        let (ho, wo) = kernels::conv_out_dim(h, wdt, stride);
        let mut y = Buf::zeros(cout, ho * wo);
        kernels::conv3x3(
            &mut y.data,
            self.params.get(w),
            Some(self.params.get(b)),
            &xb.data,
            cin,
            cout,
            h,
            wdt,
            stride,
        );
        self.push(
            Op::Conv2d {
                w,
                b,
                x,
                cin,
                cout,
                h,
                wdt,
                stride,
            },
            y,
        )
    }

    /// Convolution with fixed (non-learnable) kernels; gradient flows to the
    /// input only. Used by the frozen perceptual proxy.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_fixed(
        &mut self,
        kern: Arc<Vec<f64>>,
        x: NodeId,
        cin: usize,
        cout: usize,
        h: usize,
        wdt: usize,
        stride: usize,
    ) -> NodeId {
        assert_eq!(kern.len(), cout * cin * 9);
        let xb = &self.nodes[x].val;
        assert_eq!(xb.rows, cin);
        assert_eq!(xb.cols, h * wdt);
        let (ho, wo) = kernels::conv_out_dim(h, wdt, stride);
        let mut y = Buf::zeros(cout, ho * wo);
        kernels::conv3x3(&mut y.data, &kern, None, &xb.data, cin, cout, h, wdt, stride);
        self.push(
            Op::Conv2dFixed {
                kern,
                x,
                cin,
                cout,
                h,
                wdt,
                stride,
            },
            y,
        )
    }

    /// Weighted rigid-transform blend of points: y_j = sum_i w_ij (R_i x_j + t_i).
    /// `mats` are 3x4 row-major rigid transforms, one per blend channel.
    pub fn blend_points(&mut self, mats: Arc<Vec<[f64; 12]>>, w: NodeId, x: NodeId) -> NodeId {
        let (wb, xb) = (&self.nodes[w].val, &self.nodes[x].val);
        assert_eq!(wb.rows, mats.len());
        assert_eq!(xb.rows, 3);
        assert_eq!(wb.cols, xb.cols);
        let n = xb.cols;
        let mut y = Buf::zeros(3, n);
        for j in 0..n {
            let p = [xb.at(0, j), xb.at(1, j), xb.at(2, j)];
            let mut acc = [0.0; 3];
            for (i, m) in mats.iter().enumerate() {
                let wij = wb.at(i, j);
                if wij != 0.0 {
                    for (r, a) in acc.iter_mut().enumerate() {
                        *a += wij
                            * (m[r * 4] * p[0] + m[r * 4 + 1] * p[1] + m[r * 4 + 2] * p[2]
                                + m[r * 4 + 3]);
                    }
                }
            }
            for (r, a) in acc.iter().enumerate() {
                y.set(r, j, *a);
            }
        }
        self.push(Op::BlendPoints { mats, w, x }, y)
    }

    /// Weighted rotation blend of vectors: y_j = sum_i w_ij R_i v_j.
    pub fn blend_vecs(&mut self, rots: Arc<Vec<[f64; 9]>>, w: NodeId, v: NodeId) -> NodeId {
        let (wb, vb) = (&self.nodes[w].val, &self.nodes[v].val);
        assert_eq!(wb.rows, rots.len());
        assert_eq!(vb.rows, 3);
        assert_eq!(wb.cols, vb.cols);
        let n = vb.cols;
        let mut y = Buf::zeros(3, n);
        for j in 0..n {
            let p = [vb.at(0, j), vb.at(1, j), vb.at(2, j)];
            let mut acc = [0.0; 3];
            for (i, m) in rots.iter().enumerate() {
                let wij = wb.at(i, j);
                if wij != 0.0 {
                    for (r, a) in acc.iter_mut().enumerate() {
                        *a += wij * (m[r * 3] * p[0] + m[r * 3 + 1] * p[1] + m[r * 3 + 2] * p[2]);
                    }
                }
            }
            for (r, a) in acc.iter().enumerate() {
                y.set(r, j, *a);
            }
        }
        self.push(Op::BlendVecs { rots, w, v }, y)
    }

    /// Column-wise normalization to unit vectors. Errors on a vanishing norm.
    pub fn normalize_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let xb = &self.nodes[x].val;
        assert_eq!(xb.rows, 3);
        let n = xb.cols;
        let mut norms = vec![0.0; n];
        let mut y = Buf::zeros(3, n);
        for j in 0..n {
            let v = [xb.at(0, j), xb.at(1, j), xb.at(2, j)];
            let nm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if nm < 1e-8 {
                return Err(AvatarError::DegenerateNormal { norm: nm });
            }
            norms[j] = nm;
            for r in 0..3 {
                y.set(r, j, v[r] / nm);
            }
        }
        Ok(self.push(Op::NormalizeCols { x, norms }, y))
    }

    /// Volume-rendering accumulation. Output (4 x R): rows 0..3 color, row 3
    /// accumulated mask. Samples without a color column contribute density
    /// only (their color is zero).
    pub fn composite(
        &mut self,
        sigma: NodeId,
        color: Option<NodeId>,
        rays: Arc<Vec<RayComp>>,
    ) -> NodeId {
        let sb = &self.nodes[sigma].val;
        assert_eq!(sb.rows, 1);
        let nrays = rays.len();
        let mut y = Buf::zeros(4, nrays);
        for (r, ray) in rays.iter().enumerate() {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut m = 0.0;
            for s in &ray.samples {
                let alpha = 1.0 - (-sb.data[s.sigma_col] * s.delta).exp();
                let wgt = t * alpha;
                if let (Some(cc), Some(cn)) = (s.color_col, color) {
                    let cb = &self.nodes[cn].val;
                    for (k, cv) in c.iter_mut().enumerate() {
                        *cv += wgt * cb.at(k, cc);
                    }
                }
                m += wgt;
                t *= 1.0 - alpha;
            }
            for (k, cv) in c.iter().enumerate() {
                y.set(k, r, *cv);
            }
            y.set(3, r, m);
        }
        self.push(Op::Composite { sigma, color, rays }, y)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss node. Returns dLoss/dTheta for the
    /// full parameter vector. Values are left untouched.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        let lb = &self.nodes[loss].val;
        if lb.rows != 1 || lb.cols != 1 {
            return Err(AvatarError::Contract(format!(
                "loss node must be scalar, got {}x{}",
                lb.rows, lb.cols
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Buf>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Buf::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(a) = adj[id].take() else { continue };
            self.backprop_node(id, &a, &mut adj, &mut grad);
        }
        Ok(grad)
    }

    fn accum(adj: &mut [Option<Buf>], id: NodeId, delta: Buf) {
        match &mut adj[id] {
            Some(b) => b.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: NodeId, a: &Buf, adj: &mut [Option<Buf>], grad: &mut [f64]) {
        match &self.nodes[id].op {
            Op::Const => {}
            Op::ParamSlice { seg } => {
                for (g, v) in grad[seg.offset..seg.offset + seg.len]
                    .iter_mut()
                    .zip(a.data.iter())
                {
                    *g += v;
                }
            }
            Op::Linear { w, b, x, m, k } => {
                let xb = &self.nodes[*x].val;
                let n = xb.cols;
                kernels::matmul_abt_acc(
                    &mut grad[w.offset..w.offset + w.len],
                    &a.data,
                    &xb.data,
                    *m,
                    *k,
                    n,
                );
                if let Some(bseg) = b {
                    for i in 0..*m {
                        grad[bseg.offset + i] += a.row(i).iter().sum::<f64>();
                    }
                }
                let mut dx = Buf::zeros(*k, n);
                kernels::matmul_atb_acc(&mut dx.data, self.params.get(*w), &a.data, *m, *k, n);
                Self::accum(adj, *x, dx);
            }
            Op::Unary { kind, x } => {
                let xb = &self.nodes[*x].val;
                let yb = &self.nodes[id].val;
                let mut dx = Buf::zeros(xb.rows, xb.cols);
                for i in 0..xb.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xb.data[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Softplus => sigmoid(xb.data[i]),
                        UnaryKind::Sigmoid => yb.data[i] * (1.0 - yb.data[i]),
                        UnaryKind::Tanh => 1.0 - yb.data[i] * yb.data[i],
                        UnaryKind::Exp => yb.data[i],
                        UnaryKind::Ln => 1.0 / xb.data[i],
                        UnaryKind::Sqrt => 0.5 / yb.data[i],
                        UnaryKind::Abs => {
                            if xb.data[i] == 0.0 {
                                0.0
                            } else {
                                xb.data[i].signum()
                            }
                        }
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Square => 2.0 * xb.data[i],
                        UnaryKind::Sin => xb.data[i].cos(),
                        UnaryKind::Cos => -xb.data[i].sin(),
                        UnaryKind::Signum => 0.0,
                        UnaryKind::Recip => -yb.data[i] * yb.data[i],
                        UnaryKind::ClampMax1 => {
                            if xb.data[i] < 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    dx.data[i] = d * a.data[i];
                }
                Self::accum(adj, *x, dx);
            }
            Op::Binary { kind, a: an, b: bn } => {
                let (ab, bb) = (&self.nodes[*an].val, &self.nodes[*bn].val);
                let mut da = Buf::zeros(ab.rows, ab.cols);
                let mut db = Buf::zeros(bb.rows, bb.cols);
                for i in 0..ab.len() {
                    match kind {
                        BinaryKind::Add => {
                            da.data[i] = a.data[i];
                            db.data[i] = a.data[i];
                        }
                        BinaryKind::Sub => {
                            da.data[i] = a.data[i];
                            db.data[i] = -a.data[i];
                        }
                        BinaryKind::Mul => {
                            da.data[i] = a.data[i] * bb.data[i];
                            db.data[i] = a.data[i] * ab.data[i];
                        }
                        BinaryKind::Div => {
                            da.data[i] = a.data[i] / bb.data[i];
                            db.data[i] = -a.data[i] * ab.data[i] / (bb.data[i] * bb.data[i]);
                        }
                    }
                }
                Self::accum(adj, *an, da);
                Self::accum(adj, *bn, db);
            }
            Op::Reshape { x } => {
                let xb = &self.nodes[*x].val;
                let dx = Buf::from_vec(xb.rows, xb.cols, a.data.clone());
                Self::accum(adj, *x, dx);
            }
            Op::AddConst { x, .. } => Self::accum(adj, *x, a.clone()),
            Op::MulConst { c, x } => {
                let mut dx = a.clone();
                for v in dx.data.iter_mut() {
                    *v *= c;
                }
                Self::accum(adj, *x, dx);
            }
            Op::BroadcastMulRow { a: an, s } => {
                let (ab, sb) = (&self.nodes[*an].val, &self.nodes[*s].val);
                let mut da = Buf::zeros(ab.rows, ab.cols);
                let mut ds = Buf::zeros(1, ab.cols);
                for i in 0..ab.rows {
                    for j in 0..ab.cols {
                        da.set(i, j, a.at(i, j) * sb.data[j]);
                        ds.data[j] += a.at(i, j) * ab.at(i, j);
                    }
                }
                Self::accum(adj, *an, da);
                Self::accum(adj, *s, ds);
            }
            Op::BroadcastMulScalar { a: an, s } => {
                let (ab, sb) = (&self.nodes[*an].val, &self.nodes[*s].val);
                let sv = sb.data[0];
                let mut da = Buf::zeros(ab.rows, ab.cols);
                let mut ds = 0.0;
                for i in 0..ab.len() {
                    da.data[i] = a.data[i] * sv;
                    ds += a.data[i] * ab.data[i];
                }
                Self::accum(adj, *an, da);
                Self::accum(adj, *s, Buf::scalar(ds));
            }
            Op::ConcatRows { parts } => {
                let cols = a.cols;
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.nodes[p].val.rows;
                    let dp = Buf::from_vec(
                        rows,
                        cols,
                        a.data[r0 * cols..(r0 + rows) * cols].to_vec(),
                    );
                    Self::accum(adj, p, dp);
                    r0 += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut c0 = 0;
                for &p in parts {
                    let pb = &self.nodes[p].val;
                    let mut dp = Buf::zeros(pb.rows, pb.cols);
                    for i in 0..pb.rows {
                        dp.row_mut(i).copy_from_slice(&a.row(i)[c0..c0 + pb.cols]);
                    }
                    Self::accum(adj, p, dp);
                    c0 += pb.cols;
                }
            }
            Op::SliceRows { x, start } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(xb.rows, xb.cols);
                dx.data[start * xb.cols..(start + a.rows) * xb.cols].copy_from_slice(&a.data);
                Self::accum(adj, *x, dx);
            }
            Op::GatherCols { x, idx } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(xb.rows, xb.cols);
                for (j, &src) in idx.iter().enumerate() {
                    for i in 0..xb.rows {
                        let v = dx.at(i, src) + a.at(i, j);
                        dx.set(i, src, v);
                    }
                }
                Self::accum(adj, *x, dx);
            }
            Op::ScatterCols { x, idx } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(xb.rows, xb.cols);
                for (j, &src) in idx.iter().enumerate() {
                    for i in 0..xb.rows {
                        dx.set(i, j, a.at(i, src));
                    }
                }
                Self::accum(adj, *x, dx);
            }
            Op::SumAll { x } => {
                let xb = &self.nodes[*x].val;
                let dx = Buf::from_vec(xb.rows, xb.cols, vec![a.data[0]; xb.len()]);
                Self::accum(adj, *x, dx);
            }
            Op::SumOverCols { x } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(xb.rows, xb.cols);
                for i in 0..xb.rows {
                    dx.row_mut(i).fill(a.data[i]);
                }
                Self::accum(adj, *x, dx);
            }
            Op::SumOverRows { x } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(xb.rows, xb.cols);
                for i in 0..xb.rows {
                    dx.row_mut(i).copy_from_slice(&a.data);
                }
                Self::accum(adj, *x, dx);
            }
            Op::SoftmaxCols { x, mask } => {
                let yb = &self.nodes[id].val;
                let (r, n) = (yb.rows, yb.cols);
                let mut dx = Buf::zeros(r, n);
                for j in 0..n {
                    let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i * n + j] != 0.0);
                    let mut dot = 0.0;
                    for i in 0..r {
                        if valid(i) {
                            dot += a.at(i, j) * yb.at(i, j);
                        }
                    }
                    for i in 0..r {
                        if valid(i) {
                            dx.set(i, j, yb.at(i, j) * (a.at(i, j) - dot));
                        }
                    }
                }
                Self::accum(adj, *x, dx);
            }
            Op::MinPerSegment { x, argmin, .. } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(1, xb.cols);
                for (s, &col) in argmin.iter().enumerate() {
                    dx.data[col] += a.data[s];
                }
                Self::accum(adj, *x, dx);
            }
            Op::Fourier { x, bands } => {
                let xb = &self.nodes[*x].val;
                let yb = &self.nodes[id].val;
                let (d, n) = (xb.rows, xb.cols);
                let mut dx = Buf::zeros(d, n);
                for c in 0..d {
                    for l in 0..*bands {
                        let freq = (1u64 << l) as f64 * std::f64::consts::PI;
                        let rs = (c * bands + l) * 2;
                        for j in 0..n {
                            let sin_v = yb.at(rs, j);
                            let cos_v = yb.at(rs + 1, j);
                            let dv = freq * (cos_v * a.at(rs, j) - sin_v * a.at(rs + 1, j));
                            let cur = dx.at(c, j) + dv;
                            dx.set(c, j, cur);
                        }
                    }
                }
                Self::accum(adj, *x, dx);
            }
            Op::HashEncode {
                x,
                table,
                cfg,
                with_jvp,
            } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(3, xb.cols);
                hash_backward(
                    a,
                    &mut grad[table.offset..table.offset + table.len],
                    &mut dx,
                    self.params.get(*table),
                    xb,
                    cfg,
                    *with_jvp,
                );
                Self::accum(adj, *x, dx);
            }
            Op::BilinearSample { map, h, w, uv } => {
                let uvb = &self.nodes[*uv].val;
                let n = uvb.cols;
                let mapbuf: &Buf = match map {
                    MapSrc::Node(idn) => &self.nodes[*idn].val,
                    MapSrc::Fixed(b) => b,
                };
                let c = mapbuf.rows;
                let mut duv = Buf::zeros(2, n);
                let mut dmap = match map {
                    MapSrc::Node(_) => Some(Buf::zeros(c, h * w)),
                    MapSrc::Fixed(_) => None,
                };
                for j in 0..n {
                    let u = uvb.at(0, j);
                    let v = uvb.at(1, j);
                    let (ws, idxs) = bilinear_taps(u, v, *w, *h);
                    let (dwdu, dwdv) = bilinear_tap_grads(u, v, *w, *h);
                    for ch in 0..c {
                        let av = a.at(ch, j);
                        if av == 0.0 {
                            continue;
                        }
                        let mrow = mapbuf.row(ch);
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for t in 0..4 {
                            du += dwdu[t] * mrow[idxs[t]];
                            dv += dwdv[t] * mrow[idxs[t]];
                            if let Some(dm) = &mut dmap {
                                dm.row_mut(ch)[idxs[t]] += av * ws[t];
                            }
                        }
                        duv.set(0, j, duv.at(0, j) + av * du);
                        duv.set(1, j, duv.at(1, j) + av * dv);
                    }
                }
                Self::accum(adj, *uv, duv);
                if let (Some(dm), MapSrc::Node(idn)) = (dmap, map) {
                    Self::accum(adj, *idn, dm);
                }
            }
            Op::Conv2d {
                w,
                b,
                x,
                cin,
                cout,
                h,
                wdt,
                stride,
            } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(*cin, h * wdt);
                // Split-borrow the two gradient regions.
                let (wslice, bslice) = (*w, *b);
                let mut dk = vec![0.0; wslice.len];
                let mut db = vec![0.0; bslice.len];
                kernels::conv3x3_backward(
                    Some(&mut dk),
                    Some(&mut db),
                    Some(&mut dx.data),
                    &a.data,
                    self.params.get(*w),
                    &xb.data,
                    *cin,
                    *cout,
                    *h,
                    *wdt,
                    *stride,
                );
                for (g, v) in grad[wslice.offset..wslice.offset + wslice.len]
                    .iter_mut()
                    .zip(dk)
                {
                    *g += v;
                }
                for (g, v) in grad[bslice.offset..bslice.offset + bslice.len]
                    .iter_mut()
                    .zip(db)
                {
                    *g += v;
                }
                Self::accum(adj, *x, dx);
            }
            Op::Conv2dFixed {
                kern,
                x,
                cin,
                cout,
                h,
                wdt,
                stride,
            } => {
                let xb = &self.nodes[*x].val;
                let mut dx = Buf::zeros(*cin, h * wdt);
                kernels::conv3x3_backward(
                    None,
                    None,
                    Some(&mut dx.data),
                    &a.data,
                    kern,
                    &xb.data,
                    *cin,
                    *cout,
                    *h,
                    *wdt,
                    *stride,
                );
                Self::accum(adj, *x, dx);
            }
            Op::BlendPoints { mats, w, x } => {
                let (wb, xb) = (&self.nodes[*w].val, &self.nodes[*x].val);
                let n = xb.cols;
                let mut dw = Buf::zeros(wb.rows, n);
                let mut dx = Buf::zeros(3, n);
                for j in 0..n {
                    let p = [xb.at(0, j), xb.at(1, j), xb.at(2, j)];
                    let av = [a.at(0, j), a.at(1, j), a.at(2, j)];
                    for (i, m) in mats.iter().enumerate() {
                        let mut tp = [0.0; 3];
                        for (r, t) in tp.iter_mut().enumerate() {
                            *t = m[r * 4] * p[0] + m[r * 4 + 1] * p[1] + m[r * 4 + 2] * p[2]
                                + m[r * 4 + 3];
                        }
                        dw.set(i, j, tp[0] * av[0] + tp[1] * av[1] + tp[2] * av[2]);
                        let wij = wb.at(i, j);
                        if wij != 0.0 {
                            for r in 0..3 {
                                for cx in 0..3 {
                                    let cur = dx.at(cx, j) + wij * m[r * 4 + cx] * av[r];
                                    dx.set(cx, j, cur);
                                }
                            }
                        }
                    }
                }
                Self::accum(adj, *w, dw);
                Self::accum(adj, *x, dx);
            }
            Op::BlendVecs { rots, w, v } => {
                let (wb, vb) = (&self.nodes[*w].val, &self.nodes[*v].val);
                let n = vb.cols;
                let mut dw = Buf::zeros(wb.rows, n);
                let mut dv = Buf::zeros(3, n);
                for j in 0..n {
                    let p = [vb.at(0, j), vb.at(1, j), vb.at(2, j)];
                    let av = [a.at(0, j), a.at(1, j), a.at(2, j)];
                    for (i, m) in rots.iter().enumerate() {
                        let mut tp = [0.0; 3];
                        for (r, t) in tp.iter_mut().enumerate() {
                            *t = m[r * 3] * p[0] + m[r * 3 + 1] * p[1] + m[r * 3 + 2] * p[2];
                        }
                        dw.set(i, j, tp[0] * av[0] + tp[1] * av[1] + tp[2] * av[2]);
                        let wij = wb.at(i, j);
                        if wij != 0.0 {
                            for r in 0..3 {
                                for cx in 0..3 {
                                    let cur = dv.at(cx, j) + wij * m[r * 3 + cx] * av[r];
                                    dv.set(cx, j, cur);
                                }
                            }
                        }
                    }
                }
                Self::accum(adj, *w, dw);
                Self::accum(adj, *v, dv);
            }
            Op::NormalizeCols { x, norms } => {
                let yb = &self.nodes[id].val;
                let n = yb.cols;
                let mut dx = Buf::zeros(3, n);
                for j in 0..n {
                    let y = [yb.at(0, j), yb.at(1, j), yb.at(2, j)];
                    let av = [a.at(0, j), a.at(1, j), a.at(2, j)];
                    let dot = y[0] * av[0] + y[1] * av[1] + y[2] * av[2];
                    for r in 0..3 {
                        dx.set(r, j, (av[r] - y[r] * dot) / norms[j]);
                    }
                }
                Self::accum(adj, *x, dx);
            }
            Op::Composite { sigma, color, rays } => {
                let sb = &self.nodes[*sigma].val;
                let mut dsig = Buf::zeros(1, sb.cols);
                let mut dcol = color.map(|cn| {
                    let cb = &self.nodes[cn].val;
                    Buf::zeros(3, cb.cols)
                });
                for (r, ray) in rays.iter().enumerate() {
                    let adj_c = [a.at(0, r), a.at(1, r), a.at(2, r)];
                    let adj_m = a.at(3, r);
                    let k = ray.samples.len();
                    // Forward replay for alpha/transmittance/weight.
                    let mut alphas = vec![0.0; k];
                    let mut trans = vec![0.0; k];
                    let mut t = 1.0;
                    for (i, s) in ray.samples.iter().enumerate() {
                        alphas[i] = 1.0 - (-sb.data[s.sigma_col] * s.delta).exp();
                        trans[i] = t;
                        t *= 1.0 - alphas[i];
                    }
                    // u_i = adj_m + c_i . adj_c (c_i = 0 for colorless samples)
                    let mut u = vec![0.0; k];
                    for (i, s) in ray.samples.iter().enumerate() {
                        let mut ui = adj_m;
                        if let (Some(cc), Some(cn)) = (s.color_col, *color) {
                            let cb = &self.nodes[cn].val;
                            for (r3, ac) in adj_c.iter().enumerate() {
                                ui += cb.at(r3, cc) * ac;
                            }
                        }
                        u[i] = ui;
                    }
                    // suffix[i] = sum_{l > i} w_l u_l
                    let mut suffix = vec![0.0; k + 1];
                    for i in (0..k).rev() {
                        suffix[i] = suffix[i + 1] + trans[i] * alphas[i] * u[i];
                    }
                    for (i, s) in ray.samples.iter().enumerate() {
                        let d = s.delta
                            * ((1.0 - alphas[i]) * trans[i] * u[i] - suffix[i + 1]);
                        dsig.data[s.sigma_col] += d;
                        if let (Some(cc), Some(dc)) = (s.color_col, dcol.as_mut()) {
                            let wgt = trans[i] * alphas[i];
                            for (r3, ac) in adj_c.iter().enumerate() {
                                let cur = dc.at(r3, cc) + wgt * ac;
                                dc.set(r3, cc, cur);
                            }
                        }
                    }
                }
                Self::accum(adj, *sigma, dsig);
                if let (Some(dc), Some(cn)) = (dcol, *color) {
                    Self::accum(adj, cn, dc);
                }
            }
        }
    }

    /// Smallest distance of any recorded value to a point of non-smoothness
    /// (relu/abs/clamp kinks, min-reduction ties, interpolation cell edges).
    /// Finite-difference checks reject evaluation points with small margins.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary { kind, x } => match kind {
                    UnaryKind::Relu | UnaryKind::Abs | UnaryKind::Signum => {
                        for &v in &self.nodes[*x].val.data {
                            margin = margin.min(v.abs());
                        }
                    }
                    UnaryKind::ClampMax1 => {
                        for &v in &self.nodes[*x].val.data {
                            margin = margin.min((v - 1.0).abs());
                        }
                    }
                    _ => {}
                },
                Op::MinPerSegment { x, segs, argmin } => {
                    let xb = &self.nodes[*x].val;
                    for (s, &(start, len)) in segs.iter().enumerate() {
                        let best = xb.data[argmin[s]];
                        for j in start..start + len {
                            if j != argmin[s] {
                                margin = margin.min((xb.data[j] - best).abs());
                            }
                        }
                    }
                }
                Op::HashEncode { x, cfg, .. } => {
                    let xb = &self.nodes[*x].val;
                    for l in 0..cfg.levels {
                        let res = cfg.level_res(l) as f64;
                        for j in 0..xb.cols {
                            for axis in 0..3 {
                                let u = (xb.at(axis, j) - cfg.box_min[axis]) / cfg.box_ext[axis];
                                // Distance to the clamp boundary and to the
                                // nearest interior cell face, in input units.
                                let du = u.min(1.0 - u).abs();
                                margin = margin.min(du * cfg.box_ext[axis]);
                                let pos = u.clamp(0.0, 1.0) * res;
                                let f = pos - pos.floor();
                                let cell = f.min(1.0 - f) * cfg.box_ext[axis] / res;
                                margin = margin.min(cell);
                            }
                        }
                    }
                }
                Op::BilinearSample { uv, .. } => {
                    let uvb = &self.nodes[*uv].val;
                    for &v in &uvb.data {
                        let f = v - v.floor();
                        margin = margin.min(f.min(1.0 - f));
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

/// Gradient of a scalar loss with respect to every leaf parameter.
pub fn forward_backward(tape: &Tape, loss_node: NodeId) -> Result<Vec<f64>> {
    tape.backward(loss_node)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), overflow-safe.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Bilinear tap weights and flat indices for a (h x w) map at clamped
/// continuous coords (u, v); texel (i, j) has its center at u=i, v=j.
fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> ([f64; 4], [usize; 4]) {
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let x0 = (uc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (vc.floor() as usize).min(h.saturating_sub(2));
    let fx = if w > 1 { uc - x0 as f64 } else { 0.0 };
    let fy = if h > 1 { vc - y0 as f64 } else { 0.0 };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
    )
}

/// d(weights)/du and d(weights)/dv for [`bilinear_taps`]; zero outside the
/// clamp range.
fn bilinear_tap_grads(u: f64, v: f64, w: usize, h: usize) -> ([f64; 4], [f64; 4]) {
    let inside_u = u > 0.0 && u < (w - 1) as f64 && w > 1;
    let inside_v = v > 0.0 && v < (h - 1) as f64 && h > 1;
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let x0 = (uc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (vc.floor() as usize).min(h.saturating_sub(2));
    let fx = if w > 1 { uc - x0 as f64 } else { 0.0 };
    let fy = if h > 1 { vc - y0 as f64 } else { 0.0 };
    let du = if inside_u {
        [-(1.0 - fy), 1.0 - fy, -fy, fy]
    } else {
        [0.0; 4]
    };
    let dv = if inside_v {
        [-(1.0 - fx), -fx, 1.0 - fx, fx]
    } else {
        [0.0; 4]
    };
    (du, dv)
}

/// Per-corner trilinear weight and its first/second partials in the local
/// cell fraction coordinates.
#[inline]
fn corner_factors(frac: [f64; 3], d: [usize; 3]) -> ([f64; 3], [f64; 3]) {
    // (factor per axis, sign per axis)
    let mut fac = [0.0; 3];
    let mut sgn = [0.0; 3];
    for a in 0..3 {
        if d[a] == 1 {
            fac[a] = frac[a];
            sgn[a] = 1.0;
        } else {
            fac[a] = 1.0 - frac[a];
            sgn[a] = -1.0;
        }
    }
    (fac, sgn)
}

fn hash_forward(y: &mut Buf, tbl: &[f64], x: &Buf, cfg: &HashGridCfg, with_jvp: bool) {
    let n = x.cols;
    let fdim = cfg.out_dim();
    let feats = cfg.feats;
    for j in 0..n {
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = ((x.at(a, j) - cfg.box_min[a]) / cfg.box_ext[a]).clamp(0.0, 1.0);
        }
        for l in 0..cfg.levels {
            let res = cfg.level_res(l);
            let resf = res as f64;
            let mut cell = [0i64; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let pos = u[a] * resf;
                let c = (pos.floor() as i64).clamp(0, res as i64 - 1);
                cell[a] = c;
                frac[a] = pos - c as f64;
            }
            for di in 0..8usize {
                let d = [di & 1, (di >> 1) & 1, (di >> 2) & 1];
                let (fac, sgn) = corner_factors(frac, d);
                let wgt = fac[0] * fac[1] * fac[2];
                let q = [
                    cell[0] + d[0] as i64,
                    cell[1] + d[1] as i64,
                    cell[2] + d[2] as i64,
                ];
                let e = corner_hash(q, l, cfg.table_size);
                let base = (l * cfg.table_size + e) * feats;
                for f in 0..feats {
                    let tv = tbl[base + f];
                    let row = l * feats + f;
                    y.set(row, j, y.at(row, j) + wgt * tv);
                    if with_jvp {
                        for a in 0..3 {
                            // dw/dfrac_a * dfrac_a/dworld_a
                            let dw = sgn[a] * fac[(a + 1) % 3] * fac[(a + 2) % 3];
                            let scale = resf / cfg.box_ext[a];
                            let r2 = (a + 1) * fdim + row;
                            y.set(r2, j, y.at(r2, j) + dw * scale * tv);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn hash_backward(
    a: &Buf,
    gtab: &mut [f64],
    dx: &mut Buf,
    tbl: &[f64],
    x: &Buf,
    cfg: &HashGridCfg,
    with_jvp: bool,
) {
    let n = x.cols;
    let fdim = cfg.out_dim();
    let feats = cfg.feats;
    for j in 0..n {
        let mut u = [0.0; 3];
        let mut active = [true; 3];
        for ax in 0..3 {
            let raw = (x.at(ax, j) - cfg.box_min[ax]) / cfg.box_ext[ax];
            active[ax] = (0.0..=1.0).contains(&raw);
            u[ax] = raw.clamp(0.0, 1.0);
        }
        for l in 0..cfg.levels {
            let res = cfg.level_res(l);
            let resf = res as f64;
            let mut cell = [0i64; 3];
            let mut frac = [0.0; 3];
            for ax in 0..3 {
                let pos = u[ax] * resf;
                let c = (pos.floor() as i64).clamp(0, res as i64 - 1);
                cell[ax] = c;
                frac[ax] = pos - c as f64;
            }
            for di in 0..8usize {
                let d = [di & 1, (di >> 1) & 1, (di >> 2) & 1];
                let (fac, sgn) = corner_factors(frac, d);
                let wgt = fac[0] * fac[1] * fac[2];
                let q = [
                    cell[0] + d[0] as i64,
                    cell[1] + d[1] as i64,
                    cell[2] + d[2] as i64,
                ];
                let e = corner_hash(q, l, cfg.table_size);
                let base = (l * cfg.table_size + e) * feats;
                for f in 0..feats {
                    let row = l * feats + f;
                    let tv = tbl[base + f];
                    let a_feat = a.at(row, j);
                    // Feature-path contributions.
                    let mut dt = wgt * a_feat;
                    for ax in 0..3 {
                        if active[ax] {
                            let dw = sgn[ax] * fac[(ax + 1) % 3] * fac[(ax + 2) % 3];
                            let scale = resf / cfg.box_ext[ax];
                            let cur = dx.at(ax, j) + dw * scale * tv * a_feat;
                            dx.set(ax, j, cur);
                        }
                    }
                    if with_jvp {
                        for bxa in 0..3 {
                            let a_jvp = a.at((bxa + 1) * fdim + row, j);
                            if a_jvp == 0.0 {
                                continue;
                            }
                            let dw_b = sgn[bxa] * fac[(bxa + 1) % 3] * fac[(bxa + 2) % 3];
                            let scale_b = resf / cfg.box_ext[bxa];
                            dt += dw_b * scale_b * a_jvp;
                            // d(jvp_b)/dx_a via the mixed second partials of
                            // the trilinear weight (zero when a == b).
                            for ax in 0..3 {
                                if ax == bxa || !active[ax] {
                                    continue;
                                }
                                let third = 3 - ax - bxa;
                                let d2 = sgn[bxa] * sgn[ax] * fac[third];
                                let scale_a = resf / cfg.box_ext[ax];
                                let cur =
                                    dx.at(ax, j) + d2 * scale_b * scale_a * tv * a_jvp;
                                dx.set(ax, j, cur);
                            }
                        }
                    }
                    gtab[base + f] += dt;
                }
            }
        }
    }
}
