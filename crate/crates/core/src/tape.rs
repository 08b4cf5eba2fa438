//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! The bound is assembled as a graph of coarse tensor operations rather than
//! scalar ones: generic linear-algebra ops plus fused kernel/psi-statistic
//! ops whose adjoints are hand-derived from the same Gaussian-factor partials
//! used by the closed forms in [`crate::psi`]. Values are computed eagerly on
//! insertion; [`Tape::backward`] runs one reverse sweep from a scalar root.
//!
//! Scalars are represented as 1x1 matrices, vectors as n x 1 matrices.

use crate::kernels::SmoothingKernelParams;
use crate::linalg::{self, Mat};
use crate::psi::{cp_pair_consts, gauss_expect, lin_gauss_expect, pair_expect};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Output-tag metadata shared by the fused CP ops.
#[derive(Debug, Clone)]
struct CpMeta {
    outputs: usize,
    latents: usize,
    logscales: NodeId,
    loglens: NodeId,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    MulElem(NodeId, NodeId),
    ExpElem(NodeId),
    LnElem(NodeId),
    Sum(NodeId),
    SumIndices(NodeId, Vec<usize>),
    ScaleBy(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    DiagPart(NodeId),
    RowQuadForm(NodeId, NodeId),
    ClipMin(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    BlockDiag(Vec<NodeId>),
    Cholesky { a: NodeId, jitter: f64, rel: f64 },
    TriSolveLower(NodeId, NodeId),
    TriSolveLowerT(NodeId, NodeId),
    LowerFromPacked { packed: NodeId, m: usize },
    RbfGram { x: Option<Mat>, z: NodeId, logvar: NodeId, loglen: NodeId },
    RbfPsi1 { mu: NodeId, s: NodeId, z: NodeId, logvar: NodeId, loglen: NodeId },
    RbfPsiQuad { mu: NodeId, s: NodeId, z: NodeId, logvar: NodeId, loglen: NodeId, w: NodeId },
    RbfPsi1Lin { mu: NodeId, s: NodeId, z: NodeId, logvar: NodeId, loglen: NodeId, beta: NodeId },
    CpGram { x: Option<(Mat, Vec<usize>)>, z: NodeId, ztags: Vec<usize>, meta: CpMeta },
    CpPsi0 { tags: Vec<usize>, meta: CpMeta },
    CpPsi1 { mu: NodeId, s: NodeId, tags: Vec<usize>, z: NodeId, ztags: Vec<usize>, meta: CpMeta },
    CpPsiQuad {
        mu: NodeId,
        s: NodeId,
        tags: Vec<usize>,
        z: NodeId,
        ztags: Vec<usize>,
        meta: CpMeta,
        w: NodeId,
    },
}

struct Node {
    value: Mat,
    op: Op,
    diff: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the root with respect to the node. Panics if the node was
    /// not differentiable.
    pub fn wrt(&self, id: NodeId) -> &Mat {
        self.grads[id.0].as_ref().expect("gradient of non-differentiable node")
    }

    pub fn wrt_scalar(&self, id: NodeId) -> f64 {
        let m = self.wrt(id);
        assert!(m.rows() == 1 && m.cols() == 1, "node is not a scalar");
        m[(0, 0)]
    }
}

fn column_slice(m: &Mat) -> &[f64] {
    assert_eq!(m.cols(), 1, "expected a column vector, got {}x{}", m.rows(), m.cols());
    m.data()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert!(m.rows() == 1 && m.cols() == 1, "node is not a scalar");
        m[(0, 0)]
    }

    /// Jitter recorded by a Cholesky node, if the node is one.
    pub fn cholesky_jitter(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id.0].op {
            Op::Cholesky { jitter, .. } => Some(jitter),
            _ => None,
        }
    }

    // Non-finite values are allowed to propagate; callers inspect the root.
    fn push(&mut self, value: Mat, op: Op, diff: bool) -> NodeId {
        self.nodes.push(Node { value, op, diff });
        NodeId(self.nodes.len() - 1)
    }

    fn is_diff(&self, id: NodeId) -> bool {
        self.nodes[id.0].diff
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Mat::from_rows(1, 1, vec![v]))
    }

    pub fn input(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf, true)
    }

    pub fn input_scalar(&mut self, v: f64) -> NodeId {
        self.input(Mat::from_rows(1, 1, vec![v]))
    }

    pub fn input_vector(&mut self, v: &[f64]) -> NodeId {
        self.input(Mat::column(v))
    }

    // -- generic ops ---------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "add shape mismatch");
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] + vb[(i, j)]);
        let diff = self.is_diff(a) || self.is_diff(b);
        self.push(v, Op::Add(a, b), diff)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "sub shape mismatch");
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] - vb[(i, j)]);
        let diff = self.is_diff(a) || self.is_diff(b);
        self.push(v, Op::Sub(a, b), diff)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| -va[(i, j)]);
        let diff = self.is_diff(a);
        self.push(v, Op::Neg(a), diff)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "mul_elem shape mismatch");
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] * vb[(i, j)]);
        let diff = self.is_diff(a) || self.is_diff(b);
        self.push(v, Op::MulElem(a, b), diff)
    }

    pub fn exp_elem(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)].exp());
        let diff = self.is_diff(a);
        self.push(v, Op::ExpElem(a), diff)
    }

    pub fn ln_elem(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.data().iter().all(|v| *v > 0.0), "ln of non-positive value");
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)].ln());
        let diff = self.is_diff(a);
        self.push(v, Op::LnElem(a), diff)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t: f64 = self.value(a).data().iter().sum();
        let diff = self.is_diff(a);
        self.push(Mat::from_rows(1, 1, vec![t]), Op::Sum(a), diff)
    }

    /// Sum of selected entries of a column vector.
    pub fn sum_indices(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = column_slice(self.value(a));
        let t: f64 = idx.iter().map(|&i| va[i]).sum();
        let diff = self.is_diff(a);
        self.push(Mat::from_rows(1, 1, vec![t]), Op::SumIndices(a, idx), diff)
    }

    /// Scalar node times matrix node.
    pub fn scale_by(&mut self, s: NodeId, a: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| sv * va[(i, j)]);
        let diff = self.is_diff(a) || self.is_diff(s);
        self.push(v, Op::ScaleBy(s, a), diff)
    }

    /// Matrix node plus a broadcast scalar node.
    pub fn add_broadcast(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] + sv);
        let diff = self.is_diff(a) || self.is_diff(s);
        self.push(v, Op::AddBroadcast(a, s), diff)
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| c * va[(i, j)]);
        let diff = self.is_diff(a);
        self.push(v, Op::ScaleConst(a, c), diff)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] + c);
        let diff = self.is_diff(a);
        self.push(v, Op::AddConst(a), diff)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let diff = self.is_diff(a) || self.is_diff(b);
        self.push(v, Op::Matmul(a, b), diff)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let diff = self.is_diff(a);
        self.push(v, Op::Transpose(a), diff)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag_part(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), va.cols(), "diag_part of non-square matrix");
        let v = Mat::from_fn(va.rows(), 1, |i, _| va[(i, i)]);
        let diff = self.is_diff(a);
        self.push(v, Op::DiagPart(a), diff)
    }

    /// Per-row quadratic forms `q_n = x_n^T W x_n` for the rows of X.
    pub fn row_quad_form(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.cols(), vw.rows(), "row_quad_form shape mismatch");
        assert_eq!(vw.rows(), vw.cols(), "row_quad_form needs square W");
        let m = vx.cols();
        let v = Mat::from_fn(vx.rows(), 1, |n, _| {
            let row = vx.row(n);
            let mut acc = 0.0;
            for i in 0..m {
                for j in 0..m {
                    acc += row[i] * vw[(i, j)] * row[j];
                }
            }
            acc
        });
        let diff = self.is_diff(x) || self.is_diff(w);
        self.push(v, Op::RowQuadForm(x, w), diff)
    }

    pub fn clip_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let v = Mat::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)].max(c));
        let diff = self.is_diff(a);
        self.push(v, Op::ClipMin(a, c), diff)
    }

    /// Select rows of a matrix.
    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let v = Mat::from_fn(idx.len(), va.cols(), |i, j| va[(idx[i], j)]);
        let diff = self.is_diff(a);
        self.push(v, Op::Gather(a, idx), diff)
    }

    /// Stack matrices vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let diff = parts.iter().any(|&p| self.is_diff(p));
        self.push(Mat::from_rows(rows, cols, data), Op::ConcatRows(parts.to_vec()), diff)
    }

    /// Assemble square blocks into a block-diagonal matrix.
    pub fn block_diag(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "block_diag of nothing");
        let mut n = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), vp.cols(), "block_diag needs square blocks");
            n += vp.rows();
        }
        let mut v = Mat::zeros(n, n);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            for i in 0..vp.rows() {
                for j in 0..vp.cols() {
                    v[(off + i, off + j)] = vp[(i, j)];
                }
            }
            off += vp.rows();
        }
        let diff = parts.iter().any(|&p| self.is_diff(p));
        self.push(v, Op::BlockDiag(parts.to_vec()), diff)
    }

    /// Cholesky factor of a (symmetrized) matrix, escalating jitter from
    /// `base_jitter` when needed. The jitter scales with the mean diagonal,
    /// and the backward pass accounts for that dependence.
    pub fn cholesky(&mut self, a: NodeId, base_jitter: f64) -> Result<NodeId> {
        let va = self.value(a);
        assert_eq!(va.rows(), va.cols(), "cholesky of non-square matrix");
        let sym = Mat::from_fn(va.rows(), va.cols(), |i, j| 0.5 * (va[(i, j)] + va[(j, i)]));
        // relative jitter from the first attempt on, matching robust_cholesky:
        // the factor stays a smooth function of the input in the common case
        let n = sym.rows();
        let scale = ((0..n).map(|i| sym[(i, i)]).sum::<f64>() / n as f64)
            .abs()
            .max(f64::MIN_POSITIVE);
        let mut chosen = None;
        for attempt in 0..8 {
            let jitter = base_jitter * scale * 10f64.powi(attempt);
            if let Some(l) = linalg::cholesky_raw(&sym, jitter) {
                chosen = Some((l, jitter));
                break;
            }
        }
        let (l, jitter) = chosen.ok_or(Error::NotPositiveDefinite {
            max_jitter: base_jitter * scale * 1e7,
        })?;
        let diff = self.is_diff(a);
        Ok(self.push(l, Op::Cholesky { a, jitter, rel: jitter / scale }, diff))
    }

    /// Solve `L X = B` for lower-triangular L.
    pub fn tri_solve_lower(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let v = linalg::solve_lower_mat(self.value(l), self.value(b));
        let diff = self.is_diff(l) || self.is_diff(b);
        self.push(v, Op::TriSolveLower(l, b), diff)
    }

    /// Solve `L^T X = B` for lower-triangular L.
    pub fn tri_solve_lower_t(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let v = linalg::solve_lower_t_mat(self.value(l), self.value(b));
        let diff = self.is_diff(l) || self.is_diff(b);
        self.push(v, Op::TriSolveLowerT(l, b), diff)
    }

    /// Unpack a row-major lower-triangle parameter vector into an m x m lower
    /// triangular matrix; diagonal entries are stored in log space.
    pub fn lower_from_packed(&mut self, packed: NodeId, m: usize) -> NodeId {
        let vp = column_slice(self.value(packed));
        assert_eq!(vp.len(), m * (m + 1) / 2, "packed length mismatch");
        let mut v = Mat::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..=i {
                v[(i, j)] = if i == j { vp[k].exp() } else { vp[k] };
                k += 1;
            }
        }
        let diff = self.is_diff(packed);
        self.push(v, Op::LowerFromPacked { packed, m }, diff)
    }

    // -- fused kernel ops ----------------------------------------------------

    fn rbf_consts(&self, logvar: NodeId, loglen: NodeId) -> (f64, f64) {
        let var = self.scalar(logvar).exp();
        let len = self.scalar(loglen).exp();
        (var, len * len)
    }

    /// RBF Gram matrix between Z and itself.
    pub fn rbf_gram_zz(&mut self, z: NodeId, logvar: NodeId, loglen: NodeId) -> NodeId {
        let (var, v) = self.rbf_consts(logvar, loglen);
        let zs = column_slice(self.value(z)).to_vec();
        let m = zs.len();
        let val = Mat::from_fn(m, m, |i, j| {
            let d = zs[i] - zs[j];
            var * (-0.5 * d * d / v).exp()
        });
        let diff = self.is_diff(z) || self.is_diff(logvar) || self.is_diff(loglen);
        self.push(val, Op::RbfGram { x: None, z, logvar, loglen }, diff)
    }

    /// RBF cross Gram between fixed inputs X and Z.
    pub fn rbf_gram_xz(&mut self, x: &[f64], z: NodeId, logvar: NodeId, loglen: NodeId) -> NodeId {
        let (var, v) = self.rbf_consts(logvar, loglen);
        let zs = column_slice(self.value(z)).to_vec();
        let val = Mat::from_fn(x.len(), zs.len(), |n, i| {
            let d = x[n] - zs[i];
            var * (-0.5 * d * d / v).exp()
        });
        let diff = self.is_diff(z) || self.is_diff(logvar) || self.is_diff(loglen);
        self.push(val, Op::RbfGram { x: Some(Mat::column(x)), z, logvar, loglen }, diff)
    }

    /// Psi1 statistic of the RBF kernel for uncertain inputs.
    pub fn rbf_psi1(
        &mut self,
        mu: NodeId,
        s: NodeId,
        z: NodeId,
        logvar: NodeId,
        loglen: NodeId,
    ) -> NodeId {
        let (var, v) = self.rbf_consts(logvar, loglen);
        let mus = column_slice(self.value(mu)).to_vec();
        let ss = column_slice(self.value(s)).to_vec();
        assert_eq!(mus.len(), ss.len(), "rbf_psi1 moment length mismatch");
        let zs = column_slice(self.value(z)).to_vec();
        let val = Mat::from_fn(mus.len(), zs.len(), |n, i| {
            var * gauss_expect(mus[n], ss[n], zs[i], v).val
        });
        let diff = [mu, s, z, logvar, loglen].iter().any(|&n| self.is_diff(n));
        self.push(val, Op::RbfPsi1 { mu, s, z, logvar, loglen }, diff)
    }

    /// Per-point weighted psi2 contraction `q_n = tr(W Phi_n)` for the RBF
    /// kernel.
    pub fn rbf_psi_quad(
        &mut self,
        mu: NodeId,
        s: NodeId,
        z: NodeId,
        logvar: NodeId,
        loglen: NodeId,
        w: NodeId,
    ) -> NodeId {
        let (var, v) = self.rbf_consts(logvar, loglen);
        let mus = column_slice(self.value(mu)).to_vec();
        let ss = column_slice(self.value(s)).to_vec();
        let zs = column_slice(self.value(z)).to_vec();
        let vw = self.value(w);
        assert_eq!((vw.rows(), vw.cols()), (zs.len(), zs.len()), "rbf_psi_quad W shape");
        let var2 = var * var;
        let mut val = Mat::zeros(mus.len(), 1);
        for n in 0..mus.len() {
            let mut acc = 0.0;
            for i in 0..zs.len() {
                for j in 0..=i {
                    let c = if i == j { vw[(i, i)] } else { vw[(i, j)] + vw[(j, i)] };
                    acc += c * var2 * pair_expect(mus[n], ss[n], zs[i], zs[j], v, v).val;
                }
            }
            val[(n, 0)] = acc;
        }
        let diff = [mu, s, z, logvar, loglen, w].iter().any(|&n| self.is_diff(n));
        self.push(val, Op::RbfPsiQuad { mu, s, z, logvar, loglen, w }, diff)
    }

    /// `c_n = sum_i beta_i E[a_n k(a_n, z_i)]` for the RBF kernel; the
    /// identity-mean cross term of the warping layers.
    pub fn rbf_psi1_lin(
        &mut self,
        mu: NodeId,
        s: NodeId,
        z: NodeId,
        logvar: NodeId,
        loglen: NodeId,
        beta: NodeId,
    ) -> NodeId {
        let (var, v) = self.rbf_consts(logvar, loglen);
        let mus = column_slice(self.value(mu)).to_vec();
        let ss = column_slice(self.value(s)).to_vec();
        let zs = column_slice(self.value(z)).to_vec();
        let bs = column_slice(self.value(beta)).to_vec();
        assert_eq!(zs.len(), bs.len(), "rbf_psi1_lin beta length mismatch");
        let val = Mat::from_fn(mus.len(), 1, |n, _| {
            let mut acc = 0.0;
            for i in 0..zs.len() {
                acc += bs[i] * var * lin_gauss_expect(mus[n], ss[n], zs[i], v).val;
            }
            acc
        });
        let diff = [mu, s, z, logvar, loglen, beta].iter().any(|&n| self.is_diff(n));
        self.push(val, Op::RbfPsi1Lin { mu, s, z, logvar, loglen, beta }, diff)
    }

    fn cp_params(&self, meta: &CpMeta) -> SmoothingKernelParams {
        let mut p = SmoothingKernelParams::new(meta.outputs, meta.latents, 1)
            .expect("invalid CP dimensions");
        p.log_scales = column_slice(self.value(meta.logscales)).to_vec();
        p.log_lengthscales = column_slice(self.value(meta.loglens)).to_vec();
        assert_eq!(p.log_scales.len(), meta.outputs * meta.latents, "cp log_scales length");
        assert_eq!(p.log_lengthscales.len(), meta.outputs * meta.latents, "cp log_lengthscales length");
        p
    }

    fn cp_meta(&self, logscales: NodeId, loglens: NodeId, outputs: usize, latents: usize) -> CpMeta {
        CpMeta { outputs, latents, logscales, loglens }
    }

    /// CP Gram matrix between Z and itself.
    pub fn cp_gram_zz(
        &mut self,
        z: NodeId,
        ztags: &[usize],
        logscales: NodeId,
        loglens: NodeId,
        outputs: usize,
        latents: usize,
    ) -> NodeId {
        let meta = self.cp_meta(logscales, loglens, outputs, latents);
        let p = self.cp_params(&meta);
        let zs = column_slice(self.value(z)).to_vec();
        assert_eq!(zs.len(), ztags.len(), "cp_gram_zz tag length mismatch");
        let m = zs.len();
        let val = Mat::from_fn(m, m, |i, j| {
            let mut acc = 0.0;
            for r in 0..latents {
                let c = cp_pair_consts(&p, ztags[i], ztags[j], r);
                let d = zs[i] - zs[j];
                acc += c.sighat2 * (-0.5 * d * d / c.vhat).exp();
            }
            acc
        });
        let diff = [z, logscales, loglens].iter().any(|&n| self.is_diff(n));
        self.push(val, Op::CpGram { x: None, z, ztags: ztags.to_vec(), meta }, diff)
    }

    /// CP cross Gram between fixed tagged inputs X and Z.
    pub fn cp_gram_xz(
        &mut self,
        x: &[f64],
        xtags: &[usize],
        z: NodeId,
        ztags: &[usize],
        logscales: NodeId,
        loglens: NodeId,
        outputs: usize,
        latents: usize,
    ) -> NodeId {
        assert_eq!(x.len(), xtags.len(), "cp_gram_xz tag length mismatch");
        let meta = self.cp_meta(logscales, loglens, outputs, latents);
        let p = self.cp_params(&meta);
        let zs = column_slice(self.value(z)).to_vec();
        assert_eq!(zs.len(), ztags.len(), "cp_gram_xz inducing tag length mismatch");
        let val = Mat::from_fn(x.len(), zs.len(), |n, i| {
            let mut acc = 0.0;
            for r in 0..latents {
                let c = cp_pair_consts(&p, xtags[n], ztags[i], r);
                let d = x[n] - zs[i];
                acc += c.sighat2 * (-0.5 * d * d / c.vhat).exp();
            }
            acc
        });
        let diff = [z, logscales, loglens].iter().any(|&n| self.is_diff(n));
        self.push(
            val,
            Op::CpGram {
                x: Some((Mat::column(x), xtags.to_vec())),
                z,
                ztags: ztags.to_vec(),
                meta,
            },
            diff,
        )
    }

    /// Per-point psi0 of the CP kernel; depends only on kernel parameters.
    pub fn cp_psi0(
        &mut self,
        tags: &[usize],
        logscales: NodeId,
        loglens: NodeId,
        outputs: usize,
        latents: usize,
    ) -> NodeId {
        let meta = self.cp_meta(logscales, loglens, outputs, latents);
        let p = self.cp_params(&meta);
        let val = Mat::from_fn(tags.len(), 1, |n, _| {
            (0..latents).map(|r| p.pair_variance(tags[n], tags[n], r)).sum()
        });
        let diff = [logscales, loglens].iter().any(|&n| self.is_diff(n));
        self.push(val, Op::CpPsi0 { tags: tags.to_vec(), meta }, diff)
    }

    /// Psi1 statistic of the CP kernel for uncertain tagged inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn cp_psi1(
        &mut self,
        mu: NodeId,
        s: NodeId,
        tags: &[usize],
        z: NodeId,
        ztags: &[usize],
        logscales: NodeId,
        loglens: NodeId,
        outputs: usize,
        latents: usize,
    ) -> NodeId {
        let meta = self.cp_meta(logscales, loglens, outputs, latents);
        let p = self.cp_params(&meta);
        let mus = column_slice(self.value(mu)).to_vec();
        let ss = column_slice(self.value(s)).to_vec();
        assert_eq!(mus.len(), tags.len(), "cp_psi1 tag length mismatch");
        let zs = column_slice(self.value(z)).to_vec();
        let val = Mat::from_fn(mus.len(), zs.len(), |n, i| {
            let mut acc = 0.0;
            for r in 0..latents {
                let c = cp_pair_consts(&p, tags[n], ztags[i], r);
                acc += c.sighat2 * gauss_expect(mus[n], ss[n], zs[i], c.vhat).val;
            }
            acc
        });
        let diff = [mu, s, z, logscales, loglens].iter().any(|&n| self.is_diff(n));
        self.push(
            val,
            Op::CpPsi1 { mu, s, tags: tags.to_vec(), z, ztags: ztags.to_vec(), meta },
            diff,
        )
    }

    /// Per-point weighted psi2 contraction `q_n = tr(W Phi_n)` for the CP
    /// kernel. Latent processes couple pairwise inside Phi.
    #[allow(clippy::too_many_arguments)]
    pub fn cp_psi_quad(
        &mut self,
        mu: NodeId,
        s: NodeId,
        tags: &[usize],
        z: NodeId,
        ztags: &[usize],
        logscales: NodeId,
        loglens: NodeId,
        outputs: usize,
        latents: usize,
        w: NodeId,
    ) -> NodeId {
        let meta = self.cp_meta(logscales, loglens, outputs, latents);
        let p = self.cp_params(&meta);
        let mus = column_slice(self.value(mu)).to_vec();
        let ss = column_slice(self.value(s)).to_vec();
        let zs = column_slice(self.value(z)).to_vec();
        let vw = self.value(w);
        assert_eq!((vw.rows(), vw.cols()), (zs.len(), zs.len()), "cp_psi_quad W shape");
        let m = zs.len();
        let mut val = Mat::zeros(mus.len(), 1);
        for n in 0..mus.len() {
            let mut acc = 0.0;
            for i in 0..m {
                let ci: Vec<_> = (0..latents).map(|r| cp_pair_consts(&p, tags[n], ztags[i], r)).collect();
                for j in 0..=i {
                    let c = if i == j { vw[(i, i)] } else { vw[(i, j)] + vw[(j, i)] };
                    let mut term = 0.0;
                    for r in 0..latents {
                        for rp in 0..latents {
                            let cj = cp_pair_consts(&p, tags[n], ztags[j], rp);
                            term += ci[r].sighat2
                                * cj.sighat2
                                * pair_expect(mus[n], ss[n], zs[i], zs[j], ci[r].vhat, cj.vhat).val;
                        }
                    }
                    acc += c * term;
                }
            }
            val[(n, 0)] = acc;
        }
        let diff = [mu, s, z, logscales, loglens, w].iter().any(|&n| self.is_diff(n));
        self.push(
            val,
            Op::CpPsiQuad { mu, s, tags: tags.to_vec(), z, ztags: ztags.to_vec(), meta, w },
            diff,
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns per-node gradients for all
    /// differentiable nodes.
    pub fn backward(&self, root: NodeId) -> Gradients {
        {
            let rv = self.value(root);
            assert!(rv.rows() == 1 && rv.cols() == 1, "backward root must be scalar");
        }
        let mut grads: Vec<Option<Mat>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.diff {
                    Some(Mat::zeros(n.value.rows(), n.value.cols()))
                } else {
                    None
                }
            })
            .collect();
        if grads[root.0].is_none() {
            // differentiating a constant: all gradients are zero
            return Gradients { grads };
        }
        grads[root.0].as_mut().unwrap()[(0, 0)] = 1.0;

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], id: NodeId, f: &mut dyn FnMut(&mut Mat)| {
            if let Some(t) = grads[id.0].as_mut() {
                f(t);
            }
        };
        let add_full = |grads: &mut [Option<Mat>], id: NodeId, m: &Mat| {
            if let Some(t) = grads[id.0].as_mut() {
                for (a, b) in t.data_mut().iter_mut().zip(m.data()) {
                    *a += b;
                }
            }
        };
        let add_scalar = |grads: &mut [Option<Mat>], id: NodeId, v: f64| {
            if let Some(t) = grads[id.0].as_mut() {
                t[(0, 0)] += v;
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_full(grads, *a, g);
                add_full(grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_full(grads, *a, g);
                acc(grads, *b, &mut |t| {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Neg(a) => {
                acc(grads, *a, &mut |t| {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::MulElem(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                acc(grads, *a, &mut |t| {
                    for ((x, y), z) in t.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += y * z;
                    }
                });
                acc(grads, *b, &mut |t| {
                    for ((x, y), z) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::ExpElem(a) => {
                let v = self.nodes[idx].value.clone();
                acc(grads, *a, &mut |t| {
                    for ((x, y), z) in t.data_mut().iter_mut().zip(g.data()).zip(v.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::LnElem(a) => {
                let va = self.value(*a).clone();
                acc(grads, *a, &mut |t| {
                    for ((x, y), z) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += y / z;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[(0, 0)];
                acc(grads, *a, &mut |t| {
                    for x in t.data_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SumIndices(a, idxs) => {
                let gv = g[(0, 0)];
                acc(grads, *a, &mut |t| {
                    for &i in idxs {
                        t[(i, 0)] += gv;
                    }
                });
            }
            Op::ScaleBy(s, a) => {
                let sv = self.scalar(*s);
                let va = self.value(*a).clone();
                acc(grads, *a, &mut |t| {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x += sv * y;
                    }
                });
                let ds: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                add_scalar(grads, *s, ds);
            }
            Op::AddBroadcast(a, s) => {
                add_full(grads, *a, g);
                add_scalar(grads, *s, g.data().iter().sum());
            }
            Op::ScaleConst(a, c) => {
                let c = *c;
                acc(grads, *a, &mut |t| {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x += c * y;
                    }
                });
            }
            Op::AddConst(a) => {
                add_full(grads, *a, g);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if grads[a.0].is_some() {
                    let da = g.matmul(&vb.transpose());
                    add_full(grads, *a, &da);
                }
                if grads[b.0].is_some() {
                    let db = va.transpose().matmul(g);
                    add_full(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                add_full(grads, *a, &gt);
            }
            Op::DiagPart(a) => {
                acc(grads, *a, &mut |t| {
                    for i in 0..g.rows() {
                        t[(i, i)] += g[(i, 0)];
                    }
                });
            }
            Op::RowQuadForm(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let m = vx.cols();
                if grads[x.0].is_some() {
                    let mut dx = Mat::zeros(vx.rows(), m);
                    for n in 0..vx.rows() {
                        let gn = g[(n, 0)];
                        for i in 0..m {
                            let mut acc2 = 0.0;
                            for j in 0..m {
                                acc2 += (vw[(i, j)] + vw[(j, i)]) * vx[(n, j)];
                            }
                            dx[(n, i)] = gn * acc2;
                        }
                    }
                    add_full(grads, *x, &dx);
                }
                if grads[w.0].is_some() {
                    let mut dw = Mat::zeros(m, m);
                    for n in 0..vx.rows() {
                        let gn = g[(n, 0)];
                        let row = vx.row(n);
                        for i in 0..m {
                            for j in 0..m {
                                dw[(i, j)] += gn * row[i] * row[j];
                            }
                        }
                    }
                    add_full(grads, *w, &dw);
                }
            }
            Op::ClipMin(a, c) => {
                let va = self.value(*a).clone();
                let c = *c;
                acc(grads, *a, &mut |t| {
                    for ((x, y), z) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if *z >= c {
                            *x += y;
                        }
                    }
                });
            }
            Op::Gather(a, idxs) => {
                acc(grads, *a, &mut |t| {
                    for (i, &src) in idxs.iter().enumerate() {
                        for j in 0..g.cols() {
                            t[(src, j)] += g[(i, j)];
                        }
                    }
                });
            }
            Op::BlockDiag(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    acc(grads, p, &mut |t| {
                        for i in 0..rows {
                            for j in 0..rows {
                                t[(i, j)] += g[(off + i, off + j)];
                            }
                        }
                    });
                    off += rows;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    acc(grads, p, &mut |t| {
                        for i in 0..rows {
                            for j in 0..g.cols() {
                                t[(i, j)] += g[(offset + i, j)];
                            }
                        }
                    });
                    offset += rows;
                }
            }
            Op::Cholesky { a, jitter: _, rel } => {
                if grads[a.0].is_none() {
                    return;
                }
                let l = &self.nodes[idx].value;
                let m = l.rows();
                // standard Cholesky pullback: dA = 0.5 (X + X^T) with
                // X = L^{-T} Phi(L^T G) L^{-1}, Phi = lower with halved diag
                let p = l.transpose().matmul(g);
                let mut phi = Mat::zeros(m, m);
                for i in 0..m {
                    for j in 0..=i {
                        phi[(i, j)] = if i == j { 0.5 * p[(i, i)] } else { p[(i, j)] };
                    }
                }
                let ltphi = linalg::solve_lower_t_mat(l, &phi);
                let x = linalg::solve_lower_t_mat(l, &ltphi.transpose()).transpose();
                let mut da = Mat::from_fn(m, m, |i, j| 0.5 * (x[(i, j)] + x[(j, i)]));
                // the factored matrix is A + rel * mean(diag A) * I, so the
                // jitter feeds a share of the diagonal pullback back to every
                // diagonal entry of A
                let extra = rel * (0..m).map(|i| da[(i, i)]).sum::<f64>() / m as f64;
                for i in 0..m {
                    da[(i, i)] += extra;
                }
                add_full(grads, *a, &da);
            }
            Op::TriSolveLower(l, b) => {
                let lv = self.value(*l);
                let x = &self.nodes[idx].value;
                let db = linalg::solve_lower_t_mat(lv, g);
                if grads[l.0].is_some() {
                    let full = db.matmul(&x.transpose());
                    let dl = Mat::from_fn(lv.rows(), lv.cols(), |i, j| {
                        if j <= i {
                            -full[(i, j)]
                        } else {
                            0.0
                        }
                    });
                    add_full(grads, *l, &dl);
                }
                add_full(grads, *b, &db);
            }
            Op::TriSolveLowerT(l, b) => {
                let lv = self.value(*l);
                let x = &self.nodes[idx].value;
                let db = linalg::solve_lower_mat(lv, g);
                if grads[l.0].is_some() {
                    let full = x.matmul(&db.transpose());
                    let dl = Mat::from_fn(lv.rows(), lv.cols(), |i, j| {
                        if j <= i {
                            -full[(i, j)]
                        } else {
                            0.0
                        }
                    });
                    add_full(grads, *l, &dl);
                }
                add_full(grads, *b, &db);
            }
            Op::LowerFromPacked { packed, m } => {
                let v = &self.nodes[idx].value;
                acc(grads, *packed, &mut |t| {
                    let mut k = 0;
                    for i in 0..*m {
                        for j in 0..=i {
                            let gij = g[(i, j)];
                            t[(k, 0)] += if i == j { gij * v[(i, i)] } else { gij };
                            k += 1;
                        }
                    }
                });
            }
            Op::RbfGram { x, z, logvar, loglen } => {
                let (_, v) = self.rbf_consts(*logvar, *loglen);
                let zs = column_slice(self.value(*z));
                let kmat = &self.nodes[idx].value;
                let mut dz = vec![0.0; zs.len()];
                let mut dlogvar = 0.0;
                let mut dloglen = 0.0;
                match x {
                    None => {
                        for i in 0..zs.len() {
                            for j in 0..zs.len() {
                                let gij = g[(i, j)];
                                if gij == 0.0 {
                                    continue;
                                }
                                let k = kmat[(i, j)];
                                let d = zs[i] - zs[j];
                                dlogvar += gij * k;
                                dloglen += gij * k * d * d / v;
                                dz[i] += gij * k * (-d) / v;
                                dz[j] += gij * k * d / v;
                            }
                        }
                    }
                    Some(xm) => {
                        let xs = column_slice(xm);
                        for n in 0..xs.len() {
                            for i in 0..zs.len() {
                                let gni = g[(n, i)];
                                if gni == 0.0 {
                                    continue;
                                }
                                let k = kmat[(n, i)];
                                let d = xs[n] - zs[i];
                                dlogvar += gni * k;
                                dloglen += gni * k * d * d / v;
                                dz[i] += gni * k * d / v;
                            }
                        }
                    }
                }
                add_full(grads, *z, &Mat::column(&dz));
                add_scalar(grads, *logvar, dlogvar);
                add_scalar(grads, *loglen, dloglen);
            }
            Op::RbfPsi1 { mu, s, z, logvar, loglen } => {
                let (var, v) = self.rbf_consts(*logvar, *loglen);
                let mus = column_slice(self.value(*mu));
                let ss = column_slice(self.value(*s));
                let zs = column_slice(self.value(*z));
                let mut dmu = vec![0.0; mus.len()];
                let mut ds = vec![0.0; mus.len()];
                let mut dz = vec![0.0; zs.len()];
                let mut dlogvar = 0.0;
                let mut dloglen = 0.0;
                for n in 0..mus.len() {
                    for i in 0..zs.len() {
                        let gni = g[(n, i)];
                        if gni == 0.0 {
                            continue;
                        }
                        let gf = gauss_expect(mus[n], ss[n], zs[i], v);
                        dmu[n] += gni * var * gf.d_mu;
                        ds[n] += gni * var * gf.d_s;
                        dz[i] += gni * var * gf.d_z;
                        dlogvar += gni * var * gf.val;
                        dloglen += gni * var * gf.d_v * 2.0 * v;
                    }
                }
                add_full(grads, *mu, &Mat::column(&dmu));
                add_full(grads, *s, &Mat::column(&ds));
                add_full(grads, *z, &Mat::column(&dz));
                add_scalar(grads, *logvar, dlogvar);
                add_scalar(grads, *loglen, dloglen);
            }
            Op::RbfPsiQuad { mu, s, z, logvar, loglen, w } => {
                let (var, v) = self.rbf_consts(*logvar, *loglen);
                let var2 = var * var;
                let mus = column_slice(self.value(*mu));
                let ss = column_slice(self.value(*s));
                let zs = column_slice(self.value(*z));
                let vw = self.value(*w);
                let m = zs.len();
                let mut dmu = vec![0.0; mus.len()];
                let mut ds = vec![0.0; mus.len()];
                let mut dz = vec![0.0; m];
                let mut dlogvar = 0.0;
                let mut dloglen = 0.0;
                let mut dw = Mat::zeros(m, m);
                for n in 0..mus.len() {
                    let gn = g[(n, 0)];
                    if gn == 0.0 {
                        continue;
                    }
                    for i in 0..m {
                        for j in 0..=i {
                            let c = if i == j { vw[(i, i)] } else { vw[(i, j)] + vw[(j, i)] };
                            let pf = pair_expect(mus[n], ss[n], zs[i], zs[j], v, v);
                            let base = gn * c * var2;
                            dmu[n] += base * pf.d_mu;
                            ds[n] += base * pf.d_s;
                            dz[i] += base * pf.d_zi;
                            dz[j] += base * pf.d_zj;
                            dlogvar += 2.0 * base * pf.val;
                            dloglen += base * (pf.d_vi + pf.d_vj) * 2.0 * v;
                            dw[(i, j)] += gn * var2 * pf.val;
                            if i != j {
                                dw[(j, i)] += gn * var2 * pf.val;
                            }
                        }
                    }
                }
                add_full(grads, *mu, &Mat::column(&dmu));
                add_full(grads, *s, &Mat::column(&ds));
                add_full(grads, *z, &Mat::column(&dz));
                add_scalar(grads, *logvar, dlogvar);
                add_scalar(grads, *loglen, dloglen);
                add_full(grads, *w, &dw);
            }
            Op::RbfPsi1Lin { mu, s, z, logvar, loglen, beta } => {
                let (var, v) = self.rbf_consts(*logvar, *loglen);
                let mus = column_slice(self.value(*mu));
                let ss = column_slice(self.value(*s));
                let zs = column_slice(self.value(*z));
                let bs = column_slice(self.value(*beta));
                let mut dmu = vec![0.0; mus.len()];
                let mut ds = vec![0.0; mus.len()];
                let mut dz = vec![0.0; zs.len()];
                let mut dbeta = vec![0.0; bs.len()];
                let mut dlogvar = 0.0;
                let mut dloglen = 0.0;
                for n in 0..mus.len() {
                    let gn = g[(n, 0)];
                    if gn == 0.0 {
                        continue;
                    }
                    for i in 0..zs.len() {
                        let lf = lin_gauss_expect(mus[n], ss[n], zs[i], v);
                        let base = gn * bs[i] * var;
                        dmu[n] += base * lf.d_mu;
                        ds[n] += base * lf.d_s;
                        dz[i] += base * lf.d_z;
                        dbeta[i] += gn * var * lf.val;
                        dlogvar += base * lf.val;
                        dloglen += base * lf.d_v * 2.0 * v;
                    }
                }
                add_full(grads, *mu, &Mat::column(&dmu));
                add_full(grads, *s, &Mat::column(&ds));
                add_full(grads, *z, &Mat::column(&dz));
                add_full(grads, *beta, &Mat::column(&dbeta));
                add_scalar(grads, *logvar, dlogvar);
                add_scalar(grads, *loglen, dloglen);
            }
            Op::CpGram { x, z, ztags, meta } => {
                let p = self.cp_params(meta);
                let zs = column_slice(self.value(*z));
                let mut dz = vec![0.0; zs.len()];
                let mut dscales = vec![0.0; p.log_scales.len()];
                let mut dlens = vec![0.0; p.log_lengthscales.len()];
                let slot = |d: usize, r: usize| d * meta.latents + r;
                // each entry pairs a first point (row) with a second point
                // (column, always an inducing input); delta = first - second
                let pairs: Vec<(f64, usize, usize, f64, Option<usize>, usize)> = match x {
                    None => {
                        let mut out = Vec::new();
                        for i in 0..zs.len() {
                            for j in 0..zs.len() {
                                let gij = g[(i, j)];
                                if gij != 0.0 {
                                    out.push((gij, ztags[i], ztags[j], zs[i] - zs[j], Some(i), j));
                                }
                            }
                        }
                        out
                    }
                    Some((xm, xtags)) => {
                        let xs = column_slice(xm);
                        let mut out = Vec::new();
                        for n in 0..xs.len() {
                            for i in 0..zs.len() {
                                let gni = g[(n, i)];
                                if gni != 0.0 {
                                    out.push((gni, xtags[n], ztags[i], xs[n] - zs[i], None, i));
                                }
                            }
                        }
                        out
                    }
                };
                for (gv, da, db, delta, row_z, col_z) in pairs {
                    for r in 0..meta.latents {
                        let c = cp_pair_consts(&p, da, db, r);
                        let e = (-0.5 * delta * delta / c.vhat).exp();
                        let k = c.sighat2 * e;
                        dscales[slot(da, r)] += gv * k;
                        dscales[slot(db, r)] += gv * k;
                        let de_dv = e * 0.5 * delta * delta / (c.vhat * c.vhat);
                        dlens[slot(da, r)] +=
                            gv * (c.ds2_dlogl_a * e + c.sighat2 * de_dv * c.dv_dlogl_a);
                        dlens[slot(db, r)] +=
                            gv * (c.ds2_dlogl_b * e + c.sighat2 * de_dv * c.dv_dlogl_b);
                        let dk_dsecond = k * delta / c.vhat;
                        dz[col_z] += gv * dk_dsecond;
                        if let Some(i) = row_z {
                            dz[i] -= gv * dk_dsecond;
                        }
                    }
                }
                add_full(grads, *z, &Mat::column(&dz));
                add_full(grads, meta.logscales, &Mat::column(&dscales));
                add_full(grads, meta.loglens, &Mat::column(&dlens));
            }
            Op::CpPsi0 { tags, meta } => {
                let p = self.cp_params(meta);
                let slot = |d: usize, r: usize| d * meta.latents + r;
                let mut dscales = vec![0.0; p.log_scales.len()];
                let mut dlens = vec![0.0; p.log_lengthscales.len()];
                for (n, &d) in tags.iter().enumerate() {
                    let gn = g[(n, 0)];
                    if gn == 0.0 {
                        continue;
                    }
                    for r in 0..meta.latents {
                        let c = cp_pair_consts(&p, d, d, r);
                        dscales[slot(d, r)] += gn * 2.0 * c.ds2_dlogsig;
                        dlens[slot(d, r)] += gn * (c.ds2_dlogl_a + c.ds2_dlogl_b);
                    }
                }
                add_full(grads, meta.logscales, &Mat::column(&dscales));
                add_full(grads, meta.loglens, &Mat::column(&dlens));
            }
            Op::CpPsi1 { mu, s, tags, z, ztags, meta } => {
                let p = self.cp_params(meta);
                let mus = column_slice(self.value(*mu));
                let ss = column_slice(self.value(*s));
                let zs = column_slice(self.value(*z));
                let slot = |d: usize, r: usize| d * meta.latents + r;
                let mut dmu = vec![0.0; mus.len()];
                let mut ds = vec![0.0; mus.len()];
                let mut dz = vec![0.0; zs.len()];
                let mut dscales = vec![0.0; p.log_scales.len()];
                let mut dlens = vec![0.0; p.log_lengthscales.len()];
                for n in 0..mus.len() {
                    for i in 0..zs.len() {
                        let gni = g[(n, i)];
                        if gni == 0.0 {
                            continue;
                        }
                        for r in 0..meta.latents {
                            let c = cp_pair_consts(&p, tags[n], ztags[i], r);
                            let gf = gauss_expect(mus[n], ss[n], zs[i], c.vhat);
                            dmu[n] += gni * c.sighat2 * gf.d_mu;
                            ds[n] += gni * c.sighat2 * gf.d_s;
                            dz[i] += gni * c.sighat2 * gf.d_z;
                            dscales[slot(tags[n], r)] += gni * c.ds2_dlogsig * gf.val;
                            dscales[slot(ztags[i], r)] += gni * c.ds2_dlogsig * gf.val;
                            dlens[slot(tags[n], r)] +=
                                gni * (c.ds2_dlogl_a * gf.val + c.sighat2 * gf.d_v * c.dv_dlogl_a);
                            dlens[slot(ztags[i], r)] +=
                                gni * (c.ds2_dlogl_b * gf.val + c.sighat2 * gf.d_v * c.dv_dlogl_b);
                        }
                    }
                }
                add_full(grads, *mu, &Mat::column(&dmu));
                add_full(grads, *s, &Mat::column(&ds));
                add_full(grads, *z, &Mat::column(&dz));
                add_full(grads, meta.logscales, &Mat::column(&dscales));
                add_full(grads, meta.loglens, &Mat::column(&dlens));
            }
            Op::CpPsiQuad { mu, s, tags, z, ztags, meta, w } => {
                let p = self.cp_params(meta);
                let mus = column_slice(self.value(*mu));
                let ss = column_slice(self.value(*s));
                let zs = column_slice(self.value(*z));
                let vw = self.value(*w);
                let m = zs.len();
                let slot = |d: usize, r: usize| d * meta.latents + r;
                let mut dmu = vec![0.0; mus.len()];
                let mut ds = vec![0.0; mus.len()];
                let mut dz = vec![0.0; m];
                let mut dscales = vec![0.0; p.log_scales.len()];
                let mut dlens = vec![0.0; p.log_lengthscales.len()];
                let mut dw = Mat::zeros(m, m);
                for n in 0..mus.len() {
                    let gn = g[(n, 0)];
                    if gn == 0.0 {
                        continue;
                    }
                    for i in 0..m {
                        let ci: Vec<_> =
                            (0..meta.latents).map(|r| cp_pair_consts(&p, tags[n], ztags[i], r)).collect();
                        for j in 0..=i {
                            let c = if i == j { vw[(i, i)] } else { vw[(i, j)] + vw[(j, i)] };
                            let mut term_val = 0.0;
                            for r in 0..meta.latents {
                                for rp in 0..meta.latents {
                                    let cj = cp_pair_consts(&p, tags[n], ztags[j], rp);
                                    let pf = pair_expect(
                                        mus[n], ss[n], zs[i], zs[j], ci[r].vhat, cj.vhat,
                                    );
                                    let pref = ci[r].sighat2 * cj.sighat2;
                                    term_val += pref * pf.val;
                                    let base = gn * c;
                                    dmu[n] += base * pref * pf.d_mu;
                                    ds[n] += base * pref * pf.d_s;
                                    dz[i] += base * pref * pf.d_zi;
                                    dz[j] += base * pref * pf.d_zj;
                                    // i-side factor parameters
                                    dscales[slot(tags[n], r)] += base * ci[r].ds2_dlogsig * cj.sighat2 * pf.val;
                                    dscales[slot(ztags[i], r)] += base * ci[r].ds2_dlogsig * cj.sighat2 * pf.val;
                                    dlens[slot(tags[n], r)] += base
                                        * (ci[r].ds2_dlogl_a * cj.sighat2 * pf.val
                                            + pref * pf.d_vi * ci[r].dv_dlogl_a);
                                    dlens[slot(ztags[i], r)] += base
                                        * (ci[r].ds2_dlogl_b * cj.sighat2 * pf.val
                                            + pref * pf.d_vi * ci[r].dv_dlogl_b);
                                    // j-side factor parameters
                                    dscales[slot(tags[n], rp)] += base * cj.ds2_dlogsig * ci[r].sighat2 * pf.val;
                                    dscales[slot(ztags[j], rp)] += base * cj.ds2_dlogsig * ci[r].sighat2 * pf.val;
                                    dlens[slot(tags[n], rp)] += base
                                        * (cj.ds2_dlogl_a * ci[r].sighat2 * pf.val
                                            + pref * pf.d_vj * cj.dv_dlogl_a);
                                    dlens[slot(ztags[j], rp)] += base
                                        * (cj.ds2_dlogl_b * ci[r].sighat2 * pf.val
                                            + pref * pf.d_vj * cj.dv_dlogl_b);
                                }
                            }
                            dw[(i, j)] += gn * term_val;
                            if i != j {
                                dw[(j, i)] += gn * term_val;
                            }
                        }
                    }
                }
                add_full(grads, *mu, &Mat::column(&dmu));
                add_full(grads, *s, &Mat::column(&ds));
                add_full(grads, *z, &Mat::column(&dz));
                add_full(grads, meta.logscales, &Mat::column(&dscales));
                add_full(grads, meta.loglens, &Mat::column(&dlens));
                add_full(grads, *w, &dw);
            }
        }
    }
}
