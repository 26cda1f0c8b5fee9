//! Reverse-mode automatic differentiation over f64 arrays, sized for
//! desk-scale training.
//!
//! Values live on an arena [`Tape`]; creation order is a topological order,
//! so the backward pass is a single reverse sweep. Every operation is a thin
//! wrapper over a pure kernel so inference-only forwards can call the same
//! kernels without recording, guaranteeing bit-identical values on either
//! path.

use ndarray::prelude::*;
use rayon::prelude::*;

pub type NodeId = usize;

type BackFn = Box<
    dyn Fn(&[&ArrayD<f64>], &ArrayD<f64>, &ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>>
        + Send,
>;

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    requires_grad: bool,
    inputs: Vec<NodeId>,
    backward: Option<BackFn>,
}

/// Recording arena for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().next().copied().unwrap()
    }

    /// Gradient of the last `backward` root w.r.t. this node; zeros when the
    /// node never received a contribution.
    pub fn grad(&self, id: NodeId) -> ArrayD<f64> {
        match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => ArrayD::zeros(self.nodes[id].value.raw_dim()),
        }
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: ArrayD<f64>, inputs: Vec<NodeId>, backward: BackFn) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs,
            backward: Some(backward),
        });
        self.nodes.len() - 1
    }

    /// Reverse sweep from a scalar root. Existing gradients are cleared.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be a scalar"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root].grad = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));

        for i in (0..=root).rev() {
            if self.nodes[i].grad.is_none()
                || self.nodes[i].backward.is_none()
                || !self.nodes[i].requires_grad
            {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let contributions = {
                let node = &self.nodes[i];
                let input_vals: Vec<&ArrayD<f64>> =
                    inputs.iter().map(|&j| &self.nodes[j].value).collect();
                (node.backward.as_ref().unwrap())(
                    &input_vals,
                    &node.value,
                    node.grad.as_ref().unwrap(),
                    &needs,
                )
            };
            debug_assert_eq!(contributions.len(), inputs.len());
            for (&j, contrib) in inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.raw_dim(), self.nodes[j].value.raw_dim());
                match &mut self.nodes[j].grad {
                    Some(g) => *g += &c,
                    slot => *slot = Some(c),
                }
            }
        }
    }

    // ----- ops ------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim());
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|_, _, g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            }),
        )
    }

    /// `alpha * a + beta * b`, elementwise over same-shaped inputs.
    pub fn axpby(&mut self, alpha: f64, a: NodeId, beta: f64, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim());
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| alpha * x + beta * y);
        self.push(
            value,
            vec![a, b],
            Box::new(move |_, _, g, needs| {
                vec![
                    needs[0].then(|| g.mapv(|v| alpha * v)),
                    needs[1].then(|| g.mapv(|v| beta * v)),
                ]
            }),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![a],
            Box::new(|inputs, _, g, needs| {
                vec![needs[0].then(|| {
                    ndarray::Zip::from(g)
                        .and(inputs[0])
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 })
                })]
            }),
        )
    }

    /// 2D convolution, stride 1: `x [B,Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize, dil: usize) -> NodeId {
        let value = conv2d(
            &self.value(x).view().into_dimensionality().unwrap(),
            &self.value(w).view().into_dimensionality().unwrap(),
            &self.value(b).view().into_dimensionality().unwrap(),
            pad,
            dil,
        )
        .into_dyn();
        self.push(
            value,
            vec![x, w, b],
            Box::new(move |inputs, _, g, needs| {
                let x4 = inputs[0].view().into_dimensionality::<Ix4>().unwrap();
                let w4 = inputs[1].view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = conv2d_grads(&x4, &w4, &g4, pad, dil, needs[0]);
                vec![
                    dx.map(|d| d.into_dyn()),
                    needs[1].then(|| dw.into_dyn()),
                    needs[2].then(|| db.into_dyn()),
                ]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let value = avg_pool2(&self.value(x).view().into_dimensionality().unwrap()).into_dyn();
        self.push(
            value,
            vec![x],
            Box::new(|inputs, _, g, needs| {
                vec![needs[0].then(|| {
                    avg_pool2_grad(
                        inputs[0].view().into_dimensionality::<Ix4>().unwrap().raw_dim(),
                        &g.view().into_dimensionality().unwrap(),
                    )
                    .into_dyn()
                })]
            }),
        )
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let value =
            global_avg_pool(&self.value(x).view().into_dimensionality().unwrap()).into_dyn();
        self.push(
            value,
            vec![x],
            Box::new(|inputs, _, g, needs| {
                vec![needs[0].then(|| {
                    let dim = inputs[0].view().into_dimensionality::<Ix4>().unwrap().raw_dim();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let scale = 1.0 / (dim[2] * dim[3]) as f64;
                    let mut dx = Array4::<f64>::zeros(dim);
                    for b in 0..dim[0] {
                        for c in 0..dim[1] {
                            dx.slice_mut(s![b, c, .., ..]).fill(g2[[b, c]] * scale);
                        }
                    }
                    dx.into_dyn()
                })]
            }),
        )
    }

    /// Affine layer: `x [B,I] @ w^T [I,O] + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let value = linear(
            &self.value(x).view().into_dimensionality().unwrap(),
            &self.value(w).view().into_dimensionality().unwrap(),
            &self.value(b).view().into_dimensionality().unwrap(),
        )
        .into_dyn();
        self.push(
            value,
            vec![x, w, b],
            Box::new(|inputs, _, g, needs| {
                let x2 = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
                let w2 = inputs[1].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    needs[0].then(|| g2.dot(&w2).into_dyn()),
                    needs[1].then(|| g2.t().dot(&x2).into_dyn()),
                    needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        )
    }

    /// Slice a channel range out of `[B,C,H,W]`.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .slice(s![.., start..start + len, .., ..])
            .to_owned()
            .into_dyn();
        self.push(
            value,
            vec![x],
            Box::new(move |inputs, _, g, needs| {
                vec![needs[0].then(|| {
                    let dim = inputs[0].view().into_dimensionality::<Ix4>().unwrap().raw_dim();
                    let mut dx = Array4::<f64>::zeros(dim);
                    dx.slice_mut(s![.., start..start + len, .., ..])
                        .assign(&g.view().into_dimensionality::<Ix4>().unwrap());
                    dx.into_dyn()
                })]
            }),
        )
    }

    /// Fuse `G` same-shaped branches with per-channel softmax attention:
    /// `out = sum_g softmax_g(logits)[g,c] * ys[g]`.
    ///
    /// `logits` has shape `[G, C]`; the softmax runs over the branch axis, so
    /// the fusion weights of every channel are positive and sum to one.
    pub fn attn_fuse(&mut self, ys: &[NodeId], logits: NodeId) -> NodeId {
        let branch_vals: Vec<ArrayView4<f64>> = ys
            .iter()
            .map(|&id| self.value(id).view().into_dimensionality().unwrap())
            .collect();
        let logits_val = self
            .value(logits)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let value = attn_fuse(&branch_vals, &logits_val).into_dyn();
        drop(branch_vals);
        let n_branches = ys.len();
        let mut inputs = ys.to_vec();
        inputs.push(logits);
        self.push(
            value,
            inputs,
            Box::new(move |inputs, _, g, needs| {
                let branches: Vec<ArrayView4<f64>> = inputs[..n_branches]
                    .iter()
                    .map(|v| v.view().into_dimensionality().unwrap())
                    .collect();
                let logits2 = inputs[n_branches]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (dys, dlogits) =
                    attn_fuse_grads(&branches, &logits2, &g4, &needs[..n_branches], needs[n_branches]);
                let mut out: Vec<Option<ArrayD<f64>>> =
                    dys.into_iter().map(|d| d.map(|a| a.into_dyn())).collect();
                out.push(dlogits.map(|a| a.into_dyn()));
                out
            }),
        )
    }

    /// Mean squared error over all elements, as a 0-dim scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim());
        let value = arr0(mse(self.value(a), self.value(b))).into_dyn();
        self.push(
            value,
            vec![a, b],
            Box::new(|inputs, _, g, needs| {
                let gs = g.iter().next().copied().unwrap();
                let n = inputs[0].len() as f64;
                let scale = 2.0 * gs / n;
                let diff = |sign: f64| {
                    ndarray::Zip::from(inputs[0])
                        .and(inputs[1])
                        .map_collect(|&x, &y| sign * scale * (x - y))
                };
                vec![
                    needs[0].then(|| diff(1.0)),
                    needs[1].then(|| diff(-1.0)),
                ]
            }),
        )
    }

    /// Angular-margin softmax cross-entropy over a batch, as a scalar node.
    ///
    /// `emb [B,E]`, `head_w [C,E]`; class weights are L2-normalized rows of
    /// `head_w`; the true-class logit is `||x|| * psi(theta)` with
    /// `psi(theta) = (-1)^k cos(m theta) - 2k`.
    pub fn asoftmax_loss(
        &mut self,
        emb: NodeId,
        head_w: NodeId,
        labels: &[usize],
        margin: u32,
    ) -> NodeId {
        let labels_owned = labels.to_vec();
        let value = {
            let e2 = self.value(emb).view().into_dimensionality::<Ix2>().unwrap();
            let w2 = self
                .value(head_w)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            arr0(asoftmax_loss(&e2, &w2, &labels_owned, margin)).into_dyn()
        };
        self.push(
            value,
            vec![emb, head_w],
            Box::new(move |inputs, _, g, needs| {
                let gs = g.iter().next().copied().unwrap();
                let e2 = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
                let w2 = inputs[1].view().into_dimensionality::<Ix2>().unwrap();
                let (de, dw) = asoftmax_loss_grads(&e2, &w2, &labels_owned, margin);
                vec![
                    needs[0].then(|| de.mapv(|v| v * gs).into_dyn()),
                    needs[1].then(|| dw.mapv(|v| v * gs).into_dyn()),
                ]
            }),
        )
    }
}

// ----- pure kernels ---------------------------------------------------------

const NORM_EPS: f64 = 1e-12;

/// Output spatial size of a stride-1 convolution.
fn conv_out_len(len: usize, k: usize, pad: usize, dil: usize) -> usize {
    let span = dil * (k - 1);
    assert!(
        len + 2 * pad > span,
        "convolution output would be empty: len {len}, kernel {k}, pad {pad}, dilation {dil}"
    );
    len + 2 * pad - span
}

/// Unroll one item `[Ci,H,W]` into `[Ci*kh*kw, Ho*Wo]` patches.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    pad: usize,
    dil: usize,
) -> (Array2<f64>, usize, usize) {
    let (ci, h, w) = x.dim();
    let ho = conv_out_len(h, kh, pad, dil);
    let wo = conv_out_len(w, kw, pad, dil);
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let di = (ki * dil) as isize - pad as isize;
                let dj = (kj * dil) as isize - pad as isize;
                let oj_lo = (-dj).max(0) as usize;
                let oj_hi = ((w as isize - dj).max(0) as usize).min(wo);
                if oj_lo >= oj_hi {
                    continue;
                }
                for oi in 0..ho {
                    let ii = oi as isize + di;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![
                        c,
                        ii as usize,
                        (oj_lo as isize + dj) as usize..(oj_hi as isize + dj) as usize
                    ]);
                    cols.slice_mut(s![row, oi * wo + oj_lo..oi * wo + oj_hi])
                        .assign(&src);
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Scatter-add transpose of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    dil: usize,
) -> Array3<f64> {
    let ho = conv_out_len(h, kh, pad, dil);
    let wo = conv_out_len(w, kw, pad, dil);
    let mut x = Array3::<f64>::zeros((ci, h, w));
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let di = (ki * dil) as isize - pad as isize;
                let dj = (kj * dil) as isize - pad as isize;
                let oj_lo = (-dj).max(0) as usize;
                let oj_hi = ((w as isize - dj).max(0) as usize).min(wo);
                if oj_lo >= oj_hi {
                    continue;
                }
                for oi in 0..ho {
                    let ii = oi as isize + di;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = cols.slice(s![row, oi * wo + oj_lo..oi * wo + oj_hi]);
                    let mut dst = x.slice_mut(s![
                        c,
                        ii as usize,
                        (oj_lo as isize + dj) as usize..(oj_hi as isize + dj) as usize
                    ]);
                    dst += &src;
                }
            }
        }
    }
    x
}

pub fn conv2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: &ArrayView1<f64>,
    pad: usize,
    dil: usize,
) -> Array4<f64> {
    let (batch, ci, h, wd) = x.dim();
    let (co, wci, kh, kw) = w.dim();
    assert_eq!(ci, wci, "conv2d: input channels {ci} != kernel channels {wci}");
    assert_eq!(b.len(), co);
    let ho = conv_out_len(h, kh, pad, dil);
    let wo = conv_out_len(wd, kw, pad, dil);
    let w2 = w.to_shape((co, ci * kh * kw)).unwrap().to_owned();

    let items: Vec<Array2<f64>> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let (cols, _, _) = im2col(&x.slice(s![bi, .., .., ..]), kh, kw, pad, dil);
            let mut out = w2.dot(&cols);
            for (mut row, &bias) in out.outer_iter_mut().zip(b.iter()) {
                row += bias;
            }
            out
        })
        .collect();

    let mut out = Array4::<f64>::zeros((batch, co, ho, wo));
    for (bi, item) in items.into_iter().enumerate() {
        out.slice_mut(s![bi, .., .., ..])
            .assign(&item.into_shape_with_order((co, ho, wo)).unwrap());
    }
    out
}

/// Gradients of [`conv2d`]: `(dx when requested, dw, db)`.
///
/// Per-item contributions are reduced in batch order so results are
/// bit-reproducible regardless of thread scheduling.
pub fn conv2d_grads(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dout: &ArrayView4<f64>,
    pad: usize,
    dil: usize,
    need_dx: bool,
) -> (Option<Array4<f64>>, Array4<f64>, Array1<f64>) {
    let (batch, ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let k = ci * kh * kw;
    let w2 = w.to_shape((co, k)).unwrap().to_owned();

    struct ItemGrads {
        dw: Array2<f64>,
        db: Array1<f64>,
        dx: Option<Array3<f64>>,
    }

    let items: Vec<ItemGrads> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let (cols, ho, wo) = im2col(&x.slice(s![bi, .., .., ..]), kh, kw, pad, dil);
            let g2 = dout
                .slice(s![bi, .., .., ..])
                .to_shape((co, ho * wo))
                .unwrap()
                .to_owned();
            let dw = g2.dot(&cols.t());
            let db = g2.sum_axis(Axis(1));
            let dx = need_dx.then(|| {
                let dcols = w2.t().dot(&g2);
                col2im(&dcols, ci, h, wd, kh, kw, pad, dil)
            });
            ItemGrads { dw, db, dx }
        })
        .collect();

    let mut dw2 = Array2::<f64>::zeros((co, k));
    let mut db = Array1::<f64>::zeros(co);
    let mut dx = need_dx.then(|| Array4::<f64>::zeros((batch, ci, h, wd)));
    for (bi, item) in items.into_iter().enumerate() {
        dw2 += &item.dw;
        db += &item.db;
        if let (Some(dx4), Some(dx3)) = (dx.as_mut(), item.dx) {
            dx4.slice_mut(s![bi, .., .., ..]).assign(&dx3);
        }
    }
    let dw = dw2.into_shape_with_order((co, ci, kh, kw)).unwrap();
    (dx, dw, db)
}

pub fn avg_pool2(x: &ArrayView4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho >= 1 && wo >= 1, "avg_pool2 on {h}x{w} input");
    Array4::from_shape_fn((b, c, ho, wo), |(bi, ci, i, j)| {
        (x[[bi, ci, 2 * i, 2 * j]]
            + x[[bi, ci, 2 * i, 2 * j + 1]]
            + x[[bi, ci, 2 * i + 1, 2 * j]]
            + x[[bi, ci, 2 * i + 1, 2 * j + 1]])
            / 4.0
    })
}

pub fn avg_pool2_grad(x_dim: Ix4, dout: &ArrayView4<f64>) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(x_dim);
    let (b, c, ho, wo) = dout.dim();
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let g = dout[[bi, ci, i, j]] / 4.0;
                    dx[[bi, ci, 2 * i, 2 * j]] += g;
                    dx[[bi, ci, 2 * i, 2 * j + 1]] += g;
                    dx[[bi, ci, 2 * i + 1, 2 * j]] += g;
                    dx[[bi, ci, 2 * i + 1, 2 * j + 1]] += g;
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &ArrayView4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    Array2::from_shape_fn((b, c), |(bi, ci)| {
        x.slice(s![bi, ci, .., ..]).sum() * scale
    })
}

pub fn linear(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    for mut row in out.outer_iter_mut() {
        row += b;
    }
    out
}

/// Softmax over the branch axis (axis 0) of `[G, C]` logits.
pub fn softmax_over_branches(logits: &ArrayView2<f64>) -> Array2<f64> {
    let (g, c) = logits.dim();
    let mut out = Array2::<f64>::zeros((g, c));
    for col in 0..c {
        let column = logits.column(col);
        let max = column.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for row in 0..g {
            let e = (column[row] - max).exp();
            out[[row, col]] = e;
            denom += e;
        }
        for row in 0..g {
            out[[row, col]] /= denom;
        }
    }
    out
}

pub fn attn_fuse(branches: &[ArrayView4<f64>], logits: &ArrayView2<f64>) -> Array4<f64> {
    let (g, c) = logits.dim();
    assert_eq!(g, branches.len());
    let weights = softmax_over_branches(logits);
    let dim = branches[0].raw_dim();
    assert_eq!(dim[1], c, "attention logits cover {c} channels, branch has {}", dim[1]);
    let mut out = Array4::<f64>::zeros(dim);
    for (gi, branch) in branches.iter().enumerate() {
        assert_eq!(branch.raw_dim(), dim);
        for ci in 0..c {
            let w = weights[[gi, ci]];
            let mut dst = out.slice_mut(s![.., ci, .., ..]);
            dst.scaled_add(w, &branch.slice(s![.., ci, .., ..]));
        }
    }
    out
}

pub fn attn_fuse_grads(
    branches: &[ArrayView4<f64>],
    logits: &ArrayView2<f64>,
    dout: &ArrayView4<f64>,
    need_branches: &[bool],
    need_logits: bool,
) -> (Vec<Option<Array4<f64>>>, Option<Array2<f64>>) {
    let (g, c) = logits.dim();
    let weights = softmax_over_branches(logits);

    let dys: Vec<Option<Array4<f64>>> = branches
        .iter()
        .enumerate()
        .map(|(gi, branch)| {
            need_branches[gi].then(|| {
                let mut dy = Array4::<f64>::zeros(branch.raw_dim());
                for ci in 0..c {
                    let w = weights[[gi, ci]];
                    dy.slice_mut(s![.., ci, .., ..])
                        .assign(&dout.slice(s![.., ci, .., ..]).mapv(|v| v * w));
                }
                dy
            })
        })
        .collect();

    let dlogits = need_logits.then(|| {
        // s[g,c] = <dout, y_g> per channel; softmax jacobian per column.
        let mut scores = Array2::<f64>::zeros((g, c));
        for (gi, branch) in branches.iter().enumerate() {
            for ci in 0..c {
                scores[[gi, ci]] = (&dout.slice(s![.., ci, .., ..])
                    * &branch.slice(s![.., ci, .., ..]))
                    .sum();
            }
        }
        let mut dl = Array2::<f64>::zeros((g, c));
        for ci in 0..c {
            let dot: f64 = (0..g).map(|gi| weights[[gi, ci]] * scores[[gi, ci]]).sum();
            for gi in 0..g {
                dl[[gi, ci]] = weights[[gi, ci]] * (scores[[gi, ci]] - dot);
            }
        }
        dl
    });

    (dys, dlogits)
}

pub fn mse(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let n = a.len() as f64;
    ndarray::Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        / n
}

/// `T_m(t)`, Chebyshev polynomial of the first kind: `cos(m theta)` at
/// `t = cos(theta)`.
fn chebyshev_t(m: u32, t: f64) -> f64 {
    match m {
        0 => 1.0,
        _ => {
            let (mut prev, mut cur) = (1.0, t);
            for _ in 1..m {
                let next = 2.0 * t * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `U_m(t)`, Chebyshev polynomial of the second kind; `d T_m / dt = m U_{m-1}`.
fn chebyshev_u(m: u32, t: f64) -> f64 {
    match m {
        0 => 1.0,
        _ => {
            let (mut prev, mut cur) = (1.0, 2.0 * t);
            for _ in 1..m {
                let next = 2.0 * t * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Margin function `psi(theta) = (-1)^k cos(m theta) - 2k` on the monotone
/// extension, evaluated from `t = cos(theta)`; returns `(psi, dpsi/dt)`.
fn margin_psi(t: f64, m: u32) -> (f64, f64) {
    let theta = t.clamp(-1.0, 1.0).acos();
    let k = ((m as f64 * theta / std::f64::consts::PI).floor() as u32).min(m - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let psi = sign * chebyshev_t(m, t) - 2.0 * k as f64;
    let dpsi = sign * m as f64 * chebyshev_u(m - 1, t);
    (psi, dpsi)
}

fn row_norms(w: &ArrayView2<f64>) -> Array1<f64> {
    w.outer_iter()
        .map(|row| row.dot(&row).sqrt().max(NORM_EPS))
        .collect()
}

struct AsoftmaxForward {
    /// Normalized-weight scores `z[i,j] = <x_i, w_j / ||w_j||>`.
    z: Array2<f64>,
    /// Embedding norms (floored at eps).
    r: Array1<f64>,
    /// Margin-adjusted softmax probabilities.
    probs: Array2<f64>,
    /// `cos(theta)` of the true class per sample.
    t_true: Array1<f64>,
    loss: f64,
}

fn asoftmax_forward(
    emb: &ArrayView2<f64>,
    head_w: &ArrayView2<f64>,
    labels: &[usize],
    margin: u32,
) -> AsoftmaxForward {
    assert!(margin >= 1, "margin must be >= 1");
    let (batch, _) = emb.dim();
    let (classes, _) = head_w.dim();
    assert_eq!(batch, labels.len(), "labels must match the batch size");
    assert!(batch > 0, "empty batch");
    assert!(labels.iter().all(|&y| y < classes));

    let norms = row_norms(head_w);
    let mut z = emb.dot(&head_w.t());
    for (mut col, &n) in z.axis_iter_mut(Axis(1)).zip(norms.iter()) {
        col.mapv_inplace(|v| v / n);
    }
    let r: Array1<f64> = emb
        .outer_iter()
        .map(|row| row.dot(&row).sqrt().max(NORM_EPS))
        .collect();

    let mut logits = z.clone();
    let mut t_true = Array1::<f64>::zeros(batch);
    for (i, &y) in labels.iter().enumerate() {
        let t = (z[[i, y]] / r[i]).clamp(-1.0, 1.0);
        t_true[i] = t;
        let (psi, _) = margin_psi(t, margin);
        logits[[i, y]] = r[i] * psi;
    }

    let mut probs = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            probs[[i, j]] = e / denom;
        }
        loss -= (probs[[i, y]].max(f64::MIN_POSITIVE)).ln();
    }
    loss /= batch as f64;

    AsoftmaxForward {
        z,
        r,
        probs,
        t_true,
        loss,
    }
}

/// Loss value only (shared by the recorded op and the report-level loss).
pub fn asoftmax_loss(
    emb: &ArrayView2<f64>,
    head_w: &ArrayView2<f64>,
    labels: &[usize],
    margin: u32,
) -> f64 {
    asoftmax_forward(emb, head_w, labels, margin).loss
}

/// A-softmax loss evaluated from precomputed normalized-weight scores `z`
/// and embedding norms `r` (used when only the score-level view exists).
pub fn asoftmax_loss_from_scores(
    z: &ArrayView2<f64>,
    r: &ArrayView1<f64>,
    labels: &[usize],
    margin: u32,
) -> f64 {
    assert!(margin >= 1);
    let batch = z.nrows();
    assert_eq!(batch, labels.len());
    assert!(batch > 0);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let r_i = r[i].max(NORM_EPS);
        let mut logits: Vec<f64> = z.row(i).to_vec();
        let t = (logits[y] / r_i).clamp(-1.0, 1.0);
        let (psi, _) = margin_psi(t, margin);
        logits[y] = r_i * psi;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        loss -= (logits[y] - max) - denom.ln();
    }
    loss / batch as f64
}

/// Analytic gradients of [`asoftmax_loss`] w.r.t. embeddings and head
/// weights.
pub fn asoftmax_loss_grads(
    emb: &ArrayView2<f64>,
    head_w: &ArrayView2<f64>,
    labels: &[usize],
    margin: u32,
) -> (Array2<f64>, Array2<f64>) {
    let fwd = asoftmax_forward(emb, head_w, labels, margin);
    let (batch, edim) = emb.dim();
    let (classes, _) = head_w.dim();
    let norms = row_norms(head_w);
    let hat_w: Vec<Array1<f64>> = head_w
        .outer_iter()
        .zip(norms.iter())
        .map(|(row, &n)| row.mapv(|v| v / n))
        .collect();

    let mut demb = Array2::<f64>::zeros((batch, edim));
    let mut dw = Array2::<f64>::zeros((classes, edim));
    let inv_b = 1.0 / batch as f64;

    for (i, &y) in labels.iter().enumerate() {
        let x = emb.row(i);
        let r = fwd.r[i];
        let x_hat = x.mapv(|v| v / r);
        let t = fwd.t_true[i];
        let (psi, dpsi) = margin_psi(t, margin);
        for j in 0..classes {
            let g = (fwd.probs[[i, j]] - if j == y { 1.0 } else { 0.0 }) * inv_b;
            if g == 0.0 {
                continue;
            }
            let z_ij = fwd.z[[i, j]];
            if j == y {
                // l = r * psi(t), t = z/r.
                let mut dx = demb.row_mut(i);
                dx.scaled_add(g * psi, &x_hat);
                dx.scaled_add(g * dpsi, &hat_w[j]);
                dx.scaled_add(-g * dpsi * t, &x_hat);
                let mut dwj = dw.row_mut(j);
                dwj.scaled_add(g * dpsi / norms[j], &x);
                dwj.scaled_add(-g * dpsi * z_ij / norms[j], &hat_w[j]);
            } else {
                // l = z = <x, w/||w||>.
                demb.row_mut(i).scaled_add(g, &hat_w[j]);
                let mut dwj = dw.row_mut(j);
                dwj.scaled_add(g / norms[j], &x);
                dwj.scaled_add(-g * z_ij / norms[j], &hat_w[j]);
            }
        }
    }
    (demb, dw)
}

/// Normalized-weight class scores `[B,C]`: `z[i,j] = <x_i, w_j/||w_j||>`.
pub fn normalized_scores(emb: &ArrayView2<f64>, head_w: &ArrayView2<f64>) -> Array2<f64> {
    let norms = row_norms(head_w);
    let mut z = emb.dot(&head_w.t());
    for (mut col, n) in z.axis_iter_mut(Axis(1)).zip(norms.iter()) {
        col.mapv_inplace(|v| v / n);
    }
    z
}
