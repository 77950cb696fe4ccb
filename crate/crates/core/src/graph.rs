//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Operations are coarse (convolution, batch norm, restyle, the
//! individual loss terms) with hand-written adjoints; all arithmetic is `f64`.

use crate::error::{shape_err, Error, Result};
use crate::featstats;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Running-statistics update produced by a batch-norm node in training mode.
/// The trainer applies these after the optimizer step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub momentum: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: Conv2dSpec,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Add(NodeId, NodeId),
    SpatialMean(NodeId),
    SpatialStd(NodeId),
    Restyle {
        x: NodeId,
        mu_src: NodeId,
        sd_src: NodeId,
        mu_dst: NodeId,
        sd_dst: NodeId,
        eps: f64,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SelectRows {
        a: NodeId,
        b: NodeId,
        take_a: Vec<bool>,
    },
    Mix {
        alpha: NodeId,
        a: NodeId,
        b: NodeId,
    },
    Softmax(NodeId),
    CrossEntropy {
        p: NodeId,
        labels: Vec<usize>,
        floor: f64,
    },
    Entropy(NodeId),
    ClosedMargin {
        p: NodeId,
        open_index: usize,
    },
    BandHinge {
        x: NodeId,
        target: NodeId,
        lo: f64,
        hi: f64,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    Dot {
        x: NodeId,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    train: bool,
    bn_updates: Vec<BnUpdate>,
    clamped_ce: usize,
}

/// Accumulated gradients returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_nodes
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|n| self.wrt(n))
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet, train: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            train,
            bn_updates: Vec::new(),
            clamped_ce: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Number of cross-entropy terms whose true-class posterior hit the floor.
    pub fn clamped_ce_terms(&self) -> usize {
        self.clamped_ce
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks on activations).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Constant copy of an existing node's value: cuts the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.input(v)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let entry = self.params.entry(id);
        let n = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = self.param(w);
        let b = self.param(b);
        let (n, k) = self.value(x).dims2()?;
        let (m, k2) = self.value(w).dims2()?;
        if k != k2 || self.value(b).len() != m {
            return shape_err(format!(
                "linear: input {:?}, weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            ));
        }
        let mut y = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            &mut y,
            (m, 1),
            0.0,
        );
        let bias = self.value(b).data();
        for row in y.chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        spec: Conv2dSpec,
    ) -> Result<NodeId> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, ci2, kh, kw) = self.value(w).dims4()?;
        if ci != ci2 {
            return shape_err(format!("conv2d: input has {ci} channels, kernel expects {ci2}"));
        }
        let geo = ConvGeometry::new(n, ci, h, wd, kh, kw, spec)?;
        let cols = im2col(self.value(x).data(), &geo);
        let k = geo.k();
        let np = geo.np();
        let mut tmp = vec![0.0; co * np];
        gemm(
            co,
            k,
            np,
            self.value(w).data(),
            (k, 1),
            &cols,
            (np, 1),
            &mut tmp,
            (np, 1),
            0.0,
        );
        let p = geo.ho * geo.wo;
        let mut y = vec![0.0; n * co * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for c in 0..co {
            let bc = bias.as_ref().map_or(0.0, |bb| bb[c]);
            for bi in 0..n {
                let src = &tmp[c * np + bi * p..c * np + (bi + 1) * p];
                let dst = &mut y[(bi * co + c) * p..(bi * co + c + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, co, geo.ho, geo.wo], y)?,
            Op::Conv2d { x, w, b, spec },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn max_pool(&mut self, x: NodeId, spec: PoolSpec) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h + 2 * spec.pad < spec.kernel || w + 2 * spec.pad < spec.kernel {
            return shape_err(format!("max_pool: {h}x{w} smaller than kernel {}", spec.kernel));
        }
        let ho = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        let wo = (w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let off = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..spec.kernel {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = off + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_i = idx;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], y)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = featstats::spatial_mean(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    /// Batch normalization over every axis except axis 1. Uses batch
    /// statistics in training graphs and running statistics otherwise.
    pub fn batch_norm(&mut self, x: NodeId, bn: &BatchNormParams) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return shape_err(format!("batch_norm: need at least 2 axes, got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let xd = self.value(x).data();
        let m = n * s;
        let (mean, var) = if self.train {
            if m < 2 {
                return Err(Error::InvalidValue(
                    "batch_norm: training statistics need more than one value per channel".into(),
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..n {
                for ch in 0..c {
                    let base = (bi * c + ch) * s;
                    mean[ch] += xd[base..base + s].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for bi in 0..n {
                for ch in 0..c {
                    let base = (bi * c + ch) * s;
                    var[ch] += xd[base..base + s]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (
                self.params.get(bn.running_mean).data().to_vec(),
                self.params.get(bn.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for i in base..base + s {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        if self.train {
            let scale = m as f64 / (m as f64 - 1.0);
            self.bn_updates.push(BnUpdate {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                batch_mean: mean,
                batch_var_unbiased: var.iter().map(|v| v * scale).collect(),
                momentum: bn.momentum,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = self.train;
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = featstats::spatial_mean(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SpatialMean(x), rg))
    }

    pub fn spatial_std(&mut self, x: NodeId) -> Result<NodeId> {
        let v = featstats::spatial_std(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SpatialStd(x), rg))
    }

    /// `mu_dst + sd_dst * (x - mu_src) / (sd_src + eps)` per instance and channel.
    pub fn restyle(
        &mut self,
        x: NodeId,
        mu_src: NodeId,
        sd_src: NodeId,
        mu_dst: NodeId,
        sd_dst: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = featstats::restyle_raw(
            self.value(x),
            self.value(mu_src).data(),
            self.value(sd_src).data(),
            self.value(mu_dst).data(),
            self.value(sd_dst).data(),
            eps,
        )?;
        let rg = [x, mu_src, sd_src, mu_dst, sd_dst]
            .iter()
            .any(|&i| self.rg(i));
        Ok(self.push(
            v,
            Op::Restyle {
                x,
                mu_src,
                sd_src,
                mu_dst,
                sd_dst,
                eps,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pw) = self.value(p).dims2()?;
            if pn != n {
                return shape_err(format!("concat_cols: {pn} rows vs {n}"));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, w) = self.value(x).dims2()?;
        if start + len > w {
            return shape_err(format!("slice_cols {start}..{} of {w}", start + len));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..n)
            .flat_map(|r| xd[r * w + start..r * w + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    /// Row `i` of the output is row `i` of `a` when `take_a[i]`, else of `b`.
    pub fn select_rows(&mut self, a: NodeId, b: NodeId, take_a: Vec<bool>) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rows() != take_a.len() {
            return shape_err(format!(
                "select_rows: {:?} vs {:?} with {} flags",
                va.shape(),
                vb.shape(),
                take_a.len()
            ));
        }
        let mut out = Vec::with_capacity(va.len());
        for (i, &t) in take_a.iter().enumerate() {
            out.extend_from_slice(if t { va.row(i) } else { vb.row(i) });
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::SelectRows { a, b, take_a }, rg))
    }

    /// `alpha * a + (1 - alpha) * b`, elementwise.
    pub fn mix(&mut self, alpha: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (al, va, vb) = (self.value(alpha), self.value(a), self.value(b));
        if al.shape() != va.shape() || va.shape() != vb.shape() {
            return shape_err(format!(
                "mix: alpha {:?}, a {:?}, b {:?}",
                al.shape(),
                va.shape(),
                vb.shape()
            ));
        }
        let out = al
            .data()
            .iter()
            .zip(va.data().iter().zip(vb.data()))
            .map(|(t, (x, y))| t * x + (1.0 - t) * y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(alpha) || self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mix { alpha, a, b }, rg))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, k) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// Mean of `-ln p[label]` over rows; probabilities below `floor` are clamped.
    pub fn cross_entropy(&mut self, p: NodeId, labels: &[usize], floor: f64) -> Result<NodeId> {
        let (n, k) = self.value(p).dims2()?;
        if n != labels.len() || n == 0 {
            return shape_err(format!("cross_entropy: {n} rows, {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label(format!("label {bad} out of range for {k} classes")));
        }
        let pd = self.value(p).data();
        let mut total = 0.0;
        let mut clamped = 0;
        for (r, &l) in labels.iter().enumerate() {
            let v = pd[r * k + l];
            if v < floor {
                clamped += 1;
            }
            total -= v.max(floor).ln();
        }
        if clamped > 0 {
            log::warn!("cross-entropy: {clamped} posteriors clamped to {floor:e}");
            self.clamped_ce += clamped;
        }
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        ))
    }

    /// Mean Shannon entropy (natural log) of the rows of `p`.
    pub fn entropy(&mut self, p: NodeId) -> Result<NodeId> {
        let (n, k) = self.value(p).dims2()?;
        if n == 0 {
            return Err(Error::Empty("entropy over zero rows".into()));
        }
        let total: f64 = self
            .value(p)
            .data()
            .chunks(k)
            .map(crate::losses::row_entropy)
            .sum();
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::Entropy(p), rg))
    }

    /// Mean of `|p[open] - max_{k<open} p[k]|` over rows.
    pub fn closed_margin(&mut self, p: NodeId, open_index: usize) -> Result<NodeId> {
        let (n, k) = self.value(p).dims2()?;
        if n == 0 {
            return Err(Error::Empty("closed margin over zero rows".into()));
        }
        if open_index == 0 || open_index >= k {
            return shape_err(format!("closed_margin: open index {open_index} with {k} columns"));
        }
        let total: f64 = self
            .value(p)
            .data()
            .chunks(k)
            .map(|row| crate::losses::row_closed_margin(row, open_index).0)
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::ClosedMargin { p, open_index },
            rg,
        ))
    }

    /// Mean over rows of the band hinge on the L2 distance between rows of
    /// `x` and `target`.
    pub fn band_hinge(&mut self, x: NodeId, target: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (vx, vt) = (self.value(x), self.value(target));
        if vx.shape() != vt.shape() {
            return shape_err(format!("band_hinge: {:?} vs {:?}", vx.shape(), vt.shape()));
        }
        let (n, k) = vx.dims2()?;
        if n == 0 {
            return Err(Error::Empty("band hinge over zero rows".into()));
        }
        let total: f64 = vx
            .data()
            .chunks(k)
            .zip(vt.data().chunks(k))
            .map(|(a, b)| crate::stylesynth::band_hinge(l2_distance(a, b), lo, hi))
            .sum();
        let rg = self.rg(x) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::BandHinge { x, target, lo, hi },
            rg,
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            if self.value(id).len() != 1 {
                return shape_err("weighted_sum expects scalar terms");
            }
            total += w * self.value(id).item();
        }
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// `sum(x * weights)`; turns any tensor into a scalar for gradient checks.
    pub fn dot(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return shape_err("dot: weight length mismatch");
        }
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights }, rg))
    }

    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return shape_err("backward needs a scalar root");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.rg(id) {
            return;
        }
        let len = self.value(id).len();
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2()?;
                let m = self.value(*w).shape()[0];
                self.acc_with(grads, *x, |dx| {
                    gemm(n, m, k, gy, (m, 1), self.value(*w).data(), (k, 1), dx, (k, 1), 1.0)
                });
                self.acc_with(grads, *w, |dw| {
                    gemm(m, n, k, gy, (1, m), self.value(*x).data(), (k, 1), dw, (k, 1), 1.0)
                });
                self.acc_with(grads, *b, |db| {
                    for row in gy.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => {
                let (n, ci, h, wd) = self.value(*x).dims4()?;
                let (co, _, kh, kw) = self.value(*w).dims4()?;
                let geo = ConvGeometry::new(n, ci, h, wd, kh, kw, *spec)?;
                let (k, np, p) = (geo.k(), geo.np(), geo.ho * geo.wo);
                let mut gt = vec![0.0; co * np];
                for bi in 0..n {
                    for c in 0..co {
                        gt[c * np + bi * p..c * np + (bi + 1) * p]
                            .copy_from_slice(&gy[(bi * co + c) * p..(bi * co + c + 1) * p]);
                    }
                }
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += gt[c * np..(c + 1) * np].iter().sum::<f64>();
                        }
                    });
                }
                if self.rg(*w) {
                    let cols = im2col(self.value(*x).data(), &geo);
                    self.acc_with(grads, *w, |dw| {
                        gemm(co, np, k, &gt, (np, 1), &cols, (1, np), dw, (k, 1), 1.0)
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; k * np];
                    gemm(
                        k,
                        co,
                        np,
                        self.value(*w).data(),
                        (1, k),
                        &gt,
                        (np, 1),
                        &mut dcols,
                        (np, 1),
                        0.0,
                    );
                    self.acc_with(grads, *x, |dx| col2im(&dcols, &geo, dx));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let g = gy.iter().zip(yv).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(grads, *x, g);
            }
            Op::MaxPool { x, argmax } => {
                self.acc_with(grads, *x, |dx| {
                    for (g, &idx) in gy.iter().zip(argmax) {
                        if idx != usize::MAX {
                            dx[idx] += g;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) | Op::SpatialMean(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                self.acc_with(grads, *x, |dx| {
                    for (plane, g) in gy.iter().enumerate() {
                        let s = g / hw as f64;
                        dx[plane * hw..(plane + 1) * hw]
                            .iter_mut()
                            .for_each(|d| *d += s);
                    }
                });
            }
            Op::SpatialStd(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let sd = node.value.data();
                self.acc_with(grads, *x, |dx| {
                    for (plane, g) in gy.iter().enumerate() {
                        if sd[plane] <= 0.0 {
                            continue;
                        }
                        let xs = &xv[plane * hw..(plane + 1) * hw];
                        let mean = xs.iter().sum::<f64>() / hw as f64;
                        let scale = g / (hw as f64 * sd[plane]);
                        for (d, v) in dx[plane * hw..(plane + 1) * hw].iter_mut().zip(xs) {
                            *d += scale * (v - mean);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let m = (n * s) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for j in base..base + s {
                            dgamma[ch] += gy[j] * xhat[j];
                            dbeta[ch] += gy[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * s;
                            for j in base..base + s {
                                dx[j] = if *batch_stats {
                                    gv[ch] * inv_std[ch] / m
                                        * (m * gy[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    gy[j] * gv[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.to_vec());
                self.acc(grads, *b, gy.to_vec());
            }
            Op::Restyle {
                x,
                mu_src,
                sd_src,
                mu_dst,
                sd_dst,
                eps,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let (mo, so) = (self.value(*mu_src).data(), self.value(*sd_src).data());
                let st = self.value(*sd_dst).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dmo = vec![0.0; n * c];
                let mut dso = vec![0.0; n * c];
                let mut dmt = vec![0.0; n * c];
                let mut dst = vec![0.0; n * c];
                for plane in 0..n * c {
                    let denom = so[plane] + eps;
                    let gain = st[plane] / denom;
                    let xs = &xv[plane * hw..(plane + 1) * hw];
                    let gs = &gy[plane * hw..(plane + 1) * hw];
                    let (mut sg, mut sgz) = (0.0, 0.0);
                    for (j, (&g, &v)) in gs.iter().zip(xs).enumerate() {
                        let centered = v - mo[plane];
                        dx[plane * hw + j] = g * gain;
                        sg += g;
                        sgz += g * centered;
                    }
                    dmt[plane] = sg;
                    dst[plane] = sgz / denom;
                    dmo[plane] = -sg * gain;
                    dso[plane] = -sgz * st[plane] / (denom * denom);
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *mu_src, dmo);
                self.acc(grads, *sd_src, dso);
                self.acc(grads, *mu_dst, dmt);
                self.acc(grads, *sd_dst, dst);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.row_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.rg(p) {
                        let g: Vec<f64> = (0..n)
                            .flat_map(|r| gy[r * total + offset..r * total + offset + w].iter().copied())
                            .collect();
                        self.acc(grads, p, g);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, w) = self.value(*x).dims2()?;
                let len = node.value.row_len();
                self.acc_with(grads, *x, |dx| {
                    for r in 0..n {
                        for j in 0..len {
                            dx[r * w + start + j] += gy[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, gy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let k = node.value.row_len();
                self.acc_with(grads, *x, |dx| {
                    dx[start * k..start * k + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(d, g)| *d += g);
                });
            }
            Op::SelectRows { a, b, take_a } => {
                let k = node.value.row_len();
                for (target, want) in [(*a, true), (*b, false)] {
                    self.acc_with(grads, target, |d| {
                        for (r, &t) in take_a.iter().enumerate() {
                            if t == want {
                                for j in r * k..(r + 1) * k {
                                    d[j] += gy[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Mix { alpha, a, b } => {
                let (al, va, vb) = (
                    self.value(*alpha).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                );
                if self.rg(*alpha) {
                    let g = gy
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| g * (x - y))
                        .collect();
                    self.acc(grads, *alpha, g);
                }
                if self.rg(*a) {
                    self.acc(grads, *a, gy.iter().zip(al).map(|(g, t)| g * t).collect());
                }
                if self.rg(*b) {
                    self.acc(
                        grads,
                        *b,
                        gy.iter().zip(al).map(|(g, t)| g * (1.0 - t)).collect(),
                    );
                }
            }
            Op::Softmax(x) => {
                let k = node.value.row_len();
                let p = node.value.data();
                let mut dx = vec![0.0; p.len()];
                for ((dr, pr), gr) in dx.chunks_mut(k).zip(p.chunks(k)).zip(gy.chunks(k)) {
                    let dotp: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = pr[j] * (gr[j] - dotp);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { p, labels, floor } => {
                let (n, k) = self.value(*p).dims2()?;
                let pv = self.value(*p).data();
                let scale = gy[0] / n as f64;
                self.acc_with(grads, *p, |dp| {
                    for (r, &l) in labels.iter().enumerate() {
                        let v = pv[r * k + l];
                        if v >= *floor {
                            dp[r * k + l] -= scale / v;
                        }
                    }
                });
            }
            Op::Entropy(p) => {
                let (n, _) = self.value(*p).dims2()?;
                let pv = self.value(*p).data();
                let scale = gy[0] / n as f64;
                let g = pv
                    .iter()
                    .map(|&v| if v > 0.0 { -scale * (v.ln() + 1.0) } else { 0.0 })
                    .collect();
                self.acc(grads, *p, g);
            }
            Op::ClosedMargin { p, open_index } => {
                let (n, k) = self.value(*p).dims2()?;
                let pv = self.value(*p).data();
                let scale = gy[0] / n as f64;
                self.acc_with(grads, *p, |dp| {
                    for (r, row) in pv.chunks(k).enumerate() {
                        let (_, top, sign) = crate::losses::row_closed_margin(row, *open_index);
                        dp[r * k + open_index] += scale * sign;
                        dp[r * k + top] -= scale * sign;
                    }
                });
            }
            Op::BandHinge { x, target, lo, hi } => {
                let (n, k) = self.value(*x).dims2()?;
                let (xv, tv) = (self.value(*x).data(), self.value(*target).data());
                let scale = gy[0] / n as f64;
                let mut gx = vec![0.0; xv.len()];
                for r in 0..n {
                    let (a, b) = (&xv[r * k..(r + 1) * k], &tv[r * k..(r + 1) * k]);
                    let d = l2_distance(a, b);
                    let slope = if d < *lo {
                        -1.0
                    } else if d > *hi {
                        1.0
                    } else {
                        0.0
                    };
                    if slope == 0.0 || d == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        gx[r * k + j] = scale * slope * (a[j] - b[j]) / d;
                    }
                }
                if self.rg(*target) {
                    self.acc(grads, *target, gx.iter().map(|v| -v).collect());
                }
                self.acc(grads, *x, gx);
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    self.acc(grads, id, vec![gy[0] * w]);
                }
            }
            Op::Dot { x, weights } => {
                self.acc(grads, *x, weights.iter().map(|w| w * gy[0]).collect());
            }
        }
        Ok(())
    }
}

/// Logistic function, kept strictly inside `(0, 1)` even where `f64`
/// would round to an endpoint.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `C = A * B + beta * C` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs
    };
    assert!(k == 0 || max_index(m, k, a_strides) < a.len());
    assert!(k == 0 || max_index(k, n, b_strides) < b.len());
    assert!(max_index(m, n, c_strides) < c.len());
    // SAFETY: the assertions above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        if spec.stride == 0 || h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return shape_err(format!("conv2d: {h}x{w} input too small for {kh}x{kw} kernel"));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
            ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
            wo: (w + 2 * spec.pad - kw) / spec.stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn np(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(col_row, col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for b in 0..self.n {
                        let xoff = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(
                                    row,
                                    b * p + oy * self.wo + ox,
                                    xoff + iy as usize * self.w + ix as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let np = geo.np();
    let mut cols = vec![0.0; geo.k() * np];
    geo.for_each_tap(|row, col, src| cols[row * np + col] = x[src]);
    cols
}

fn col2im(dcols: &[f64], geo: &ConvGeometry, dx: &mut [f64]) {
    let np = geo.np();
    geo.for_each_tap(|row, col, dst| dx[dst] += dcols[row * np + col]);
}
