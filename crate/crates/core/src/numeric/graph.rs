//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, so the node list is
//! already topologically sorted and `backward` is a single reverse sweep.
//! Values are owned by the graph; a fresh graph is built per forward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::params::{ParamId, ParamStore};
use crate::numeric::tensor::{matmul, matmul_at, matmul_bt, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv3x3(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    NeighborMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    MaskRows {
        x: Var,
        mask: Arc<Vec<f64>>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        row_weight: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    PairHinge {
        x: Var,
        groups: Vec<usize>,
        delta: f64,
        same_group: bool,
        pairs: usize,
    },
    RowDistanceMean {
        pred: Var,
        target: Vec<f64>,
        defined: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed during a training-mode forward pass, to be
/// folded into the running estimates after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(Error::shape(op, format!("expected [B,H,W,C], got {s:?}"))),
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), false)
    }

    /// Free input that receives a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf(Some(id)), p.trainable)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same numel");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x[.., C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// `x[.., K] · w[K, N]` applied row-wise.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (k, n) = match *self.shape(w) {
            [k, n] => (k, n),
            ref s => return Err(Error::shape("matmul", format!("weight must be rank 2, got {s:?}"))),
        };
        if xs.is_empty() || *xs.last().unwrap() != k {
            return Err(Error::shape(
                "matmul",
                format!("input {xs:?} incompatible with weight [{k}, {n}]"),
            ));
        }
        let m = self.value(x).rows();
        let mut out = vec![0.0; m * n];
        matmul(m, k, n, self.value(x).data(), self.value(w).data(), &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::MatMul(x, w), rg))
    }

    /// Stride-1, same-padded 3×3 convolution of `[B,H,W,Cin]` with a
    /// `[3,3,Cin,Cout]` kernel.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, h, wd, cin) = dims4(self.value(x), "conv3x3")?;
        let cout = match *self.shape(w) {
            [3, 3, ci, co] if ci == cin => co,
            ref s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("kernel {s:?} incompatible with input channels {cin}"),
                ))
            }
        };
        let hw = h * wd;
        let mut out = vec![0.0; b * hw * cout];
        let mut cols = vec![0.0; hw * 9 * cin];
        for bi in 0..b {
            let img = &self.value(x).data()[bi * hw * cin..(bi + 1) * hw * cin];
            im2col(img, h, wd, cin, &mut cols);
            matmul(
                hw,
                9 * cin,
                cout,
                &cols,
                self.value(w).data(),
                &mut out[bi * hw * cout..(bi + 1) * hw * cout],
                false,
            );
        }
        let t = Tensor::new(vec![b, h, wd, cout], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv3x3(x, w), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same numel");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Per-channel batch normalization over every axis but the last.
    ///
    /// Training graphs normalize with batch statistics and queue a
    /// [`BnUpdate`]; inference graphs use the frozen running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        if store.value(gamma).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?}, gamma {:?}", self.shape(x), store.value(gamma).shape()),
            ));
        }
        let rows = self.value(x).rows();
        let (mean, var) = if self.training {
            if rows == 0 {
                return Err(Error::shape("batch_norm", "empty batch in training mode"));
            }
            let mut mean = vec![0.0; c];
            for row in self.value(x).data().chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in self.value(x).data().chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                mean: mean.clone(),
                var: var.clone(),
                count: rows,
            });
            (mean, var)
        } else {
            (
                store.value(running_mean).data().to_vec(),
                store.value(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = store.value(gamma).data();
        let bt = store.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (xr, or) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for ch in 0..c {
                xr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                or[ch] = g[ch] * xr[ch] + bt[ch];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        let batch_stats = self.training;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = dims4(self.value(x), "maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2x2", format!("odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                        let o = ((bi * oh + i) * ow + j) * c + ch;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, oh, ow, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = dims4(self.value(x), "upsample2x2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let s = ((bi * h + i / 2) * w + j / 2) * c;
                    let o = ((bi * oh + i) * ow + j) * c;
                    out[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let t = Tensor::new(vec![b, oh, ow, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2(x), rg))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let lead = &self.shape(xs[0])[..self.shape(xs[0]).len().saturating_sub(1)];
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(xs[0]), s),
                ));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(xs[0]).rows();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &cw) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + cw]
                    .copy_from_slice(&src[r * cw..(r + 1) * cw]);
            }
            offset += cw;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same numel");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// `out[i] = max_{j ∈ nbrs(i)} x[j]` channel-wise; `neighbors` is a
    /// row-major `N×k` index table.
    pub fn neighbor_max(&mut self, x: Var, neighbors: &[usize], k: usize) -> Result<Var> {
        let n = self.value(x).rows();
        let c = self.value(x).last_dim();
        if self.value(x).rank() != 2 || k == 0 || neighbors.len() != n * k {
            return Err(Error::shape(
                "neighbor_max",
                format!("input {:?}, table of {} entries with k={k}", self.shape(x), neighbors.len()),
            ));
        }
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= n) {
            return Err(Error::shape("neighbor_max", format!("neighbor index {bad} >= {n}")));
        }
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for &j in &neighbors[i * k..(i + 1) * k] {
                for ch in 0..c {
                    let v = src[j * c + ch];
                    if v > out[i * c + ch] {
                        out[i * c + ch] = v;
                        argmax[i * c + ch] = j * c + ch;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NeighborMax { x, argmax }, rg))
    }

    /// Row gather from a rank-2 input.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).rows();
        let c = self.value(x).last_dim();
        if self.value(x).rank() != 2 {
            return Err(Error::shape("gather_rows", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} >= {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Multiply row `i` (rows over the last axis) by `mask[i]`.
    pub fn mask_rows(&mut self, x: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return Err(Error::shape(
                "mask_rows",
                format!("{rows} rows, mask of {}", mask.len()),
            ));
        }
        let c = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for (row, m) in data.chunks_mut(c.max(1)).zip(mask.iter()) {
            row.iter_mut().for_each(|v| *v *= m);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskRows { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Weighted mean of the negative log-softmax of the true class:
    /// `Σ_i w[y_i]·(−log p_i[y_i]) / Σ_i w[y_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let n = self.value(logits).rows();
        if self.value(logits).rank() != 2 || labels.len() != n || class_weights.len() != k {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?}, {} labels, {} class weights",
                    self.shape(logits),
                    labels.len(),
                    class_weights.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        if class_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("class weights must be positive".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        let mut row_weight = Vec::with_capacity(n);
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let lse = log_sum_exp(row);
            let w = class_weights[y];
            loss += w * (lse - row[y]);
            total_weight += w;
            row_weight.push(w);
            softmax_in_place(row);
        }
        let value = if total_weight > 0.0 { loss / total_weight } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                row_weight,
                probs,
                total_weight,
            },
            rg,
        ))
    }

    /// Mean hinge over row pairs `i < j`. With `same_group` the pairs are
    /// those sharing a group and the hinge is `[‖x_i−x_j‖ − δ]₊`; otherwise
    /// pairs from different groups with `[δ − ‖x_i−x_j‖]₊`. No pairs → 0.
    pub fn pair_hinge(&mut self, x: Var, groups: &[usize], delta: f64, same_group: bool) -> Result<Var> {
        let n = self.value(x).rows();
        let d = self.value(x).last_dim();
        if self.value(x).rank() != 2 || groups.len() != n {
            return Err(Error::shape(
                "pair_hinge",
                format!("input {:?} with {} group ids", self.shape(x), groups.len()),
            ));
        }
        let data = self.value(x).data();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..n {
            let xi = &data[i * d..(i + 1) * d];
            for j in i + 1..n {
                if (groups[i] == groups[j]) != same_group {
                    continue;
                }
                pairs += 1;
                let s = euclidean(xi, &data[j * d..(j + 1) * d]);
                total += if same_group {
                    (s - delta).max(0.0)
                } else {
                    (delta - s).max(0.0)
                };
            }
        }
        let value = if pairs > 0 { total / pairs as f64 } else { 0.0 };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(value),
            Op::PairHinge {
                x,
                groups: groups.to_vec(),
                delta,
                same_group,
                pairs,
            },
            rg,
        ))
    }

    /// Mean Euclidean distance between `pred` rows and constant `target`
    /// rows, over rows flagged in `defined`. No defined rows → 0.
    pub fn row_distance_mean(&mut self, pred: Var, target: &Tensor, defined: &[bool]) -> Result<Var> {
        if self.shape(pred) != target.shape() || self.value(pred).rank() != 2 || defined.len() != target.rows() {
            return Err(Error::shape(
                "row_distance_mean",
                format!(
                    "pred {:?}, target {:?}, mask of {}",
                    self.shape(pred),
                    target.shape(),
                    defined.len()
                ),
            ));
        }
        let d = target.last_dim();
        let p = self.value(pred).data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, &def) in defined.iter().enumerate() {
            if def {
                total += euclidean(&p[i * d..(i + 1) * d], &target.data()[i * d..(i + 1) * d]);
                count += 1;
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::RowDistanceMean {
                pred,
                target: target.data().to_vec(),
                defined: defined.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are retrievable with
    /// [`Graph::grad`] and can be folded into a [`ParamStore`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add gradients of parameter leaves into `store` (accumulating).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Fold queued batch statistics into running estimates:
    /// `r ← (1−m)·r + m·batch`, with the unbiased batch variance.
    pub fn commit_bn_stats(&mut self, store: &mut ParamStore, momentum: f64) {
        for u in self.bn_updates.drain(..) {
            let unbias = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            let rm = store.get_mut(u.running_mean).value.data_mut();
            for (r, m) in rm.iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let rv = store.get_mut(u.running_var).value.data_mut();
            for (r, v) in rv.iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for ((g, dy), y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += dy * y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, dy), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += dy * x;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |g| axpy(g, gy, *c)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |g| axpy(g, gy, 1.0));
                let c = self.value(*b).numel();
                self.acc(grads, *b, |g| {
                    for row in gy.chunks(c.max(1)) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::MatMul(x, w) => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = self.value(*x).rows();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |g| matmul_bt(m, n, k, gy, wv, g, true));
                self.acc(grads, *w, |g| matmul_at(k, m, n, xv, gy, g, true));
            }
            Op::Conv3x3(x, w) => {
                let [b, h, wd, cin] = *self.shape(*x) else { unreachable!() };
                let cout = self.shape(*w)[3];
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![0.0; hw * 9 * cin];
                if self.rg(*w) {
                    let mut gw = vec![0.0; 9 * cin * cout];
                    for bi in 0..b {
                        im2col(&xv[bi * hw * cin..(bi + 1) * hw * cin], h, wd, cin, &mut cols);
                        matmul_at(9 * cin, hw, cout, &cols, &gy[bi * hw * cout..(bi + 1) * hw * cout], &mut gw, true);
                    }
                    self.acc(grads, *w, |g| axpy(g, &gw, 1.0));
                }
                if self.rg(*x) {
                    self.acc(grads, *x, |g| {
                        for bi in 0..b {
                            matmul_bt(hw, cout, 9 * cin, &gy[bi * hw * cout..(bi + 1) * hw * cout], wv, &mut cols, false);
                            col2im_add(&cols, h, wd, cin, &mut g[bi * hw * cin..(bi + 1) * hw * cin]);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, dy), v) in g.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *g += dy;
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
                let c = inv_std.len();
                let rows = xhat.len() / c.max(1);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (dyr, xr) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += dyr[ch] * xr[ch];
                        dbeta[ch] += dyr[ch];
                        let dxh = dyr[ch] * gv[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xr[ch];
                    }
                }
                self.acc(grads, *gamma, |g| axpy(g, &dgamma, 1.0));
                self.acc(grads, *beta, |g| axpy(g, &dbeta, 1.0));
                self.acc(grads, *x, |g| {
                    let nf = rows as f64;
                    for ((gr, dyr), xr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let dxh = dyr[ch] * gv[ch];
                            gr[ch] += if *batch_stats {
                                inv_std[ch] / nf * (nf * dxh - sum_dxhat[ch] - xr[ch] * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => self.acc(grads, *x, |g| {
                for (dy, &src) in gy.iter().zip(argmax) {
                    g[src] += dy;
                }
            }),
            Op::Upsample2(x) => {
                let [b, h, w, c] = *self.shape(*x) else { unreachable!() };
                let (oh, ow) = (2 * h, 2 * w);
                self.acc(grads, *x, |g| {
                    for bi in 0..b {
                        for i in 0..oh {
                            for j in 0..ow {
                                let s = ((bi * h + i / 2) * w + j / 2) * c;
                                let o = ((bi * oh + i) * ow + j) * c;
                                axpy(&mut g[s..s + c], &gy[o..o + c], 1.0);
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &v in xs {
                    let cw = self.value(v).last_dim();
                    self.acc(grads, v, |g| {
                        for r in 0..rows {
                            axpy(
                                &mut g[r * cw..(r + 1) * cw],
                                &gy[r * total + offset..r * total + offset + cw],
                                1.0,
                            );
                        }
                    });
                    offset += cw;
                }
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                self.acc(grads, *x, |g| {
                    for ((gr, dyr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ch in 0..c {
                            gr[ch] += yr[ch] * (dyr[ch] - dot);
                        }
                    }
                });
            }
            Op::NeighborMax { x, argmax } => self.acc(grads, *x, |g| {
                for (dy, &src) in gy.iter().zip(argmax) {
                    g[src] += dy;
                }
            }),
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).last_dim();
                self.acc(grads, *x, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut g[i * c..(i + 1) * c], &gy[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |g| axpy(g, gy, 1.0)),
            Op::MaskRows { x, mask } => {
                let c = self.value(*x).last_dim();
                self.acc(grads, *x, |g| {
                    for ((gr, dyr), m) in g.chunks_mut(c.max(1)).zip(gy.chunks(c.max(1))).zip(mask.iter()) {
                        axpy(gr, dyr, *m);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                row_weight,
                probs,
                total_weight,
            } => {
                if *total_weight <= 0.0 {
                    return;
                }
                let k = self.value(*logits).last_dim();
                self.acc(grads, *logits, |g| {
                    for (r, (&y, &w)) in labels.iter().zip(row_weight).enumerate() {
                        let scale = gy[0] * w / total_weight;
                        for ch in 0..k {
                            let target = if ch == y { 1.0 } else { 0.0 };
                            g[r * k + ch] += scale * (probs[r * k + ch] - target);
                        }
                    }
                });
            }
            Op::PairHinge {
                x,
                groups,
                delta,
                same_group,
                pairs,
            } => {
                if *pairs == 0 {
                    return;
                }
                let n = groups.len();
                let d = self.value(*x).last_dim();
                let data = self.value(*x).data();
                let scale = gy[0] / *pairs as f64;
                self.acc(grads, *x, |g| {
                    for i in 0..n {
                        for j in i + 1..n {
                            if (groups[i] == groups[j]) != *same_group {
                                continue;
                            }
                            let (xi, xj) = (&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]);
                            let s = euclidean(xi, xj);
                            let active = if *same_group { s > *delta } else { s < *delta };
                            if !active || s == 0.0 {
                                continue;
                            }
                            // d s / d x_i = (x_i − x_j) / s
                            let sign = if *same_group { 1.0 } else { -1.0 };
                            let f = sign * scale / s;
                            for t in 0..d {
                                let diff = xi[t] - xj[t];
                                g[i * d + t] += f * diff;
                                g[j * d + t] -= f * diff;
                            }
                        }
                    }
                });
            }
            Op::RowDistanceMean {
                pred,
                target,
                defined,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let d = self.value(*pred).last_dim();
                let p = self.value(*pred).data();
                let scale = gy[0] / *count as f64;
                self.acc(grads, *pred, |g| {
                    for (i, &def) in defined.iter().enumerate() {
                        if !def {
                            continue;
                        }
                        let (pi, ti) = (&p[i * d..(i + 1) * d], &target[i * d..(i + 1) * d]);
                        let s = euclidean(pi, ti);
                        if s == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            g[i * d + t] += scale * (pi[t] - ti[t]) / s;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(g);
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Rows are pixels; columns are `(ky, kx, cin)` taps, zero outside the image.
fn im2col(img: &[f64], h: usize, w: usize, c: usize, cols: &mut [f64]) {
    let row_len = 9 * c;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * row_len;
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = base + (ky * 3 + kx) * c;
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        cols[dst..dst + c].iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], h: usize, w: usize, c: usize, img: &mut [f64]) {
    let row_len = 9 * c;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * row_len;
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = base + (ky * 3 + kx) * c;
                    let dst = (sy as usize * w + sx as usize) * c;
                    axpy(&mut img[dst..dst + c], &cols[src..src + c], 1.0);
                }
            }
        }
    }
}
