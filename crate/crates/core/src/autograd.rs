//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is pushed) and [`Graph::backward`] walks the tape in reverse. Nodes that
//! do not depend on a trainable leaf are never visited, so frozen parameters
//! bound with [`Graph::constant`] receive no gradient at all.
//!
//! Feature maps use channel-last layout `[H, W, C]`; token sequences are
//! `[tokens, width]` matrices.

use crate::tensor::{matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    MaskedMse {
        recon: Var,
        target: Tensor,
        masked: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    MaskedL1 {
        pred: Var,
        truth: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        assert_eq!(sa[1], sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(x).cols();
        assert_eq!(self.value(b).len(), c, "bias width mismatch");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng)
    }

    /// `x W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(k);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, k), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&u| 0.5 * u * (1.0 + (SQRT_2_OVER_PI * (u + GELU_C * u * u * u)).tanh()))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&u| u.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == c && b.len() == c, "layer norm width mismatch");
        let rows = v.rows();
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape().len(), 2, "transpose needs 2-D");
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data()[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(x), ng)
    }

    /// Columns `[start, start + len)` along the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let c = v.cols();
        assert!(start + len <= c, "slice out of range");
        let mut data = Vec::with_capacity(v.rows() * len);
        for row in v.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::SliceCols { x, start }, ng)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        self.push(Tensor::new(shape, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stacks 2-D matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::new(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Row `r` of the output is row `index[r]` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < v.rows(), "gather index {i} out of range");
            data.extend_from_slice(v.row(i));
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![index.len(), c], data),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Stride-1 "same" convolution. `x: [H, W, Cin]`, `w: [K, K, Cin, Cout]`
    /// with odd `K`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be [H, W, C]");
        assert_eq!(ws.len(), 4, "conv weight must be [K, K, Cin, Cout]");
        assert_eq!(ws[2], xs[2], "conv input channels {xs:?} vs weight {ws:?}");
        assert_eq!(self.value(b).len(), ws[3], "conv bias width");
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            xs[0],
            xs[1],
            ws[2],
            ws[3],
            ws[0],
        );
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::new(vec![xs[0], xs[1], ws[3]], out),
            Op::Conv2d { x, w, b },
            ng,
        )
    }

    /// 2x2 max pooling, stride 2. Ties go to the first element in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if src[i] > best || (dy == 0 && dx == 0) {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (y * wo + xx) * c + ch;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![ho, wo, c], out),
            Op::MaxPool2 { x, argmax },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                let si = ((y / 2) * w + xx / 2) * c;
                let oi = (y * wo + xx) * c;
                out[oi..oi + c].copy_from_slice(&src[si..si + c]);
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![ho, wo, c], out), Op::Upsample2(x), ng)
    }

    /// Mean over masked rows of the per-row mean squared error.
    pub fn masked_mse(&mut self, recon: Var, target: &Tensor, masked: &[usize]) -> Var {
        let r = self.value(recon);
        assert_eq!(r.shape(), target.shape(), "masked mse shape mismatch");
        assert!(!masked.is_empty(), "masked mse with empty mask");
        let p = r.cols();
        let mut total = 0.0;
        for &i in masked {
            let row: f64 = r
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += row / p as f64;
        }
        let loss = total / masked.len() as f64;
        let ng = self.ng(&[recon]);
        self.push(
            Tensor::new(vec![], vec![loss]),
            Op::MaskedMse {
                recon,
                target: target.clone(),
                masked: masked.to_vec(),
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy over rows (last axis = classes), skipping
    /// rows whose label is `None`. Panics if no row is counted.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Var {
        let v = self.value(logits);
        let k = v.cols();
        assert_eq!(v.rows(), labels.len(), "cross entropy label count");
        let mut probs = v.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, (lrow, label)) in probs.chunks_mut(k).zip(v.data().chunks(k).zip(labels)) {
            let Some(label) = *label else { continue };
            let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|u| (u - max).exp()).sum::<f64>().ln();
            total += lse - lrow[label];
            count += 1;
            softmax_in_place(row);
        }
        assert!(count > 0, "cross entropy with no counted pixels");
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::new(vec![], vec![total / count as f64]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Mean absolute error over valid elements.
    pub fn masked_l1(&mut self, pred: Var, truth: &[f64], valid: &[bool]) -> Var {
        let v = self.value(pred);
        assert_eq!(v.len(), truth.len(), "l1 length mismatch");
        assert_eq!(v.len(), valid.len(), "l1 mask length mismatch");
        let mut total = 0.0;
        let mut count = 0;
        for ((p, t), &ok) in v.data().iter().zip(truth).zip(valid) {
            if ok {
                total += (p - t).abs();
                count += 1;
            }
        }
        assert!(count > 0, "l1 with no valid pixels");
        let ng = self.ng(&[pred]);
        self.push(
            Tensor::new(vec![], vec![total / count as f64]),
            Op::MaskedL1 {
                pred,
                truth: truth.to_vec(),
                valid: valid.to_vec(),
                count,
            },
            ng,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![], vec![m]), Op::Mean(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gout.clone());
                if self.nodes[b.0].needs_grad {
                    let c = gout.cols();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db));
                }
            }
            Op::Scale(x, k) => {
                let mut d = gout.clone();
                d.scale(*k);
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&u, &gv)| {
                        let inner = SQRT_2_OVER_PI * (u + GELU_C * u * u * u);
                        let t = inner.tanh();
                        let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * u * u);
                        gv * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&u, &gv)| if u > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = gout.cols();
                let gam = self.value(*gamma).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dx[r * c + j] = rs * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx));
                }
                if self.nodes[gamma.0].needs_grad {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    let shape = self.shape(*gamma).to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(shape, dg));
                }
                if self.nodes[beta.0].needs_grad {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    let shape = self.shape(*beta).to_vec();
                    self.accumulate(grads, *beta, Tensor::new(shape, db));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d));
            }
            Op::Transpose(x) => {
                let (n, m) = (gout.shape()[0], gout.shape()[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], d));
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x).to_vec();
                let c = *xs.last().expect("non-scalar");
                let len = gout.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (dr, gr) in d.chunks_mut(c).zip(g.chunks(len)) {
                    dr[*start..*start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::ConcatCols(parts) => {
                let total = gout.cols();
                let rows = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let w = *ps.last().expect("non-scalar");
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.nodes[p.0].needs_grad {
                        let shape = self.shape(p).to_vec();
                        self.accumulate(
                            grads,
                            p,
                            Tensor::new(shape, g[offset..offset + n].to_vec()),
                        );
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let xs = self.shape(*x).to_vec();
                let c = gout.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[r * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, gout.clone().reshape(&shape));
            }
            Op::Conv2d { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (h, wd, cin, cout, k) = (xs[0], xs[1], ws[2], ws[3], ws[0]);
                let (dx, dw) = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    h,
                    wd,
                    cin,
                    cout,
                    k,
                    self.nodes[x.0].needs_grad,
                    self.nodes[w.0].needs_grad,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xs, dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(ws, dw));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.shape(*x).to_vec();
                let mut d = vec![0.0; self.value(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let wo = 2 * w;
                let mut d = vec![0.0; h * w * c];
                for y in 0..2 * h {
                    for xx in 0..wo {
                        let si = ((y / 2) * w + xx / 2) * c;
                        let oi = (y * wo + xx) * c;
                        for ch in 0..c {
                            d[si + ch] += g[oi + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::MaskedMse {
                recon,
                target,
                masked,
            } => {
                let r = self.value(*recon);
                let p = r.cols();
                let k = 2.0 * g[0] / (masked.len() as f64 * p as f64);
                let mut d = vec![0.0; r.len()];
                for &i in masked {
                    for j in 0..p {
                        d[i * p + j] = k * (r.data()[i * p + j] - target.data()[i * p + j]);
                    }
                }
                self.accumulate(grads, *recon, Tensor::new(r.shape().to_vec(), d));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, label) in labels.iter().enumerate() {
                    let Some(label) = *label else { continue };
                    for j in 0..k {
                        d[r * k + j] = scale * probs[r * k + j];
                    }
                    d[r * k + label] -= scale;
                }
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, d));
            }
            Op::MaskedL1 {
                pred,
                truth,
                valid,
                count,
            } => {
                let pv = self.value(*pred);
                let scale = g[0] / *count as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(truth)
                    .zip(valid)
                    .map(|((p, t), &ok)| {
                        if !ok || p == t {
                            0.0
                        } else if p > t {
                            scale
                        } else {
                            -scale
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), k));
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            let obase = (y * wd + xx) * cout;
            let orow = &mut out[obase..obase + cout];
            orow.copy_from_slice(b);
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < wd) else {
                        continue;
                    };
                    let ibase = (iy * wd + ix) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = x[ibase + ci];
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    k: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let pad = k / 2;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for y in 0..h {
        for xx in 0..wd {
            let gbase = (y * wd + xx) * cout;
            let grow = &g[gbase..gbase + cout];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < wd) else {
                        continue;
                    };
                    let ibase = (iy * wd + ix) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        if let Some(dx) = dx.as_mut() {
                            dx[ibase + ci] +=
                                grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dw) = dw.as_mut() {
                            let a = x[ibase + ci];
                            if a != 0.0 {
                                let drow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += a * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
