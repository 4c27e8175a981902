use super::ops::{bilinear_axis, gelu_grad, matmul_plan};
use super::{Graph, Op, Var};
use crate::tensor::{self, broadcast_offsets, inverse_permutation, numel, sum_to_shape, Tensor};

impl Graph {
    /// Pushes the gradient `g` of node `out` onto its inputs.
    pub(super) fn propagate(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[out.index()];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, sum_to_shape(g, self.shape(*a)));
                self.accumulate(grads, *b, sum_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, sum_to_shape(g, self.shape(*a)));
                let neg = g.map(|v| -v);
                self.accumulate(grads, *b, sum_to_shape(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(this) {
                        continue;
                    }
                    let other_offsets = broadcast_offsets(self.shape(other), g.shape());
                    let ov = self.value(other).data();
                    let prod: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(&other_offsets)
                        .map(|(gv, &o)| gv * ov[o])
                        .collect();
                    let full = Tensor::from_parts(g.shape().to_vec(), prod);
                    self.accumulate(grads, this, sum_to_shape(&full, self.shape(this)));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Reshape(x) => {
                let shaped = Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec());
                self.accumulate(grads, *x, shaped);
            }
            Op::Permute(x, perm) => {
                self.accumulate(grads, *x, tensor::permute(g, &inverse_permutation(perm)));
            }
            Op::Concat { inputs, axis } => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis];
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            part.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(self.shape(v).to_vec(), part));
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer = numel(&in_shape[..*axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let len = g.shape()[*axis];
                let mut full = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::from_parts(in_shape.to_vec(), full));
            }
            Op::Pad2d { input, top, left } => {
                let in_shape = self.shape(*input);
                let n = in_shape.len();
                let (h, w) = (in_shape[n - 2], in_shape[n - 1]);
                let (gh, gw) = (g.shape()[n - 2], g.shape()[n - 1]);
                let outer = numel(&in_shape[..n - 2]);
                let mut out = Vec::with_capacity(numel(in_shape));
                for o in 0..outer {
                    for r in 0..h {
                        let s = (o * gh + r + top) * gw + left;
                        out.extend_from_slice(&g.data()[s..s + w]);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(in_shape.to_vec(), out));
            }
            Op::Crop2d { input, top, left } => {
                let in_shape = self.shape(*input);
                let n = in_shape.len();
                let (ih, iw) = (in_shape[n - 2], in_shape[n - 1]);
                let (h, w) = (g.shape()[n - 2], g.shape()[n - 1]);
                let outer = numel(&in_shape[..n - 2]);
                let mut out = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    for r in 0..h {
                        let d = (o * ih + r + top) * iw + left;
                        let s = (o * h + r) * w;
                        out[d..d + w].copy_from_slice(&g.data()[s..s + w]);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(in_shape.to_vec(), out));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let out = xv.iter().zip(g.data()).map(|(v, gv)| gv * gelu_grad(*v)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), out));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let out = xv
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), out));
            }
            Op::AvgPool2d { input, k } => {
                let in_shape = self.shape(*input);
                let n = in_shape.len();
                let (h, w) = (in_shape[n - 2], in_shape[n - 1]);
                let (oh, ow) = (h / k, w / k);
                let outer = numel(&in_shape[..n - 2]);
                let norm = 1.0 / (k * k) as f64;
                let mut out = Vec::with_capacity(numel(in_shape));
                for o in 0..outer {
                    for r in 0..h {
                        let grow = &g.data()[(o * oh + r / k) * ow..(o * oh + r / k + 1) * ow];
                        out.extend((0..w).map(|c| grow[c / k] * norm));
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(in_shape.to_vec(), out));
            }
            Op::Bilinear(x) => {
                let in_shape = self.shape(*x);
                let n = in_shape.len();
                let (h, w) = (in_shape[n - 2], in_shape[n - 1]);
                let (oh, ow) = (g.shape()[n - 2], g.shape()[n - 1]);
                let rows = bilinear_axis(h, oh);
                let cols = bilinear_axis(w, ow);
                let outer = numel(&in_shape[..n - 2]);
                let mut out = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    let plane = &mut out[o * h * w..(o + 1) * h * w];
                    let gp = &g.data()[o * oh * ow..(o + 1) * oh * ow];
                    for (ri, &(r0, r1, fy)) in rows.iter().enumerate() {
                        for (ci, &(c0, c1, fx)) in cols.iter().enumerate() {
                            let gv = gp[ri * ow + ci];
                            plane[r0 * w + c0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[r0 * w + c1] += gv * (1.0 - fy) * fx;
                            plane[r1 * w + c0] += gv * fy * (1.0 - fx);
                            plane[r1 * w + c1] += gv * fy * fx;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(in_shape.to_vec(), out));
            }
            Op::Unfold {
                input,
                size,
                stride,
            } => {
                let in_shape = self.shape(*input);
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (ny, nx) = ((h - size) / stride + 1, (w - size) / stride + 1);
                let mut out = vec![0.0; c * h * w];
                let mut src = g.data().chunks(*size);
                for wy in 0..ny {
                    for wx in 0..nx {
                        for ch in 0..c {
                            for r in 0..*size {
                                let d = (ch * h + wy * stride + r) * w + wx * stride;
                                let row = src.next().unwrap();
                                for (dv, sv) in out[d..d + size].iter_mut().zip(row) {
                                    *dv += sv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(in_shape.to_vec(), out));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = numel(self.shape(*x)) as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
            Op::MeanLast(x) => {
                let shape = self.shape(*x);
                let n = *shape.last().unwrap();
                let out = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / n as f64, n))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), out));
            }
            Op::VarLast(x) => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let mut out = Vec::with_capacity(xv.numel());
                for (row, &gv) in xv.data().chunks(n).zip(g.data()) {
                    let mu = row.iter().sum::<f64>() / n as f64;
                    out.extend(row.iter().map(|v| gv * 2.0 * (v - mu) / n as f64));
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), out));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let count = targets.iter().filter(|t| t.is_some()).count();
                let shape = probs.shape();
                let hw = shape[1] * shape[2];
                let mut out = vec![0.0; probs.numel()];
                if count > 0 {
                    let scale = g.data()[0] / count as f64;
                    for (p, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for c in 0..shape[0] {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            out[c * hw + p] = scale * (probs.data()[c * hw + p] - onehot);
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(shape.to_vec(), out));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = matmul_plan(sa, sb).expect("shapes validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if self.requires_grad(a) {
            let mut ga = vec![0.0; numel(sa)];
            for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                tensor::gemm_nt(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &bv[bo..bo + k * n],
                    &mut ga[ao..ao + m * k],
                    m,
                    n,
                    k,
                );
            }
            self.accumulate(grads, a, Tensor::from_parts(sa.to_vec(), ga));
        }
        if self.requires_grad(b) {
            let mut gb = vec![0.0; numel(sb)];
            for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                tensor::gemm_tn(
                    &av[ao..ao + m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut gb[bo..bo + k * n],
                    k,
                    m,
                    n,
                );
            }
            self.accumulate(grads, b, Tensor::from_parts(sb.to_vec(), gb));
        }
    }
}
