use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, broadcast_offsets, broadcast_shape, numel, Tensor};

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Source taps for one axis of an align-corners=false bilinear resize:
/// `(lower index, upper index, weight of upper)` per output position.
pub fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn split_hw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Invalid(format!(
            "{op} needs at least two axes, got {shape:?}"
        )));
    }
    let n = shape.len();
    Ok((numel(&shape[..n - 2]), shape[n - 2], shape[n - 1]))
}

/// Batch offsets for a broadcast batched matmul.
pub(super) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
}

pub(super) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shape(a_batch, b_batch).ok_or_else(|| Error::shape("matmul", a, b))?;
    let a_offsets = broadcast_offsets(a_batch, &batch)
        .into_iter()
        .map(|o| o * m * k)
        .collect();
    let b_offsets = broadcast_offsets(b_batch, &batch)
        .into_iter()
        .map(|o| o * k * n)
        .collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        out_shape,
        m,
        k,
        n,
        a_offsets,
        b_offsets,
    })
}

impl Graph {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let data = if sa == sb {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            let data: Vec<f64> = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
            Tensor::from_parts(sa.to_vec(), data)
        } else {
            let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op_name, sa, sb))?;
            let oa = broadcast_offsets(sa, &out_shape);
            let ob = broadcast_offsets(sb, &out_shape);
            let (x, y) = (self.value(a).data(), self.value(b).data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(x[i], y[j])).collect();
            Tensor::from_parts(out_shape, data)
        };
        self.flops.elementwise += data.numel() as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.flops.elementwise += out.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; numel(&plan.out_shape)];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                tensor::gemm_nn(
                    &x[ao..ao + m * k],
                    &y[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.flops.matmul_macs += (plan.a_offsets.len() * m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.shape(x), perm));
        }
        let out = tensor::permute(self.value(x), perm);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Invalid(format!(
                "slice [{start}, {}) of axis {axis} is out of range for {shape:?}",
                start + len
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("split", self.shape(x), &[axis]))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape("split", self.shape(x), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Zero-pads the last two axes.
    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        if top + bottom + left + right == 0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let (outer, h, w) = split_hw(&shape, "pad2d")?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * oh * ow];
        for o in 0..outer {
            for r in 0..h {
                let s = (o * h + r) * w;
                let d = (o * oh + r + top) * ow + left;
                data[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Pad2d { input: x, top, left },
            rg,
        ))
    }

    /// Keeps the `h × w` block of the last two axes starting at `(top, left)`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, ih, iw) = split_hw(&shape, "crop2d")?;
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(Error::Invalid(format!(
                "crop {h}x{w} at ({top}, {left}) does not fit in {shape:?}"
            )));
        }
        if (h, w) == (ih, iw) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * h * w);
        for o in 0..outer {
            for r in 0..h {
                let s = (o * ih + r + top) * iw + left;
                data.extend_from_slice(&src[s..s + w]);
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = h;
        out_shape[n - 1] = w;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Crop2d { input: x, top, left },
            rg,
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Invalid("softmax of a scalar".into()))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.flops.elementwise += data.len() as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(x), rg))
    }

    /// Gaussian error linear unit, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.flops.elementwise += out.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.flops.elementwise += out.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Mean over non-overlapping `k × k` blocks of the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, h, w) = split_hw(&shape, "avg_pool2d")?;
        if k == 0 {
            return Err(Error::Invalid("avg_pool2d kernel must be positive".into()));
        }
        for extent in [h, w] {
            if extent % k != 0 {
                return Err(Error::PadRequired {
                    op: "avg_pool2d",
                    extent,
                    divisor: k,
                });
            }
        }
        if k == 1 {
            return Ok(x);
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for o in 0..outer {
            for r in 0..h {
                let dst = (o * oh + r / k) * ow;
                let row = &src[(o * h + r) * w..(o * h + r + 1) * w];
                for (c, &v) in row.iter().enumerate() {
                    data[dst + c / k] += v;
                }
            }
        }
        for v in &mut data {
            *v *= norm;
        }
        self.flops.pooling += (outer * h * w) as u64;
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::AvgPool2d { input: x, k },
            rg,
        ))
    }

    /// Bilinear resize of the last two axes (align-corners = false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, h, w) = split_hw(&shape, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("bilinear_resize target must be positive".into()));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let rows = bilinear_axis(h, out_h);
        let cols = bilinear_axis(w, out_w);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * out_h * out_w);
        for o in 0..outer {
            let plane = &src[o * h * w..(o + 1) * h * w];
            for &(r0, r1, fy) in &rows {
                for &(c0, c1, fx) in &cols {
                    let top = plane[r0 * w + c0] * (1.0 - fx) + plane[r0 * w + c1] * fx;
                    let bot = plane[r1 * w + c0] * (1.0 - fx) + plane[r1 * w + c1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        self.flops.elementwise += data.len() as u64;
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = out_h;
        out_shape[n - 1] = out_w;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Bilinear(x), rg))
    }

    /// Sliding `size × size` blocks of a `[C, H, W]` map taken every `stride`
    /// cells, stacked window-major into `[num_windows, C, size, size]`.
    pub fn unfold(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::Invalid(format!("unfold needs [C, H, W], got {shape:?}")));
        };
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(Error::Invalid(format!(
                "unfold window {size} (stride {stride}) does not fit {shape:?}"
            )));
        }
        for extent in [h - size, w - size] {
            if extent % stride != 0 {
                return Err(Error::PadRequired {
                    op: "unfold",
                    extent,
                    divisor: stride,
                });
            }
        }
        let (ny, nx) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(ny * nx * c * size * size);
        for wy in 0..ny {
            for wx in 0..nx {
                for ch in 0..c {
                    for r in 0..size {
                        let s = (ch * h + wy * stride + r) * w + wx * stride;
                        data.extend_from_slice(&src[s..s + size]);
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![ny * nx, c, size, size], data),
            Op::Unfold {
                input: x,
                size,
                stride,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.flops.elementwise += self.value(x).numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.flops.elementwise += t.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var> {
        let (shape, n) = self.last_axis(x, "mean_lastdim")?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        self.flops.elementwise += self.value(x).numel() as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanLast(x), rg))
    }

    /// Population variance over the last axis, keeping it with extent 1.
    pub fn var_lastdim(&mut self, x: Var) -> Result<Var> {
        let (shape, n) = self.last_axis(x, "var_lastdim")?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| {
                let mu = r.iter().sum::<f64>() / n as f64;
                r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64
            })
            .collect();
        self.flops.elementwise += 2 * self.value(x).numel() as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::VarLast(x), rg))
    }

    fn last_axis(&self, x: Var, op: &'static str) -> Result<(Vec<usize>, usize)> {
        let mut shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Invalid(format!("{op} of a scalar")))?;
        *shape.last_mut().unwrap() = 1;
        Ok((shape, n))
    }

    /// Mean pixelwise cross-entropy of `[K, H, W]` logits against class ids.
    /// Pixels equal to `ignore_index` are skipped; when every pixel is ignored
    /// the loss is 0 and contributes no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let &[k, h, w] = shape.as_slice() else {
            return Err(Error::Invalid(format!(
                "cross_entropy needs [K, H, W] logits, got {shape:?}"
            )));
        };
        if labels.len() != h * w {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let mut targets = Vec::with_capacity(h * w);
        for (i, &label) in labels.iter().enumerate() {
            if label == ignore_index {
                targets.push(None);
            } else if label >= k {
                return Err(Error::LabelOutOfRange {
                    label,
                    row: i / w,
                    col: i % w,
                    num_classes: k,
                });
            } else {
                targets.push(Some(label));
            }
        }
        let x = self.value(logits).data();
        let hw = h * w;
        let mut probs = vec![0.0; k * hw];
        let mut total = 0.0;
        let mut count = 0usize;
        for (p, target) in targets.iter().enumerate() {
            let max = (0..k).map(|c| x[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[c * hw + p] - max).exp()).sum();
            for c in 0..k {
                probs[c * hw + p] = (x[c * hw + p] - max).exp() / z;
            }
            if let Some(t) = *target {
                total += max + z.ln() - x[t * hw + p];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.flops.elementwise += (k * hw) as u64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs: Tensor::from_parts(shape, probs),
            },
            rg,
        ))
    }
}
