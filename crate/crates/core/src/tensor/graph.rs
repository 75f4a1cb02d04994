use super::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        kernel: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    NllLoss {
        x: Var,
        targets: Vec<usize>,
    },
    Mul(Var, Var),
    Sum(Var),
    Scale(Var, T),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMeans {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    SqDist(Var, Var),
    GatherSum {
        x: Var,
        cols: Vec<Vec<usize>>,
    },
    MseLoss {
        x: Var,
        target: Vec<T>,
    },
    ConcatCols(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape. A graph built with [`Graph::inference`] computes values
/// only and keeps no backward caches.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    record: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(layer: &str, expected: impl Into<String>, actual: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        layer: layer.to_string(),
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

fn add_into<T: Element>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn grad_buf<T: Element>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding).saturating_sub(kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Graph<T> {
    /// A recording graph: backward passes are available.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A value-only graph for inference.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that accumulates a gradient on [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let rg = self.record;
        self.leaf(value, rg)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.record,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward output with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, name: &str, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn wants_cache(&self, parents: &[Var]) -> bool {
        self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// 2-D convolution over `[N, C, H, W]` with a square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(mismatch("conv2d", "weight [O, C, K, K]", &ws));
        }
        let (o, c, k) = (ws[0], ws[1], ws[2]);
        if xs.len() != 4 || xs[1] != c {
            return Err(mismatch("conv2d", format!("[N, {c}, H, W]"), &xs));
        }
        if self.value(b).shape() != [o] {
            return Err(mismatch("conv2d", format!("bias [{o}]"), self.value(b).shape()));
        }
        if stride == 0 || xs[2] + 2 * padding < k || xs[3] + 2 * padding < k {
            return Err(mismatch(
                "conv2d",
                format!("spatial size >= kernel {k} with padding {padding}"),
                &xs,
            ));
        }
        let (n, h, wd) = (xs[0], xs[2], xs[3]);
        let ho = conv_out(h, k, stride, padding);
        let wo = conv_out(wd, k, stride, padding);
        let (ckk, hw) = (c * k * k, ho * wo);
        let cache = self.wants_cache(&[x, w, b]);
        let mut cols = if cache { vec![T::zero(); n * ckk * hw] } else { Vec::new() };
        let mut scratch = if cache { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let mut out = vec![T::zero(); n * o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let col: &mut [T] = if cache {
                    &mut cols[s * ckk * hw..(s + 1) * ckk * hw]
                } else {
                    &mut scratch
                };
                im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, k, stride, padding, ho, wo, col);
                let y = &mut out[s * o * hw..(s + 1) * o * hw];
                for (oc, row) in y.chunks_mut(hw).enumerate() {
                    row.fill(bv[oc]);
                }
                T::gemm(o, ckk, hw, T::one(), wv, ckk as isize, 1, col, hw as isize, 1, T::one(), y, hw as isize, 1);
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                kernel: k,
                cols,
            },
        )
    }

    /// Batch normalisation over `[N, C, H, W]`.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, biased variance)` per channel; with `Some((mean, var))` the
    /// given running statistics are applied instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[T], &[T])>,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.value(x).shape().to_vec();
        let c = self.value(gamma).numel();
        if xs.len() != 4 || xs[1] != c {
            return Err(mismatch("batchnorm2d", format!("[N, {c}, H, W]"), &xs));
        }
        let (n, plane) = (xs[0], xs[2] * xs[3]);
        let m = T::lit((n * plane) as f64);
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let (mean, var) = match stats {
            Some((mu, var)) => (mu.to_vec(), var.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        acc += xv[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = acc / m.as_f64();
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        sq += xv[base..base + plane]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::lit(mu);
                    var[ch] = T::lit(sq / m.as_f64());
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let cache = self.wants_cache(&[x, gamma, beta]);
        let var_out = self.push(
            "batchnorm2d",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: if cache { xhat } else { Vec::new() },
                inv_std: inv_std.clone(),
                batch_stats: stats.is_none(),
            },
        )?;
        Ok((var_out, mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        };
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(mismatch("maxpool2x2", "[N, C, H>=2, W>=2]", &xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push("maxpool2x2", value, &[x], Op::MaxPool2 { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let n = xs[0];
        let rest = xs[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![n, rest])
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 {
            return Err(mismatch("linear", "weight [out, in]", &ws));
        }
        let (o, i) = (ws[0], ws[1]);
        if xs.len() != 2 || xs[1] != i {
            return Err(mismatch("linear", format!("[N, {i}]"), &xs));
        }
        let n = xs[0];
        let mut out = Vec::with_capacity(n * o);
        let bv = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let value = Tensor::new(vec![n, o], out)?;
        self.push("linear", value, &[x, w, b], Op::Linear { x, w, b })
    }

    fn rows2(&self, layer: &str, x: Var) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(mismatch(layer, "[N, C]", s));
        }
        Ok((s[0], s[1]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows2("softmax", x)?;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows2("logsoftmax", x)?;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push("logsoftmax", value, &[x], Op::LogSoftmax(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
    pub fn nll_loss(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.rows2("nll_loss", x)?;
        if targets.len() != n {
            return Err(mismatch("nll_loss", format!("{} targets", targets.len()), &[n, c]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes: c,
            });
        }
        let xv = self.value(x).data();
        let total: f64 = targets.iter().enumerate().map(|(r, &t)| -xv[r * c + t].as_f64()).sum();
        let value = Tensor::scalar(T::lit(total / n as f64));
        self.push(
            "nll_loss",
            value,
            &[x],
            Op::NllLoss {
                x,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("mul", format!("{:?}", self.value(a).shape()), self.value(b).shape()));
        }
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(&p, &q)| p * q).collect(),
        };
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data.iter().map(|v| v.as_f64()).sum::<f64>();
        self.push("sum", Tensor::scalar(T::lit(total)), &[x], Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * factor).collect(),
        };
        self.push("scale", value, &[x], Op::Scale(x, factor))
    }

    /// Picks rows of a `[N, D]` tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.rows2("select_rows", x)?;
        if rows.iter().any(|&r| r >= n) || rows.is_empty() {
            return Err(mismatch("select_rows", format!("row indices < {n}"), &[n, d]));
        }
        let xv = self.value(x).data();
        let data = rows.iter().flat_map(|&r| xv[r * d..(r + 1) * d].iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), d], data)?;
        self.push(
            "select_rows",
            value,
            &[x],
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean of each group of rows: `[N, D] -> [G, D]`.
    pub fn group_means(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.rows2("group_means", x)?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&r| r >= n)) {
            return Err(mismatch("group_means", "non-empty groups of valid rows", &[n, d]));
        }
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); groups.len() * d];
        for (g, rows) in groups.iter().enumerate() {
            let dst = &mut data[g * d..(g + 1) * d];
            for &r in rows {
                dst.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            let inv = T::one() / T::lit(rows.len() as f64);
            dst.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::new(vec![groups.len(), d], data)?;
        self.push(
            "group_means",
            value,
            &[x],
            Op::GroupMeans {
                x,
                groups: groups.to_vec(),
            },
        )
    }

    /// Squared Euclidean distances between rows: `[Q, D] x [C, D] -> [Q, C]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (q, d) = self.rows2("sq_dist", a)?;
        let (c, d2) = self.rows2("sq_dist", b)?;
        if d != d2 {
            return Err(mismatch("sq_dist", format!("[_, {d}]"), &[c, d2]));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(q * c);
        for i in 0..q {
            let ra = &av[i * d..(i + 1) * d];
            for j in 0..c {
                let rb = &bv[j * d..(j + 1) * d];
                out.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>());
            }
        }
        let value = Tensor::new(vec![q, c], out)?;
        self.push("sq_dist", value, &[a, b], Op::SqDist(a, b))
    }

    /// `out[n] = sum_j x[n, cols[n][j]]`.
    pub fn gather_sum(&mut self, x: Var, cols: &[Vec<usize>]) -> Result<Var> {
        let (n, c) = self.rows2("gather_sum", x)?;
        if cols.len() != n || cols.iter().flatten().any(|&j| j >= c) {
            return Err(mismatch("gather_sum", format!("{n} rows of column indices < {c}"), &[n, c]));
        }
        let xv = self.value(x).data();
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, js)| js.iter().map(|&j| xv[r * c + j]).sum::<T>())
            .collect();
        let value = Tensor::new(vec![n], data)?;
        self.push(
            "gather_sum",
            value,
            &[x],
            Op::GatherSum {
                x,
                cols: cols.to_vec(),
            },
        )
    }

    /// Joins `[N, A]` and `[N, B]` into `[N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.rows2("concat_cols", a)?;
        let (nb, cb) = self.rows2("concat_cols", b)?;
        if n != nb {
            return Err(mismatch("concat_cols", format!("[{n}, _]"), &[nb, cb]));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![n, ca + cb], data)?;
        self.push("concat_cols", value, &[a, b], Op::ConcatCols(a, b))
    }

    pub fn mse_loss(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return Err(mismatch("mse_loss", format!("{} values", target.len()), self.value(x).shape()));
        }
        let total: f64 = xv.iter().zip(target).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
        let value = Tensor::scalar(T::lit(total / xv.len() as f64));
        self.push(
            "mse_loss",
            value,
            &[x],
            Op::MseLoss {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar output; gradients become available via
    /// [`Graph::grad`]. Earlier gradients are cleared first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(TensorError::NotScalar(out.value.shape.clone()));
        }
        if !out.requires_grad {
            return Err(TensorError::NoGraph);
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(i, &gy)?;
            self.grads[i] = Some(gy);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gy: &[T]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let rg = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                kernel,
                cols,
            } => {
                let xs = nodes[x.0].value.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ys = node.value.shape();
                let (o, ho, wo) = (ys[1], ys[2], ys[3]);
                let k = *kernel;
                let (ckk, hw) = (c * k * k, ho * wo);
                if rg(b) {
                    let gb = grad_buf(&mut grads[b.0], o);
                    for s in 0..n {
                        for (oc, row) in gy[s * o * hw..(s + 1) * o * hw].chunks(hw).enumerate() {
                            gb[oc] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if rg(w) {
                    let gw = grad_buf(&mut grads[w.0], o * ckk);
                    for s in 0..n {
                        let dy = &gy[s * o * hw..(s + 1) * o * hw];
                        let col = &cols[s * ckk * hw..(s + 1) * ckk * hw];
                        T::gemm(o, hw, ckk, T::one(), dy, hw as isize, 1, col, 1, hw as isize, T::one(), gw, ckk as isize, 1);
                    }
                }
                if rg(x) {
                    let wv = nodes[w.0].value.data();
                    let mut dcol = vec![T::zero(); ckk * hw];
                    let gx = grad_buf(&mut grads[x.0], n * c * h * wd);
                    for s in 0..n {
                        let dy = &gy[s * o * hw..(s + 1) * o * hw];
                        T::gemm(ckk, o, hw, T::one(), wv, 1, ckk as isize, dy, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                        col2im(&dcol, c, h, wd, k, *stride, *padding, ho, wo, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = nodes[x.0].value.shape();
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let gv = nodes[gamma.0].value.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xh = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for j in base..base + plane {
                            sum_dy[ch] += gy[j];
                            sum_dy_xh[ch] += gy[j] * xhat[j];
                        }
                    }
                }
                if rg(gamma) {
                    add_into(&mut grads[gamma.0], &sum_dy_xh);
                }
                if rg(beta) {
                    add_into(&mut grads[beta.0], &sum_dy);
                }
                if rg(x) {
                    let m = T::lit((n * plane) as f64);
                    let gx = grad_buf(&mut grads[x.0], n * c * plane);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let scale = gv[ch] * inv_std[ch];
                            for j in base..base + plane {
                                gx[j] += if *batch_stats {
                                    scale * (gy[j] - sum_dy[ch] / m - xhat[j] * sum_dy_xh[ch] / m)
                                } else {
                                    scale * gy[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                let gx = grad_buf(&mut grads[x.0], xv.len());
                for ((g, &a), &d) in gx.iter_mut().zip(xv).zip(gy) {
                    if a > T::zero() {
                        *g += d;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let len = nodes[x.0].value.numel();
                let gx = grad_buf(&mut grads[x.0], len);
                for (&src, &d) in argmax.iter().zip(gy) {
                    gx[src] += d;
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], gy),
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, inp) = (xs[0], xs[1]);
                let o = nodes[w.0].value.shape()[0];
                if rg(b) {
                    let gb = grad_buf(&mut grads[b.0], o);
                    for row in gy.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                    }
                }
                if rg(w) {
                    let xv = nodes[x.0].value.data();
                    let gw = grad_buf(&mut grads[w.0], o * inp);
                    T::gemm(o, n, inp, T::one(), gy, 1, o as isize, xv, inp as isize, 1, T::one(), gw, inp as isize, 1);
                }
                if rg(x) {
                    let wv = nodes[w.0].value.data();
                    let gx = grad_buf(&mut grads[x.0], n * inp);
                    T::gemm(n, o, inp, T::one(), gy, o as isize, 1, wv, inp as isize, 1, T::one(), gx, inp as isize, 1);
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let yv = node.value.data();
                let gx = grad_buf(&mut grads[x.0], yv.len());
                for ((gr, yr), dr) in gx.chunks_mut(c).zip(yv.chunks(c)).zip(gy.chunks(c)) {
                    let dot = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum::<T>();
                    for j in 0..c {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                let yv = node.value.data();
                let gx = grad_buf(&mut grads[x.0], yv.len());
                for ((gr, yr), dr) in gx.chunks_mut(c).zip(yv.chunks(c)).zip(gy.chunks(c)) {
                    let total = dr.iter().copied().sum::<T>();
                    for j in 0..c {
                        gr[j] += dr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::NllLoss { x, targets } => {
                let c = nodes[x.0].value.shape()[1];
                let n = targets.len();
                let gx = grad_buf(&mut grads[x.0], n * c);
                let scale = gy[0] / T::lit(n as f64);
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= scale;
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let bv = nodes[b.0].value.data();
                    let ga = grad_buf(&mut grads[a.0], bv.len());
                    ga.iter_mut().zip(bv).zip(gy).for_each(|((g, &q), &d)| *g += q * d);
                }
                if rg(b) {
                    let av = nodes[a.0].value.data();
                    let gb = grad_buf(&mut grads[b.0], av.len());
                    gb.iter_mut().zip(av).zip(gy).for_each(|((g, &p), &d)| *g += p * d);
                }
            }
            Op::Sum(x) => {
                let len = nodes[x.0].value.numel();
                let gx = grad_buf(&mut grads[x.0], len);
                gx.iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::Scale(x, f) => {
                let gx = grad_buf(&mut grads[x.0], gy.len());
                gx.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *f);
            }
            Op::SelectRows { x, rows } => {
                let d = nodes[x.0].value.shape()[1];
                let len = nodes[x.0].value.numel();
                let gx = grad_buf(&mut grads[x.0], len);
                for (k, &r) in rows.iter().enumerate() {
                    gx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&gy[k * d..(k + 1) * d])
                        .for_each(|(g, &v)| *g += v);
                }
            }
            Op::GroupMeans { x, groups } => {
                let d = nodes[x.0].value.shape()[1];
                let len = nodes[x.0].value.numel();
                let gx = grad_buf(&mut grads[x.0], len);
                for (gi, rows) in groups.iter().enumerate() {
                    let inv = T::one() / T::lit(rows.len() as f64);
                    for &r in rows {
                        gx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&gy[gi * d..(gi + 1) * d])
                            .for_each(|(g, &v)| *g += v * inv);
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (q, d) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let c = nodes[b.0].value.shape()[0];
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let two = T::lit(2.0);
                if rg(a) {
                    let ga = grad_buf(&mut grads[a.0], q * d);
                    for i in 0..q {
                        for j in 0..c {
                            let g = gy[i * c + j] * two;
                            for k in 0..d {
                                ga[i * d + k] += g * (av[i * d + k] - bv[j * d + k]);
                            }
                        }
                    }
                }
                if rg(b) {
                    let gb = grad_buf(&mut grads[b.0], c * d);
                    for i in 0..q {
                        for j in 0..c {
                            let g = gy[i * c + j] * two;
                            for k in 0..d {
                                gb[j * d + k] -= g * (av[i * d + k] - bv[j * d + k]);
                            }
                        }
                    }
                }
            }
            Op::GatherSum { x, cols } => {
                let c = nodes[x.0].value.shape()[1];
                let len = nodes[x.0].value.numel();
                let gx = grad_buf(&mut grads[x.0], len);
                for (r, js) in cols.iter().enumerate() {
                    for &j in js {
                        gx[r * c + j] += gy[r];
                    }
                }
            }
            Op::MseLoss { x, target } => {
                let xv = nodes[x.0].value.data();
                let gx = grad_buf(&mut grads[x.0], xv.len());
                let scale = gy[0] * T::lit(2.0 / xv.len() as f64);
                for ((g, &a), &t) in gx.iter_mut().zip(xv).zip(target) {
                    *g += scale * (a - t);
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let cb = nodes[b.0].value.shape()[1];
                for (v, off, width) in [(a, 0, ca), (b, ca, cb)] {
                    if rg(v) {
                        let gv = grad_buf(&mut grads[v.0], n * width);
                        for r in 0..n {
                            let src = &gy[r * (ca + cb) + off..][..width];
                            gv[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
