use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-normalisation statistics source.
pub enum BnMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with externally supplied (running) statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics produced by a training-mode batch norm (biased variance
/// and the element count per channel).
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    Mae {
        pred: Var,
        target: Var,
    },
    SquaredNorm {
        params: Vec<Var>,
        lambda: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// node index is already a topological order and backward walks it in reverse.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    track_grads: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_grads: true,
            backward_done: false,
        }
    }

    /// A graph that never tracks gradients (evaluation / prediction).
    pub fn inference() -> Self {
        Graph {
            track_grads: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        needs_grad: bool,
        op: Op<T>,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: needs_grad && self.track_grads,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a constant or trainable input. The tensor's `requires_grad`
    /// flag decides whether gradients flow to it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad();
        let dims = t.dims().to_vec();
        let value = Tensor::from_vec(&dims, t.into_data())?;
        self.push(value, needs, Op::Leaf, "input")
    }

    /// Looks up a named parameter. Repeated lookups of one name return the
    /// same node, which is how shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let value = Tensor::from_vec(p.tensor.dims(), p.tensor.data().to_vec())?;
        let v = self.push(value, p.trainable, Op::Leaf, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes touched by this graph, keyed by name.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).nchw()?;
        let (co, wci, kh, kw) = self.value(w).nchw()?;
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", ci, wci),
            ));
        }
        if let Some(b) = b {
            if self.dims(b) != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias dims {:?}, expected [{}]", self.dims(b), co),
                ));
            }
        }
        let geom = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (ho, wo) = geom.output_hw().ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "{}x{} input, {}x{} kernel, stride {}, pad {} leaves no output",
                    h, wd, kh, kw, stride, pad
                ),
            )
        })?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            co,
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        let value = Tensor::from_vec(&[n, co, ho, wo], data)?;
        self.push(
            value,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: n,
                out_channels: co,
            },
            "conv2d",
        )
    }

    /// Transposed convolution; `w` is Ci×Co×kh×kw.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).nchw()?;
        let (wci, co, kh, kw) = self.value(w).nchw()?;
        if wci != ci {
            return Err(Error::shape(
                "deconv2d",
                format!("input has {} channels, weight expects {}", ci, wci),
            ));
        }
        if let Some(b) = b {
            if self.dims(b) != [co] {
                return Err(Error::shape(
                    "deconv2d",
                    format!("bias dims {:?}, expected [{}]", self.dims(b), co),
                ));
            }
        }
        if stride == 0 || kernels::deconv_output_hw(h, wd, kh, kw, stride, pad).is_none() {
            return Err(Error::shape("deconv2d", "degenerate output extent"));
        }
        let (data, oh, ow) = kernels::deconv2d_forward(
            self.value(x).data(),
            n,
            ci,
            h,
            wd,
            self.value(w).data(),
            co,
            kh,
            kw,
            stride,
            pad,
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        let value = Tensor::from_vec(&[n, co, oh, ow], data)?;
        self.push(
            value,
            needs,
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "deconv2d",
        )
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("odd spatial extent {}x{}", h, w),
            ));
        }
        let (data, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let needs = self.needs(&[x]);
        let value = Tensor::from_vec(&[n, c, h / 2, w / 2], data)?;
        self.push(value, needs, Op::MaxPool2 { x, argmax }, "maxpool2")
    }

    pub fn upsample_nn2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let data = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let needs = self.needs(&[x]);
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], data)?;
        self.push(value, needs, Op::Upsample2 { x }, "upsample_nn2")
    }

    /// Per-channel batch normalisation. In training mode the batch statistics
    /// are returned so the caller can fold them into running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("affine params must be [{}]", c),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::of(eps);
        let xs = self.value(x).data();
        let train = matches!(mode, BnMode::Train);
        let (mean, var) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::shape(
                        "batchnorm",
                        "training mode needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_count = T::one() / T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += xs[off..off + plane].iter().copied().sum::<T>();
                    }
                    let m = s * inv_count;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sq += xs[off..off + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv_count;
                }
                (mean, var)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batchnorm",
                        "running statistics do not match channel count",
                    ));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let v = self.push(
            value,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            "batchnorm",
        )?;
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((v, stats))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.dims(slope) != [c] {
            return Err(Error::shape("prelu", format!("slope must be [{}]", c)));
        }
        let plane = h * w;
        let a = self.value(slope).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let k = a[i % c];
            for v in chunk {
                if *v < T::zero() {
                    *v = *v * k;
                }
            }
        }
        let needs = self.needs(&[x, slope]);
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        self.push(value, needs, Op::Prelu { x, slope }, "prelu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let needs = self.needs(&[a, b]);
        let value = Tensor::from_vec(self.dims(a), out)?;
        self.push(value, needs, Op::Add { a, b }, "add")
    }

    /// Channel concatenation: channels of `a` first, then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).nchw()?;
        let (nb, cb, hb, wb) = self.value(b).nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let needs = self.needs(&[a, b]);
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        self.push(value, needs, Op::Concat { a, b }, "concat_channels")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * k).collect();
        let needs = self.needs(&[x]);
        let value = Tensor::from_vec(self.dims(x), out)?;
        self.push(value, needs, Op::Scale { x, k }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), needs, Op::Sum { x }, "sum")
    }

    /// Σ weight·term over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = T::zero();
        let mut typed = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term has dims {:?}", self.dims(v)),
                ));
            }
            let w = T::of(w);
            s += w * self.value(v).item();
            typed.push((v, w));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&vars);
        self.push(
            Tensor::scalar(s),
            needs,
            Op::WeightedSum { terms: typed },
            "weighted_sum",
        )
    }

    /// Mean absolute error. The subgradient at zero error is zero.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.dims(pred) != self.dims(target) {
            return Err(Error::shape(
                "mae",
                format!("{:?} vs {:?}", self.dims(pred), self.dims(target)),
            ));
        }
        let n = self.value(pred).numel();
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let needs = self.needs(&[pred, target]);
        self.push(
            Tensor::scalar(s / T::of(n as f64)),
            needs,
            Op::Mae { pred, target },
            "mae",
        )
    }

    /// `lambda · Σ w²` over every decay-tagged trainable parameter of `store`.
    pub fn l2_penalty(&mut self, store: &ParamStore<T>, lambda: f64) -> Result<Var> {
        if lambda < 0.0 {
            return Err(Error::Config(format!(
                "l2 lambda must be non-negative, got {}",
                lambda
            )));
        }
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable && p.decay)
            .map(|(n, _)| n.to_string())
            .collect();
        let mut params = Vec::with_capacity(names.len());
        for n in &names {
            params.push(self.param(store, n)?);
        }
        let lambda = T::of(lambda);
        let mut s = T::zero();
        for &p in &params {
            s += self.value(p).data().iter().map(|&w| w * w).sum::<T>();
        }
        let needs = self.needs(&params);
        self.push(
            Tensor::scalar(lambda * s),
            needs,
            Op::SquaredNorm { params, lambda },
            "l2_penalty",
        )
    }

    /// Reverse pass from a scalar `loss`. May run once per recorded forward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.dims(loss).to_vec()));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &gout);
            self.nodes[idx].grad = Some(gout);
            for (target, g) in contributions {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                let node = &mut self.nodes[target.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.value(v).numel()]
    }

    /// Input gradients of node `idx` given its output gradient.
    fn local_grads(&self, idx: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_channels,
            } => {
                let mut dx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| self.zeros_like(b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    *batch,
                    geom,
                    self.value(*w).data(),
                    *out_channels,
                    gout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dw.map(|g| (*w, g)));
                if let (Some(b), Some(g)) = (b, db) {
                    out.push((*b, g));
                }
            }
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, ci, h, wd) = self.value(*x).nchw().expect("rank checked in forward");
                let (_, co, kh, kw) = self.value(*w).nchw().expect("rank checked in forward");
                let mut dx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| self.zeros_like(b));
                kernels::deconv2d_backward(
                    self.value(*x).data(),
                    n,
                    ci,
                    h,
                    wd,
                    self.value(*w).data(),
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    gout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dw.map(|g| (*w, g)));
                if let (Some(b), Some(g)) = (b, db) {
                    out.push((*b, g));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = self.zeros_like(*x);
                kernels::maxpool2_backward(argmax, gout, &mut dx);
                out.push((*x, dx));
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("rank checked in forward");
                let mut dx = self.zeros_like(*x);
                kernels::upsample2_backward(gout, n * c, h, w, &mut dx);
                out.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("rank checked in forward");
                let plane = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (gc, xc)) in gout.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = i % c;
                    let mut sg = T::zero();
                    let mut sb = T::zero();
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sg += gv * xv;
                        sb += gv;
                    }
                    dgamma[ch] += sg;
                    dbeta[ch] += sb;
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gout.len()];
                    let m = T::of((n * plane) as f64);
                    for (i, ((dc, gc), xc)) in dx
                        .chunks_mut(plane)
                        .zip(gout.chunks(plane))
                        .zip(xhat.chunks(plane))
                        .enumerate()
                    {
                        let ch = i % c;
                        let k = g[ch] * inv_std[ch];
                        if *train {
                            // dx = γ·σ⁻¹ · (dy − mean(dy) − x̂·mean(dy·x̂))
                            let mb = dbeta[ch] / m;
                            let mg = dgamma[ch] / m;
                            for ((d, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                                *d = k * (gv - mb - xv * mg);
                            }
                        } else {
                            for (d, &gv) in dc.iter_mut().zip(gc) {
                                *d = k * gv;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Prelu { x, slope } => {
                let (_, c, h, w) = self.value(*x).nchw().expect("rank checked in forward");
                let plane = h * w;
                let xs = self.value(*x).data();
                let a = self.value(*slope).data();
                let mut dx = gout.to_vec();
                let mut da = vec![T::zero(); c];
                for (i, (xc, dc)) in xs.chunks(plane).zip(dx.chunks_mut(plane)).enumerate() {
                    let ch = i % c;
                    let k = a[ch];
                    let mut acc = T::zero();
                    for (&v, g) in xc.iter().zip(dc.iter_mut()) {
                        if v < T::zero() {
                            acc += v * *g;
                            *g = *g * k;
                        }
                    }
                    da[ch] += acc;
                }
                if self.wants(*x) {
                    out.push((*x, dx));
                }
                if self.wants(*slope) {
                    out.push((*slope, da));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, gout.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, gout.to_vec()));
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).nchw().expect("rank checked in forward");
                let cb = self.value(*b).dims()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let off = i * (ca + cb) * plane;
                    da.extend_from_slice(&gout[off..off + ca * plane]);
                    db.extend_from_slice(&gout[off + ca * plane..off + (ca + cb) * plane]);
                }
                if self.wants(*a) {
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    out.push((*b, db));
                }
            }
            Op::Scale { x, k } => {
                out.push((*x, gout.iter().map(|&g| g * *k).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![gout[0]; self.value(*x).numel()]));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        out.push((v, vec![gout[0] * w]));
                    }
                }
            }
            Op::Mae { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let k = gout[0] / T::of(p.len() as f64);
                let dp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        if d > T::zero() {
                            k
                        } else if d < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*target) {
                    out.push((*target, dp.iter().map(|&g| -g).collect()));
                }
                if self.wants(*pred) {
                    out.push((*pred, dp));
                }
            }
            Op::SquaredNorm { params, lambda } => {
                let two = T::of(2.0);
                for &p in params {
                    if self.wants(p) {
                        let k = two * *lambda * gout[0];
                        out.push((p, self.value(p).data().iter().map(|&w| k * w).collect()));
                    }
                }
            }
        }
        out
    }
}
