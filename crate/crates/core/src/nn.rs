//! Layers shared by the hourglass and fusion networks.
//!
//! Layers only hold parameter names; the values live in a [`ParamStore`] so a
//! network definition can be rebuilt against a loaded checkpoint.

use std::sync::Once;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{he_init, BnMode, Graph, ParamStore, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Everything a forward pass needs: the tape, the parameters, and the phase.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub phase: Phase,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, phase: Phase) -> Self {
        Ctx {
            graph,
            store,
            phase,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.graph.param(self.store, name)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = join(prefix, "weight");
        let bias = join(prefix, "bias");
        store.add_param(
            &weight,
            he_init(&[out_ch, in_ch, kernel, kernel], rng),
            true,
        )?;
        store.add_param(&bias, Tensor::zeros(&[out_ch]), false)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// 1×1 convolution.
    pub fn pointwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        Self::new(store, rng, prefix, in_ch, out_ch, 1, 1, 0)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = ctx.param(&self.bias)?;
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 4×4, stride 2, pad 1 transposed convolution: exact 2× upsampling.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: String,
    pub bias: String,
}

impl Deconv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let weight = join(prefix, "weight");
        let bias = join(prefix, "bias");
        store.add_param(&weight, he_init(&[in_ch, out_ch, 4, 4], rng), true)?;
        store.add_param(&bias, Tensor::zeros(&[out_ch]), false)?;
        Ok(Deconv2d { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = ctx.param(&self.bias)?;
        ctx.graph.deconv2d(x, w, Some(b), 2, 1)
    }
}

static UNTRAINED_STATS: Once = Once::new();

/// Batch normalisation with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub updates: String,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        let bn = BatchNorm {
            gamma: join(prefix, "gamma"),
            beta: join(prefix, "beta"),
            running_mean: join(prefix, "running_mean"),
            running_var: join(prefix, "running_var"),
            updates: join(prefix, "updates"),
        };
        store.add_param(&bn.gamma, Tensor::full(&[channels], T::one()), false)?;
        store.add_param(&bn.beta, Tensor::zeros(&[channels]), false)?;
        store.add_buffer(&bn.running_mean, Tensor::zeros(&[channels]))?;
        store.add_buffer(&bn.running_var, Tensor::full(&[channels], T::one()))?;
        store.add_buffer(&bn.updates, Tensor::zeros(&[1]))?;
        Ok(bn)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&self.gamma)?;
        let beta = ctx.param(&self.beta)?;
        match ctx.phase {
            Phase::Train => {
                let (y, stats) = ctx
                    .graph
                    .batch_norm(x, gamma, beta, BnMode::Train, BN_EPS)?;
                let stats = stats.expect("training mode returns batch statistics");
                let m = T::of(BN_MOMENTUM);
                let unbias = T::of(stats.count as f64 / (stats.count as f64 - 1.0));
                let rm = ctx.store.tensor_mut(&self.running_mean)?.data_mut();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                let rv = ctx.store.tensor_mut(&self.running_var)?.data_mut();
                for (r, &b) in rv.iter_mut().zip(&stats.var) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
                let n = ctx.store.tensor_mut(&self.updates)?.data_mut();
                n[0] += T::one();
                Ok(y)
            }
            Phase::Eval => {
                if ctx.store.tensor(&self.updates)?.item() == T::zero() {
                    UNTRAINED_STATS.call_once(|| {
                        log::warn!("batch norm evaluated before any training update; using initial statistics (mean 0, var 1)")
                    });
                }
                let mean = ctx.store.tensor(&self.running_mean)?.data().to_vec();
                let var = ctx.store.tensor(&self.running_var)?.data().to_vec();
                let (y, _) = ctx.graph.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: &mean,
                        var: &var,
                    },
                    BN_EPS,
                )?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: String,
}

impl Prelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        let slope = join(prefix, "slope");
        store.add_param(&slope, Tensor::full(&[channels], T::of(PRELU_INIT)), false)?;
        Ok(Prelu { slope })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = ctx.param(&self.slope)?;
        ctx.graph.prelu(x, a)
    }
}

/// BatchNorm followed by PReLU.
#[derive(Clone, Debug)]
pub struct BnPrelu {
    pub bn: BatchNorm,
    pub act: Prelu,
}

impl BnPrelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(BnPrelu {
            bn: BatchNorm::new(store, &join(prefix, "bn"), channels)?,
            act: Prelu::new(store, &join(prefix, "prelu"), channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(ctx, x)?;
        self.act.forward(ctx, y)
    }
}

/// Bottleneck residual module: three pre-activated convolutions
/// (1×1 → C/2, 3×3, 1×1 → C) plus an identity skip, or a 1×1 projection on
/// the skip when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualModule {
    pub pre1: BnPrelu,
    pub conv1: Conv2d,
    pub pre2: BnPrelu,
    pub conv2: Conv2d,
    pub pre3: BnPrelu,
    pub conv3: Conv2d,
    pub proj: Option<Conv2d>,
}

impl ResidualModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let mid = (out_ch / 2).max(1);
        Ok(ResidualModule {
            pre1: BnPrelu::new(store, &join(prefix, "pre1"), in_ch)?,
            conv1: Conv2d::pointwise(store, rng, &join(prefix, "conv1"), in_ch, mid)?,
            pre2: BnPrelu::new(store, &join(prefix, "pre2"), mid)?,
            conv2: Conv2d::new(store, rng, &join(prefix, "conv2"), mid, mid, 3, 1, 1)?,
            pre3: BnPrelu::new(store, &join(prefix, "pre3"), mid)?,
            conv3: Conv2d::pointwise(store, rng, &join(prefix, "conv3"), mid, out_ch)?,
            proj: if in_ch != out_ch {
                Some(Conv2d::pointwise(
                    store,
                    rng,
                    &join(prefix, "proj"),
                    in_ch,
                    out_ch,
                )?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.pre1.forward(ctx, x)?;
        y = self.conv1.forward(ctx, y)?;
        y = self.pre2.forward(ctx, y)?;
        y = self.conv2.forward(ctx, y)?;
        y = self.pre3.forward(ctx, y)?;
        y = self.conv3.forward(ctx, y)?;
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        ctx.graph.add(y, skip)
    }

    /// Trainable scalars of a module with the given channel counts.
    pub fn parameter_count(in_ch: usize, out_ch: usize) -> usize {
        let mid = (out_ch / 2).max(1);
        let bnp = |c: usize| 3 * c;
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        bnp(in_ch)
            + conv(in_ch, mid, 1)
            + bnp(mid)
            + conv(mid, mid, 3)
            + bnp(mid)
            + conv(mid, out_ch, 1)
            + if in_ch != out_ch {
                conv(in_ch, out_ch, 1)
            } else {
                0
            }
    }
}
