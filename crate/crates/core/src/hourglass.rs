//! Stacked-hourglass disparity network (shared by the DfD and stereo nets).
//!
//! ```text
//! img_a ─┐ siamese (7×7/2 → 5×5/2, shared weights) ┐
//! img_b ─┘                                          ├ concat → 1×1 → x₁
//! x_i → hourglass_i → f_i ─ 1×1 → pred_i (quarter-res disparity)
//! x_{i+1} = x_i + 1×1(f_i) + 1×1(pred_i)
//! x_{S+1} → deconv ⊕ H/2 skip → residual → deconv ⊕ image → residual → 1×1
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BnPrelu, Conv2d, Ctx, Deconv2d, ResidualModule};
use crate::tensor::{ParamStore, Scalar, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HgConfig {
    pub base_channels: usize,
    /// Output channels of the 7×7 siamese convolution.
    pub c1: usize,
    /// Output channels of the 5×5 siamese convolution.
    pub c2: usize,
    /// Pooling rounds per hourglass.
    pub hg_depth: usize,
    pub num_stacks: usize,
    pub input_channels: usize,
}

impl HgConfig {
    pub fn paper() -> Self {
        HgConfig {
            base_channels: 256,
            c1: 64,
            c2: 128,
            hg_depth: 4,
            num_stacks: 2,
            input_channels: 3,
        }
    }

    pub fn desk() -> Self {
        HgConfig {
            base_channels: 32,
            c1: 16,
            c2: 24,
            hg_depth: 2,
            num_stacks: 2,
            input_channels: 3,
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn micro() -> Self {
        HgConfig {
            base_channels: 4,
            c1: 2,
            c2: 3,
            hg_depth: 1,
            num_stacks: 2,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stacks == 0 {
            return Err(Error::Config("num_stacks must be at least 1".into()));
        }
        if self.hg_depth == 0 {
            return Err(Error::Config("hg_depth must be at least 1".into()));
        }
        if self.base_channels < 2 || self.c1 == 0 || self.c2 == 0 || self.input_channels == 0 {
            return Err(Error::Config(format!(
                "channel counts must be positive: {:?}",
                self
            )));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (2 + self.hg_depth)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "hourglass input",
                format!("{}x{} is not divisible by {}", h, w, d),
            ));
        }
        Ok(())
    }
}

/// Which image pair a single hourglass network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    /// (left focused, left defocused)
    Dfd,
    /// (left focused, right focused)
    Stereo,
}

/// Outputs of a forward pass, as nodes of the graph it was recorded on.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// N×1×H×W
    pub final_disparity: Var,
    /// One N×1×(H/4)×(W/4) prediction per hourglass (per branch for fusion).
    pub intermediate_disparities: Vec<Var>,
}

/// Result of the siamese front end.
#[derive(Clone, Debug)]
pub struct SiameseOut {
    /// N×base×H/4×W/4
    pub features: Var,
    /// Branch-a map after the first convolution (N×c1×H/2×W/2).
    pub skip_half: Var,
    /// Branch-a input image (N×3×H×W), the full-resolution skip.
    pub skip_full: Var,
    /// Per-branch outputs before concatenation.
    pub branch_a: Var,
    pub branch_b: Var,
}

#[derive(Clone, Debug)]
pub struct Siamese {
    pub conv1: Conv2d,
    pub act1: BnPrelu,
    pub conv2: Conv2d,
    pub act2: BnPrelu,
    pub fuse: Conv2d,
}

impl Siamese {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &HgConfig,
    ) -> Result<Self> {
        Ok(Siamese {
            conv1: Conv2d::new(
                store,
                rng,
                &format!("{}.conv1", prefix),
                cfg.input_channels,
                cfg.c1,
                7,
                2,
                3,
            )?,
            act1: BnPrelu::new(store, &format!("{}.act1", prefix), cfg.c1)?,
            conv2: Conv2d::new(
                store,
                rng,
                &format!("{}.conv2", prefix),
                cfg.c1,
                cfg.c2,
                5,
                2,
                2,
            )?,
            act2: BnPrelu::new(store, &format!("{}.act2", prefix), cfg.c2)?,
            fuse: Conv2d::pointwise(
                store,
                rng,
                &format!("{}.fuse", prefix),
                2 * cfg.c2,
                cfg.base_channels,
            )?,
        })
    }

    /// One branch; both branches call this with the same parameter names.
    pub fn branch<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, img: Var) -> Result<(Var, Var)> {
        let h1 = self.conv1.forward(ctx, img)?;
        let h1 = self.act1.forward(ctx, h1)?;
        let h2 = self.conv2.forward(ctx, h1)?;
        let h2 = self.act2.forward(ctx, h2)?;
        Ok((h1, h2))
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        img_a: Var,
        img_b: Var,
    ) -> Result<SiameseOut> {
        if ctx.graph.dims(img_a) != ctx.graph.dims(img_b) {
            return Err(Error::shape(
                "siamese",
                format!("{:?} vs {:?}", ctx.graph.dims(img_a), ctx.graph.dims(img_b)),
            ));
        }
        let (half_a, a) = self.branch(ctx, img_a)?;
        let (_, b) = self.branch(ctx, img_b)?;
        let cat = ctx.graph.concat_channels(a, b)?;
        let features = self.fuse.forward(ctx, cat)?;
        Ok(SiameseOut {
            features,
            skip_half: half_a,
            skip_full: img_a,
            branch_a: a,
            branch_b: b,
        })
    }
}

/// One pooling level of an hourglass.
#[derive(Clone, Debug)]
pub struct HgLevel {
    pub skip: ResidualModule,
    pub down: ResidualModule,
    pub after: ResidualModule,
    pub out: ResidualModule,
}

/// Recursive encoder/decoder with a residual skip at every scale.
///
/// Per level: `skip = R(x)`, `down = R(pool(x))`, `inner = next level (or R
/// at the bottom)`, `out = R(up(R(inner)) + skip)`; 4·depth + 1 modules.
#[derive(Clone, Debug)]
pub struct Hourglass {
    pub levels: Vec<HgLevel>,
    pub bottom: ResidualModule,
}

impl Hourglass {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        depth: usize,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let p = format!("{}.l{}", prefix, l);
            levels.push(HgLevel {
                skip: ResidualModule::new(store, rng, &format!("{}.skip", p), channels, channels)?,
                down: ResidualModule::new(store, rng, &format!("{}.down", p), channels, channels)?,
                after: ResidualModule::new(
                    store,
                    rng,
                    &format!("{}.after", p),
                    channels,
                    channels,
                )?,
                out: ResidualModule::new(store, rng, &format!("{}.out", p), channels, channels)?,
            });
        }
        let bottom = ResidualModule::new(
            store,
            rng,
            &format!("{}.bottom", prefix),
            channels,
            channels,
        )?;
        Ok(Hourglass { levels, bottom })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.graph.value(x).nchw()?;
        let d = 1usize << self.levels.len();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "hourglass",
                format!("{}x{} not divisible by {}", h, w, d),
            ));
        }
        self.level(ctx, 0, x)
    }

    fn level<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, i: usize, x: Var) -> Result<Var> {
        let lv = &self.levels[i];
        let skip = lv.skip.forward(ctx, x)?;
        let pooled = ctx.graph.maxpool2(x)?;
        let down = lv.down.forward(ctx, pooled)?;
        let inner = if i + 1 < self.levels.len() {
            self.level(ctx, i + 1, down)?
        } else {
            self.bottom.forward(ctx, down)?
        };
        let low = lv.after.forward(ctx, inner)?;
        let up = ctx.graph.upsample_nn2(low)?;
        let merged = ctx.graph.add(up, skip)?;
        lv.out.forward(ctx, merged)
    }
}

/// One hourglass plus its intermediate-supervision head.
#[derive(Clone, Debug)]
pub struct Stack {
    pub hourglass: Hourglass,
    pub pred: Conv2d,
    pub post: Conv2d,
    pub remap: Conv2d,
}

impl Stack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &HgConfig,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(Stack {
            hourglass: Hourglass::new(store, rng, &format!("{}.hg", prefix), c, cfg.hg_depth)?,
            pred: Conv2d::pointwise(store, rng, &format!("{}.pred", prefix), c, 1)?,
            post: Conv2d::pointwise(store, rng, &format!("{}.post", prefix), c, c)?,
            remap: Conv2d::pointwise(store, rng, &format!("{}.remap", prefix), 1, c)?,
        })
    }

    /// Returns (intermediate prediction, input of the next stack).
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let f = self.hourglass.forward(ctx, x)?;
        let pred = self.pred.forward(ctx, f)?;
        let post = self.post.forward(ctx, f)?;
        let remap = self.remap.forward(ctx, pred)?;
        let next = ctx.graph.add(x, post)?;
        let next = ctx.graph.add(next, remap)?;
        Ok((pred, next))
    }
}

/// Upsampling head: two 2× transposed convolutions, each fused with a
/// higher-resolution skip by concatenation and a residual module.
#[derive(Clone, Debug)]
pub struct DeconvHead {
    pub up1: Deconv2d,
    pub fuse1: ResidualModule,
    pub up2: Deconv2d,
    pub fuse2: ResidualModule,
    pub out: Conv2d,
}

impl DeconvHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &HgConfig,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        let half = c / 2;
        Ok(DeconvHead {
            up1: Deconv2d::new(store, rng, &format!("{}.up1", prefix), c, c)?,
            fuse1: ResidualModule::new(store, rng, &format!("{}.fuse1", prefix), c + cfg.c1, c)?,
            up2: Deconv2d::new(store, rng, &format!("{}.up2", prefix), c, half)?,
            fuse2: ResidualModule::new(
                store,
                rng,
                &format!("{}.fuse2", prefix),
                half + cfg.input_channels,
                half,
            )?,
            out: Conv2d::pointwise(store, rng, &format!("{}.out", prefix), half, 1)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: Var,
        skip_half: Var,
        skip_full: Var,
    ) -> Result<Var> {
        let (_, _, fh, fw) = ctx.graph.value(features).nchw()?;
        let (_, _, hh, hw) = ctx.graph.value(skip_half).nchw()?;
        let (_, _, h, w) = ctx.graph.value(skip_full).nchw()?;
        if (hh, hw) != (2 * fh, 2 * fw) || (h, w) != (4 * fh, 4 * fw) {
            return Err(Error::shape(
                "deconv_head",
                format!(
                    "features {}x{}, skips {}x{} and {}x{}",
                    fh, fw, hh, hw, h, w
                ),
            ));
        }
        let u1 = self.up1.forward(ctx, features)?;
        let c1 = ctx.graph.concat_channels(u1, skip_half)?;
        let r1 = self.fuse1.forward(ctx, c1)?;
        let u2 = self.up2.forward(ctx, r1)?;
        let c2 = ctx.graph.concat_channels(u2, skip_full)?;
        let r2 = self.fuse2.forward(ctx, c2)?;
        self.out.forward(ctx, r2)
    }
}

/// HG-DfD-Net / HG-Stereo-Net. The fusion network reuses everything up to
/// the stacks and builds its own head.
#[derive(Clone, Debug)]
pub struct HourglassNet {
    pub cfg: HgConfig,
    pub kind: NetKind,
    pub siamese: Siamese,
    pub stacks: Vec<Stack>,
    pub head: Option<DeconvHead>,
}

impl HourglassNet {
    /// Registers parameters under `prefix` (empty for a standalone net).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: &HgConfig,
        kind: NetKind,
        prefix: &str,
        with_head: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{}.{}", prefix, s)
            }
        };
        let siamese = Siamese::new(store, rng, &p("siamese"), cfg)?;
        let stacks = (0..cfg.num_stacks)
            .map(|i| Stack::new(store, rng, &p(&format!("stack{}", i)), cfg))
            .collect::<Result<Vec<_>>>()?;
        let head = if with_head {
            Some(DeconvHead::new(store, rng, &p("head"), cfg)?)
        } else {
            None
        };
        Ok(HourglassNet {
            cfg: cfg.clone(),
            kind,
            siamese,
            stacks,
            head,
        })
    }

    /// Runs every stack; returns (intermediate predictions, final features).
    pub fn stacks_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let mut x = features;
        let mut preds = Vec::with_capacity(self.stacks.len());
        for s in &self.stacks {
            let (p, next) = s.forward(ctx, x)?;
            preds.push(p);
            x = next;
        }
        Ok((preds, x))
    }

    /// Full forward on the bound image pair: branch a is always the left
    /// focused view.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        img_a: Var,
        img_b: Var,
    ) -> Result<NetworkOutput> {
        let (_, _, h, w) = ctx.graph.value(img_a).nchw()?;
        self.cfg.check_input(h, w)?;
        let head = self.head.as_ref().ok_or_else(|| {
            Error::Config("network was built without a deconvolution head".into())
        })?;
        let s = self.siamese.forward(ctx, img_a, img_b)?;
        let (preds, x) = self.stacks_forward(ctx, s.features)?;
        let disparity = head.forward(ctx, x, s.skip_half, s.skip_full)?;
        Ok(NetworkOutput {
            final_disparity: disparity,
            intermediate_disparities: preds,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{build_dfd_net, build_stereo_net};
    use crate::nn::Phase;
    use crate::tensor::gradcheck::check_param_gradients;
    use crate::tensor::{Graph, Tensor};

    fn image<T: Scalar>(dims: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(
            dims,
            (0..n).map(|_| T::of(rng.random_range(0.0..1.0))).collect(),
        )
        .unwrap()
    }

    fn small(depth: usize) -> HgConfig {
        HgConfig {
            base_channels: 4,
            c1: 2,
            c2: 3,
            hg_depth: depth,
            num_stacks: 2,
            input_channels: 3,
        }
    }

    #[test]
    fn hourglass_preserves_dims() {
        for depth in 1..=4 {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
            let hg = Hourglass::new(&mut store, &mut rng, "hg", 4, depth).unwrap();
            let mut g = Graph::inference();
            let x = g.input(image(&[1, 4, 16, 32], 1)).unwrap();
            let mut ctx = Ctx::new(&mut g, &mut store, Phase::Train);
            let y = hg.forward(&mut ctx, x).unwrap();
            assert_eq!(g.dims(y), &[1, 4, 16, 32]);
            assert_eq!(hg.levels.len() * 4 + 1, 4 * depth + 1);
        }
    }

    #[test]
    fn hourglass_rejects_indivisible_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hg = Hourglass::new(&mut store, &mut rng, "hg", 4, 2).unwrap();
        let mut g = Graph::inference();
        let x = g.input(image(&[1, 4, 6, 8], 1)).unwrap();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Train);
        assert!(hg.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn depth_one_matches_manual_assembly() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hg = Hourglass::new(&mut store, &mut rng, "hg", 4, 1).unwrap();
        let x = image::<f32>(&[2, 4, 8, 8], 4);

        let mut g = Graph::inference();
        let xv = g.input(x.clone()).unwrap();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let y = hg.forward(&mut ctx, xv).unwrap();
        let got = g.value(y).data().to_vec();

        let names = [
            "hg.l0.skip",
            "hg.l0.down",
            "hg.bottom",
            "hg.l0.after",
            "hg.l0.out",
        ];
        let modules: Vec<ResidualModule> = {
            let mut scratch = ParamStore::<f32>::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            names
                .iter()
                .map(|n| ResidualModule::new(&mut scratch, &mut r, n, 4, 4).unwrap())
                .collect()
        };
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let xv = ctx.graph.input(x).unwrap();
        let skip = modules[0].forward(&mut ctx, xv).unwrap();
        let pooled = ctx.graph.maxpool2(xv).unwrap();
        let down = modules[1].forward(&mut ctx, pooled).unwrap();
        let bottom = modules[2].forward(&mut ctx, down).unwrap();
        let after = modules[3].forward(&mut ctx, bottom).unwrap();
        let up = ctx.graph.upsample_nn2(after).unwrap();
        let merged = ctx.graph.add(up, skip).unwrap();
        let out = modules[4].forward(&mut ctx, merged).unwrap();
        assert_eq!(g.value(out).data(), got.as_slice());
    }

    #[test]
    fn siamese_shares_weights_and_orders_blocks() {
        let cfg = small(1);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Siamese::new(&mut store, &mut rng, "siamese", &cfg).unwrap();
        let a = image::<f32>(&[1, 3, 64, 128], 6);
        let b = image::<f32>(&[1, 3, 64, 128], 7);

        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let av = ctx.graph.input(a.clone()).unwrap();
        let out = s.forward(&mut ctx, av, av).unwrap();
        assert_eq!(g.dims(out.features), &[1, 4, 16, 32]);
        assert_eq!(g.dims(out.skip_half), &[1, 2, 32, 64]);
        assert_eq!(g.value(out.branch_a).data(), g.value(out.branch_b).data());

        let run = |first: &Tensor<f32>, second: &Tensor<f32>, store: &mut ParamStore<f32>| {
            let mut g = Graph::inference();
            let mut ctx = Ctx::new(&mut g, store, Phase::Eval);
            let x = ctx.graph.input(first.clone()).unwrap();
            let y = ctx.graph.input(second.clone()).unwrap();
            let o = s.forward(&mut ctx, x, y).unwrap();
            let cat = g.concat_channels(o.branch_a, o.branch_b).unwrap();
            g.value(cat).data().to_vec()
        };
        let ab = run(&a, &b, &mut store);
        let ba = run(&b, &a, &mut store);
        let block = ab.len() / 2;
        assert_eq!(&ab[..block], &ba[block..]);
        assert_eq!(&ab[block..], &ba[..block]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = HgConfig::micro();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = build_dfd_net(&cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Train);
        let a = ctx.graph.input(image(&[2, 3, 16, 32], 9)).unwrap();
        let b = ctx.graph.input(image(&[2, 3, 16, 32], 10)).unwrap();
        let out = net.forward(&mut ctx, a, b).unwrap();
        let mut terms = vec![(ctx.graph.sum(out.final_disparity).unwrap(), 1.0)];
        for p in &out.intermediate_disparities {
            terms.push((ctx.graph.sum(*p).unwrap(), 1.0));
        }
        let loss = g.weighted_sum(&terms).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g).unwrap();
        let mut checked = 0;
        for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
            let grad = p.tensor.grad().unwrap();
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "{} has an all-zero gradient",
                name
            );
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn two_intermediates_and_zeroed_links_pass_input_through() {
        let cfg = small(1);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = build_stereo_net(&cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let a = ctx.graph.input(image(&[1, 3, 16, 32], 12)).unwrap();
        let b = ctx.graph.input(image(&[1, 3, 16, 32], 13)).unwrap();
        let out = net.forward(&mut ctx, a, b).unwrap();
        assert_eq!(out.intermediate_disparities.len(), 2);
        for p in &out.intermediate_disparities {
            assert_eq!(g.dims(*p), &[1, 1, 4, 8]);
        }
        assert_eq!(g.dims(out.final_disparity), &[1, 1, 16, 32]);

        let stack = &net.stacks[0];
        for conv in [&stack.post, &stack.remap] {
            for name in [&conv.weight, &conv.bias] {
                store.tensor_mut(name).unwrap().data_mut().fill(0.0);
            }
        }
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let x = ctx.graph.input(image(&[1, 4, 4, 8], 14)).unwrap();
        let (_, next) = stack.forward(&mut ctx, x).unwrap();
        assert_eq!(g.value(next).data(), g.value(x).data());
    }

    #[test]
    fn intermediate_prediction_responds_to_input() {
        let cfg = small(1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = build_dfd_net(&cfg, &mut store, &mut rng).unwrap();
        let base = image::<f64>(&[1, 3, 16, 32], 16);
        let mut bumped = base.clone();
        bumped.data_mut()[200] += 1e-3;
        let pred = |img: &Tensor<f64>, store: &mut ParamStore<f64>| {
            let mut g = Graph::inference();
            let mut ctx = Ctx::new(&mut g, store, Phase::Eval);
            let a = ctx.graph.input(img.clone()).unwrap();
            let b = ctx.graph.input(img.clone()).unwrap();
            let out = net.forward(&mut ctx, a, b).unwrap();
            g.value(out.intermediate_disparities[0]).data().to_vec()
        };
        let p0 = pred(&base, &mut store);
        let p1 = pred(&bumped, &mut store);
        let delta: f64 = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 1e-9, "jacobian sample is zero");
    }

    #[test]
    fn head_restores_full_resolution_even_with_zero_skips() {
        let cfg = HgConfig::desk();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let head = DeconvHead::new(&mut store, &mut rng, "head", &cfg).unwrap();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let f = ctx.graph.input(image(&[1, 32, 4, 6], 18)).unwrap();
        let half = ctx.graph.input(Tensor::zeros(&[1, 16, 8, 12])).unwrap();
        let full = ctx.graph.input(Tensor::zeros(&[1, 3, 16, 24])).unwrap();
        let y = head.forward(&mut ctx, f, half, full).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 16, 24]);

        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Eval);
        let wrong = ctx.graph.input(Tensor::zeros(&[1, 3, 8, 12])).unwrap();
        assert!(head.forward(&mut ctx, f, half, wrong).is_err());
    }

    #[test]
    fn desk_dfd_net_on_64_by_128_is_finite() {
        let cfg = HgConfig::desk();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let net = build_dfd_net(&cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, Phase::Train);
        let a = ctx.graph.input(image(&[1, 3, 64, 128], 20)).unwrap();
        let b = ctx.graph.input(image(&[1, 3, 64, 128], 21)).unwrap();
        let out = net.forward(&mut ctx, a, b).unwrap();
        let y = g.value(out.final_disparity);
        assert_eq!(y.dims(), &[1, 1, 64, 128]);
        assert!(y.is_finite());
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sd = ParamStore::<f32>::new();
        build_dfd_net(&HgConfig::desk(), &mut sd, &mut rng).unwrap();
        let mut ss = ParamStore::<f32>::new();
        build_stereo_net(&HgConfig::desk(), &mut ss, &mut rng).unwrap();
        assert_eq!(sd.count_parameters(), ss.count_parameters());
        // Hand-computed: siamese 2368 + 48 + 9624 + 72 + 1568 = 13680
        // (conv, bn+prelu, conv, bn+prelu, 1×1 fuse); residual module
        // 32→32 = 96 + 528 + 48 + 2320 + 48 + 544 = 3584; each stack
        // 9·3584 + 33 + 1056 + 64 = 33409; head 16416 + 5456 + 8208 + 1313
        // + 17 = 31410 (modules 48→32 and 19→16 carry skip projections).
        assert_eq!(sd.count_parameters(), 13680 + 2 * 33409 + 31410);
        assert_eq!(sd.count_parameters(), 111_908);

        let mut sp = ParamStore::<f32>::new();
        let paper = HgConfig::paper();
        Siamese::new(&mut sp, &mut rng, "siamese", &paper).unwrap();
        assert_eq!(
            sp.tensor("siamese.conv1.weight").unwrap().dims(),
            &[64, 3, 7, 7]
        );
        assert_eq!(
            sp.tensor("siamese.conv2.weight").unwrap().dims(),
            &[128, 64, 5, 5]
        );
    }

    #[test]
    fn micro_network_end_to_end_gradient() {
        let cfg = HgConfig::micro();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = build_dfd_net(&cfg, &mut store, &mut rng).unwrap();
        let a = image::<f64>(&[1, 3, 16, 32], 23);
        let b = image::<f64>(&[1, 3, 16, 32], 24);
        let forward = |g: &mut Graph<f64>, store: &mut ParamStore<f64>| {
            let mut ctx = Ctx::new(g, store, Phase::Train);
            let av = ctx.graph.input(a.clone())?;
            let bv = ctx.graph.input(b.clone())?;
            net.forward(&mut ctx, av, bv)
        };
        // Frozen target far from the output so |·| never changes sign.
        let target = {
            let mut g = Graph::inference();
            let out = forward(&mut g, &mut store).unwrap();
            let mut t = g.value(out.final_disparity).clone();
            t.data_mut().iter_mut().for_each(|v| *v += 5.0);
            t
        };
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        let probes: Vec<(String, usize)> = (0..20)
            .map(|_| {
                let name = names[rng.random_range(0..names.len())].clone();
                let j = rng.random_range(0..store.tensor(&name).unwrap().numel());
                (name, j)
            })
            .collect();
        let rel = check_param_gradients(&mut store, &probes, 1e-5, |g, store| {
            let out = forward(g, store)?;
            let t = g.input(target.clone())?;
            g.mae(out.final_disparity, t)
        })
        .unwrap();
        assert!(rel <= 1e-3, "relative error {}", rel);
    }
}
