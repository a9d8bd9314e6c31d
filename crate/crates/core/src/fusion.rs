//! HG-Fusion-Net: a DfD and a stereo hourglass network run side by side and
//! exchange features through 1×1 convolutions before their first two
//! hourglasses.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hourglass::{DeconvHead, HgConfig, HourglassNet, NetKind, NetworkOutput};
use crate::nn::{Conv2d, Ctx, ResidualModule};
use crate::tensor::{ParamStore, Scalar, Var};

/// Number of exchange spots (one before each of the first two hourglasses).
pub const EXCHANGE_SPOTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    /// 1×1 exchanges in both directions at both spots (4 convolutions).
    Full,
    /// Branches only meet after the stacks.
    NoInterconnection,
    /// 1×1 exchanges at the first spot only (2 convolutions).
    LessInterconnection,
    /// Raw feature addition at both spots, no convolutions.
    IdentityInterconnection,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Full,
        FusionVariant::NoInterconnection,
        FusionVariant::LessInterconnection,
        FusionVariant::IdentityInterconnection,
    ];

    /// What happens at exchange spot `spot`.
    fn exchange(self, spot: usize) -> Exchange {
        match (self, spot) {
            (FusionVariant::Full, 0 | 1) => Exchange::Conv,
            (FusionVariant::LessInterconnection, 0) => Exchange::Conv,
            (FusionVariant::IdentityInterconnection, 0 | 1) => Exchange::Identity,
            _ => Exchange::None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::Full => "full",
            FusionVariant::NoInterconnection => "none",
            FusionVariant::LessInterconnection => "less",
            FusionVariant::IdentityInterconnection => "identity",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FusionVariant::Full),
            "none" => Ok(FusionVariant::NoInterconnection),
            "less" => Ok(FusionVariant::LessInterconnection),
            "identity" => Ok(FusionVariant::IdentityInterconnection),
            other => Err(Error::Config(format!(
                "unknown fusion variant `{}` (expected full, none, less or identity)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Exchange {
    None,
    Identity,
    Conv,
}

/// How the two branches are turned into one disparity map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionHead {
    /// Concatenate branch features, merge with a residual module, decode with
    /// one deconvolution head.
    Shared,
    /// Each branch decodes with its own head; the outputs are averaged.
    Average,
}

#[derive(Clone, Debug)]
struct SpotConvs {
    to_dfd: Conv2d,
    to_stereo: Conv2d,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub cfg: HgConfig,
    pub variant: FusionVariant,
    pub head_mode: FusionHead,
    pub dfd: HourglassNet,
    pub stereo: HourglassNet,
    spots: Vec<Option<SpotConvs>>,
    merge: Option<ResidualModule>,
    head: Option<DeconvHead>,
}

impl FusionNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: &HgConfig,
        variant: FusionVariant,
        head_mode: FusionHead,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let own_heads = head_mode == FusionHead::Average;
        let dfd = HourglassNet::new(cfg, NetKind::Dfd, "dfd", own_heads, store, rng)?;
        let stereo = HourglassNet::new(cfg, NetKind::Stereo, "stereo", own_heads, store, rng)?;
        let c = cfg.base_channels;
        let mut spots = Vec::new();
        for spot in 0..EXCHANGE_SPOTS.min(cfg.num_stacks) {
            spots.push(match variant.exchange(spot) {
                Exchange::Conv => Some(SpotConvs {
                    to_dfd: Conv2d::pointwise(
                        store,
                        rng,
                        &format!("inter.spot{}.to_dfd", spot),
                        c,
                        c,
                    )?,
                    to_stereo: Conv2d::pointwise(
                        store,
                        rng,
                        &format!("inter.spot{}.to_stereo", spot),
                        c,
                        c,
                    )?,
                }),
                _ => None,
            });
        }
        let (merge, head) = match head_mode {
            FusionHead::Shared => (
                Some(ResidualModule::new(store, rng, "merge", 2 * c, c)?),
                Some(DeconvHead::new(store, rng, "head", cfg)?),
            ),
            FusionHead::Average => (None, None),
        };
        Ok(FusionNet {
            cfg: cfg.clone(),
            variant,
            head_mode,
            dfd,
            stereo,
            spots,
            merge,
            head,
        })
    }

    /// Symmetric exchange: both updates read the pre-exchange features.
    fn exchange<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        spot: usize,
        x_dfd: Var,
        x_stereo: Var,
    ) -> Result<(Var, Var)> {
        if spot >= self.spots.len() {
            return Ok((x_dfd, x_stereo));
        }
        match (self.variant.exchange(spot), &self.spots[spot]) {
            (Exchange::Conv, Some(convs)) => {
                let into_dfd = convs.to_dfd.forward(ctx, x_stereo)?;
                let into_stereo = convs.to_stereo.forward(ctx, x_dfd)?;
                let d = ctx.graph.add(x_dfd, into_dfd)?;
                let s = ctx.graph.add(x_stereo, into_stereo)?;
                Ok((d, s))
            }
            (Exchange::Identity, _) => {
                let d = ctx.graph.add(x_dfd, x_stereo)?;
                let s = ctx.graph.add(x_stereo, x_dfd)?;
                Ok((d, s))
            }
            _ => Ok((x_dfd, x_stereo)),
        }
    }

    /// Branch features right before each hourglass, after the exchange; for
    /// inspection and tests.
    pub fn exchange_points<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        left: Var,
        right: Var,
        left_defocus: Var,
    ) -> Result<Vec<(Var, Var)>> {
        let (points, _) = self.trunk(ctx, left, right, left_defocus)?;
        Ok(points)
    }

    #[allow(clippy::type_complexity)]
    fn trunk<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        left: Var,
        right: Var,
        left_defocus: Var,
    ) -> Result<(Vec<(Var, Var)>, Trunk)> {
        let dims = ctx.graph.dims(left).to_vec();
        if ctx.graph.dims(right) != dims.as_slice()
            || ctx.graph.dims(left_defocus) != dims.as_slice()
        {
            return Err(Error::shape(
                "fusion_forward",
                format!(
                    "left {:?}, right {:?}, defocus {:?}",
                    dims,
                    ctx.graph.dims(right),
                    ctx.graph.dims(left_defocus)
                ),
            ));
        }
        let (_, _, h, w) = ctx.graph.value(left).nchw()?;
        self.cfg.check_input(h, w)?;
        let sd = self.dfd.siamese.forward(ctx, left, left_defocus)?;
        let ss = self.stereo.siamese.forward(ctx, left, right)?;
        let (mut xd, mut xs) = (sd.features, ss.features);
        let mut points = Vec::with_capacity(self.cfg.num_stacks);
        let mut preds = Vec::with_capacity(2 * self.cfg.num_stacks);
        for i in 0..self.cfg.num_stacks {
            (xd, xs) = self.exchange(ctx, i, xd, xs)?;
            points.push((xd, xs));
            let (pd, nd) = self.dfd.stacks[i].forward(ctx, xd)?;
            let (ps, ns) = self.stereo.stacks[i].forward(ctx, xs)?;
            preds.push(pd);
            preds.push(ps);
            xd = nd;
            xs = ns;
        }
        Ok((
            points,
            Trunk {
                dfd: xd,
                stereo: xs,
                preds,
                dfd_skips: (sd.skip_half, sd.skip_full),
                stereo_skips: (ss.skip_half, ss.skip_full),
            },
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        left: Var,
        right: Var,
        left_defocus: Var,
    ) -> Result<NetworkOutput> {
        let (_, t) = self.trunk(ctx, left, right, left_defocus)?;
        let disparity = match self.head_mode {
            FusionHead::Shared => {
                let cat = ctx.graph.concat_channels(t.dfd, t.stereo)?;
                let merged = self
                    .merge
                    .as_ref()
                    .expect("shared head has a merge module")
                    .forward(ctx, cat)?;
                let head = self.head.as_ref().expect("shared head is built");
                head.forward(ctx, merged, t.stereo_skips.0, t.stereo_skips.1)?
            }
            FusionHead::Average => {
                let hd = self
                    .dfd
                    .head
                    .as_ref()
                    .expect("average mode builds branch heads");
                let hs = self
                    .stereo
                    .head
                    .as_ref()
                    .expect("average mode builds branch heads");
                let d = hd.forward(ctx, t.dfd, t.dfd_skips.0, t.dfd_skips.1)?;
                let s = hs.forward(ctx, t.stereo, t.stereo_skips.0, t.stereo_skips.1)?;
                let sum = ctx.graph.add(d, s)?;
                ctx.graph.scale(sum, 0.5)?
            }
        };
        Ok(NetworkOutput {
            final_disparity: disparity,
            intermediate_disparities: t.preds,
        })
    }

    /// Number of 1×1 interconnection convolutions.
    pub fn interconnection_convs(&self) -> usize {
        self.spots.iter().flatten().count() * 2
    }
}

struct Trunk {
    dfd: Var,
    stereo: Var,
    preds: Vec<Var>,
    dfd_skips: (Var, Var),
    stereo_skips: (Var, Var),
}
