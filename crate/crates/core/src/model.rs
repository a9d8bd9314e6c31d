//! Model selection: the three network families behind one interface.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionHead, FusionNet, FusionVariant};
use crate::hourglass::{HgConfig, HourglassNet, NetKind, NetworkOutput};
use crate::nn::Ctx;
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Dfd,
    Stereo,
    Fusion(FusionVariant),
}

impl ModelKind {
    pub fn family(self) -> &'static str {
        match self {
            ModelKind::Dfd => "dfd",
            ModelKind::Stereo => "stereo",
            ModelKind::Fusion(_) => "fusion",
        }
    }

    pub fn display_name(self) -> String {
        match self {
            ModelKind::Dfd => "HG-DfD-Net".into(),
            ModelKind::Stereo => "HG-Stereo-Net".into(),
            ModelKind::Fusion(FusionVariant::Full) => "HG-Fusion-Net".into(),
            ModelKind::Fusion(FusionVariant::NoInterconnection) => "No Interconnection".into(),
            ModelKind::Fusion(FusionVariant::LessInterconnection) => "Less Interconnection".into(),
            ModelKind::Fusion(FusionVariant::IdentityInterconnection) => {
                "Identity Interconnection".into()
            }
        }
    }

    /// Number of intermediate predictions per hourglass stack.
    pub fn branches(self) -> usize {
        match self {
            ModelKind::Fusion(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Fusion(v) => write!(f, "fusion/{}", v),
            other => f.write_str(other.family()),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    /// Accepts `dfd`, `stereo`, `fusion` (full) or `fusion/<variant>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dfd" => Ok(ModelKind::Dfd),
            "stereo" => Ok(ModelKind::Stereo),
            "fusion" => Ok(ModelKind::Fusion(FusionVariant::Full)),
            other => match other.strip_prefix("fusion/") {
                Some(v) => Ok(ModelKind::Fusion(v.parse()?)),
                None => Err(Error::Config(format!("unknown model `{}`", other))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hg: HgConfig,
}

impl ModelConfig {
    pub fn desk(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            hg: HgConfig::desk(),
        }
    }

    pub fn paper(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            hg: HgConfig::paper(),
        }
    }

    /// Reads `model`, `variant`, `preset` and the architecture keys; starts
    /// from the desk preset.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let preset: String = kv.take("preset")?.unwrap_or_else(|| "desk".into());
        let mut hg = match preset.as_str() {
            "desk" => HgConfig::desk(),
            "paper" => HgConfig::paper(),
            "micro" => HgConfig::micro(),
            other => return Err(Error::Config(format!("unknown preset `{}`", other))),
        };
        let family: String = kv.take("model")?.unwrap_or_else(|| "dfd".into());
        let variant: Option<FusionVariant> = kv.take("variant")?;
        let kind = match (family.as_str(), variant) {
            ("fusion", v) => ModelKind::Fusion(v.unwrap_or(FusionVariant::Full)),
            (_, Some(_)) => {
                return Err(Error::Config(
                    "`variant` only applies to model = fusion".into(),
                ))
            }
            (f, None) => f.parse()?,
        };
        kv.take_into("base_channels", &mut hg.base_channels)?;
        kv.take_into("c1", &mut hg.c1)?;
        kv.take_into("c2", &mut hg.c2)?;
        kv.take_into("hg_depth", &mut hg.hg_depth)?;
        kv.take_into("num_stacks", &mut hg.num_stacks)?;
        kv.take_into("input_channels", &mut hg.input_channels)?;
        hg.validate()?;
        Ok(ModelConfig { kind, hg })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("model", self.kind.family());
        if let ModelKind::Fusion(v) = self.kind {
            kv.set("variant", v);
        }
        kv.set("base_channels", self.hg.base_channels);
        kv.set("c1", self.hg.c1);
        kv.set("c2", self.hg.c2);
        kv.set("hg_depth", self.hg.hg_depth);
        kv.set("num_stacks", self.hg.num_stacks);
        kv.set("input_channels", self.hg.input_channels);
        kv
    }
}

/// A batch of image triplets, each N×3×H×W.
#[derive(Clone, Debug)]
pub struct InputBatch<T: Scalar = f32> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub left_defocus: Tensor<T>,
}

impl<T: Scalar> InputBatch<T> {
    pub fn dims(&self) -> &[usize] {
        self.left.dims()
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Single(HourglassNet),
    Fusion(FusionNet),
}

impl Model {
    /// Builds the network and registers freshly initialised parameters.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match cfg.kind {
            ModelKind::Dfd => Model::Single(build_dfd_net(&cfg.hg, store, rng)?),
            ModelKind::Stereo => Model::Single(build_stereo_net(&cfg.hg, store, rng)?),
            ModelKind::Fusion(v) => {
                Model::Fusion(FusionNet::new(&cfg.hg, v, FusionHead::Shared, store, rng)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Single(n) if n.kind == NetKind::Dfd => ModelKind::Dfd,
            Model::Single(_) => ModelKind::Stereo,
            Model::Fusion(f) => ModelKind::Fusion(f.variant),
        }
    }

    pub fn hg_config(&self) -> &HgConfig {
        match self {
            Model::Single(n) => &n.cfg,
            Model::Fusion(f) => &f.cfg,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind(),
            hg: self.hg_config().clone(),
        }
    }

    /// Binds the triplet to the network inputs and runs it.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        batch: &InputBatch<T>,
    ) -> Result<NetworkOutput> {
        match self {
            Model::Single(net) => {
                let a = ctx.graph.input(batch.left.clone())?;
                let b = match net.kind {
                    NetKind::Dfd => ctx.graph.input(batch.left_defocus.clone())?,
                    NetKind::Stereo => ctx.graph.input(batch.right.clone())?,
                };
                net.forward(ctx, a, b)
            }
            Model::Fusion(net) => {
                let l = ctx.graph.input(batch.left.clone())?;
                let r = ctx.graph.input(batch.right.clone())?;
                let d = ctx.graph.input(batch.left_defocus.clone())?;
                net.forward(ctx, l, r, d)
            }
        }
    }
}

/// HG-DfD-Net: consumes (left focused, left defocused).
pub fn build_dfd_net<T: Scalar, R: Rng + ?Sized>(
    cfg: &HgConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<HourglassNet> {
    HourglassNet::new(cfg, NetKind::Dfd, "", true, store, rng)
}

/// HG-Stereo-Net: consumes (left focused, right focused).
pub fn build_stereo_net<T: Scalar, R: Rng + ?Sized>(
    cfg: &HgConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<HourglassNet> {
    HourglassNet::new(cfg, NetKind::Stereo, "", true, store, rng)
}
