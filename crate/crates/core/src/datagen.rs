//! Procedural stereo + defocus datasets.
//!
//! Scenes are stacks of fronto-parallel textured layers. Each sample renders
//! the left and right pinhole views, a defocused left view and the exact
//! left-view disparity, then adds Poisson noise to the three images.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optics::{self, DefocusConfig, Layer, LayeredScene, MAX_DISPARITY};

/// Test-split scenes draw seeds from this offset up, train from zero.
pub const TEST_SEED_OFFSET: u64 = 1 << 40;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SceneRecipe {
    /// 2–6 layers of rectangles and ellipses over a full-frame background.
    Random {
        min_layers: usize,
        max_layers: usize,
    },
    /// Horizontal bands, nearer towards the bottom, covered in stripes.
    Staircase {
        num_steps: usize,
        /// Stripe period in pixels.
        stripe_period: f64,
        /// Radians; 0 gives horizontal stripes.
        stripe_angle: f64,
    },
}

impl SceneRecipe {
    pub fn random() -> Self {
        SceneRecipe::Random {
            min_layers: 2,
            max_layers: 6,
        }
    }

    pub fn staircase() -> Self {
        SceneRecipe::Staircase {
            num_steps: 4,
            stripe_period: 8.0,
            stripe_angle: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneRecipe::Random { .. } => "random",
            SceneRecipe::Staircase { .. } => "staircase",
        }
    }

    /// The named recipe with its parameters overridden from `kv`
    /// (`min_layers`, `max_layers`, `num_steps`, `stripe_period`,
    /// `stripe_angle`).
    pub fn from_kv(name: &str, kv: &mut KvConfig) -> Result<Self> {
        let mut r = Self::from_name(name)?;
        match &mut r {
            SceneRecipe::Random {
                min_layers,
                max_layers,
            } => {
                kv.take_into("min_layers", min_layers)?;
                kv.take_into("max_layers", max_layers)?;
            }
            SceneRecipe::Staircase {
                num_steps,
                stripe_period,
                stripe_angle,
            } => {
                kv.take_into("num_steps", num_steps)?;
                kv.take_into("stripe_period", stripe_period)?;
                kv.take_into("stripe_angle", stripe_angle)?;
            }
        }
        Ok(r)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "random" => Ok(Self::random()),
            "staircase" => Ok(Self::staircase()),
            other => Err(Error::Config(format!(
                "unknown recipe `{}` (random or staircase)",
                other
            ))),
        }
    }
}

/// Canvas, disparity and blur ranges for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub height: usize,
    pub width: usize,
    pub disparity_min: f64,
    pub disparity_max: f64,
    /// Blur-kernel diameters realised by the scene's layers stay inside
    /// [kernel_min, kernel_max].
    pub kernel_min: f64,
    pub kernel_max: f64,
    pub kappa: f64,
    pub noise_peak: f64,
}

impl DatagenConfig {
    /// 128×96 canvas, disparities 1–12 px, kernels 2–8 px.
    pub fn desk() -> Self {
        DatagenConfig {
            height: 96,
            width: 128,
            disparity_min: 1.0,
            disparity_max: 12.0,
            kernel_min: 2.0,
            kernel_max: 8.0,
            kappa: 0.5,
            noise_peak: 1000.0,
        }
    }

    /// 960×540 canvas, disparities below 100 px, kernels 7–23 px.
    pub fn paper() -> Self {
        DatagenConfig {
            height: 540,
            width: 960,
            disparity_min: 1.0,
            disparity_max: 99.0,
            kernel_min: 7.0,
            kernel_max: 23.0,
            kappa: 16.0 / 98.0,
            noise_peak: 1000.0,
        }
    }

    /// Reads `preset` (desk or paper) and the canvas / range keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let preset: String = kv.take("preset")?.unwrap_or_else(|| "desk".into());
        let mut c = match preset.as_str() {
            "desk" => Self::desk(),
            "paper" => Self::paper(),
            other => return Err(Error::Config(format!("unknown preset `{}`", other))),
        };
        kv.take_into("height", &mut c.height)?;
        kv.take_into("width", &mut c.width)?;
        kv.take_into("disparity_min", &mut c.disparity_min)?;
        kv.take_into("disparity_max", &mut c.disparity_max)?;
        kv.take_into("kernel_min", &mut c.kernel_min)?;
        kv.take_into("kernel_max", &mut c.kernel_max)?;
        kv.take_into("kappa", &mut c.kappa)?;
        kv.take_into("noise_peak", &mut c.noise_peak)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        if !(self.disparity_min >= 0.0
            && self.disparity_min <= self.disparity_max
            && self.disparity_max < MAX_DISPARITY)
        {
            return Err(Error::Config(format!(
                "disparity range [{}, {}] must lie in [0, {})",
                self.disparity_min, self.disparity_max, MAX_DISPARITY
            )));
        }
        if !(self.kappa > 0.0) || !(self.noise_peak >= 0.0) {
            return Err(Error::Config(
                "kappa must be positive and noise_peak non-negative".into(),
            ));
        }
        self.focal_range().map(|_| ())
    }

    /// Focal-plane disparities that keep every kernel in range. The focal
    /// plane sits beyond the farthest layer, so blur grows monotonically with
    /// disparity.
    pub fn focal_range(&self) -> Result<(f64, f64)> {
        let lo = self.disparity_max - self.kernel_max / self.kappa;
        let hi = self.disparity_min - self.kernel_min / self.kappa;
        if lo > hi + 1e-9 {
            return Err(Error::Config(format!(
                "no focal plane maps disparities [{}, {}] to kernels [{}, {}] at kappa {}",
                self.disparity_min,
                self.disparity_max,
                self.kernel_min,
                self.kernel_max,
                self.kappa
            )));
        }
        Ok((lo, hi.max(lo)))
    }

    pub fn draw_defocus<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DefocusConfig> {
        let (lo, hi) = self.focal_range()?;
        let focal_disparity = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        Ok(DefocusConfig {
            focal_disparity,
            kappa: self.kappa,
            noise_peak: self.noise_peak,
        })
    }
}

/// Render parameters stored next to every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub focal_disparity: f64,
    pub kappa: f64,
    pub noise_peak: f64,
    pub scene_seed: u64,
    pub recipe: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    pub left: Image,
    pub right: Image,
    pub left_defocus: Image,
    /// Left-view disparity in pixels.
    pub disparity: Image,
    pub meta: SampleMeta,
}

impl SampleTriplet {
    pub fn height(&self) -> usize {
        self.left.height
    }

    pub fn width(&self) -> usize {
        self.left.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, img, c) in [
            ("left", &self.left, 3),
            ("right", &self.right, 3),
            ("defocus", &self.left_defocus, 3),
            ("disparity", &self.disparity, 1),
        ] {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::Sample {
                    id: self.meta.scene_seed.to_string(),
                    detail: format!(
                        "{} is {}x{}x{}, expected {}x{}x{}",
                        name, img.channels, img.height, img.width, c, h, w
                    ),
                });
            }
        }
        Ok(())
    }

    /// Same sample restricted to a window of the canvas.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<SampleTriplet> {
        Ok(SampleTriplet {
            left: self.left.crop(y0, x0, h, w)?,
            right: self.right.crop(y0, x0, h, w)?,
            left_defocus: self.left_defocus.crop(y0, x0, h, w)?,
            disparity: self.disparity.crop(y0, x0, h, w)?,
            meta: self.meta.clone(),
        })
    }
}

/// Columns synthesised past the right edge so the right view looks onto
/// real layer content there instead of the end of the layer.
pub fn overscan(cfg: &DatagenConfig) -> usize {
    cfg.disparity_max.ceil() as usize + 1
}

/// Per-sample generator: the master seed selects the key, the scene seed
/// the stream, so samples are independent of generation order.
pub fn scene_rng(master_seed: u64, scene_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(scene_seed);
    rng
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

/// Two colours whose mean brightness differs noticeably.
fn contrasting_pair<R: Rng + ?Sized>(rng: &mut R) -> ([f32; 3], [f32; 3]) {
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let la: f32 = a.iter().sum::<f32>() / 3.0;
        let lb: f32 = b.iter().sum::<f32>() / 3.0;
        if (la - lb).abs() > 0.25 {
            return (a, b);
        }
    }
}

/// Square-wave stripes; `angle` 0 varies only with y (horizontal stripes).
pub fn stripes(
    h: usize,
    w: usize,
    period: f64,
    angle: f64,
    phase: f64,
    a: [f32; 3],
    b: [f32; 3],
) -> Image {
    let (s, c) = angle.sin_cos();
    Image::from_fn(3, h, w, |ch, y, x| {
        let t = (y as f64 * c + x as f64 * s) / period + phase;
        if t.rem_euclid(1.0) < 0.5 {
            a[ch]
        } else {
            b[ch]
        }
    })
}

fn random_texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Image {
    let (a, b) = contrasting_pair(rng);
    match rng.random_range(0..4) {
        0 => {
            let cell = rng.random_range(4..14);
            Image::from_fn(3, h, w, |c, y, x| {
                if (y / cell + x / cell) % 2 == 0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
        1 => {
            // Value noise: a coarse random grid, bilinearly upsampled, plus
            // fine grain.
            let cell = rng.random_range(3..9) as f64;
            let gh = (h as f64 / cell) as usize + 2;
            let gw = (w as f64 / cell) as usize + 2;
            let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
            let fine: Vec<f32> = (0..h * w).map(|_| rng.random_range(-0.08..0.08)).collect();
            Image::from_fn(3, h, w, |c, y, x| {
                let gy = y as f64 / cell;
                let gx = x as f64 / cell;
                let (y0, x0) = (gy as usize, gx as usize);
                let (fy, fx) = ((gy - y0 as f64) as f32, (gx - x0 as f64) as f32);
                let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                let t = (g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx) * (1.0 - fy)
                    + (g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx) * fy;
                (a[c] * t + b[c] * (1.0 - t) + fine[y * w + x]).clamp(0.0, 1.0)
            })
        }
        2 => {
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let (s, co) = angle.sin_cos();
            let span = (h * h + w * w) as f64;
            let span = span.sqrt();
            Image::from_fn(3, h, w, |c, y, x| {
                let t = ((y as f64 * co + x as f64 * s) / span + 0.5).clamp(0.0, 1.0) as f32;
                a[c] * t + b[c] * (1.0 - t)
            })
        }
        _ => {
            let period = rng.random_range(4.0..16.0);
            // A quarter of striped textures are exactly horizontal.
            let angle = if rng.random_bool(0.25) {
                0.0
            } else {
                rng.random_range(0.0..PI)
            };
            stripes(h, w, period, angle, rng.random_range(0.0..1.0), a, b)
        }
    }
}

fn random_mask<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Image {
    let cy = rng.random_range(0.15..0.85) * h as f64;
    let cx = rng.random_range(0.15..0.85) * w as f64;
    let ry = rng.random_range(0.12..0.35) * h as f64;
    let rx = rng.random_range(0.12..0.35) * w as f64;
    if rng.random_bool(0.5) {
        Image::from_fn(1, h, w, |_, y, x| {
            ((y as f64 - cy).abs() <= ry && (x as f64 - cx).abs() <= rx) as u8 as f32
        })
    } else {
        Image::from_fn(1, h, w, |_, y, x| {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            (dy * dy + dx * dx <= 1.0) as u8 as f32
        })
    }
}

/// Builds a scene; identical seeds give identical scenes.
pub fn generate_scene<R: Rng + ?Sized>(
    recipe: &SceneRecipe,
    cfg: &DatagenConfig,
    rng: &mut R,
) -> Result<LayeredScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let (dmin, dmax) = (cfg.disparity_min, cfg.disparity_max);
    match *recipe {
        SceneRecipe::Random {
            min_layers,
            max_layers,
        } => {
            if min_layers == 0 || max_layers < min_layers {
                return Err(Error::Config(format!(
                    "random recipe needs 1 ≤ min_layers ≤ max_layers, got {}..{}",
                    min_layers, max_layers
                )));
            }
            loop {
                let n = rng.random_range(min_layers..=max_layers);
                let mut disparities: Vec<f64> = (0..n)
                    .map(|_| {
                        if dmax > dmin {
                            rng.random_range(dmin..=dmax)
                        } else {
                            dmin
                        }
                    })
                    .collect();
                // Nearer layers (larger disparity) are composited later.
                disparities.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let layers: Vec<Layer> = disparities
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| Layer {
                        color: random_texture(h, w, rng),
                        alpha: if k == 0 {
                            Image::filled(1, h, w, 1.0)
                        } else {
                            random_mask(h, w, rng)
                        },
                        disparity: d,
                    })
                    .collect();
                let scene = LayeredScene {
                    height: h,
                    width: w,
                    layers,
                };
                if scene.max_disparity() < MAX_DISPARITY {
                    return Ok(scene);
                }
            }
        }
        SceneRecipe::Staircase {
            num_steps,
            stripe_period,
            stripe_angle,
        } => {
            if num_steps == 0 || num_steps > h {
                return Err(Error::Config(format!(
                    "staircase needs 1..={} steps, got {}",
                    h, num_steps
                )));
            }
            if !(stripe_period > 0.0) {
                return Err(Error::Config("stripe_period must be positive".into()));
            }
            let layers = (0..num_steps)
                .map(|k| {
                    let d = if num_steps == 1 {
                        dmin
                    } else {
                        dmin + (dmax - dmin) * k as f64 / (num_steps - 1) as f64
                    };
                    let top = k * h / num_steps;
                    let (a, b) = contrasting_pair(rng);
                    Layer {
                        color: stripes(
                            h,
                            w,
                            stripe_period,
                            stripe_angle,
                            rng.random_range(0.0..1.0),
                            a,
                            b,
                        ),
                        alpha: Image::from_fn(1, h, w, |_, y, _| (y >= top) as u8 as f32),
                        disparity: d,
                    }
                })
                .collect();
            Ok(LayeredScene {
                height: h,
                width: w,
                layers,
            })
        }
    }
}

/// Renders the triplet; noise (if any) is drawn independently per image.
pub fn render_triplet<R: Rng + ?Sized>(
    scene: &LayeredScene,
    cfg: &DefocusConfig,
    rng: &mut R,
    scene_seed: u64,
    recipe: &str,
) -> Result<SampleTriplet> {
    let mut left = optics::render_view(scene, 0.0)?;
    let mut right = optics::render_view(scene, 1.0)?;
    let mut left_defocus = optics::render_defocus(scene, cfg)?;
    if cfg.noise_peak > 0.0 {
        left = optics::add_poisson_noise(&left, cfg.noise_peak, rng)?;
        right = optics::add_poisson_noise(&right, cfg.noise_peak, rng)?;
        left_defocus = optics::add_poisson_noise(&left_defocus, cfg.noise_peak, rng)?;
    }
    Ok(SampleTriplet {
        left,
        right,
        left_defocus,
        disparity: scene.disparity_map(),
        meta: SampleMeta {
            focal_disparity: cfg.focal_disparity,
            kappa: cfg.kappa,
            noise_peak: cfg.noise_peak,
            scene_seed,
            recipe: recipe.to_string(),
        },
    })
}

/// One complete sample from (master seed, scene seed).
pub fn generate_sample(
    recipe: &SceneRecipe,
    cfg: &DatagenConfig,
    master_seed: u64,
    scene_seed: u64,
) -> Result<SampleTriplet> {
    let mut rng = scene_rng(master_seed, scene_seed);
    let wide = DatagenConfig {
        width: cfg.width + overscan(cfg),
        ..cfg.clone()
    };
    let scene = generate_scene(recipe, &wide, &mut rng)?;
    let defocus = cfg.draw_defocus(&mut rng)?;
    render_triplet(&scene, &defocus, &mut rng, scene_seed, recipe.name())?
        .crop(0, 0, cfg.height, cfg.width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => TEST_SEED_OFFSET,
        }
    }
}

/// A sample with its dataset identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: String,
    pub split: Split,
    pub sample: SampleTriplet,
}

/// Generates `n_train` + `n_test` samples in parallel; the result depends
/// only on the arguments.
pub fn generate_dataset(
    recipe: &SceneRecipe,
    cfg: &DatagenConfig,
    master_seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<Vec<Entry>> {
    cfg.validate()?;
    let jobs: Vec<(Split, usize)> = (0..n_train)
        .map(|i| (Split::Train, i))
        .chain((0..n_test).map(|i| (Split::Test, i)))
        .collect();
    jobs.par_iter()
        .map(|&(split, i)| {
            let sample = generate_sample(recipe, cfg, master_seed, split.seed_base() + i as u64)?;
            Ok(Entry {
                id: format!("{}_{:05}", split.label(), i),
                split,
                sample,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

/// `manifest.json`: sample ids, their split and the generating config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub recipe: SceneRecipe,
    pub config: DatagenConfig,
    pub samples: Vec<ManifestEntry>,
}

fn write_sample(dir: &Path, sample: &SampleTriplet) -> Result<()> {
    sample.left.save_png(&dir.join("left.png"))?;
    sample.right.save_png(&dir.join("right.png"))?;
    sample.left_defocus.save_png(&dir.join("defocus.png"))?;
    sample.disparity.save_pfm(&dir.join("disp.pfm"))?;
    let meta = serde_json::to_string_pretty(&sample.meta).expect("plain struct serialises");
    let p = dir.join("meta.json");
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))
}

/// Writes one directory per sample (via a temporary directory and rename)
/// and the manifest last.
pub fn write_dataset(
    entries: &[Entry],
    dir: &Path,
    master_seed: u64,
    recipe: &SceneRecipe,
    cfg: &DatagenConfig,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        e.sample.validate()?;
        let tmp = dir.join(format!(".{}.tmp", e.id));
        let dst = dir.join(&e.id);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|err| Error::io(&tmp, err))?;
        }
        fs::create_dir(&tmp).map_err(|err| Error::io(&tmp, err))?;
        write_sample(&tmp, &e.sample)?;
        if dst.exists() {
            fs::remove_dir_all(&dst).map_err(|err| Error::io(&dst, err))?;
        }
        fs::rename(&tmp, &dst).map_err(|err| Error::io(&dst, err))?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        master_seed,
        recipe: recipe.clone(),
        config: cfg.clone(),
        samples: entries
            .iter()
            .map(|e| ManifestEntry {
                id: e.id.clone(),
                split: e.split,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("plain struct serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", &path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(
            "manifest",
            &path,
            format!("unsupported version {}", m.version),
        ));
    }
    Ok(m)
}

/// Loads one sample directory, reporting failures against `id`.
pub fn load_sample(dir: &Path, id: &str) -> Result<SampleTriplet> {
    let sd = dir.join(id);
    let wrap = |e: Error| Error::Sample {
        id: id.to_string(),
        detail: e.to_string(),
    };
    if !sd.is_dir() {
        return Err(Error::Sample {
            id: id.to_string(),
            detail: format!("missing directory {}", sd.display()),
        });
    }
    let meta_path = sd.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| wrap(Error::io(&meta_path, e)))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::Sample {
        id: id.to_string(),
        detail: format!("malformed meta.json: {}", e),
    })?;
    let sample = SampleTriplet {
        left: Image::load_png(&sd.join("left.png")).map_err(wrap)?,
        right: Image::load_png(&sd.join("right.png")).map_err(wrap)?,
        left_defocus: Image::load_png(&sd.join("defocus.png")).map_err(wrap)?,
        disparity: Image::load_pfm(&sd.join("disp.pfm")).map_err(wrap)?,
        meta,
    };
    sample.validate().map_err(|e| match e {
        Error::Sample { detail, .. } => Error::Sample {
            id: id.to_string(),
            detail,
        },
        other => other,
    })?;
    Ok(sample)
}

/// Loads every sample listed in the manifest, optionally one split only.
/// Sample directories not in the manifest are an error.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<(Manifest, Vec<Entry>)> {
    let manifest = read_manifest(dir)?;
    let listed: std::collections::BTreeSet<&str> =
        manifest.samples.iter().map(|s| s.id.as_str()).collect();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for de in rd {
        let de = de.map_err(|e| Error::io(dir, e))?;
        let name = de.file_name().to_string_lossy().into_owned();
        if de.path().is_dir() && !name.starts_with('.') && !listed.contains(name.as_str()) {
            return Err(Error::format(
                "manifest",
                dir.join(MANIFEST),
                format!("directory `{}` is not listed", name),
            ));
        }
    }
    let entries = manifest
        .samples
        .iter()
        .filter(|s| split.is_none_or(|sp| sp == s.split))
        .map(|s| {
            Ok(Entry {
                id: s.id.clone(),
                split: s.split,
                sample: load_sample(dir, &s.id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, entries))
}

/// Placeholder for FlyingThings3D ingestion.
///
/// Expected mapping, per frame: `frames_cleanpass/<seq>/left/NNNN.png` →
/// `left`, `right/NNNN.png` → `right`, `disparity/<seq>/left/NNNN.pfm` →
/// `disparity` (values below 100 px kept), with the defocused view rendered
/// from the disparity layers. Not implemented; datasets here are procedural.
pub fn load_flyingthings3d(root: &Path) -> Result<Vec<SampleTriplet>> {
    Err(Error::Config(format!(
        "FlyingThings3D ingestion is not implemented ({}); use `gen` for procedural data",
        root.display()
    )))
}

/// Channel-stacked crop: left (0..3), right (3..6), defocus (6..9).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub input: Image,
    pub target: Image,
    pub origin: (usize, usize),
}

impl Patch {
    pub fn from_sample(s: &SampleTriplet) -> Self {
        let mut data = Vec::with_capacity(9 * s.height() * s.width());
        data.extend_from_slice(&s.left.data);
        data.extend_from_slice(&s.right.data);
        data.extend_from_slice(&s.left_defocus.data);
        Patch {
            input: Image::from_vec(9, s.height(), s.width(), data).expect("dims match"),
            target: s.disparity.clone(),
            origin: (0, 0),
        }
    }

    fn slice(&self, k: usize) -> Image {
        let n = 3 * self.input.height * self.input.width;
        Image::from_vec(
            3,
            self.input.height,
            self.input.width,
            self.input.data[k * n..(k + 1) * n].to_vec(),
        )
        .expect("dims match")
    }

    pub fn left(&self) -> Image {
        self.slice(0)
    }

    pub fn right(&self) -> Image {
        self.slice(1)
    }

    pub fn left_defocus(&self) -> Image {
        self.slice(2)
    }
}

#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
}

/// Window origins along one axis: every `stride`, plus a final window
/// flush with the far border.
pub fn window_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + patch <= len)
        .collect();
    if let Some(&last) = v.last() {
        if last + patch < len {
            v.push(len - patch);
        }
    }
    v
}

pub fn extract_patches(
    sample: &SampleTriplet,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
) -> Result<PatchSet> {
    if stride == 0 || patch_h == 0 || patch_w == 0 {
        return Err(Error::Config(
            "patch dims and stride must be positive".into(),
        ));
    }
    if patch_h > sample.height() || patch_w > sample.width() {
        return Err(Error::shape(
            "extract_patches",
            format!(
                "patch {}x{} larger than image {}x{}",
                patch_h,
                patch_w,
                sample.height(),
                sample.width()
            ),
        ));
    }
    let full = Patch::from_sample(sample);
    let mut patches = Vec::new();
    for &y in &window_origins(sample.height(), patch_h, stride) {
        for &x in &window_origins(sample.width(), patch_w, stride) {
            patches.push(Patch {
                input: full.input.crop(y, x, patch_h, patch_w)?,
                target: full.target.crop(y, x, patch_h, patch_w)?,
                origin: (y, x),
            });
        }
    }
    Ok(PatchSet {
        patches,
        patch_h,
        patch_w,
        stride,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Right-view disparity from the left one by forward warping: each left
/// pixel lands at `x − d`, nearer surfaces win, and pixels only the right
/// view sees take the farther of their horizontal neighbours.
pub fn right_view_disparity(left_disp: &Image) -> Image {
    let (h, w) = (left_disp.height, left_disp.width);
    let mut out = Image::filled(1, h, w, f32::NAN);
    for y in 0..h {
        for x in 0..w {
            let d = left_disp.get(0, y, x);
            let t = (x as f32 - d).round();
            if t >= 0.0 && (t as usize) < w {
                let cur = out.get(0, y, t as usize);
                if cur.is_nan() || d > cur {
                    out.set(0, y, t as usize, d);
                }
            }
        }
        for x in 0..w {
            if out.get(0, y, x).is_nan() {
                let left = (0..x).rev().map(|i| out.get(0, y, i)).find(|v| !v.is_nan());
                let right = (x + 1..w).map(|i| out.get(0, y, i)).find(|v| !v.is_nan());
                let v = match (left, right) {
                    (Some(a), Some(b)) => a.min(b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => left_disp.get(0, y, x),
                };
                out.set(0, y, x, v);
            }
        }
    }
    out
}

/// Flip augmentation. A horizontal flip mirrors every image; with
/// `swap_views` (stereo-only inputs) the mirrored right image becomes the
/// new left and vice versa, and the target becomes the mirrored right-view
/// disparity, so disparities stay positive and valid. The defocused image
/// only exists for the left camera, so inputs that use it are mirrored
/// without a swap.
pub fn augment(patch: &Patch, flip: Flip, swap_views: bool) -> Patch {
    match flip {
        Flip::None => patch.clone(),
        Flip::Vertical => Patch {
            input: patch.input.flip_vertical(),
            target: patch.target.flip_vertical(),
            origin: patch.origin,
        },
        Flip::Horizontal if !swap_views => Patch {
            input: patch.input.flip_horizontal(),
            target: patch.target.flip_horizontal(),
            origin: patch.origin,
        },
        Flip::Horizontal => {
            let (h, w) = (patch.input.height, patch.input.width);
            let n = 3 * h * w;
            let m = patch.input.flip_horizontal();
            let mut data = Vec::with_capacity(9 * h * w);
            data.extend_from_slice(&m.data[n..2 * n]);
            data.extend_from_slice(&m.data[..n]);
            data.extend_from_slice(&m.data[2 * n..]);
            Patch {
                input: Image::from_vec(9, h, w, data).expect("dims match"),
                target: right_view_disparity(&patch.target).flip_horizontal(),
                origin: patch.origin,
            }
        }
    }
}

/// Uniform choice among no flip, horizontal and vertical.
pub fn random_flip<R: Rng + ?Sized>(rng: &mut R) -> Flip {
    *[Flip::None, Flip::Horizontal, Flip::Vertical]
        .choose(rng)
        .expect("non-empty")
}
