//! Image formation for layered scenes: pinhole views, occlusion-aware
//! defocus, light-field synthesis, shift-and-add refocusing and sensor noise.
//!
//! Disparity convention: a layer at disparity `d` appears `d` pixels further
//! left in the right view. A view at horizontal offset `s` (0 = left, 1 =
//! right) samples layer `k` at `x + d_k·s`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Disparities must stay below this many pixels.
pub const MAX_DISPARITY: f64 = 100.0;

/// Noisy intensities are clamped to [0, NOISE_CEILING].
pub const NOISE_CEILING: f32 = 4.0;

/// Supersampling factor per axis when rasterising the disc kernel.
const DISC_SUPERSAMPLE: usize = 16;

/// One fronto-parallel layer: RGB colour, coverage mask and disparity.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub color: Image,
    /// Single-channel coverage in [0, 1].
    pub alpha: Image,
    pub disparity: f64,
}

/// Layers ordered back to front; compositing order is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredScene {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<Layer>,
}

impl LayeredScene {
    pub fn validate(&self) -> Result<()> {
        let back = self
            .layers
            .first()
            .ok_or_else(|| Error::Scene("scene has no layers".into()))?;
        for (k, l) in self.layers.iter().enumerate() {
            if l.color.channels != 3 || l.color.height != self.height || l.color.width != self.width
            {
                return Err(Error::Scene(format!(
                    "layer {} colour is not 3x{}x{}",
                    k, self.height, self.width
                )));
            }
            if l.alpha.channels != 1 || l.alpha.height != self.height || l.alpha.width != self.width
            {
                return Err(Error::Scene(format!(
                    "layer {} mask is not 1x{}x{}",
                    k, self.height, self.width
                )));
            }
            if !l.disparity.is_finite() || l.disparity.abs() >= MAX_DISPARITY {
                return Err(Error::Scene(format!(
                    "layer {} disparity {} outside (-{}, {})",
                    k, l.disparity, MAX_DISPARITY, MAX_DISPARITY
                )));
            }
        }
        if back.alpha.data.iter().any(|&a| a != 1.0) {
            return Err(Error::Scene("backmost layer must be fully opaque".into()));
        }
        Ok(())
    }

    pub fn max_disparity(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.disparity.abs())
            .fold(0.0, f64::max)
    }

    /// Disparity of the front-most layer covering each pixel of the left
    /// view (coverage ≥ 0.5).
    pub fn disparity_map(&self) -> Image {
        let mut out = Image::new(1, self.height, self.width);
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = self
                .layers
                .iter()
                .rev()
                .find(|l| l.alpha.data[i] >= 0.5)
                .map_or(self.layers[0].disparity, |l| l.disparity) as f32;
        }
        out
    }
}

/// Out-of-canvas behaviour when sampling a layer.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Edge {
    Clamp,
    Transparent,
}

/// Bilinear sample of a plane at (x, y).
#[inline]
fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64, edge: Edge) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let tap = |xi: f64, yi: f64| -> f64 {
        let (xi, yi) = (xi as i64, yi as i64);
        let inside = xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h;
        match (edge, inside) {
            (_, true) => plane[yi as usize * w + xi as usize] as f64,
            (Edge::Transparent, false) => 0.0,
            (Edge::Clamp, false) => {
                let xc = xi.clamp(0, w as i64 - 1) as usize;
                let yc = yi.clamp(0, h as i64 - 1) as usize;
                plane[yc * w + xc] as f64
            }
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return tap(x0, y0);
    }
    let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1.0, y0) * fx;
    if fy == 0.0 {
        return top;
    }
    let bottom = tap(x0, y0 + 1.0) * (1.0 - fx) + tap(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Composites the scene with every layer `k` sampled at
/// `(x + d_k·sx, y + d_k·sy)`.
pub fn render_shifted(scene: &LayeredScene, sx: f64, sy: f64) -> Result<Image> {
    scene.validate()?;
    let (h, w) = (scene.height, scene.width);
    let mut acc = vec![[0.0f64; 3]; h * w];
    for (k, layer) in scene.layers.iter().enumerate() {
        let edge = if k == 0 {
            Edge::Clamp
        } else {
            Edge::Transparent
        };
        let (dx, dy) = (layer.disparity * sx, layer.disparity * sy);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + dx, y as f64 + dy);
                let a = bilinear(&layer.alpha.data, h, w, px, py, edge);
                if a == 0.0 {
                    continue;
                }
                let px_acc = &mut acc[y * w + x];
                for (c, v) in px_acc.iter_mut().enumerate() {
                    // Premultiplied colour, so partially covered samples do
                    // not drag in colour from outside the mask.
                    let pm = premultiplied_sample(layer, c, h, w, px, py, edge);
                    *v = pm + (1.0 - a) * *v;
                }
            }
        }
    }
    Ok(Image::from_fn(3, h, w, |c, y, x| acc[y * w + x][c] as f32))
}

fn premultiplied_sample(
    layer: &Layer,
    c: usize,
    h: usize,
    w: usize,
    x: f64,
    y: f64,
    edge: Edge,
) -> f64 {
    let color = layer.color.plane(c);
    let alpha = &layer.alpha.data;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let tap = |xi: f64, yi: f64| -> f64 {
        let (xi, yi) = (xi as i64, yi as i64);
        let inside = xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h;
        let idx = match (edge, inside) {
            (_, true) => yi as usize * w + xi as usize,
            (Edge::Transparent, false) => return 0.0,
            (Edge::Clamp, false) => {
                xi.clamp(0, w as i64 - 1) as usize + yi.clamp(0, h as i64 - 1) as usize * w
            }
        };
        color[idx] as f64 * alpha[idx] as f64
    };
    if fx == 0.0 && fy == 0.0 {
        return tap(x0, y0);
    }
    let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1.0, y0) * fx;
    if fy == 0.0 {
        return top;
    }
    let bottom = tap(x0, y0 + 1.0) * (1.0 - fx) + tap(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Pinhole view at horizontal offset `view_shift` (0 = left, 1 = right).
pub fn render_view(scene: &LayeredScene, view_shift: f64) -> Result<Image> {
    render_shifted(scene, view_shift, 0.0)
}

/// Thin-lens defocus parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefocusConfig {
    /// Disparity of the in-focus plane (px).
    pub focal_disparity: f64,
    /// Kernel diameter per pixel of disparity offset from the focal plane.
    pub kappa: f64,
    /// Photons at intensity 1.0; 0 disables noise.
    pub noise_peak: f64,
}

impl DefocusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || !self.focal_disparity.is_finite() {
            return Err(Error::Config(format!(
                "invalid defocus parameters {:?}",
                self
            )));
        }
        if !(self.noise_peak >= 0.0) {
            return Err(Error::Config("noise_peak must be non-negative".into()));
        }
        Ok(())
    }

    /// Circle-of-confusion diameter for a layer at disparity `d`.
    pub fn blur_diameter(&self, d: f64) -> f64 {
        self.kappa * (d - self.focal_disparity).abs()
    }
}

/// Square disc kernel with odd side, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }
}

/// Anti-aliased uniform disc of the given diameter: each cell's weight is
/// its covered area, estimated by 16×16 supersampling, normalised to sum to
/// one. Diameters below one pixel give the identity kernel.
pub fn disc_kernel(diameter: f64) -> Kernel {
    if !(diameter >= 1.0) {
        return Kernel {
            radius: 0,
            weights: vec![1.0],
        };
    }
    let r = diameter / 2.0;
    let radius = (r + 0.5).ceil() as usize - 1;
    let side = 2 * radius + 1;
    let mut weights = vec![0.0; side * side];
    for (iy, row) in weights.chunks_mut(side).enumerate() {
        for (ix, wgt) in row.iter_mut().enumerate() {
            *wgt = cell_coverage(ix as f64 - radius as f64, iy as f64 - radius as f64, r);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Kernel { radius, weights }
}

/// Fraction of the unit cell centred at (cx, cy) inside the disc of radius
/// `r` about the origin, by 16×16 supersampling.
fn cell_coverage(cx: f64, cy: f64, r: f64) -> f64 {
    let n = DISC_SUPERSAMPLE;
    let mut hits = 0usize;
    for sy in 0..n {
        let y = cy - 0.5 + (sy as f64 + 0.5) / n as f64;
        for sx in 0..n {
            let x = cx - 0.5 + (sx as f64 + 0.5) / n as f64;
            if x * x + y * y <= r * r {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

/// Correlates a plane with `k`, clamping samples to the canvas edge.
fn convolve_clamped(plane: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    if k.radius == 0 {
        return plane.iter().map(|&v| v * k.weights[0]).collect();
    }
    let r = k.radius as isize;
    let taps: Vec<(isize, isize, f64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (dy, dx, k.at(dy, dx)))
        .filter(|t| t.2 != 0.0)
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for &(dy, dx, wt) in &taps {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                s += wt * plane[yy * w + xx];
            }
            out[y as usize * w + x as usize] = s;
        }
    }
    out
}

/// Layered defocus: each layer's premultiplied colour and mask are blurred
/// with its own disc, then composited back to front, so a sharp foreground
/// never picks up background colour and background pixels outside a blurred
/// silhouette never see foreground texture.
pub fn render_defocus(scene: &LayeredScene, cfg: &DefocusConfig) -> Result<Image> {
    scene.validate()?;
    cfg.validate()?;
    let (h, w) = (scene.height, scene.width);
    let n = h * w;
    let mut acc = vec![0.0f64; 3 * n];
    for layer in &scene.layers {
        let k = disc_kernel(cfg.blur_diameter(layer.disparity));
        let alpha: Vec<f64> = layer.alpha.data.iter().map(|&a| a as f64).collect();
        let alpha_b = convolve_clamped(&alpha, h, w, &k);
        for c in 0..3 {
            let pm: Vec<f64> = layer
                .color
                .plane(c)
                .iter()
                .zip(&alpha)
                .map(|(&v, &a)| v as f64 * a)
                .collect();
            let pm_b = convolve_clamped(&pm, h, w, &k);
            for (i, v) in acc[c * n..(c + 1) * n].iter_mut().enumerate() {
                *v = pm_b[i] + (1.0 - alpha_b[i]) * *v;
            }
        }
    }
    Image::from_vec(
        3,
        h,
        w,
        acc.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}

/// Angular grid of sub-aperture views, indexed by (i, j) ∈ [−c, c]² with
/// c = (A−1)/2; `i` is horizontal.
#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    pub angular: usize,
    /// Pixel shift per unit angular offset per unit disparity.
    pub u_scale: f64,
    /// Row-major over (j, i).
    pub views: Vec<Image>,
}

#[derive(Serialize, Deserialize)]
struct LightFieldMeta {
    angular_size: usize,
    u_scale: f64,
    height: usize,
    width: usize,
}

const LF_META: &str = "lightfield.json";

impl LightField {
    pub fn half(&self) -> isize {
        (self.angular as isize - 1) / 2
    }

    pub fn view(&self, i: isize, j: isize) -> &Image {
        let c = self.half();
        &self.views[((j + c) * self.angular as isize + i + c) as usize]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.views[0].height, self.views[0].width)
    }

    fn view_name(i: isize, j: isize) -> String {
        format!("view_{:+03}_{:+03}.pfm", j, i)
    }

    /// Writes one PFM per view plus `lightfield.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = self.half();
        for j in -c..=c {
            for i in -c..=c {
                self.view(i, j).save_pfm(&dir.join(Self::view_name(i, j)))?;
            }
        }
        let (height, width) = self.dims();
        let meta = LightFieldMeta {
            angular_size: self.angular,
            u_scale: self.u_scale,
            height,
            width,
        };
        let path = dir.join(LF_META);
        let text = serde_json::to_string_pretty(&meta).expect("plain struct serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<LightField> {
        let path = dir.join(LF_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: LightFieldMeta = serde_json::from_str(&text)
            .map_err(|e| Error::format("light-field metadata", &path, e.to_string()))?;
        if meta.angular_size % 2 == 0 || meta.angular_size == 0 {
            return Err(Error::format(
                "light-field metadata",
                &path,
                "angular_size must be odd",
            ));
        }
        let c = (meta.angular_size as isize - 1) / 2;
        let mut views = Vec::with_capacity(meta.angular_size * meta.angular_size);
        for j in -c..=c {
            for i in -c..=c {
                let p = dir.join(Self::view_name(i, j));
                let v = Image::load_pfm(&p)?;
                if (v.height, v.width) != (meta.height, meta.width) {
                    return Err(Error::format("pfm", &p, "view dims disagree with metadata"));
                }
                views.push(v);
            }
        }
        Ok(LightField {
            angular: meta.angular_size,
            u_scale: meta.u_scale,
            views,
        })
    }

    /// Element-wise `a·self + b·other`.
    pub fn combine(&self, a: f32, other: &LightField, b: f32) -> Result<LightField> {
        if self.angular != other.angular || self.dims() != other.dims() {
            return Err(Error::shape("light field", "mismatched light fields"));
        }
        let views = self
            .views
            .iter()
            .zip(&other.views)
            .map(|(x, y)| {
                let data = x
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&p, &q)| a * p + b * q)
                    .collect();
                Image::from_vec(x.channels, x.height, x.width, data).expect("same dims")
            })
            .collect();
        Ok(LightField {
            angular: self.angular,
            u_scale: self.u_scale,
            views,
        })
    }
}

/// Default angular unit: the extreme horizontal views form a baseline-1
/// stereo pair.
pub fn default_u_scale(angular: usize) -> f64 {
    1.0 / ((angular as f64 - 1.0) / 2.0)
}

/// Sub-aperture view (i, j) shifts every layer by (−d·i·u, −d·j·u).
pub fn synth_lightfield(scene: &LayeredScene, angular: usize) -> Result<LightField> {
    synth_lightfield_scaled(scene, angular, default_u_scale(angular.max(3)))
}

pub fn synth_lightfield_scaled(
    scene: &LayeredScene,
    angular: usize,
    u_scale: f64,
) -> Result<LightField> {
    if angular < 3 || angular % 2 == 0 {
        return Err(Error::Config(format!(
            "angular size must be odd and at least 3, got {}",
            angular
        )));
    }
    let c = (angular as isize - 1) / 2;
    let mut views = Vec::with_capacity(angular * angular);
    for j in -c..=c {
        for i in -c..=c {
            views.push(render_shifted(
                scene,
                i as f64 * u_scale,
                j as f64 * u_scale,
            )?);
        }
    }
    Ok(LightField {
        angular,
        u_scale,
        views,
    })
}

/// Refocus slope σ: the disparity rendered sharp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefocusParams {
    pub slope: f64,
}

impl RefocusParams {
    pub fn from_slope(slope: f64) -> Self {
        RefocusParams { slope }
    }

    /// Photography-equation parameter α (focal plane at α·F), σ = 1 − 1/α.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha == 0.0 || !alpha.is_finite() {
            return Err(Error::Config("alpha must be finite and nonzero".into()));
        }
        Ok(RefocusParams {
            slope: 1.0 - 1.0 / alpha,
        })
    }
}

/// Shift-and-add refocusing:
/// `E(x, y) = mean_{i,j} L_{i,j}(x − σ·i·u, y − σ·j·u)`, bilinear with edge
/// clamp. A layer at disparity σ has its per-view shifts undone exactly.
pub fn refocus(lf: &LightField, params: RefocusParams) -> Image {
    refocus_with_aperture(lf, params, None)
}

/// Refocuses through a circular synthetic aperture of `radius` angular
/// units: each view is weighted by the area of its angular cell inside the
/// disc. `None` weights all views equally.
pub fn refocus_with_aperture(lf: &LightField, params: RefocusParams, radius: Option<f64>) -> Image {
    let (h, w) = lf.dims();
    let channels = lf.views[0].channels;
    let c = lf.half();
    let mut acc = vec![0.0f64; channels * h * w];
    let mut total = 0.0;
    for j in -c..=c {
        for i in -c..=c {
            let weight = radius.map_or(1.0, |r| cell_coverage(i as f64, j as f64, r));
            if weight == 0.0 {
                continue;
            }
            total += weight;
            let view = lf.view(i, j);
            let sx = -params.slope * i as f64 * lf.u_scale;
            let sy = -params.slope * j as f64 * lf.u_scale;
            for ch in 0..channels {
                let plane = view.plane(ch);
                let out = &mut acc[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        out[y * w + x] += weight
                            * bilinear(plane, h, w, x as f64 + sx, y as f64 + sy, Edge::Clamp);
                    }
                }
            }
        }
    }
    let inv = 1.0 / total;
    Image::from_vec(
        channels,
        h,
        w,
        acc.iter().map(|&v| (v * inv) as f32).collect(),
    )
    .expect("dims match")
}

/// Mean squared forward-difference gradient over pixels where `mask` holds.
pub fn gradient_energy(img: &Image, mask: impl Fn(usize, usize) -> bool) -> f64 {
    let (h, w) = (img.height, img.width);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..img.channels {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                if !mask(y, x) {
                    continue;
                }
                let v = img.get(c, y, x) as f64;
                let gx = img.get(c, y, x + 1) as f64 - v;
                let gy = img.get(c, y + 1, x) as f64 - v;
                sum += gx * gx + gy * gy;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `Poisson(v·peak)/peak` per value, clamped to [0, 4].
pub fn add_poisson_noise<R: Rng + ?Sized>(img: &Image, peak: f64, rng: &mut R) -> Result<Image> {
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Config(format!(
            "noise peak must be positive, got {}",
            peak
        )));
    }
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        let lambda = (*v as f64).max(0.0) * peak;
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .expect("positive finite rate")
                .sample(rng)
        } else {
            0.0
        };
        *v = ((count / peak) as f32).clamp(0.0, NOISE_CEILING);
    }
    Ok(out)
}
