//! Fixed turbo-style colour map for disparity images.

use defstereo::Image;

/// Polynomial fit of the turbo colour map, `t` in [0, 1].
fn turbo_rgb(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let poly = |c: [f64; 6]| c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
    let r = poly([
        0.13572138,
        4.61539260,
        -42.66032258,
        132.13108234,
        -152.94239396,
        59.28637943,
    ]);
    let g = poly([
        0.09140261,
        2.19418839,
        4.84296658,
        -14.18503333,
        4.27729857,
        2.82956604,
    ]);
    let b = poly([
        0.10667330,
        12.64194608,
        -60.58204836,
        110.36276771,
        -89.90310912,
        27.34824973,
    ]);
    [
        r.clamp(0.0, 1.0) as f32,
        g.clamp(0.0, 1.0) as f32,
        b.clamp(0.0, 1.0) as f32,
    ]
}

/// Maps channel 0 of `disp` from [min, max] onto the colour map; values
/// outside the range saturate.
pub fn turbo(disp: &Image, min: f32, max: f32) -> Image {
    let span = (max - min) as f64;
    Image::from_fn(3, disp.height, disp.width, |c, y, x| {
        let v = disp.get(0, y, x);
        let t = if v.is_finite() {
            (v - min) as f64 / span
        } else {
            0.0
        };
        turbo_rgb(t)[c]
    })
}
