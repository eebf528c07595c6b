use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CategorySpec, RgbImage, ShapeKind};
use crate::geometry::BinaryMask;

/// Inner radius of a ring relative to its outer radius.
const RING_INNER: f64 = 0.5;

/// Rasterizes a shape inscribed in a `w x h` box. A pixel is set when its centre
/// lies inside the shape.
pub fn render_shape_mask(shape: ShapeKind, w: usize, h: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (c as f64 + 0.5, r as f64 + 0.5);
            let (dx, dy) = ((u - rx) / rx, (v - ry) / ry);
            let d2 = dx * dx + dy * dy;
            let inside = match shape {
                ShapeKind::Square => true,
                ShapeKind::Disc => d2 <= 1.0,
                ShapeKind::Ring => (RING_INNER * RING_INNER..=1.0).contains(&d2),
                ShapeKind::Triangle => (u - rx).abs() <= v / h as f64 * rx,
            };
            m.set(r, c, inside);
        }
    }
    m
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Appearance drawn once per object and kept for its lifetime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Appearance {
    pub rgb: [f64; 3],
    pub textured: bool,
}

impl Appearance {
    pub fn sample(cat: &CategorySpec, rng: &mut ChaCha8Rng) -> Self {
        let f = &cat.color;
        let hue = f.hue + rng.random_range(-f.hue_jitter..=f.hue_jitter);
        let s = rng.random_range(f.saturation.0..=f.saturation.1);
        let v = rng.random_range(f.value.0..=f.value.1);
        Self {
            rgb: hsv_to_rgb(hue, s, v),
            textured: cat.textured,
        }
    }
}

/// Fills the image with a noisy dark-grey background.
pub(crate) fn paint_background(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let base: f64 = rng.random_range(0.15..0.35);
    for r in 0..img.height {
        for c in 0..img.width {
            let rgb: [u8; 3] = std::array::from_fn(|_| to_u8(base + rng.random_range(-0.06..0.06)));
            img.put(r, c, rgb);
        }
    }
}

/// Paints `mask` (positioned with its top-left at `(x0, y0)`) in the given appearance.
pub(crate) fn paint_object(
    img: &mut RgbImage,
    mask: &BinaryMask,
    x0: usize,
    y0: usize,
    app: &Appearance,
    rng: &mut ChaCha8Rng,
) {
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask.get(r, c) {
                continue;
            }
            let (gy, gx) = (y0 + r, x0 + c);
            if gy >= img.height || gx >= img.width {
                continue;
            }
            // diagonal stripes in object-local coordinates
            let shade = if app.textured && ((r + c) / 3) % 2 == 0 {
                0.55
            } else {
                1.0
            };
            let rgb: [u8; 3] =
                std::array::from_fn(|k| to_u8(app.rgb[k] * shade + rng.random_range(-0.04..0.04)));
            img.put(gy, gx, rgb);
        }
    }
}

/// Places a local mask into an image-sized mask.
pub(crate) fn place_mask(
    local: &BinaryMask,
    x0: usize,
    y0: usize,
    height: usize,
    width: usize,
) -> BinaryMask {
    let mut m = BinaryMask::zeros(height, width);
    for r in 0..local.height() {
        for c in 0..local.width() {
            if local.get(r, c) && y0 + r < height && x0 + c < width {
                m.set(y0 + r, x0 + c, true);
            }
        }
    }
    m
}
