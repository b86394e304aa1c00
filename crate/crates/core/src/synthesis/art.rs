//! Procedural label art and planar compositing.

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore};

use crate::matching::Homography;
use crate::raster::Mask;

/// Art colours keep at least this much per-channel distance from the
/// plate, so background differencing recovers product pixels exactly even
/// after photometric jitter.
const PLATE_CLEARANCE: i32 = 80;

fn luma(c: Rgb<u8>) -> f32 {
    0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32
}

fn far_from_plate(c: Rgb<u8>, plate: Rgb<u8>) -> bool {
    (0..3)
        .map(|i| (c[i] as i32 - plate[i] as i32).abs())
        .max()
        .unwrap_or(0)
        >= PLATE_CLEARANCE
}

/// A colour far from the plate whose luma differs from every colour in
/// `avoid` by at least `min_luma_gap`.
pub(crate) fn pick_colour(rng: &mut impl RngCore, plate: Rgb<u8>, avoid: &[Rgb<u8>], min_luma_gap: f32) -> Rgb<u8> {
    for _ in 0..1000 {
        let c = Rgb([rng.random(), rng.random(), rng.random()]);
        if far_from_plate(c, plate) && avoid.iter().all(|a| (luma(*a) - luma(c)).abs() >= min_luma_gap) {
            return c;
        }
    }
    // Unreachable in practice; fall back to the colour farthest from the
    // plate in luma.
    if luma(plate) > 127.0 {
        Rgb([0, 0, 0])
    } else {
        Rgb([255, 255, 255])
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, c: Rgb<u8>) {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..(y0 + h).min(ih) {
        for x in x0.max(0)..(x0 + w).min(iw) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Glyph cell size in pixels; glyphs are 3×5 cells.
const CELL: i64 = 2;

/// Rows of random 3×5 glyphs inside `[x0, x1) × [y0, y1)`.
fn draw_text(img: &mut RgbImage, rng: &mut impl RngCore, area: [i64; 4], ink: &[Rgb<u8>]) {
    let [x0, y0, x1, y1] = area;
    let mut y = y0 + 1;
    while y + 5 * CELL <= y1 {
        let mut x = x0 + 1 + rng.random_range(0..3);
        while x + 3 * CELL <= x1 {
            let c = ink[rng.random_range(0..ink.len())];
            let bits: u16 = rng.random_range(1..(1 << 15));
            for gy in 0..5 {
                for gx in 0..3 {
                    if bits >> (gy * 3 + gx) & 1 == 1 {
                        fill_rect(img, x + gx * CELL, y + gy * CELL, CELL, CELL, c);
                    }
                }
            }
            x += 4 * CELL + rng.random_range(0..2);
        }
        y += 6 * CELL + 1;
    }
}

/// Artwork shared by a look-alike family. The bottom `patch` fraction is
/// left as a plain band for [`stamp_variant`].
pub(crate) fn family_art(rng: &mut impl RngCore, size: (u32, u32), patch: f64, plate: Rgb<u8>) -> RgbImage {
    let (w, h) = (size.0 as i64, size.1 as i64);
    let band = band_height(h, patch);
    let top = h - band;
    let bg = pick_colour(rng, plate, &[], 0.0);
    let mut img = RgbImage::from_pixel(size.0, size.1, bg);
    let mut palette = vec![bg];
    for _ in 0..rng.random_range(3..6) {
        let c = pick_colour(rng, plate, &palette[..1], 50.0);
        let rw = rng.random_range(w / 6..w / 2);
        let rh = rng.random_range((top / 8).max(1)..(top / 3).max(2));
        fill_rect(&mut img, rng.random_range(0..w - rw), rng.random_range(0..(top - rh).max(1)), rw, rh, c);
        palette.push(c);
    }
    let ink: Vec<Rgb<u8>> = (0..2).map(|_| pick_colour(rng, plate, &palette, 45.0)).collect();
    draw_text(&mut img, rng, [2, 2, w - 2, top / 2], &ink);
    draw_text(&mut img, rng, [w / 3, top / 2, w - 2, top], &ink);
    let band_bg = pick_colour(rng, plate, &[], 0.0);
    fill_rect(&mut img, 0, top, w, band, band_bg);
    img
}

fn band_height(h: i64, patch: f64) -> i64 {
    ((h as f64 * patch).round() as i64).clamp(0, h)
}

/// Writes product-specific glyphs and a small colour block into the
/// bottom band.
pub(crate) fn stamp_variant(art: &mut RgbImage, rng: &mut impl RngCore, patch: f64, plate: Rgb<u8>) {
    let (w, h) = (art.width() as i64, art.height() as i64);
    let band = band_height(h, patch);
    if band < 5 * CELL + 2 {
        return;
    }
    let bg = *art.get_pixel(0, (h - band) as u32);
    let block = pick_colour(rng, plate, &[bg], 50.0);
    let bw = rng.random_range(w / 8..w / 5);
    fill_rect(art, rng.random_range(0..w - bw), h - band + 1, bw, band / 3, block);
    let ink: Vec<Rgb<u8>> = (0..2).map(|_| pick_colour(rng, plate, &[bg, block], 45.0)).collect();
    draw_text(art, rng, [1, h - band + band / 3 + 1, w - 1, h], &ink);
}

/// Per-pixel intensity jitter: `(v − 128)·contrast + 128 + brightness`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
}

impl Photometric {
    pub const NONE: Photometric = Photometric {
        brightness: 0.0,
        contrast: 1.0,
    };

    fn apply(&self, c: Rgb<u8>) -> Rgb<u8> {
        Rgb(c.0.map(|v| ((v as f64 - 128.0) * self.contrast + 128.0 + self.brightness).round().clamp(0.0, 255.0) as u8))
    }
}

/// Paints `art` into `canvas` through `h` (art → canvas), nearest-neighbour.
/// A pixel belongs to the product when its centre maps inside the art;
/// `hidden` marks art-space pixels painted in the plate colour instead.
/// Returns the mask of visible product pixels.
pub(crate) fn composite(
    canvas: &mut RgbImage,
    art: &RgbImage,
    h: &Homography,
    photo: Photometric,
    hidden: &dyn Fn(f64, f64) -> bool,
    plate: Rgb<u8>,
) -> Mask {
    let inv = h.inverse().expect("placement homography is invertible");
    let (aw, ah) = (art.width() as f64, art.height() as f64);
    let mut mask = Mask::new(canvas.width(), canvas.height());
    for y in 0..canvas.height() {
        for x in 0..canvas.width() {
            let Some((u, v)) = inv.project((x as f64, y as f64)) else {
                continue;
            };
            if !(u >= -0.5 && u < aw - 0.5 && v >= -0.5 && v < ah - 0.5) {
                continue;
            }
            if hidden(u, v) {
                canvas.put_pixel(x, y, plate);
                continue;
            }
            let (ax, ay) = ((u + 0.5).floor() as u32, (v + 0.5).floor() as u32);
            canvas.put_pixel(x, y, photo.apply(*art.get_pixel(ax.min(art.width() - 1), ay.min(art.height() - 1))));
            mask.set(x, y, true);
        }
    }
    mask
}
