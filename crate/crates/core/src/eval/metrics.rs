//! Texture and text consistency scores over a known garment mask.

use crate::enrich::analysis::{analyze_region, nearest_background};
use crate::error::{Error, Result};
use crate::model::{GrayImage, RgbImage};
use crate::synth::{parse_caption, silhouette_mask, Rect};

pub const COLOR_BINS: usize = 27;
pub const ORIENTATION_BINS: usize = 8;
/// Per-channel gradient magnitude below which a pixel pair is ignored.
pub const GRADIENT_THRESHOLD: f64 = 16.0;

fn check_aligned(img: &RgbImage, mask: &GrayImage) -> Result<()> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::dim(
            "mask",
            &[mask.height, mask.width],
            &[img.height, img.width],
        ));
    }
    Ok(())
}

fn inside(mask: &GrayImage, x: usize, y: usize) -> bool {
    mask.get(x, y) > 0
}

/// `[27-bin color histogram | 8-bin orientation histogram]`, each half
/// normalised to unit L1 mass (the orientation half stays zero on flat
/// regions).
pub fn texture_features(img: &RgbImage, mask: &GrayImage) -> Result<Vec<f64>> {
    check_aligned(img, mask)?;
    let mut color = [0.0; COLOR_BINS];
    let mut orient = [0.0; ORIENTATION_BINS];
    for y in 0..img.height {
        for x in 0..img.width {
            if !inside(mask, x, y) {
                continue;
            }
            let p = img.get(x, y);
            let bin = |v: u8| v as usize * 3 / 256;
            color[bin(p[0]) * 9 + bin(p[1]) * 3 + bin(p[2])] += 1.0;
            let (right, down) = (x + 1 < img.width, y + 1 < img.height);
            if !(right && down && inside(mask, x + 1, y) && inside(mask, x, y + 1)) {
                continue;
            }
            let (pr, pd) = (img.get(x + 1, y), img.get(x, y + 1));
            for c in 0..3 {
                let gx = pr[c] as f64 - p[c] as f64;
                let gy = pd[c] as f64 - p[c] as f64;
                let mag = gx.hypot(gy);
                if mag < GRADIENT_THRESHOLD {
                    continue;
                }
                let angle = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let b = ((angle / std::f64::consts::PI * ORIENTATION_BINS as f64) as usize)
                    .min(ORIENTATION_BINS - 1);
                orient[b] += mag;
            }
        }
    }
    let mass: f64 = color.iter().sum();
    if mass == 0.0 {
        return Err(Error::Metric("mask selects no pixels".into()));
    }
    let omass: f64 = orient.iter().sum();
    let mut out: Vec<f64> = color.iter().map(|c| c / mass).collect();
    out.extend(orient.iter().map(|o| if omass > 0.0 { o / omass } else { 0.0 }));
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine similarity, clipped to `[0, 1]`, between the texture features of
/// the masked region of `generated` and the same region of `reference`.
pub fn texture_sim(generated: &RgbImage, mask: &GrayImage, reference: &RgbImage) -> Result<f64> {
    let a = texture_features(generated, mask)?;
    let b = texture_features(reference, mask)?;
    Ok(cosine(&a, &b).clamp(0.0, 1.0))
}

/// Bounding box of the nonzero mask pixels.
pub fn mask_bounds(mask: &GrayImage) -> Result<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if inside(mask, x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::Metric("mask selects no pixels".into()));
    }
    Ok(Rect { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 })
}

/// Fraction of the attributes named by `caption` (foreground color,
/// pattern, background) that the classifiers find in `generated`. `None`
/// when the caption names none of them.
pub fn text_score(generated: &RgbImage, mask: &GrayImage, caption: &str) -> Result<Option<f64>> {
    check_aligned(generated, mask)?;
    let parsed = parse_caption(caption);
    let rect = mask_bounds(mask)?;
    let garment = analyze_region(generated, rect);
    let mut named = 0usize;
    let mut hits = 0usize;
    if let Some(fg) = parsed.color_fg {
        named += 1;
        hits += usize::from(garment.color_fg == Some(fg));
    }
    if let Some(p) = parsed.pattern {
        named += 1;
        hits += usize::from(garment.pattern.map(|g| g.0) == Some(p));
    }
    if let Some(bg) = parsed.background {
        named += 1;
        hits += usize::from(dominant_background(generated)? == Some(bg));
    }
    Ok((named > 0).then(|| hits as f64 / named as f64))
}

/// Background class nearest to the mean color off the person silhouette.
fn dominant_background(img: &RgbImage) -> Result<Option<crate::synth::Background>> {
    let sil = silhouette_mask();
    check_aligned(img, &sil)?;
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..img.height {
        for x in 0..img.width {
            if !inside(&sil, x, y) {
                let p = img.get(x, y);
                (0..3).for_each(|c| sum[c] += p[c] as f64);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mean = sum.map(|s| (s / n as f64).round() as u8);
    Ok(Some(nearest_background(mean)))
}
