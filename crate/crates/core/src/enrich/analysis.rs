//! Deterministic garment attribute classifiers over the garment rectangle.

use crate::model::{Rgb, RgbImage};
use crate::synth::{Background, Color, Pattern, Rect, GARMENT_RECT, SCALES};

/// Minimum correlation for a pattern to be recognised.
pub const PATTERN_THRESHOLD: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GarmentAnalysis {
    pub color_fg: Option<Color>,
    pub color_bg: Option<Color>,
    /// Best pattern and scale, present only above [`PATTERN_THRESHOLD`].
    pub pattern: Option<(Pattern, usize)>,
    /// Best correlation over all candidates.
    pub correlation: f64,
}

fn dist2(a: Rgb, b: Rgb) -> i32 {
    (0..3).map(|i| (a[i] as i32 - b[i] as i32).pow(2)).sum()
}

pub fn nearest_color(c: Rgb) -> Color {
    *Color::ALL
        .iter()
        .min_by_key(|p| dist2(c, p.rgb()))
        .expect("non-empty palette")
}

pub fn nearest_background(c: Rgb) -> Background {
    *Background::ALL
        .iter()
        .min_by_key(|p| dist2(c, p.rgb()))
        .expect("non-empty backgrounds")
}

/// Most frequent palette color; ties go to the earlier palette entry.
fn mode(colors: impl Iterator<Item = Color>) -> Option<Color> {
    let mut counts = [0usize; 8];
    let mut any = false;
    for c in colors {
        counts[Color::ALL.iter().position(|p| *p == c).unwrap()] += 1;
        any = true;
    }
    if !any {
        return None;
    }
    let best = (0..8).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
    Some(Color::ALL[best])
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

/// Classifies the garment inside `rect` of `img`.
///
/// The accent color is the most common palette color on the rectangle's
/// border ring; the foreground is the most common interior color other than
/// the accent. The interior foreground map is correlated against every
/// pattern generator at every scale; a solid garment scores its foreground
/// fraction.
pub fn analyze_region(img: &RgbImage, rect: Rect) -> GarmentAnalysis {
    let mut border = Vec::new();
    let mut interior = Vec::new();
    for v in 0..rect.h {
        for u in 0..rect.w {
            let c = nearest_color(img.get(rect.x + u, rect.y + v));
            if u == 0 || v == 0 || u + 1 == rect.w || v + 1 == rect.h {
                border.push(c);
            } else {
                interior.push((u, v, c));
            }
        }
    }
    let color_bg = mode(border.into_iter());
    let color_fg = mode(interior.iter().map(|t| t.2).filter(|c| Some(*c) != color_bg));
    let observed: Vec<f64> = interior
        .iter()
        .map(|&(_, _, c)| if Some(c) == color_fg { 1.0 } else { 0.0 })
        .collect();
    let mut best: Option<(Pattern, usize)> = None;
    let mut best_score = f64::NEG_INFINITY;
    for &p in Pattern::ALL {
        for &s in &SCALES {
            let score = if p == Pattern::Solid {
                observed.iter().sum::<f64>() / observed.len() as f64
            } else {
                let tmpl: Vec<f64> = interior
                    .iter()
                    .map(|&(u, v, _)| if p.is_fg(u, v, s) { 1.0 } else { 0.0 })
                    .collect();
                ncc(&observed, &tmpl)
            };
            if score > best_score {
                best_score = score;
                best = Some((p, s));
            }
        }
    }
    GarmentAnalysis {
        color_fg,
        color_bg,
        pattern: best.filter(|_| best_score >= PATTERN_THRESHOLD),
        correlation: best_score,
    }
}

pub fn analyze_garment(img: &RgbImage) -> GarmentAnalysis {
    analyze_region(img, GARMENT_RECT)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::{render_reference, Garment, GarmentSpec};

    #[test]
    fn recovers_every_generated_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let g = GarmentSpec::random(&mut rng);
            let a = analyze_garment(&render_reference(&Garment::Pattern(g)));
            assert_eq!(a.color_bg, Some(g.color_bg));
            assert_eq!(a.color_fg, Some(g.color_fg), "{g:?}");
            let (p, s) = a.pattern.unwrap();
            assert_eq!(p, g.pattern, "{g:?} scored {}", a.correlation);
            if p != Pattern::Solid {
                assert_eq!(s, g.scale);
            }
        }
    }

    #[test]
    fn free_patches_are_mostly_unrecognised() {
        let unrecognised = (0..40)
            .filter(|&seed| {
                let a = analyze_garment(&render_reference(&Garment::FreePatch { seed, block: 2 }));
                a.pattern.is_none()
            })
            .count();
        assert!(unrecognised >= 30, "{unrecognised}");
    }

    #[test]
    fn nearest_colors() {
        assert_eq!(nearest_color([250, 10, 10]), Color::Red);
        assert_eq!(nearest_color([100, 100, 100]), Color::Black);
        assert_eq!(nearest_background([10, 120, 130]), Background::Teal);
    }
}
