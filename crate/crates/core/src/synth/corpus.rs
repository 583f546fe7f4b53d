//! Balanced, seed-deterministic corpora and their on-disk layout
//! (`index.json` plus PPM/PGM files).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    garment_mask, render_reference, render_target, Background, Captions, Color, Garment, GarmentSpec,
    Pattern, SampleSpec, SCALES,
};
use crate::error::{Error, Result};
use crate::model::{GrayImage, RgbImage};
use crate::rng::{substream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOptions {
    /// Share of samples whose garment is a free-form mosaic patch.
    pub free_patch_fraction: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { free_patch_fraction: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GarmentSample {
    pub id: String,
    pub spec: SampleSpec,
    pub reference: RgbImage,
    pub target: RgbImage,
    pub mask: GrayImage,
    pub captions: Captions,
}

impl GarmentSample {
    pub fn from_spec(id: String, spec: SampleSpec) -> Self {
        Self {
            reference: render_reference(&spec.garment),
            target: render_target(&spec),
            mask: garment_mask(),
            captions: Captions::of(&spec),
            spec,
            id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GarmentSample>,
}

/// One row of `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub ref_path: String,
    pub target_path: String,
    pub mask_path: String,
    pub spec: SampleSpec,
    pub captions: Captions,
}

fn balanced<T: Copy>(items: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    let mut v: Vec<T> = (0..n).map(|i| items[i % items.len()]).collect();
    v.shuffle(rng);
    v
}

/// Generates `n` samples. Patterns, foreground colors and backgrounds are
/// assigned round-robin and then shuffled, so each value appears
/// `⌊n/k⌋` or `⌈n/k⌉` times.
pub fn gen_dataset(n: usize, seed: u64, opts: &GenOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.free_patch_fraction) {
        return Err(Error::Config("free_patch_fraction must lie in [0, 1]".into()));
    }
    let mut rng = substream(seed, Stream::Data);
    let patterns = balanced(Pattern::ALL, n, &mut rng);
    let fgs = balanced(Color::ALL, n, &mut rng);
    let backgrounds = balanced(Background::ALL, n, &mut rng);
    let n_free = (opts.free_patch_fraction * n as f64).round() as usize;
    let mut free: Vec<bool> = (0..n).map(|i| i < n_free).collect();
    free.shuffle(&mut rng);
    let samples = (0..n)
        .map(|i| {
            let fg = fgs[i];
            let bg = loop {
                let c = Color::ALL[rng.gen_range(0..Color::ALL.len())];
                if c != fg {
                    break c;
                }
            };
            let scale = SCALES[rng.gen_range(0..SCALES.len())];
            let patch_seed: u64 = rng.gen();
            let garment = if free[i] {
                Garment::FreePatch { seed: patch_seed, block: scale }
            } else {
                Garment::Pattern(GarmentSpec { pattern: patterns[i], color_fg: fg, color_bg: bg, scale })
            };
            let spec = SampleSpec { garment, background: backgrounds[i] };
            GarmentSample::from_spec(format!("s{i:05}"), spec)
        })
        .collect();
    Ok(Dataset { samples })
}

/// Writes `index.json` and the images into an existing directory.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut index = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let e = IndexEntry {
            id: s.id.clone(),
            ref_path: format!("{}_ref.ppm", s.id),
            target_path: format!("{}_target.ppm", s.id),
            mask_path: format!("{}_mask.pgm", s.id),
            spec: s.spec,
            captions: s.captions.clone(),
        };
        s.reference.save(&dir.join(&e.ref_path))?;
        s.target.save(&dir.join(&e.target_path))?;
        s.mask.save(&dir.join(&e.mask_path))?;
        index.push(e);
    }
    let path = dir.join("index.json");
    let json = serde_json::to_vec_pretty(&index)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("index.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_slice(&bytes)?;
    let samples = index
        .into_iter()
        .map(|e| {
            Ok(GarmentSample {
                reference: RgbImage::load(&dir.join(&e.ref_path))?,
                target: RgbImage::load(&dir.join(&e.target_path))?,
                mask: GrayImage::load(&dir.join(&e.mask_path))?,
                id: e.id,
                spec: e.spec,
                captions: e.captions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_samples_cover_all_patterns() {
        let ds = gen_dataset(4, 7, &GenOptions::default()).unwrap();
        assert_eq!(ds.samples.len(), 4);
        let mut pats: Vec<_> = ds
            .samples
            .iter()
            .map(|s| s.spec.garment.spec().unwrap().pattern)
            .collect();
        pats.sort();
        assert_eq!(pats, Pattern::ALL.to_vec());
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(gen_dataset(0, 1, &GenOptions::default()).is_err());
    }

    #[test]
    fn free_patch_fraction_is_respected() {
        let ds = gen_dataset(20, 2, &GenOptions { free_patch_fraction: 0.25 }).unwrap();
        let free = ds
            .samples
            .iter()
            .filter(|s| matches!(s.spec.garment, Garment::FreePatch { .. }))
            .count();
        assert_eq!(free, 5);
        assert!(ds.samples.iter().any(|s| s.captions.rich.contains("textured")));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(6, 3, &GenOptions { free_patch_fraction: 0.5 }).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
