//! Benchmark protocol: several seeded generations per held-out reference,
//! scored with and without the reference, aggregated into a report.

pub mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{text_score, texture_features, texture_sim};

use crate::diffusion::GuidanceConfig;
use crate::enrich::Enricher;
use crate::error::{Error, Result};
use crate::pipeline::{initial_noise, Generator};
use crate::synth::{Dataset, GarmentSample};
use crate::train::{AblationMode, LoadedModel, Stage};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const AESTHETIC_FOOTER: &str =
    "aesthetic score: out of scope (no defensible small-scale proxy)";

/// Which prompt accompanies each reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// `"a person wearing a shirt, {background} background"` rewritten by
    /// the template enricher from the reference.
    Enriched,
    Fixed,
    Simple,
    Rich,
}

impl PromptMode {
    pub fn prompt(self, sample: &GarmentSample) -> String {
        match self {
            PromptMode::Fixed => sample.captions.fixed.clone(),
            PromptMode::Simple => sample.captions.simple.clone(),
            PromptMode::Rich => sample.captions.rich.clone(),
            PromptMode::Enriched => {
                let user = format!(
                    "{}, {} background",
                    sample.captions.simple,
                    sample.spec.background.name()
                );
                Enricher::Template.enrich(&user, &sample.reference).text
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Conditioned,
    /// Same prompt and noise, no reference features.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Row {
    pub reference_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub prompt: String,
    pub texture_sim: f64,
    pub text_score: Option<f64>,
}

/// Mean and population standard deviation, summed in row order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { n: values.len(), mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantStats {
    pub texture_sim: Option<Stat>,
    /// Over rows whose prompt names at least one attribute.
    pub text_score: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub conditioned: VariantStats,
    pub baseline: VariantStats,
    /// Conditioned minus baseline mean texture similarity.
    pub texture_gap: Option<f64>,
}

impl Aggregates {
    pub fn from_rows(rows: &[Row]) -> Self {
        let stats = |variant| {
            let sel: Vec<&Row> = rows.iter().filter(|r| r.variant == variant).collect();
            let tex: Vec<f64> = sel.iter().map(|r| r.texture_sim).collect();
            let txt: Vec<f64> = sel.iter().filter_map(|r| r.text_score).collect();
            VariantStats { texture_sim: Stat::of(&tex), text_score: Stat::of(&txt) }
        };
        let conditioned = stats(Variant::Conditioned);
        let baseline = stats(Variant::Baseline);
        let texture_gap = match (conditioned.texture_sim, baseline.texture_sim) {
            (Some(c), Some(b)) => Some(c.mean - b.mean),
            _ => None,
        };
        Self { conditioned, baseline, texture_gap }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub checkpoint_hash: String,
    pub checkpoint_step: u64,
    pub stage: Stage,
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    pub prompt_mode: PromptMode,
    pub sampling_steps: usize,
    pub guidance: f64,
    pub references: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub meta: Meta,
    pub rows: Vec<Row>,
    pub aggregates: Aggregates,
}

fn fmt_stat(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4} (n={})", s.mean, s.std, s.n),
        None => "n/a".into(),
    }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint {} (step {}, {:?}, {})", &m.checkpoint_hash[..12.min(m.checkpoint_hash.len())], m.checkpoint_step, m.stage, m.mode.name());
        let _ = writeln!(
            s,
            "{} references x {} seeds {:?}, prompts: {:?}, {} steps, guidance {}",
            m.references,
            m.seeds.len(),
            m.seeds,
            m.prompt_mode,
            m.sampling_steps,
            m.guidance
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12} {:<30} {:<30}", "variant", "texture_sim", "text_score");
        for (name, v) in [("conditioned", &self.aggregates.conditioned), ("baseline", &self.aggregates.baseline)] {
            let _ = writeln!(s, "{:<12} {:<30} {:<30}", name, fmt_stat(&v.texture_sim), fmt_stat(&v.text_score));
        }
        if let Some(g) = self.aggregates.texture_gap {
            let _ = writeln!(s, "texture gap (conditioned - baseline): {g:+.4}");
        }
        let _ = writeln!(s, "{AESTHETIC_FOOTER}");
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOptions {
    pub seeds: Vec<u64>,
    pub prompt_mode: PromptMode,
    pub guidance: GuidanceConfig,
    /// Also score the reference-free variant on the same noise.
    pub baseline: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            prompt_mode: PromptMode::Rich,
            guidance: GuidanceConfig::default(),
            baseline: true,
        }
    }
}

/// Generates `seeds.len()` images per reference (plus the baseline) and
/// scores each. Generation `(reference i, seed s)` starts from the noise
/// of `seed s, index i` for both variants.
pub fn run_benchmark(model: &LoadedModel, data: &Dataset, opts: &BenchmarkOptions) -> Result<MetricReport> {
    if opts.seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let generator = Generator::new(model);
    let shape = generator.latent_shape();
    let mut rows = Vec::new();
    for (i, sample) in data.samples.iter().enumerate() {
        let prompt = opts.prompt_mode.prompt(sample);
        for &seed in &opts.seeds {
            let z = initial_noise(&shape, seed, i as u64);
            let mut variants = vec![(Variant::Conditioned, Some(&sample.reference))];
            if opts.baseline {
                variants.push((Variant::Baseline, None));
            }
            for (variant, reference) in variants {
                let img = generator.generate(reference, &prompt, &z, &opts.guidance)?;
                rows.push(Row {
                    reference_id: sample.id.clone(),
                    seed,
                    variant,
                    prompt: prompt.clone(),
                    texture_sim: texture_sim(&img, &sample.mask, &sample.reference)?,
                    text_score: text_score(&img, &sample.mask, &prompt)?,
                });
            }
        }
        log::debug!("benchmark: reference {} of {}", i + 1, data.samples.len());
    }
    let aggregates = Aggregates::from_rows(&rows);
    Ok(MetricReport {
        meta: Meta {
            checkpoint_hash: model.file_hash.clone(),
            checkpoint_step: model.step,
            stage: model.config.stage,
            mode: model.config.mode,
            seeds: opts.seeds.clone(),
            prompt_mode: opts.prompt_mode,
            sampling_steps: opts.guidance.num_steps,
            guidance: opts.guidance.w,
            references: data.samples.len(),
        },
        rows,
        aggregates,
    })
}
