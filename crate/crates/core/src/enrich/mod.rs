//! Inference-time prompt rewriting.
//!
//! The template enricher reads garment attributes off the reference image
//! and fills the rich caption template; the external client asks an HTTP
//! rewrite service and falls back to the template path on any failure.

pub mod analysis;

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

pub use analysis::{analyze_garment, analyze_region, GarmentAnalysis, PATTERN_THRESHOLD};

use crate::model::RgbImage;
use crate::synth::caption::{rich_caption, TEXTURED};
use crate::synth::{parse_caption, Background};

/// Environment variable naming the rewrite service base URL.
pub const ENDPOINT_ENV: &str = "DRESSING_REWRITE_URL";
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Template,
    External,
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedPrompt {
    pub original: String,
    pub text: String,
    pub source: PromptSource,
    /// Set when the template could not recognise the pattern or when the
    /// external service failed.
    pub warning: Option<String>,
}

/// Which rewriting path to use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Enricher {
    Template,
    External { endpoint: String },
    Off,
}

impl Enricher {
    pub fn enrich(&self, user_text: &str, reference: &RgbImage) -> EnrichedPrompt {
        match self {
            Enricher::Template => enrich(user_text, reference),
            Enricher::External { endpoint } => enrich_external(user_text, reference, endpoint),
            Enricher::Off => EnrichedPrompt {
                original: user_text.to_string(),
                text: user_text.to_string(),
                source: PromptSource::Passthrough,
                warning: None,
            },
        }
    }
}

/// Whether `text` already names every garment attribute of the template.
fn is_rich(text: &str) -> bool {
    let p = parse_caption(text);
    p.color_fg.is_some() && p.pattern.is_some() && p.color_bg.is_some()
}

/// First background word anywhere in `text`.
fn background_word(text: &str) -> Option<Background> {
    text.to_lowercase()
        .replace(',', " ")
        .split_whitespace()
        .find_map(Background::from_name)
}

/// Template enrichment. A prompt that already names all garment attributes
/// passes through unchanged; otherwise the rich caption is rebuilt from the
/// reference, keeping the user's background word if there is one.
pub fn enrich(user_text: &str, reference: &RgbImage) -> EnrichedPrompt {
    if is_rich(user_text) {
        return EnrichedPrompt {
            original: user_text.to_string(),
            text: user_text.to_string(),
            source: PromptSource::Passthrough,
            warning: None,
        };
    }
    let a = analyze_garment(reference);
    let background = background_word(user_text);
    let (text, warning) = match a.pattern {
        Some((p, _)) => (rich_caption(a.color_fg, p.name(), a.color_bg, background), None),
        None => (
            rich_caption(None, TEXTURED, None, background),
            Some(format!(
                "pattern not recognised (best correlation {:.3} < {PATTERN_THRESHOLD})",
                a.correlation
            )),
        ),
    };
    EnrichedPrompt {
        original: user_text.to_string(),
        text,
        source: PromptSource::Template,
        warning,
    }
}

#[derive(Serialize)]
struct RewriteRequest<'a> {
    prompt: &'a str,
    image_base64: String,
}

#[derive(Deserialize)]
struct RewriteResponse {
    rewritten_prompt: String,
}

fn call_service(user_text: &str, reference: &RgbImage, endpoint: &str) -> Result<String, String> {
    let url = format!("{}/v1/rewrite", endpoint.trim_end_matches('/'));
    let body = RewriteRequest {
        prompt: user_text,
        image_base64: base64::engine::general_purpose::STANDARD.encode(reference.to_ppm()),
    };
    let resp = ureq::post(&url)
        .timeout(REQUEST_TIMEOUT)
        .send_json(&body)
        .map_err(|e| format!("request to {url} failed: {e}"))?;
    let parsed: RewriteResponse = resp
        .into_json()
        .map_err(|e| format!("malformed response from {url}: {e}"))?;
    if parsed.rewritten_prompt.trim().is_empty() {
        return Err(format!("empty rewritten_prompt from {url}"));
    }
    Ok(parsed.rewritten_prompt)
}

/// Asks the rewrite service at `endpoint`; never fails. On any error the
/// template result is returned with the failure recorded as a warning.
pub fn enrich_external(user_text: &str, reference: &RgbImage, endpoint: &str) -> EnrichedPrompt {
    match call_service(user_text, reference, endpoint) {
        Ok(text) => EnrichedPrompt {
            original: user_text.to_string(),
            text,
            source: PromptSource::External,
            warning: None,
        },
        Err(e) => {
            log::warn!("prompt rewrite service unavailable, using template: {e}");
            let mut p = enrich(user_text, reference);
            p.warning = Some(match p.warning {
                Some(w) => format!("{e}; {w}"),
                None => e,
            });
            p
        }
    }
}
