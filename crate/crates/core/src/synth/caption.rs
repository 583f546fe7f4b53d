//! Caption templates at three detail tiers, and their parser.

use serde::{Deserialize, Serialize};

use super::{Background, Color, Garment, Pattern, SampleSpec};

pub const FIXED_CAPTION: &str = "a person wearing clothes";
pub const SIMPLE_CAPTION: &str = "a person wearing a shirt";
/// Pattern word used when the texture is not one of the known generators.
pub const TEXTURED: &str = "textured";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionTier {
    Fixed,
    Simple,
    Rich,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Captions {
    pub fixed: String,
    pub simple: String,
    pub rich: String,
}

impl Captions {
    pub fn of(spec: &SampleSpec) -> Self {
        Self {
            fixed: caption(spec, CaptionTier::Fixed),
            simple: caption(spec, CaptionTier::Simple),
            rich: caption(spec, CaptionTier::Rich),
        }
    }

    pub fn get(&self, tier: CaptionTier) -> &str {
        match tier {
            CaptionTier::Fixed => &self.fixed,
            CaptionTier::Simple => &self.simple,
            CaptionTier::Rich => &self.rich,
        }
    }
}

/// Rich template: `a person wearing a {fg} {pattern} shirt with {bg}
/// accents, {background} background`. Free patches use
/// `a person wearing a textured shirt, {background} background`.
pub fn caption(spec: &SampleSpec, tier: CaptionTier) -> String {
    match tier {
        CaptionTier::Fixed => FIXED_CAPTION.to_string(),
        CaptionTier::Simple => SIMPLE_CAPTION.to_string(),
        CaptionTier::Rich => match &spec.garment {
            Garment::Pattern(g) => rich_caption(
                Some(g.color_fg),
                g.pattern.name(),
                Some(g.color_bg),
                Some(spec.background),
            ),
            Garment::FreePatch { .. } => rich_caption(None, TEXTURED, None, Some(spec.background)),
        },
    }
}

/// Instantiates the rich template from whatever attributes are known.
pub fn rich_caption(
    fg: Option<Color>,
    pattern: &str,
    bg: Option<Color>,
    background: Option<Background>,
) -> String {
    let mut s = String::from("a person wearing a ");
    if let Some(c) = fg {
        s.push_str(c.name());
        s.push(' ');
    }
    s.push_str(pattern);
    s.push_str(" shirt");
    if let Some(c) = bg {
        s.push_str(" with ");
        s.push_str(c.name());
        s.push_str(" accents");
    }
    if let Some(b) = background {
        s.push_str(", ");
        s.push_str(b.name());
        s.push_str(" background");
    }
    s
}

/// Attributes a caption names. Missing attributes are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParsedCaption {
    pub color_fg: Option<Color>,
    pub pattern: Option<Pattern>,
    pub color_bg: Option<Color>,
    pub background: Option<Background>,
}

impl ParsedCaption {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

/// Reads attributes positionally: a color directly before a pattern word
/// is the foreground, a color before `accents` is the accent color, and a
/// background word before `background` is the background.
pub fn parse_caption(text: &str) -> ParsedCaption {
    let lower = text.to_lowercase().replace(',', " ");
    let words: Vec<&str> = lower.split_whitespace().collect();
    let mut p = ParsedCaption::default();
    for (i, w) in words.iter().enumerate() {
        let next = words.get(i + 1).copied();
        if let Some(pat) = Pattern::from_name(w) {
            p.pattern = Some(pat);
        }
        if let Some(c) = Color::from_name(w) {
            match next {
                Some("accents") => p.color_bg = Some(c),
                Some(n) if Pattern::from_name(n).is_some() || n == TEXTURED => p.color_fg = Some(c),
                _ => {}
            }
        }
        if let (Some(b), Some("background")) = (Background::from_name(w), next) {
            p.background = Some(b);
        }
    }
    p
}
