//! Procedural garment/person pairs with exactly known texture and mask.
//!
//! Every target is a fixed silhouette whose torso rectangle is filled by the
//! same generator that draws the reference patch, so texture consistency
//! can be checked pixel by pixel.

pub mod caption;
mod corpus;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{GrayImage, Rgb, RgbImage};

pub use caption::{caption, parse_caption, CaptionTier, Captions, ParsedCaption};
pub use corpus::{gen_dataset, load_dataset, write_dataset, Dataset, GarmentSample, GenOptions, IndexEntry};

pub const IMAGE_SIZE: usize = 32;
/// Neutral ground of reference images.
pub const REFERENCE_GROUND: Rgb = [128, 128, 128];
const SKIN: Rgb = [224, 172, 105];
const PANTS: Rgb = [70, 70, 90];

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// The torso region every garment occupies, in both reference and target.
pub const GARMENT_RECT: Rect = Rect { x: 10, y: 10, w: 12, h: 16 };

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident = $s:literal => $rgb:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($var),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),*];

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),* }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$var),)* _ => None }
            }

            pub fn rgb(self) -> Rgb {
                match self { $($name::$var => $rgb),* }
            }
        }
    };
}

named_enum!(
    /// The eight corners of the RGB cube.
    Color {
        Black = "black" => [0, 0, 0],
        White = "white" => [255, 255, 255],
        Red = "red" => [255, 0, 0],
        Green = "green" => [0, 255, 0],
        Blue = "blue" => [0, 0, 255],
        Yellow = "yellow" => [255, 255, 0],
        Cyan = "cyan" => [0, 255, 255],
        Magenta = "magenta" => [255, 0, 255],
    }
);

named_enum!(
    /// Scene backgrounds; none is a palette color.
    Background {
        Beige = "beige" => [230, 200, 140],
        Navy = "navy" => [0, 0, 128],
        Olive = "olive" => [128, 128, 0],
        Teal = "teal" => [0, 128, 128],
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl Pattern {
    pub const ALL: &'static [Pattern] = &[Pattern::Solid, Pattern::Stripes, Pattern::Checker, Pattern::Dots];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "stripes",
            Pattern::Checker => "checker",
            Pattern::Dots => "dots",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == s)
    }

    /// Whether local pixel `(u, v)` takes the foreground color.
    pub fn is_fg(self, u: usize, v: usize, scale: usize) -> bool {
        match self {
            Pattern::Solid => true,
            Pattern::Stripes => (v / scale) % 2 == 0,
            Pattern::Checker => (u / scale + v / scale) % 2 == 0,
            Pattern::Dots => u % (2 * scale) < scale && v % (2 * scale) < scale,
        }
    }
}

pub const SCALES: [usize; 2] = [2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarmentSpec {
    pub pattern: Pattern,
    pub color_fg: Color,
    pub color_bg: Color,
    pub scale: usize,
}

impl GarmentSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if self.color_fg == self.color_bg {
            return Err(crate::Error::Config("garment fg and bg colors must differ".into()));
        }
        if !SCALES.contains(&self.scale) {
            return Err(crate::Error::Config(format!("garment scale {} not in {{2, 4}}", self.scale)));
        }
        Ok(())
    }

    /// Color at local rectangle coordinates; the 1-px border is the bg
    /// ("accent") color.
    pub fn pixel(&self, u: usize, v: usize) -> Rgb {
        let r = GARMENT_RECT;
        let border = u == 0 || v == 0 || u + 1 == r.w || v + 1 == r.h;
        if !border && self.pattern.is_fg(u, v, self.scale) {
            self.color_fg.rgb()
        } else {
            self.color_bg.rgb()
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let fg = Color::ALL[rng.gen_range(0..8)];
        let bg = loop {
            let c = Color::ALL[rng.gen_range(0..8)];
            if c != fg {
                break c;
            }
        };
        Self {
            pattern: Pattern::ALL[rng.gen_range(0..4)],
            color_fg: fg,
            color_bg: bg,
            scale: SCALES[rng.gen_range(0..2)],
        }
    }
}

/// What fills the garment rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Garment {
    Pattern(GarmentSpec),
    /// A random palette mosaic standing in for arbitrary (non-garment)
    /// reference objects.
    FreePatch { seed: u64, block: usize },
}

impl Garment {
    pub fn pixel(&self, u: usize, v: usize) -> Rgb {
        match self {
            Garment::Pattern(s) => s.pixel(u, v),
            Garment::FreePatch { seed, block } => {
                let cols = GARMENT_RECT.w.div_ceil(*block);
                let cell = (v / block) * cols + u / block;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_word_pos(cell as u128 * 16);
                Color::ALL[rng.gen_range(0..8)].rgb()
            }
        }
    }

    pub fn spec(&self) -> Option<&GarmentSpec> {
        match self {
            Garment::Pattern(s) => Some(s),
            Garment::FreePatch { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub garment: Garment,
    pub background: Background,
}

/// Head, arms and legs of the person silhouette.
const BODY: [(Rect, Rgb); 5] = [
    (Rect { x: 12, y: 2, w: 8, h: 8 }, SKIN),
    (Rect { x: 6, y: 10, w: 4, h: 12 }, SKIN),
    (Rect { x: 22, y: 10, w: 4, h: 12 }, SKIN),
    (Rect { x: 11, y: 26, w: 4, h: 6 }, PANTS),
    (Rect { x: 17, y: 26, w: 4, h: 6 }, PANTS),
];

fn fill_rect(img: &mut RgbImage, r: Rect, c: Rgb) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            img.set(x, y, c);
        }
    }
}

fn paint_garment(img: &mut RgbImage, g: &Garment) {
    let r = GARMENT_RECT;
    for v in 0..r.h {
        for u in 0..r.w {
            img.set(r.x + u, r.y + v, g.pixel(u, v));
        }
    }
}

/// The garment patch on the neutral reference ground.
pub fn render_reference(g: &Garment) -> RgbImage {
    let mut img = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, REFERENCE_GROUND);
    paint_garment(&mut img, g);
    img
}

/// A person silhouette wearing the garment on the given background.
pub fn render_target(spec: &SampleSpec) -> RgbImage {
    let mut img = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, spec.background.rgb());
    for (r, c) in BODY {
        fill_rect(&mut img, r, c);
    }
    paint_garment(&mut img, &spec.garment);
    img
}

/// 255 on the person (body parts and garment), 0 on the background.
pub fn silhouette_mask() -> GrayImage {
    let mut m = garment_mask();
    for (r, _) in BODY {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                m.set(x, y, 255);
            }
        }
    }
    m
}

/// 255 inside the garment rectangle, 0 elsewhere.
pub fn garment_mask() -> GrayImage {
    let mut m = GrayImage::filled(IMAGE_SIZE, IMAGE_SIZE, 0);
    let r = GARMENT_RECT;
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            m.set(x, y, 255);
        }
    }
    m
}

/// Pixels of `img` inside the garment rectangle, row-major.
pub fn garment_region(img: &RgbImage) -> Vec<Rgb> {
    let r = GARMENT_RECT;
    let mut out = Vec::with_capacity(r.w * r.h);
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            out.push(img.get(x, y));
        }
    }
    out
}
