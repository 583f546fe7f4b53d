//! Frozen toy text encoder: a closed vocabulary, a hash-seeded embedding
//! table and fixed sinusoidal positions. Nothing here is ever trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const UNK: &str = "<unk>";

/// Every word any caption template can produce, plus `<unk>` at index 0.
pub const VOCAB: &[&str] = &[
    UNK, "a", "person", "wearing", "clothes", "shirt", "with", "accents", "background", "black",
    "white", "red", "green", "blue", "yellow", "cyan", "magenta", "solid", "stripes", "checker",
    "dots", "textured", "beige", "navy", "olive", "teal",
];

pub const MAX_TOKENS: usize = 16;
const TABLE_SEED: u64 = 0x7e47_0e4c;

pub fn token_id(word: &str) -> usize {
    VOCAB.iter().position(|w| *w == word).unwrap_or(0)
}

/// Lower-cases, treats commas as spaces and maps words to ids
/// (`<unk>` = 0). At most [`MAX_TOKENS`] ids are returned.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.to_lowercase()
        .replace(',', " ")
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(token_id)
        .collect()
}

/// Token ids and their `[n × d_text]` embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: Vec<usize>,
    pub values: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    d_text: usize,
    table: Vec<f64>,
}

impl TextEncoder {
    pub fn new(d_text: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
        let table = (0..VOCAB.len() * d_text)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { d_text, table }
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn encode<T: Real>(&self, text: &str) -> Result<TextEmbedding<T>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Usage("caption has no tokens".into()));
        }
        let d = self.d_text;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &id) in tokens.iter().enumerate() {
            for j in 0..d {
                let freq = 1.0 / 100f64.powf((j / 2 * 2) as f64 / d as f64);
                let pe = if j % 2 == 0 {
                    (pos as f64 * freq).sin()
                } else {
                    (pos as f64 * freq).cos()
                };
                data.push(T::of(self.table[id * d + j] + 0.5 * pe));
            }
        }
        Ok(TextEmbedding {
            values: Tensor::new(vec![tokens.len(), d], data)?,
            tokens,
        })
    }
}
