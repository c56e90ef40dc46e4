//! Text and image encoders behind a backend-agnostic interface.
//!
//! A backend turns raw input into fixed *base features* (per token / per
//! patch, plus a CLS vector); a trainable linear layer maps them to the
//! shared model width `d`. The toy backends hash content into Gaussian
//! vectors, so they need no pretrained weights and are bitwise
//! deterministic.

mod archive;
mod toy;

use serde::{Deserialize, Serialize};

pub use archive::{FeatureArchive, FeatureEntry, PrecomputedImageBackend, PrecomputedTextBackend};
pub use toy::{
    color_bin, ChunkTokenizer, SubwordTokenizer, ToyImageBackend, ToyTextBackend, WhitespaceTokenizer, COLOR_BINS,
    COLOR_LEVELS,
};

use crate::data_model::{ImageDoc, ObjectBox, Sentence};
use crate::error::{Error, Result};
use crate::tensor::{Linear, Matrix, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub patch_size: u32,
    pub max_text_length: usize,
    /// Side of the square image every input is resized to before patching.
    pub canonical_size: u32,
    pub backend: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            patch_size: 16,
            max_text_length: 200,
            canonical_size: 224,
            backend: "toy".into(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.patch_size == 0 || self.canonical_size == 0 || self.max_text_length == 0 {
            return Err(Error::Config(
                "encoder d, patch_size, canonical_size and max_text_length must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        let n = self.canonical_size.div_ceil(self.patch_size);
        Grid { rows: n, cols: n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: u32,
    pub cols: u32,
}

impl Grid {
    pub fn len(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backend output for a sentence, before the trainable projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub cls: Vec<f64>,
    pub tokens: Matrix,
    /// word index -> row of its first sub-token
    pub word_map: Vec<usize>,
}

/// Backend output for an image, before the trainable projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub cls: Vec<f64>,
    pub patches: Matrix,
    pub grid: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub cls: Vec<f64>,
    pub tokens: Matrix,
    pub word_map: Vec<usize>,
}

impl TextEncoding {
    /// Encoding of word `i` (its first sub-token); `None` if truncated away.
    pub fn word(&self, i: usize) -> Option<&[f64]> {
        self.word_map.get(i).map(|&r| self.tokens.row(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoding {
    pub cls: Vec<f64>,
    pub patches: Matrix,
    pub grid: Grid,
}

pub trait TextBackend: Send + Sync {
    fn tag(&self) -> String;
    fn base_dim(&self) -> usize;
    fn features(&self, sentence: &Sentence, cfg: &EncoderConfig) -> Result<TextFeatures>;
}

pub trait ImageBackend: Send + Sync {
    fn tag(&self) -> String;
    fn base_dim(&self) -> usize;
    fn features(&self, image: &ImageDoc, cfg: &EncoderConfig) -> Result<ImageFeatures>;
}

/// The trainable part of an encoder: a linear map from base features to `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub proj: Linear,
}

impl EncoderParams {
    pub fn new<R: rand::Rng>(base_dim: usize, d: usize, rng: &mut R) -> Self {
        let proj = if base_dim == d {
            Linear::near_identity(d, 0.02, rng)
        } else {
            Linear::scaled(base_dim, d, rng)
        };
        Self { proj }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj: Linear::zeros(self.proj.input_dim(), self.proj.output_dim()),
        }
    }

    pub fn project(&self, base: &[f64]) -> Vec<f64> {
        self.proj.forward(base)
    }

    pub fn project_rows(&self, base: &Matrix) -> Matrix {
        let rows: Vec<Vec<f64>> = base.iter_rows().map(|r| self.proj.forward(r)).collect();
        if rows.is_empty() {
            Matrix::zeros(0, self.proj.output_dim())
        } else {
            Matrix::from_rows(&rows)
        }
    }

    /// Accumulates the gradient of one projected row.
    pub fn backward(base: &[f64], d_out: &[f64], grad: &mut EncoderParams) {
        Linear::accumulate(base, d_out, &mut grad.proj);
    }

    pub fn encode_text(&self, f: &TextFeatures) -> TextEncoding {
        TextEncoding {
            cls: self.project(&f.cls),
            tokens: self.project_rows(&f.tokens),
            word_map: f.word_map.clone(),
        }
    }

    pub fn encode_image(&self, f: &ImageFeatures) -> ImageEncoding {
        ImageEncoding {
            cls: self.project(&f.cls),
            patches: self.project_rows(&f.patches),
            grid: f.grid,
        }
    }
}

impl Params for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.proj.visit(&crate::tensor::join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj.visit_mut(&crate::tensor::join(prefix, "proj"), f);
    }
}

/// Encodes a sentence: backend features, then the trainable projection.
pub fn encode_text(
    sentence: &Sentence,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    backend: &dyn TextBackend,
) -> Result<TextEncoding> {
    if sentence.is_empty() {
        return Err(Error::Contract(format!("sentence `{}` is empty", sentence.id)));
    }
    Ok(params.encode_text(&backend.features(sentence, cfg)?))
}

pub fn encode_image(
    image: &ImageDoc,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    backend: &dyn ImageBackend,
) -> Result<ImageEncoding> {
    Ok(params.encode_image(&backend.features(image, cfg)?))
}

/// Patch containing pixel `(x, y)` of the canonical image; coordinates are
/// clamped into the image first.
pub fn patch_index(x: u32, y: u32, grid: Grid, canonical_size: u32, patch_size: u32) -> usize {
    let x = x.min(canonical_size - 1);
    let y = y.min(canonical_size - 1);
    let r = (y / patch_size).min(grid.rows - 1);
    let c = (x / patch_size).min(grid.cols - 1);
    (r * grid.cols + c) as usize
}

/// Maps a box from original `width × height` pixels into canonical space.
pub fn to_canonical_box(b: &ObjectBox, width: u32, height: u32, canonical_size: u32) -> ObjectBox {
    let sx = |x: u32| ((x as u64 * canonical_size as u64) / width as u64).min(canonical_size as u64 - 1) as u32;
    let sy = |y: u32| ((y as u64 * canonical_size as u64) / height as u64).min(canonical_size as u64 - 1) as u32;
    ObjectBox {
        x1: sx(b.x1),
        y1: sy(b.y1),
        x2: sx(b.x2),
        y2: sy(b.y2),
        label: b.label.clone(),
        score: b.score,
    }
}
