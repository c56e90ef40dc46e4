use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EncoderConfig, ImageBackend, ImageFeatures, TextBackend, TextFeatures};
use crate::data_model::{ImageDoc, ImageSource, Sentence};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Matrix;

/// Splits a word into sub-tokens. The first sub-token represents the word.
pub trait SubwordTokenizer: Send + Sync {
    fn split(&self, word: &str) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl SubwordTokenizer for WhitespaceTokenizer {
    fn split(&self, word: &str) -> Vec<String> {
        vec![word.to_string()]
    }
}

/// Cuts words into fixed-size character chunks, `##`-prefixing continuations.
#[derive(Debug, Clone, Copy)]
pub struct ChunkTokenizer(pub usize);

impl SubwordTokenizer for ChunkTokenizer {
    fn split(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return vec![String::new()];
        }
        chars
            .chunks(self.0.max(1))
            .enumerate()
            .map(|(i, c)| {
                let s: String = c.iter().collect();
                if i == 0 {
                    s
                } else {
                    format!("##{s}")
                }
            })
            .collect()
    }
}

/// Text backend whose token features are seeded Gaussian vectors keyed by the
/// token string. The CLS feature is the mean of the token features.
pub struct ToyTextBackend {
    seed: u64,
    dim: usize,
    tokenizer: Box<dyn SubwordTokenizer>,
}

impl ToyTextBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self::with_tokenizer(seed, dim, Box::new(WhitespaceTokenizer))
    }

    pub fn with_tokenizer(seed: u64, dim: usize, tokenizer: Box<dyn SubwordTokenizer>) -> Self {
        Self { seed, dim, tokenizer }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["token", token]));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextBackend for ToyTextBackend {
    fn tag(&self) -> String {
        format!("toy-text-d{}-s{}", self.dim, self.seed)
    }

    fn base_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, sentence: &Sentence, cfg: &EncoderConfig) -> Result<TextFeatures> {
        if sentence.is_empty() {
            return Err(Error::Contract(format!("sentence `{}` is empty", sentence.id)));
        }
        let max = cfg.max_text_length;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut word_map = Vec::with_capacity(sentence.len());
        for word in &sentence.words {
            if rows.len() >= max {
                break;
            }
            word_map.push(rows.len());
            for tok in self.tokenizer.split(word).iter().take(max - rows.len()) {
                rows.push(self.token_vector(tok));
            }
        }
        let dropped = sentence.len() - word_map.len();
        if dropped > 0 {
            log::warn!(
                "sentence `{}` exceeds {max} tokens; {dropped} trailing words truncated",
                sentence.id
            );
        }
        let mut cls = vec![0.0; self.dim];
        for r in &rows {
            crate::tensor::add_into(&mut cls, r);
        }
        cls.iter_mut().for_each(|v| *v /= rows.len() as f64);
        Ok(TextFeatures {
            cls,
            tokens: Matrix::from_rows(&rows),
            word_map,
        })
    }
}

/// Levels per color channel in the toy image histogram.
pub const COLOR_LEVELS: u32 = 4;
pub const COLOR_BINS: usize = (COLOR_LEVELS * COLOR_LEVELS * COLOR_LEVELS) as usize;

/// Color bin of an RGB pixel.
pub fn color_bin(rgb: [u8; 3]) -> usize {
    let q = |c: u8| c as usize * COLOR_LEVELS as usize / 256;
    let l = COLOR_LEVELS as usize;
    q(rgb[0]) * l * l + q(rgb[1]) * l + q(rgb[2])
}

/// Image backend: resize to the canonical square, then describe every patch by
/// the square root of its normalized color histogram, projected to `dim` with a
/// seeded Gaussian matrix. Features are memoized per file path.
pub struct ToyImageBackend {
    seed: u64,
    dim: usize,
    projection: Matrix,
    memo: Mutex<HashMap<(std::path::PathBuf, u32, u32), Arc<ImageFeatures>>>,
}

impl ToyImageBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["image-projection"]));
        Self {
            seed,
            dim,
            projection: Matrix::random_normal(dim, COLOR_BINS, 1.0, &mut rng),
            memo: Mutex::new(HashMap::new()),
        }
    }

    /// Loads and resizes an image to `size × size` RGB with bilinear filtering.
    pub fn load_canonical(path: &Path, size: u32) -> Result<image::RgbImage> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(image::imageops::resize(
            &img.to_rgb8(),
            size,
            size,
            FilterType::Triangle,
        ))
    }

    pub fn features_of(&self, img: &image::RgbImage, cfg: &EncoderConfig) -> ImageFeatures {
        let grid = cfg.grid();
        let ps = cfg.patch_size;
        let mut hists = vec![[0.0f64; COLOR_BINS]; grid.len()];
        let mut whole = [0.0f64; COLOR_BINS];
        for (x, y, px) in img.enumerate_pixels() {
            let b = color_bin(px.0);
            let p = super::patch_index(x, y, grid, cfg.canonical_size, ps);
            hists[p][b] += 1.0;
            whole[b] += 1.0;
        }
        let rows: Vec<Vec<f64>> = hists.iter().map(|hist| self.describe(hist)).collect();
        ImageFeatures {
            cls: self.describe(&whole),
            patches: Matrix::from_rows(&rows),
            grid,
        }
    }

    fn describe(&self, hist: &[f64; COLOR_BINS]) -> Vec<f64> {
        let total: f64 = hist.iter().sum();
        let s: Vec<f64> = hist
            .iter()
            .map(|c| if total > 0.0 { (c / total).sqrt() } else { 0.0 })
            .collect();
        self.projection.matvec(&s)
    }
}

impl ImageBackend for ToyImageBackend {
    fn tag(&self) -> String {
        format!("toy-image-d{}-s{}", self.dim, self.seed)
    }

    fn base_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &ImageDoc, cfg: &EncoderConfig) -> Result<ImageFeatures> {
        let path = match &image.source {
            ImageSource::File(p) => p,
            ImageSource::Precomputed(key) => {
                return Err(Error::Contract(format!(
                    "image `{}` refers to precomputed features `{key}` but no archive is loaded",
                    image.id
                )))
            }
        };
        let key = (path.clone(), cfg.canonical_size, cfg.patch_size);
        if let Some(f) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok((**f).clone());
        }
        let img = Self::load_canonical(path, cfg.canonical_size)?;
        let f = Arc::new(self.features_of(&img, cfg));
        self.memo.lock().expect("memo lock").insert(key, f.clone());
        Ok((*f).clone())
    }
}
