//! Cross-modality augmentation: prompts from annotated text go to an image
//! generator, annotated images go to a captioner, and every result lands in a
//! content-addressed cache that training reads from.

mod batch;
pub(crate) mod cache;
mod nucleus;
mod prompt;

use std::path::PathBuf;

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{assemble_text_batch, GeneratedImagePool, PoolEntry, TextContext};
pub use cache::{AugmentationCache, Sidecar, CAPTION_MODALITY, IMAGE_MODALITY};
pub use nucleus::{nucleus_filter, Nucleus};
pub use prompt::{extract_event_prompt, CrossSentencePolicy, PromptSpan};

use crate::clients::{CommandClient, RetryPolicy};
use crate::data_model::{ImageDoc, ImageSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub images_per_event: usize,
    pub image_size: u32,
    pub denoise_steps: u32,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            images_per_event: 4,
            image_size: 512,
            denoise_steps: 100,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_event == 0 || self.image_size == 0 {
            return Err(Error::Config("images_per_event and image_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NucleusConfig {
    pub p: f64,
    pub captions_per_image: usize,
    pub seed: u64,
}

impl Default for NucleusConfig {
    fn default() -> Self {
        Self {
            p: 0.9,
            captions_per_image: 1,
            seed: 0,
        }
    }
}

impl NucleusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("nucleus p must be in (0, 1], got {}", self.p)));
        }
        if self.captions_per_image == 0 {
            return Err(Error::Config("captions_per_image must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub dataset: String,
    pub record_id: String,
    pub event_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    GeneratedImage,
    GeneratedCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub origin: Origin,
    pub modality: Modality,
    /// Image file path or caption text.
    pub payload: String,
    /// Prompt text or source image id.
    pub prompt: String,
    pub generator_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGenRequest {
    pub prompt: String,
    pub n: usize,
    pub size: u32,
    pub steps: u32,
    pub seed: u64,
}

/// Text-to-image backend. Image `i` of a request must depend only on
/// `(prompt, size, steps, seed + i)` so that a single-image request with
/// `seed + i` reproduces it.
pub trait ImageGeneratorClient: Send + Sync {
    fn tag(&self) -> String;
    /// Returns up to `req.n` encoded images; fewer signals a partial batch.
    fn generate(&self, req: &ImageGenRequest) -> Result<Vec<Vec<u8>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_ref: String,
    pub p: f64,
    pub seed: u64,
}

/// Image-to-text backend.
pub trait CaptionerClient: Send + Sync {
    fn tag(&self) -> String;
    fn caption(&self, image: &ImageDoc, req: &CaptionRequest) -> Result<String>;
}

/// A captioning model that exposes its per-step next-token distribution, so
/// decoding (nucleus sampling) happens on our side.
pub trait StepwiseCaptionModel: Send + Sync {
    fn tag(&self) -> String;
    fn vocabulary(&self) -> &[String];
    fn end_token(&self) -> usize;
    fn max_len(&self) -> usize;
    fn step_probs(&self, image: &ImageDoc, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Decodes a [`StepwiseCaptionModel`] with nucleus sampling.
pub struct NucleusCaptioner<M> {
    pub model: M,
}

impl<M: StepwiseCaptionModel> CaptionerClient for NucleusCaptioner<M> {
    fn tag(&self) -> String {
        format!("{}+nucleus", self.model.tag())
    }

    fn caption(&self, image: &ImageDoc, req: &CaptionRequest) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut tokens = Vec::new();
        while tokens.len() < self.model.max_len() {
            let probs = self.model.step_probs(image, &tokens)?;
            let tok = nucleus_filter(&probs, req.p)?.sample(&mut rng);
            if tok == self.model.end_token() {
                break;
            }
            tokens.push(tok);
        }
        let vocab = self.model.vocabulary();
        Ok(tokens.iter().map(|&t| vocab[t].as_str()).collect::<Vec<_>>().join(" "))
    }
}

#[derive(Deserialize)]
struct GenResponse {
    payloads: Vec<String>,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

impl ImageGeneratorClient for CommandClient {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    /// Response: `{"payloads": ["<base64 image>", ...]}`.
    fn generate(&self, req: &ImageGenRequest) -> Result<Vec<Vec<u8>>> {
        let resp: GenResponse = self.call(req)?;
        resp.payloads
            .iter()
            .map(|p| {
                base64::engine::general_purpose::STANDARD
                    .decode(p)
                    .map_err(|e| Error::Client(format!("bad base64 payload: {e}")))
            })
            .collect()
    }
}

impl CaptionerClient for CommandClient {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    /// Response: `{"caption": "..."}`.
    fn caption(&self, _image: &ImageDoc, req: &CaptionRequest) -> Result<String> {
        let resp: CaptionResponse = self.call(req)?;
        Ok(resp.caption)
    }
}

fn image_ref(image: &ImageDoc) -> String {
    match &image.source {
        ImageSource::File(p) => p.display().to_string(),
        ImageSource::Precomputed(k) => k.clone(),
    }
}

/// Generates (or fetches from cache) `cfg.images_per_event` images for a prompt.
pub fn generate_images(
    prompt: &PromptSpan,
    origin: &Origin,
    cfg: &GenerationConfig,
    client: &dyn ImageGeneratorClient,
    cache: &AugmentationCache,
    retry: RetryPolicy,
) -> Result<Vec<GeneratedPair>> {
    cfg.validate()?;
    let tag = client.tag();
    let key = AugmentationCache::key(IMAGE_MODALITY, &prompt.text, cfg, &tag);
    let to_pairs = |paths: Vec<PathBuf>| -> Vec<GeneratedPair> {
        paths
            .into_iter()
            .map(|p| GeneratedPair {
                origin: origin.clone(),
                modality: Modality::GeneratedImage,
                payload: p.display().to_string(),
                prompt: prompt.text.clone(),
                generator_tag: tag.clone(),
            })
            .collect()
    };
    if let Some(sc) = cache.lookup(IMAGE_MODALITY, &key)? {
        return Ok(to_pairs(cache.image_paths(&sc)));
    }

    let gen_err = |e: Error| Error::Generation {
        prompt: prompt.text.clone(),
        message: e.to_string(),
    };
    let n = cfg.images_per_event;
    let request = ImageGenRequest {
        prompt: prompt.text.clone(),
        n,
        size: cfg.image_size,
        steps: cfg.denoise_steps,
        seed: cfg.seed,
    };
    let mut images = retry.run(|_| client.generate(&request)).map_err(gen_err)?;
    images.truncate(n);
    // partial batch: fill the remaining slots one image at a time
    for i in images.len()..n {
        let single = ImageGenRequest {
            n: 1,
            seed: cfg.seed.wrapping_add(i as u64),
            ..request.clone()
        };
        let img = retry
            .run(|_| {
                client
                    .generate(&single)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Client(format!("generator returned no image for slot {i}")))
            })
            .map_err(gen_err)?;
        images.push(img);
    }
    let sc = cache.store_images(&key, &prompt.text, &tag, &images)?;
    let pairs = to_pairs(cache.image_paths(&sc));
    cache.append_manifest(&key, &pairs)?;
    Ok(pairs)
}

/// Captions one image (`cfg.captions_per_image` captions), through the cache.
pub fn generate_caption(
    image: &ImageDoc,
    origin: &Origin,
    cfg: &NucleusConfig,
    client: &dyn CaptionerClient,
    cache: &AugmentationCache,
    retry: RetryPolicy,
) -> Result<Vec<GeneratedPair>> {
    cfg.validate()?;
    let tag = client.tag();
    let key = AugmentationCache::key(CAPTION_MODALITY, &image.id, cfg, &tag);
    let to_pairs = |caps: &[String]| -> Vec<GeneratedPair> {
        caps.iter()
            .map(|c| GeneratedPair {
                origin: origin.clone(),
                modality: Modality::GeneratedCaption,
                payload: c.clone(),
                prompt: image.id.clone(),
                generator_tag: tag.clone(),
            })
            .collect()
    };
    if let Some(sc) = cache.lookup(CAPTION_MODALITY, &key)? {
        return Ok(to_pairs(&sc.payloads));
    }
    let cap_err = |message: String| Error::Captioning {
        image: image.id.clone(),
        message,
    };
    let mut captions = Vec::with_capacity(cfg.captions_per_image);
    for j in 0..cfg.captions_per_image {
        let seed = cfg.seed.wrapping_add(j as u64);
        let mut req = CaptionRequest {
            image_ref: image_ref(image),
            p: cfg.p,
            seed,
        };
        let mut text = retry
            .run(|_| client.caption(image, &req))
            .map_err(|e| cap_err(e.to_string()))?;
        if text.trim().is_empty() {
            // one regeneration with a shifted seed, then give up
            req.seed = seed.wrapping_add(1 << 32);
            text = retry
                .run(|_| client.caption(image, &req))
                .map_err(|e| cap_err(e.to_string()))?;
            if text.trim().is_empty() {
                return Err(cap_err("captioner returned an empty caption twice".into()));
            }
        }
        captions.push(text);
    }
    cache.store_captions(&key, &image.id, &tag, &captions)?;
    let pairs = to_pairs(&captions);
    cache.append_manifest(&key, &pairs)?;
    Ok(pairs)
}
