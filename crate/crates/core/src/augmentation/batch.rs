use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::MultimediaDocument;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Generated images for one textual event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub doc_id: String,
    /// Index into the document's gold event list.
    pub event_index: usize,
    pub images: Vec<PathBuf>,
}

/// Snapshot of every generated image available to training, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImagePool {
    entries: Vec<PoolEntry>,
}

impl GeneratedImagePool {
    pub fn new(entries: Vec<PoolEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.images.is_empty())
    }

    pub fn images_for(&self, doc_id: &str, event_index: usize) -> Option<&[PathBuf]> {
        self.entries
            .iter()
            .find(|e| e.doc_id == doc_id && e.event_index == event_index)
            .map(|e| e.images.as_slice())
    }
}

/// The image context `H^all-img` attached to one training sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextContext {
    pub doc_id: String,
    pub sentence_id: String,
    pub positives: Vec<PathBuf>,
    pub negatives: Vec<PathBuf>,
}

impl TextContext {
    pub fn images(&self) -> impl Iterator<Item = &PathBuf> {
        self.positives.iter().chain(&self.negatives)
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the image context for one sentence: the generated images of its own
/// events plus `neg_k` images generated for other events. A sentence without
/// events gets `neg_k` images from other text and no positives.
pub fn assemble_text_batch(
    doc: &MultimediaDocument,
    sentence_id: &str,
    pool: &GeneratedImagePool,
    neg_k: usize,
    seed: u64,
) -> Result<TextContext> {
    if pool.is_empty() {
        return Err(Error::Assembly("generated image pool is empty".into()));
    }
    let own: Vec<usize> = doc
        .gold()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.text_trigger.as_ref().is_some_and(|t| t.sentence_id == sentence_id))
        .map(|(i, _)| i)
        .collect();

    let mut positives = Vec::new();
    for &ei in &own {
        let imgs = pool
            .images_for(&doc.id, ei)
            .ok_or_else(|| Error::Assembly(format!("no generated images for event {ei} of document `{}`", doc.id)))?;
        positives.extend(imgs.iter().cloned());
    }

    let candidates: Vec<&PathBuf> = pool
        .entries()
        .iter()
        .filter(|e| !(e.doc_id == doc.id && own.contains(&e.event_index)))
        .flat_map(|e| e.images.iter())
        .collect();
    if candidates.is_empty() && positives.is_empty() {
        return Err(Error::Assembly(format!(
            "no images from other events available for `{}`/`{sentence_id}`",
            doc.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["negatives", &doc.id, sentence_id]));
    let k = neg_k.min(candidates.len());
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();
    let negatives = picked.into_iter().map(|i| candidates[i].clone()).collect();

    Ok(TextContext {
        doc_id: doc.id.clone(),
        sentence_id: sentence_id.to_string(),
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{EventMention, Sentence};

    fn doc() -> MultimediaDocument {
        let s = |id: &str| Sentence {
            id: id.into(),
            words: vec!["a".into(), "b".into()],
            entities: vec![],
        };
        MultimediaDocument {
            id: "d0".into(),
            sentences: vec![s("s0"), s("s1")],
            images: vec![],
            gold_events: Some(vec![EventMention::textual("E", "s0", 1)]),
        }
    }

    fn pool() -> GeneratedImagePool {
        let entry = |doc: &str, ev: usize| PoolEntry {
            doc_id: doc.into(),
            event_index: ev,
            images: (0..4).map(|i| PathBuf::from(format!("{doc}-{ev}-{i}.png"))).collect(),
        };
        GeneratedImagePool::new(vec![entry("d0", 0), entry("d1", 0), entry("d1", 1), entry("d2", 0)])
    }

    #[test]
    fn event_sentence_gets_positives_and_negatives() {
        let ctx = assemble_text_batch(&doc(), "s0", &pool(), 4, 1).unwrap();
        assert_eq!(ctx.positives.len(), 4);
        assert_eq!(ctx.negatives.len(), 4);
        assert_eq!(ctx.len(), 8);
        assert!(ctx.negatives.iter().all(|p| !p.to_string_lossy().starts_with("d0-")));
    }

    #[test]
    fn eventless_sentence_gets_only_random_images() {
        let ctx = assemble_text_batch(&doc(), "s1", &pool(), 4, 1).unwrap();
        assert!(ctx.positives.is_empty());
        assert_eq!(ctx.negatives.len(), 4);
    }

    #[test]
    fn same_seed_same_negatives() {
        let a = assemble_text_batch(&doc(), "s0", &pool(), 4, 9).unwrap();
        let b = assemble_text_batch(&doc(), "s0", &pool(), 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_pool_is_an_assembly_error() {
        let err = assemble_text_batch(&doc(), "s0", &GeneratedImagePool::default(), 4, 0).unwrap_err();
        assert!(matches!(err, Error::Assembly(_)));
    }
}
