//! Object proposals for visual argument identification.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::augmentation::cache::atomic_write;
use crate::clients::CommandClient;
use crate::data_model::{ImageDoc, ImageSource, ObjectBox};
use crate::error::{Error, Result};

pub trait ObjectDetectorClient: Send + Sync {
    fn tag(&self) -> String;
    fn detect(&self, image: &ImageDoc) -> Result<Vec<ObjectBox>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub max_objects: usize,
    pub score_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            max_objects: 20,
            score_floor: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureLine {
    image_id: String,
    boxes: Vec<ObjectBox>,
}

/// Detector backed by a JSON-lines file of `{image_id, boxes}` records.
#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    tag: String,
    boxes: HashMap<String, Vec<ObjectBox>>,
}

impl FixtureDetector {
    pub fn new(tag: impl Into<String>, boxes: HashMap<String, Vec<ObjectBox>>) -> Self {
        Self { tag: tag.into(), boxes }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut boxes = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: FixtureLine = serde_json::from_str(line).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                record: i,
                field: "boxes".into(),
                message: e.to_string(),
            })?;
            boxes.insert(rec.image_id, rec.boxes);
        }
        let digest = crate::seeds::sha256_hex(text.as_bytes());
        Ok(Self::new(format!("fixture-detector:{}", &digest[..12]), boxes))
    }

    pub fn write(path: &Path, boxes: &[(String, Vec<ObjectBox>)]) -> Result<()> {
        let lines: Vec<FixtureLine> = boxes
            .iter()
            .map(|(id, b)| FixtureLine {
                image_id: id.clone(),
                boxes: b.clone(),
            })
            .collect();
        crate::data_model::write_jsonl(path, &lines)
    }
}

impl ObjectDetectorClient for FixtureDetector {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn detect(&self, image: &ImageDoc) -> Result<Vec<ObjectBox>> {
        Ok(self.boxes.get(&image.id).cloned().unwrap_or_default())
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_ref: &'a str,
}

impl ObjectDetectorClient for CommandClient {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn detect(&self, image: &ImageDoc) -> Result<Vec<ObjectBox>> {
        let image_ref = match &image.source {
            ImageSource::File(p) => p.to_string_lossy().into_owned(),
            ImageSource::Precomputed(k) => k.clone(),
        };
        self.call(&DetectRequest { image_ref: &image_ref })
    }
}

/// Memoizes detections per `(image id, client tag, params)`, optionally on disk.
#[derive(Debug, Default)]
pub struct DetectionCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Vec<ObjectBox>>>,
    client_calls: AtomicUsize,
}

impl DetectionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn client_calls(&self) -> usize {
        self.client_calls.load(Ordering::Relaxed)
    }

    fn key(image: &ImageDoc, tag: &str, cfg: &DetectorConfig) -> String {
        let cfg = serde_json::to_string(cfg).expect("config serializes");
        crate::seeds::sha256_hex(format!("{}\u{0}{tag}\u{0}{cfg}", image.id).as_bytes())
    }
}

/// Detects objects, keeps those scoring at least `score_floor` (a missing
/// score counts as 1), sorts by descending score (stable) and truncates.
pub fn detect(
    image: &ImageDoc,
    client: &dyn ObjectDetectorClient,
    cfg: &DetectorConfig,
    cache: &DetectionCache,
) -> Result<Vec<ObjectBox>> {
    let tag = client.tag();
    let key = DetectionCache::key(image, &tag, cfg);
    if let Some(hit) = cache.memory.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    if let Some(dir) = &cache.dir {
        let path = dir.join(format!("{key}.json"));
        if let Ok(bytes) = std::fs::read(&path) {
            let boxes: Vec<ObjectBox> = serde_json::from_slice(&bytes)?;
            cache.memory.lock().expect("cache lock").insert(key, boxes.clone());
            return Ok(boxes);
        }
    }
    cache.client_calls.fetch_add(1, Ordering::Relaxed);
    let raw = client.detect(image).map_err(|e| match e {
        Error::Detection { .. } => e,
        other => Error::Detection {
            image: image.id.clone(),
            message: other.to_string(),
        },
    })?;
    let boxes = filter_detections(raw, image, cfg)?;
    if let Some(dir) = &cache.dir {
        atomic_write(dir, &format!("{key}.json"), &serde_json::to_vec(&boxes)?)?;
    }
    cache.memory.lock().expect("cache lock").insert(key, boxes.clone());
    Ok(boxes)
}

pub fn filter_detections(raw: Vec<ObjectBox>, image: &ImageDoc, cfg: &DetectorConfig) -> Result<Vec<ObjectBox>> {
    for b in &raw {
        if !b.fits(image.width, image.height) {
            return Err(Error::Detection {
                image: image.id.clone(),
                message: format!("box ({}, {}, {}, {}) is outside the image", b.x1, b.y1, b.x2, b.y2),
            });
        }
    }
    let score = |b: &ObjectBox| b.score.unwrap_or(1.0);
    let mut kept: Vec<ObjectBox> = raw.into_iter().filter(|b| score(b) >= cfg.score_floor).collect();
    kept.sort_by(|a, b| score(b).total_cmp(&score(a)));
    kept.truncate(cfg.max_objects);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> ImageDoc {
        ImageDoc {
            id: "img".into(),
            source: ImageSource::File("x.png".into()),
            width: 100,
            height: 100,
            objects: vec![],
            verb: None,
        }
    }

    fn fixture(scores: &[f64]) -> FixtureDetector {
        let boxes = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ObjectBox::new(i as u32, 0, 10 + i as u32, 10).with_score(s))
            .collect();
        FixtureDetector::new("fx", HashMap::from([("img".to_string(), boxes)]))
    }

    #[test]
    fn passthrough_with_zero_floor() {
        let cfg = DetectorConfig {
            max_objects: 20,
            score_floor: 0.0,
        };
        let out = detect(&image(), &fixture(&[0.3, 0.9, 0.5]), &cfg, &DetectionCache::in_memory()).unwrap();
        assert_eq!(out.len(), 3);
        let scores: Vec<f64> = out.iter().map(|b| b.score.unwrap()).collect();
        assert_eq!(scores, vec![0.9, 0.5, 0.3]);
    }

    #[test]
    fn floor_filters() {
        let cfg = DetectorConfig {
            max_objects: 20,
            score_floor: 0.9,
        };
        let out = detect(&image(), &fixture(&[0.95, 0.5]), &cfg, &DetectionCache::in_memory()).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn cap_and_cache() {
        let cfg = DetectorConfig {
            max_objects: 2,
            score_floor: 0.0,
        };
        let cache = DetectionCache::in_memory();
        let fx = fixture(&[0.1, 0.2, 0.3]);
        let a = detect(&image(), &fx, &cfg, &cache).unwrap();
        let b = detect(&image(), &fx, &cfg, &cache).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert_eq!(cache.client_calls(), 1);
    }

    #[test]
    fn unknown_image_is_empty() {
        let mut img = image();
        img.id = "other".into();
        let out = detect(
            &img,
            &fixture(&[0.9]),
            &DetectorConfig::default(),
            &DetectionCache::in_memory(),
        )
        .unwrap();
        assert!(out.is_empty());
    }
}
