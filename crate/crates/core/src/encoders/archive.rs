//! Binary archive of precomputed features.
//!
//! Layout: 8-byte magic `MMEVFEAT`, u32 LE version, u64 LE header length, the
//! JSON header, then f32 LE payload. Each entry stores its CLS vector followed
//! by `rows × d` values starting at `offset` (counted in floats).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Grid, ImageBackend, ImageFeatures, TextBackend, TextFeatures};
use crate::data_model::{ImageDoc, ImageSource, Sentence};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"MMEVFEAT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub id: String,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    d: usize,
    backend_tag: String,
    patch_size: u32,
    entries: Vec<FeatureEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub d: usize,
    pub backend_tag: String,
    pub patch_size: u32,
    entries: BTreeMap<String, (Vec<f64>, Matrix, Option<Grid>)>,
}

impl FeatureArchive {
    pub fn new(d: usize, backend_tag: impl Into<String>, patch_size: u32) -> Self {
        Self {
            d,
            backend_tag: backend_tag.into(),
            patch_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, cls: Vec<f64>, rows: Matrix, grid: Option<Grid>) -> Result<()> {
        if cls.len() != self.d || (rows.rows() > 0 && rows.cols() != self.d) {
            return Err(Error::Contract(format!("feature width must be {}", self.d)));
        }
        if let Some(g) = grid {
            if g.len() != rows.rows() {
                return Err(Error::Contract("grid does not match row count".into()));
            }
        }
        self.entries.insert(id.into(), (cls, rows, grid));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<(&[f64], &Matrix, Option<Grid>)> {
        self.entries.get(id).map(|(c, m, g)| (c.as_slice(), m, *g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (id, (cls, rows, grid)) in &self.entries {
            entries.push(FeatureEntry {
                id: id.clone(),
                rows: rows.rows(),
                grid: *grid,
                offset,
            });
            for v in cls.iter().chain(rows.as_slice()) {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            offset += cls.len() + rows.as_slice().len();
        }
        let header = serde_json::to_vec(&Header {
            d: self.d,
            backend_tag: self.backend_tag.clone(),
            patch_size: self.patch_size,
            entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Contract(format!("feature archive: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let floats: Vec<f64> = bytes[header_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut archive = Self::new(header.d, header.backend_tag, header.patch_size);
        for e in header.entries {
            let n = header.d + e.rows * header.d;
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(&format!("entry `{}` out of range", e.id)))?;
            let cls = slice[..header.d].to_vec();
            let rows = Matrix::from_vec(e.rows, header.d, slice[header.d..].to_vec());
            archive.insert(e.id, cls, rows, e.grid)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Serves sentence features from an archive keyed by sentence id; one row per word.
pub struct PrecomputedTextBackend {
    pub archive: FeatureArchive,
}

impl TextBackend for PrecomputedTextBackend {
    fn tag(&self) -> String {
        self.archive.backend_tag.clone()
    }

    fn base_dim(&self) -> usize {
        self.archive.d
    }

    fn features(&self, sentence: &Sentence, cfg: &EncoderConfig) -> Result<TextFeatures> {
        let (cls, rows, _) = self
            .archive
            .get(&sentence.id)
            .ok_or_else(|| Error::Contract(format!("no precomputed features for sentence `{}`", sentence.id)))?;
        let n = sentence.len().min(cfg.max_text_length);
        if rows.rows() < n {
            return Err(Error::Contract(format!(
                "sentence `{}` has {} words but {} feature rows",
                sentence.id,
                sentence.len(),
                rows.rows()
            )));
        }
        if n < sentence.len() {
            log::warn!("sentence `{}` truncated to {n} tokens", sentence.id);
        }
        let kept: Vec<Vec<f64>> = (0..n).map(|i| rows.row(i).to_vec()).collect();
        Ok(TextFeatures {
            cls: cls.to_vec(),
            tokens: Matrix::from_rows(&kept),
            word_map: (0..n).collect(),
        })
    }
}

/// Serves image features from an archive for `Precomputed` sources and
/// delegates file-backed images to a fallback backend.
pub struct PrecomputedImageBackend {
    pub archive: FeatureArchive,
    pub fallback: Option<Box<dyn ImageBackend>>,
}

impl ImageBackend for PrecomputedImageBackend {
    fn tag(&self) -> String {
        self.archive.backend_tag.clone()
    }

    fn base_dim(&self) -> usize {
        self.archive.d
    }

    fn features(&self, image: &ImageDoc, cfg: &EncoderConfig) -> Result<ImageFeatures> {
        let key = match &image.source {
            ImageSource::Precomputed(k) => k.as_str(),
            ImageSource::File(_) => match &self.fallback {
                Some(f) => return f.features(image, cfg),
                None => image.id.as_str(),
            },
        };
        let (cls, rows, grid) = self
            .archive
            .get(key)
            .ok_or_else(|| Error::Contract(format!("no precomputed features for image `{key}`")))?;
        let grid = grid.unwrap_or_else(|| {
            let side = (rows.rows() as f64).sqrt().round() as u32;
            Grid { rows: side, cols: side }
        });
        if grid.len() != rows.rows() {
            return Err(Error::Contract(format!("image `{key}` features are not a square grid")));
        }
        Ok(ImageFeatures {
            cls: cls.to_vec(),
            patches: rows.clone(),
            grid,
        })
    }
}
