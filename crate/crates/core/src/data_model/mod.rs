//! Domain objects: documents, sentences, images, boxes, events and arguments,
//! plus the JSON-lines loaders for the three dataset shapes.

mod loader;
mod ontology;
mod validate;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use loader::{
    load_image_dataset, load_multimedia_dataset, load_text_dataset, to_multimedia_record, write_jsonl, LoadOptions,
    MultimediaRecord,
};
pub use ontology::{LabelSpace, Ontology, TrainOntology, NULL_LABEL};
pub use validate::{validate_document, validate_document_with, Violation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    /// inclusive
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Bounding box with inclusive pixel corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct ObjectBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    pub label: Option<String>,
    pub score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    #[serde(rename = "box")]
    coords: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl TryFrom<RawBox> for ObjectBox {
    type Error = String;

    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        let [x1, y1, x2, y2] = r.coords;
        if x1 < 0 || y1 < 0 || x2 < x1 || y2 < y1 || x2 > u32::MAX as i64 || y2 > u32::MAX as i64 {
            return Err(format!("malformed box {:?}", r.coords));
        }
        if let Some(s) = r.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("box score {s} outside [0,1]"));
            }
        }
        Ok(ObjectBox {
            x1: x1 as u32,
            y1: y1 as u32,
            x2: x2 as u32,
            y2: y2 as u32,
            label: r.label,
            score: r.score,
        })
    }
}

impl From<ObjectBox> for RawBox {
    fn from(b: ObjectBox) -> Self {
        RawBox {
            coords: [b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64],
            label: b.label,
            score: b.score,
        }
    }
}

impl ObjectBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            label: None,
            score: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> u64 {
        (self.x2 - self.x1) as u64 + 1
    }

    pub fn height(&self) -> u64 {
        (self.y2 - self.y1) as u64 + 1
    }

    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.is_well_formed() && self.x2 < width && self.y2 < height
    }
}

/// Where an image's content comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    File(PathBuf),
    /// Key into a precomputed patch-feature archive.
    Precomputed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDoc {
    pub id: String,
    pub source: ImageSource,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub objects: Vec<ObjectBox>,
    /// Activity verb from the source annotation, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextTrigger {
    pub sentence_id: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextSpan {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualGrounding {
    pub image_id: String,
    #[serde(flatten)]
    pub object: ObjectBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgumentMention {
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_grounding: Option<TextSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_grounding: Option<Vec<VisualGrounding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

impl ArgumentMention {
    pub fn textual(role: impl Into<String>, span: TextSpan) -> Self {
        Self {
            role: role.into(),
            text_grounding: Some(span),
            visual_grounding: None,
            scores: None,
        }
    }

    pub fn visual(role: impl Into<String>, image_id: impl Into<String>, object: ObjectBox) -> Self {
        Self {
            role: role.into(),
            text_grounding: None,
            visual_grounding: Some(vec![VisualGrounding {
                image_id: image_id.into(),
                object,
            }]),
            scores: None,
        }
    }

    pub fn has_visual(&self) -> bool {
        self.visual_grounding.as_ref().is_some_and(|v| !v.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMention {
    pub event_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_trigger: Option<TextTrigger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_trigger: Option<String>,
    #[serde(default)]
    pub arguments: Vec<ArgumentMention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

impl EventMention {
    pub fn textual(event_type: impl Into<String>, sentence_id: impl Into<String>, index: usize) -> Self {
        Self {
            event_type: event_type.into(),
            text_trigger: Some(TextTrigger {
                sentence_id: sentence_id.into(),
                index,
            }),
            image_trigger: None,
            arguments: Vec::new(),
            scores: None,
        }
    }

    pub fn visual(event_type: impl Into<String>, image_id: impl Into<String>) -> Self {
        Self {
            event_type: event_type.into(),
            text_trigger: None,
            image_trigger: Some(image_id.into()),
            arguments: Vec::new(),
            scores: None,
        }
    }

    pub fn is_multimedia(&self) -> bool {
        self.text_trigger.is_some() && self.image_trigger.is_some()
    }

    /// The textual half of this event: text trigger and text-grounded arguments.
    pub fn text_view(&self) -> Option<EventMention> {
        let trig = self.text_trigger.clone()?;
        Some(EventMention {
            event_type: self.event_type.clone(),
            text_trigger: Some(trig),
            image_trigger: None,
            arguments: self
                .arguments
                .iter()
                .filter(|a| a.text_grounding.is_some())
                .map(|a| ArgumentMention {
                    visual_grounding: None,
                    ..a.clone()
                })
                .collect(),
            scores: None,
        })
    }

    /// The visual half: image trigger and box-grounded arguments.
    pub fn visual_view(&self) -> Option<EventMention> {
        let img = self.image_trigger.clone()?;
        Some(EventMention {
            event_type: self.event_type.clone(),
            text_trigger: None,
            image_trigger: Some(img),
            arguments: self
                .arguments
                .iter()
                .filter(|a| a.has_visual())
                .map(|a| ArgumentMention {
                    text_grounding: None,
                    ..a.clone()
                })
                .collect(),
            scores: None,
        })
    }
}

/// A document `⟨images, sentences⟩` with optional gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimediaDocument {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub images: Vec<ImageDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_events: Option<Vec<EventMention>>,
}

impl MultimediaDocument {
    pub fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn image(&self, id: &str) -> Option<&ImageDoc> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn gold(&self) -> &[EventMention] {
        self.gold_events.as_deref().unwrap_or(&[])
    }
}
