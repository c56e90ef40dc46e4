use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    ArgumentMention, EventMention, ImageDoc, ImageSource, MultimediaDocument, ObjectBox, Ontology, RawBox, Sentence,
    TextSpan, TextTrigger, TrainOntology,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Unknown verbs fail the load instead of producing a negative image.
    pub strict_verbs: bool,
    pub train_ontology: TrainOntology,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            strict_verbs: false,
            train_ontology: TrainOntology::Target,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTextArg {
    role: String,
    sentence_id: String,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTextEvent {
    #[serde(rename = "type")]
    event_type: String,
    trigger: TextTrigger,
    #[serde(default)]
    args: Vec<RawTextArg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextRecord {
    doc_id: String,
    sentences: Vec<Sentence>,
    #[serde(default)]
    events: Vec<RawTextEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawFrame {
    role: String,
    #[serde(rename = "box")]
    coords: [i64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawObject {
    #[serde(rename = "box")]
    coords: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageEntry {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event_type: Option<String>,
    #[serde(default)]
    frames: Vec<RawFrame>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    objects: Vec<RawObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRecord {
    doc_id: String,
    #[serde(flatten)]
    image: ImageEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultimediaLink {
    pub text_event_idx: usize,
    /// Index into the record's `images` array.
    pub image_event_idx: usize,
}

/// On-disk shape of a multimedia test document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultimediaRecord {
    doc_id: String,
    #[serde(default)]
    sentences: Vec<Sentence>,
    #[serde(default)]
    events: Vec<RawTextEvent>,
    #[serde(default)]
    images: Vec<ImageEntry>,
    #[serde(default)]
    multimedia_links: Vec<MultimediaLink>,
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            Error::Load {
                path: path.to_path_buf(),
                record: idx,
                field: field_from_message(&msg),
                message: msg,
            }
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn field_from_message(msg: &str) -> String {
    let mut parts = msg.split('`');
    match (parts.next(), parts.next()) {
        (Some(_), Some(f)) => f.to_string(),
        _ => "<record>".to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

struct Ctx<'a> {
    path: &'a Path,
    record: usize,
    ont: &'a Ontology,
    opts: LoadOptions,
}

impl Ctx<'_> {
    fn schema(&self, msg: impl std::fmt::Display) -> Error {
        Error::Schema(format!("{} record {}: {msg}", self.path.display(), self.record))
    }

    /// Ok(None) when the type is known but excluded from the trained label set.
    fn check_type(&self, t: &str) -> Result<Option<()>> {
        if !self.ont.has_type(t) {
            return Err(Error::Ontology(format!(
                "{} record {}: unknown event type `{t}`",
                self.path.display(),
                self.record
            )));
        }
        if self.ont.trained_types(self.opts.train_ontology).iter().any(|x| x == t) {
            Ok(Some(()))
        } else {
            Ok(None)
        }
    }

    fn check_role(&self, t: &str, role: &str) -> Result<()> {
        if self.ont.role_valid(t, role) {
            Ok(())
        } else {
            Err(Error::Ontology(format!(
                "{} record {}: role `{role}` not valid for `{t}`",
                self.path.display(),
                self.record
            )))
        }
    }

    fn make_box(&self, coords: [i64; 4], label: Option<String>, score: Option<f64>) -> Result<ObjectBox> {
        ObjectBox::try_from(RawBox { coords, label, score }).map_err(|m| self.schema(m))
    }

    /// Returns `None` for events dropped by the label-set filter.
    fn text_event(&self, ev: &RawTextEvent) -> Result<Option<EventMention>> {
        if self.check_type(&ev.event_type)?.is_none() {
            return Ok(None);
        }
        let mut m = EventMention::textual(&ev.event_type, &ev.trigger.sentence_id, ev.trigger.index);
        for a in &ev.args {
            self.check_role(&ev.event_type, &a.role)?;
            if a.end < a.start {
                return Err(self.schema(format!("argument span end {} < start {}", a.end, a.start)));
            }
            m.arguments.push(ArgumentMention::textual(
                &a.role,
                TextSpan {
                    sentence_id: a.sentence_id.clone(),
                    start: a.start,
                    end: a.end,
                },
            ));
        }
        Ok(Some(m))
    }

    fn image(&self, entry: &ImageEntry, dir: &Path) -> Result<(ImageDoc, Option<EventMention>)> {
        if entry.width == 0 || entry.height == 0 {
            return Err(self.schema("image width and height must be positive"));
        }
        let source = match (&entry.file, &entry.features) {
            (Some(f), _) => ImageSource::File(dir.join(f)),
            (None, Some(k)) => ImageSource::Precomputed(k.clone()),
            (None, None) => return Err(self.schema("image needs `file` or `features`")),
        };
        let mut objects = Vec::new();
        for o in &entry.objects {
            let b = self.make_box(o.coords, o.label.clone(), o.score)?;
            if !b.fits(entry.width, entry.height) {
                return Err(self.schema(format!("object box {:?} outside image", o.coords)));
            }
            objects.push(b);
        }
        let doc = ImageDoc {
            id: entry.image_id.clone(),
            source,
            width: entry.width,
            height: entry.height,
            objects,
            verb: entry.verb.clone(),
        };

        let event_type = match (&entry.event_type, &entry.verb) {
            (Some(t), _) => Some(t.clone()),
            (None, Some(v)) => match self.ont.verb_map.get(v) {
                Some(t) => Some(t.clone()),
                None if self.opts.strict_verbs => {
                    return Err(Error::Mapping(format!(
                        "{} record {}: verb `{v}` has no event mapping",
                        self.path.display(),
                        self.record
                    )))
                }
                None => None,
            },
            (None, None) => None,
        };
        let mut boxes = Vec::with_capacity(entry.frames.len());
        for fr in &entry.frames {
            let b = self.make_box(fr.coords, None, None)?;
            if !b.fits(entry.width, entry.height) {
                return Err(self.schema(format!("frame box {:?} outside image", fr.coords)));
            }
            boxes.push((fr.role.clone(), b));
        }
        let Some(t) = event_type else {
            return Ok((doc, None));
        };
        if self.check_type(&t)?.is_none() {
            return Ok((doc, None));
        }
        let mut ev = EventMention::visual(&t, &entry.image_id);
        for (role, b) in boxes {
            self.check_role(&t, &role)?;
            ev.arguments.push(ArgumentMention::visual(role, &entry.image_id, b));
        }
        Ok((doc, Some(ev)))
    }
}

/// Loads text-annotated JSON-lines records (one document per line).
pub fn load_text_dataset(path: &Path, ont: &Ontology, opts: LoadOptions) -> Result<Vec<MultimediaDocument>> {
    let records: Vec<TextRecord> = read_records(path)?;
    let mut docs = Vec::with_capacity(records.len());
    for (record, rec) in records.into_iter().enumerate() {
        let ctx = Ctx {
            path,
            record,
            ont,
            opts,
        };
        let mut events = Vec::new();
        for ev in &rec.events {
            if let Some(m) = ctx.text_event(ev)? {
                events.push(m);
            }
        }
        docs.push(MultimediaDocument {
            id: rec.doc_id,
            sentences: rec.sentences,
            images: Vec::new(),
            gold_events: Some(events),
        });
    }
    Ok(docs)
}

/// Loads image-annotated records; each record becomes a one-image document.
pub fn load_image_dataset(path: &Path, ont: &Ontology, opts: LoadOptions) -> Result<Vec<MultimediaDocument>> {
    let records: Vec<ImageRecord> = read_records(path)?;
    let dir = base_dir(path);
    let mut docs = Vec::with_capacity(records.len());
    for (record, rec) in records.into_iter().enumerate() {
        let ctx = Ctx {
            path,
            record,
            ont,
            opts,
        };
        let (img, ev) = ctx.image(&rec.image, &dir)?;
        docs.push(MultimediaDocument {
            id: rec.doc_id,
            sentences: Vec::new(),
            images: vec![img],
            gold_events: Some(ev.into_iter().collect()),
        });
    }
    Ok(docs)
}

/// Loads multimedia records, merging linked text/image events into multimedia events.
pub fn load_multimedia_dataset(path: &Path, ont: &Ontology, opts: LoadOptions) -> Result<Vec<MultimediaDocument>> {
    let records: Vec<MultimediaRecord> = read_records(path)?;
    let dir = base_dir(path);
    let mut docs = Vec::with_capacity(records.len());
    for (record, rec) in records.into_iter().enumerate() {
        let ctx = Ctx {
            path,
            record,
            ont,
            opts,
        };
        let text: Vec<Option<EventMention>> = rec.events.iter().map(|e| ctx.text_event(e)).collect::<Result<_>>()?;
        let mut images = Vec::with_capacity(rec.images.len());
        let mut visual = Vec::with_capacity(rec.images.len());
        for entry in &rec.images {
            let (img, ev) = ctx.image(entry, &dir)?;
            images.push(img);
            visual.push(ev);
        }
        let mut link_of_text = vec![None; text.len()];
        let mut image_linked = vec![false; visual.len()];
        for l in &rec.multimedia_links {
            if l.text_event_idx >= text.len() || l.image_event_idx >= visual.len() {
                return Err(ctx.schema(format!(
                    "multimedia link ({}, {}) out of range",
                    l.text_event_idx, l.image_event_idx
                )));
            }
            if let (Some(t), Some(v)) = (&text[l.text_event_idx], &visual[l.image_event_idx]) {
                if t.event_type != v.event_type {
                    return Err(ctx.schema(format!(
                        "linked events disagree on type: `{}` vs `{}`",
                        t.event_type, v.event_type
                    )));
                }
                if link_of_text[l.text_event_idx].is_some() || image_linked[l.image_event_idx] {
                    return Err(ctx.schema("an event appears in more than one link"));
                }
                link_of_text[l.text_event_idx] = Some(l.image_event_idx);
                image_linked[l.image_event_idx] = true;
            }
        }
        let mut gold = Vec::new();
        for (i, t) in text.into_iter().enumerate() {
            let Some(mut t) = t else { continue };
            if let Some(vi) = link_of_text[i] {
                let v = visual[vi].as_ref().expect("linked image has an event");
                t.image_trigger = v.image_trigger.clone();
                t.arguments.extend(v.arguments.iter().cloned());
            }
            gold.push(t);
        }
        for (vi, v) in visual.into_iter().enumerate() {
            if let (Some(v), false) = (v, image_linked[vi]) {
                gold.push(v);
            }
        }
        docs.push(MultimediaDocument {
            id: rec.doc_id,
            sentences: rec.sentences,
            images,
            gold_events: Some(gold),
        });
    }
    Ok(docs)
}

/// Serializes a document into the multimedia record shape.
pub fn to_multimedia_record(doc: &MultimediaDocument) -> MultimediaRecord {
    let mut events = Vec::new();
    let mut image_event: Vec<Option<&EventMention>> = vec![None; doc.images.len()];
    let mut links = Vec::new();
    for ev in doc.gold() {
        let img_idx = ev
            .image_trigger
            .as_ref()
            .and_then(|id| doc.images.iter().position(|i| &i.id == id));
        if let Some(trig) = &ev.text_trigger {
            if let Some(ii) = img_idx {
                links.push(MultimediaLink {
                    text_event_idx: events.len(),
                    image_event_idx: ii,
                });
            }
            events.push(RawTextEvent {
                event_type: ev.event_type.clone(),
                trigger: trig.clone(),
                args: ev
                    .arguments
                    .iter()
                    .filter_map(|a| {
                        a.text_grounding.as_ref().map(|s| RawTextArg {
                            role: a.role.clone(),
                            sentence_id: s.sentence_id.clone(),
                            start: s.start,
                            end: s.end,
                        })
                    })
                    .collect(),
            });
        }
        if let Some(ii) = img_idx {
            image_event[ii] = Some(ev);
        }
    }
    let images = doc
        .images
        .iter()
        .zip(image_event)
        .map(|(img, ev)| ImageEntry {
            image_id: img.id.clone(),
            file: match &img.source {
                ImageSource::File(p) => Some(p.clone()),
                ImageSource::Precomputed(_) => None,
            },
            features: match &img.source {
                ImageSource::Precomputed(k) => Some(k.clone()),
                ImageSource::File(_) => None,
            },
            width: img.width,
            height: img.height,
            verb: img.verb.clone(),
            event_type: ev.map(|e| e.event_type.clone()),
            frames: ev
                .map(|e| {
                    e.arguments
                        .iter()
                        .flat_map(|a| {
                            a.visual_grounding.iter().flatten().map(move |g| RawFrame {
                                role: a.role.clone(),
                                coords: [
                                    g.object.x1 as i64,
                                    g.object.y1 as i64,
                                    g.object.x2 as i64,
                                    g.object.y2 as i64,
                                ],
                            })
                        })
                        .collect()
                })
                .unwrap_or_default(),
            objects: img
                .objects
                .iter()
                .map(|o| RawObject {
                    coords: [o.x1 as i64, o.y1 as i64, o.x2 as i64, o.y2 as i64],
                    label: o.label.clone(),
                    score: o.score,
                })
                .collect(),
        })
        .collect();
    MultimediaRecord {
        doc_id: doc.id.clone(),
        sentences: doc.sentences.clone(),
        events,
        images,
        multimedia_links: links,
    }
}

impl MultimediaRecord {
    /// Text-record projection (drops images).
    pub fn text_part(&self) -> serde_json::Value {
        serde_json::to_value(TextRecord {
            doc_id: self.doc_id.clone(),
            sentences: self.sentences.clone(),
            events: self.events.clone(),
        })
        .expect("text record serializes")
    }

    /// One image-record per image.
    pub fn image_parts(&self) -> Vec<serde_json::Value> {
        self.images
            .iter()
            .map(|img| {
                serde_json::to_value(ImageRecord {
                    doc_id: format!("{}#{}", self.doc_id, img.image_id),
                    image: img.clone(),
                })
                .expect("image record serializes")
            })
            .collect()
    }
}
