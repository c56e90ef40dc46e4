use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{EventMention, MultimediaDocument, Ontology};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every structural invariant of a document. Empty result means valid.
pub fn validate_document(doc: &MultimediaDocument) -> Vec<Violation> {
    validate_document_with(doc, None)
}

/// As [`validate_document`], additionally checking types and roles against an ontology.
pub fn validate_document_with(doc: &MultimediaDocument, ont: Option<&Ontology>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });

    let mut ids = BTreeSet::new();
    for (si, s) in doc.sentences.iter().enumerate() {
        if !ids.insert(&s.id) {
            push(format!("sentences[{si}]"), format!("duplicate sentence id `{}`", s.id));
        }
        if s.words.is_empty() {
            push(format!("sentences[{si}]"), "sentence has no words".into());
        }
        for (ei, e) in s.entities.iter().enumerate() {
            if e.start > e.end || e.end >= s.words.len() {
                push(
                    format!("sentences[{si}].entities[{ei}]"),
                    format!("span ({}, {}) outside [0, {})", e.start, e.end, s.words.len()),
                );
            }
        }
    }
    let mut img_ids = BTreeSet::new();
    for (ii, img) in doc.images.iter().enumerate() {
        if !img_ids.insert(&img.id) {
            push(format!("images[{ii}]"), format!("duplicate image id `{}`", img.id));
        }
        if img.width == 0 || img.height == 0 {
            push(format!("images[{ii}]"), "image has zero size".into());
        }
        for (bi, b) in img.objects.iter().enumerate() {
            if !b.fits(img.width, img.height) {
                push(format!("images[{ii}].objects[{bi}]"), "box outside image bounds".into());
            }
        }
    }

    for (k, ev) in doc.gold().iter().enumerate() {
        check_event(doc, ont, ev, &format!("gold_events[{k}]"), &mut push);
    }
    out
}

fn check_event(
    doc: &MultimediaDocument,
    ont: Option<&Ontology>,
    ev: &EventMention,
    path: &str,
    push: &mut impl FnMut(String, String),
) {
    if ev.text_trigger.is_none() && ev.image_trigger.is_none() {
        push(path.to_string(), "event has neither a text nor an image trigger".into());
    }
    if let Some(ont) = ont {
        if !ont.has_type(&ev.event_type) {
            push(path.to_string(), format!("unknown event type `{}`", ev.event_type));
        }
    }
    if let Some(t) = &ev.text_trigger {
        match doc.sentence(&t.sentence_id) {
            None => push(
                format!("{path}.text_trigger"),
                format!("unknown sentence `{}`", t.sentence_id),
            ),
            Some(s) if t.index >= s.words.len() => push(
                format!("{path}.text_trigger"),
                format!("trigger index {} >= sentence length {}", t.index, s.words.len()),
            ),
            _ => {}
        }
    }
    if let Some(img) = &ev.image_trigger {
        if doc.image(img).is_none() {
            push(format!("{path}.image_trigger"), format!("unknown image `{img}`"));
        }
    }
    for (ai, a) in ev.arguments.iter().enumerate() {
        let apath = format!("{path}.arguments[{ai}]");
        if a.text_grounding.is_none() && !a.has_visual() {
            push(apath.clone(), "argument has no grounding".into());
        }
        if let Some(ont) = ont {
            if ont.has_type(&ev.event_type) && !ont.role_valid(&ev.event_type, &a.role) {
                push(
                    apath.clone(),
                    format!("role `{}` invalid for `{}`", a.role, ev.event_type),
                );
            }
        }
        if let Some(span) = &a.text_grounding {
            match doc.sentence(&span.sentence_id) {
                None => push(apath.clone(), format!("unknown sentence `{}`", span.sentence_id)),
                Some(s) => {
                    if span.start > span.end || span.end >= s.words.len() {
                        push(
                            apath.clone(),
                            format!("span ({}, {}) outside [0, {})", span.start, span.end, s.words.len()),
                        );
                    } else if !s.entities.iter().any(|e| e.start == span.start && e.end == span.end) {
                        push(apath.clone(), "argument span is not an annotated entity".into());
                    }
                }
            }
        }
        for g in a.visual_grounding.iter().flatten() {
            match doc.image(&g.image_id) {
                None => push(apath.clone(), format!("unknown image `{}`", g.image_id)),
                Some(img) if !g.object.fits(img.width, img.height) => {
                    push(apath.clone(), "argument box outside image bounds".into())
                }
                _ => {}
            }
        }
    }
}
