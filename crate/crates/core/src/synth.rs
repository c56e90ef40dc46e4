//! A small synthetic multimedia world for desk-scale runs: an ontology, a
//! lexicon, flat-colour scenes, a keyword-driven toy image generator, a
//! stepwise toy captioner, and the fixture files the pipeline consumes.
//!
//! Some trigger words are shared by two event types. Because the toy text
//! encoder is context-free, those words can only be resolved by looking at
//! the accompanying images.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::{ImageFormat, Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{ImageGenRequest, ImageGeneratorClient, StepwiseCaptionModel};
use crate::coref_eval::SimilarityRecord;
use crate::data_model::{
    to_multimedia_record, write_jsonl, ArgumentMention, EntitySpan, EventMention, ImageDoc, ImageSource,
    MultimediaDocument, ObjectBox, Ontology, Sentence, TextSpan,
};
use crate::encoders::color_bin;
use crate::error::{Error, Result};
use crate::objects::FixtureDetector;
use crate::seeds::derive_seed;

type Color = [u8; 3];

struct EventLex {
    event_type: &'static str,
    verb: &'static str,
    triggers: &'static [&'static str],
    /// Trigger shared with another type.
    ambiguous: &'static str,
    roles: [(&'static str, &'static [&'static str]); 2],
    background: Color,
}

const LEXICON: [EventLex; 4] = [
    EventLex {
        event_type: "Conflict.Attack",
        verb: "attacking",
        triggers: &["attacked", "bombed"],
        ambiguous: "struck",
        roles: [
            ("Attacker", &["rebels", "militants", "gunmen"]),
            ("Target", &["village", "convoy", "checkpoint"]),
        ],
        background: [224, 32, 32],
    },
    EventLex {
        event_type: "Movement.Transport",
        verb: "driving",
        triggers: &["drove", "shipped"],
        ambiguous: "took",
        roles: [
            ("Agent", &["driver", "pilot", "crew"]),
            ("Vehicle", &["truck", "plane", "ferry"]),
        ],
        background: [32, 32, 224],
    },
    EventLex {
        event_type: "Justice.Arrest",
        verb: "arresting",
        triggers: &["arrested", "detained"],
        ambiguous: "took",
        roles: [
            ("Agent", &["police", "officers", "guards"]),
            ("Person", &["suspect", "smuggler", "protester"]),
        ],
        background: [32, 224, 32],
    },
    EventLex {
        event_type: "Contact.Meet",
        verb: "meeting",
        triggers: &["met", "greeted"],
        ambiguous: "struck",
        roles: [
            ("Entity", &["leaders", "ministers", "delegates"]),
            ("Place", &["summit", "embassy", "palace"]),
        ],
        background: [224, 224, 32],
    },
];

const NULL_BACKGROUND: Color = [96, 96, 96];
const DISTRACTOR: Color = [224, 224, 224];
const NULL_WORDS: [&str; 6] = ["officials", "said", "the", "weather", "was", "calm"];
const TIME_WORDS: [&str; 3] = ["today", "yesterday", "overnight"];

fn role_color(role: &str) -> Color {
    match role {
        "Attacker" => [160, 32, 160],
        "Target" => [224, 160, 32],
        "Agent" => [32, 160, 160],
        "Vehicle" => [160, 160, 224],
        "Person" => [224, 96, 160],
        "Entity" => [96, 224, 224],
        "Place" => [160, 96, 32],
        _ => DISTRACTOR,
    }
}

/// Colour assignments, written next to the fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub backgrounds: BTreeMap<String, Color>,
    pub null_background: Color,
    pub roles: BTreeMap<String, Color>,
    pub distractor: Color,
}

pub fn palette() -> Palette {
    let mut roles = BTreeMap::new();
    for lex in &LEXICON {
        for (r, _) in lex.roles {
            roles.insert(r.to_string(), role_color(r));
        }
    }
    Palette {
        backgrounds: LEXICON
            .iter()
            .map(|l| (l.event_type.to_string(), l.background))
            .collect(),
        null_background: NULL_BACKGROUND,
        roles,
        distractor: DISTRACTOR,
    }
}

pub fn toy_ontology() -> Ontology {
    Ontology {
        event_types: LEXICON.iter().map(|l| l.event_type.to_string()).collect(),
        roles: LEXICON
            .iter()
            .map(|l| {
                (
                    l.event_type.to_string(),
                    l.roles.iter().map(|(r, _)| r.to_string()).collect(),
                )
            })
            .collect(),
        verb_map: LEXICON
            .iter()
            .map(|l| (l.verb.to_string(), l.event_type.to_string()))
            .collect(),
        target_types: None,
    }
}

/// Event type a word points to unambiguously, if any.
fn word_type(word: &str) -> Option<usize> {
    LEXICON
        .iter()
        .position(|l| l.triggers.contains(&word) || l.roles.iter().any(|(_, ws)| ws.contains(&word)))
}

fn role_of_word(word: &str) -> Option<&'static str> {
    LEXICON
        .iter()
        .flat_map(|l| l.roles.iter())
        .find(|(_, ws)| ws.contains(&word))
        .map(|(r, _)| *r)
}

fn fill(img: &mut RgbImage, b: &ObjectBox, c: Color) {
    for y in b.y1..=b.y2 {
        for x in b.x1..=b.x2 {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn random_box<R: Rng>(rng: &mut R, size: u32) -> ObjectBox {
    let min = (size / 4).max(2);
    let max = (size / 2).max(min + 1);
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x1 = rng.random_range(0..=size - w);
    let y1 = rng.random_range(0..=size - h);
    ObjectBox::new(x1, y1, x1 + w - 1, y1 + h - 1)
}

/// A flat scene: background colour plus filled rectangles. Later objects
/// paint over earlier ones.
pub fn render_scene(size: u32, background: Color, objects: &[(ObjectBox, Color)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb(background));
    for (b, c) in objects {
        fill(&mut img, b, *c);
    }
    img
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Text-to-image stand-in: votes an event type from the prompt's words and
/// paints that type's scene, with one object per role word in the prompt.
/// Ambiguous triggers carry no vote.
#[derive(Debug, Clone, Default)]
pub struct ToyImageGenerator;

impl ToyImageGenerator {
    pub fn paint(prompt: &str, size: u32, seed: u64) -> RgbImage {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let mut votes = [0usize; LEXICON.len()];
        for w in &words {
            if let Some(t) = word_type(w) {
                votes[t] += 1;
            }
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        let winners: Vec<usize> = (0..votes.len()).filter(|&i| votes[i] == best).collect();
        let background = if best == 0 || winners.len() > 1 {
            NULL_BACKGROUND
        } else {
            LEXICON[winners[0]].background
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["paint", prompt]));
        // clutter first, like the photographed scenes
        let mut objects = vec![(random_box(&mut rng, size), DISTRACTOR)];
        objects.extend(
            words
                .iter()
                .filter_map(|w| role_of_word(w))
                .map(|r| (random_box(&mut rng, size), role_color(r))),
        );
        render_scene(size, background, &objects)
    }
}

impl ImageGeneratorClient for ToyImageGenerator {
    fn tag(&self) -> String {
        "toy-painter-v1".into()
    }

    fn generate(&self, req: &ImageGenRequest) -> Result<Vec<Vec<u8>>> {
        (0..req.n)
            .map(|i| png_bytes(&Self::paint(&req.prompt, req.size, req.seed.wrapping_add(i as u64))))
            .collect()
    }
}

/// Image-to-text stand-in exposing per-step distributions. It recognises the
/// dominant background colour and describes the scene as
/// `<role-1 word> <trigger> the <role-2 word>`; 90% of each step's mass sits
/// on the words fitting the slot, the rest is spread over the vocabulary.
pub struct ToyCaptionModel {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    scenes: Mutex<HashMap<PathBuf, Option<usize>>>,
}

impl Default for ToyCaptionModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyCaptionModel {
    pub fn new() -> Self {
        let mut vocab: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            if !vocab.iter().any(|v| v == w) {
                vocab.push(w.to_string());
            }
        };
        for l in &LEXICON {
            l.triggers.iter().for_each(|w| push(w));
            for (_, ws) in l.roles {
                ws.iter().for_each(|w| push(w));
            }
        }
        NULL_WORDS.iter().for_each(|w| push(w));
        push("<end>");
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            vocab,
            index,
            scenes: Mutex::new(HashMap::new()),
        }
    }

    fn scene_type(&self, image: &ImageDoc) -> Result<Option<usize>> {
        let ImageSource::File(path) = &image.source else {
            return Err(Error::Captioning {
                image: image.id.clone(),
                message: "toy captioner needs pixel data".into(),
            });
        };
        if let Some(t) = self.scenes.lock().expect("scene memo").get(path) {
            return Ok(*t);
        }
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for p in img.pixels() {
            *counts.entry(color_bin(p.0)).or_default() += 1;
        }
        let dominant = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(bin, _)| bin);
        let t = LEXICON.iter().position(|l| Some(color_bin(l.background)) == dominant);
        self.scenes.lock().expect("scene memo").insert(path.clone(), t);
        Ok(t)
    }

    fn slot(&self, scene: Option<usize>, step: usize) -> Vec<&str> {
        match scene {
            Some(t) => {
                let l = &LEXICON[t];
                match step {
                    0 => l.roles[0].1.to_vec(),
                    1 => l.triggers.to_vec(),
                    2 => vec!["the"],
                    3 => l.roles[1].1.to_vec(),
                    _ => vec!["<end>"],
                }
            }
            None => match step {
                0 => vec!["the"],
                1 => vec!["weather"],
                2 => vec!["was"],
                3 => vec!["calm"],
                _ => vec!["<end>"],
            },
        }
    }
}

impl StepwiseCaptionModel for ToyCaptionModel {
    fn tag(&self) -> String {
        "toy-captioner-v1".into()
    }

    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn end_token(&self) -> usize {
        self.vocab.len() - 1
    }

    fn max_len(&self) -> usize {
        8
    }

    fn step_probs(&self, image: &ImageDoc, prefix: &[usize]) -> Result<Vec<f64>> {
        let scene = self.scene_type(image)?;
        let slot = self.slot(scene, prefix.len());
        let v = self.vocab.len() as f64;
        let mut p = vec![0.1 / v; self.vocab.len()];
        for w in &slot {
            p[self.index[*w]] += 0.9 / slot.len() as f64;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub train_docs: usize,
    pub heldout_docs: usize,
    pub image_size: u32,
    /// Probability that an event uses its ambiguous trigger.
    pub ambiguous_rate: f64,
    /// Probability that an event is depicted by an image.
    pub depicted_rate: f64,
    /// Probability that a document carries an event-less background image.
    pub background_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_docs: 50,
            heldout_docs: 10,
            image_size: 64,
            ambiguous_rate: 0.5,
            depicted_rate: 0.9,
            background_rate: 0.3,
        }
    }
}

struct PlannedImage {
    doc: ImageDoc,
    pixels: RgbImage,
}

/// Paints one photo of an event, adding its role boxes as visual arguments.
fn depict(
    lex: &EventLex,
    iid: &str,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
    image_dir: &Path,
    ev: &mut EventMention,
) -> PlannedImage {
    let mut objs = Vec::new();
    for (role, _) in lex.roles {
        let b = random_box(rng, cfg.image_size);
        objs.push((b.clone(), role_color(role)));
        ev.arguments.push(ArgumentMention::visual(role, iid, b));
    }
    let distractor = random_box(rng, cfg.image_size);
    // the distractor is painted first so role objects stay visible
    objs.insert(0, (distractor.clone(), DISTRACTOR));
    let pixels = render_scene(cfg.image_size, lex.background, &objs);
    ev.image_trigger = Some(iid.to_string());
    PlannedImage {
        doc: ImageDoc {
            id: iid.to_string(),
            source: ImageSource::File(image_dir.join(format!("{iid}.png"))),
            width: cfg.image_size,
            height: cfg.image_size,
            objects: vec![distractor.with_label("thing")],
            verb: Some(lex.verb.to_string()),
        },
        pixels,
    }
}

fn make_doc(
    id: &str,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
    image_dir: &Path,
) -> (MultimediaDocument, Vec<PlannedImage>) {
    let n_events = rng.random_range(1..=2);
    let mut sentences = Vec::new();
    let mut events = Vec::new();
    let mut images = Vec::new();
    let mut types_used = Vec::new();
    for e in 0..n_events {
        let t = loop {
            let t = rng.random_range(0..LEXICON.len());
            // co-occurring events never share an ambiguous trigger
            if !types_used
                .iter()
                .any(|&u: &usize| LEXICON[u].ambiguous == LEXICON[t].ambiguous)
            {
                break t;
            }
        };
        types_used.push(t);
        let lex = &LEXICON[t];
        let depicted = rng.random_bool(cfg.depicted_rate);
        // an ambiguous trigger is only resolvable when the event is depicted
        let trigger = if depicted && rng.random_bool(cfg.ambiguous_rate) {
            lex.ambiguous
        } else {
            lex.triggers.choose(rng).copied().expect("triggers")
        };
        let r1 = lex.roles[0].1.choose(rng).copied().expect("role words");
        let r2 = lex.roles[1].1.choose(rng).copied().expect("role words");
        let time = TIME_WORDS.choose(rng).copied().expect("time words");
        let sid = format!("s{}", sentences.len());
        let words: Vec<String> = [r1, trigger, "the", r2, time].iter().map(|w| w.to_string()).collect();
        sentences.push(Sentence {
            id: sid.clone(),
            words,
            entities: vec![
                EntitySpan {
                    start: 0,
                    end: 0,
                    entity_type: "ENT".into(),
                },
                EntitySpan {
                    start: 3,
                    end: 3,
                    entity_type: "ENT".into(),
                },
                EntitySpan {
                    start: 4,
                    end: 4,
                    entity_type: "TIME".into(),
                },
            ],
        });
        let span = |i: usize| TextSpan {
            sentence_id: sid.clone(),
            start: i,
            end: i,
        };
        let mut ev = EventMention::textual(lex.event_type, &sid, 1);
        ev.arguments.push(ArgumentMention::textual(lex.roles[0].0, span(0)));
        ev.arguments.push(ArgumentMention::textual(lex.roles[1].0, span(3)));

        if depicted {
            images.push(depict(lex, &format!("{id}-m{e}"), cfg, rng, image_dir, &mut ev));
        }
        events.push(ev);
    }
    if rng.random_bool(0.5) {
        let sid = format!("s{}", sentences.len());
        let time = TIME_WORDS.choose(rng).copied().expect("time words");
        let mut words: Vec<String> = NULL_WORDS.iter().map(|w| w.to_string()).collect();
        words.push(time.to_string());
        sentences.push(Sentence {
            id: sid,
            words,
            entities: vec![EntitySpan {
                start: 6,
                end: 6,
                entity_type: "TIME".into(),
            }],
        });
    }
    if rng.random_bool(cfg.background_rate) {
        let iid = format!("{id}-bg");
        let b = random_box(rng, cfg.image_size);
        let pixels = render_scene(cfg.image_size, NULL_BACKGROUND, &[(b.clone(), DISTRACTOR)]);
        images.push(PlannedImage {
            doc: ImageDoc {
                id: iid.clone(),
                source: ImageSource::File(image_dir.join(format!("{iid}.png"))),
                width: cfg.image_size,
                height: cfg.image_size,
                objects: vec![b.with_label("thing")],
                verb: None,
            },
            pixels,
        });
    }
    let doc = MultimediaDocument {
        id: id.to_string(),
        sentences,
        images: images.iter().map(|p| p.doc.clone()).collect(),
        gold_events: Some(events),
    };
    (doc, images)
}

/// Paths of everything [`write_world`] produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFiles {
    pub dir: PathBuf,
    pub ontology: PathBuf,
    pub train_docs: PathBuf,
    pub train_text: PathBuf,
    pub train_images: PathBuf,
    pub heldout_docs: PathBuf,
    pub detections: PathBuf,
    pub similarity: PathBuf,
    pub palette: PathBuf,
    pub config: PathBuf,
}

/// Documents of the synthetic world, with image paths under `image_dir`.
pub fn generate_world(
    cfg: &WorldConfig,
    image_dir: &Path,
) -> (
    Vec<MultimediaDocument>,
    Vec<MultimediaDocument>,
    Vec<(PathBuf, RgbImage)>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["world"]));
    let mut pixels = Vec::new();
    let mut make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|i| {
                let (doc, imgs) = make_doc(&format!("{prefix}{i:03}"), cfg, rng, image_dir);
                for p in imgs {
                    if let ImageSource::File(path) = &p.doc.source {
                        pixels.push((path.clone(), p.pixels));
                    }
                }
                doc
            })
            .collect::<Vec<_>>()
    };
    let train = make("train", cfg.train_docs, &mut rng);
    let heldout = make("heldout", cfg.heldout_docs, &mut rng);
    (train, heldout, pixels)
}

fn similarity_records(docs: &[MultimediaDocument]) -> Vec<SimilarityRecord> {
    let mut out = Vec::new();
    for d in docs {
        for s in &d.sentences {
            for m in &d.images {
                let linked = d.gold().iter().any(|e| {
                    e.image_trigger.as_deref() == Some(m.id.as_str())
                        && e.text_trigger.as_ref().is_some_and(|t| t.sentence_id == s.id)
                });
                out.push(SimilarityRecord {
                    doc_id: d.id.clone(),
                    sentence_id: s.id.clone(),
                    image_id: m.id.clone(),
                    score: if linked { 0.8 } else { 0.1 },
                });
            }
        }
    }
    out
}

fn detections(docs: &[MultimediaDocument]) -> BTreeMap<String, Vec<ObjectBox>> {
    let mut out = BTreeMap::new();
    for d in docs {
        for m in &d.images {
            let mut boxes: Vec<ObjectBox> = d
                .gold()
                .iter()
                .filter(|e| e.image_trigger.as_deref() == Some(m.id.as_str()))
                .flat_map(|e| e.arguments.iter())
                .flat_map(|a| a.visual_grounding.iter().flatten())
                .filter(|g| g.image_id == m.id)
                .map(|g| g.object.clone().with_label("object").with_score(0.9))
                .collect();
            boxes.extend(m.objects.iter().map(|o| o.clone().with_score(0.6)));
            out.insert(m.id.clone(), boxes);
        }
    }
    out
}

/// The run configuration shipped with the synthetic world. Learning rate and
/// batch sizes are scaled for a from-scratch toy model.
pub fn toy_config_toml(run_id: &str, seed: u64) -> String {
    format!(
        r#"run_id = "{run_id}"
seed = {seed}
out_dir = "runs"

[data]
ontology = "ontology.json"
text = "train_text.jsonl"
image = "train_images.jsonl"
eval = "heldout_docs.jsonl"
train_eval = "train_docs.jsonl"

[encoder]
d = 32
backend = "toy"

[model]
heads = 8
fusion_mode = "adapter"

[augmentation]
cache = "cache"
neg_k = 4
generator = "toy"
captioner = "toy"

[augmentation.generation]
images_per_event = 4
image_size = 64
denoise_steps = 100

[augmentation.nucleus]
p = 0.9
captions_per_image = 1

[optimizer]
lr = 0.002
batch_visual = 8
batch_text = 1

[merge]
threshold = 0.5
similarity = "similarity.jsonl"

[detector]
fixture = "detections.jsonl"
"#
    )
}

/// Writes the world under `dir`: ontology, documents (multimedia, text-only
/// and image-only views), images, detector and similarity fixtures, palette
/// and a ready-to-run config.
pub fn write_world(dir: &Path, cfg: &WorldConfig) -> Result<WorldFiles> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let (train, heldout, pixels) = generate_world(cfg, Path::new("images"));
    for (rel, img) in &pixels {
        let path = dir.join(rel);
        img.save(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    let files = WorldFiles {
        dir: dir.to_path_buf(),
        ontology: dir.join("ontology.json"),
        train_docs: dir.join("train_docs.jsonl"),
        train_text: dir.join("train_text.jsonl"),
        train_images: dir.join("train_images.jsonl"),
        heldout_docs: dir.join("heldout_docs.jsonl"),
        detections: dir.join("detections.jsonl"),
        similarity: dir.join("similarity.jsonl"),
        palette: dir.join("palette.json"),
        config: dir.join("config.toml"),
    };
    let write = |p: &Path, bytes: Vec<u8>| std::fs::write(p, bytes).map_err(|e| Error::io(p, e));
    write(&files.ontology, serde_json::to_vec_pretty(&toy_ontology())?)?;
    write(&files.palette, serde_json::to_vec_pretty(&palette())?)?;
    let records: Vec<_> = train.iter().map(to_multimedia_record).collect();
    write_jsonl(&files.train_docs, &records)?;
    write_jsonl(
        &files.train_text,
        &records.iter().map(|r| r.text_part()).collect::<Vec<_>>(),
    )?;
    write_jsonl(
        &files.train_images,
        &records.iter().flat_map(|r| r.image_parts()).collect::<Vec<_>>(),
    )?;
    write_jsonl(
        &files.heldout_docs,
        &heldout.iter().map(to_multimedia_record).collect::<Vec<_>>(),
    )?;
    let all: Vec<MultimediaDocument> = train.iter().chain(&heldout).cloned().collect();
    FixtureDetector::write(&files.detections, &detections(&all).into_iter().collect::<Vec<_>>())?;
    write_jsonl(&files.similarity, &similarity_records(&all))?;
    write(&files.config, toy_config_toml("toy", cfg.seed).into_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{nucleus_filter, CaptionRequest, CaptionerClient, NucleusCaptioner};

    #[test]
    fn palette_colors_are_bin_centers() {
        let p = palette();
        let mut bins: Vec<usize> = p
            .backgrounds
            .values()
            .chain(p.roles.values())
            .map(|c| color_bin(*c))
            .collect();
        bins.push(color_bin(p.null_background));
        bins.push(color_bin(p.distractor));
        for c in p.backgrounds.values().chain(p.roles.values()) {
            assert!(c.iter().all(|v| [32, 96, 160, 224].contains(v)));
        }
        let n = bins.len();
        bins.sort_unstable();
        bins.dedup();
        assert_eq!(bins.len(), n, "colours must fall into distinct bins");
    }

    #[test]
    fn ontology_is_valid() {
        toy_ontology().validate().unwrap();
    }

    #[test]
    fn generator_paints_the_voted_type() {
        let img = ToyImageGenerator::paint("police took the suspect", 32, 1);
        let bg = LEXICON[2].background;
        let count = img.pixels().filter(|p| p.0 == bg).count();
        assert!(count > 0);
        let amb = ToyImageGenerator::paint("took", 32, 1);
        assert!(amb.pixels().all(|p| p.0 == NULL_BACKGROUND || p.0 == DISTRACTOR));
        assert!(amb.pixels().any(|p| p.0 == NULL_BACKGROUND));
        assert_eq!(ToyImageGenerator::paint("police took the suspect", 32, 1), img);
    }

    #[test]
    fn caption_describes_scene() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        render_scene(32, LEXICON[0].background, &[]).save(&path).unwrap();
        let doc = ImageDoc {
            id: "a".into(),
            source: ImageSource::File(path),
            width: 32,
            height: 32,
            objects: vec![],
            verb: None,
        };
        let model = ToyCaptionModel::new();
        let p = model.step_probs(&doc, &[]).unwrap();
        let nucleus = nucleus_filter(&p, 0.9).unwrap();
        assert_eq!(nucleus.indices.len(), 3);
        let cap = NucleusCaptioner { model }
            .caption(
                &doc,
                &CaptionRequest {
                    image_ref: "a".into(),
                    p: 0.9,
                    seed: 3,
                },
            )
            .unwrap();
        let words: Vec<&str> = cap.split(' ').collect();
        assert_eq!(words.len(), 4);
        assert!(LEXICON[0].triggers.contains(&words[1]));
    }

    #[test]
    fn world_is_deterministic_and_valid() {
        let cfg = WorldConfig::default();
        let (a, h, _) = generate_world(&cfg, Path::new("images"));
        let (b, _, _) = generate_world(&cfg, Path::new("images"));
        assert_eq!(a, b);
        assert_eq!((a.len(), h.len()), (50, 10));
        for d in a.iter().chain(&h) {
            assert!(crate::data_model::validate_document(d).is_empty(), "{:?}", d.id);
        }
        let ambiguous = a
            .iter()
            .flat_map(|d| d.gold().iter().map(move |e| (d, e)))
            .filter(|(d, e)| {
                let t = e.text_trigger.as_ref().unwrap();
                let s = d.sentence(&t.sentence_id).unwrap();
                ["took", "struck"].contains(&s.words[t.index].as_str())
            })
            .count();
        assert!(ambiguous > 0);
    }

    #[test]
    fn ambiguous_triggers_are_resolvable_from_the_document() {
        let (a, h, _) = generate_world(&WorldConfig::default(), Path::new("images"));
        for d in a.iter().chain(&h) {
            let types: Vec<usize> = d
                .gold()
                .iter()
                .map(|e| LEXICON.iter().position(|l| l.event_type == e.event_type).unwrap())
                .collect();
            for (i, &t) in types.iter().enumerate() {
                for &u in &types[i + 1..] {
                    assert_ne!(LEXICON[t].ambiguous, LEXICON[u].ambiguous, "{}", d.id);
                }
            }
            for e in d.gold() {
                let t = e.text_trigger.as_ref().unwrap();
                if ["took", "struck"].contains(&d.sentence(&t.sentence_id).unwrap().words[t.index].as_str()) {
                    assert!(e.image_trigger.is_some(), "{}", d.id);
                }
            }
        }
    }
}
