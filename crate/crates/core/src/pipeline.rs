//! End-to-end orchestration behind the CLI: augmentation, training-data
//! assembly, training, prediction, evaluation, sweeps and reports. Every
//! command writes a JSON manifest next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{
    assemble_text_batch, extract_event_prompt, generate_caption, generate_images, AugmentationCache, CaptionerClient,
    CrossSentencePolicy, GeneratedImagePool, ImageGeneratorClient, NucleusCaptioner, Origin, PoolEntry,
    CAPTION_MODALITY, IMAGE_MODALITY,
};
use crate::clients::{CommandClient, RetryPolicy};
use crate::config::{ClientSpec, LoadedConfig};
use crate::coref_eval::{
    emit_report, emit_sweep, read_predictions, score, score_corpus, sweep, FixtureScorer, MatchConfig,
    PredictionRecord, ReportFormat, ScoreReport, SimilarityScorer, SweepResult,
};
use crate::data_model::{
    load_image_dataset, load_multimedia_dataset, load_text_dataset, write_jsonl, EventMention, ImageDoc, ImageSource,
    LabelSpace, MultimediaDocument, Ontology, Sentence,
};
use crate::encoders::{
    FeatureArchive, PrecomputedImageBackend, PrecomputedTextBackend, ToyImageBackend, ToyTextBackend,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, Task};
use crate::heads::FusionSetting;
use crate::model::{DocPrediction, Example, FeatureStore, Model, ModelBundle};
use crate::objects::{DetectionCache, FixtureDetector, ObjectDetectorClient};
use crate::seeds::{derive_seed, sha256_file};
use crate::synth::{ToyCaptionModel, ToyImageGenerator};
use crate::trainer::{
    self, plan_for, Ablation, BundlePaths, Checkpoint, StagePlan, SubstageRecord, TrainData, TrainSettings,
};

pub fn build_generator(spec: &ClientSpec) -> Box<dyn ImageGeneratorClient> {
    match spec {
        ClientSpec::Builtin(_) => Box::new(ToyImageGenerator),
        ClientSpec::Command { program, args, tag } => Box::new(CommandClient::new(program, args.clone(), tag)),
    }
}

pub fn build_captioner(spec: &ClientSpec) -> Box<dyn CaptionerClient> {
    match spec {
        ClientSpec::Builtin(_) => Box::new(NucleusCaptioner {
            model: ToyCaptionModel::new(),
        }),
        ClientSpec::Command { program, args, tag } => Box::new(CommandClient::new(program, args.clone(), tag)),
    }
}

pub fn build_detector(cfg: &LoadedConfig) -> Result<Option<Box<dyn ObjectDetectorClient>>> {
    let d = &cfg.config.detector;
    if let Some(f) = &d.fixture {
        return Ok(Some(Box::new(FixtureDetector::load(&cfg.resolve(f))?)));
    }
    Ok(match &d.command {
        Some(ClientSpec::Command { program, args, tag }) => {
            Some(Box::new(CommandClient::new(program, args.clone(), tag)))
        }
        _ => None,
    })
}

/// The configured similarity fixture; without one every lookup fails.
pub fn build_scorer(cfg: &LoadedConfig) -> Result<FixtureScorer> {
    match &cfg.config.merge.similarity {
        Some(p) => FixtureScorer::load(&cfg.resolve(p)),
        None => Ok(FixtureScorer::default()),
    }
}

pub fn feature_store(cfg: &LoadedConfig) -> Result<FeatureStore> {
    let c = &cfg.config;
    let enc = c.encoder.clone();
    match enc.backend.as_str() {
        "precomputed" => {
            let text = FeatureArchive::read(&cfg.resolve(c.data.text_features.as_ref().expect("validated")))?;
            let image = FeatureArchive::read(&cfg.resolve(c.data.image_features.as_ref().expect("validated")))?;
            Ok(FeatureStore::new(
                Box::new(PrecomputedTextBackend { archive: text }),
                Box::new(PrecomputedImageBackend {
                    archive: image,
                    fallback: None,
                }),
                enc,
            ))
        }
        _ => Ok(FeatureStore::new(
            Box::new(ToyTextBackend::new(derive_seed(c.seed, &["toy-text"]), enc.d)),
            Box::new(ToyImageBackend::new(derive_seed(c.seed, &["toy-image"]), enc.d)),
            enc,
        )),
    }
}

/// Training inputs: the ontology and both unimodal datasets.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub ontology: Ontology,
    pub labels: LabelSpace,
    pub text_docs: Vec<MultimediaDocument>,
    pub image_docs: Vec<MultimediaDocument>,
}

pub fn load_corpus(cfg: &LoadedConfig) -> Result<Corpus> {
    let d = &cfg.config.data;
    let ontology = Ontology::load(&cfg.resolve(&d.ontology))?;
    let opts = d.load_options();
    let text_docs = load_text_dataset(&cfg.resolve(&d.text), &ontology, opts)?;
    let image_docs = load_image_dataset(&cfg.resolve(&d.image), &ontology, opts)?;
    let labels = ontology.labels(d.train_ontology);
    Ok(Corpus {
        ontology,
        labels,
        text_docs,
        image_docs,
    })
}

fn input_hashes(cfg: &LoadedConfig) -> Result<BTreeMap<String, String>> {
    let d = &cfg.config.data;
    let mut out = BTreeMap::new();
    let mut add = |name: &str, p: Option<&PathBuf>| -> Result<()> {
        if let Some(p) = p {
            out.insert(name.to_string(), sha256_file(&cfg.resolve(p))?);
        }
        Ok(())
    };
    add("ontology", Some(&d.ontology))?;
    add("text", Some(&d.text))?;
    add("image", Some(&d.image))?;
    add("eval", d.eval.as_ref())?;
    add("train_eval", d.train_eval.as_ref())?;
    add("similarity", cfg.config.merge.similarity.as_ref())?;
    add("detections", cfg.config.detector.fixture.as_ref())?;
    Ok(out)
}

fn write_manifest<T: Serialize>(path: &Path, m: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(m)?).map_err(|e| Error::io(path, e))
}

fn retry(cfg: &LoadedConfig) -> RetryPolicy {
    RetryPolicy {
        retries: cfg.config.augmentation.retries,
        ..RetryPolicy::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Text2Img,
    Img2Txt,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text2img" => Ok(Self::Text2Img),
            "img2txt" => Ok(Self::Img2Txt),
            _ => Err(Error::Config(format!("unknown direction `{s}` (text2img or img2txt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub directions: Vec<Direction>,
    pub generator_tag: String,
    pub captioner_tag: String,
    pub images: usize,
    pub captions: usize,
    pub cache_writes: usize,
    pub cache: PathBuf,
}

/// Fills the augmentation cache: images for every textual training event,
/// captions for every training image.
pub fn augment(cfg: &LoadedConfig, directions: &[Direction], cache_dir: Option<&Path>) -> Result<AugmentManifest> {
    let corpus = load_corpus(cfg)?;
    let aug = &cfg.config.augmentation;
    let cache_root = cache_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.resolve(&aug.cache));
    let cache = AugmentationCache::open(&cache_root)?;
    let generator = build_generator(&aug.generator);
    let captioner = build_captioner(&aug.captioner);
    let (mut images, mut captions) = (0, 0);
    if directions.contains(&Direction::Text2Img) {
        for doc in &corpus.text_docs {
            for (ei, ev) in doc.gold().iter().enumerate() {
                let Some(trig) = &ev.text_trigger else { continue };
                let s = doc
                    .sentence(&trig.sentence_id)
                    .ok_or_else(|| Error::Contract(format!("unknown sentence in {}", doc.id)))?;
                let prompt = extract_event_prompt(s, ev, CrossSentencePolicy::Exclude)?;
                let origin = Origin {
                    dataset: "text".into(),
                    record_id: doc.id.clone(),
                    event_index: ei,
                };
                images += generate_images(
                    &prompt,
                    &origin,
                    &aug.generation,
                    generator.as_ref(),
                    &cache,
                    retry(cfg),
                )?
                .len();
            }
        }
    }
    if directions.contains(&Direction::Img2Txt) {
        for doc in &corpus.image_docs {
            for img in &doc.images {
                let origin = Origin {
                    dataset: "image".into(),
                    record_id: doc.id.clone(),
                    event_index: 0,
                };
                captions += generate_caption(img, &origin, &aug.nucleus, captioner.as_ref(), &cache, retry(cfg))?.len();
            }
        }
    }
    let manifest = AugmentManifest {
        command: "augment".into(),
        run_id: cfg.config.run_id.clone(),
        config_hash: cfg.hash.clone(),
        inputs: input_hashes(cfg)?,
        directions: directions.to_vec(),
        generator_tag: generator.tag(),
        captioner_tag: captioner.tag(),
        images,
        captions,
        cache_writes: cache.writes(),
        cache: cache_root.clone(),
    };
    write_manifest(&cfg.run_dir().join("augment-manifest.json"), &manifest)?;
    Ok(manifest)
}

fn missing(what: String) -> Error {
    Error::MissingCache { what }
}

/// Generated images per textual event, read from the cache only.
fn image_pool(cfg: &LoadedConfig, corpus: &Corpus, cache: &AugmentationCache, tag: &str) -> Result<GeneratedImagePool> {
    let gen = &cfg.config.augmentation.generation;
    let mut entries = Vec::new();
    for doc in &corpus.text_docs {
        for (ei, ev) in doc.gold().iter().enumerate() {
            let Some(trig) = &ev.text_trigger else { continue };
            let Some(s) = doc.sentence(&trig.sentence_id) else {
                continue;
            };
            let prompt = extract_event_prompt(s, ev, CrossSentencePolicy::Exclude)?;
            let key = AugmentationCache::key(IMAGE_MODALITY, &prompt.text, gen, tag);
            let sc = cache
                .lookup(IMAGE_MODALITY, &key)?
                .ok_or_else(|| missing(format!("images for prompt {:?} (document {})", prompt.text, doc.id)))?;
            entries.push(PoolEntry {
                doc_id: doc.id.clone(),
                event_index: ei,
                images: cache.image_paths(&sc),
            });
        }
    }
    Ok(GeneratedImagePool::new(entries))
}

fn captions(
    cfg: &LoadedConfig,
    corpus: &Corpus,
    cache: &AugmentationCache,
    tag: &str,
) -> Result<Vec<(String, Vec<String>)>> {
    let nuc = &cfg.config.augmentation.nucleus;
    let mut out = Vec::new();
    for doc in &corpus.image_docs {
        for img in &doc.images {
            let key = AugmentationCache::key(CAPTION_MODALITY, &img.id, nuc, tag);
            let sc = cache
                .lookup(CAPTION_MODALITY, &key)?
                .ok_or_else(|| missing(format!("captions for image {}", img.id)))?;
            out.push((img.id.clone(), sc.payloads));
        }
    }
    Ok(out)
}

fn generated_image(path: &Path, size: u32) -> ImageDoc {
    ImageDoc {
        id: path.display().to_string(),
        source: ImageSource::File(path.to_path_buf()),
        width: size,
        height: size,
        objects: Vec::new(),
        verb: None,
    }
}

fn caption_sentence(image_id: &str, j: usize, text: &str) -> Sentence {
    Sentence {
        id: format!("caption:{image_id}:{j}"),
        words: text.split_whitespace().map(str::to_string).collect(),
        entities: Vec::new(),
    }
}

/// Cross-modal context of every training sentence and image. Without a
/// cache (no augmentation) every context is empty.
#[derive(Debug, Clone, Default)]
pub struct TrainingContexts {
    /// Keyed by `(doc id, sentence id)`.
    pub text: BTreeMap<(String, String), Vec<ImageDoc>>,
    /// Keyed by image id.
    pub visual: BTreeMap<String, Vec<Sentence>>,
}

impl TrainingContexts {
    fn text_for(&self, doc: &str, sentence: &str) -> Vec<ImageDoc> {
        self.text
            .get(&(doc.to_string(), sentence.to_string()))
            .cloned()
            .unwrap_or_default()
    }

    fn visual_for(&self, image: &str) -> Vec<Sentence> {
        self.visual.get(image).cloned().unwrap_or_default()
    }
}

/// Reads the cache only; a missing entry is a [`Error::MissingCache`].
pub fn training_contexts(
    cfg: &LoadedConfig,
    corpus: &Corpus,
    cache: Option<&AugmentationCache>,
) -> Result<TrainingContexts> {
    let mut out = TrainingContexts::default();
    let Some(cache) = cache else { return Ok(out) };
    let aug = &cfg.config.augmentation;
    let seed = cfg.config.seed;
    let pool = image_pool(cfg, corpus, cache, &build_generator(&aug.generator).tag())?;
    let size = aug.generation.image_size;
    for doc in &corpus.text_docs {
        for s in doc.sentences.iter().filter(|s| !s.is_empty()) {
            let images = assemble_text_batch(doc, &s.id, &pool, aug.neg_k, seed)?
                .images()
                .map(|p| generated_image(p, size))
                .collect();
            out.text.insert((doc.id.clone(), s.id.clone()), images);
        }
    }

    let all = captions(cfg, corpus, cache, &build_captioner(&aug.captioner).tag())?;
    for (image_id, own) in &all {
        let mut ctx: Vec<Sentence> = own
            .iter()
            .enumerate()
            .map(|(j, c)| caption_sentence(image_id, j, c))
            .collect();
        let others: Vec<(&str, usize, &str)> = all
            .iter()
            .filter(|(id, _)| id != image_id)
            .flat_map(|(id, cs)| cs.iter().enumerate().map(move |(j, c)| (id.as_str(), j, c.as_str())))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["caption-negatives", image_id]));
        let mut picked = sample(&mut rng, others.len(), aug.neg_k.min(others.len())).into_vec();
        picked.sort_unstable();
        for i in picked {
            let (id, j, c) = others[i];
            ctx.push(caption_sentence(id, j, c));
        }
        ctx.retain(|s| !s.is_empty());
        out.visual.insert(image_id.clone(), ctx);
    }
    Ok(out)
}

/// Builds the four example sets. With `cache = None` (no augmentation) every
/// context is empty and nothing is read from the cache.
pub fn build_train_data(cfg: &LoadedConfig, corpus: &Corpus, cache: Option<&AugmentationCache>) -> Result<TrainData> {
    Ok(examples_from(corpus, &training_contexts(cfg, corpus, cache)?))
}

pub fn examples_from(corpus: &Corpus, ctxs: &TrainingContexts) -> TrainData {
    let labels = &corpus.labels;
    let mut data = TrainData::default();
    for doc in &corpus.text_docs {
        for s in doc.sentences.iter().filter(|s| !s.is_empty()) {
            let context = ctxs.text_for(&doc.id, &s.id);
            let mut word_labels = vec![0; s.len()];
            for ev in doc.gold() {
                let Some(t) = ev.text_trigger.as_ref().filter(|t| t.sentence_id == s.id) else {
                    continue;
                };
                let Some(cls) = labels.event_index(&ev.event_type) else {
                    continue;
                };
                if t.index < s.len() {
                    word_labels[t.index] = cls;
                }
                let items = s
                    .entities
                    .iter()
                    .map(|ent| {
                        let role = ev
                            .arguments
                            .iter()
                            .find(|a| {
                                a.text_grounding
                                    .as_ref()
                                    .is_some_and(|g| g.sentence_id == s.id && g.start == ent.start && g.end == ent.end)
                            })
                            .and_then(|a| labels.role_index(&a.role))
                            .unwrap_or(0);
                        (ent.start, role)
                    })
                    .collect::<Vec<_>>();
                if !items.is_empty() {
                    data.by_task
                        .entry(Task::TextArgument)
                        .or_default()
                        .push(Example::TextArgument {
                            sentence: s.clone(),
                            trigger: t.index,
                            event_class: cls,
                            context: context.clone(),
                            items,
                        });
                }
            }
            data.by_task
                .entry(Task::TextMention)
                .or_default()
                .push(Example::TextMention {
                    sentence: s.clone(),
                    context,
                    labels: word_labels,
                });
        }
    }

    for doc in &corpus.image_docs {
        for img in &doc.images {
            let context = ctxs.visual_for(&img.id);
            let ev = doc
                .gold()
                .iter()
                .find(|e| e.image_trigger.as_deref() == Some(img.id.as_str()));
            let cls = ev.and_then(|e| labels.event_index(&e.event_type)).unwrap_or(0);
            data.by_task
                .entry(Task::VisualMention)
                .or_default()
                .push(Example::VisualMention {
                    image: img.clone(),
                    context: context.clone(),
                    label: cls,
                });
            if let (Some(ev), true) = (ev, cls > 0) {
                let mut items = Vec::new();
                for a in &ev.arguments {
                    let Some(role) = labels.role_index(&a.role) else {
                        continue;
                    };
                    for g in a.visual_grounding.iter().flatten().filter(|g| g.image_id == img.id) {
                        items.push((g.object.clone(), role));
                    }
                }
                for o in &img.objects {
                    if !items.iter().any(|(b, _)| b == o) {
                        items.push((o.clone(), 0));
                    }
                }
                if !items.is_empty() {
                    data.by_task
                        .entry(Task::VisualArgument)
                        .or_default()
                        .push(Example::VisualArgument {
                            image: img.clone(),
                            event_class: cls,
                            context,
                            items,
                        });
                }
            }
        }
    }
    data
}

/// Mention scores on the training examples exactly as the model saw them:
/// each sentence with its generated-image context, each image with its
/// caption context. Arguments are not predicted, so only the mention rows
/// are meaningful.
pub fn training_set_report(
    corpus: &Corpus,
    ctxs: &TrainingContexts,
    model: &Model,
    feats: &FeatureStore,
    matching: &MatchConfig,
) -> Result<ScoreReport> {
    let mut report = ScoreReport::default();
    for doc in &corpus.text_docs {
        let mut pred = DocPrediction {
            doc_id: doc.id.clone(),
            text_events: Vec::new(),
            visual_events: Vec::new(),
        };
        for s in doc.sentences.iter().filter(|s| !s.is_empty()) {
            let view = MultimediaDocument {
                id: doc.id.clone(),
                sentences: vec![s.clone()],
                images: ctxs.text_for(&doc.id, &s.id),
                gold_events: None,
            };
            pred.text_events
                .extend(model.predict_mentions(&view, feats)?.text_events);
        }
        report = report.add(&score(doc.gold(), &pred.text_events, matching));
    }
    for doc in &corpus.image_docs {
        for img in &doc.images {
            let view = MultimediaDocument {
                id: doc.id.clone(),
                sentences: ctxs.visual_for(&img.id),
                images: vec![img.clone()],
                gold_events: None,
            };
            let p = model.predict_mentions(&view, feats)?;
            let gold: Vec<EventMention> = doc
                .gold()
                .iter()
                .filter(|e| e.image_trigger.as_deref() == Some(img.id.as_str()))
                .cloned()
                .collect();
            report = report.add(&score(&gold, &p.visual_events, matching));
        }
    }
    Ok(report)
}

/// Fusion behaviour for a run.
pub fn setting_for(cfg: &LoadedConfig, ablation: Option<Ablation>) -> FusionSetting {
    match ablation {
        Some(Ablation::NoAugmentation) => FusionSetting::Bypass,
        Some(Ablation::NoAdapter) => FusionSetting::Cosine,
        _ => match cfg.config.model.fusion_mode {
            FusionMode::Adapter => FusionSetting::Adapter,
            FusionMode::Cosine => FusionSetting::Cosine,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub ablation: Option<Ablation>,
    pub fusion_mode: FusionMode,
    pub setting: FusionSetting,
    pub stages: Vec<usize>,
    pub plan: Vec<StagePlan>,
    pub substages: Vec<SubstageRecord>,
    pub examples: BTreeMap<String, usize>,
    pub cache_reads: usize,
    pub generator_tag: Option<String>,
    pub captioner_tag: Option<String>,
    pub encoder_tags: (String, String),
    pub bundle: BundlePaths,
    /// Mention scores of the final mention model on its own training examples.
    pub training_report: ScoreReport,
    pub dir: PathBuf,
}

pub fn train_dir_name(ablation: Option<Ablation>) -> String {
    format!("train-{}", ablation.map_or("full", |a| a.name()))
}

/// Trains under the configured schedule (or an ablation), optionally stopping
/// after stage `stage`. Checkpoints, the training log and `manifest.json` go
/// to `<run dir>/train-<full|ablation>/`.
pub fn train(cfg: &LoadedConfig, ablation: Option<Ablation>, stage: Option<usize>) -> Result<TrainManifest> {
    let corpus = load_corpus(cfg)?;
    let feats = feature_store(cfg)?;
    let setting = setting_for(cfg, ablation);
    let augmented = setting != FusionSetting::Bypass;
    let cache = if augmented {
        let root = cfg.resolve(&cfg.config.augmentation.cache);
        if !root.exists() {
            return Err(missing(format!("cache directory {}", root.display())));
        }
        Some(AugmentationCache::open(root)?)
    } else {
        None
    };
    let ctxs = training_contexts(cfg, &corpus, cache.as_ref())?;
    let data = examples_from(&corpus, &ctxs);

    let mut plan = plan_for(ablation, &cfg.config.schedule);
    if let Some(n) = stage {
        if !plan.iter().any(|s| s.stage == n) {
            return Err(Error::Config(format!("the plan has no stage {n}")));
        }
        plan.retain(|s| s.stage <= n);
    }
    let mut model_cfg = cfg.model_config();
    if ablation == Some(Ablation::NoAdapter) {
        model_cfg.fusion_mode = FusionMode::Cosine;
    }
    let model = Model::new(
        model_cfg.clone(),
        corpus.labels.clone(),
        feats.text.base_dim(),
        feats.image.base_dim(),
        setting,
        cfg.config.seed,
    )?;
    let dir = cfg.run_dir().join(train_dir_name(ablation));
    let settings = TrainSettings {
        optimizer: cfg.optimizer_config(),
        out_dir: &dir,
        config_hash: cfg.hash.clone(),
    };
    let outcome = trainer::train(&plan, &data, model, &feats, &settings)?;
    let training_report = training_set_report(&corpus, &ctxs, &outcome.bundle.mention, &feats, &cfg.config.matching)?;
    let aug = &cfg.config.augmentation;
    let manifest = TrainManifest {
        command: "train".into(),
        run_id: cfg.config.run_id.clone(),
        config_hash: cfg.hash.clone(),
        seed: cfg.config.seed,
        inputs: input_hashes(cfg)?,
        ablation,
        fusion_mode: model_cfg.fusion_mode,
        setting,
        stages: plan.iter().map(|s| s.stage).collect(),
        plan,
        substages: outcome.records,
        examples: data
            .by_task
            .iter()
            .map(|(t, v)| (t.name().to_string(), v.len()))
            .collect(),
        cache_reads: cache.as_ref().map_or(0, |c| c.reads()),
        generator_tag: augmented.then(|| build_generator(&aug.generator).tag()),
        captioner_tag: augmented.then(|| build_captioner(&aug.captioner).tag()),
        encoder_tags: feats.tags(),
        bundle: outcome.paths,
        training_report,
        dir: dir.clone(),
    };
    write_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A bundle file (`bundle.json`) or a single checkpoint used for every task.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let paths: BundlePaths = serde_json::from_slice(&text)?;
        paths.load()
    } else {
        Ok(ModelBundle::single(Checkpoint::load(path)?.model))
    }
}

pub fn predict_docs(
    cfg: &LoadedConfig,
    bundle: &ModelBundle,
    docs: &[MultimediaDocument],
    feats: &FeatureStore,
) -> Result<Vec<DocPrediction>> {
    let detector = build_detector(cfg)?;
    let dcfg = cfg.detector_config();
    let dcache = DetectionCache::in_memory();
    docs.iter()
        .map(|d| bundle.predict_document(d, feats, detector.as_deref().map(|c| (c, &dcfg, &dcache))))
        .collect()
}

pub fn load_eval_docs(cfg: &LoadedConfig, path: &Path) -> Result<Vec<MultimediaDocument>> {
    let d = &cfg.config.data;
    let ont = Ontology::load(&cfg.resolve(&d.ontology))?;
    load_multimedia_dataset(path, &ont, d.load_options())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictManifest {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub input_hash: String,
    pub output: PathBuf,
    pub documents: usize,
    pub detector_tag: Option<String>,
    pub encoder_tags: (String, String),
}

/// Writes unmerged predictions (JSON lines) and `<out>.manifest.json`.
pub fn predict(cfg: &LoadedConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<PredictManifest> {
    let bundle = load_bundle(checkpoint)?;
    let feats = feature_store(cfg)?;
    let docs = load_eval_docs(cfg, input)?;
    let preds = predict_docs(cfg, &bundle, &docs, &feats)?;
    write_jsonl(out, &preds)?;
    let manifest = PredictManifest {
        command: "predict".into(),
        run_id: cfg.config.run_id.clone(),
        config_hash: cfg.hash.clone(),
        checkpoint: checkpoint.to_path_buf(),
        input: input.to_path_buf(),
        input_hash: sha256_file(input)?,
        output: out.to_path_buf(),
        documents: preds.len(),
        detector_tag: build_detector(cfg)?.map(|d| d.tag()),
        encoder_tags: feats.tags(),
    };
    write_manifest(&sidecar_path(out), &manifest)?;
    Ok(manifest)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub command: String,
    pub run_id: String,
    pub label: String,
    pub config_hash: String,
    pub gold: PathBuf,
    pub gold_hash: String,
    pub predictions: PathBuf,
    pub predictions_hash: String,
    pub threshold: f64,
    pub scorer_tag: String,
    pub report: ScoreReport,
}

pub fn evaluate(
    cfg: &LoadedConfig,
    gold: &[MultimediaDocument],
    preds: &[PredictionRecord],
    threshold: Option<f64>,
) -> Result<ScoreReport> {
    let scorer = build_scorer(cfg)?;
    let mut merge = cfg.merge_config();
    if let Some(t) = threshold {
        merge.threshold = t;
    }
    merge.validate()?;
    score_corpus(gold, preds, &scorer, &merge, &cfg.config.matching)
}

/// Scores a prediction file, writing the JSON report and its manifest
/// (`<report>.manifest.json`) when `report_path` is given.
pub fn eval(
    cfg: &LoadedConfig,
    gold_path: &Path,
    pred_path: &Path,
    threshold: Option<f64>,
    report_path: Option<&Path>,
    label: Option<&str>,
) -> Result<EvalManifest> {
    let gold = load_eval_docs(cfg, gold_path)?;
    let preds = read_predictions(pred_path)?;
    let report = evaluate(cfg, &gold, &preds, threshold)?;
    let manifest = EvalManifest {
        command: "eval".into(),
        run_id: cfg.config.run_id.clone(),
        label: label.unwrap_or(&cfg.config.run_id).to_string(),
        config_hash: cfg.hash.clone(),
        gold: gold_path.to_path_buf(),
        gold_hash: sha256_file(gold_path)?,
        predictions: pred_path.to_path_buf(),
        predictions_hash: sha256_file(pred_path)?,
        threshold: threshold.unwrap_or(cfg.config.merge.threshold),
        scorer_tag: build_scorer(cfg)?.tag(),
        report,
    };
    if let Some(p) = report_path {
        write_manifest(p, &report)?;
        write_manifest(&sidecar_path(p), &manifest)?;
    }
    Ok(manifest)
}

pub fn run_sweep(cfg: &LoadedConfig, gold_path: &Path, pred_path: &Path, grid: &[f64]) -> Result<SweepResult> {
    let gold = load_eval_docs(cfg, gold_path)?;
    let preds = read_predictions(pred_path)?;
    let scorer = build_scorer(cfg)?;
    sweep(grid, &gold, &preds, &scorer, &cfg.merge_config(), &cfg.config.matching)
}

pub fn render_sweep(result: &SweepResult) -> String {
    emit_sweep(result)
}

/// One eval manifest: the six-row table. Several: one row per run with the
/// six F1 columns.
pub fn render_report(manifests: &[EvalManifest]) -> Result<String> {
    match manifests {
        [] => Err(Error::Config("report needs at least one eval manifest".into())),
        [one] => emit_report(&one.report, ReportFormat::Table),
        many => {
            let mut s = format!(
                "{:<20}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
                "run", "T-men", "T-arg", "V-men", "V-arg", "M-men", "M-arg"
            );
            for m in many {
                let r = &m.report;
                s.push_str(&format!("{:<20}", m.label));
                for (_, _, p) in r.rows() {
                    s.push_str(&format!("{:>8}", crate::coref_eval::pct(p.f1)));
                }
                s.push('\n');
            }
            Ok(s)
        }
    }
}

pub fn read_eval_manifest(path: &Path) -> Result<EvalManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Predicts and scores documents in memory.
pub fn score_bundle(
    cfg: &LoadedConfig,
    bundle: &ModelBundle,
    docs: &[MultimediaDocument],
    feats: &FeatureStore,
) -> Result<ScoreReport> {
    let preds: Vec<PredictionRecord> = predict_docs(cfg, bundle, docs, feats)?
        .into_iter()
        .map(PredictionRecord::Unmerged)
        .collect();
    evaluate(cfg, docs, &preds, None)
}
