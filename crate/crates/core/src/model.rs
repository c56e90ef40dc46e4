//! The full extraction model: two encoders, the adapter and the four heads,
//! plus per-example loss/gradient computation and document prediction.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    ArgumentMention, EventMention, ImageDoc, LabelSpace, MultimediaDocument, ObjectBox, Sentence, TextSpan,
};
use crate::encoders::{
    to_canonical_box, EncoderConfig, EncoderParams, ImageBackend, ImageFeatures, TextBackend, TextFeatures,
};
use crate::error::{Error, Result};
use crate::fusion::{AdapterParams, FusionContext, FusionMode, Task};
use crate::heads::{decide, object_patch_indices, ClassifierParams, FusionHeads, FusionSetting, PreparedContext};
use crate::objects::{detect, DetectionCache, DetectorConfig, ObjectDetectorClient};
use crate::seeds::derive_seed;
use crate::tensor::{add_into, cross_entropy, join, softmax, Matrix, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: usize,
    pub fusion_mode: FusionMode,
    /// Restrict argument roles to those valid for the event type.
    pub mask_roles: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            heads: 8,
            fusion_mode: FusionMode::Adapter,
            mask_roles: false,
        }
    }
}

pub const TEXT_ENCODER: &str = "text_encoder";
pub const IMAGE_ENCODER: &str = "image_encoder";
pub const ADAPTER_SHARED: &str = "adapter_shared";

pub fn adapter_task_group(t: Task) -> String {
    format!("adapter_task.{}", t.name())
}

pub fn head_group(t: Task) -> String {
    format!("head.{}", t.name())
}

/// Every parameter group, in a fixed order.
pub fn all_groups() -> Vec<String> {
    let mut g = vec![
        TEXT_ENCODER.to_string(),
        IMAGE_ENCODER.to_string(),
        ADAPTER_SHARED.to_string(),
    ];
    g.extend(Task::ALL.iter().map(|&t| adapter_task_group(t)));
    g.extend(Task::ALL.iter().map(|&t| head_group(t)));
    g
}

/// Group a parameter tensor belongs to, from its dotted name.
pub fn group_of(param: &str) -> String {
    if param.starts_with("text_encoder.") {
        return TEXT_ENCODER.into();
    }
    if param.starts_with("image_encoder.") {
        return IMAGE_ENCODER.into();
    }
    for t in Task::ALL {
        if param.starts_with(&format!("adapter.task.{}.", t.name())) {
            return adapter_task_group(t);
        }
        if param.starts_with(&format!("head.{}.", t.name())) {
            return head_group(t);
        }
    }
    ADAPTER_SHARED.into()
}

/// Groups whose parameters a task's loss can reach.
pub fn groups_touched_by(task: Task, setting: FusionSetting) -> Vec<String> {
    let mut g = vec![TEXT_ENCODER.to_string(), IMAGE_ENCODER.to_string()];
    if setting == FusionSetting::Adapter {
        g.push(ADAPTER_SHARED.into());
        g.push(adapter_task_group(task));
    }
    g.push(head_group(task));
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub text_encoder: EncoderParams,
    pub image_encoder: EncoderParams,
    pub fusion: FusionHeads,
    pub labels: LabelSpace,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        labels: LabelSpace,
        text_base_dim: usize,
        image_base_dim: usize,
        setting: FusionSetting,
        seed: u64,
    ) -> Result<Self> {
        config.encoder.validate()?;
        let d = config.encoder.d;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["model-init"]));
        let text_encoder = EncoderParams::new(text_base_dim, d, &mut rng);
        let image_encoder = EncoderParams::new(image_base_dim, d, &mut rng);
        let adapter = AdapterParams::new(d, config.heads, &mut rng)?;
        let classifiers = ClassifierParams::new(d, labels.num_events(), labels.num_roles(), &mut rng);
        Ok(Self {
            text_encoder,
            image_encoder,
            fusion: FusionHeads {
                adapter,
                classifiers,
                setting,
            },
            labels,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            text_encoder: self.text_encoder.zeros_like(),
            image_encoder: self.image_encoder.zeros_like(),
            fusion: self.fusion.zeros_like(),
            labels: self.labels.clone(),
            config: self.config.clone(),
        }
    }

    pub fn d(&self) -> usize {
        self.config.encoder.d
    }

    /// Names and lengths of every parameter tensor, in visit order.
    pub fn tensor_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, x| out.push((n.to_string(), x.len())));
        out
    }

    /// SHA-256 over the raw bytes of every tensor in a group.
    pub fn group_digest(&self, group: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit("", &mut |n, x| {
            if group_of(n) == group {
                h.update(n.as_bytes());
                for v in x {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    fn role_mask(&self, event_class: usize) -> Option<&[usize]> {
        self.config
            .mask_roles
            .then(|| self.labels.valid_roles.get(event_class).map(Vec::as_slice))
            .flatten()
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.text_encoder.visit(&join(prefix, TEXT_ENCODER), f);
        self.image_encoder.visit(&join(prefix, IMAGE_ENCODER), f);
        self.fusion.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.text_encoder.visit_mut(&join(prefix, TEXT_ENCODER), f);
        self.image_encoder.visit_mut(&join(prefix, IMAGE_ENCODER), f);
        self.fusion.visit_mut(prefix, f);
    }
}

/// Memo key for text features: sentence id and words.
type TextKey = (String, Vec<String>);

/// Encoder backends plus memoized base features.
pub struct FeatureStore {
    pub text: Box<dyn TextBackend>,
    pub image: Box<dyn ImageBackend>,
    pub config: EncoderConfig,
    text_memo: Mutex<HashMap<TextKey, Arc<TextFeatures>>>,
    image_memo: Mutex<HashMap<String, Arc<ImageFeatures>>>,
}

impl FeatureStore {
    pub fn new(text: Box<dyn TextBackend>, image: Box<dyn ImageBackend>, config: EncoderConfig) -> Self {
        Self {
            text,
            image,
            config,
            text_memo: Mutex::new(HashMap::new()),
            image_memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn text_features(&self, s: &Sentence) -> Result<Arc<TextFeatures>> {
        let key = (s.id.clone(), s.words.clone());
        if let Some(f) = self.text_memo.lock().expect("memo").get(&key) {
            return Ok(f.clone());
        }
        let f = Arc::new(self.text.features(s, &self.config)?);
        self.text_memo.lock().expect("memo").insert(key, f.clone());
        Ok(f)
    }

    pub fn image_features(&self, img: &ImageDoc) -> Result<Arc<ImageFeatures>> {
        let key = serde_json::to_string(&img.source)?;
        if let Some(f) = self.image_memo.lock().expect("memo").get(&key) {
            return Ok(f.clone());
        }
        let f = Arc::new(self.image.features(img, &self.config)?);
        if f.cls.len() != self.image.base_dim() {
            return Err(Error::Contract(format!(
                "image `{}` features have the wrong width",
                img.id
            )));
        }
        self.image_memo.lock().expect("memo").insert(key, f.clone());
        Ok(f)
    }

    pub fn tags(&self) -> (String, String) {
        (self.text.tag(), self.image.tag())
    }
}

/// One labelled training item group; its loss is the mean over its items.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    TextMention {
        sentence: Sentence,
        context: Vec<ImageDoc>,
        /// Class per word.
        labels: Vec<usize>,
    },
    TextArgument {
        sentence: Sentence,
        trigger: usize,
        event_class: usize,
        context: Vec<ImageDoc>,
        /// `(first word of entity, role class)`
        items: Vec<(usize, usize)>,
    },
    VisualMention {
        image: ImageDoc,
        context: Vec<Sentence>,
        label: usize,
    },
    VisualArgument {
        image: ImageDoc,
        event_class: usize,
        context: Vec<Sentence>,
        /// Boxes in original image coordinates with their role class.
        items: Vec<(ObjectBox, usize)>,
    },
}

impl Example {
    pub fn task(&self) -> Task {
        match self {
            Example::TextMention { .. } => Task::TextMention,
            Example::TextArgument { .. } => Task::TextArgument,
            Example::VisualMention { .. } => Task::VisualMention,
            Example::VisualArgument { .. } => Task::VisualArgument,
        }
    }

    /// Class label used by the balanced resampler (visual mention only).
    pub fn class_label(&self) -> Option<usize> {
        match self {
            Example::VisualMention { label, .. } => Some(*label),
            _ => None,
        }
    }
}

struct Ctx {
    ctx: FusionContext,
    /// Base features of each context row, for the encoder gradient.
    base: Vec<Vec<f64>>,
}

impl Model {
    fn image_context(&self, images: &[ImageDoc], feats: &FeatureStore) -> Result<Ctx> {
        let mut rows = Vec::with_capacity(images.len());
        let mut base = Vec::with_capacity(images.len());
        let mut ids = Vec::with_capacity(images.len());
        for img in images {
            let f = feats.image_features(img)?;
            rows.push(self.image_encoder.project(&f.cls));
            base.push(f.cls.clone());
            ids.push(img.id.clone());
        }
        self.finish_context(rows, base, ids, feats.image.base_dim())
    }

    fn text_context(&self, sentences: &[Sentence], feats: &FeatureStore) -> Result<Ctx> {
        let mut rows = Vec::with_capacity(sentences.len());
        let mut base = Vec::with_capacity(sentences.len());
        let mut ids = Vec::with_capacity(sentences.len());
        for s in sentences.iter().filter(|s| !s.is_empty()) {
            let f = feats.text_features(s)?;
            rows.push(self.text_encoder.project(&f.cls));
            base.push(f.cls.clone());
            ids.push(s.id.clone());
        }
        self.finish_context(rows, base, ids, feats.text.base_dim())
    }

    /// An empty context becomes one all-zero row so fusion stays defined.
    fn finish_context(
        &self,
        mut rows: Vec<Vec<f64>>,
        mut base: Vec<Vec<f64>>,
        mut ids: Vec<String>,
        base_dim: usize,
    ) -> Result<Ctx> {
        if rows.is_empty() {
            rows.push(vec![0.0; self.d()]);
            base.push(vec![0.0; base_dim]);
            ids.push("<empty>".into());
        }
        Ok(Ctx {
            ctx: FusionContext::new(Matrix::from_rows(&rows), ids)?,
            base,
        })
    }

    fn masked(&self, logits: &mut [f64], event_class: usize) {
        if let Some(allowed) = self.role_mask(event_class) {
            for (i, v) in logits.iter_mut().enumerate() {
                if i != 0 && !allowed.contains(&i) {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }

    /// Mean cross-entropy over the example's items. When `grad` is given,
    /// `scale × ∂loss/∂θ` is accumulated into it.
    pub fn example_loss(&self, ex: &Example, feats: &FeatureStore, mut grad: Option<(&mut Model, f64)>) -> Result<f64> {
        let task = ex.task();
        let (ctx, context_is_text) = match ex {
            Example::TextMention { context, .. } | Example::TextArgument { context, .. } => {
                (self.image_context(context, feats)?, false)
            }
            Example::VisualMention { context, .. } | Example::VisualArgument { context, .. } => {
                (self.text_context(context, feats)?, true)
            }
        };
        let prepared = self.fusion.prepare(&ctx.ctx)?;
        let mut cg = prepared.grad();

        struct Item {
            h: Vec<f64>,
            h_base: Vec<f64>,
            third: Option<(Vec<f64>, Vec<f64>)>,
            label: usize,
            mask: Option<usize>,
        }
        let mut items = Vec::new();
        let query_is_text;
        match ex {
            Example::TextMention { sentence, labels, .. } => {
                query_is_text = true;
                let f = feats.text_features(sentence)?;
                for (w, &label) in labels.iter().enumerate() {
                    let Some(&row) = f.word_map.get(w) else { continue };
                    let base = f.tokens.row(row).to_vec();
                    items.push(Item {
                        h: self.text_encoder.project(&base),
                        h_base: base,
                        third: None,
                        label,
                        mask: None,
                    });
                }
            }
            Example::TextArgument {
                sentence,
                trigger,
                event_class,
                items: args,
                ..
            } => {
                query_is_text = true;
                let f = feats.text_features(sentence)?;
                let Some(&trow) = f.word_map.get(*trigger) else {
                    return Ok(0.0);
                };
                let tbase = f.tokens.row(trow).to_vec();
                let tproj = self.text_encoder.project(&tbase);
                for &(w, label) in args {
                    let Some(&row) = f.word_map.get(w) else { continue };
                    let base = f.tokens.row(row).to_vec();
                    items.push(Item {
                        h: self.text_encoder.project(&base),
                        h_base: base,
                        third: Some((tproj.clone(), tbase.clone())),
                        label,
                        mask: Some(*event_class),
                    });
                }
            }
            Example::VisualMention { image, label, .. } => {
                query_is_text = false;
                let f = feats.image_features(image)?;
                items.push(Item {
                    h: self.image_encoder.project(&f.cls),
                    h_base: f.cls.clone(),
                    third: None,
                    label: *label,
                    mask: None,
                });
            }
            Example::VisualArgument {
                image,
                event_class,
                items: boxes,
                ..
            } => {
                query_is_text = false;
                let f = feats.image_features(image)?;
                let cls = self.image_encoder.project(&f.cls);
                let cfg = &feats.config;
                for (b, label) in boxes {
                    let cb = to_canonical_box(b, image.width, image.height, cfg.canonical_size);
                    let idx = object_patch_indices(&cb, f.grid, cfg);
                    let mut base = vec![0.0; f.patches.cols()];
                    for &i in &idx {
                        add_into(&mut base, f.patches.row(i));
                    }
                    base.iter_mut().for_each(|v| *v /= 3.0);
                    // the projection is affine, so projecting the mean equals the mean of projections
                    let h = self.image_encoder.project(&base);
                    items.push(Item {
                        h,
                        h_base: base,
                        third: Some((cls.clone(), f.cls.clone())),
                        label: *label,
                        mask: Some(*event_class),
                    });
                }
            }
        }
        if items.is_empty() {
            return Ok(0.0);
        }
        let n = items.len() as f64;
        let mut total = 0.0;
        for it in &items {
            let (mut logits, cache) =
                self.fusion
                    .forward_item(task, &it.h, it.third.as_ref().map(|t| t.0.as_slice()), &prepared)?;
            if let Some(ec) = it.mask {
                self.masked(&mut logits, ec);
            }
            let (loss, mut dlogits) = cross_entropy(&logits, it.label);
            total += loss;
            if let Some((g, scale)) = grad.as_mut() {
                dlogits.iter_mut().for_each(|v| *v *= *scale / n);
                let (dh, dthird) = self
                    .fusion
                    .backward_item(&cache, &dlogits, &prepared, &mut g.fusion, &mut cg);
                let enc = if query_is_text {
                    &mut g.text_encoder
                } else {
                    &mut g.image_encoder
                };
                EncoderParams::backward(&it.h_base, &dh, enc);
                if let (Some(dt), Some((_, tbase))) = (dthird, &it.third) {
                    EncoderParams::backward(tbase, &dt, enc);
                }
            }
        }
        if let Some((g, _)) = grad {
            let dctx = prepared.finish(&self.fusion.adapter, cg, &mut g.fusion.adapter);
            let enc = if context_is_text {
                &mut g.text_encoder
            } else {
                &mut g.image_encoder
            };
            for (i, base) in ctx.base.iter().enumerate() {
                EncoderParams::backward(base, dctx.row(i), enc);
            }
        }
        Ok(total / n)
    }
}

fn score_map(classes: &[String], logits: &[f64]) -> BTreeMap<String, f64> {
    classes.iter().cloned().zip(softmax(logits)).collect()
}

/// Unmerged predictions for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocPrediction {
    pub doc_id: String,
    pub text_events: Vec<EventMention>,
    pub visual_events: Vec<EventMention>,
}

impl Model {
    fn prepared<'c>(&self, ctx: &'c FusionContext) -> Result<PreparedContext<'c>> {
        self.fusion.prepare(ctx)
    }

    /// Classifies every word and every image of a document. Arguments are
    /// left empty; see [`Model::attach_text_arguments`] and
    /// [`Model::attach_visual_arguments`].
    pub fn predict_mentions(&self, doc: &MultimediaDocument, feats: &FeatureStore) -> Result<DocPrediction> {
        let img_ctx = self.image_context(&doc.images, feats)?;
        let txt_ctx = self.text_context(&doc.sentences, feats)?;
        let img_prep = self.prepared(&img_ctx.ctx)?;
        let txt_prep = self.prepared(&txt_ctx.ctx)?;
        let classes = &self.labels.event_classes;

        let mut text_events = Vec::new();
        for s in doc.sentences.iter().filter(|s| !s.is_empty()) {
            let f = feats.text_features(s)?;
            let enc = self.text_encoder.encode_text(&f);
            for w in 0..enc.word_map.len() {
                let h = enc.word(w).expect("mapped word");
                let (logits, _) = self.fusion.forward_item(Task::TextMention, h, None, &img_prep)?;
                let cls = decide(&logits, None);
                if cls == 0 {
                    continue;
                }
                let mut ev = EventMention::textual(&classes[cls], &s.id, w);
                ev.scores = Some(score_map(classes, &logits));
                text_events.push(ev);
            }
        }

        let mut visual_events = Vec::new();
        for img in &doc.images {
            let f = feats.image_features(img)?;
            let cls_vec = self.image_encoder.project(&f.cls);
            let (logits, _) = self
                .fusion
                .forward_item(Task::VisualMention, &cls_vec, None, &txt_prep)?;
            let cls = decide(&logits, None);
            if cls == 0 {
                continue;
            }
            let mut ev = EventMention::visual(&classes[cls], &img.id);
            ev.scores = Some(score_map(classes, &logits));
            visual_events.push(ev);
        }
        Ok(DocPrediction {
            doc_id: doc.id.clone(),
            text_events,
            visual_events,
        })
    }

    /// Replaces the arguments of every textual event with this model's
    /// decisions over the sentence's entities (each represented by its first
    /// word).
    pub fn attach_text_arguments(
        &self,
        doc: &MultimediaDocument,
        feats: &FeatureStore,
        pred: &mut DocPrediction,
    ) -> Result<()> {
        if pred.text_events.is_empty() {
            return Ok(());
        }
        let img_ctx = self.image_context(&doc.images, feats)?;
        let img_prep = self.prepared(&img_ctx.ctx)?;
        let roles = &self.labels.role_classes;
        for ev in &mut pred.text_events {
            let trig = ev.text_trigger.as_ref().expect("textual event");
            let s = doc
                .sentence(&trig.sentence_id)
                .ok_or_else(|| Error::Contract(format!("unknown sentence `{}` in {}", trig.sentence_id, doc.id)))?;
            let cls = self
                .labels
                .event_index(&ev.event_type)
                .ok_or_else(|| Error::Contract(format!("event type `{}` outside the label space", ev.event_type)))?;
            let f = feats.text_features(s)?;
            let enc = self.text_encoder.encode_text(&f);
            let Some(h) = enc.word(trig.index) else { continue };
            ev.arguments.clear();
            for ent in &s.entities {
                let Some(he) = enc.word(ent.start) else { continue };
                let (mut logits, _) = self.fusion.forward_item(Task::TextArgument, he, Some(h), &img_prep)?;
                self.masked(&mut logits, cls);
                let r = decide(&logits, None);
                if r == 0 {
                    continue;
                }
                let mut arg = ArgumentMention::textual(
                    &roles[r],
                    TextSpan {
                        sentence_id: s.id.clone(),
                        start: ent.start,
                        end: ent.end,
                    },
                );
                arg.scores = Some(score_map(roles, &logits));
                ev.arguments.push(arg);
            }
        }
        Ok(())
    }

    /// Replaces the arguments of every visual event with this model's
    /// decisions over detector proposals. Without a detector no visual
    /// arguments are produced.
    pub fn attach_visual_arguments(
        &self,
        doc: &MultimediaDocument,
        feats: &FeatureStore,
        detector: Option<(&dyn ObjectDetectorClient, &DetectorConfig, &DetectionCache)>,
        pred: &mut DocPrediction,
    ) -> Result<()> {
        let Some((client, dcfg, cache)) = detector else {
            return Ok(());
        };
        if pred.visual_events.is_empty() {
            return Ok(());
        }
        let txt_ctx = self.text_context(&doc.sentences, feats)?;
        let txt_prep = self.prepared(&txt_ctx.ctx)?;
        let roles = &self.labels.role_classes;
        for ev in &mut pred.visual_events {
            let id = ev.image_trigger.as_deref().expect("visual event");
            let img = doc
                .image(id)
                .ok_or_else(|| Error::Contract(format!("unknown image `{id}` in {}", doc.id)))?;
            let cls = self
                .labels
                .event_index(&ev.event_type)
                .ok_or_else(|| Error::Contract(format!("event type `{}` outside the label space", ev.event_type)))?;
            let f = feats.image_features(img)?;
            let enc = self.image_encoder.encode_image(&f);
            ev.arguments.clear();
            for b in detect(img, client, dcfg, cache)? {
                let cb = to_canonical_box(&b, img.width, img.height, feats.config.canonical_size);
                let obj = crate::heads::extract_object_feature(&cb, &enc, &feats.config);
                let (mut logits, _) =
                    self.fusion
                        .forward_item(Task::VisualArgument, &obj.feature, Some(&enc.cls), &txt_prep)?;
                self.masked(&mut logits, cls);
                let r = decide(&logits, None);
                if r == 0 {
                    continue;
                }
                let mut arg = ArgumentMention::visual(&roles[r], &img.id, b);
                arg.scores = Some(score_map(roles, &logits));
                ev.arguments.push(arg);
            }
        }
        Ok(())
    }

    /// Mentions and arguments from a single model.
    pub fn predict_document(
        &self,
        doc: &MultimediaDocument,
        feats: &FeatureStore,
        detector: Option<(&dyn ObjectDetectorClient, &DetectorConfig, &DetectionCache)>,
    ) -> Result<DocPrediction> {
        let mut pred = self.predict_mentions(doc, feats)?;
        self.attach_text_arguments(doc, feats, &mut pred)?;
        self.attach_visual_arguments(doc, feats, detector, &mut pred)?;
        Ok(pred)
    }
}

/// The three models used at inference: mentions come from the last
/// sequential stage, arguments from the two specialized branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub mention: Model,
    pub text_argument: Model,
    pub visual_argument: Model,
}

impl ModelBundle {
    pub fn single(model: Model) -> Self {
        Self {
            mention: model.clone(),
            text_argument: model.clone(),
            visual_argument: model,
        }
    }

    pub fn predict_document(
        &self,
        doc: &MultimediaDocument,
        feats: &FeatureStore,
        detector: Option<(&dyn ObjectDetectorClient, &DetectorConfig, &DetectionCache)>,
    ) -> Result<DocPrediction> {
        let mut pred = self.mention.predict_mentions(doc, feats)?;
        self.text_argument.attach_text_arguments(doc, feats, &mut pred)?;
        self.visual_argument
            .attach_visual_arguments(doc, feats, detector, &mut pred)?;
        Ok(pred)
    }
}
