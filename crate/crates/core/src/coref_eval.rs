//! Multimedia coreference merging and P/R/F1 scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix as PMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::{ArgumentMention, EventMention, MultimediaDocument, ObjectBox};
use crate::error::{Error, Result};
use crate::model::DocPrediction;

/// Sentence-image similarity in `[-1, 1]`.
pub trait SimilarityScorer: Send + Sync {
    fn tag(&self) -> String;
    fn similarity(&self, doc: &MultimediaDocument, sentence_id: &str, image_id: &str) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub doc_id: String,
    pub sentence_id: String,
    pub image_id: String,
    pub score: f64,
}

/// Lookup table keyed by `(doc, sentence, image)`. Pairs outside the table
/// score `default` when set, and fail otherwise.
#[derive(Debug, Clone, Default)]
pub struct FixtureScorer {
    table: BTreeMap<(String, String, String), f64>,
    pub default: Option<f64>,
}

impl FixtureScorer {
    pub fn new(records: impl IntoIterator<Item = SimilarityRecord>) -> Self {
        Self {
            table: records
                .into_iter()
                .map(|r| ((r.doc_id, r.sentence_id, r.image_id), r.score))
                .collect(),
            default: None,
        }
    }

    pub fn constant(score: f64) -> Self {
        Self {
            table: BTreeMap::new(),
            default: Some(score),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: SimilarityRecord = serde_json::from_str(line)?;
            if !(-1.0..=1.0).contains(&r.score) {
                return Err(Error::Schema(format!("similarity {} outside [-1, 1]", r.score)));
            }
            records.push(r);
        }
        Ok(Self::new(records))
    }

    pub fn records(&self) -> Vec<SimilarityRecord> {
        self.table
            .iter()
            .map(|((d, s, i), &score)| SimilarityRecord {
                doc_id: d.clone(),
                sentence_id: s.clone(),
                image_id: i.clone(),
                score,
            })
            .collect()
    }
}

impl SimilarityScorer for FixtureScorer {
    fn tag(&self) -> String {
        "fixture".into()
    }

    fn similarity(&self, doc: &MultimediaDocument, sentence_id: &str, image_id: &str) -> Result<f64> {
        let key = (doc.id.clone(), sentence_id.to_string(), image_id.to_string());
        self.table
            .get(&key)
            .copied()
            .or(self.default)
            .ok_or_else(|| Error::Client(format!("no similarity for ({sentence_id}, {image_id}) in {}", doc.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub threshold: f64,
    pub scorer: String,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            scorer: "fixture".into(),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "merge.threshold {} outside [-1, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Merges same-typed textual and visual events whose sentence-image
/// similarity exceeds the threshold. Each event merges at most once; pairs are
/// taken by descending similarity, ties by sentence then image position in
/// the document. Output: merged and unmerged textual events in textual order,
/// then the unmerged visual events.
pub fn merge_multimedia(
    text_events: &[EventMention],
    visual_events: &[EventMention],
    doc: &MultimediaDocument,
    scorer: &dyn SimilarityScorer,
    cfg: &MergeConfig,
) -> Result<Vec<EventMention>> {
    let sent_pos = |id: &str| doc.sentences.iter().position(|s| s.id == id);
    let img_pos = |id: &str| doc.images.iter().position(|i| i.id == id);
    let mut cands = Vec::new();
    for (i, t) in text_events.iter().enumerate() {
        let trig = t
            .text_trigger
            .as_ref()
            .ok_or_else(|| Error::Contract("textual event without a text trigger".into()))?;
        let sp = sent_pos(&trig.sentence_id)
            .ok_or_else(|| Error::Contract(format!("unknown sentence `{}` in {}", trig.sentence_id, doc.id)))?;
        for (j, v) in visual_events.iter().enumerate() {
            let img = v
                .image_trigger
                .as_deref()
                .ok_or_else(|| Error::Contract("visual event without an image trigger".into()))?;
            let ip = img_pos(img).ok_or_else(|| Error::Contract(format!("unknown image `{img}` in {}", doc.id)))?;
            if t.event_type != v.event_type {
                continue;
            }
            let sim = scorer.similarity(doc, &trig.sentence_id, img).map_err(|e| {
                Error::Evaluation(format!(
                    "similarity for ({}, {img}) in {} failed: {e}",
                    trig.sentence_id, doc.id
                ))
            })?;
            if sim > cfg.threshold {
                cands.push((sim, sp, ip, i, j));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
            .then(a.4.cmp(&b.4))
    });
    let mut partner: Vec<Option<usize>> = vec![None; text_events.len()];
    let mut taken = vec![false; visual_events.len()];
    for &(_, _, _, i, j) in &cands {
        if partner[i].is_none() && !taken[j] {
            partner[i] = Some(j);
            taken[j] = true;
        }
    }
    let mut out = Vec::with_capacity(text_events.len() + visual_events.len());
    for (t, p) in text_events.iter().zip(&partner) {
        match p {
            Some(j) => {
                let v = &visual_events[*j];
                let mut arguments = t.arguments.clone();
                arguments.extend(v.arguments.iter().cloned());
                out.push(EventMention {
                    event_type: t.event_type.clone(),
                    text_trigger: t.text_trigger.clone(),
                    image_trigger: v.image_trigger.clone(),
                    arguments,
                    scores: None,
                });
            }
            None => out.push(t.clone()),
        }
    }
    out.extend(
        visual_events
            .iter()
            .zip(&taken)
            .filter(|(_, t)| !**t)
            .map(|(v, _)| v.clone()),
    );
    Ok(out)
}

/// Area IoU with inclusive pixel coordinates.
pub fn iou(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    if ix1 > ix2 || iy1 > iy2 {
        return 0.0;
    }
    let inter = (ix2 - ix1 + 1) as u64 * (iy2 - iy1 + 1) as u64;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub iou_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    pub fn add(&self, other: &Prf) -> Prf {
        Prf::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CategoryScores {
    pub mention: Prf,
    pub argument: Prf,
}

impl CategoryScores {
    fn add(&self, o: &CategoryScores) -> Self {
        Self {
            mention: self.mention.add(&o.mention),
            argument: self.argument.add(&o.argument),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreReport {
    pub textual: CategoryScores,
    pub visual: CategoryScores,
    pub multimedia: CategoryScores,
}

impl ScoreReport {
    pub fn add(&self, o: &ScoreReport) -> Self {
        Self {
            textual: self.textual.add(&o.textual),
            visual: self.visual.add(&o.visual),
            multimedia: self.multimedia.add(&o.multimedia),
        }
    }

    pub fn rows(&self) -> [(&'static str, &'static str, Prf); 6] {
        [
            ("textual", "mention", self.textual.mention),
            ("textual", "argument", self.textual.argument),
            ("visual", "mention", self.visual.mention),
            ("visual", "argument", self.visual.argument),
            ("multimedia", "mention", self.multimedia.mention),
            ("multimedia", "argument", self.multimedia.argument),
        ]
    }

    /// Mention F1 micro-averaged over the textual and visual views.
    pub fn unimodal_mention_f1(&self) -> f64 {
        self.textual.mention.add(&self.visual.mention).f1
    }
}

/// Percent with one decimal: `0.66666` → `"66.7"`.
pub fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "table" => Ok(Self::Table),
            _ => Err(Error::Config(format!("unknown report format `{s}` (json or table)"))),
        }
    }
}

pub fn emit_report(report: &ScoreReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Table => {
            let mut s = format!("{:<12}{:<10}{:>7}{:>7}{:>7}\n", "category", "task", "P", "R", "F1");
            for (cat, task, p) in report.rows() {
                let _ = writeln!(
                    s,
                    "{cat:<12}{task:<10}{:>7}{:>7}{:>7}",
                    pct(p.precision),
                    pct(p.recall),
                    pct(p.f1)
                );
            }
            Ok(s)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum View {
    Textual,
    Visual,
    Multimedia,
}

fn project(events: &[EventMention], view: View) -> Vec<EventMention> {
    events
        .iter()
        .filter_map(|e| match view {
            View::Textual => e.text_view(),
            View::Visual => e.visual_view(),
            View::Multimedia => e.is_multimedia().then(|| e.clone()),
        })
        .collect()
}

fn same_mention(a: &EventMention, b: &EventMention) -> bool {
    a.event_type == b.event_type && a.text_trigger == b.text_trigger && a.image_trigger == b.image_trigger
}

/// Role equality plus a grounding match: identical text span, or an IoU at
/// or above the threshold between boxes on the same image.
pub fn arguments_match(gold: &ArgumentMention, pred: &ArgumentMention, cfg: &MatchConfig) -> bool {
    if gold.role != pred.role {
        return false;
    }
    if let (Some(g), Some(p)) = (&gold.text_grounding, &pred.text_grounding) {
        if g == p {
            return true;
        }
    }
    if let (Some(gs), Some(ps)) = (&gold.visual_grounding, &pred.visual_grounding) {
        return ps.iter().any(|p| {
            gs.iter()
                .any(|g| g.image_id == p.image_id && iou(&g.object, &p.object) >= cfg.iou_threshold)
        });
    }
    false
}

/// Maximum-weight assignment; rows and columns may differ in count.
fn assignment(weights: &[Vec<i64>]) -> i64 {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0;
    }
    let m = if rows <= cols {
        PMatrix::from_rows(weights.iter().cloned()).expect("rectangular")
    } else {
        PMatrix::from_fn(cols, rows, |(r, c)| weights[c][r])
    };
    kuhn_munkres(&m).0
}

fn argument_tp(gold: &EventMention, pred: &EventMention, cfg: &MatchConfig) -> usize {
    let w: Vec<Vec<i64>> = gold
        .arguments
        .iter()
        .map(|g| {
            pred.arguments
                .iter()
                .map(|p| arguments_match(g, p, cfg) as i64)
                .collect()
        })
        .collect();
    assignment(&w) as usize
}

/// One-to-one matching maximizing mention TP, then argument TP. Mentions
/// only match within identical (type, grounding) keys, so mention TP is
/// fixed per key and the assignment inside a key maximizes matched arguments.
fn score_view(gold: &[EventMention], pred: &[EventMention], cfg: &MatchConfig) -> CategoryScores {
    let mut used = vec![false; pred.len()];
    let mut mention_tp = 0;
    let mut arg_tp = 0;
    let mut seen = vec![false; gold.len()];
    for gi in 0..gold.len() {
        if seen[gi] {
            continue;
        }
        let gk: Vec<usize> = (gi..gold.len())
            .filter(|&k| same_mention(&gold[gi], &gold[k]))
            .collect();
        gk.iter().for_each(|&k| seen[k] = true);
        let pk: Vec<usize> = (0..pred.len())
            .filter(|&k| !used[k] && same_mention(&gold[gi], &pred[k]))
            .collect();
        pk.iter().for_each(|&k| used[k] = true);
        mention_tp += gk.len().min(pk.len());
        let w: Vec<Vec<i64>> = gk
            .iter()
            .map(|&g| {
                pk.iter()
                    .map(|&p| argument_tp(&gold[g], &pred[p], cfg) as i64)
                    .collect()
            })
            .collect();
        arg_tp += assignment(&w) as usize;
    }
    let gold_args: usize = gold.iter().map(|e| e.arguments.len()).sum();
    let pred_args: usize = pred.iter().map(|e| e.arguments.len()).sum();
    CategoryScores {
        mention: Prf::from_counts(mention_tp, pred.len() - mention_tp, gold.len() - mention_tp),
        argument: Prf::from_counts(arg_tp, pred_args - arg_tp, gold_args - arg_tp),
    }
}

/// Scores one document's events.
pub fn score(gold: &[EventMention], pred: &[EventMention], cfg: &MatchConfig) -> ScoreReport {
    let v = |view| score_view(&project(gold, view), &project(pred, view), cfg);
    ScoreReport {
        textual: v(View::Textual),
        visual: v(View::Visual),
        multimedia: v(View::Multimedia),
    }
}

/// A prediction-file line: either already merged events, or the unmerged
/// output of `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionRecord {
    Merged { doc_id: String, events: Vec<EventMention> },
    Unmerged(DocPrediction),
}

impl PredictionRecord {
    pub fn doc_id(&self) -> &str {
        match self {
            Self::Merged { doc_id, .. } => doc_id,
            Self::Unmerged(p) => &p.doc_id,
        }
    }
}

/// Gold events of each document as merged prediction records.
pub fn gold_as_predictions(docs: &[MultimediaDocument]) -> Vec<PredictionRecord> {
    docs.iter()
        .map(|d| PredictionRecord::Merged {
            doc_id: d.id.clone(),
            events: d.gold_events.clone().unwrap_or_default(),
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn check_grounding(doc: &MultimediaDocument, events: &[EventMention]) -> Result<()> {
    for e in events {
        if let Some(t) = &e.text_trigger {
            if doc.sentence(&t.sentence_id).is_none() {
                return Err(Error::Contract(format!(
                    "unknown sentence `{}` in {}",
                    t.sentence_id, doc.id
                )));
            }
        }
        if let Some(i) = &e.image_trigger {
            if doc.image(i).is_none() {
                return Err(Error::Contract(format!("unknown image `{i}` in {}", doc.id)));
            }
        }
    }
    Ok(())
}

/// Merges (when needed) and scores every document. Gold documents without a
/// prediction contribute only false negatives.
pub fn score_corpus(
    gold: &[MultimediaDocument],
    preds: &[PredictionRecord],
    scorer: &dyn SimilarityScorer,
    merge: &MergeConfig,
    cfg: &MatchConfig,
) -> Result<ScoreReport> {
    let by_id: BTreeMap<&str, &MultimediaDocument> = gold.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut pred_of: BTreeMap<&str, Vec<EventMention>> = BTreeMap::new();
    for p in preds {
        let doc = by_id
            .get(p.doc_id())
            .ok_or_else(|| Error::Contract(format!("prediction for unknown document `{}`", p.doc_id())))?;
        let events = match p {
            PredictionRecord::Merged { events, .. } => events.clone(),
            PredictionRecord::Unmerged(d) => merge_multimedia(&d.text_events, &d.visual_events, doc, scorer, merge)?,
        };
        check_grounding(doc, &events)?;
        pred_of.entry(p.doc_id()).or_default().extend(events);
    }
    let mut total = ScoreReport::default();
    for d in gold {
        let empty = Vec::new();
        let p = pred_of.get(d.id.as_str()).unwrap_or(&empty);
        total = total.add(&score(d.gold(), p, cfg));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<(f64, ScoreReport)>,
    /// Index of the grid point with the highest multimedia mention F1 (first on ties).
    pub best: usize,
}

pub fn sweep(
    grid: &[f64],
    gold: &[MultimediaDocument],
    preds: &[PredictionRecord],
    scorer: &dyn SimilarityScorer,
    merge: &MergeConfig,
    cfg: &MatchConfig,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let m = MergeConfig {
            threshold: t,
            ..merge.clone()
        };
        m.validate()?;
        points.push((t, score_corpus(gold, preds, scorer, &m, cfg)?));
    }
    let mut best = 0;
    for (i, (_, r)) in points.iter().enumerate() {
        if r.multimedia.mention.f1 > points[best].1.multimedia.mention.f1 {
            best = i;
        }
    }
    Ok(SweepResult { points, best })
}

pub fn emit_sweep(result: &SweepResult) -> String {
    let mut s = format!(
        "{:<10}{:>9}{:>9}{:>9}{:>9}\n",
        "threshold", "mm-men", "mm-arg", "txt-men", "vis-men"
    );
    for (i, (t, r)) in result.points.iter().enumerate() {
        let mark = if i == result.best { " *" } else { "" };
        let _ = writeln!(
            s,
            "{t:<10}{:>9}{:>9}{:>9}{:>9}{mark}",
            pct(r.multimedia.mention.f1),
            pct(r.multimedia.argument.f1),
            pct(r.textual.mention.f1),
            pct(r.visual.mention.f1)
        );
    }
    s
}
