//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Each check uses an oracle written independently of the
//! code under test.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mmevent::augmentation::{extract_event_prompt, nucleus_filter, CrossSentencePolicy};
use mmevent::config::LoadedConfig;
use mmevent::coref_eval::{
    merge_multimedia, score, FixtureScorer, MatchConfig, MergeConfig, ScoreReport, SimilarityRecord,
};
use mmevent::data_model::{
    ArgumentMention, EventMention, ImageDoc, ImageSource, MultimediaDocument, ObjectBox, Sentence, TextSpan,
};
use mmevent::encoders::{EncoderConfig, ImageEncoding};
use mmevent::fusion::{adapter_forward, attention_weights, AdapterParams, FusionContext, Task};
use mmevent::heads::{extract_object_feature, ClassifierParams, FusionHeads, FusionSetting};
use mmevent::model::{group_of, Model};
use mmevent::pipeline::{self, Direction, TrainManifest};
use mmevent::synth::{write_world, WorldConfig, WorldFiles};
use mmevent::tensor::{cross_entropy, Matrix, Params};
use mmevent::trainer::{default_schedule, Ablation, Checkpoint, ScheduleConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std).unwrap().sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_rows(
        &(0..rows)
            .map(|_| (0..cols).map(|_| gauss(rng, 1.0)).collect())
            .collect::<Vec<_>>(),
    )
}

fn context(m: Matrix) -> FusionContext {
    let ids = (0..m.rows()).map(|i| format!("c{i}")).collect();
    FusionContext::new(m, ids).unwrap()
}

fn flat<P: Params>(p: &P) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit("", &mut |_, x| v.extend_from_slice(x));
    v
}

fn set_flat<P: Params>(p: &mut P, v: &[f64]) {
    let mut o = 0;
    p.visit_mut("", &mut |_, x| {
        x.copy_from_slice(&v[o..o + x.len()]);
        o += x.len();
    });
}

// ---------------------------------------------------------------- criterion 1

fn schedule_fidelity() -> Outcome {
    let golden: serde_json::Value = serde_json::from_str(include_str!("golden/default_plan.json")).unwrap();
    let plan = serde_json::to_value(default_schedule(&ScheduleConfig::default())).unwrap();
    let stages = plan.as_array().map_or(0, Vec::len);
    check(plan == golden, format!("{stages} stages vs golden plan"))
}

// ---------------------------------------------------------------- criterion 3

const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared on an absolute scale.
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

struct Instance {
    heads: FusionHeads,
    h: Vec<f64>,
    third: Option<Vec<f64>>,
    ctx: Matrix,
    target: usize,
    task: Task,
}

impl Instance {
    fn loss(&self, heads: &FusionHeads, h: &[f64], third: Option<&[f64]>, ctx: &Matrix) -> f64 {
        let fc = context(ctx.clone());
        let prep = heads.prepare(&fc).unwrap();
        let (logits, _) = heads.forward_item(self.task, h, third, &prep).unwrap();
        cross_entropy(&logits, self.target).0
    }

    /// Largest relative error over every parameter and every input.
    fn max_error(&self) -> f64 {
        let fc = context(self.ctx.clone());
        let prep = self.heads.prepare(&fc).unwrap();
        let (logits, cache) = self
            .heads
            .forward_item(self.task, &self.h, self.third.as_deref(), &prep)
            .unwrap();
        let (_, dlogits) = cross_entropy(&logits, self.target);
        let mut grad = self.heads.zeros_like();
        let mut cg = prep.grad();
        let (dh, dthird) = self.heads.backward_item(&cache, &dlogits, &prep, &mut grad, &mut cg);
        let dctx = prep.finish(&self.heads.adapter, cg, &mut grad.adapter);

        let third = self.third.as_deref();
        let mut worst: f64 = 0.0;
        let base = flat(&self.heads);
        let analytic = flat(&grad);
        let mut probe = self.heads.clone();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + FD_STEP;
            set_flat(&mut probe, &v);
            let up = self.loss(&probe, &self.h, third, &self.ctx);
            v[i] = base[i] - FD_STEP;
            set_flat(&mut probe, &v);
            let down = self.loss(&probe, &self.h, third, &self.ctx);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
        }
        for i in 0..self.h.len() {
            let mut hp = self.h.clone();
            hp[i] += FD_STEP;
            let mut hm = self.h.clone();
            hm[i] -= FD_STEP;
            let n = (self.loss(&self.heads, &hp, third, &self.ctx) - self.loss(&self.heads, &hm, third, &self.ctx))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(dh[i], n));
        }
        if let (Some(t), Some(dt)) = (&self.third, &dthird) {
            for i in 0..t.len() {
                let mut tp = t.clone();
                tp[i] += FD_STEP;
                let mut tm = t.clone();
                tm[i] -= FD_STEP;
                let n = (self.loss(&self.heads, &self.h, Some(&tp), &self.ctx)
                    - self.loss(&self.heads, &self.h, Some(&tm), &self.ctx))
                    / (2.0 * FD_STEP);
                worst = worst.max(rel_err(dt[i], n));
            }
        }
        for i in 0..self.ctx.as_slice().len() {
            let mut cp = self.ctx.clone();
            cp.as_mut_slice()[i] += FD_STEP;
            let mut cm = self.ctx.clone();
            cm.as_mut_slice()[i] -= FD_STEP;
            let n = (self.loss(&self.heads, &self.h, third, &cp) - self.loss(&self.heads, &self.h, third, &cm))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(dctx.as_slice()[i], n));
        }
        worst
    }
}

fn random_heads(r: &mut ChaCha8Rng, d: usize) -> FusionHeads {
    let mut heads = FusionHeads {
        adapter: AdapterParams::new(d, 2, r).unwrap(),
        classifiers: ClassifierParams::new(d, 4, 3, r),
        setting: FusionSetting::Adapter,
    };
    // move layer norms and biases away from their identity init
    let v: Vec<f64> = flat(&heads).into_iter().map(|x| x + gauss(r, 0.2)).collect();
    set_flat(&mut heads, &v);
    heads
}

fn gradient_correctness() -> Outcome {
    let d = 8;
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for task in Task::ALL {
        for _ in 0..20 {
            let n = r.random_range(1..6);
            let classes = if task.is_argument() { 3 } else { 4 };
            let inst = Instance {
                heads: random_heads(&mut r, d),
                h: (0..d).map(|_| gauss(&mut r, 1.0)).collect(),
                third: task.is_argument().then(|| (0..d).map(|_| gauss(&mut r, 1.0)).collect()),
                ctx: random_matrix(&mut r, n, d),
                target: r.random_range(0..classes),
                task,
            };
            worst = worst.max(inst.max_error());
            cases += 1;
        }
    }
    check(
        worst <= 1e-4,
        format!("{cases} instances, max relative error {worst:.2e} (bound 1e-4)"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn attention_invariance() -> Outcome {
    let mut r = rng(4);
    let (mut worst_sum, mut worst_perm): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..5);
        let n = r.random_range(1..9);
        let params = AdapterParams::new(d, heads, &mut r).unwrap();
        let q: Vec<f64> = (0..d).map(|_| gauss(&mut r, 1.0)).collect();
        let m = random_matrix(&mut r, n, d);
        let w = attention_weights(&q, &context(m.clone()), &params).unwrap();
        for row in w.iter_rows() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let permuted = context(m.permute_rows(&order));
        for task in Task::ALL {
            let a = adapter_forward(&q, &context(m.clone()), task, &params).unwrap();
            let b = adapter_forward(&q, &permuted, task, &params).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst_perm = worst_perm.max((x - y).abs());
            }
        }
    }
    check(
        worst_sum <= 1e-6 && worst_perm <= 1e-9,
        format!("100 instances, row-sum error {worst_sum:.1e} (1e-6), permutation error {worst_perm:.1e} (1e-9)"),
    )
}

// ---------------------------------------------------------------- criterion 5

/// Smallest set of tokens, closed under "more probable, or equally probable
/// with a lower index", whose mass exceeds `p`; found by trying every subset.
fn nucleus_oracle(probs: &[f64], p: f64) -> BTreeSet<usize> {
    let n = probs.len();
    let before = |a: usize, b: usize| probs[a] > probs[b] || (probs[a] == probs[b] && a < b);
    let mut best: Option<BTreeSet<usize>> = None;
    for mask in 1u32..(1 << n) {
        let set: BTreeSet<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let closed = set.iter().all(|&i| (0..n).all(|j| !before(j, i) || set.contains(&j)));
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        if closed && mass > p && best.as_ref().is_none_or(|b| set.len() < b.len()) {
            best = Some(set);
        }
    }
    best.unwrap_or_else(|| (0..n).collect())
}

fn nucleus_sampler() -> Outcome {
    let mut r = rng(5);
    let mut mismatches = 0;
    let mut worst_mass: f64 = 0.0;
    for case in 0..1000 {
        let n = r.random_range(1..9);
        let (probs, p): (Vec<f64>, f64) = match case % 3 {
            0 => {
                // coarse integer weights produce ties
                let w: Vec<u32> = (0..n).map(|_| r.random_range(1..5)).collect();
                let total: u32 = w.iter().sum();
                (
                    w.iter().map(|&x| x as f64 / total as f64).collect(),
                    r.random_range(0.05..0.999),
                )
            }
            1 => {
                // sixteenths sum exactly, so p can sit on a prefix mass
                let mut cuts: Vec<u32> = (0..n - 1).map(|_| r.random_range(0..=16)).collect();
                cuts.extend([0, 16]);
                cuts.sort();
                let probs: Vec<f64> = cuts.windows(2).map(|c| (c[1] - c[0]) as f64 / 16.0).collect();
                (probs, r.random_range(1..=16) as f64 / 16.0)
            }
            _ => {
                let w: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 1e-3).collect();
                let total: f64 = w.iter().sum();
                (w.iter().map(|x| x / total).collect(), r.random_range(0.05..0.999))
            }
        };
        let got = nucleus_filter(&probs, p).unwrap();
        let set: BTreeSet<usize> = got.indices.iter().copied().collect();
        if set != nucleus_oracle(&probs, p) || set.len() != got.indices.len() {
            mismatches += 1;
        }
        worst_mass = worst_mass.max((got.probs.iter().sum::<f64>() - 1.0).abs());
    }
    let worked = |p: f64| nucleus_filter(&[0.5, 0.3, 0.2], p).unwrap().indices;
    let worked_ok = worked(0.7) == vec![0, 1] && worked(0.4) == vec![0];
    check(
        mismatches == 0 && worst_mass <= 1e-9 && worked_ok,
        format!(
            "1000 distributions, {mismatches} mismatches, mass error {worst_mass:.1e}, worked cases {}",
            if worked_ok { "ok" } else { "wrong" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn sentence(id: &str, n: usize) -> Sentence {
    Sentence {
        id: id.into(),
        words: (0..n).map(|i| format!("w{i}")).collect(),
        entities: vec![],
    }
}

fn prompt_minimality() -> Outcome {
    let mut r = rng(6);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = r.random_range(1..16);
        let s = sentence("s", n);
        let mut ev = EventMention::textual("E", "s", r.random_range(0..n));
        let mut required = vec![ev.text_trigger.as_ref().unwrap().index];
        for _ in 0..r.random_range(0..4) {
            let a = r.random_range(0..n);
            let b = r.random_range(a..n.min(a + 3));
            // arguments elsewhere in the document are ignored
            let elsewhere = r.random_bool(0.2);
            let sid = if elsewhere { "other" } else { "s" };
            ev.arguments.push(ArgumentMention::textual(
                "R",
                TextSpan {
                    sentence_id: sid.into(),
                    start: a,
                    end: b,
                },
            ));
            if !elsewhere {
                required.extend(a..=b);
            }
        }
        let mut best: Option<(usize, usize)> = None;
        for a in 0..n {
            for b in a..n {
                let covers = required.iter().all(|&i| a <= i && i <= b);
                if covers && best.is_none_or(|(x, y)| b - a < y - x) {
                    best = Some((a, b));
                }
            }
        }
        let (a, b) = best.unwrap();
        let got = extract_event_prompt(&s, &ev, CrossSentencePolicy::Exclude).unwrap();
        if (got.start, got.end) != (a, b) || got.text != s.words[a..=b].join(" ") {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("500 cases, {mismatches} mismatches against span enumeration"),
    )
}

// ---------------------------------------------------------------- criterion 7

/// Patch holding a pixel, found by testing membership in every patch.
fn pixel_patch(x: u32, y: u32, size: u32, patch: u32) -> usize {
    let cols = size.div_ceil(patch);
    for r in 0..cols {
        for c in 0..cols {
            let xs = c * patch..((c + 1) * patch).min(size);
            let ys = r * patch..((r + 1) * patch).min(size);
            if xs.contains(&x) && ys.contains(&y) {
                return (r * cols + c) as usize;
            }
        }
    }
    unreachable!("pixel ({x}, {y}) outside a {size}px image")
}

fn encoding(r: &mut ChaCha8Rng, cfg: &EncoderConfig) -> ImageEncoding {
    let grid = cfg.grid();
    ImageEncoding {
        cls: (0..cfg.d).map(|_| gauss(r, 1.0)).collect(),
        patches: random_matrix(r, grid.len(), cfg.d),
        grid,
    }
}

fn object_features() -> Outcome {
    let mut r = rng(7);
    let mut index_mismatch = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (size, patch) = [(224, 16), (224, 14), (100, 16), (64, 8), (50, 7)][r.random_range(0..5)];
        let cfg = EncoderConfig {
            d: 6,
            patch_size: patch,
            canonical_size: size,
            ..EncoderConfig::default()
        };
        let enc = encoding(&mut r, &cfg);
        let (x1, y1) = (r.random_range(0..size), r.random_range(0..size));
        let (x2, y2) = (r.random_range(x1..size), r.random_range(y1..size));
        let b = ObjectBox {
            x1,
            y1,
            x2,
            y2,
            label: None,
            score: None,
        };
        let f = extract_object_feature(&b, &enc, &cfg);
        let expect = [
            pixel_patch(x1, y1, size, patch),
            pixel_patch((x1 + x2) / 2, (y1 + y2) / 2, size, patch),
            pixel_patch(x2, y2, size, patch),
        ];
        if f.patch_indices != expect {
            index_mismatch += 1;
            continue;
        }
        for k in 0..cfg.d {
            let mean = expect.iter().map(|&i| enc.patches.get(i, k)).sum::<f64>() / 3.0;
            worst = worst.max((mean - f.feature[k]).abs());
        }
    }
    let cfg = EncoderConfig {
        d: 4,
        ..EncoderConfig::default()
    };
    let full = ObjectBox {
        x1: 0,
        y1: 0,
        x2: 223,
        y2: 223,
        label: None,
        score: None,
    };
    let full_idx = extract_object_feature(&full, &encoding(&mut r, &cfg), &cfg).patch_indices;
    check(
        index_mismatch == 0 && worst <= 1e-12 && full_idx == [0, 90, 195],
        format!("1000 boxes, {index_mismatch} index mismatches, mean error {worst:.1e}, full image -> {full_idx:?}"),
    )
}

// ---------------------------------------------------------------- criterion 8

/// Compact event description the oracle scores without the library.
#[derive(Clone, Debug)]
struct Ev {
    ty: u8,
    sent: Option<u8>,
    img: Option<u8>,
    /// (role, text span id, box id)
    args: Vec<(u8, Option<u8>, Option<u8>)>,
}

const SPANS: [(usize, usize); 3] = [(0, 0), (1, 2), (3, 3)];
// pairs with IoU 1/3, 0.68, exactly 0.5 and 0
const BOXES: [(u32, u32, u32, u32); 5] = [
    (0, 0, 9, 9),
    (5, 0, 14, 9),
    (1, 1, 10, 10),
    (0, 0, 19, 9),
    (20, 20, 29, 29),
];

/// Inclusive-pixel IoU by counting pixels.
fn pixel_iou(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32)) -> f64 {
    let inside = |q: (u32, u32, u32, u32), x: u32, y: u32| q.0 <= x && x <= q.2 && q.1 <= y && y <= q.3;
    let (mut inter, mut union) = (0, 0);
    for x in 0..32 {
        for y in 0..32 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

fn to_event(e: &Ev) -> EventMention {
    EventMention {
        event_type: format!("T{}", e.ty),
        text_trigger: e.sent.map(|i| mmevent::data_model::TextTrigger {
            sentence_id: "s0".into(),
            index: i as usize,
        }),
        image_trigger: e.img.map(|i| format!("img{i}")),
        arguments: e
            .args
            .iter()
            .map(|&(role, span, bx)| ArgumentMention {
                role: format!("R{role}"),
                text_grounding: span.map(|s| TextSpan {
                    sentence_id: "s0".into(),
                    start: SPANS[s as usize].0,
                    end: SPANS[s as usize].1,
                }),
                visual_grounding: bx.map(|b| {
                    let (x1, y1, x2, y2) = BOXES[b as usize];
                    vec![mmevent::data_model::VisualGrounding {
                        image_id: e.img.map_or("img0".into(), |i| format!("img{i}")),
                        object: ObjectBox {
                            x1,
                            y1,
                            x2,
                            y2,
                            label: None,
                            score: None,
                        },
                    }]
                }),
                scores: None,
            })
            .collect(),
        scores: None,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum View {
    Text,
    Visual,
    Both,
}

fn view_of(e: &Ev, v: View) -> Option<Ev> {
    let keep = match v {
        View::Text => e.sent.is_some(),
        View::Visual => e.img.is_some(),
        View::Both => e.sent.is_some() && e.img.is_some(),
    };
    keep.then(|| Ev {
        ty: e.ty,
        sent: if v == View::Visual { None } else { e.sent },
        img: if v == View::Text { None } else { e.img },
        args: e
            .args
            .iter()
            .filter_map(|&(role, s, b)| match v {
                View::Text => s.map(|s| (role, Some(s), None)),
                View::Visual => b.map(|b| (role, None, Some(b))),
                View::Both => Some((role, s, b)),
            })
            .collect(),
    })
}

fn arg_match(g: (u8, Option<u8>, Option<u8>), p: (u8, Option<u8>, Option<u8>)) -> bool {
    if g.0 != p.0 {
        return false;
    }
    let text = matches!((g.1, p.1), (Some(a), Some(b)) if a == b);
    let vis = matches!((g.2, p.2), (Some(a), Some(b)) if pixel_iou(BOXES[a as usize], BOXES[b as usize]) >= 0.5);
    text || vis
}

/// Best one-to-one matching size by trying every assignment.
fn best_matching<T>(gold: &[T], pred: &[T], w: &dyn Fn(&T, &T) -> Option<usize>) -> (usize, usize) {
    fn go<T>(
        gi: usize,
        gold: &[T],
        pred: &[T],
        used: &mut Vec<bool>,
        w: &dyn Fn(&T, &T) -> Option<usize>,
    ) -> (usize, usize) {
        if gi == gold.len() {
            return (0, 0);
        }
        let mut best = go(gi + 1, gold, pred, used, w);
        for pj in 0..pred.len() {
            if used[pj] {
                continue;
            }
            if let Some(inner) = w(&gold[gi], &pred[pj]) {
                used[pj] = true;
                let (m, a) = go(gi + 1, gold, pred, used, w);
                used[pj] = false;
                best = best.max((m + 1, a + inner));
            }
        }
        best
    }
    go(0, gold, pred, &mut vec![false; pred.len()], w)
}

/// (mention tp, fp, fn, argument tp, fp, fn) for one view.
fn oracle_counts(gold: &[Ev], pred: &[Ev], v: View) -> [usize; 6] {
    let g: Vec<Ev> = gold.iter().filter_map(|e| view_of(e, v)).collect();
    let p: Vec<Ev> = pred.iter().filter_map(|e| view_of(e, v)).collect();
    let pair = |a: &Ev, b: &Ev| {
        (a.ty == b.ty && a.sent == b.sent && a.img == b.img)
            .then(|| best_matching(&a.args, &b.args, &|x, y| arg_match(*x, *y).then_some(0)).0)
    };
    let (m, a) = best_matching(&g, &p, &pair);
    let ga: usize = g.iter().map(|e| e.args.len()).sum();
    let pa: usize = p.iter().map(|e| e.args.len()).sum();
    [m, p.len() - m, g.len() - m, a, pa - a, ga - a]
}

fn report_counts(r: &ScoreReport, v: View) -> [usize; 6] {
    let c = match v {
        View::Text => r.textual,
        View::Visual => r.visual,
        View::Both => r.multimedia,
    };
    [
        c.mention.tp,
        c.mention.fp,
        c.mention.fn_,
        c.argument.tp,
        c.argument.fp,
        c.argument.fn_,
    ]
}

fn random_ev(r: &mut ChaCha8Rng) -> Ev {
    let kind = r.random_range(0..3);
    let sent = (kind != 1).then(|| r.random_range(0..2));
    let img = (kind != 0).then(|| r.random_range(0..2));
    let args = (0..r.random_range(0..4))
        .map(|_| {
            let s = (sent.is_some() && r.random_bool(0.7)).then(|| r.random_range(0..3));
            let b =
                (img.is_some() && (s.is_none() || r.random_bool(0.5))).then(|| r.random_range(0..BOXES.len() as u8));
            (r.random_range(0..2), s, b)
        })
        .filter(|a| a.1.is_some() || a.2.is_some())
        .collect();
    Ev {
        ty: r.random_range(0..2),
        sent,
        img,
        args,
    }
}

fn metric_oracle() -> Outcome {
    let mut r = rng(8);
    let cfg = MatchConfig::default();
    let mut mismatches = 0;
    let mut first = String::new();
    for case in 0..200 {
        let gold: Vec<Ev> = (0..r.random_range(0..7)).map(|_| random_ev(&mut r)).collect();
        let mut pred: Vec<Ev> = gold.iter().filter(|_| r.random_bool(0.6)).cloned().collect();
        for e in pred.iter_mut() {
            if r.random_bool(0.3) && !e.args.is_empty() {
                let k = r.random_range(0..e.args.len());
                e.args[k].0 ^= 1;
            }
        }
        while pred.len() < 6 && r.random_bool(0.5) {
            pred.push(random_ev(&mut r));
        }
        let report = score(
            &gold.iter().map(to_event).collect::<Vec<_>>(),
            &pred.iter().map(to_event).collect::<Vec<_>>(),
            &cfg,
        );
        for v in [View::Text, View::Visual, View::Both] {
            let (want, got) = (oracle_counts(&gold, &pred, v), report_counts(&report, v));
            if want != got {
                mismatches += 1;
                if first.is_empty() {
                    first = format!("; first mismatch in case {case}: oracle {want:?} scorer {got:?}");
                }
            }
        }
    }
    // hand case: 3 correct, 1 spurious, 2 missed
    let gold: Vec<EventMention> = (0..5).map(|i| EventMention::textual("A", "s0", i)).collect();
    let mut pred: Vec<EventMention> = gold[..3].to_vec();
    pred.push(EventMention::textual("B", "s0", 9));
    let hand = score(&gold, &pred, &cfg).textual.mention;
    let hand_ok = (hand.tp, hand.fp, hand.fn_) == (3, 1, 2) && (hand.f1 - 0.6667).abs() <= 1e-4;
    check(
        mismatches == 0 && hand_ok,
        format!(
            "200 sets x 3 views, {mismatches} count mismatches{first}; hand case TP={} FP={} FN={} F1={:.4}",
            hand.tp, hand.fp, hand.fn_, hand.f1
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn merge_truth_table() -> Outcome {
    let doc = MultimediaDocument {
        id: "d".into(),
        sentences: vec![sentence("s0", 6)],
        images: vec![ImageDoc {
            id: "i0".into(),
            source: ImageSource::Precomputed("i0".into()),
            width: 32,
            height: 32,
            objects: vec![],
            verb: None,
        }],
        gold_events: None,
    };
    let scorer = |sim: f64| {
        FixtureScorer::new([SimilarityRecord {
            doc_id: "d".into(),
            sentence_id: "s0".into(),
            image_id: "i0".into(),
            score: sim,
        }])
    };
    let cfg = MergeConfig {
        threshold: 0.5,
        ..MergeConfig::default()
    };
    let mut text = EventMention::textual("Attack", "s0", 2);
    text.arguments.push(ArgumentMention::textual(
        "Attacker",
        TextSpan {
            sentence_id: "s0".into(),
            start: 0,
            end: 0,
        },
    ));
    let mut visual = EventMention::visual("Attack", "i0");
    visual.arguments.push(ArgumentMention::visual(
        "Target",
        "i0",
        ObjectBox {
            x1: 1,
            y1: 1,
            x2: 9,
            y2: 9,
            label: None,
            score: None,
        },
    ));
    let mut other = visual.clone();
    other.event_type = "Transport".into();

    let run = |v: &EventMention, sim: f64| {
        merge_multimedia(
            std::slice::from_ref(&text),
            std::slice::from_ref(v),
            &doc,
            &scorer(sim),
            &cfg,
        )
        .unwrap()
    };
    let mut fails = Vec::new();

    let merged = run(&visual, 0.8);
    let m = &merged[0];
    let union_ok = m.arguments.len() == 2
        && m.arguments
            .iter()
            .any(|a| a.role == "Attacker" && a.text_grounding.is_some())
        && m.arguments.iter().any(|a| a.role == "Target" && a.has_visual());
    if !(merged.len() == 1 && m.is_multimedia() && union_ok) {
        fails.push("same type above threshold did not merge with both argument sets");
    }
    let mismatch = run(&other, 0.99);
    if !(mismatch.len() == 2 && mismatch.iter().all(|e| !e.is_multimedia())) {
        fails.push("type mismatch merged");
    }
    let low = run(&visual, 0.4);
    if !(low.len() == 2 && low.iter().all(|e| !e.is_multimedia())) {
        fails.push("below threshold merged");
    }
    let edge = run(&visual, 0.5);
    if edge.len() != 2 {
        fails.push("similarity equal to the threshold merged");
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            "merge / type mismatch / below threshold / at threshold".into()
        } else {
            fails.join("; ")
        },
    )
}

// ------------------------------------------------------------ toy-world runs

struct ToyWorld {
    _dir: tempfile::TempDir,
    files: WorldFiles,
    cfg: LoadedConfig,
}

fn toy_world(world_seed: u64, run_seed: u64) -> ToyWorld {
    let dir = tempfile::tempdir().unwrap();
    let files = write_world(
        dir.path(),
        &WorldConfig {
            seed: world_seed,
            ..WorldConfig::default()
        },
    )
    .unwrap();
    let cfg = LoadedConfig::from_file(&files.config, &[format!("seed={run_seed}")]).unwrap();
    pipeline::augment(&cfg, &[Direction::Text2Img, Direction::Img2Txt], None).unwrap();
    ToyWorld { _dir: dir, files, cfg }
}

impl ToyWorld {
    fn train(&self, ablation: Option<Ablation>) -> TrainManifest {
        pipeline::train(&self.cfg, ablation, None).unwrap()
    }

    fn heldout(&self, m: &TrainManifest) -> ScoreReport {
        let bundle = m.bundle.load().unwrap();
        let docs = pipeline::load_eval_docs(&self.cfg, &self.files.heldout_docs).unwrap();
        let feats = pipeline::feature_store(&self.cfg).unwrap();
        pipeline::score_bundle(&self.cfg, &bundle, &docs, &feats).unwrap()
    }
}

/// World seeds of the end-to-end comparison; each run seed is world seed + 10.
const SEED_SET: [u64; 3] = [1, 2, 3];

struct Runs {
    worlds: Vec<(ToyWorld, TrainManifest, TrainManifest)>,
}

fn toy_runs() -> Runs {
    let worlds = SEED_SET
        .iter()
        .map(|&s| {
            let w = toy_world(s, s + 10);
            let full = w.train(None);
            let noaug = w.train(Some(Ablation::NoAugmentation));
            (w, full, noaug)
        })
        .collect();
    Runs { worlds }
}

// ---------------------------------------------------------------- criterion 2

fn tensors_of(model: &Model, group: &str) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |n, x| {
        if group_of(n) == group {
            out.push((n.to_string(), x.iter().map(|v| v.to_bits()).collect()));
        }
    });
    out
}

fn freeze_soundness(runs: &Runs) -> Outcome {
    let (_, m, _) = &runs.worlds[0];
    let first = Checkpoint::load(&m.substages[0].checkpoint).unwrap().model;
    // the model every run starts from, rebuilt from the seed
    let init = Model::new(
        first.config.clone(),
        first.labels.clone(),
        first.text_encoder.proj.input_dim(),
        first.image_encoder.proj.input_dim(),
        m.setting,
        m.seed,
    )
    .unwrap();
    let mut input = init;
    let mut trunk = input.clone();
    let mut violations = Vec::new();
    let mut idle = Vec::new();
    for (rec, plan_sub) in m
        .substages
        .iter()
        .zip(m.plan.iter().flat_map(|s| s.substages.iter().map(move |x| (s, x))))
    {
        let (stage, _) = plan_sub;
        let before = if stage.branches { trunk.clone() } else { input.clone() };
        let after = Checkpoint::load(&rec.checkpoint).unwrap().model;
        for g in &rec.frozen {
            if tensors_of(&before, g) != tensors_of(&after, g) {
                violations.push(format!("{}:{g}", rec.name));
            }
        }
        violations.extend(
            rec.freeze_violations()
                .into_iter()
                .map(|g| format!("{} digest:{g}", rec.name)),
        );
        let moved = mmevent::model::all_groups()
            .iter()
            .any(|g| !rec.frozen.contains(g) && tensors_of(&before, g) != tensors_of(&after, g));
        if !moved {
            idle.push(rec.name.clone());
        }
        if !stage.branches {
            input = after;
            trunk = input.clone();
        }
    }
    let planned: usize = m.plan.iter().map(|s| s.substages.len()).sum();
    let frozen_groups: usize = m.substages.iter().map(|r| r.frozen.len()).sum();
    check(
        violations.is_empty() && idle.is_empty() && m.substages.len() == planned,
        format!(
            "{} substages, {frozen_groups} frozen group checks, violations {violations:?}, substages that trained nothing {idle:?}",
            m.substages.len()
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn toy_end_to_end(runs: &Runs) -> Outcome {
    let mut lines = Vec::new();
    let mut fit_ok = true;
    let (mut full_sum, mut noaug_sum) = (ScoreReport::default(), ScoreReport::default());
    for ((w, full, noaug), seed) in runs.worlds.iter().zip(SEED_SET) {
        let fit = full.training_report;
        let (t, v) = (fit.textual.mention.f1, fit.visual.mention.f1);
        fit_ok &= t >= 0.95 && v >= 0.95;
        let (hf, hn) = (w.heldout(full), w.heldout(noaug));
        full_sum = full_sum.add(&hf);
        noaug_sum = noaug_sum.add(&hn);
        lines.push(format!(
            "seed {seed}: train text {:.3} visual {:.3}, held-out text {:.3} vs no-aug {:.3}",
            t, v, hf.textual.mention.f1, hn.textual.mention.f1
        ));
    }
    let (f, n) = (full_sum.textual.mention.f1, noaug_sum.textual.mention.f1);
    check(
        fit_ok && f > n,
        format!(
            "{}; pooled held-out text mention F1 {f:.3} vs no-aug {n:.3}",
            lines.join("; ")
        ),
    )
}

// --------------------------------------------------------------- criterion 11

fn ablation_plumbing(runs: &Runs) -> Outcome {
    let (w, full, noaug) = &runs.worlds[0];
    let combined = w.train(Some(Ablation::Combined));
    let one = w.train(Some(Ablation::OneRound));
    let cosine = w.train(Some(Ablation::NoAdapter));
    let mut fails = Vec::new();

    let c = &combined.plan;
    let all_tasks: BTreeSet<Task> = Task::ALL.into_iter().collect();
    let combined_tasks: BTreeSet<Task> = combined
        .substages
        .iter()
        .flat_map(|r| r.tasks.iter().copied())
        .collect();
    if !(c.len() == 1
        && combined.stages == vec![1]
        && combined.substages.len() == 1
        && combined.substages[0].frozen.is_empty()
        && combined_tasks == all_tasks)
    {
        fails.push("combined is not one unfrozen stage over all tasks");
    }
    let s1: Vec<&str> = full.plan[0].substages.iter().map(|s| s.name.as_str()).collect();
    let lineage_ok = one
        .substages
        .iter()
        .all(|r| r.lineage.iter().all(|n| s1.contains(&n.as_str())));
    if !(one.stages == vec![1] && one.substages.len() == 2 && lineage_ok) {
        fails.push("one-round is not stage 1 only");
    }
    if !(noaug.cache_reads == 0
        && noaug.generator_tag.is_none()
        && noaug.captioner_tag.is_none()
        && noaug.setting == FusionSetting::Bypass)
    {
        fails.push("no-augmentation touched the cache or kept fusion");
    }
    if full.cache_reads == 0 {
        fails.push("the full run read nothing from the cache");
    }
    if !(cosine.fusion_mode == mmevent::fusion::FusionMode::Cosine && cosine.setting == FusionSetting::Cosine) {
        fails.push("no-adapter does not use cosine fusion");
    }
    let cos_model = Checkpoint::load(&cosine.bundle.mention).unwrap().model;
    let adapter_moved = tensors_of(&cos_model, mmevent::model::ADAPTER_SHARED)
        != tensors_of(
            &Model::new(
                cos_model.config.clone(),
                cos_model.labels.clone(),
                cos_model.text_encoder.proj.input_dim(),
                cos_model.image_encoder.proj.input_dim(),
                FusionSetting::Cosine,
                cosine.seed,
            )
            .unwrap(),
            mmevent::model::ADAPTER_SHARED,
        );
    if adapter_moved {
        fails.push("no-adapter trained adapter weights");
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!(
                "combined 1 stage, one-round stages {:?}, no-augmentation cache reads 0 (full {}), no-adapter fusion cosine",
                one.stages, full.cache_reads
            )
        } else {
            fails.join("; ")
        },
    )
}

// --------------------------------------------------------------- criterion 12

struct Artifacts {
    report: Vec<u8>,
    predictions: Vec<u8>,
    training_report: Vec<u8>,
    log: Vec<u8>,
    checkpoints: Vec<Vec<u8>>,
}

fn full_run(seed: u64) -> Artifacts {
    let w = toy_world(seed, seed);
    let m = w.train(None);
    let preds = w.files.dir.join("preds.jsonl");
    let report = w.files.dir.join("report.json");
    pipeline::predict(&w.cfg, &m.dir.join("bundle.json"), &w.files.heldout_docs, &preds).unwrap();
    pipeline::eval(&w.cfg, &w.files.heldout_docs, &preds, None, Some(&report), None).unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    Artifacts {
        report: read(&report),
        predictions: read(&preds),
        training_report: serde_json::to_vec(&m.training_report).unwrap(),
        log: read(&m.dir.join("train_log.jsonl")),
        checkpoints: m.substages.iter().map(|r| read(&r.checkpoint)).collect::<Vec<_>>(),
    }
}

fn reproducibility() -> Outcome {
    let (a, b) = (full_run(7), full_run(7));
    let same = [
        ("report", a.report == b.report),
        ("predictions", a.predictions == b.predictions),
        ("training report", a.training_report == b.training_report),
        ("loss log", a.log == b.log),
        ("checkpoints", a.checkpoints == b.checkpoints),
    ];
    let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();
    check(
        differing.is_empty(),
        format!(
            "two runs, {} report bytes, {} checkpoints; differing: {differing:?}",
            a.report.len(),
            a.checkpoints.len()
        ),
    )
}

// ---------------------------------------------------------------------- main

fn run(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(d) => (false, d),
    };
    println!(
        "{} criterion {id:>2} {name}: {detail} [{:.2}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run(1, "schedule fidelity", secs(1), schedule_fidelity);
    ok &= run(3, "gradient correctness", secs(30), gradient_correctness);
    ok &= run(
        4,
        "attention normalization and permutation invariance",
        secs(10),
        attention_invariance,
    );
    ok &= run(5, "nucleus sampler", secs(5), nucleus_sampler);
    ok &= run(6, "prompt span minimality", secs(5), prompt_minimality);
    ok &= run(7, "object feature oracle", secs(5), object_features);
    ok &= run(8, "metric oracle", secs(10), metric_oracle);
    ok &= run(9, "coreference truth table", secs(1), merge_truth_table);

    let start = Instant::now();
    let runs = catch_unwind(toy_runs);
    let setup = start.elapsed();
    match &runs {
        Ok(runs) => {
            ok &= run(2, "freeze soundness", secs(120), || freeze_soundness(runs));
            ok &= run(10, "toy end-to-end", secs(600).saturating_sub(setup), || {
                toy_end_to_end(runs)
            });
            ok &= run(11, "ablation plumbing", secs(300), || ablation_plumbing(runs));
        }
        Err(_) => {
            for (id, name) in [
                (2, "freeze soundness"),
                (10, "toy end-to-end"),
                (11, "ablation plumbing"),
            ] {
                println!("FAIL criterion {id:>2} {name}: toy runs could not be set up");
            }
            ok = false;
        }
    }
    ok &= run(12, "reproducibility", secs(1200), reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
