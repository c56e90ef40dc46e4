//! Staged training: schedules, freeze masks, balanced resampling, AdamW with a
//! cosine schedule, per-substage checkpoints and training logs.

mod checkpoint;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use optim::{build_freeze_mask, cosine_lr, grad_norm, scale_grads, AdamState, OptimizerConfig};
pub use schedule::{
    default_schedule, plan_for, Ablation, FreezePolicy, Modality, Resampler, ScheduleConfig, StagePlan, Substage,
};

use crate::error::{Error, Result};
use crate::fusion::Task;
use crate::model::{all_groups, group_of, groups_touched_by, Example, FeatureStore, Model, ModelBundle};
use crate::seeds::derive_seed;

/// Downsamples every non-null class (label > 0) to the smallest non-null
/// class count, and the null class (label 0) to that same count. Selection is
/// seeded and without replacement; survivors keep their input order.
pub fn balance_events<T: Clone>(items: &[T], label: impl Fn(&T) -> usize, seed: u64) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::Contract("cannot balance an empty example list".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(label(it)).or_default().push(i);
    }
    let target = by_class
        .iter()
        .filter(|(c, _)| **c != 0)
        .map(|(_, v)| v.len())
        .min()
        .ok_or_else(|| Error::Contract("no non-null class to balance against".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["balance"]));
    let mut keep = Vec::new();
    for idx in by_class.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        idx.truncate(target);
        keep.extend(idx);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub substage: String,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Summary of one executed substage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstageRecord {
    pub stage: usize,
    pub name: String,
    pub tasks: Vec<Task>,
    pub examples: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub frozen: Vec<String>,
    pub digests_before: BTreeMap<String, String>,
    pub digests_after: BTreeMap<String, String>,
    pub checkpoint: PathBuf,
    pub lineage: Vec<String>,
}

impl SubstageRecord {
    /// Frozen groups whose parameters changed (should always be empty).
    pub fn freeze_violations(&self) -> Vec<String> {
        self.frozen
            .iter()
            .filter(|g| self.digests_before.get(*g) != self.digests_after.get(*g))
            .cloned()
            .collect()
    }
}

fn digests(model: &Model) -> BTreeMap<String, String> {
    all_groups()
        .into_iter()
        .map(|g| (g.clone(), model.group_digest(&g)))
        .collect()
}

pub struct TrainSettings<'a> {
    pub optimizer: OptimizerConfig,
    pub out_dir: &'a Path,
    pub config_hash: String,
}

/// Examples per task.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub by_task: BTreeMap<Task, Vec<Example>>,
}

impl TrainData {
    pub fn examples(&self, task: Task) -> &[Example] {
        self.by_task.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundlePaths {
    pub mention: PathBuf,
    pub text_argument: PathBuf,
    pub visual_argument: PathBuf,
}

impl BundlePaths {
    pub fn load(&self) -> Result<ModelBundle> {
        Ok(ModelBundle {
            mention: Checkpoint::load(&self.mention)?.model,
            text_argument: Checkpoint::load(&self.text_argument)?.model,
            visual_argument: Checkpoint::load(&self.visual_argument)?.model,
        })
    }
}

pub struct TrainOutcome {
    pub records: Vec<SubstageRecord>,
    pub bundle: ModelBundle,
    pub paths: BundlePaths,
}

/// Executes one substage in place. Returns `(steps, final batch loss)`.
#[allow(clippy::too_many_arguments)]
pub fn run_substage(
    sub: &Substage,
    examples: &[Example],
    model: &mut Model,
    opt: &mut AdamState,
    cfg: &OptimizerConfig,
    feats: &FeatureStore,
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
    diagnostic_dir: &Path,
) -> Result<(usize, f64)> {
    if examples.is_empty() {
        return Err(Error::Training(format!(
            "substage {} has no training examples",
            sub.name
        )));
    }
    let trainable = build_freeze_mask(&sub.freeze, model)?;
    let names: Vec<String> = model.tensor_layout().into_iter().map(|(n, _)| n).collect();
    let batch = match sub.modality {
        Modality::Visual => cfg.batch_visual,
        Modality::Text | Modality::Mixed => cfg.batch_text,
    };
    let per_epoch = examples.len().div_ceil(batch);
    let total = per_epoch * sub.epochs;
    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..sub.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["shuffle", &sub.name, &epoch.to_string()]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = model.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut touched = std::collections::BTreeSet::new();
            for &i in chunk {
                let ex = &examples[i];
                loss += scale * model.example_loss(ex, feats, Some((&mut grad, scale)))?;
                touched.extend(groups_touched_by(ex.task(), model.fusion.setting));
            }
            if !loss.is_finite() {
                let path = diagnostic_dir.join(format!("diagnostic-{}-step{step}.ckpt", sub.name));
                Checkpoint {
                    model: model.clone(),
                    optimizer: Some(opt.clone()),
                    lineage: vec![sub.name.clone()],
                    config_hash: String::new(),
                    metrics: BTreeMap::new(),
                }
                .save(&path)?;
                return Err(Error::NonFiniteLoss {
                    step,
                    substage: sub.name.clone(),
                    checkpoint: path,
                });
            }
            let update: Vec<bool> = names
                .iter()
                .zip(&trainable)
                .map(|(n, &t)| t && touched.contains(&group_of(n)))
                .collect();
            let norm = grad_norm(&grad, &update);
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                scale_grads(&mut grad, cfg.clip_norm / norm);
            }
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(model, &grad, &update, lr, cfg);
            log(LogRecord {
                step,
                substage: sub.name.clone(),
                loss,
                lr,
                grad_norm: norm,
            })?;
            last = loss;
            step += 1;
        }
    }
    Ok((step, last))
}

fn substage_examples(sub: &Substage, data: &TrainData, seed: u64) -> Result<Vec<Example>> {
    let mut out: Vec<Example> = Vec::new();
    for &t in &sub.tasks {
        out.extend(data.examples(t).iter().cloned());
    }
    if sub.resampler == Resampler::Balanced {
        out = balance_events(&out, |e| e.class_label().unwrap_or(0), derive_seed(seed, &[&sub.name]))?;
    }
    Ok(out)
}

struct Runner<'a> {
    data: &'a TrainData,
    feats: &'a FeatureStore,
    settings: &'a TrainSettings<'a>,
    log: std::io::BufWriter<std::fs::File>,
    log_path: PathBuf,
    global_step: usize,
    counter: usize,
}

impl Runner<'_> {
    fn execute(
        &mut self,
        sub: &Substage,
        stage: usize,
        model: &mut Model,
        lineage: &[String],
    ) -> Result<SubstageRecord> {
        let examples = substage_examples(sub, self.data, self.settings.optimizer.seed)?;
        let before = digests(model);
        let mut opt = AdamState::new(model);
        let out = self.settings.out_dir;
        let base = self.global_step;
        let (file, log_path) = (&mut self.log, &self.log_path);
        let mut sink = |mut r: LogRecord| -> Result<()> {
            r.step += base;
            serde_json::to_writer(&mut *file, &r)?;
            file.write_all(b"\n").map_err(|e| Error::io(log_path, e))
        };
        let (steps, final_loss) = run_substage(
            sub,
            &examples,
            model,
            &mut opt,
            &self.settings.optimizer,
            self.feats,
            &mut sink,
            out,
        )?;
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        self.global_step += steps;
        self.counter += 1;
        let path = out.join(format!("{:02}-{}.ckpt", self.counter, sub.name));
        let mut lin = lineage.to_vec();
        lin.push(sub.name.clone());
        Checkpoint {
            model: model.clone(),
            optimizer: Some(opt),
            lineage: lin.clone(),
            config_hash: self.settings.config_hash.clone(),
            metrics: BTreeMap::from([("final_loss".to_string(), final_loss)]),
        }
        .save(&path)?;
        log::info!("substage {} done: {steps} steps, loss {final_loss:.4}", sub.name);
        Ok(SubstageRecord {
            stage,
            name: sub.name.clone(),
            tasks: sub.tasks.clone(),
            examples: examples.len(),
            steps,
            final_loss,
            frozen: sub.freeze.frozen.iter().cloned().collect(),
            digests_before: before,
            digests_after: digests(model),
            checkpoint: path,
            lineage: lin,
        })
    }
}

/// Runs a whole plan, writing one checkpoint per substage and a JSON-lines
/// training log under `settings.out_dir`. Each substage starts a fresh AdamW
/// state and its own cosine schedule.
pub fn train(
    plan: &[StagePlan],
    data: &TrainData,
    model: Model,
    feats: &FeatureStore,
    settings: &TrainSettings<'_>,
) -> Result<TrainOutcome> {
    settings.optimizer.validate()?;
    let out = settings.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.jsonl");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut runner = Runner {
        data,
        feats,
        settings,
        log: std::io::BufWriter::new(file),
        log_path,
        global_step: 0,
        counter: 0,
    };

    let mut records: Vec<SubstageRecord> = Vec::new();
    let mut current = model;
    let mut current_path: Option<PathBuf> = None;
    let mut lineage: Vec<String> = Vec::new();
    let mut branch_outputs: BTreeMap<Task, (Model, PathBuf)> = BTreeMap::new();
    for stage in plan {
        for sub in &stage.substages {
            if stage.branches {
                let mut m = current.clone();
                let rec = runner.execute(sub, stage.stage, &mut m, &lineage)?;
                for &t in &sub.tasks {
                    branch_outputs.insert(t, (m.clone(), rec.checkpoint.clone()));
                }
                records.push(rec);
            } else {
                let rec = runner.execute(sub, stage.stage, &mut current, &lineage)?;
                lineage.push(sub.name.clone());
                current_path = Some(rec.checkpoint.clone());
                records.push(rec);
            }
        }
    }
    let mention_path = current_path
        .or_else(|| records.last().map(|r| r.checkpoint.clone()))
        .ok_or_else(|| Error::Training("plan has no substages".into()))?;
    let pick = |t: Task| {
        branch_outputs
            .get(&t)
            .cloned()
            .unwrap_or_else(|| (current.clone(), mention_path.clone()))
    };
    let (ta, ta_path) = pick(Task::TextArgument);
    let (va, va_path) = pick(Task::VisualArgument);
    let paths = BundlePaths {
        mention: mention_path.clone(),
        text_argument: ta_path,
        visual_argument: va_path,
    };
    let bundle_path = out.join("bundle.json");
    std::fs::write(&bundle_path, serde_json::to_vec_pretty(&paths)?).map_err(|e| Error::io(&bundle_path, e))?;
    Ok(TrainOutcome {
        records,
        bundle: ModelBundle {
            mention: current,
            text_argument: ta,
            visual_argument: va,
        },
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balance_downsamples_to_minimum() {
        let mut items = Vec::new();
        for (c, n) in [(1usize, 10usize), (2, 4), (3, 6), (0, 9)] {
            items.extend(std::iter::repeat_n(c, n));
        }
        let out = balance_events(&items, |&c| c, 7).unwrap();
        let mut hist = BTreeMap::new();
        for c in &out {
            *hist.entry(*c).or_insert(0) += 1;
        }
        assert_eq!(hist, BTreeMap::from([(0, 4), (1, 4), (2, 4), (3, 4)]));
        assert_eq!(out, balance_events(&items, |&c| c, 7).unwrap());
    }

    #[test]
    fn balanced_input_is_kept() {
        let items = vec![1, 2, 3, 1, 2, 3];
        assert_eq!(balance_events(&items, |&c| c, 0).unwrap(), items);
    }

    #[test]
    fn empty_input_rejected() {
        let items: Vec<usize> = vec![];
        assert!(balance_events(&items, |&c| c, 0).is_err());
    }
}
