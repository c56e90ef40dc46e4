use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::fusion::Task;
use crate::model::{all_groups, head_group, IMAGE_ENCODER, TEXT_ENCODER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    None,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub frozen: BTreeSet<String>,
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self {
            frozen: BTreeSet::new(),
        }
    }

    pub fn of(groups: &[&str]) -> Self {
        Self {
            frozen: groups.iter().map(|g| g.to_string()).collect(),
        }
    }

    /// Everything except the listed groups.
    pub fn all_except(keep: &[String]) -> Self {
        Self {
            frozen: all_groups().into_iter().filter(|g| !keep.contains(g)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substage {
    pub name: String,
    pub tasks: Vec<Task>,
    pub modality: Modality,
    pub epochs: usize,
    pub freeze: FreezePolicy,
    pub resampler: Resampler,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: usize,
    /// Substages run in sequence, each starting from the previous one's
    /// output, unless `branches` is set: then every substage starts from the
    /// stage's input and yields its own checkpoint.
    pub branches: bool,
    pub substages: Vec<Substage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub stage1_visual_epochs: usize,
    pub stage1_text_epochs: usize,
    pub later_epochs: usize,
    pub stage2_repeats: usize,
    /// Epochs of the single stage in combined mode.
    pub combined_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            stage1_visual_epochs: 10,
            stage1_text_epochs: 5,
            later_epochs: 1,
            stage2_repeats: 1,
            combined_epochs: 10,
        }
    }
}

fn sub(name: String, task: Task, epochs: usize, freeze: FreezePolicy, resampler: Resampler) -> Substage {
    Substage {
        name,
        tasks: vec![task],
        modality: if task.is_textual() {
            Modality::Text
        } else {
            Modality::Visual
        },
        epochs,
        freeze,
        resampler,
    }
}

/// The four-stage gradual schedule.
pub fn default_schedule(cfg: &ScheduleConfig) -> Vec<StagePlan> {
    let both = FreezePolicy::of(&[TEXT_ENCODER, IMAGE_ENCODER]);
    let stage1 = StagePlan {
        stage: 1,
        branches: false,
        substages: vec![
            sub(
                "s1-visual-mention".into(),
                Task::VisualMention,
                cfg.stage1_visual_epochs,
                FreezePolicy::of(&[TEXT_ENCODER]),
                Resampler::None,
            ),
            sub(
                "s1-text-mention".into(),
                Task::TextMention,
                cfg.stage1_text_epochs,
                FreezePolicy::of(&[IMAGE_ENCODER]),
                Resampler::None,
            ),
        ],
    };
    let mut s2 = Vec::new();
    for r in 0..cfg.stage2_repeats.max(1) {
        let suffix = if cfg.stage2_repeats > 1 {
            format!("-r{}", r + 1)
        } else {
            String::new()
        };
        s2.push(sub(
            format!("s2-visual-mention{suffix}"),
            Task::VisualMention,
            cfg.later_epochs,
            both.clone(),
            Resampler::None,
        ));
        s2.push(sub(
            format!("s2-text-mention{suffix}"),
            Task::TextMention,
            cfg.later_epochs,
            both.clone(),
            Resampler::None,
        ));
    }
    let stage3 = StagePlan {
        stage: 3,
        branches: false,
        substages: vec![sub(
            "s3-visual-mention-balanced".into(),
            Task::VisualMention,
            cfg.later_epochs,
            FreezePolicy::all_except(&[head_group(Task::VisualMention)]),
            Resampler::Balanced,
        )],
    };
    let stage4 = StagePlan {
        stage: 4,
        branches: true,
        substages: vec![
            sub(
                "s4-visual-argument".into(),
                Task::VisualArgument,
                cfg.later_epochs,
                FreezePolicy::of(&[TEXT_ENCODER]),
                Resampler::None,
            ),
            sub(
                "s4-text-argument".into(),
                Task::TextArgument,
                cfg.later_epochs,
                FreezePolicy::of(&[IMAGE_ENCODER]),
                Resampler::None,
            ),
        ],
    };
    vec![
        stage1,
        StagePlan {
            stage: 2,
            branches: false,
            substages: s2,
        },
        stage3,
        stage4,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Combined,
    OneRound,
    NoAugmentation,
    NoAdapter,
}

impl std::str::FromStr for Ablation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "one-round" => Ok(Self::OneRound),
            "no-augmentation" => Ok(Self::NoAugmentation),
            "no-adapter" => Ok(Self::NoAdapter),
            _ => Err(crate::Error::Config(format!(
                "unknown ablation `{s}` (expected combined, one-round, no-augmentation or no-adapter)"
            ))),
        }
    }
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Combined => "combined",
            Self::OneRound => "one-round",
            Self::NoAugmentation => "no-augmentation",
            Self::NoAdapter => "no-adapter",
        }
    }
}

/// Plan for a run, optionally under an ablation.
pub fn plan_for(ablation: Option<Ablation>, cfg: &ScheduleConfig) -> Vec<StagePlan> {
    match ablation {
        Some(Ablation::Combined) => vec![StagePlan {
            stage: 1,
            branches: false,
            substages: vec![Substage {
                name: "combined".into(),
                tasks: Task::ALL.to_vec(),
                modality: Modality::Mixed,
                epochs: cfg.combined_epochs,
                freeze: FreezePolicy::none(),
                resampler: Resampler::None,
            }],
        }],
        Some(Ablation::OneRound) => default_schedule(cfg).into_iter().take(1).collect(),
        _ => default_schedule(cfg),
    }
}
