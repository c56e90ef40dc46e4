use serde::{Deserialize, Serialize};

use crate::data_model::{EventMention, Sentence};
use crate::error::{Error, Result};

/// Contiguous word span used as the text-to-image prompt for one event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpan {
    pub sentence_id: String,
    pub start: usize,
    /// inclusive
    pub end: usize,
    pub text: String,
}

/// What to do with arguments grounded outside the trigger's sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossSentencePolicy {
    Error,
    #[default]
    Exclude,
}

/// Shortest contiguous span covering the trigger word and every textual
/// argument of `event` that lies in `sentence`.
pub fn extract_event_prompt(
    sentence: &Sentence,
    event: &EventMention,
    policy: CrossSentencePolicy,
) -> Result<PromptSpan> {
    let trig = event
        .text_trigger
        .as_ref()
        .filter(|t| t.sentence_id == sentence.id)
        .ok_or_else(|| {
            Error::Contract(format!(
                "event `{}` has no text trigger in sentence `{}`",
                event.event_type, sentence.id
            ))
        })?;
    if trig.index >= sentence.len() {
        return Err(Error::Contract(format!(
            "trigger index {} outside sentence `{}` of length {}",
            trig.index,
            sentence.id,
            sentence.len()
        )));
    }
    let (mut lo, mut hi) = (trig.index, trig.index);
    for arg in &event.arguments {
        let Some(span) = &arg.text_grounding else { continue };
        if span.sentence_id != sentence.id {
            match policy {
                CrossSentencePolicy::Exclude => {
                    log::debug!(
                        "argument `{}` in sentence `{}` excluded from prompt for `{}`",
                        arg.role,
                        span.sentence_id,
                        sentence.id
                    );
                    continue;
                }
                CrossSentencePolicy::Error => {
                    return Err(Error::CrossSentence(format!(
                        "argument `{}` lies in `{}`, trigger in `{}`",
                        arg.role, span.sentence_id, sentence.id
                    )))
                }
            }
        }
        if span.end >= sentence.len() || span.start > span.end {
            return Err(Error::Contract(format!(
                "argument span ({}, {}) outside sentence `{}`",
                span.start, span.end, sentence.id
            )));
        }
        lo = lo.min(span.start);
        hi = hi.max(span.end);
    }
    Ok(PromptSpan {
        sentence_id: sentence.id.clone(),
        start: lo,
        end: hi,
        text: sentence.words[lo..=hi].join(" "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ArgumentMention, TextSpan};

    fn sentence(n: usize) -> Sentence {
        Sentence {
            id: "s".into(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
            entities: vec![],
        }
    }

    fn arg(sid: &str, start: usize, end: usize) -> ArgumentMention {
        ArgumentMention::textual(
            "R",
            TextSpan {
                sentence_id: sid.into(),
                start,
                end,
            },
        )
    }

    #[test]
    fn span_covers_trigger_and_arguments() {
        let mut ev = EventMention::textual("E", "s", 5);
        ev.arguments = vec![arg("s", 2, 3), arg("s", 7, 8)];
        let p = extract_event_prompt(&sentence(10), &ev, CrossSentencePolicy::Error).unwrap();
        assert_eq!((p.start, p.end), (2, 8));
        assert_eq!(p.text, "w2 w3 w4 w5 w6 w7 w8");
    }

    #[test]
    fn trigger_only_event_is_a_single_word() {
        let ev = EventMention::textual("E", "s", 4);
        let p = extract_event_prompt(&sentence(6), &ev, CrossSentencePolicy::Error).unwrap();
        assert_eq!((p.start, p.end), (4, 4));
    }

    #[test]
    fn cross_sentence_arguments_follow_policy() {
        let mut ev = EventMention::textual("E", "s", 4);
        ev.arguments = vec![arg("other", 0, 0), arg("s", 5, 5)];
        let s = sentence(6);
        assert!(matches!(
            extract_event_prompt(&s, &ev, CrossSentencePolicy::Error),
            Err(Error::CrossSentence(_))
        ));
        let p = extract_event_prompt(&s, &ev, CrossSentencePolicy::Exclude).unwrap();
        assert_eq!((p.start, p.end), (4, 5));
    }

    #[test]
    fn trigger_in_other_sentence_is_rejected() {
        let ev = EventMention::textual("E", "elsewhere", 1);
        assert!(extract_event_prompt(&sentence(3), &ev, CrossSentencePolicy::Exclude).is_err());
    }
}
