use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Event types, their argument roles, and the activity-verb mapping used for
/// image-annotated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub event_types: Vec<String>,
    /// event type -> ordered role names
    pub roles: BTreeMap<String, Vec<String>>,
    /// activity verb -> event type
    #[serde(default)]
    pub verb_map: BTreeMap<String, String>,
    /// Optional subset used when training on the target label set only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_types: Option<Vec<String>>,
}

/// Which label set the text loader keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainOntology {
    Full,
    #[default]
    Target,
}

pub const NULL_LABEL: &str = "None";

impl Ontology {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ont: Ontology =
            serde_json::from_str(&text).map_err(|e| Error::Ontology(format!("{}: {e}", path.display())))?;
        ont.validate()?;
        Ok(ont)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.event_types {
            if !seen.insert(t) {
                return Err(Error::Ontology(format!("duplicate event type `{t}`")));
            }
            match self.roles.get(t) {
                Some(r) if !r.is_empty() => {}
                _ => return Err(Error::Ontology(format!("event type `{t}` has no roles"))),
            }
        }
        for t in self.roles.keys() {
            if !seen.contains(t) {
                return Err(Error::Ontology(format!("roles given for unknown type `{t}`")));
            }
        }
        for (verb, t) in &self.verb_map {
            if !seen.contains(t) {
                return Err(Error::Ontology(format!("verb `{verb}` maps to unknown type `{t}`")));
            }
        }
        if let Some(targets) = &self.target_types {
            for t in targets {
                if !seen.contains(t) {
                    return Err(Error::Ontology(format!("unknown target type `{t}`")));
                }
            }
        }
        Ok(())
    }

    pub fn has_type(&self, t: &str) -> bool {
        self.event_types.iter().any(|e| e == t)
    }

    pub fn role_valid(&self, event_type: &str, role: &str) -> bool {
        self.roles.get(event_type).is_some_and(|r| r.iter().any(|x| x == role))
    }

    /// Types kept under the given training label-set choice.
    pub fn trained_types(&self, which: TrainOntology) -> Vec<String> {
        match (which, &self.target_types) {
            (TrainOntology::Target, Some(t)) => self.event_types.iter().filter(|e| t.contains(e)).cloned().collect(),
            _ => self.event_types.clone(),
        }
    }

    pub fn labels(&self, which: TrainOntology) -> LabelSpace {
        LabelSpace::new(self, which)
    }
}

/// Class index spaces for the four classifiers. Index 0 is always the null class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub event_classes: Vec<String>,
    pub role_classes: Vec<String>,
    /// event class index -> role class indices valid for it (used only when masking).
    pub valid_roles: Vec<Vec<usize>>,
}

impl LabelSpace {
    pub fn new(ont: &Ontology, which: TrainOntology) -> Self {
        let types = ont.trained_types(which);
        let mut event_classes = vec![NULL_LABEL.to_string()];
        event_classes.extend(types.iter().cloned());

        let mut role_classes = vec![NULL_LABEL.to_string()];
        for t in &types {
            for r in &ont.roles[t] {
                if !role_classes.contains(r) {
                    role_classes.push(r.clone());
                }
            }
        }
        let mut valid_roles = vec![Vec::new()];
        for t in &types {
            let idx = ont.roles[t]
                .iter()
                .map(|r| role_classes.iter().position(|x| x == r).unwrap())
                .collect();
            valid_roles.push(idx);
        }
        Self {
            event_classes,
            role_classes,
            valid_roles,
        }
    }

    pub fn event_index(&self, t: &str) -> Option<usize> {
        self.event_classes.iter().position(|x| x == t)
    }

    pub fn role_index(&self, r: &str) -> Option<usize> {
        self.role_classes.iter().position(|x| x == r)
    }

    pub fn num_events(&self) -> usize {
        self.event_classes.len()
    }

    pub fn num_roles(&self) -> usize {
        self.role_classes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ont() -> Ontology {
        serde_json::from_str(
            r#"{"event_types":["Attack","Meet"],
                "roles":{"Attack":["Attacker","Place"],"Meet":["Entity","Place"]},
                "verb_map":{"bombing":"Attack"}}"#,
        )
        .unwrap()
    }

    #[test]
    fn label_space_unions_roles_with_null_first() {
        let ls = ont().labels(TrainOntology::Full);
        assert_eq!(ls.event_classes, vec!["None", "Attack", "Meet"]);
        assert_eq!(ls.role_classes, vec!["None", "Attacker", "Place", "Entity"]);
        assert_eq!(ls.valid_roles[2], vec![3, 2]);
    }

    #[test]
    fn verb_to_unknown_type_is_rejected() {
        let mut o = ont();
        o.verb_map.insert("x".into(), "Nope".into());
        assert!(matches!(o.validate(), Err(Error::Ontology(_))));
    }

    #[test]
    fn empty_role_list_is_rejected() {
        let mut o = ont();
        o.roles.insert("Meet".into(), vec![]);
        assert!(o.validate().is_err());
    }

    #[test]
    fn target_subset_restricts_trained_types() {
        let mut o = ont();
        o.target_types = Some(vec!["Meet".into()]);
        assert_eq!(o.trained_types(TrainOntology::Target), vec!["Meet"]);
        assert_eq!(o.trained_types(TrainOntology::Full).len(), 2);
    }
}
