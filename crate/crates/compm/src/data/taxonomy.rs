//! Label inventories for the supported dataset profiles, with metric
//! exclusion sets and emotion→sentiment grouping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which aggregate drives dev-best model selection and headline reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadlineMetric {
    WeightedF1,
    MicroF1,
}

/// Ordered class names plus the metric conventions of a dataset profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    pub name: String,
    pub classes: Vec<String>,
    /// Classes removed from micro/macro aggregation (weighted F1 keeps them).
    #[serde(default)]
    pub exclude_from_metrics: Vec<String>,
    /// Optional total map from a finer inventory onto `classes`.
    #[serde(default)]
    pub sentiment_grouping: Option<HashMap<String, String>>,
    #[serde(default = "default_headline")]
    pub headline: HeadlineMetric,
}

fn default_headline() -> HeadlineMetric {
    HeadlineMetric::WeightedF1
}

impl LabelTaxonomy {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Taxonomy("taxonomy has no classes".to_string()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::Taxonomy(format!("duplicate class `{c}`")));
            }
        }
        for e in &self.exclude_from_metrics {
            if !self.classes.contains(e) {
                return Err(Error::Taxonomy(format!(
                    "excluded class `{e}` is not in the class list"
                )));
            }
        }
        if let Some(grouping) = &self.sentiment_grouping {
            for (src, dst) in grouping {
                if !self.classes.contains(dst) {
                    return Err(Error::Taxonomy(format!(
                        "grouping target `{dst}` for `{src}` is not a class"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Class indices excluded from micro/macro aggregation.
    pub fn excluded_indices(&self) -> Vec<usize> {
        self.exclude_from_metrics
            .iter()
            .filter_map(|e| self.class_index(e))
            .collect()
    }

    /// Map a raw label to its canonical class name, applying the grouping map
    /// when the label belongs to the finer inventory.
    pub fn canonicalize(&self, raw: &str) -> Result<String> {
        if self.classes.iter().any(|c| c == raw) {
            return Ok(raw.to_string());
        }
        if let Some(grouping) = &self.sentiment_grouping {
            if let Some(target) = grouping.get(raw) {
                return Ok(target.clone());
            }
        }
        Err(Error::UnknownLabel {
            label: raw.to_string(),
            valid: self.classes.clone(),
        })
    }

    /// Canonical class index for a raw label.
    pub fn label_index(&self, raw: &str) -> Result<usize> {
        let canonical = self.canonicalize(raw)?;
        Ok(self.class_index(&canonical).expect("canonical label is a class"))
    }
}

/// Map an emotion label through the taxonomy's grouping to its sentiment class.
pub fn map_to_sentiment(taxonomy: &LabelTaxonomy, emotion_label: &str) -> Result<String> {
    let grouping = taxonomy.sentiment_grouping.as_ref().ok_or_else(|| {
        Error::Taxonomy(format!("taxonomy `{}` defines no sentiment grouping", taxonomy.name))
    })?;
    // Labels that are already sentiment classes pass through.
    if taxonomy.classes.iter().any(|c| c == emotion_label) {
        return Ok(emotion_label.to_string());
    }
    grouping.get(emotion_label).cloned().ok_or_else(|| {
        Error::Taxonomy(format!(
            "label `{emotion_label}` is not covered by the `{}` grouping",
            taxonomy.name
        ))
    })
}

fn classes(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Built-in dataset profiles.
pub fn builtin_taxonomy(name: &str) -> Option<LabelTaxonomy> {
    let tax = match name {
        "iemocap" => LabelTaxonomy {
            name: name.to_string(),
            classes: classes(&["happy", "sad", "angry", "excited", "frustrated", "neutral"]),
            exclude_from_metrics: vec![],
            sentiment_grouping: None,
            headline: HeadlineMetric::WeightedF1,
        },
        "dailydialog" => LabelTaxonomy {
            name: name.to_string(),
            classes: classes(&["anger", "disgust", "fear", "joy", "surprise", "sadness", "neutral"]),
            // Trained with all 7 classes; neutral is dropped only at metric time.
            exclude_from_metrics: vec!["neutral".to_string()],
            sentiment_grouping: None,
            headline: HeadlineMetric::MicroF1,
        },
        "meld_emotion" => LabelTaxonomy {
            name: name.to_string(),
            classes: classes(&["anger", "disgust", "sadness", "joy", "surprise", "fear", "neutral"]),
            exclude_from_metrics: vec![],
            sentiment_grouping: None,
            headline: HeadlineMetric::WeightedF1,
        },
        "meld_sentiment" => LabelTaxonomy {
            name: name.to_string(),
            classes: classes(&["positive", "negative", "neutral"]),
            exclude_from_metrics: vec![],
            sentiment_grouping: None,
            headline: HeadlineMetric::WeightedF1,
        },
        "emorynlp_emotion" => LabelTaxonomy {
            name: name.to_string(),
            classes: classes(&["joyful", "peaceful", "powerful", "scared", "mad", "sad", "neutral"]),
            exclude_from_metrics: vec![],
            sentiment_grouping: None,
            headline: HeadlineMetric::WeightedF1,
        },
        "emorynlp_sentiment" => {
            let grouping: HashMap<String, String> = [
                ("joyful", "positive"),
                ("peaceful", "positive"),
                ("powerful", "positive"),
                ("scared", "negative"),
                ("mad", "negative"),
                ("sad", "negative"),
                ("neutral", "neutral"),
            ]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
            LabelTaxonomy {
                name: name.to_string(),
                classes: classes(&["positive", "negative", "neutral"]),
                exclude_from_metrics: vec![],
                sentiment_grouping: Some(grouping),
                headline: HeadlineMetric::WeightedF1,
            }
        }
        _ => return None,
    };
    Some(tax)
}
