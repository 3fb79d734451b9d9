//! Precision/recall/F1 with the dataset-profile conventions: weighted,
//! macro and micro aggregates over a configurable exclusion set.

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, HeadlineMetric, LabelTaxonomy};
use crate::error::{Error, Result};
use crate::model::CompmModel;

/// Row-major confusion counts: rows are gold classes, columns predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> ConfusionMatrix {
        let n = classes.len();
        ConfusionMatrix { classes, counts: vec![0; n * n] }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn add(&mut self, gold: usize, predicted: usize) {
        let n = self.num_classes();
        self.counts[gold * n + predicted] += 1;
    }

    pub fn count(&self, gold: usize, predicted: usize) -> usize {
        self.counts[gold * self.num_classes() + predicted]
    }

    /// Gold occurrences of class i.
    pub fn support(&self, i: usize) -> usize {
        let n = self.num_classes();
        (0..n).map(|j| self.counts[i * n + j]).sum()
    }

    /// Predictions of class j.
    pub fn predicted_total(&self, j: usize) -> usize {
        let n = self.num_classes();
        (0..n).map(|i| self.counts[i * n + j]).sum()
    }

    pub fn true_positives(&self, i: usize) -> usize {
        self.count(i, i)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Per-class scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Full report: per-class scores plus the three aggregates, all computed over
/// the non-excluded classes (an empty exclusion set covers everything).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub excluded: Vec<String>,
    pub confusion: ConfusionMatrix,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    safe_div(2.0 * p * r, p + r)
}

impl MetricsReport {
    /// Compute every score from a confusion matrix. `excluded` classes keep
    /// their per-class rows but are left out of all three aggregates.
    pub fn from_confusion(confusion: ConfusionMatrix, excluded: &[String]) -> Result<MetricsReport> {
        for e in excluded {
            if !confusion.classes.contains(e) {
                return Err(Error::Taxonomy(format!("excluded class `{e}` not in the matrix")));
            }
        }
        let n = confusion.num_classes();
        let mut per_class = Vec::with_capacity(n);
        for i in 0..n {
            let tp = confusion.true_positives(i) as f64;
            let precision = safe_div(tp, confusion.predicted_total(i) as f64);
            let recall = safe_div(tp, confusion.support(i) as f64);
            per_class.push(ClassScores {
                class: confusion.classes[i].clone(),
                precision,
                recall,
                f1: f1_of(precision, recall),
                support: confusion.support(i),
            });
        }

        let included: Vec<usize> =
            (0..n).filter(|i| !excluded.contains(&confusion.classes[*i])).collect();

        let support_sum: usize = included.iter().map(|&i| per_class[i].support).sum();
        let weighted_f1 = safe_div(
            included.iter().map(|&i| per_class[i].support as f64 * per_class[i].f1).sum::<f64>(),
            support_sum as f64,
        );
        let macro_f1 = safe_div(
            included.iter().map(|&i| per_class[i].f1).sum::<f64>(),
            included.len() as f64,
        );

        let tp: usize = included.iter().map(|&i| confusion.true_positives(i)).sum();
        let predicted: usize = included.iter().map(|&i| confusion.predicted_total(i)).sum();
        let micro_p = safe_div(tp as f64, predicted as f64);
        let micro_r = safe_div(tp as f64, support_sum as f64);
        let micro_f1 = f1_of(micro_p, micro_r);

        Ok(MetricsReport {
            per_class,
            weighted_f1,
            macro_f1,
            micro_f1,
            excluded: excluded.to_vec(),
            confusion,
        })
    }

    pub fn headline(&self, metric: HeadlineMetric) -> f64 {
        match metric {
            HeadlineMetric::WeightedF1 => self.weighted_f1,
            HeadlineMetric::MicroF1 => self.micro_f1,
        }
    }

    /// Aligned-column text table.
    pub fn render_table(&self) -> String {
        let name_width = self
            .per_class
            .iter()
            .map(|c| c.class.len())
            .chain(["class".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_width$}  {:>9}  {:>9}  {:>9}  {:>8}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for c in &self.per_class {
            let marker = if self.excluded.contains(&c.class) { " (excluded)" } else { "" };
            out.push_str(&format!(
                "{:<name_width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}{marker}\n",
                c.class, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str(&format!("{:<name_width$}  weighted {:.4}\n", "f1", self.weighted_f1));
        out.push_str(&format!("{:<name_width$}  macro    {:.4}\n", "", self.macro_f1));
        out.push_str(&format!("{:<name_width$}  micro    {:.4}\n", "", self.micro_f1));
        out
    }
}

/// Run the model over every turn of every conversation and score against the
/// gold labels of `taxonomy` (with its exclusion set applied).
pub fn evaluate(
    model: &CompmModel,
    corpus: &[Conversation],
    taxonomy: &LabelTaxonomy,
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::invalid_argument("evaluation corpus is empty".to_string()));
    }
    if taxonomy.num_classes() != model.num_classes() {
        return Err(Error::config(format!(
            "taxonomy `{}` has {} classes but the classifier head has {}",
            taxonomy.name,
            taxonomy.num_classes(),
            model.num_classes()
        )));
    }
    let mut confusion = ConfusionMatrix::new(taxonomy.classes.clone());
    for conv in corpus {
        for t in 1..=conv.len() {
            let gold_label = conv.utterances[t - 1].label.as_ref().ok_or_else(|| {
                Error::invalid_argument(format!(
                    "turn {t} of conversation `{}` has no gold label",
                    conv.id
                ))
            })?;
            let gold = taxonomy.label_index(gold_label)?;
            let trace = model.forward(conv, t)?;
            confusion.add(gold, trace.predicted);
        }
    }
    MetricsReport::from_confusion(confusion, &taxonomy.exclude_from_metrics)
}
