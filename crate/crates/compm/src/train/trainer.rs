//! The fine-tuning loop: shuffled conversation order, per-turn targets
//! batched into one cross-entropy per step, clip → step → schedule, dev-best
//! checkpoint selection, and optional multi-run averaging.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, evaluate, lr_at, AdamW, AdamWConfig, MetricsReport, ScheduleConfig};
use crate::checkpoint;
use crate::data::{Conversation, HeadlineMetric, LabelTaxonomy};
use crate::error::{Error, Result};
use crate::model::CompmModel;
use crate::nn::{derive_stream, seeded_rng};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of total steps spent on linear warmup.
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.1,
            clip_norm: 10.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

/// Everything one training run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub seed: u64,
    pub headline: HeadlineMetric,
    pub epochs: Vec<EpochRecord>,
    /// Per-optimizer-step training losses, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    /// Test metrics of the dev-best model, when a test split was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
}

type ParamSnapshot = Vec<(String, Vec<f64>)>;

fn snapshot(params: &[(String, Tensor)]) -> ParamSnapshot {
    params.iter().map(|(n, t)| (n.clone(), t.to_vec())).collect()
}

fn restore(params: &[(String, Tensor)], snap: &ParamSnapshot) {
    for ((name, tensor), (snap_name, data)) in params.iter().zip(snap) {
        debug_assert_eq!(name, snap_name);
        tensor.set_data(data);
    }
}

/// Fine-tune `model` on `train_set`, selecting the epoch with the best dev
/// headline metric. The dev-best parameters are restored into the model (and
/// written to `checkpoint_dir/best.ckpt` when a directory is given) before
/// the optional test evaluation.
pub fn train(
    model: &CompmModel,
    train_set: &[Conversation],
    dev_set: &[Conversation],
    test_set: Option<&[Conversation]>,
    taxonomy: &LabelTaxonomy,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainRunRecord> {
    if train_set.is_empty() {
        return Err(Error::invalid_argument("training corpus is empty".to_string()));
    }
    if dev_set.is_empty() {
        return Err(Error::invalid_argument("dev corpus is empty".to_string()));
    }
    if taxonomy.num_classes() != model.num_classes() {
        return Err(Error::config(format!(
            "taxonomy `{}` has {} classes but the classifier head has {}",
            taxonomy.name,
            taxonomy.num_classes(),
            model.num_classes()
        )));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::invalid_argument("epochs and batch_size must be positive".to_string()));
    }

    // Gold class indices, resolved up front so label errors surface before
    // any compute.
    let mut gold: Vec<Vec<usize>> = Vec::with_capacity(train_set.len());
    for conv in train_set {
        let mut per_turn = Vec::with_capacity(conv.len());
        for (i, u) in conv.utterances.iter().enumerate() {
            let label = u.label.as_ref().ok_or_else(|| {
                Error::invalid_argument(format!(
                    "turn {} of training conversation `{}` has no gold label",
                    i + 1,
                    conv.id
                ))
            })?;
            per_turn.push(taxonomy.label_index(label)?);
        }
        gold.push(per_turn);
    }

    let total_targets: usize = train_set.iter().map(|c| c.len()).sum();
    let steps_per_epoch = total_targets.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = ScheduleConfig::new(
        ((total_steps as f64) * config.warmup_fraction).round() as usize,
        total_steps,
        config.optimizer.lr,
    )?;

    let trainable = model.trainable_parameters();
    let all_params = model.named_parameters();
    let mut optimizer = AdamW::new(config.optimizer, trainable.clone());
    let mut rng = seeded_rng(config.seed);

    let best_path = checkpoint_dir.map(|d| d.join("best.ckpt"));
    let mut best: Option<(usize, f64, ParamSnapshot)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);

    for epoch in 1..=config.epochs {
        let mut conv_order: Vec<usize> = (0..train_set.len()).collect();
        conv_order.shuffle(&mut rng);
        let targets: Vec<(usize, usize)> = conv_order
            .iter()
            .flat_map(|&ci| (1..=train_set[ci].len()).map(move |t| (ci, t)))
            .collect();

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in targets.chunks(config.batch_size) {
            let tape = Tape::seeded(derive_stream(&mut rng));
            let mut rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &(ci, t) in chunk {
                rows.push(model.forward_logits(&tape, &train_set[ci], t, true)?);
                labels.push(gold[ci][t - 1]);
            }
            let logits = tape.concat(&rows, 0)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step: optimizer.step_count(),
                    last_good: best.as_ref().and(best_path.clone()),
                });
            }
            optimizer.zero_grads();
            tape.backward(&loss)?;
            clip_gradients(&trainable, config.clip_norm);
            let lr = lr_at(&schedule, optimizer.step_count());
            optimizer.step(lr)?;
            step_losses.push(loss_value);
            epoch_loss += loss_value;
            batches += 1;
        }

        let dev_report = evaluate(model, dev_set, taxonomy)?;
        let dev_metric = dev_report.headline(taxonomy.headline);
        epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            dev_metric,
        });
        let improved = best.as_ref().map_or(true, |(_, m, _)| dev_metric > *m);
        if improved {
            best = Some((epoch, dev_metric, snapshot(&all_params)));
            if let Some(path) = &best_path {
                checkpoint::save_model(path, model, Some(taxonomy))?;
            }
        }
    }

    let (best_epoch, best_dev_metric, best_params) = best.expect("at least one epoch ran");
    restore(&all_params, &best_params);

    let test = match test_set {
        Some(ts) if !ts.is_empty() => Some(evaluate(model, ts, taxonomy)?),
        _ => None,
    };

    Ok(TrainRunRecord {
        seed: config.seed,
        headline: taxonomy.headline,
        epochs,
        step_losses,
        best_epoch,
        best_dev_metric,
        checkpoint_path: best_path,
        test,
    })
}

/// Aggregate of repeated runs with different seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiRunRecord {
    pub runs: Vec<TrainRunRecord>,
    pub mean_best_dev_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_test_headline: Option<f64>,
}

/// Run training `runs` times with seeds `seed, seed+1, …`, building a fresh
/// model per run, and report per-run records plus means.
pub fn train_multi<F>(
    build_model: F,
    runs: usize,
    train_set: &[Conversation],
    dev_set: &[Conversation],
    test_set: Option<&[Conversation]>,
    taxonomy: &LabelTaxonomy,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<MultiRunRecord>
where
    F: Fn(u64) -> Result<CompmModel>,
{
    if runs == 0 {
        return Err(Error::invalid_argument("runs must be positive".to_string()));
    }
    let mut records = Vec::with_capacity(runs);
    for r in 0..runs {
        let run_seed = config.seed + r as u64;
        let model = build_model(run_seed)?;
        let run_dir = checkpoint_dir.map(|d| d.join(format!("run{r}")));
        let run_config = TrainConfig { seed: run_seed, ..config.clone() };
        let record = train(
            &model,
            train_set,
            dev_set,
            test_set,
            taxonomy,
            &run_config,
            run_dir.as_deref(),
        )?;
        records.push(record);
    }
    let mean_best_dev_metric =
        records.iter().map(|r| r.best_dev_metric).sum::<f64>() / runs as f64;
    let test_values: Vec<f64> = records
        .iter()
        .filter_map(|r| r.test.as_ref().map(|t| t.headline(r.headline)))
        .collect();
    let mean_test_headline = (test_values.len() == runs)
        .then(|| test_values.iter().sum::<f64>() / runs as f64);
    Ok(MultiRunRecord { runs: records, mean_best_dev_metric, mean_test_headline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Utterance, Vocabulary};
    use crate::model::VariantMode;
    use crate::nn::EncoderConfig;

    /// Toy task: the label is the cue word carried by each utterance.
    fn cue_corpus(n_convs: usize, seed: u64) -> (Vec<Conversation>, LabelTaxonomy) {
        let classes = ["red", "blue", "green"];
        let mut rng = seeded_rng(seed);
        let convs = (0..n_convs)
            .map(|i| {
                let turns: Vec<Utterance> = (0..4)
                    .map(|j| {
                        let c = classes[(rng.gen::<u32>() as usize) % 3];
                        Utterance {
                            speaker: format!("s{}", j % 2),
                            text: format!("word filler cue {c} here"),
                            label: Some(c.to_string()),
                        }
                    })
                    .collect();
                Conversation { id: format!("c{i}"), utterances: turns }
            })
            .collect();
        let taxonomy = LabelTaxonomy {
            name: "cue".to_string(),
            classes: classes.iter().map(|s| s.to_string()).collect(),
            exclude_from_metrics: vec![],
            sentiment_grouping: None,
            headline: HeadlineMetric::WeightedF1,
        };
        (convs, taxonomy)
    }

    use rand::Rng;

    fn tiny_model(corpus: &[Conversation], classes: usize, seed: u64) -> CompmModel {
        let vocab = Vocabulary::build(
            corpus.iter().flat_map(|c| c.utterances.iter().map(|u| u.text.as_str())),
            4,
        );
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 16,
            max_positions: 96,
            dropout_rate: 0.1,
        };
        let mut rng = seeded_rng(seed);
        CompmModel::new(&mut rng, VariantMode::Compm, Some(&cfg), Some(&cfg), classes, vocab)
            .unwrap()
    }

    fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            optimizer: AdamWConfig { lr: 5e-3, ..Default::default() },
            warmup_fraction: 0.1,
            clip_norm: 10.0,
            seed,
        }
    }

    #[test]
    fn loss_decreases_and_dev_best_is_maximal() {
        let (convs, taxonomy) = cue_corpus(12, 3);
        let (train_set, dev_set) = convs.split_at(9);
        let model = tiny_model(&convs, 3, 1);
        let record = train(
            &model,
            train_set,
            dev_set,
            None,
            &taxonomy,
            &quick_config(6, 11),
            None,
        )
        .unwrap();
        assert!(record.epochs.last().unwrap().train_loss < record.epochs[0].train_loss);
        for e in &record.epochs {
            assert!(record.best_dev_metric >= e.dev_metric);
        }
        assert_eq!(record.step_losses.len(), record.epochs.len() * 9 * 4 / 8 + record.epochs.len());
    }

    #[test]
    fn same_seed_reproduces_loss_sequence_and_metrics() {
        let (convs, taxonomy) = cue_corpus(8, 4);
        let (train_set, dev_set) = convs.split_at(6);
        let cfg = quick_config(3, 21);

        let model_a = tiny_model(&convs, 3, 5);
        let rec_a = train(&model_a, train_set, dev_set, Some(dev_set), &taxonomy, &cfg, None).unwrap();
        let model_b = tiny_model(&convs, 3, 5);
        let rec_b = train(&model_b, train_set, dev_set, Some(dev_set), &taxonomy, &cfg, None).unwrap();

        assert_eq!(rec_a.step_losses.len(), rec_b.step_losses.len());
        for (a, b) in rec_a.step_losses.iter().zip(&rec_b.step_losses) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            rec_a.test.as_ref().unwrap().weighted_f1.to_bits(),
            rec_b.test.as_ref().unwrap().weighted_f1.to_bits()
        );
    }

    #[test]
    fn frozen_variant_leaves_memory_encoder_untouched() {
        let (convs, taxonomy) = cue_corpus(6, 8);
        let (train_set, dev_set) = convs.split_at(4);
        let vocab = Vocabulary::build(
            convs.iter().flat_map(|c| c.utterances.iter().map(|u| u.text.as_str())),
            4,
        );
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 16,
            max_positions: 96,
            dropout_rate: 0.1,
        };
        let mut rng = seeded_rng(7);
        let frozen = CompmModel::new(
            &mut rng,
            VariantMode::CompmFrozen,
            Some(&cfg),
            Some(&cfg),
            3,
            vocab,
        )
        .unwrap();

        let before = frozen.pm_param_bytes();
        train(&frozen, train_set, dev_set, None, &taxonomy, &quick_config(2, 31), None).unwrap();
        assert_eq!(before, frozen.pm_param_bytes(), "frozen memory encoder drifted");
    }

    #[test]
    fn multi_run_averages_across_seeds() {
        let (convs, taxonomy) = cue_corpus(6, 15);
        let (train_set, dev_set) = convs.split_at(4);
        let record = train_multi(
            |seed| Ok(tiny_model(&convs, 3, seed)),
            2,
            train_set,
            dev_set,
            None,
            &taxonomy,
            &quick_config(2, 40),
            None,
        )
        .unwrap();
        assert_eq!(record.runs.len(), 2);
        assert_eq!(record.runs[0].seed, 40);
        assert_eq!(record.runs[1].seed, 41);
        let mean = (record.runs[0].best_dev_metric + record.runs[1].best_dev_metric) / 2.0;
        assert!((record.mean_best_dev_metric - mean).abs() < 1e-15);
    }

    #[test]
    fn empty_splits_are_argument_errors() {
        let (convs, taxonomy) = cue_corpus(4, 2);
        let model = tiny_model(&convs, 3, 1);
        let cfg = quick_config(1, 1);
        assert!(matches!(
            train(&model, &[], &convs, None, &taxonomy, &cfg, None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            train(&model, &convs, &[], None, &taxonomy, &cfg, None),
            Err(Error::InvalidArgument(_))
        ));
    }
}
