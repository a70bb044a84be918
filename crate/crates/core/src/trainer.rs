//! Mini-batch training with validation-based model selection, the
//! noise-aware variant, and the model × condition evaluation matrix.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, FeatureSequence};
use crate::diffcore::{AdamState, Tensor, DEFAULT_LR};
use crate::error::{Error, Result};
use crate::metrics::{EmotionTriple, LossWeights};
use crate::models::{backward_batch, evaluate, forward_batch, EmotionEstimate, Model, Predictor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation score.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Flagged train examples use their corrupted inputs.
    pub noise_aware: bool,
    /// Fit input standardization on the training inputs before epoch 1.
    pub normalize_inputs: bool,
    /// Start the output bias at the training label means.
    pub init_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: DEFAULT_LR,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            weights: LossWeights::default(),
            noise_aware: false,
            normalize_inputs: true,
            init_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch_size must be >= 2 for the CCC loss, got {}",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ccc: [f64; 3],
    pub valid_ccc_mean: f64,
}

pub fn write_history<W: Write>(history: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "epoch,train_loss,valid_ccc_mean")?;
    for r in history {
        writeln!(w, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.valid_ccc_mean)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters from the best validation epoch.
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_ccc: [f64; 3],
}

/// Loss and gradients for one mini-batch given the model's estimates.
pub struct BatchGrad {
    pub loss: f64,
    pub d_triples: Vec<[f64; 3]>,
    pub d_embeddings: Option<Vec<Vec<f64>>>,
}

/// A training objective. `indices` point into the training set.
pub trait Objective {
    fn batch(
        &mut self,
        indices: &[usize],
        labels: &[EmotionTriple],
        estimates: &[EmotionEstimate],
    ) -> Result<BatchGrad>;
}

/// The composite batch CCC loss.
pub struct CccObjective(pub LossWeights);

impl Objective for CccObjective {
    fn batch(
        &mut self,
        _: &[usize],
        labels: &[EmotionTriple],
        est: &[EmotionEstimate],
    ) -> Result<BatchGrad> {
        let (loss, d) = ccc_loss_and_grads(labels, est, self.0)?;
        Ok(BatchGrad {
            loss,
            d_triples: d,
            d_embeddings: None,
        })
    }
}

/// Batch CCC loss and its gradient w.r.t. each predicted triple.
pub fn ccc_loss_and_grads(
    labels: &[EmotionTriple],
    est: &[EmotionEstimate],
    w: LossWeights,
) -> Result<(f64, Vec<[f64; 3]>)> {
    let pred = Tensor::from_vec(
        &[est.len(), 3],
        est.iter().flat_map(|e| e.triple.to_array()).collect(),
    )?;
    let target = Tensor::from_vec(
        &[labels.len(), 3],
        labels.iter().flat_map(|l| l.to_array()).collect(),
    )?;
    let (loss, g) = crate::diffcore::ccc_loss_grad(&pred, &target, w)?;
    Ok((
        loss,
        g.data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
    ))
}

/// Epoch batches: a seeded shuffle of `0..n`, cut into `batch_size` chunks;
/// a trailing chunk smaller than 2 is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Inputs a training example contributes under `cfg`.
pub fn training_inputs<'a>(ex: &'a Example, cfg: &TrainConfig) -> Result<&'a [FeatureSequence]> {
    if cfg.noise_aware && ex.noise_aware {
        ex.corrupted.as_deref().ok_or_else(|| {
            Error::invalid(format!(
                "noise-aware example {:?} has no corrupted variant",
                ex.id
            ))
        })
    } else {
        Ok(&ex.inputs)
    }
}

/// Trains `model` with the batch CCC loss.
pub fn train<M: Model>(
    model: M,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    train_with(model, train, valid, cfg, &mut CccObjective(cfg.weights))
}

/// Training loop with a custom objective. The returned model is the one
/// with the highest mean validation CCC.
pub fn train_with<M: Model, O: Objective>(
    mut model: M,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    objective: &mut O,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    model.check_trainable()?;
    if train.len() < 2 {
        return Err(Error::invalid(format!(
            "training split needs at least 2 utterances, got {}",
            train.len()
        )));
    }
    if valid.len() < 2 {
        return Err(Error::invalid(format!(
            "validation split needs at least 2 utterances, got {}",
            valid.len()
        )));
    }
    let inputs: Vec<&[FeatureSequence]> = train
        .iter()
        .map(|e| training_inputs(e, cfg))
        .collect::<Result<_>>()?;
    let labels: Vec<EmotionTriple> = train.iter().map(|e| e.labels).collect();
    if cfg.normalize_inputs {
        model.fit_normalization(&inputs)?;
    }
    if cfg.init_output_bias {
        let mut mean = [0.0; 3];
        for l in &labels {
            for (m, v) in mean.iter_mut().zip(l.to_array()) {
                *m += v / labels.len() as f64;
            }
        }
        model.set_output_bias(mean);
    }
    // surface width mismatches before any update
    model.forward(inputs[0])?;
    model.forward(&valid[0].inputs)?;

    let mut adam = AdamState::new(&model.parameters(), cfg.lr);
    let mut history = Vec::new();
    let mut best: Option<(M, usize, [f64; 3], f64)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let batch: Vec<&[FeatureSequence]> = idx.iter().map(|&i| inputs[i]).collect();
            let y: Vec<EmotionTriple> = idx.iter().map(|&i| labels[i]).collect();
            let (est, traces) = forward_batch(&model, &batch)?;
            let g = objective.batch(idx, &y, &est)?;
            let grads = backward_batch(&model, &traces, &g.d_triples, g.d_embeddings.as_deref());
            let mut params = model.parameters_mut();
            for (p, g) in params.iter_mut().zip(grads) {
                p.grad = g;
            }
            adam.step(&mut params);
            total += g.loss;
        }
        let valid_ccc = evaluate(&model, valid)?;
        let mean = valid_ccc.iter().sum::<f64>() / 3.0;
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len().max(1) as f64,
            valid_ccc,
            valid_ccc_mean: mean,
        });
        if best.as_ref().is_none_or(|b| mean > b.3) {
            best = Some((model.clone(), epoch, valid_ccc, mean));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (mut model, best_epoch, best_valid_ccc, _) = best.expect("at least one epoch ran");
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_valid_ccc,
    })
}

/// A model entered in the condition matrix, reading the listed input
/// streams of each example.
pub struct MatrixEntry<'a> {
    pub system: String,
    pub model: &'a dyn Predictor,
    pub streams: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub system: String,
    pub condition: String,
    pub ccc: [f64; 3],
}

/// Examples restricted to the given input streams.
pub fn select_streams(examples: &[Example], streams: &[usize]) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|e| {
            let inputs = streams
                .iter()
                .map(|&s| {
                    e.inputs.get(s).cloned().ok_or_else(|| {
                        Error::invalid(format!("example {:?} has no input stream {s}", e.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Example {
                inputs,
                corrupted: None,
                ..e.clone()
            })
        })
        .collect()
}

/// CCC for every model under every requested condition, models outermost.
pub fn run_condition_matrix(
    models: &[MatrixEntry<'_>],
    conditions: &[String],
    sets: &BTreeMap<String, Vec<Example>>,
) -> Result<Vec<ConditionRow>> {
    for c in conditions {
        if !sets.contains_key(c) {
            return Err(Error::MissingCondition(c.clone()));
        }
    }
    let mut rows = Vec::with_capacity(models.len() * conditions.len());
    for m in models {
        for c in conditions {
            let ex = select_streams(&sets[c], &m.streams)?;
            rows.push(ConditionRow {
                system: m.system.clone(),
                condition: c.clone(),
                ccc: evaluate(m.model, &ex)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_condition_report<W: Write>(rows: &[ConditionRow], mut w: W) -> Result<()> {
    writeln!(w, "system,condition,act_ccc,val_ccc,dom_ccc")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6}",
            r.system, r.condition, r.ccc[0], r.ccc[1], r.ccc[2]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Modality, Split, SyntheticSpec};
    use crate::models::{build_tcgru, ccc_batch_loss, TcGruConfig, TcGruModel};

    fn tiny_corpus() -> crate::data::SyntheticCorpus {
        generate_synthetic(&SyntheticSpec {
            n_train: 48,
            n_valid: 16,
            n_eval: 16,
            frames: (4, 6),
            lexical_frames: (3, 4),
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_model(input_dim: usize, seed: u64) -> TcGruModel {
        build_tcgru(
            &TcGruConfig {
                input_dim,
                tc_channels: 6,
                tc_kernel: 3,
                gru_hidden: 6,
                embed_dim: 8,
                output_dim: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            lr: 0.005,
            max_epochs: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_shuffle_and_drop_singletons() {
        let b = epoch_batches(33, 32, 0, 1);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 32);
        let b = epoch_batches(34, 32, 0, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 2]);
        let mut all: Vec<usize> = epoch_batches(11, 3, 5, 2).concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(epoch_batches(50, 8, 3, 1), epoch_batches(50, 8, 3, 1));
        assert_ne!(epoch_batches(50, 8, 3, 1), epoch_batches(50, 8, 3, 2));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let c = tiny_corpus();
        let train = c.examples(Split::Train, Modality::Acoustic);
        let valid = c.examples(Split::Valid, Modality::Acoustic);
        let cfg = TrainConfig {
            lr: 0.0,
            patience: 100,
            ..quick(1)
        };
        let out = train_model(tiny_model(16, 1), &train, &valid, &cfg);
        let first = out.history[0].valid_ccc;
        assert!(out.history.iter().all(|r| r.valid_ccc == first));
        assert_eq!(out.history.len(), 4);
        // normalization and bias init happen before epoch 1, so compare
        // against a zero-epoch reference
        let mut reference = tiny_model(16, 1);
        let refs: Vec<&[FeatureSequence]> = train.iter().map(|e| e.inputs.as_slice()).collect();
        reference.fit_normalization(&refs).unwrap();
        let mut mean = [0.0; 3];
        for e in &train {
            for (m, v) in mean.iter_mut().zip(e.labels.to_array()) {
                *m += v / train.len() as f64;
            }
        }
        reference.set_output_bias(mean);
        assert_eq!(out.model, reference);
    }

    fn train_model(
        m: TcGruModel,
        train: &[Example],
        valid: &[Example],
        cfg: &TrainConfig,
    ) -> TrainOutcome<TcGruModel> {
        super::train(m, train, valid, cfg).unwrap()
    }

    #[test]
    fn identical_seed_identical_history() {
        let c = tiny_corpus();
        let train = c.examples(Split::Train, Modality::Acoustic);
        let valid = c.examples(Split::Valid, Modality::Acoustic);
        let a = train_model(tiny_model(16, 2), &train, &valid, &quick(7));
        let b = train_model(tiny_model(16, 2), &train, &valid, &quick(7));
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn selected_model_scores_the_history_maximum() {
        let c = tiny_corpus();
        let train = c.examples(Split::Train, Modality::Acoustic);
        let valid = c.examples(Split::Valid, Modality::Acoustic);
        let out = train_model(
            tiny_model(16, 3),
            &train,
            &valid,
            &TrainConfig {
                max_epochs: 6,
                ..quick(3)
            },
        );
        let max = out
            .history
            .iter()
            .map(|r| r.valid_ccc_mean)
            .fold(f64::NEG_INFINITY, f64::max);
        let again = evaluate(&out.model, &valid).unwrap();
        assert_eq!(again, out.best_valid_ccc);
        assert_eq!(again.iter().sum::<f64>() / 3.0, max);
        assert_eq!(out.history[out.best_epoch - 1].valid_ccc_mean, max);
    }

    #[test]
    fn patience_stops_early() {
        let c = tiny_corpus();
        let train = c.examples(Split::Train, Modality::Acoustic);
        let valid = c.examples(Split::Valid, Modality::Acoustic);
        let cfg = TrainConfig {
            lr: 0.0,
            patience: 2,
            max_epochs: 20,
            ..quick(1)
        };
        let out = train_model(tiny_model(16, 1), &train, &valid, &cfg);
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn fixed_batch_loss_decreases_over_first_steps() {
        let c = tiny_corpus();
        let train = c.examples(Split::Train, Modality::Acoustic);
        let batch: Vec<&[FeatureSequence]> =
            train[..16].iter().map(|e| e.inputs.as_slice()).collect();
        let labels: Vec<EmotionTriple> = train[..16].iter().map(|e| e.labels).collect();
        for seed in 0..3 {
            let mut m = tiny_model(16, seed);
            m.fit_normalization(&batch).unwrap();
            let mut adam = AdamState::new(&m.parameters(), 0.005);
            let mut losses = Vec::new();
            for _ in 0..6 {
                let (loss, grads) =
                    ccc_batch_loss(&m, &batch, &labels, LossWeights::default()).unwrap();
                losses.push(loss);
                let mut ps = m.parameters_mut();
                for (p, g) in ps.iter_mut().zip(grads) {
                    p.grad = g;
                }
                adam.step(&mut ps);
            }
            assert!(
                losses.windows(2).all(|w| w[1] < w[0]),
                "seed {seed}: {losses:?}"
            );
        }
    }

    #[test]
    fn input_errors() {
        let c = tiny_corpus();
        let train = c.examples(Split::Train, Modality::Acoustic);
        let valid = c.examples(Split::Valid, Modality::Acoustic);
        let m = tiny_model(16, 0);
        assert!(super::train(m.clone(), &[], &valid, &quick(0)).is_err());
        assert!(super::train(m.clone(), &train, &valid[..1], &quick(0)).is_err());
        assert!(super::train(tiny_model(8, 0), &train, &valid, &quick(0)).is_err());
        let bs1 = TrainConfig {
            batch_size: 1,
            ..quick(0)
        };
        assert!(super::train(m.clone(), &train, &valid, &bs1).is_err());
        let mut flagged = train.clone();
        flagged[0].noise_aware = true;
        flagged[0].corrupted = None;
        let na = TrainConfig {
            noise_aware: true,
            ..quick(0)
        };
        assert!(super::train(m, &flagged, &valid, &na).is_err());
    }

    #[test]
    fn noise_aware_uses_corrupted_inputs() {
        let c = tiny_corpus();
        let mut train = c.examples(Split::Train, Modality::Acoustic);
        train[0].noise_aware = true;
        let cfg = TrainConfig {
            noise_aware: true,
            ..quick(0)
        };
        assert_eq!(
            training_inputs(&train[0], &cfg).unwrap(),
            train[0].corrupted.as_deref().unwrap()
        );
        assert_eq!(
            training_inputs(&train[1], &cfg).unwrap(),
            train[1].inputs.as_slice()
        );
        let off = TrainConfig {
            noise_aware: false,
            ..cfg
        };
        assert_eq!(
            training_inputs(&train[0], &off).unwrap(),
            train[0].inputs.as_slice()
        );
    }

    #[test]
    fn condition_matrix_shape_and_duplicates() {
        let c = tiny_corpus();
        let m = tiny_model(16, 4);
        let lex = tiny_model(8, 5);
        let mut sets = BTreeMap::new();
        sets.insert("clean".to_string(), c.examples(Split::Eval, Modality::Both));
        sets.insert(
            "strong".to_string(),
            c.corrupted_examples(Split::Eval, Modality::Both, 2.0),
        );
        let entries = [
            MatrixEntry {
                system: "acoustic".into(),
                model: &m,
                streams: vec![0],
            },
            MatrixEntry {
                system: "lexical".into(),
                model: &lex,
                streams: vec![1],
            },
        ];
        let conds: Vec<String> = ["clean", "clean", "strong"].map(String::from).to_vec();
        let rows = run_condition_matrix(&entries, &conds, &sets).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].ccc, rows[1].ccc);
        // the lexical stream is untouched by acoustic corruption
        assert_eq!(rows[3].ccc, rows[5].ccc);
        let missing = vec!["clean".to_string(), "s9".to_string()];
        let err = run_condition_matrix(&entries, &missing, &sets).unwrap_err();
        assert!(matches!(err, Error::MissingCondition(ref n) if n == "s9"));
        let mut buf = Vec::new();
        write_condition_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("system,condition,act_ccc,val_ccc,dom_ccc\nacoustic,clean,"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn history_csv() {
        let h = vec![EpochRecord {
            epoch: 1,
            train_loss: -0.5,
            valid_ccc: [0.1, 0.2, 0.3],
            valid_ccc_mean: 0.2,
        }];
        let mut buf = Vec::new();
        write_history(&h, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,valid_ccc_mean\n1,-0.500000,0.200000\n"
        );
    }
}
