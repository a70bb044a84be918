//! TC-GRU estimator, multi-modal fusion estimator, batched gradient passes,
//! evaluation and checkpoint persistence.

mod fusion;
mod tcgru;

pub use fusion::{FusionConfig, FusionModel, FusionTrace, LexicalBranch};
pub use tcgru::{build_tcgru, TcGruConfig, TcGruModel, TcGruTrace};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Example, FeatureSequence};
use crate::diffcore::{ccc_loss_grad, grad_check, Checkpoint, GradCheckReport, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{ccc_per_dim, EmotionTriple, LossWeights};

/// Model output: the triple plus the embedding that feeds the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEstimate {
    pub triple: EmotionTriple,
    pub embedding: Vec<f64>,
}

/// Per-channel input standardization, applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid(
                "normalization mean/std widths differ or are empty",
            ));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid(
                "normalization needs finite means and positive stds",
            ));
        }
        Ok(Self { mean, std })
    }

    /// Frame-pooled mean and population std per channel. Channels with
    /// (near) zero spread get std 1.
    pub fn fit<'a>(seqs: impl Iterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            } else if s.dim() != sum.len() {
                return Err(Error::invalid("feature widths differ across sequences"));
            }
            for row in s.data().chunks_exact(s.dim()) {
                for (k, &v) in row.iter().enumerate() {
                    let v = f64::from(v);
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit normalization on zero frames"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(mean, std)
    }

    pub fn apply(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for row in x.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// A trainable estimator over one or more input streams.
pub trait Model: Clone + Send + Sync {
    type Trace: Send + Sync;

    fn forward(&self, inputs: &[FeatureSequence]) -> Result<(EmotionEstimate, Self::Trace)>;

    /// Accumulates gradients of the trainable parameters into `grads`
    /// (ordered as [`Model::parameters`]), given the loss gradient w.r.t. the
    /// triple and optionally w.r.t. the embedding.
    fn backward(
        &self,
        trace: &Self::Trace,
        d_triple: [f64; 3],
        d_embedding: Option<&[f64]>,
        grads: &mut [Tensor],
    );

    /// Trainable parameters only.
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
    fn embed_dim(&self) -> usize;
    fn n_inputs(&self) -> usize;
    fn to_checkpoint(&self) -> Checkpoint;
    fn set_output_bias(&mut self, b: [f64; 3]);

    /// Fits input normalization from training inputs.
    fn fit_normalization(&mut self, examples: &[&[FeatureSequence]]) -> Result<()>;

    /// Errors if the model is not in a trainable state.
    fn check_trainable(&self) -> Result<()> {
        Ok(())
    }

    fn set_parameters(&mut self, values: &[Parameter]) {
        for (p, v) in self.parameters_mut().into_iter().zip(values) {
            p.value = v.value.clone();
        }
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }
}

/// Inference-only view, usable as a trait object.
pub trait Predictor: Sync {
    fn predict(&self, inputs: &[FeatureSequence]) -> Result<EmotionEstimate>;
}

impl<M: Model> Predictor for M {
    fn predict(&self, inputs: &[FeatureSequence]) -> Result<EmotionEstimate> {
        self.forward(inputs).map(|(e, _)| e)
    }
}

pub fn predict(m: &TcGruModel, feats: &FeatureSequence) -> Result<EmotionEstimate> {
    Predictor::predict(m, std::slice::from_ref(feats))
}

/// Predictions for every example, in order.
pub fn predict_all(m: &dyn Predictor, examples: &[Example]) -> Result<Vec<EmotionEstimate>> {
    examples.par_iter().map(|e| m.predict(&e.inputs)).collect()
}

/// Corpus-level CCC per dimension (act, val, dom).
pub fn evaluate(m: &dyn Predictor, examples: &[Example]) -> Result<[f64; 3]> {
    if examples.len() < 2 {
        return Err(Error::invalid(format!(
            "evaluation needs at least 2 utterances, got {}",
            examples.len()
        )));
    }
    let preds: Vec<EmotionTriple> = predict_all(m, examples)?
        .into_iter()
        .map(|e| e.triple)
        .collect();
    let labels: Vec<EmotionTriple> = examples.iter().map(|e| e.labels).collect();
    ccc_per_dim(&preds, &labels)
}

/// Forward passes for a batch, data-parallel.
pub fn forward_batch<M: Model>(
    m: &M,
    inputs: &[&[FeatureSequence]],
) -> Result<(Vec<EmotionEstimate>, Vec<M::Trace>)> {
    let out: Vec<(EmotionEstimate, M::Trace)> = inputs
        .par_iter()
        .map(|x| m.forward(x))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

/// Samples per sequential gradient chunk. Chunk sums are added in index
/// order, so the result does not depend on the worker count.
const GRAD_CHUNK: usize = 4;

/// Summed parameter gradients over a batch.
pub fn backward_batch<M: Model>(
    m: &M,
    traces: &[M::Trace],
    d_triples: &[[f64; 3]],
    d_embeddings: Option<&[Vec<f64>]>,
) -> Vec<Tensor> {
    let zero = || -> Vec<Tensor> {
        m.parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    };
    let idx: Vec<usize> = (0..traces.len()).collect();
    let partials: Vec<Vec<Tensor>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = zero();
            for &i in chunk {
                let de = d_embeddings.map(|d| d[i].as_slice());
                m.backward(&traces[i], d_triples[i], de, &mut g);
            }
            g
        })
        .collect();
    let mut total = zero();
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add_assign(p);
        }
    }
    total
}

/// Batch CCC loss for `m` on `batch` and its parameter gradients.
pub fn ccc_batch_loss<M: Model>(
    m: &M,
    batch: &[&[FeatureSequence]],
    labels: &[EmotionTriple],
    w: LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    let (est, traces) = forward_batch(m, batch)?;
    let pred = Tensor::from_vec(
        &[est.len(), 3],
        est.iter().flat_map(|e| e.triple.to_array()).collect(),
    )?;
    let target = Tensor::from_vec(
        &[labels.len(), 3],
        labels.iter().flat_map(|l| l.to_array()).collect(),
    )?;
    let (loss, grad) = ccc_loss_grad(&pred, &target, w)?;
    let d: Vec<[f64; 3]> = grad
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((loss, backward_batch(m, &traces, &d, None)))
}

/// Finite-difference check of the full model under the batch CCC loss on
/// random inputs of `frames` frames.
pub fn model_grad_check<M: Model>(
    m: &M,
    input_dims: &[usize],
    batch: usize,
    frames: usize,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<FeatureSequence>> = (0..batch)
        .map(|_| {
            input_dims
                .iter()
                .map(|&d| {
                    let x: Vec<f64> = (0..frames * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    FeatureSequence::from_f64(d, &x)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let labels: Vec<EmotionTriple> = (0..batch)
        .map(|_| {
            EmotionTriple::new(
                rng.gen_range(1.0..7.0),
                rng.gen_range(1.0..7.0),
                rng.gen_range(1.0..7.0),
            )
        })
        .collect();
    let refs: Vec<&[FeatureSequence]> = inputs.iter().map(Vec::as_slice).collect();
    let w = LossWeights::default();
    let (_, analytic) = ccc_batch_loss(m, &refs, &labels, w)?;
    let mut params: Vec<Parameter> = m.parameters().into_iter().cloned().collect();
    let mut probe = m.clone();
    let report = grad_check(
        &mut params,
        &analytic,
        |ps| {
            probe.set_parameters(ps);
            let (est, _) = forward_batch(&probe, &refs).expect("validated inputs");
            let preds: Vec<EmotionTriple> = est.into_iter().map(|e| e.triple).collect();
            crate::metrics::ccc_loss(&preds, &labels, w).expect("batch >= 2")
        },
        1e-4,
        max_coords,
        seed,
    );
    Ok(report)
}

/// A model loaded from a checkpoint of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    TcGru(TcGruModel),
    Fusion(FusionModel),
}

impl AnyModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.config_value("model") {
            Some("tcgru") => Ok(AnyModel::TcGru(TcGruModel::from_checkpoint(ck)?)),
            Some("fusion") => Ok(AnyModel::Fusion(FusionModel::from_checkpoint(ck)?)),
            other => Err(Error::invalid(format!(
                "unknown model kind {other:?} in checkpoint"
            ))),
        }
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            AnyModel::TcGru(m) => m,
            AnyModel::Fusion(m) => m,
        }
    }

    pub fn n_inputs(&self) -> usize {
        match self {
            AnyModel::TcGru(m) => m.n_inputs(),
            AnyModel::Fusion(m) => m.n_inputs(),
        }
    }
}

pub fn save_model<M: Model>(path: impl AsRef<Path>, m: &M) -> Result<()> {
    fs::write(path, m.to_checkpoint().to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    AnyModel::from_checkpoint(&ck).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests;
