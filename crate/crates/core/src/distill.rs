//! Teacher-student distillation of the fusion embedding into uni-modal
//! students, with residual-based per-sample confidence weights.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, LabelRange};
use crate::diffcore::{ccc_and_grad, dense_backward, dense_forward, AdamState, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{EmotionTriple, LossWeights};
use crate::models::{predict_all, EmotionEstimate, Model, Predictor};
use crate::trainer::{
    ccc_loss_and_grads, train_with, BatchGrad, Objective, TrainConfig, TrainOutcome,
};

/// Embedding-matching loss used for the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillLossKind {
    /// `1 - CCC` across embedding coordinates.
    #[default]
    Ccc,
    /// Mean squared coordinate difference.
    L2,
    /// `1 - cos` between the two embeddings.
    Cosine,
}

impl std::str::FromStr for DistillLossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccc" => Ok(Self::Ccc),
            "l2" => Ok(Self::L2),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::invalid(format!(
                "unknown distillation loss {s:?} (expected ccc, l2 or cosine)"
            ))),
        }
    }
}

impl DistillLossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ccc => "ccc",
            Self::L2 => "l2",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub kappa: f64,
    pub lambda: f64,
    /// Label dynamic range used by [`gamma`]; `None` means the observed
    /// range of the training labels.
    pub label_range: Option<f64>,
    /// Range partitioned into the auxiliary classification bins.
    pub labels: LabelRange,
    pub ce_bins: usize,
    pub use_ce: bool,
    pub loss: DistillLossKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kappa: 0.001,
            lambda: 1.0,
            label_range: None,
            labels: LabelRange::default(),
            ce_bins: 7,
            use_ce: true,
            loss: DistillLossKind::Ccc,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::invalid(format!(
                "kappa must be >= 0, got {}",
                self.kappa
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Some(m) = self.label_range {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::invalid(format!(
                    "label range M must be > 0, got {m}"
                )));
            }
        }
        if self.ce_bins < 2 {
            return Err(Error::invalid(format!(
                "ce_bins must be >= 2, got {}",
                self.ce_bins
            )));
        }
        Ok(())
    }
}

/// Confidence weight `1 - mean|l - l~| / M`, clamped to `[0, 1]`.
pub fn gamma(labels: EmotionTriple, teacher: EmotionTriple, m: f64) -> Result<f64> {
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::invalid(format!(
            "label range M must be > 0, got {m}"
        )));
    }
    let resid: f64 = labels
        .to_array()
        .iter()
        .zip(teacher.to_array())
        .map(|(l, t)| (l - t).abs())
        .sum();
    Ok((1.0 - resid / 3.0 / m).clamp(0.0, 1.0))
}

fn check_pairs(teacher: &[Vec<f64>], student: &[Vec<f64>], gammas: &[f64]) -> Result<()> {
    if teacher.is_empty() {
        return Err(Error::invalid(
            "distillation loss needs a batch of at least 1",
        ));
    }
    if teacher.len() != student.len() || teacher.len() != gammas.len() {
        return Err(Error::invalid(format!(
            "distillation batch sizes differ: teacher {}, student {}, gammas {}",
            teacher.len(),
            student.len(),
            gammas.len()
        )));
    }
    for (i, (t, s)) in teacher.iter().zip(student).enumerate() {
        if t.len() != s.len() || t.is_empty() {
            return Err(Error::invalid(format!(
                "sample {i}: teacher embedding width {} vs student width {}",
                t.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of `(1 - CCC(E_T,i, E_S,i)) * gamma_i`.
pub fn distill_loss(teacher: &[Vec<f64>], student: &[Vec<f64>], gammas: &[f64]) -> Result<f64> {
    distill_loss_grad(DistillLossKind::Ccc, teacher, student, gammas).map(|(l, _)| l)
}

/// Distillation loss of the given kind and its gradient w.r.t. each
/// student embedding.
pub fn distill_loss_grad(
    kind: DistillLossKind,
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    gammas: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_pairs(teacher, student, gammas)?;
    let n = teacher.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for ((t, s), &g) in teacher.iter().zip(student).zip(gammas) {
        let (l, d) = match kind {
            DistillLossKind::Ccc => {
                let (c, dc) = ccc_and_grad(s, t);
                (1.0 - c, dc.into_iter().map(|v| -v).collect::<Vec<_>>())
            }
            DistillLossKind::L2 => {
                let w = s.len() as f64;
                let l = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w;
                (l, s.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / w).collect())
            }
            DistillLossKind::Cosine => cosine_distance_grad(s, t),
        };
        loss += g * l / n;
        grads.push(d.into_iter().map(|v| g * v / n).collect());
    }
    Ok((loss, grads))
}

const COS_EPS: f64 = 1e-12;

fn cosine_distance_grad(s: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
    let ns = s.iter().map(|a| a * a).sum::<f64>().sqrt() + COS_EPS;
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt() + COS_EPS;
    let cos = dot / (ns * nt);
    // d(ns)/ds = s / (ns - eps); the eps only guards zero vectors
    let raw = ns - COS_EPS;
    let grad = s
        .iter()
        .zip(t)
        .map(|(&a, &b)| {
            let dns = if raw > 0.0 { a / raw } else { 0.0 };
            -(b / (ns * nt) - dot * dns / (ns * ns * nt))
        })
        .collect();
    (1.0 - cos, grad)
}

/// Bin of `label` among `bins` equal-width bins over `range`; the upper
/// edge belongs to the last bin.
pub fn label_bin(label: f64, range: LabelRange, bins: usize) -> Result<usize> {
    if !(label.is_finite() && label >= range.min && label <= range.max) {
        return Err(Error::invalid(format!(
            "label {label} outside [{}, {}]",
            range.min, range.max
        )));
    }
    let k = ((label - range.min) / range.span() * bins as f64).floor() as usize;
    Ok(k.min(bins - 1))
}

/// Mean cross-entropy over the batch and the three dimensions.
///
/// `logits[i]` holds `3 * bins` values: act bins, then val, then dom.
pub fn aux_ce_loss(
    logits: &[Vec<f64>],
    labels: &[EmotionTriple],
    range: LabelRange,
    bins: usize,
) -> Result<f64> {
    aux_ce_loss_grad(logits, labels, range, bins).map(|(l, _)| l)
}

/// [`aux_ce_loss`] and its gradient w.r.t. the logits.
pub fn aux_ce_loss_grad(
    logits: &[Vec<f64>],
    labels: &[EmotionTriple],
    range: LabelRange,
    bins: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::invalid(format!(
            "cross-entropy needs matching non-empty batches, got {} logit rows and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let scale = 1.0 / (3 * logits.len()) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, lab) in logits.iter().zip(labels) {
        if row.len() != 3 * bins {
            return Err(Error::invalid(format!(
                "expected {} logits per sample, got {}",
                3 * bins,
                row.len()
            )));
        }
        let mut g = vec![0.0; row.len()];
        for (d, &l) in lab.to_array().iter().enumerate() {
            let target = label_bin(l, range, bins)?;
            let z = &row[d * bins..(d + 1) * bins];
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            let lse = zmax + sum.ln();
            loss += (lse - z[target]) * scale;
            for (k, v) in z.iter().enumerate() {
                let p = (v - lse).exp();
                g[d * bins + k] = (p - if k == target { 1.0 } else { 0.0 }) * scale;
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// `kappa * (l_ccc + l_ce) + lambda * l_dis`.
pub fn total_loss(l_ccc: f64, l_ce: f64, l_dis: f64, cfg: &DistillConfig) -> f64 {
    cfg.kappa * (l_ccc + l_ce) + cfg.lambda * l_dis
}

/// Cached teacher inference for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub id: String,
    pub embedding: Vec<f64>,
    pub estimate: EmotionTriple,
}

/// Runs the teacher once over `examples` (clean inputs).
pub fn teacher_outputs(
    teacher: &dyn Predictor,
    examples: &[Example],
) -> Result<Vec<TeacherOutput>> {
    let est = predict_all(teacher, examples)?;
    examples
        .iter()
        .zip(est)
        .map(|(e, o)| {
            if !(o.triple.is_finite() && o.embedding.iter().all(|v| v.is_finite())) {
                return Err(Error::invalid(format!(
                    "teacher output for {:?} is not finite",
                    e.id
                )));
            }
            Ok(TeacherOutput {
                id: e.id.clone(),
                embedding: o.embedding,
                estimate: o.triple,
            })
        })
        .collect()
}

pub fn write_teacher_cache<W: Write>(outputs: &[TeacherOutput], w: W) -> Result<()> {
    let width = outputs.first().map_or(0, |o| o.embedding.len());
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string()];
    header.extend((0..width).map(|k| format!("e{k}")));
    header.extend(["act", "val", "dom"].map(String::from));
    wr.write_record(&header)?;
    for o in outputs {
        if o.embedding.len() != width {
            return Err(Error::invalid(format!(
                "teacher output {:?} has width {}, expected {width}",
                o.id,
                o.embedding.len()
            )));
        }
        let mut rec = vec![o.id.clone()];
        rec.extend(o.embedding.iter().map(|v| format!("{v:.8e}")));
        rec.extend(o.estimate.to_array().iter().map(|v| format!("{v:.8e}")));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_teacher_cache<R: BufRead>(r: R) -> Result<Vec<TeacherOutput>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let n = header.len();
    if n < 5
        || &header[0] != "id"
        || &header[n - 3] != "act"
        || &header[n - 2] != "val"
        || &header[n - 1] != "dom"
    {
        return Err(Error::invalid(format!(
            "teacher cache header must be id,e0..,act,val,dom; got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|e| {
                Error::invalid(format!("teacher cache line {}: column {k}: {e}", line + 2))
            })
        };
        let embedding = (1..n - 3).map(parse).collect::<Result<Vec<_>>>()?;
        let estimate = EmotionTriple::new(parse(n - 3)?, parse(n - 2)?, parse(n - 1)?);
        out.push(TeacherOutput {
            id: rec[0].to_string(),
            embedding,
            estimate,
        });
    }
    Ok(out)
}

/// Linear classification head on the student embedding, `3 * bins` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHead {
    pub w: Parameter,
    pub b: Parameter,
}

impl AuxHead {
    pub fn new(embed_dim: usize, bins: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: Parameter::new("aux.w", Tensor::glorot(&[embed_dim, 3 * bins], &mut rng)),
            b: Parameter::new("aux.b", Tensor::zeros(&[3 * bins])),
        }
    }

    fn input(embeddings: &[Vec<f64>]) -> Result<Tensor> {
        let width = embeddings[0].len();
        Tensor::from_vec(&[embeddings.len(), width], embeddings.concat())
    }

    pub fn forward(&self, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let y = dense_forward(&Self::input(embeddings)?, &self.w.value, &self.b.value)?;
        let out = self.b.value.len();
        Ok(y.data().chunks_exact(out).map(<[f64]>::to_vec).collect())
    }

    /// Accumulates parameter gradients and returns the embedding gradients.
    pub fn backward(
        &mut self,
        embeddings: &[Vec<f64>],
        d_logits: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let x = Self::input(embeddings)?;
        let dy = Tensor::from_vec(&[d_logits.len(), self.b.value.len()], d_logits.concat())?;
        let dx = dense_backward(&x, &self.w.value, &dy, &mut self.w.grad, &mut self.b.grad);
        let width = embeddings[0].len();
        Ok(dx.data().chunks_exact(width).map(<[f64]>::to_vec).collect())
    }
}

/// The three terms of the student objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ccc: f64,
    pub ce: f64,
    pub dis: f64,
    pub total: f64,
}

/// Student objective: label CCC loss, auxiliary cross-entropy and the
/// weighted embedding-matching term against cached teacher outputs.
pub struct DistillObjective {
    pub cfg: DistillConfig,
    pub weights: LossWeights,
    /// Teacher output per training index.
    pub teacher: Vec<TeacherOutput>,
    pub gammas: Vec<f64>,
    pub head: Option<AuxHead>,
    head_adam: Option<AdamState>,
    pub last: Option<LossParts>,
}

impl DistillObjective {
    /// Aligns `outputs` to `train` by id and computes the per-sample weights.
    pub fn new(
        outputs: &[TeacherOutput],
        train: &[Example],
        embed_dim: usize,
        cfg: &DistillConfig,
        tcfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid(
                "distillation needs a non-empty training set",
            ));
        }
        let by_id: HashMap<&str, &TeacherOutput> =
            outputs.iter().map(|o| (o.id.as_str(), o)).collect();
        let teacher = train
            .iter()
            .map(|e| {
                let o = by_id
                    .get(e.id.as_str())
                    .ok_or_else(|| Error::invalid(format!("no teacher output for {:?}", e.id)))?;
                if o.embedding.len() != embed_dim {
                    return Err(Error::invalid(format!(
                        "teacher embedding width {} does not match student width {embed_dim}",
                        o.embedding.len()
                    )));
                }
                Ok((*o).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let m = match cfg.label_range {
            Some(m) => m,
            None => observed_range(train),
        };
        let gammas = train
            .iter()
            .zip(&teacher)
            .map(|(e, t)| gamma(e.labels, t.estimate, m))
            .collect::<Result<Vec<_>>>()?;
        let (head, head_adam) = if cfg.use_ce {
            let head = AuxHead::new(embed_dim, cfg.ce_bins, tcfg.seed ^ 0xA0C5);
            let adam = AdamState::new(&[&head.w, &head.b], tcfg.lr);
            (Some(head), Some(adam))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg: *cfg,
            weights: tcfg.weights,
            teacher,
            gammas,
            head,
            head_adam,
            last: None,
        })
    }
}

/// `max - min` over all label values of the examples.
fn observed_range(examples: &[Example]) -> f64 {
    let vals = examples.iter().flat_map(|e| e.labels.to_array());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

impl Objective for DistillObjective {
    fn batch(
        &mut self,
        indices: &[usize],
        labels: &[EmotionTriple],
        est: &[EmotionEstimate],
    ) -> Result<BatchGrad> {
        let (l_ccc, d_ccc) = ccc_loss_and_grads(labels, est, self.weights)?;
        let student: Vec<Vec<f64>> = est.iter().map(|e| e.embedding.clone()).collect();
        let teacher: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| self.teacher[i].embedding.clone())
            .collect();
        let gammas: Vec<f64> = indices.iter().map(|&i| self.gammas[i]).collect();
        let (l_dis, d_dis) = distill_loss_grad(self.cfg.loss, &teacher, &student, &gammas)?;
        let (kappa, lambda) = (self.cfg.kappa, self.cfg.lambda);

        let mut d_emb: Vec<Vec<f64>> = d_dis
            .into_iter()
            .map(|row| row.into_iter().map(|v| lambda * v).collect())
            .collect();
        let mut l_ce = 0.0;
        if let (Some(head), Some(adam)) = (self.head.as_mut(), self.head_adam.as_mut()) {
            let logits = head.forward(&student)?;
            let (ce, d_logits) =
                aux_ce_loss_grad(&logits, labels, self.cfg.labels, self.cfg.ce_bins)?;
            l_ce = ce;
            let scaled: Vec<Vec<f64>> = d_logits
                .iter()
                .map(|r| r.iter().map(|v| kappa * v).collect())
                .collect();
            head.w.zero_grad();
            head.b.zero_grad();
            let d_from_head = head.backward(&student, &scaled)?;
            for (acc, d) in d_emb.iter_mut().zip(d_from_head) {
                acc.iter_mut().zip(d).for_each(|(a, v)| *a += v);
            }
            adam.step(&mut [&mut head.w, &mut head.b]);
        }
        let total = total_loss(l_ccc, l_ce, l_dis, &self.cfg);
        self.last = Some(LossParts {
            ccc: l_ccc,
            ce: l_ce,
            dis: l_dis,
            total,
        });
        Ok(BatchGrad {
            loss: total,
            d_triples: d_ccc.into_iter().map(|d| d.map(|v| kappa * v)).collect(),
            d_embeddings: Some(d_emb),
        })
    }
}

/// Trains `student` against cached teacher outputs. The teacher is only
/// read through `outputs`, so its parameters cannot change.
pub fn train_student<M: Model>(
    outputs: &[TeacherOutput],
    student: M,
    train: &[Example],
    valid: &[Example],
    tcfg: &TrainConfig,
    cfg: &DistillConfig,
) -> Result<TrainOutcome<M>> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid(
            "distillation needs non-empty train and valid sets",
        ));
    }
    let mut objective = DistillObjective::new(outputs, train, student.embed_dim(), cfg, tcfg)?;
    train_with(student, train, valid, tcfg, &mut objective)
}
