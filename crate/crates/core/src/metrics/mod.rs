//! Agreement metrics (concordance correlation), the composite CCC training
//! objective, and transcript error metrics.

mod transcript;

pub use transcript::{
    align, tertile_edges, transcript_metrics, wer_by_band, write_band_report, Alignment, Band,
    BandEdges, BandRecord, BandReport, BandRow, Normalizer, TranscriptMetrics,
};

use crate::error::{Error, Result};

/// Denominator floor below which CCC is reported as 0.
pub const EPS_DEN: f64 = 1e-12;

/// One of the three emotion dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Act,
    Val,
    Dom,
}

impl Dim {
    pub const ALL: [Dim; 3] = [Dim::Act, Dim::Val, Dim::Dom];

    pub fn index(self) -> usize {
        match self {
            Dim::Act => 0,
            Dim::Val => 1,
            Dim::Dom => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dim::Act => "act",
            Dim::Val => "val",
            Dim::Dom => "dom",
        }
    }
}

/// Activation / valence / dominance values on the label scale.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EmotionTriple {
    pub act: f64,
    pub val: f64,
    pub dom: f64,
}

impl EmotionTriple {
    pub fn new(act: f64, val: f64, dom: f64) -> Self {
        Self { act, val, dom }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// `[act, val, dom]`
    pub fn to_array(self) -> [f64; 3] {
        [self.act, self.val, self.dom]
    }

    pub fn get(&self, dim: Dim) -> f64 {
        self.to_array()[dim.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.act.is_finite() && self.val.is_finite() && self.dom.is_finite()
    }

    pub fn within(&self, min: f64, max: f64) -> bool {
        self.is_finite() && self.to_array().iter().all(|&v| v >= min && v <= max)
    }
}

/// Moments behind a CCC value. `covar` is ρ·σx·σy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccBreakdown {
    pub ccc: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub covar: f64,
}

impl CccBreakdown {
    pub fn denominator(&self) -> f64 {
        let gap = self.mean_x - self.mean_y;
        self.var_x + self.var_y + gap * gap
    }
}

/// Weights of the composite objective: `alpha` on valence, `beta` on
/// activation and the remainder on dominance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    alpha: f64,
    beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || beta < 0.0 {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative, got alpha={alpha} beta={beta}"
            )));
        }
        if alpha + beta > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "alpha + beta must not exceed 1, got {}",
                alpha + beta
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Per-dimension weights in `[act, val, dom]` order.
    pub fn per_dim(&self) -> [f64; 3] {
        [self.beta, self.alpha, 1.0 - self.alpha - self.beta]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
        }
    }
}

/// Concordance correlation coefficient with population moments.
///
/// Returns `ccc = 0` (moments still populated) when the denominator falls
/// below [`EPS_DEN`].
pub fn ccc(x: &[f64], y: &[f64]) -> Result<CccBreakdown> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "ccc length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "ccc needs at least 2 values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("ccc input contains non-finite values"));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut covar) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        covar += dx * dy;
    }
    var_x /= n;
    var_y /= n;
    covar /= n;
    let mut out = CccBreakdown {
        ccc: 0.0,
        mean_x,
        mean_y,
        var_x,
        var_y,
        covar,
    };
    let den = out.denominator();
    if den >= EPS_DEN {
        out.ccc = (2.0 * covar / den).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Per-dimension CCC over a batch of triples, `[act, val, dom]`.
pub fn ccc_per_dim(pred: &[EmotionTriple], target: &[EmotionTriple]) -> Result<[f64; 3]> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "prediction/target batch mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let mut out = [0.0; 3];
    for dim in Dim::ALL {
        let x: Vec<f64> = pred.iter().map(|t| t.get(dim)).collect();
        let y: Vec<f64> = target.iter().map(|t| t.get(dim)).collect();
        out[dim.index()] = ccc(&x, &y)?.ccc;
    }
    Ok(out)
}

/// Composite objective `-(α·CCC_v + β·CCC_a + (1-α-β)·CCC_d)`.
pub fn ccc_loss(pred: &[EmotionTriple], target: &[EmotionTriple], w: LossWeights) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::invalid("ccc loss needs a batch of at least 2"));
    }
    let cccs = ccc_per_dim(pred, target)?;
    Ok(combine_ccc(cccs, w))
}

/// Applies loss weights to per-dimension CCCs (`[act, val, dom]`).
pub fn combine_ccc(cccs: [f64; 3], w: LossWeights) -> f64 {
    let wd = w.per_dim();
    -(wd[0] * cccs[0] + wd[1] * cccs[1] + wd[2] * cccs[2])
}
