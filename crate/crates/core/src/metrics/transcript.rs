//! Word-level alignment and WER / MER / WIL, pooled per emotion band.

use std::io::Write;

use super::{Dim, EmotionTriple};
use crate::error::{Error, Result};

/// Text normalization applied before tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalizer {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl Normalizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        let text: String = if self.strip_punctuation {
            text.chars()
                .filter(|c| c.is_alphanumeric() || c.is_whitespace())
                .collect()
        } else {
            text
        };
        text.split_whitespace().map(str::to_string).collect()
    }
}

/// Edit-operation counts of a minimum-cost alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Alignment {
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub hyp_len: usize,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn accumulate(&mut self, other: &Alignment) {
        self.hits += other.hits;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_len += other.ref_len;
        self.hyp_len += other.hyp_len;
    }
}

/// Unit-cost Levenshtein alignment. Backtrace prefers the diagonal
/// (hit/substitution), then insertion, then deletion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Alignment {
    let m = reference.len();
    let n = hypothesis.len();
    let width = n + 1;
    let mut cost = vec![0usize; (m + 1) * width];
    for j in 0..=n {
        cost[j] = j;
    }
    for i in 1..=m {
        cost[i * width] = i;
        for j in 1..=n {
            let sub = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            let diag = cost[(i - 1) * width + j - 1] + sub;
            let ins = cost[i * width + j - 1] + 1;
            let del = cost[(i - 1) * width + j] + 1;
            cost[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut out = Alignment {
        ref_len: m,
        hyp_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == cost[(i - 1) * width + j - 1] + usize::from(!same) {
                if same {
                    out.hits += 1;
                } else {
                    out.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == cost[i * width + j - 1] + 1 {
            out.insertions += 1;
            j -= 1;
        } else {
            out.deletions += 1;
            i -= 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranscriptMetrics {
    pub wer: f64,
    pub mer: f64,
    pub wil: f64,
}

pub fn transcript_metrics(a: &Alignment) -> Result<TranscriptMetrics> {
    if a.ref_len == 0 {
        return Err(Error::invalid(
            "transcript metrics need a non-empty reference",
        ));
    }
    let errors = a.errors() as f64;
    let wer = errors / a.ref_len as f64;
    let mer = errors / (a.hits + a.errors()) as f64;
    let wil = if a.hyp_len == 0 {
        1.0
    } else {
        let h = a.hits as f64;
        1.0 - h * h / (a.ref_len as f64 * a.hyp_len as f64)
    };
    Ok(TranscriptMetrics { wer, mer, wil })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Low,
    Neutral,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::Neutral, Band::High];

    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Neutral => "neutral",
            Band::High => "high",
        }
    }
}

/// Per-dimension `(low_cut, high_cut)`: values below `low_cut` are low,
/// above `high_cut` are high, anything else neutral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandEdges {
    pub edges: [(f64, f64); 3],
}

impl BandEdges {
    pub fn classify(&self, dim: Dim, value: f64) -> Band {
        let (lo, hi) = self.edges[dim.index()];
        if value < lo {
            Band::Low
        } else if value > hi {
            Band::High
        } else {
            Band::Neutral
        }
    }
}

/// Tertile cut points of the observed label distribution, per dimension.
pub fn tertile_edges(labels: &[EmotionTriple]) -> Result<BandEdges> {
    if labels.is_empty() {
        return Err(Error::invalid("tertile edges need at least one label"));
    }
    let mut edges = [(0.0, 0.0); 3];
    for dim in Dim::ALL {
        let mut v: Vec<f64> = labels.iter().map(|l| l.get(dim)).collect();
        v.sort_by(f64::total_cmp);
        edges[dim.index()] = (quantile(&v, 1.0 / 3.0), quantile(&v, 2.0 / 3.0));
    }
    Ok(BandEdges { edges })
}

// linear interpolation between order statistics
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone)]
pub struct BandRecord {
    pub labels: EmotionTriple,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub dim: Dim,
    pub band: Band,
    pub n_utts: usize,
    pub counts: Alignment,
    /// `None` when the band is empty or its pooled reference is empty.
    pub metrics: Option<TranscriptMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandReport {
    pub edges: BandEdges,
    pub rows: Vec<BandRow>,
}

/// Partitions records into low/neutral/high per dimension (each dimension
/// independently) and pools alignment counts within each band.
pub fn wer_by_band(records: &[BandRecord], edges: &BandEdges) -> Result<BandReport> {
    for dim in Dim::ALL {
        let (lo, hi) = edges.edges[dim.index()];
        if !(lo < hi) {
            return Err(Error::invalid(format!(
                "band edges for {} must satisfy low_cut < high_cut, got ({lo}, {hi})",
                dim.name()
            )));
        }
    }
    let alignments: Vec<Alignment> = records
        .iter()
        .map(|r| align(&r.reference, &r.hypothesis))
        .collect();
    let mut rows = Vec::with_capacity(9);
    for dim in Dim::ALL {
        for band in Band::ALL {
            let mut pooled = Alignment::default();
            let mut n_utts = 0;
            for (rec, a) in records.iter().zip(&alignments) {
                if edges.classify(dim, rec.labels.get(dim)) == band {
                    pooled.accumulate(a);
                    n_utts += 1;
                }
            }
            let metrics = if pooled.ref_len > 0 {
                Some(transcript_metrics(&pooled)?)
            } else {
                None
            };
            rows.push(BandRow {
                dim,
                band,
                n_utts,
                counts: pooled,
                metrics,
            });
        }
    }
    Ok(BandReport {
        edges: *edges,
        rows,
    })
}

/// CSV `dimension,band,n_utts,wer,mer,wil`; empty metric fields for empty bands.
pub fn write_band_report<W: Write>(report: &BandReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dimension", "band", "n_utts", "wer", "mer", "wil"])?;
    for row in &report.rows {
        let (wer, mer, wil) = match row.metrics {
            Some(m) => (
                format!("{:.6}", m.wer),
                format!("{:.6}", m.mer),
                format!("{:.6}", m.wil),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            row.dim.name(),
            row.band.name(),
            &row.n_utts.to_string(),
            &wer,
            &mer,
            &wil,
        ])?;
    }
    w.flush()?;
    Ok(())
}
