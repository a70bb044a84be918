//! Desk-scale synthetic corpus with a controlled modality split.
//!
//! Labels are drawn uniformly on the label scale and mapped to
//! `u = (l - mid) / half_span` in `[-1, 1]`. Acoustic frames carry
//! activation as an energy-like offset along an all-positive channel
//! pattern, dominance as an offset whose amplitude is modulated over time,
//! and only a weak valence component. Lexical frames carry valence strongly
//! and activation/dominance weakly. A few acoustic channels hold only noise.
//!
//! Corruption emulates additive noise in feature space: every acoustic
//! channel gains `level · spectrum` with `level = strength · U(0.5, 1.5)`
//! per utterance, plus extra frame noise proportional to `strength`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::features::{write_feature_file, FeatureSequence};
use super::manifest::{write_manifest, LabelRange, Manifest, ManifestRecord, Split};
use super::Example;
use crate::error::{Error, Result};
use crate::metrics::EmotionTriple;
use crate::signal::file_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_eval: usize,
    /// Inclusive acoustic frame-count range.
    pub frames: (usize, usize),
    /// Inclusive lexical frame-count range.
    pub lexical_frames: (usize, usize),
    pub acoustic_dim: usize,
    /// Trailing acoustic channels that carry no label information.
    pub noise_channels: usize,
    pub lexical_dim: usize,
    /// Per-frame observation noise std.
    pub obs_noise: f64,
    /// Std of a per-utterance constant channel offset.
    pub speaker_noise: f64,
    /// Weight of the valence pattern in the acoustic channel.
    pub valence_coupling: f64,
    /// Weight of activation/dominance patterns in the lexical channel.
    pub lexical_cross_coupling: f64,
    /// Relative depth of the temporal modulation on the dominance pattern.
    pub modulation_depth: f64,
    /// Extra frame noise per unit corruption strength, relative to `obs_noise`.
    pub corruption_frame_noise: f64,
    pub corruption_strengths: Vec<f64>,
    pub labels: LabelRange,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_valid: 200,
            n_eval: 200,
            frames: (8, 16),
            lexical_frames: (4, 8),
            acoustic_dim: 16,
            noise_channels: 4,
            lexical_dim: 8,
            obs_noise: 1.0,
            speaker_noise: 0.3,
            valence_coupling: 0.1,
            lexical_cross_coupling: 0.15,
            modulation_depth: 0.5,
            corruption_frame_noise: 0.5,
            corruption_strengths: vec![0.5, 1.0, 2.0],
            labels: LabelRange::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_train + self.n_valid + self.n_eval == 0 {
            return bad("synthetic corpus needs at least one utterance".into());
        }
        for (name, (lo, hi)) in [
            ("frames", self.frames),
            ("lexical_frames", self.lexical_frames),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{name} range must satisfy 1 <= min <= max, got ({lo}, {hi})"
                ));
            }
        }
        if self.lexical_dim == 0 || self.acoustic_dim <= self.noise_channels {
            return bad(format!(
                "need lexical_dim >= 1 and acoustic_dim > noise_channels, got {}, {}, {}",
                self.lexical_dim, self.acoustic_dim, self.noise_channels
            ));
        }
        let nonneg = [
            self.obs_noise,
            self.speaker_noise,
            self.valence_coupling,
            self.lexical_cross_coupling,
            self.modulation_depth,
            self.corruption_frame_noise,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise and coupling settings must be finite and >= 0".into());
        }
        if self
            .corruption_strengths
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("corruption strengths must be finite and >= 0".into());
        }
        Ok(())
    }

    fn signal_channels(&self) -> usize {
        self.acoustic_dim - self.noise_channels
    }
}

/// Fixed per-corpus channel patterns.
#[derive(Debug, Clone, PartialEq)]
struct Patterns {
    act: Vec<f64>,
    dom: Vec<f64>,
    val: Vec<f64>,
    lex_val: Vec<f64>,
    lex_act: Vec<f64>,
    lex_dom: Vec<f64>,
    /// Corruption spectrum over all acoustic channels, strictly positive.
    noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub ids: Vec<String>,
    pub splits: Vec<Split>,
    pub labels: Vec<EmotionTriple>,
    pub acoustic: Vec<FeatureSequence>,
    pub lexical: Vec<FeatureSequence>,
    patterns: Patterns,
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| gauss(rng)).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ns = spec.signal_channels();
    let patterns = Patterns {
        act: (0..ns).map(|_| 0.5 + 0.5 * gauss(&mut rng).abs()).collect(),
        dom: gauss_vec(&mut rng, ns),
        val: gauss_vec(&mut rng, ns),
        lex_val: gauss_vec(&mut rng, spec.lexical_dim),
        lex_act: gauss_vec(&mut rng, spec.lexical_dim),
        lex_dom: gauss_vec(&mut rng, spec.lexical_dim),
        noise: (0..spec.acoustic_dim)
            .map(|_| rng.gen_range(0.5..1.5))
            .collect(),
    };
    let n = spec.n_train + spec.n_valid + spec.n_eval;
    let (lo, hi) = (spec.labels.min, spec.labels.max);
    let half = 0.5 * spec.labels.span();
    let mid = spec.labels.midpoint();
    let mut corpus = SyntheticCorpus {
        spec: spec.clone(),
        ids: Vec::with_capacity(n),
        splits: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        acoustic: Vec::with_capacity(n),
        lexical: Vec::with_capacity(n),
        patterns,
    };
    let p = &corpus.patterns;
    for i in 0..n {
        let split = if i < spec.n_train {
            Split::Train
        } else if i < spec.n_train + spec.n_valid {
            Split::Valid
        } else {
            Split::Eval
        };
        let l = [
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
        ];
        let [ua, uv, ud] = l.map(|v| (v - mid) / half);

        let frames = rng.gen_range(spec.frames.0..=spec.frames.1);
        let omega = rng.gen_range(0.3..1.2);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let speaker: Vec<f64> = (0..spec.acoustic_dim)
            .map(|_| spec.speaker_noise * gauss(&mut rng))
            .collect();
        let mut ac = Vec::with_capacity(frames * spec.acoustic_dim);
        for t in 0..frames {
            let m = 1.0 + spec.modulation_depth * (omega * t as f64 + phase).sin();
            for c in 0..spec.acoustic_dim {
                let mut v = speaker[c] + spec.obs_noise * gauss(&mut rng);
                if c < ns {
                    v += p.act[c] * ua + p.dom[c] * ud * m + spec.valence_coupling * p.val[c] * uv;
                }
                ac.push(v);
            }
        }

        let lex_frames = rng.gen_range(spec.lexical_frames.0..=spec.lexical_frames.1);
        let w = spec.lexical_cross_coupling;
        let mut lx = Vec::with_capacity(lex_frames * spec.lexical_dim);
        for _ in 0..lex_frames {
            for c in 0..spec.lexical_dim {
                lx.push(
                    p.lex_val[c] * uv
                        + w * (p.lex_act[c] * ua + p.lex_dom[c] * ud)
                        + spec.obs_noise * gauss(&mut rng),
                );
            }
        }

        corpus.ids.push(format!("utt{i:05}"));
        corpus.splits.push(split);
        corpus.labels.push(EmotionTriple::from_array(l));
        corpus
            .acoustic
            .push(FeatureSequence::from_f64(spec.acoustic_dim, &ac)?);
        corpus
            .lexical
            .push(FeatureSequence::from_f64(spec.lexical_dim, &lx)?);
    }
    Ok(corpus)
}

/// Which synthetic input streams an example carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Acoustic,
    Lexical,
    /// Acoustic then lexical.
    Both,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Acoustic features of utterance `i` corrupted at `strength`. The draw
    /// depends only on the corpus seed, `stream` and `i`.
    pub fn corrupt_acoustic(&self, i: usize, strength: f64, stream: u64) -> FeatureSequence {
        let spec = &self.spec;
        let mut rng = file_rng(
            spec.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            i as u64,
        );
        let level = strength * rng.gen_range(0.5..1.5);
        let sigma = strength * spec.corruption_frame_noise * spec.obs_noise;
        let src = &self.acoustic[i];
        let dim = src.dim();
        let data: Vec<f64> = src
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                f64::from(v) + level * self.patterns.noise[k % dim] + sigma * gauss(&mut rng)
            })
            .collect();
        FeatureSequence::from_f64(dim, &data).expect("shape preserved")
    }

    /// Strength used for utterance `i`'s noise-aware training variant.
    pub fn noisy_strength(&self, i: usize) -> f64 {
        let s = &self.spec.corruption_strengths;
        if s.is_empty() {
            return 0.0;
        }
        let mut rng = file_rng(self.spec.seed ^ 0xa5a5_a5a5, i as u64);
        s[rng.gen_range(0..s.len())]
    }

    /// Noise-aware training variant: corruption at a per-utterance strength
    /// drawn from the configured list.
    pub fn noisy_acoustic(&self, i: usize) -> FeatureSequence {
        self.corrupt_acoustic(i, self.noisy_strength(i), u64::MAX)
    }

    fn streams(
        &self,
        i: usize,
        modality: Modality,
        acoustic: FeatureSequence,
    ) -> Vec<FeatureSequence> {
        match modality {
            Modality::Acoustic => vec![acoustic],
            Modality::Lexical => vec![self.lexical[i].clone()],
            Modality::Both => vec![acoustic, self.lexical[i].clone()],
        }
    }

    /// Clean examples of `split`. Acoustic streams get their noise-aware
    /// variant attached as `corrupted`.
    pub fn examples(&self, split: Split, modality: Modality) -> Vec<Example> {
        self.indices(split)
            .into_iter()
            .map(|i| Example {
                id: self.ids[i].clone(),
                labels: self.labels[i],
                inputs: self.streams(i, modality, self.acoustic[i].clone()),
                corrupted: (modality != Modality::Lexical)
                    .then(|| self.streams(i, modality, self.noisy_acoustic(i))),
                noise_aware: false,
            })
            .collect()
    }

    /// Examples of `split` with acoustic streams corrupted at `strength`.
    pub fn corrupted_examples(
        &self,
        split: Split,
        modality: Modality,
        strength: f64,
    ) -> Vec<Example> {
        self.indices(split)
            .into_iter()
            .map(|i| Example {
                id: self.ids[i].clone(),
                labels: self.labels[i],
                inputs: self.streams(i, modality, self.corrupt_acoustic(i, strength, 0)),
                corrupted: None,
                noise_aware: false,
            })
            .collect()
    }

    fn manifest_for(
        &self,
        dir: &Path,
        name: &str,
        feats: Vec<FeatureSequence>,
    ) -> Result<Manifest> {
        fs::create_dir_all(dir.join(name))?;
        let mut records = Vec::with_capacity(self.len());
        for (i, f) in feats.iter().enumerate() {
            let rel = format!("{name}/{}.afe", self.ids[i]);
            write_feature_file(dir.join(&rel), f)?;
            records.push(ManifestRecord {
                id: self.ids[i].clone(),
                split: self.splits[i],
                labels: self.labels[i],
                feature_path: rel,
                wav_path: None,
                ref_transcript: None,
                hyp_transcript: None,
                noise_aware: false,
            });
        }
        let m = Manifest::new(records, dir)?;
        write_manifest(dir.join(format!("{name}.csv")), &m)?;
        Ok(m)
    }

    /// Writes feature files and manifests under `dir`: `acoustic.csv`,
    /// `lexical.csv`, `acoustic_noisy.csv` (noise-aware variants) and one
    /// `acoustic_s<k>.csv` per corruption strength `k` in list order.
    /// Returns the manifest file names written.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut names = vec![
            "acoustic".to_string(),
            "lexical".to_string(),
            "acoustic_noisy".to_string(),
        ];
        self.manifest_for(dir, "acoustic", self.acoustic.clone())?;
        self.manifest_for(dir, "lexical", self.lexical.clone())?;
        self.manifest_for(
            dir,
            "acoustic_noisy",
            (0..self.len()).map(|i| self.noisy_acoustic(i)).collect(),
        )?;
        for (k, &s) in self.spec.corruption_strengths.iter().enumerate() {
            let name = format!("acoustic_s{k}");
            self.manifest_for(
                dir,
                &name,
                (0..self.len())
                    .map(|i| self.corrupt_acoustic(i, s, 0))
                    .collect(),
            )?;
            names.push(name);
        }
        Ok(names.into_iter().map(|n| format!("{n}.csv")).collect())
    }
}
