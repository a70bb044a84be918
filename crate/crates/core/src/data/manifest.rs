//! Utterance manifests: CSV with header
//! `id,split,act,val,dom,feature_path,wav_path,ref_transcript,hyp_transcript`.
//! Relative paths resolve against the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::features::{read_feature_file, FeatureSequence};
use crate::error::{Error, Result};
use crate::metrics::EmotionTriple;

pub const MANIFEST_HEADER: [&str; 9] = [
    "id",
    "split",
    "act",
    "val",
    "dom",
    "feature_path",
    "wav_path",
    "ref_transcript",
    "hyp_transcript",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "eval" => Ok(Split::Eval),
            other => Err(Error::invalid(format!(
                "unknown split {other:?} (expected train, valid or eval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRange {
    pub min: f64,
    pub max: f64,
}

impl LabelRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::invalid(format!(
                "label range must satisfy min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

impl Default for LabelRange {
    /// Seven-point Likert scale.
    fn default() -> Self {
        Self { min: 1.0, max: 7.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub labels: EmotionTriple,
    /// Path as written in the manifest.
    pub feature_path: String,
    pub wav_path: Option<String>,
    pub ref_transcript: Option<String>,
    pub hyp_transcript: Option<String>,
    /// Train records whose corrupted variant replaces the clean one in
    /// noise-aware training. Not persisted.
    pub noise_aware: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub labels: LabelRange,
    /// Require every `feature_path` to exist. Off when the features are
    /// about to be produced.
    pub require_features: bool,
    /// Require every `wav_path` to exist relative to the manifest.
    pub require_wavs: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            labels: LabelRange::default(),
            require_features: true,
            require_wavs: true,
        }
    }
}

fn opt(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        let mut seen = HashSet::new();
        for r in &m.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Label range observed over `split` (or all records when `None`).
    pub fn observed_range(&self, split: Option<Split>) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in self
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
        {
            for v in r.labels.to_array() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

pub fn load_manifest(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Manifest> {
    let path = path.as_ref();
    let load = |message: String| Error::Load {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| load(e.to_string()))?;
    let header = reader.headers().map_err(|e| load(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(load(format!(
            "header must be {}, got {}",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| load(format!("line {line}: {e}")))?;
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(load(format!("line {line}: empty id")));
        }
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(load(format!(
                "duplicate id {id:?} on lines {prev} and {line}"
            )));
        }
        let split: Split = field(1)
            .parse()
            .map_err(|e: Error| load(format!("line {line} (id {id}): {e}")))?;
        let mut labels = [0.0; 3];
        for (k, name) in ["act", "val", "dom"].iter().enumerate() {
            let raw = field(2 + k);
            let v: f64 = raw.parse().map_err(|_| {
                load(format!(
                    "line {line} (id {id}): {name}={raw:?} is not a number"
                ))
            })?;
            if !v.is_finite() || v < opts.labels.min || v > opts.labels.max {
                return Err(load(format!(
                    "line {line} (id {id}): {name}={v} outside label range [{}, {}]",
                    opts.labels.min, opts.labels.max
                )));
            }
            labels[k] = v;
        }
        let feature_path = field(5).to_string();
        if feature_path.is_empty() {
            return Err(load(format!("line {line} (id {id}): empty feature_path")));
        }
        records.push(ManifestRecord {
            id,
            split,
            labels: EmotionTriple::from_array(labels),
            feature_path,
            wav_path: opt(field(6)),
            ref_transcript: opt(row.get(7).unwrap_or("")),
            hyp_transcript: opt(row.get(8).unwrap_or("")),
            noise_aware: false,
        });
    }
    let m = Manifest { records, base_dir };
    for r in &m.records {
        if opts.require_features && !m.resolve(&r.feature_path).is_file() {
            return Err(load(format!(
                "id {}: feature file {} not found",
                r.id,
                m.resolve(&r.feature_path).display()
            )));
        }
        if let Some(w) = r.wav_path.as_ref().filter(|_| opts.require_wavs) {
            if !m.resolve(w).is_file() {
                return Err(load(format!(
                    "id {}: wav file {} not found",
                    r.id,
                    m.resolve(w).display()
                )));
            }
        }
    }
    Ok(m)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in &m.records {
        let labels = r.labels.to_array().map(|v| v.to_string());
        w.write_record([
            r.id.as_str(),
            r.split.as_str(),
            &labels[0],
            &labels[1],
            &labels[2],
            &r.feature_path,
            r.wav_path.as_deref().unwrap_or(""),
            r.ref_transcript.as_deref().unwrap_or(""),
            r.hyp_transcript.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Flags exactly `round(fraction · n_train)` train records, chosen by `seed`.
/// Existing flags are cleared first; other splits are never flagged.
pub fn mark_noise_aware(m: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    let train: Vec<usize> = m
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let picked = noise_aware_subset(train.len(), fraction, seed)?;
    let mut out = m.clone();
    out.records.iter_mut().for_each(|r| r.noise_aware = false);
    for k in picked {
        out.records[train[k]].noise_aware = true;
    }
    Ok(out)
}

/// Flags `round(fraction * n)` of the given training examples, using the
/// same selection as [`mark_noise_aware`].
pub fn mark_examples_noise_aware(examples: &mut [Example], fraction: f64, seed: u64) -> Result<()> {
    let picked = noise_aware_subset(examples.len(), fraction, seed)?;
    examples.iter_mut().for_each(|e| e.noise_aware = false);
    for k in picked {
        examples[k].noise_aware = true;
    }
    Ok(())
}

fn noise_aware_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "noise-aware fraction must be in [0, 1], got {fraction}"
        )));
    }
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, n, count).into_vec())
}

/// One utterance ready for a model: labels plus one feature sequence per
/// input stream, and optionally the corrupted variant of those streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub labels: EmotionTriple,
    pub inputs: Vec<FeatureSequence>,
    pub corrupted: Option<Vec<FeatureSequence>>,
    pub noise_aware: bool,
}

/// Joins manifests by id into examples of `split`, one input stream per
/// manifest in order. The first manifest fixes ordering, labels and
/// noise-aware flags; every other manifest must contain each id with the
/// same labels.
pub fn load_examples(manifests: &[&Manifest], split: Split) -> Result<Vec<Example>> {
    let (first, rest) = manifests
        .split_first()
        .ok_or_else(|| Error::invalid("at least one manifest is required"))?;
    let index: Vec<HashMap<&str, &ManifestRecord>> = rest
        .iter()
        .map(|m| m.records.iter().map(|r| (r.id.as_str(), r)).collect())
        .collect();
    let jobs: Vec<(&ManifestRecord, Vec<PathBuf>)> = first
        .split(split)
        .map(|r| {
            let mut paths = vec![first.resolve(&r.feature_path)];
            for (m, idx) in rest.iter().zip(&index) {
                let other = idx.get(r.id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("id {:?} missing from a joined manifest", r.id))
                })?;
                if other.labels != r.labels {
                    return Err(Error::invalid(format!(
                        "id {:?} has different labels across joined manifests",
                        r.id
                    )));
                }
                paths.push(m.resolve(&other.feature_path));
            }
            Ok((r, paths))
        })
        .collect::<Result<_>>()?;
    jobs.par_iter()
        .map(|(r, paths)| {
            let inputs = paths
                .iter()
                .map(read_feature_file)
                .collect::<Result<Vec<_>>>()?;
            Ok(Example {
                id: r.id.clone(),
                labels: r.labels,
                inputs,
                corrupted: None,
                noise_aware: r.noise_aware,
            })
        })
        .collect()
}

/// Attaches corrupted input variants (one per stream, same order) to
/// `examples` by id.
pub fn attach_corrupted(examples: &mut [Example], corrupted: &[Example]) -> Result<()> {
    let by_id: HashMap<&str, &Example> = corrupted.iter().map(|e| (e.id.as_str(), e)).collect();
    for ex in examples.iter_mut() {
        let c = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| Error::invalid(format!("no corrupted variant for id {:?}", ex.id)))?;
        if c.inputs.len() != ex.inputs.len() {
            return Err(Error::invalid(format!(
                "id {:?}: corrupted variant has {} streams, clean has {}",
                ex.id,
                c.inputs.len(),
                ex.inputs.len()
            )));
        }
        ex.corrupted = Some(c.inputs.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_feature_file;
    use std::fs;

    fn fixture(dir: &Path, rows: &[&str]) -> PathBuf {
        let feat = FeatureSequence::new(2, vec![0.0; 4]).unwrap();
        write_feature_file(dir.join("f.afe"), &feat).unwrap();
        let path = dir.join("m.csv");
        let mut text = MANIFEST_HEADER.join(",");
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&path, text).unwrap();
        path
    }

    fn train_manifest(n: usize) -> Manifest {
        let records = (0..n)
            .map(|i| ManifestRecord {
                id: format!("u{i}"),
                split: if i % 5 == 4 {
                    Split::Valid
                } else {
                    Split::Train
                },
                labels: EmotionTriple::new(2.0, 3.0, 4.0),
                feature_path: "x".into(),
                wav_path: None,
                ref_transcript: None,
                hyp_transcript: None,
                noise_aware: false,
            })
            .collect();
        Manifest::new(records, ".").unwrap()
    }

    #[test]
    fn three_rows_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            &[
                "a,train,1,2,3,f.afe,,,",
                "b,valid,4,5,6,f.afe,,hello world,hello word",
                "c,eval,7,7,7,f.afe,,,",
            ],
        );
        let m = load_manifest(&p, &LoadOptions::default()).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[1].ref_transcript.as_deref(), Some("hello world"));
        assert_eq!(m.records[2].split, Split::Eval);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            &["dup,train,1,2,3,f.afe,,,", "dup,train,1,2,3,f.afe,,,"],
        );
        let err = load_manifest(&p, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("\"dup\""), "{err}");
    }

    #[test]
    fn out_of_range_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            &["a,train,1,2,3,f.afe,,,", "b,train,9.0,2,3,f.afe,,,"],
        );
        let err = load_manifest(&p, &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("act=9"), "{msg}");
    }

    #[test]
    fn missing_feature_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), &["a,train,1,2,3,nope.afe,,,"]);
        assert!(matches!(
            load_manifest(&p, &LoadOptions::default()),
            Err(Error::Load { .. })
        ));
        let lax = LoadOptions {
            require_features: false,
            ..LoadOptions::default()
        };
        assert!(load_manifest(&p, &lax).is_ok());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            &[
                "a,train,1.25,2,3,f.afe,,\"x, y\",z",
                "b,eval,4,5,6.5,f.afe,,,",
            ],
        );
        let m = load_manifest(&p, &LoadOptions::default()).unwrap();
        let q = dir.path().join("copy.csv");
        write_manifest(&q, &m).unwrap();
        let back = load_manifest(&q, &LoadOptions::default()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn noise_aware_counts() {
        // 200 train + 50 valid
        let m = train_manifest(250);
        let count = |m: &Manifest| m.records.iter().filter(|r| r.noise_aware).count();
        assert_eq!(count(&mark_noise_aware(&m, 0.0, 1).unwrap()), 0);
        let a = mark_noise_aware(&m, 0.09, 1).unwrap();
        assert_eq!(count(&a), 18);
        assert!(a.split(Split::Valid).all(|r| !r.noise_aware));
        let b = mark_noise_aware(&m, 0.09, 1).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.records.iter().zip(&m.records) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.split, y.split);
        }
        assert!(mark_noise_aware(&m, 1.5, 1).is_err());
    }

    #[test]
    fn examples_join_streams_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            &["a,train,1,2,3,f.afe,,,", "b,train,4,5,6,f.afe,,,"],
        );
        let m1 = load_manifest(&p, &LoadOptions::default()).unwrap();
        let mut m2 = m1.clone();
        m2.records.reverse();
        let ex = load_examples(&[&m1, &m2], Split::Train).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].id, "a");
        assert_eq!(ex[0].inputs.len(), 2);
        m2.records[0].labels.act = 1.5;
        assert!(load_examples(&[&m1, &m2], Split::Train).is_err());
    }
}
