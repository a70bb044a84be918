use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use super::DistillArgs;
use super::{
    resolve_config, EvaluateArgs, ExtractArgs, GradcheckArgs, MixArgs, RunConfig, RunLog,
    SynthArgs, TrainArgs, WerArgs,
};
use crate::data::{
    attach_corrupted, generate_synthetic, load_examples, load_manifest, mark_examples_noise_aware,
    write_feature_file, write_manifest, Example, LoadOptions, Manifest, ManifestRecord, Split,
};
use crate::distill::{teacher_outputs, train_student, write_teacher_cache};
use crate::error::{Error, Result};
use crate::metrics::{
    ccc_per_dim, tertile_edges, wer_by_band, write_band_report, BandRecord, EmotionTriple,
    Normalizer,
};
use crate::models::{
    build_tcgru, load_model, model_grad_check, save_model, AnyModel, FusionModel, Model, TcGruModel,
};
use crate::signal::{
    corrupt, extract_mfbf0, file_rng, read_wav, write_wav, CorruptionSpec, Waveform,
    WAV_SAMPLE_RATE,
};
use crate::trainer::{
    run_condition_matrix, train as train_model, write_condition_report, write_history,
    ConditionRow, MatrixEntry, TrainOutcome,
};

/// Creates the output directory, resolves the config and starts the log.
fn prepare(
    command: &str,
    out_dir: &Path,
    config: Option<&Path>,
    threads: Option<usize>,
    seed_flag: Option<u64>,
) -> Result<(RunConfig, u64, RunLog)> {
    fs::create_dir_all(out_dir)?;
    let mut cfg = resolve_config(config)?;
    if let Some(s) = seed_flag {
        cfg.set("seed", &s.to_string())?;
    }
    let seed = cfg.seed()?;
    let mut log = RunLog::new(command, &cfg, seed, threads);
    if let Some(p) = config {
        log.input(p)?;
    }
    Ok((cfg, seed, log))
}

fn load_opts(cfg: &RunConfig) -> Result<LoadOptions> {
    Ok(LoadOptions {
        labels: cfg.labels()?,
        ..LoadOptions::default()
    })
}

/// Loads stream manifests and logs digests of them and of their feature files.
fn load_streams(paths: &[PathBuf], cfg: &RunConfig, log: &mut RunLog) -> Result<Vec<Manifest>> {
    let opts = load_opts(cfg)?;
    paths
        .iter()
        .map(|p| {
            let m = load_manifest(p, &opts)?;
            log.input(p)?;
            let files: Vec<PathBuf> = m
                .records
                .iter()
                .map(|r| m.resolve(&r.feature_path))
                .collect();
            log.input_set(&format!("{}.features", p.display()), &files)?;
            Ok(m)
        })
        .collect()
}

fn examples(ms: &[Manifest], split: Split) -> Result<Vec<Example>> {
    let refs: Vec<&Manifest> = ms.iter().collect();
    load_examples(&refs, split)
}

fn nonempty(ex: &[Example], what: &str) -> Result<()> {
    if ex.is_empty() {
        return Err(Error::invalid(format!(
            "no {what} utterances in the manifests"
        )));
    }
    Ok(())
}

/// Train and valid examples, with corrupted variants attached and flagged
/// when noise-aware training is on.
fn train_valid(
    manifests: &[PathBuf],
    corrupted: &[PathBuf],
    cfg: &RunConfig,
    seed: u64,
    log: &mut RunLog,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let tcfg = cfg.train()?;
    let ms = load_streams(manifests, cfg, log)?;
    let mut tr = examples(&ms, Split::Train)?;
    let va = examples(&ms, Split::Valid)?;
    nonempty(&tr, "train")?;
    nonempty(&va, "valid")?;
    if tcfg.noise_aware {
        if corrupted.len() != manifests.len() {
            return Err(Error::Config(format!(
                "train.noise_aware needs one --corrupted-manifest per --manifest ({} vs {})",
                corrupted.len(),
                manifests.len()
            )));
        }
        let cms = load_streams(corrupted, cfg, log)?;
        attach_corrupted(&mut tr, &examples(&cms, Split::Train)?)?;
        mark_examples_noise_aware(&mut tr, cfg.get("train.noise_fraction")?, seed)?;
    } else if !corrupted.is_empty() {
        return Err(Error::Config(
            "--corrupted-manifest given but train.noise_aware=false".into(),
        ));
    }
    Ok((tr, va))
}

fn finish_training<M: Model>(
    out: &TrainOutcome<M>,
    out_dir: &Path,
    ckpt_name: &str,
    log: &mut RunLog,
) -> Result<()> {
    save_model(out_dir.join(ckpt_name), &out.model)?;
    let mut hist = Vec::new();
    write_history(&out.history, &mut hist)?;
    fs::write(out_dir.join("history.csv"), hist)?;
    log.output(ckpt_name);
    log.output("history.csv");
    log.write(out_dir)?;
    let c = out.best_valid_ccc;
    println!(
        "best_epoch={} valid_ccc act={:.6} val={:.6} dom={:.6}",
        out.best_epoch, c[0], c[1], c[2]
    );
    Ok(())
}

fn resolve_wav(wav_dir: &Path, r: &ManifestRecord) -> PathBuf {
    match &r.wav_path {
        Some(w) if Path::new(w).is_absolute() => PathBuf::from(w),
        Some(w) => wav_dir.join(w),
        None => wav_dir.join(format!("{}.wav", r.id)),
    }
}

fn canonical(p: &Path) -> Result<String> {
    let c = fs::canonicalize(p).map_err(|e| Error::Load {
        path: p.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(c.display().to_string())
}

pub fn extract_features(a: &ExtractArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, _, mut log) = prepare(
        "extract-features",
        &a.out_dir,
        a.config.as_deref(),
        threads,
        None,
    )?;
    let fe = cfg.frontend()?;
    let opts = LoadOptions {
        require_features: false,
        require_wavs: false,
        ..load_opts(&cfg)?
    };
    let m = load_manifest(&a.manifest, &opts)?;
    log.input(&a.manifest)?;
    log.arg("wav_dir", a.wav_dir.display());
    let wavs: Vec<PathBuf> = m
        .records
        .iter()
        .map(|r| resolve_wav(&a.wav_dir, r))
        .collect();
    log.input_set("wavs", &wavs)?;
    let feats = wavs
        .par_iter()
        .map(|p| extract_mfbf0(&read_wav(p, WAV_SAMPLE_RATE)?, &fe))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(a.out_dir.join("features"))?;
    let mut records = Vec::with_capacity(m.records.len());
    for ((r, f), w) in m.records.iter().zip(&feats).zip(&wavs) {
        let rel = format!("features/{}.afe", r.id);
        write_feature_file(a.out_dir.join(&rel), f)?;
        records.push(ManifestRecord {
            feature_path: rel,
            wav_path: Some(canonical(w)?),
            ..r.clone()
        });
    }
    write_manifest(
        a.out_dir.join("manifest.csv"),
        &Manifest::new(records, &a.out_dir)?,
    )?;
    log.output("manifest.csv");
    log.write(&a.out_dir)?;
    println!("extracted {} utterances", feats.len());
    Ok(())
}

fn parse_band(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("--band must be LOW,HIGH in dB, got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

/// A noise excerpt as long as `n`: a random window of a longer recording,
/// or the recording repeated.
fn noise_excerpt<R: Rng>(noise: &Waveform, n: usize, rng: &mut R) -> Result<Waveform> {
    let s = &noise.samples;
    let samples = if s.len() >= n {
        let off = rng.gen_range(0..=s.len() - n);
        s[off..off + n].to_vec()
    } else {
        s.iter().cycle().take(n).copied().collect()
    };
    Waveform::new(samples, noise.sample_rate)
}

pub fn mix_noise(a: &MixArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, seed, mut log) = prepare(
        "mix-noise",
        &a.out_dir,
        a.config.as_deref(),
        threads,
        a.seed,
    )?;
    let (lo, hi) = parse_band(&a.band)?;
    let mut spec = CorruptionSpec::band(lo, hi, seed)?;
    spec.rt60 = a.rt60;
    spec.validate()?;
    log.arg("band", format!("{lo},{hi}"));
    log.arg("rt60", a.rt60.map_or("none".to_string(), |v| v.to_string()));
    let opts = LoadOptions {
        require_features: false,
        ..load_opts(&cfg)?
    };
    let m = load_manifest(&a.manifest, &opts)?;
    log.input(&a.manifest)?;
    let mut noise_paths: Vec<PathBuf> = fs::read_dir(&a.noise_dir)
        .map_err(|e| Error::Load {
            path: a.noise_dir.clone(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    noise_paths.sort();
    if noise_paths.is_empty() {
        return Err(Error::invalid(format!(
            "no .wav files in {}",
            a.noise_dir.display()
        )));
    }
    log.input_set("noise", &noise_paths)?;
    let noises = noise_paths
        .iter()
        .map(|p| read_wav(p, WAV_SAMPLE_RATE))
        .collect::<Result<Vec<_>>>()?;
    let clean_paths = m
        .records
        .iter()
        .map(|r| {
            r.wav_path
                .as_ref()
                .map(|w| m.resolve(w))
                .ok_or_else(|| Error::invalid(format!("record {:?} has no wav_path", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    log.input_set("wavs", &clean_paths)?;
    fs::create_dir_all(a.out_dir.join("wav"))?;
    let rows = m
        .records
        .par_iter()
        .zip(&clean_paths)
        .enumerate()
        .map(|(i, (r, p))| {
            let mut rng = file_rng(seed, i as u64);
            let clean = read_wav(p, WAV_SAMPLE_RATE)?;
            let k = rng.gen_range(0..noises.len());
            let noise = noise_excerpt(&noises[k], clean.len(), &mut rng)?;
            let out = corrupt(&clean, &noise, &spec, &mut rng)?;
            let rel = format!("wav/{}.wav", r.id);
            write_wav(a.out_dir.join(&rel), &out.wave)?;
            Ok((rel, out.snr_db, out.clip_fraction))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(a.out_dir.join("corruption.csv"))?;
    w.write_record(["id", "snr_db", "rir_id", "clip_fraction"])?;
    let mut records = Vec::with_capacity(rows.len());
    for (i, (r, (rel, snr, clip))) in m.records.iter().zip(&rows).enumerate() {
        let rir = if a.rt60.is_some() {
            format!("synth{i}")
        } else {
            "none".to_string()
        };
        w.write_record([
            r.id.as_str(),
            &format!("{snr:.6}"),
            &rir,
            &format!("{clip:.6}"),
        ])?;
        records.push(ManifestRecord {
            feature_path: format!("features/{}.afe", r.id),
            wav_path: Some(rel.clone()),
            ..r.clone()
        });
    }
    w.flush()?;
    write_manifest(
        a.out_dir.join("manifest.csv"),
        &Manifest::new(records, &a.out_dir)?,
    )?;
    log.output("corruption.csv");
    log.output("manifest.csv");
    log.write(&a.out_dir)?;
    println!(
        "corrupted {} utterances in band [{lo}, {hi}] dB",
        rows.len()
    );
    Ok(())
}

fn load_lexical_branches(cfg: &RunConfig, log: &mut RunLog) -> Result<Vec<TcGruModel>> {
    cfg.get_list::<String>("fusion.lexical_checkpoints")?
        .iter()
        .map(|p| {
            let p = Path::new(p);
            log.input(p)?;
            match load_model(p)? {
                AnyModel::TcGru(m) => Ok(m),
                AnyModel::Fusion(_) => Err(Error::Config(format!(
                    "lexical checkpoint {} is a fusion model",
                    p.display()
                ))),
            }
        })
        .collect()
}

pub fn train(a: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, seed, mut log) = prepare("train", &a.out_dir, a.config.as_deref(), threads, None)?;
    let tcfg = cfg.train()?;
    let (tr, va) = train_valid(&a.manifest, &a.corrupted_manifest, &cfg, seed, &mut log)?;
    match cfg.raw("model.type") {
        "tcgru" => {
            if a.manifest.len() != 1 {
                return Err(Error::Config(format!(
                    "model.type=tcgru takes one --manifest, got {}",
                    a.manifest.len()
                )));
            }
            let model = build_tcgru(&cfg.tcgru(tr[0].inputs[0].dim())?, seed)?;
            let out = train_model(model, &tr, &va, &tcfg)?;
            finish_training(&out, &a.out_dir, "model.ckpt", &mut log)
        }
        "fusion" => {
            let lexical = load_lexical_branches(&cfg, &mut log)?;
            let n_acoustic = a
                .manifest
                .len()
                .checked_sub(lexical.len())
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "fusion needs at least one acoustic --manifest before the {} lexical ones",
                        lexical.len()
                    ))
                })?;
            let dims = tr[0].inputs[..n_acoustic].iter().map(|f| f.dim()).collect();
            let model = FusionModel::new(cfg.fusion(dims)?, lexical, seed)?;
            let out = train_model(model, &tr, &va, &tcfg)?;
            finish_training(&out, &a.out_dir, "model.ckpt", &mut log)
        }
        other => Err(Error::Config(format!(
            "model.type must be tcgru or fusion, got {other:?}"
        ))),
    }
}

pub fn distill(a: &DistillArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, seed, mut log) = prepare("distill", &a.out_dir, a.config.as_deref(), threads, None)?;
    let tcfg = cfg.train()?;
    let dcfg = cfg.distill()?;
    let teacher = load_model(&a.teacher)?;
    log.input(&a.teacher)?;
    let tms = load_streams(&a.teacher_manifest, &cfg, &mut log)?;
    let t_train = examples(&tms, Split::Train)?;
    nonempty(&t_train, "teacher train")?;
    let outputs = teacher_outputs(teacher.as_predictor(), &t_train)?;
    let mut cache = Vec::new();
    write_teacher_cache(&outputs, &mut cache)?;
    fs::write(a.out_dir.join("teacher_cache.csv"), cache)?;
    log.output("teacher_cache.csv");
    let (tr, va) = train_valid(&a.manifest, &a.corrupted_manifest, &cfg, seed, &mut log)?;
    if a.manifest.len() != 1 {
        return Err(Error::Config(format!(
            "the student takes one --manifest, got {}",
            a.manifest.len()
        )));
    }
    let student = build_tcgru(&cfg.tcgru(tr[0].inputs[0].dim())?, seed)?;
    let out = train_student(&outputs, student, &tr, &va, &tcfg, &dcfg)?;
    finish_training(&out, &a.out_dir, "student.ckpt", &mut log)
}

fn read_predictions(path: &Path) -> Result<HashMap<String, EmotionTriple>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != ["id", "act", "val", "dom"] {
        return Err(Error::Load {
            path: path.to_path_buf(),
            message: format!("header must be id,act,val,dom, got {}", header.join(",")),
        });
    }
    let mut out = HashMap::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; 3];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1].trim().parse().map_err(|_| Error::Load {
                path: path.to_path_buf(),
                message: format!("line {}: {:?} is not a number", i + 2, &rec[k + 1]),
            })?;
        }
        out.insert(rec[0].to_string(), EmotionTriple::from_array(v));
    }
    Ok(out)
}

fn parse_condition(s: &str) -> Result<(String, Vec<PathBuf>)> {
    let (name, streams) = s
        .split_once('=')
        .filter(|(n, st)| !n.is_empty() && !st.is_empty())
        .ok_or_else(|| {
            Error::Config(format!(
                "--condition must be NAME=MANIFEST[+MANIFEST...], got {s:?}"
            ))
        })?;
    Ok((
        name.to_string(),
        streams.split('+').map(PathBuf::from).collect(),
    ))
}

pub fn evaluate(a: &EvaluateArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, _, mut log) = prepare("evaluate", &a.out_dir, a.config.as_deref(), threads, None)?;
    let split: Split = a.split.parse()?;
    log.arg("split", split);
    let clean = examples(&load_streams(&a.manifest, &cfg, &mut log)?, split)?;
    nonempty(&clean, split.as_str())?;
    let rows = if let Some(p) = &a.predictions {
        if !a.condition.is_empty() {
            return Err(Error::Config(
                "--condition cannot be combined with --predictions".into(),
            ));
        }
        log.input(p)?;
        let preds = read_predictions(p)?;
        let pred: Vec<EmotionTriple> = clean
            .iter()
            .map(|e| {
                preds
                    .get(&e.id)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("no prediction for {:?}", e.id)))
            })
            .collect::<Result<_>>()?;
        let target: Vec<EmotionTriple> = clean.iter().map(|e| e.labels).collect();
        vec![ConditionRow {
            system: "predictions".into(),
            condition: "clean".into(),
            ccc: ccc_per_dim(&pred, &target)?,
        }]
    } else {
        if a.model.is_empty() {
            return Err(Error::Config(
                "evaluate needs --model or --predictions".into(),
            ));
        }
        let mut models: Vec<(String, AnyModel)> = Vec::new();
        for spec in &a.model {
            let (name, path) = match spec.split_once('=') {
                Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
                _ => {
                    let p = PathBuf::from(spec);
                    let stem = p
                        .file_stem()
                        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
                    (stem, p)
                }
            };
            if models.iter().any(|(n, _)| *n == name) {
                return Err(Error::Config(format!(
                    "system name {name:?} used twice; pass --model NAME=PATH"
                )));
            }
            log.input(&path)?;
            models.push((name, load_model(&path)?));
        }
        let mut names = vec!["clean".to_string()];
        let mut sets = BTreeMap::from([("clean".to_string(), clean)]);
        for c in &a.condition {
            let (name, streams) = parse_condition(c)?;
            if sets.contains_key(&name) {
                return Err(Error::Config(format!("condition {name:?} given twice")));
            }
            let ex = examples(&load_streams(&streams, &cfg, &mut log)?, split)?;
            names.push(name.clone());
            sets.insert(name, ex);
        }
        let entries: Vec<MatrixEntry<'_>> = models
            .iter()
            .map(|(name, m)| MatrixEntry {
                system: name.clone(),
                model: m.as_predictor(),
                streams: (0..m.n_inputs()).collect(),
            })
            .collect();
        run_condition_matrix(&entries, &names, &sets)?
    };
    let mut buf = Vec::new();
    write_condition_report(&rows, &mut buf)?;
    fs::write(a.out_dir.join("report.csv"), &buf)?;
    log.output("report.csv");
    log.write(&a.out_dir)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

pub fn wer_report(a: &WerArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, _, mut log) = prepare("wer-report", &a.out_dir, a.config.as_deref(), threads, None)?;
    let split = a.split.as_deref().map(str::parse::<Split>).transpose()?;
    let opts = LoadOptions {
        require_features: false,
        require_wavs: false,
        ..load_opts(&cfg)?
    };
    let m = load_manifest(&a.manifest, &opts)?;
    log.input(&a.manifest)?;
    log.arg("split", split.map_or("all", Split::as_str));
    let norm = Normalizer::default();
    let records: Vec<BandRecord> = m
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .filter_map(|r| {
            r.ref_transcript.as_ref().map(|reference| BandRecord {
                labels: r.labels,
                reference: norm.tokenize(reference),
                hypothesis: norm.tokenize(r.hyp_transcript.as_deref().unwrap_or("")),
            })
        })
        .collect();
    if records.is_empty() {
        return Err(Error::invalid("no records with a reference transcript"));
    }
    let labels: Vec<EmotionTriple> = records.iter().map(|r| r.labels).collect();
    let report = wer_by_band(&records, &tertile_edges(&labels)?)?;
    let mut buf = Vec::new();
    write_band_report(&report, &mut buf)?;
    fs::write(a.out_dir.join("wer_by_band.csv"), &buf)?;
    log.output("wer_by_band.csv");
    log.write(&a.out_dir)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

pub fn synth_data(a: &SynthArgs, threads: Option<usize>) -> Result<()> {
    let (cfg, _, mut log) = prepare("synth-data", &a.out_dir, a.config.as_deref(), threads, None)?;
    let corpus = generate_synthetic(&cfg.synthetic()?)?;
    for name in corpus.write(&a.out_dir)? {
        println!("{name}");
        log.output(&name);
    }
    log.write(&a.out_dir)
}

/// Fails when the worst relative error reaches this bound.
const GRADCHECK_TOL: f64 = 1e-3;

pub fn gradcheck(a: &GradcheckArgs, threads: Option<usize>) -> Result<()> {
    let out_dir = a.out_dir.as_deref();
    let (cfg, seed, log) = match out_dir {
        Some(d) => prepare("gradcheck", d, a.config.as_deref(), threads, None)?,
        None => {
            let cfg = resolve_config(a.config.as_deref())?;
            let seed = cfg.seed()?;
            let log = RunLog::new("gradcheck", &cfg, seed, threads);
            (cfg, seed, log)
        }
    };
    let dim: usize = cfg.get("model.input_dim")?;
    let model = build_tcgru(&cfg.tcgru(dim)?, seed)?;
    let r = model_grad_check(
        &model,
        &[dim],
        cfg.get("gradcheck.batch")?,
        cfg.get("gradcheck.frames")?,
        cfg.get("gradcheck.max_coords")?,
        seed,
    )?;
    println!(
        "max_rel_err={:.3e} worst={}[{}] checked={}",
        r.max_rel_err, r.worst_param, r.worst_index, r.checked
    );
    if let Some(d) = out_dir {
        log.write(d)?;
    }
    if r.max_rel_err >= GRADCHECK_TOL {
        return Err(Error::Contract(format!(
            "gradient check failed: max relative error {:.3e} at {}[{}]",
            r.max_rel_err, r.worst_param, r.worst_index
        )));
    }
    Ok(())
}
