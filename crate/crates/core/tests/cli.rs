//! End-to-end tests of the `affectkit` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use affectkit::data::{read_feature_file, write_manifest, Manifest, ManifestRecord, Split};
use affectkit::metrics::EmotionTriple;
use affectkit::signal::{read_wav, write_wav, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 16_000;

fn affectkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affectkit"))
        .args(args)
        .env_remove("AFFECTKIT_SEED")
        .output()
        .unwrap()
}

fn affectkit_ok(args: &[&str]) -> String {
    let out = affectkit(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn record(
    id: &str,
    split: Split,
    labels: [f64; 3],
    transcripts: Option<(&str, &str)>,
) -> ManifestRecord {
    ManifestRecord {
        id: id.into(),
        split,
        labels: EmotionTriple::from_array(labels),
        feature_path: format!("features/{id}.afe"),
        wav_path: Some(format!("{id}.wav")),
        ref_transcript: transcripts.map(|t| t.0.into()),
        hyp_transcript: transcripts.map(|t| t.1.into()),
        noise_aware: false,
    }
}

fn write_fixture(dir: &Path, clips: &[(&str, Vec<f64>)]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut records = Vec::new();
    for (i, (id, s)) in clips.iter().enumerate() {
        write_wav(
            dir.join(format!("{id}.wav")),
            &Waveform::new(s.clone(), SR).unwrap(),
        )
        .unwrap();
        records.push(record(
            id,
            Split::Eval,
            [1.0 + (i % 7) as f64, 4.0, 7.0 - (i % 7) as f64],
            None,
        ));
    }
    let m = dir.join("manifest.csv");
    write_manifest(&m, &Manifest::new(records, dir).unwrap()).unwrap();
    m
}

fn tone(freq: f64, amp: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(SR)).sin())
        .collect()
}

/// HTK mel centres of `n` bands spanning `fmin..fmax`.
fn mel_centres(n: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(fmin), mel(fmax));
    (1..=n)
        .map(|k| hz(lo + (hi - lo) * k as f64 / (n + 1) as f64))
        .collect()
}

#[test]
fn extract_features_silence_and_tone() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    let manifest = write_fixture(
        &wavs,
        &[
            ("quiet", vec![0.0; 8000]),
            ("tone", tone(1000.0, 0.5, 8000)),
        ],
    );
    let out = dir.path().join("feats");
    affectkit_ok(&[
        "extract-features",
        "--wav-dir",
        p(&wavs),
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(&out),
    ]);

    let floor = (1e-10f64).ln() as f32;
    let quiet = read_feature_file(out.join("features/quiet.afe")).unwrap();
    assert_eq!(quiet.dim(), 43);
    // 25 ms frames every 10 ms over 0.5 s
    assert_eq!(quiet.frames(), 1 + (8000 - 400) / 160);
    for t in 0..quiet.frames() {
        assert!(quiet.frame(t)[..40].iter().all(|&v| v == floor));
        assert!(quiet.frame(t)[40..].iter().all(|&v| v == 0.0));
    }

    let centres = mel_centres(40, 20.0, 8000.0);
    let nearest = (0..40)
        .min_by(|&a, &b| {
            (centres[a] - 1000.0)
                .abs()
                .total_cmp(&(centres[b] - 1000.0).abs())
        })
        .unwrap();
    let t = read_feature_file(out.join("features/tone.afe")).unwrap();
    for f in 0..t.frames() {
        let mel = &t.frame(f)[..40];
        let argmax = (0..40).max_by(|&a, &b| mel[a].total_cmp(&mel[b])).unwrap();
        assert_eq!(argmax, nearest, "frame {f}");
    }
    let written = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(written
        .starts_with("id,split,act,val,dom,feature_path,wav_path,ref_transcript,hyp_transcript"));
    assert!(fs::read_to_string(out.join("run.log"))
        .unwrap()
        .contains("command=extract-features"));
}

#[test]
fn mix_noise_respects_band_and_logs_snr() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clips: Vec<(String, Vec<f64>)> = (0..12)
        .map(|i| (format!("c{i}"), tone(150.0 + 20.0 * i as f64, 0.05, 4000)))
        .collect();
    let refs: Vec<(&str, Vec<f64>)> = clips.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    let manifest = write_fixture(&wavs, &refs);
    let noise = dir.path().join("noise");
    fs::create_dir_all(&noise).unwrap();
    let n: Vec<f64> = (0..6000).map(|_| rng.gen_range(-0.05..0.05)).collect();
    write_wav(noise.join("hum.wav"), &Waveform::new(n, SR).unwrap()).unwrap();
    let out = dir.path().join("mixed");
    affectkit_ok(&[
        "mix-noise",
        "--manifest",
        p(&manifest),
        "--noise-dir",
        p(&noise),
        "--band",
        "10,20",
        "--seed",
        "3",
        "--out-dir",
        p(&out),
    ]);
    let mut rd = csv::Reader::from_path(out.join("corruption.csv")).unwrap();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.unwrap();
        let snr: f64 = rec[1].parse().unwrap();
        assert!((10.0..=20.0).contains(&snr), "{snr}");
        assert_eq!(&rec[2], "none");
        // low amplitudes never clip, so the mixture minus the clean signal
        // is the scaled noise up to 16-bit quantization
        let clean = read_wav(wavs.join(format!("{}.wav", &rec[0])), SR).unwrap();
        let mixed = read_wav(out.join(format!("wav/{}.wav", &rec[0])), SR).unwrap();
        let pc: f64 = clean.samples.iter().map(|v| v * v).sum();
        let pn: f64 = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| (m - c) * (m - c))
            .sum();
        assert!((10.0 * (pc / pn).log10() - snr).abs() < 0.1, "{snr}");
        rows += 1;
    }
    assert_eq!(rows, 12);
}

#[test]
fn labels_as_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("small.cfg");
    fs::write(
        &cfg,
        "synth.n_train=20\nsynth.n_valid=10\nsynth.n_eval=30\n",
    )
    .unwrap();
    affectkit_ok(&["synth-data", "--out-dir", p(&data), "--config", p(&cfg)]);
    let manifest = data.join("acoustic.csv");
    let mut preds = String::from("id,act,val,dom\n");
    let mut rd = csv::Reader::from_path(&manifest).unwrap();
    for rec in rd.records() {
        let rec = rec.unwrap();
        preds.push_str(&format!(
            "{},{},{},{}\n",
            &rec[0], &rec[2], &rec[3], &rec[4]
        ));
    }
    let pred_path = dir.path().join("preds.csv");
    fs::write(&pred_path, preds).unwrap();
    let out = dir.path().join("eval");
    let stdout = affectkit_ok(&[
        "evaluate",
        "--predictions",
        p(&pred_path),
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(stdout, report);
    let row = report.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(&cells[..2], ["predictions", "clean"]);
    for c in &cells[2..] {
        assert!((c.parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{row}");
    }
}

#[test]
fn identical_transcripts_give_zero_error_rates() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<ManifestRecord> = (0..9)
        .map(|i| {
            let text = format!("utterance number {i} is here");
            let mut r = record(
                &format!("u{i}"),
                Split::Eval,
                [
                    1.0 + 0.7 * i as f64,
                    6.0 - 0.5 * i as f64,
                    2.0 + 0.3 * i as f64,
                ],
                None,
            );
            r.ref_transcript = Some(text.clone());
            r.hyp_transcript = Some(text.to_uppercase());
            r
        })
        .collect();
    let manifest = dir.path().join("m.csv");
    write_manifest(&manifest, &Manifest::new(records, dir.path()).unwrap()).unwrap();
    let out = dir.path().join("wer");
    affectkit_ok(&[
        "wer-report",
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(&out),
    ]);
    let report = fs::read_to_string(out.join("wer_by_band.csv")).unwrap();
    let mut checked = 0;
    for line in report.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells[2] != "0" {
            assert_eq!(&cells[3..], ["0.000000", "0.000000", "0.000000"], "{line}");
            checked += 1;
        }
    }
    assert!(checked >= 3, "{report}");
}

#[test]
fn gradcheck_passes_on_a_fresh_model() {
    let stdout = affectkit_ok(&["gradcheck"]);
    let err: f64 = stdout
        .split_whitespace()
        .find_map(|t| t.strip_prefix("max_rel_err="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-3, "{stdout}");
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(s.trim_end().lines().count(), 1, "{s}");
    s.trim_end().to_string()
}

#[test]
fn errors_are_one_classified_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = affectkit(&[
        "train",
        "--manifest",
        "/no/such/manifest.csv",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error class=load message="));

    let out = affectkit(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error class=usage message="));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed=1\ntrain.learning_rate=0.1\n").unwrap();
    let out = affectkit(&[
        "synth-data",
        "--out-dir",
        p(&dir.path().join("s")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error class=config message="), "{line}");
    assert!(line.contains("train.learning_rate"), "{line}");
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(
        &cfg,
        "seed=4\nsynth.n_train=10\nsynth.n_valid=5\nsynth.n_eval=5\n",
    )
    .unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let out_dir = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_affectkit"));
        cmd.args(["synth-data", "--out-dir", p(&out_dir), "--config", p(&cfg)]);
        match seed {
            Some(s) => cmd.env("AFFECTKIT_SEED", s),
            None => cmd.env_remove("AFFECTKIT_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        (
            fs::read_to_string(out_dir.join("run.log")).unwrap(),
            fs::read(out_dir.join("acoustic.csv")).unwrap(),
        )
    };
    let (log_cfg, m_cfg) = run("cfg", None);
    let (log_env, m_env) = run("env", Some("9"));
    let (_, m_env4) = run("env4", Some("4"));
    assert!(log_cfg.contains("seed=4\n"));
    assert!(log_env.contains("seed=9\n"));
    assert_eq!(m_cfg, m_env4);
    assert_ne!(m_cfg, m_env);
}
