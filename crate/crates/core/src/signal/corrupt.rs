use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{mean_square, Waveform};
use crate::error::{Error, Result};

/// The three evaluation SNR bands in dB: 20-30, 10-20 and 0-10.
pub const SNR_BANDS: [(f64, f64); 3] = [(20.0, 30.0), (10.0, 20.0), (0.0, 10.0)];

/// ln(1000): amplitude decays 60 dB over one RT60.
const DECAY_60DB: f64 = 6.907_755_278_982_137;

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// Measured impulse response; takes precedence over `rt60`.
    pub rir: Option<Waveform>,
    /// Seconds, for a synthetic impulse response.
    pub rt60: Option<f64>,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn band(snr_low_db: f64, snr_high_db: f64, seed: u64) -> Result<Self> {
        let s = Self {
            snr_low_db,
            snr_high_db,
            rir: None,
            rt60: None,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low_db.is_finite() && self.snr_high_db.is_finite())
            || self.snr_low_db > self.snr_high_db
        {
            return Err(Error::invalid(format!(
                "SNR band must satisfy low <= high, got ({}, {})",
                self.snr_low_db, self.snr_high_db
            )));
        }
        if let Some(rt60) = self.rt60 {
            if !(rt60 > 0.0) {
                return Err(Error::invalid(format!("rt60 must be > 0, got {rt60}")));
            }
        }
        Ok(())
    }
}

/// Generator for file `index` of a run seeded with `base_seed`.
pub fn file_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed ^ index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutput {
    pub mixed: Waveform,
    /// Gain-scaled noise actually added, before clipping.
    pub scaled_noise: Vec<f64>,
    pub gain: f64,
    /// Fraction of output samples clamped to `[-1, 1]`.
    pub clip_fraction: f64,
}

/// Adds `noise` scaled so that the clean-to-noise power ratio over the clean
/// extent equals `snr_db`, then clamps to `[-1, 1]`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<MixOutput> {
    clean.validate()?;
    noise.validate()?;
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.len() < clean.len() {
        return Err(Error::invalid(format!(
            "noise ({} samples) shorter than clean ({} samples); tile it first",
            noise.len(),
            clean.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite"));
    }
    let segment = &noise.samples[..clean.len()];
    let p_clean = clean.power();
    let p_noise = mean_square(segment);
    if p_clean <= 0.0 || p_noise <= 0.0 {
        return Err(Error::invalid(
            "SNR undefined: clean or noise segment has zero power",
        ));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let mut clipped = 0usize;
    let samples = clean
        .samples
        .iter()
        .zip(&scaled_noise)
        .map(|(c, n)| {
            let v = c + n;
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(MixOutput {
        mixed: Waveform {
            samples,
            sample_rate: clean.sample_rate,
        },
        scaled_noise,
        gain,
        clip_fraction: clipped as f64 / clean.len().max(1) as f64,
    })
}

/// `10·log10(P_clean / P_noise)` from stored components.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_square(clean) / mean_square(noise)).log10()
}

/// Uniform draw from `[snr_low_db, snr_high_db)`.
pub fn sample_snr<R: Rng>(spec: &CorruptionSpec, rng: &mut R) -> f64 {
    if spec.snr_low_db == spec.snr_high_db {
        return spec.snr_low_db;
    }
    rng.gen_range(spec.snr_low_db..=spec.snr_high_db)
}

/// Amplitude envelope `exp(-6.908 t / rt60)`.
pub fn rir_envelope(t: f64, rt60: f64) -> f64 {
    (-DECAY_60DB * t / rt60).exp()
}

/// Exponentially decaying white-noise impulse response with a unit direct
/// path at `t = 0`. The tail carries the same energy as the direct path.
pub fn synth_rir<R: Rng>(
    rt60: f64,
    sample_rate: u32,
    duration: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if !(rt60 > 0.0) {
        return Err(Error::invalid(format!("rt60 must be > 0, got {rt60}")));
    }
    if !(duration >= rt60) {
        return Err(Error::invalid(format!(
            "RIR duration {duration} must be >= rt60 {rt60}"
        )));
    }
    let sr = f64::from(sample_rate);
    let n = (duration * sr).round() as usize;
    let mut tail: Vec<f64> = (1..n)
        .map(|i| {
            let g: f64 = StandardNormal.sample(rng);
            g * rir_envelope(i as f64 / sr, rt60)
        })
        .collect();
    let energy: f64 = tail.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let scale = energy.sqrt().recip();
        tail.iter_mut().for_each(|v| *v *= scale);
    }
    let mut samples = Vec::with_capacity(n);
    samples.push(1.0);
    samples.extend(tail);
    Waveform::new(samples, sample_rate)
}

/// RT60 from Schroeder backward integration, fitting the energy decay curve
/// between -5 and -25 dB and extrapolating to -60 dB.
pub fn schroeder_rt60(rir: &Waveform) -> Option<f64> {
    let mut edc: Vec<f64> = rir.samples.iter().map(|v| v * v).collect();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let sr = f64::from(rir.sample_rate);
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter_map(|(i, &e)| {
            let db = 10.0 * (e / total).log10();
            (db <= -5.0 && db >= -25.0).then_some((i as f64 / sr, db))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let md = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - md)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let slope = cov / var;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Direct FIR convolution truncated to the input length. Zero taps are skipped.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 || k >= x.len() {
            continue;
        }
        for (yi, &xv) in y[k..].iter_mut().zip(x) {
            *yi += hk * xv;
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptOutput {
    pub wave: Waveform,
    pub snr_db: f64,
    pub clip_fraction: f64,
    pub gain: f64,
    /// Noise as added at the mixing stage (before reverberation).
    pub scaled_noise: Vec<f64>,
}

/// Noise at a sampled SNR, then reverberation, then peak normalization if
/// the result exceeds unit amplitude.
pub fn corrupt<R: Rng>(
    clean: &Waveform,
    noise: &Waveform,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<CorruptOutput> {
    spec.validate()?;
    let snr_db = sample_snr(spec, rng);
    let mix = mix_at_snr(clean, noise, snr_db)?;
    let rir = match (&spec.rir, spec.rt60) {
        (Some(r), _) => {
            if r.sample_rate != clean.sample_rate {
                return Err(Error::invalid("RIR sample rate differs from the signal"));
            }
            Some(r.clone())
        }
        (None, Some(rt60)) => Some(synth_rir(rt60, clean.sample_rate, rt60 * 1.5, rng)?),
        (None, None) => None,
    };
    let mut samples = match rir {
        Some(r) => convolve(&mix.mixed.samples, &r.samples),
        None => mix.mixed.samples,
    };
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(CorruptOutput {
        wave: Waveform {
            samples,
            sample_rate: clean.sample_rate,
        },
        snr_db,
        clip_fraction: mix.clip_fraction,
        gain: mix.gain,
        scaled_noise: mix.scaled_noise,
    })
}
