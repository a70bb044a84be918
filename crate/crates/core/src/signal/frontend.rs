use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::data::FeatureSequence;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Width of the default feature: 40 mel log-energies plus f0, f0 delta and voicing.
pub const MFBF0_DIM: usize = 43;

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    /// Seconds.
    pub frame_len: f64,
    /// Seconds.
    pub frame_hop: f64,
    pub n_mel: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
    pub pitch_fmin: f64,
    pub pitch_fmax: f64,
    pub log_floor: f64,
    pub voicing_threshold: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_len: 0.025,
            frame_hop: 0.010,
            n_mel: 40,
            fmin: 20.0,
            fmax: None,
            pitch_fmin: 60.0,
            pitch_fmax: 400.0,
            log_floor: 1e-10,
            voicing_threshold: 0.5,
        }
    }
}

impl FrontendConfig {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len * f64::from(sample_rate)).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.frame_hop * f64::from(sample_rate)).round() as usize
    }

    pub fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(f64::from(sample_rate) / 2.0)
    }

    /// Number of frames for a signal of `n` samples (0 if shorter than a frame).
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> usize {
        let win = self.frame_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        if n < win {
            0
        } else {
            1 + (n - win) / hop
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.frame_hop > 0.0 && self.frame_hop <= self.frame_len) {
            return Err(Error::invalid(format!(
                "frame hop {} must be in (0, frame_len={}]",
                self.frame_hop, self.frame_len
            )));
        }
        if self.frame_samples(sample_rate) < 2 || self.hop_samples(sample_rate) < 1 {
            return Err(Error::invalid("frame too short for the sample rate"));
        }
        if self.n_mel == 0 {
            return Err(Error::invalid("n_mel must be >= 1"));
        }
        let fmax = self.fmax_for(sample_rate);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= nyquist) {
            return Err(Error::invalid(format!(
                "mel range must satisfy 0 <= fmin < fmax <= {nyquist}, got [{}, {fmax}]",
                self.fmin
            )));
        }
        if !(self.pitch_fmin > 0.0
            && self.pitch_fmin < self.pitch_fmax
            && self.pitch_fmax < nyquist)
        {
            return Err(Error::invalid(format!(
                "pitch range must satisfy 0 < fmin < fmax < {nyquist}, got [{}, {}]",
                self.pitch_fmin, self.pitch_fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log floor must be > 0"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

// periodic Hann: exactly 1 at the frame center
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn frames_of<'a>(
    w: &'a Waveform,
    cfg: &FrontendConfig,
) -> Result<impl Iterator<Item = &'a [f64]> + 'a> {
    cfg.validate(w.sample_rate)?;
    let win = cfg.frame_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    if w.len() < win {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one frame ({win})",
            w.len()
        )));
    }
    let count = cfg.frame_count(w.len(), w.sample_rate);
    Ok((0..count).map(move |i| &w.samples[i * hop..i * hop + win]))
}

/// Hann-windowed power spectrogram, `[frames, frame_samples / 2 + 1]`.
/// The FFT length equals the frame length.
pub fn stft_power(w: &Waveform, cfg: &FrontendConfig) -> Result<Tensor> {
    let frames: Vec<&[f64]> = frames_of(w, cfg)?.collect();
    let win = cfg.frame_samples(w.sample_rate);
    let bins = win / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut out = Vec::with_capacity(frames.len() * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for frame in frames {
        for ((b, &x), &wv) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x * wv, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::from_vec(&[out.len() / bins, bins], out)
}

/// Triangular, unit-peak filters with mel-spaced centers.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mel][bins]`
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let fmax = cfg.fmax_for(sample_rate);
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
        let points: Vec<f64> = (0..cfg.n_mel + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mel + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let mut weights = Vec::with_capacity(cfg.n_mel);
        for m in 0..cfg.n_mel {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let row: Vec<f64> = (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect();
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; reduce n_mel"
                )));
            }
            weights.push(row);
        }
        Ok(Self {
            weights,
            centers_hz: points[1..=cfg.n_mel].to_vec(),
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn bins(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// `ln(max(filter · power, log_floor))` per frame and band.
pub fn mel_energies(spec: &Tensor, sample_rate: u32, cfg: &FrontendConfig) -> Result<Tensor> {
    let n_fft = cfg.frame_samples(sample_rate);
    let fb = MelFilterbank::new(sample_rate, n_fft, cfg)?;
    let bins = fb.bins();
    if spec.shape().len() != 2 || spec.shape()[1] != bins {
        return Err(Error::invalid(format!(
            "spectrogram shape {:?} does not match {bins} bins",
            spec.shape()
        )));
    }
    let mut out = Vec::with_capacity(spec.shape()[0] * cfg.n_mel);
    for frame in spec.data().chunks_exact(bins) {
        for row in &fb.weights {
            let e: f64 = row.iter().zip(frame).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    Tensor::from_vec(&[spec.shape()[0], cfg.n_mel], out)
}

// near-ties resolve toward the shorter lag to avoid octave errors
const LAG_TIE_TOLERANCE: f64 = 1e-3;

/// Per-frame `[f0 Hz, f0 delta Hz/frame, voicing]` from normalized
/// autocorrelation over lags `[sr/pitch_fmax, sr/pitch_fmin]`.
pub fn pitch_voicing(w: &Waveform, cfg: &FrontendConfig) -> Result<Tensor> {
    let sr = f64::from(w.sample_rate);
    let win = cfg.frame_samples(w.sample_rate);
    let min_lag = (sr / cfg.pitch_fmax).ceil() as usize;
    let max_lag = ((sr / cfg.pitch_fmin).floor() as usize).min(win - 1);
    let mut out = Vec::new();
    let mut prev_f0 = None;
    for frame in frames_of(w, cfg)? {
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
        let mut best = (0.0, 0usize);
        for lag in min_lag..=max_lag {
            let a = &x[..win - lag];
            let b = &x[lag..];
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let ea: f64 = a.iter().map(|v| v * v).sum();
            let eb: f64 = b.iter().map(|v| v * v).sum();
            let den = (ea * eb).sqrt();
            let r = if den > 0.0 { num / den } else { 0.0 };
            if r > best.0 + LAG_TIE_TOLERANCE || (best.1 == 0 && r > 0.0) {
                best = (r, lag);
            }
        }
        let voicing = best.0.clamp(0.0, 1.0);
        let f0 = if best.1 > 0 && voicing >= cfg.voicing_threshold {
            sr / best.1 as f64
        } else {
            0.0
        };
        let delta = prev_f0.map_or(0.0, |p| f0 - p);
        prev_f0 = Some(f0);
        out.extend_from_slice(&[f0, delta, voicing]);
    }
    Tensor::from_vec(&[out.len() / 3, 3], out)
}

/// `[n_mel log-energies | f0 | f0 delta | voicing]` per frame.
pub fn extract_mfbf0(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    w.validate()?;
    let spec = stft_power(w, cfg)?;
    let mel = mel_energies(&spec, w.sample_rate, cfg)?;
    let pitch = pitch_voicing(w, cfg)?;
    let frames = mel.shape()[0];
    debug_assert_eq!(frames, pitch.shape()[0]);
    let dim = cfg.n_mel + 3;
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        data.extend_from_slice(&mel.data()[t * cfg.n_mel..(t + 1) * cfg.n_mel]);
        data.extend_from_slice(&pitch.data()[t * 3..(t + 1) * 3]);
    }
    FeatureSequence::from_f64(dim, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    const SR: u32 = 16_000;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, SR).unwrap()
    }

    fn sine(freq: f64, amp: f64, n: usize) -> Waveform {
        wave(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / f64::from(SR)).sin())
                .collect(),
        )
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn zero_signal_has_zero_power() {
        let spec = stft_power(&wave(vec![0.0; 1600]), &FrontendConfig::default()).unwrap();
        assert_eq!(spec.shape(), &[1 + (1600 - 400) / 160, 201]);
        assert!(spec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_input_is_rejected() {
        assert!(stft_power(&wave(vec![0.0; 399]), &FrontendConfig::default()).is_err());
    }

    #[test]
    fn centered_impulse_is_flat() {
        let mut s = vec![0.0; 400];
        s[200] = 1.0;
        let spec = stft_power(&wave(s), &FrontendConfig::default()).unwrap();
        // periodic Hann is exactly 1 at the center sample, so |X_k|^2 = 1
        for &p in spec.data() {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_centered_sine_is_concentrated() {
        // bin spacing is 16000 / 400 = 40 Hz; bin 25 is 1 kHz
        let spec = stft_power(&sine(1000.0, 0.5, 4000), &FrontendConfig::default()).unwrap();
        for frame in spec.data().chunks_exact(201) {
            let total: f64 = frame.iter().sum();
            let near: f64 = frame[24..=26].iter().sum();
            assert!(near / total >= 0.99, "{}", near / total);
        }
    }

    #[test]
    fn zero_spectrogram_hits_floor() {
        let cfg = FrontendConfig::default();
        let mel = mel_energies(&Tensor::zeros(&[3, 201]), SR, &cfg).unwrap();
        assert!(mel.data().iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let cfg = FrontendConfig::default();
        let fb = MelFilterbank::new(SR, 400, &cfg).unwrap();
        let nearest = fb
            .centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let spec = stft_power(&sine(1000.0, 0.5, 4000), &cfg).unwrap();
        let mel = mel_energies(&spec, SR, &cfg).unwrap();
        for frame in mel.data().chunks_exact(40) {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let cfg = FrontendConfig::default();
        let a = mel_energies(
            &stft_power(&sine(440.0, 0.2, 3200), &cfg).unwrap(),
            SR,
            &cfg,
        )
        .unwrap();
        let b = mel_energies(
            &stft_power(&sine(440.0, 0.4, 3200), &cfg).unwrap(),
            SR,
            &cfg,
        )
        .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > cfg.log_floor.ln() + 1.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fmax_above_nyquist_rejected() {
        let cfg = FrontendConfig {
            fmax: Some(9000.0),
            ..Default::default()
        };
        assert!(mel_energies(&Tensor::zeros(&[1, 201]), SR, &cfg).is_err());
    }

    #[test]
    fn silence_is_unvoiced() {
        let p = pitch_voicing(&wave(vec![0.0; 3200]), &FrontendConfig::default()).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sawtooth_pitch() {
        let s: Vec<f64> = (0..16000).map(|i| (i % 160) as f64 / 80.0 - 1.0).collect();
        let p = pitch_voicing(&wave(s), &FrontendConfig::default()).unwrap();
        let f0: Vec<f64> = p.data().chunks_exact(3).map(|r| r[0]).collect();
        let voicing: Vec<f64> = p.data().chunks_exact(3).map(|r| r[2]).collect();
        assert!((median(f0) - 100.0).abs() <= 2.0);
        assert!(median(voicing) >= 0.9);
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let cfg = FrontendConfig::default();
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut medians = Vec::new();
        for seed in 0..100 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..4000).map(|_| normal.sample(&mut rng)).collect();
            let p = pitch_voicing(&wave(s), &cfg).unwrap();
            medians.push(median(p.data().chunks_exact(3).map(|r| r[2]).collect()));
        }
        assert!(medians.iter().all(|&m| m <= 0.4), "{medians:?}");
    }

    #[test]
    fn f0_is_zero_or_in_range() {
        let cfg = FrontendConfig::default();
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut s: Vec<f64> = (0..8000).map(|_| normal.sample(&mut rng)).collect();
        s.extend(sine(220.0, 0.5, 8000).samples);
        let p = pitch_voicing(&wave(s), &cfg).unwrap();
        for r in p.data().chunks_exact(3) {
            assert!(r[0] == 0.0 || (cfg.pitch_fmin..=cfg.pitch_fmax).contains(&r[0]));
        }
    }

    #[test]
    fn mfbf0_shape_and_silence() {
        let cfg = FrontendConfig::default();
        let w = wave(vec![0.0; 4000]);
        let f = extract_mfbf0(&w, &cfg).unwrap();
        assert_eq!(f.dim(), MFBF0_DIM);
        assert_eq!(f.frames(), stft_power(&w, &cfg).unwrap().shape()[0]);
        for t in 0..f.frames() {
            let row = f.frame(t);
            assert!(row[..40].iter().all(|&v| v == cfg.log_floor.ln() as f32));
            assert!(row[40..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mfbf0_is_deterministic() {
        let cfg = FrontendConfig::default();
        let w = sine(180.0, 0.3, 5000);
        assert_eq!(
            extract_mfbf0(&w, &cfg).unwrap().to_bytes(),
            extract_mfbf0(&w, &cfg).unwrap().to_bytes()
        );
    }
}
