//! Audio front-end (STFT, mel filterbank, autocorrelation pitch → 43-dim
//! MFBF0) and the noise + reverberation corruption pipeline.

mod corrupt;
mod frontend;
mod wav;

pub use corrupt::{
    convolve, corrupt, file_rng, measured_snr_db, mix_at_snr, rir_envelope, sample_snr,
    schroeder_rt60, synth_rir, CorruptOutput, CorruptionSpec, MixOutput, SNR_BANDS,
};
pub use frontend::{
    extract_mfbf0, hz_to_mel, mel_energies, mel_to_hz, pitch_voicing, stft_power, FrontendConfig,
    MelFilterbank, MFBF0_DIM,
};
pub use wav::{read_wav, write_wav, WAV_SAMPLE_RATE};

use crate::error::{Error, Result};

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be > 0"));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean-square power.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
