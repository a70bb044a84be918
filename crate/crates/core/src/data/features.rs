//! In-memory feature sequences and the `AFE1` feature file format.
//!
//! File layout, little-endian:
//!
//! ```text
//! offset 0   magic   "AFE1"
//! offset 4   dim     u32   (must be >= 1)
//! offset 8   frames  u32
//! offset 12  payload frames * dim f32 values, frame-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"AFE1";
const HEADER_LEN: usize = 12;

/// `frames x dim` matrix of features, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not form whole frames of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_f64(dim: usize, data: &[f64]) -> Result<Self> {
        Self::new(dim, data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("ragged frames"));
        }
        Self::from_f64(dim, &frames.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Per-dimension mean over frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.data.chunks_exact(self.dim) {
            for (acc, &v) in m.iter_mut().zip(row) {
                *acc += f64::from(v);
            }
        }
        let n = self.frames().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!(
                    "truncated header: expected {HEADER_LEN} bytes, got {}",
                    bytes.len()
                ),
            });
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected \"AFE1\"", &bytes[..4]),
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::Format {
                offset: 4,
                message: "feature dimension is 0".into(),
            });
        }
        let expected = HEADER_LEN + 4 * dim * frames;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                message: format!(
                    "payload size mismatch: expected {expected} bytes, got {}",
                    bytes.len()
                ),
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dim, data })
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, seq.to_bytes())?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    FeatureSequence::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn random_ten_by_43_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let seq =
            FeatureSequence::new(43, (0..430).map(|_| rng.gen::<f32>() - 0.5).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.afe");
        write_feature_file(&path, &seq).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.frames(), 10);
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            seq.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let seq = FeatureSequence::new(2, vec![1.0; 6]).unwrap();
        let bytes = seq.to_bytes();
        let err = FeatureSequence::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 36 bytes, got 32"), "{msg}");
    }

    #[test]
    fn bad_magic_and_zero_dim() {
        let mut bytes = FeatureSequence::new(1, vec![0.0]).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FeatureSequence::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = FeatureSequence::new(1, vec![]).unwrap().to_bytes();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            FeatureSequence::from_bytes(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn zero_frame_file_is_valid() {
        let seq = FeatureSequence::new(43, vec![]).unwrap();
        let back = FeatureSequence::from_bytes(&seq.to_bytes()).unwrap();
        assert_eq!(back.frames(), 0);
        assert_eq!(back.dim(), 43);
    }

    proptest! {
        #[test]
        fn round_trip_any(dim in 1usize..16, frames in 0usize..12, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..dim * frames).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
            let seq = FeatureSequence::new(dim, data).unwrap();
            let back = FeatureSequence::from_bytes(&seq.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), seq.to_bytes());
        }
    }
}
