use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tcgru::{load_param, Trunk, TrunkTrace, TRUNK_PARAMS};
use super::{EmotionEstimate, Model, Normalization, Predictor, TcGruConfig, TcGruModel};
use crate::data::FeatureSequence;
use crate::diffcore::layers::{tanh_backward, tanh_forward};
use crate::diffcore::{dense_backward, dense_forward, Checkpoint, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::metrics::EmotionTriple;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    /// Widths of the acoustic embedding streams concatenated per frame.
    pub acoustic_stream_dims: Vec<usize>,
    /// Width of the frame projection, the TC channels and the pooled
    /// acoustic embedding.
    pub acoustic_proj_dim: usize,
    pub tc_kernel: usize,
    pub gru_hidden: usize,
    /// Width of the fused embedding (dense + tanh) before the output head.
    pub fusion_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            acoustic_stream_dims: vec![1024, 1024],
            acoustic_proj_dim: 128,
            tc_kernel: 5,
            gru_hidden: 128,
            fusion_hidden: 128,
        }
    }
}

impl FusionConfig {
    pub fn acoustic_dim(&self) -> usize {
        self.acoustic_stream_dims.iter().sum()
    }

    fn trunk_config(&self) -> TcGruConfig {
        TcGruConfig {
            input_dim: self.acoustic_dim(),
            tc_channels: self.acoustic_proj_dim,
            tc_kernel: self.tc_kernel,
            gru_hidden: self.gru_hidden,
            embed_dim: self.acoustic_proj_dim,
            output_dim: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.acoustic_stream_dims.is_empty() || self.acoustic_stream_dims.contains(&0) {
            return Err(Error::invalid(
                "fusion needs at least one acoustic stream of width >= 1",
            ));
        }
        if self.fusion_hidden == 0 {
            return Err(Error::invalid("fusion_hidden must be >= 1"));
        }
        self.trunk_config().validate()
    }
}

/// A pre-trained uni-modal lexical model whose embedding feeds the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalBranch {
    pub model: TcGruModel,
    /// Fusion training requires every branch to be frozen.
    pub frozen: bool,
}

/// Acoustic streams → projection → TC-GRU trunk → pooled embedding,
/// concatenated with frozen lexical-branch embeddings → dense + tanh →
/// linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    cfg: FusionConfig,
    trunk: Trunk,
    branches: Vec<LexicalBranch>,
    fuse_w: Parameter,
    fuse_b: Parameter,
    head_w: Parameter,
    head_b: Parameter,
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    trunk: TrunkTrace,
    z: Tensor,
    h: Tensor,
}

impl FusionModel {
    /// Builds a fusion model around pre-trained lexical models, which are
    /// frozen.
    pub fn new(cfg: FusionConfig, lexical: Vec<TcGruModel>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(&cfg.trunk_config(), "acoustic.", &mut rng);
        let fused: usize =
            cfg.acoustic_proj_dim + lexical.iter().map(|m| m.config().embed_dim).sum::<usize>();
        Ok(Self {
            fuse_w: Parameter::new(
                "fuse.w",
                Tensor::glorot(&[fused, cfg.fusion_hidden], &mut rng),
            ),
            fuse_b: Parameter::new("fuse.b", Tensor::zeros(&[cfg.fusion_hidden])),
            head_w: Parameter::new("head.w", Tensor::glorot(&[cfg.fusion_hidden, 3], &mut rng)),
            head_b: Parameter::new("head.b", Tensor::zeros(&[3])),
            branches: lexical
                .into_iter()
                .map(|model| LexicalBranch {
                    model,
                    frozen: true,
                })
                .collect(),
            trunk,
            cfg,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn branches(&self) -> &[LexicalBranch] {
        &self.branches
    }

    pub fn set_branch_frozen(&mut self, i: usize, frozen: bool) -> Result<()> {
        let b = self
            .branches
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("no lexical branch {i}")))?;
        b.frozen = frozen;
        Ok(())
    }

    /// Width of the concatenated embedding entering the fusion head.
    pub fn fused_width(&self) -> usize {
        self.fuse_w.value.shape()[0]
    }

    /// Zeroes the fusion-head weights reading the acoustic embedding.
    pub fn zero_acoustic_path(&mut self) {
        let cols = self.cfg.fusion_hidden;
        let rows = self.cfg.acoustic_proj_dim;
        self.fuse_w.value.data_mut()[..rows * cols].fill(0.0);
    }

    /// Zeroes the fusion-head weights reading every lexical embedding.
    pub fn zero_lexical_paths(&mut self) {
        let cols = self.cfg.fusion_hidden;
        let rows = self.cfg.acoustic_proj_dim;
        self.fuse_w.value.data_mut()[rows * cols..].fill(0.0);
    }

    fn split_inputs<'a>(
        &self,
        inputs: &'a [FeatureSequence],
    ) -> Result<(&'a [FeatureSequence], &'a [FeatureSequence])> {
        let na = self.cfg.acoustic_stream_dims.len();
        if inputs.len() != na + self.branches.len() {
            return Err(Error::invalid(format!(
                "fusion model takes {} acoustic + {} lexical streams, got {}",
                na,
                self.branches.len(),
                inputs.len()
            )));
        }
        Ok(inputs.split_at(na))
    }

    fn concat_acoustic(&self, streams: &[FeatureSequence]) -> Result<(Vec<f64>, usize)> {
        let frames = streams[0].frames();
        for (s, &d) in streams.iter().zip(&self.cfg.acoustic_stream_dims) {
            if s.dim() != d {
                return Err(Error::invalid(format!(
                    "acoustic stream width {} does not match configured {d}",
                    s.dim()
                )));
            }
            if s.frames() != frames {
                return Err(Error::invalid(format!(
                    "acoustic streams have different frame counts ({} vs {frames})",
                    s.frames()
                )));
            }
        }
        let mut x = Vec::with_capacity(frames * self.cfg.acoustic_dim());
        for t in 0..frames {
            for s in streams {
                x.extend(s.frame(t).iter().map(|&v| f64::from(v)));
            }
        }
        Ok((x, frames))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config_value("model") != Some("fusion") {
            return Err(Error::invalid("checkpoint does not hold a fusion model"));
        }
        let get = |k: &str| -> Result<&str> {
            ck.config_value(k)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks config key {k}")))
        };
        let count = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("checkpoint config {k} is not a count")))
        };
        let dims = get("acoustic_stream_dims")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid("bad acoustic_stream_dims in checkpoint"))?;
        let cfg = FusionConfig {
            acoustic_stream_dims: dims,
            acoustic_proj_dim: count("acoustic_proj_dim")?,
            tc_kernel: count("tc_kernel")?,
            gru_hidden: count("gru_hidden")?,
            fusion_hidden: count("fusion_hidden")?,
        };
        let lexical = (0..count("lexical_branches")?)
            .map(|i| TcGruModel::from_checkpoint_prefixed(ck, &format!("lexical{i}.")))
            .collect::<Result<Vec<_>>>()?;
        let mut m = Self::new(cfg, lexical, 0)?;
        m.trunk.load_tensors(ck, "")?;
        for p in [&mut m.fuse_w, &mut m.fuse_b, &mut m.head_w, &mut m.head_b] {
            load_param(ck, "", p)?;
        }
        Ok(m)
    }
}

impl Model for FusionModel {
    type Trace = FusionTrace;

    fn forward(&self, inputs: &[FeatureSequence]) -> Result<(EmotionEstimate, FusionTrace)> {
        let (acoustic, lexical) = self.split_inputs(inputs)?;
        let (x, frames) = self.concat_acoustic(acoustic)?;
        let (mut z, trunk) = self.trunk.forward(x, frames)?;
        for (b, seq) in self.branches.iter().zip(lexical) {
            z.extend(b.model.predict(std::slice::from_ref(seq))?.embedding);
        }
        let z = Tensor::from_vec(&[1, z.len()], z)?;
        let h = tanh_forward(&dense_forward(&z, &self.fuse_w.value, &self.fuse_b.value)?);
        let out = dense_forward(&h, &self.head_w.value, &self.head_b.value)?;
        let d = out.data();
        Ok((
            EmotionEstimate {
                triple: EmotionTriple::new(d[0], d[1], d[2]),
                embedding: h.data().to_vec(),
            },
            FusionTrace { trunk, z, h },
        ))
    }

    fn backward(
        &self,
        trace: &FusionTrace,
        d_triple: [f64; 3],
        d_embedding: Option<&[f64]>,
        grads: &mut [Tensor],
    ) {
        let (trunk_g, rest) = grads.split_at_mut(TRUNK_PARAMS);
        let [dfw, dfb, dhw, dhb] = rest else {
            unreachable!()
        };
        let dy = Tensor::from_vec(&[1, 3], d_triple.to_vec()).unwrap();
        let mut dh = dense_backward(&trace.h, &self.head_w.value, &dy, dhw, dhb);
        if let Some(extra) = d_embedding {
            dh.data_mut()
                .iter_mut()
                .zip(extra)
                .for_each(|(a, b)| *a += b);
        }
        let dpre = tanh_backward(&trace.h, &dh);
        let dz = dense_backward(&trace.z, &self.fuse_w.value, &dpre, dfw, dfb);
        // lexical slices of dz stop here: branches are frozen
        self.trunk.backward(
            &trace.trunk,
            &dz.data()[..self.cfg.acoustic_proj_dim],
            trunk_g,
        );
    }

    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.trunk.params.iter().collect();
        v.extend([&self.fuse_w, &self.fuse_b, &self.head_w, &self.head_b]);
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.trunk.params.iter_mut().collect();
        v.extend([
            &mut self.fuse_w,
            &mut self.fuse_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    fn embed_dim(&self) -> usize {
        self.cfg.fusion_hidden
    }

    fn n_inputs(&self) -> usize {
        self.cfg.acoustic_stream_dims.len() + self.branches.len()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let dims: Vec<String> = self
            .cfg
            .acoustic_stream_dims
            .iter()
            .map(|d| d.to_string())
            .collect();
        let mut config = vec![
            ("model".to_string(), "fusion".to_string()),
            ("acoustic_stream_dims".to_string(), dims.join(",")),
            (
                "acoustic_proj_dim".to_string(),
                self.cfg.acoustic_proj_dim.to_string(),
            ),
            ("tc_kernel".to_string(), self.cfg.tc_kernel.to_string()),
            ("gru_hidden".to_string(), self.cfg.gru_hidden.to_string()),
            (
                "fusion_hidden".to_string(),
                self.cfg.fusion_hidden.to_string(),
            ),
            (
                "lexical_branches".to_string(),
                self.branches.len().to_string(),
            ),
        ];
        let mut tensors = Vec::new();
        self.trunk.push_tensors("", &mut tensors);
        for p in [&self.fuse_w, &self.fuse_b, &self.head_w, &self.head_b] {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            let prefix = format!("lexical{i}.");
            config.extend(b.model.config().echo(&prefix));
            b.model.push_tensors(&prefix, &mut tensors);
        }
        Checkpoint { config, tensors }
    }

    fn set_output_bias(&mut self, b: [f64; 3]) {
        self.head_b.value.data_mut().copy_from_slice(&b);
    }

    fn fit_normalization(&mut self, examples: &[&[FeatureSequence]]) -> Result<()> {
        let concat = examples
            .iter()
            .map(|s| {
                let (acoustic, _) = self.split_inputs(s)?;
                let (x, _) = self.concat_acoustic(acoustic)?;
                FeatureSequence::from_f64(self.cfg.acoustic_dim(), &x)
            })
            .collect::<Result<Vec<_>>>()?;
        self.trunk.norm = Some(Normalization::fit(concat.iter())?);
        Ok(())
    }

    fn check_trainable(&self) -> Result<()> {
        match self.branches.iter().position(|b| !b.frozen) {
            Some(i) => Err(Error::Contract(format!(
                "lexical branch {i} is not frozen; fusion training requires frozen pre-trained branches"
            ))),
            None => Ok(()),
        }
    }
}
