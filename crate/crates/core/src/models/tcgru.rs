use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EmotionEstimate, Model, Normalization};
use crate::data::FeatureSequence;
use crate::diffcore::layers::{tanh_backward, tanh_forward};
use crate::diffcore::{
    dense_backward, dense_forward, gru_layer_backward, gru_layer_forward, mean_pool_time,
    mean_pool_time_backward, tc_backward, tc_forward, Checkpoint, GruTrace, Parameter, Tensor,
};
use crate::error::{Error, Result};
use crate::metrics::EmotionTriple;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcGruConfig {
    pub input_dim: usize,
    pub tc_channels: usize,
    pub tc_kernel: usize,
    pub gru_hidden: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
}

impl Default for TcGruConfig {
    fn default() -> Self {
        Self {
            input_dim: 43,
            tc_channels: 64,
            tc_kernel: 5,
            gru_hidden: 128,
            embed_dim: 128,
            output_dim: 3,
        }
    }
}

impl TcGruConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("tc_channels", self.tc_channels),
            ("tc_kernel", self.tc_kernel),
            ("gru_hidden", self.gru_hidden),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be >= 1")));
        }
        if self.tc_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "tc_kernel must be odd, got {}",
                self.tc_kernel
            )));
        }
        if self.output_dim != 3 {
            return Err(Error::invalid(format!(
                "output_dim must be 3 (act, val, dom), got {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Trainable parameter count implied by the layer shapes.
    pub fn parameter_count(&self) -> usize {
        let (i, c, k, h, e, o) = (
            self.input_dim,
            self.tc_channels,
            self.tc_kernel,
            self.gru_hidden,
            self.embed_dim,
            self.output_dim,
        );
        (i * c + c)
            + (k * c * c + c)
            + (c * 3 * h + h * 3 * h + 3 * h)
            + (h * 3 * h * 2 + 3 * h)
            + (h * e + e)
            + (e * o + o)
    }

    pub(crate) fn echo(&self, prefix: &str) -> Vec<(String, String)> {
        [
            ("input_dim", self.input_dim),
            ("tc_channels", self.tc_channels),
            ("tc_kernel", self.tc_kernel),
            ("gru_hidden", self.gru_hidden),
            ("embed_dim", self.embed_dim),
            ("output_dim", self.output_dim),
        ]
        .iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v.to_string()))
        .collect()
    }

    pub(crate) fn from_echo(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            let key = format!("{prefix}{k}");
            ck.config_value(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks config key {key}")))?
                .parse()
                .map_err(|_| Error::invalid(format!("checkpoint config {key} is not a count")))
        };
        let cfg = Self {
            input_dim: get("input_dim")?,
            tc_channels: get("tc_channels")?,
            tc_kernel: get("tc_kernel")?,
            gru_hidden: get("gru_hidden")?,
            embed_dim: get("embed_dim")?,
            output_dim: get("output_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) const TRUNK_PARAMS: usize = 12;

/// Input projection → TC layer with skip → two GRU layers → masked mean
/// pooling → dense + tanh embedding.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Trunk {
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Name prefix of every parameter.
    pub prefix: String,
    /// `proj.w, proj.b, tc.kernel, tc.b, gru1.{w,u,b}, gru2.{w,u,b}, embed.w, embed.b`
    pub params: Vec<Parameter>,
    pub norm: Option<Normalization>,
}

#[derive(Debug, Clone)]
pub(crate) struct TrunkTrace {
    x: Tensor,
    p: Tensor,
    tc: Tensor,
    g1: GruTrace,
    g2: GruTrace,
    pooled: Tensor,
    e: Tensor,
}

impl Trunk {
    pub fn new(cfg: &TcGruConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let (i, c, k, h, e) = (
            cfg.input_dim,
            cfg.tc_channels,
            cfg.tc_kernel,
            cfg.gru_hidden,
            cfg.embed_dim,
        );
        let p = |name: &str, t: Tensor| Parameter::new(format!("{prefix}{name}"), t);
        let params = vec![
            p("proj.w", Tensor::glorot(&[i, c], rng)),
            p("proj.b", Tensor::zeros(&[c])),
            p("tc.kernel", Tensor::glorot(&[k, c, c], rng)),
            p("tc.b", Tensor::zeros(&[c])),
            p("gru1.w", Tensor::glorot(&[c, 3 * h], rng)),
            p("gru1.u", Tensor::glorot(&[h, 3 * h], rng)),
            p("gru1.b", Tensor::zeros(&[3 * h])),
            p("gru2.w", Tensor::glorot(&[h, 3 * h], rng)),
            p("gru2.u", Tensor::glorot(&[h, 3 * h], rng)),
            p("gru2.b", Tensor::zeros(&[3 * h])),
            p("embed.w", Tensor::glorot(&[h, e], rng)),
            p("embed.b", Tensor::zeros(&[e])),
        ];
        Self {
            input_dim: i,
            embed_dim: e,
            prefix: prefix.to_string(),
            params,
            norm: None,
        }
    }

    fn v(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    /// `x` is frame-major `[frames, input_dim]`.
    pub fn forward(&self, x: Vec<f64>, frames: usize) -> Result<(Vec<f64>, TrunkTrace)> {
        if frames == 0 {
            return Err(Error::invalid("cannot predict from a 0-frame sequence"));
        }
        let mut x = x;
        if let Some(n) = &self.norm {
            n.apply(&mut x);
        }
        let x = Tensor::from_vec(&[1, frames, self.input_dim], x)?;
        let p = dense_forward(&x, self.v(0), self.v(1))?;
        let tc = tc_forward(&p, self.v(2), self.v(3))?;
        let g1 = gru_layer_forward(&tc, self.v(4), self.v(5), self.v(6))?;
        let g2 = gru_layer_forward(&g1.h, self.v(7), self.v(8), self.v(9))?;
        let pooled = mean_pool_time(&g2.h, &[frames])?;
        let e = tanh_forward(&dense_forward(&pooled, self.v(10), self.v(11))?);
        let emb = e.data().to_vec();
        Ok((
            emb,
            TrunkTrace {
                x,
                p,
                tc,
                g1,
                g2,
                pooled,
                e,
            },
        ))
    }

    /// Accumulates into `grads` (ordered as `params`).
    pub fn backward(&self, tr: &TrunkTrace, d_embed: &[f64], grads: &mut [Tensor]) {
        let frames = tr.x.shape()[1];
        let de = Tensor::from_vec(&[1, self.embed_dim], d_embed.to_vec()).expect("embed width");
        let dpre = tanh_backward(&tr.e, &de);
        let [dw, db] = &mut grads[10..12] else {
            unreachable!()
        };
        let dpooled = dense_backward(&tr.pooled, self.v(10), &dpre, dw, db);
        let dh2 = mean_pool_time_backward(&dpooled, &[frames], frames);
        let [dw, du, db] = &mut grads[7..10] else {
            unreachable!()
        };
        let dh1 = gru_layer_backward(&tr.g1.h, self.v(7), self.v(8), &tr.g2, &dh2, dw, du, db);
        let [dw, du, db] = &mut grads[4..7] else {
            unreachable!()
        };
        let dtc = gru_layer_backward(&tr.tc, self.v(4), self.v(5), &tr.g1, &dh1, dw, du, db);
        let [dk, db] = &mut grads[2..4] else {
            unreachable!()
        };
        let dp = tc_backward(&tr.p, self.v(2), &tr.tc, &dtc, dk, db);
        let [dw, db] = &mut grads[0..2] else {
            unreachable!()
        };
        dense_backward(&tr.x, self.v(0), &dp, dw, db);
    }

    /// Appends parameters and normalization, names prefixed by `outer`.
    pub fn push_tensors(&self, outer: &str, out: &mut Vec<(String, Tensor)>) {
        for p in &self.params {
            out.push((format!("{outer}{}", p.name), p.value.clone()));
        }
        if let Some(n) = &self.norm {
            let d = n.mean.len();
            let name = |s: &str| format!("{outer}{}norm.{s}", self.prefix);
            out.push((
                name("mean"),
                Tensor::from_vec(&[d], n.mean.clone()).unwrap(),
            ));
            out.push((name("std"), Tensor::from_vec(&[d], n.std.clone()).unwrap()));
        }
    }

    pub fn load_tensors(&mut self, ck: &Checkpoint, outer: &str) -> Result<()> {
        for p in &mut self.params {
            load_param(ck, outer, p)?;
        }
        let name = |s: &str| format!("{outer}{}norm.{s}", self.prefix);
        self.norm = match (ck.tensor(&name("mean")), ck.tensor(&name("std"))) {
            (Some(m), Some(s)) => Some(Normalization::new(m.data().to_vec(), s.data().to_vec())?),
            (None, None) => None,
            _ => {
                return Err(Error::invalid(
                    "checkpoint has only half of the input normalization",
                ))
            }
        };
        if let Some(n) = &self.norm {
            if n.mean.len() != self.input_dim {
                return Err(Error::invalid("normalization width differs from input_dim"));
            }
        }
        Ok(())
    }
}

pub(crate) fn load_param(ck: &Checkpoint, outer: &str, p: &mut Parameter) -> Result<()> {
    let name = format!("{outer}{}", p.name);
    let t = ck
        .tensor(&name)
        .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
    if t.shape() != p.value.shape() {
        return Err(Error::invalid(format!(
            "tensor {} has shape {:?}, config implies {:?}",
            p.name,
            t.shape(),
            p.value.shape()
        )));
    }
    p.value = t.clone();
    p.zero_grad();
    Ok(())
}

/// Uni-modal TC-GRU estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct TcGruModel {
    cfg: TcGruConfig,
    pub(crate) trunk: Trunk,
    head_w: Parameter,
    head_b: Parameter,
}

#[derive(Debug, Clone)]
pub struct TcGruTrace {
    trunk: TrunkTrace,
    e: Tensor,
}

/// Deterministic Glorot-uniform initialization with zero biases.
pub fn build_tcgru(cfg: &TcGruConfig, seed: u64) -> Result<TcGruModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = Trunk::new(cfg, "", &mut rng);
    Ok(TcGruModel {
        cfg: *cfg,
        trunk,
        head_w: Parameter::new(
            "head.w",
            Tensor::glorot(&[cfg.embed_dim, cfg.output_dim], &mut rng),
        ),
        head_b: Parameter::new("head.b", Tensor::zeros(&[cfg.output_dim])),
    })
}

impl TcGruModel {
    pub fn config(&self) -> &TcGruConfig {
        &self.cfg
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.trunk.norm.as_ref()
    }

    pub fn set_normalization(&mut self, norm: Option<Normalization>) -> Result<()> {
        if let Some(n) = &norm {
            if n.mean.len() != self.cfg.input_dim {
                return Err(Error::invalid(format!(
                    "normalization width {} differs from input_dim {}",
                    n.mean.len(),
                    self.cfg.input_dim
                )));
            }
        }
        self.trunk.norm = norm;
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config_value("model") != Some("tcgru") {
            return Err(Error::invalid("checkpoint does not hold a tcgru model"));
        }
        Self::from_checkpoint_prefixed(ck, "")
    }

    pub(crate) fn from_checkpoint_prefixed(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = TcGruConfig::from_echo(ck, prefix)?;
        let mut m = build_tcgru(&cfg, 0)?;
        m.trunk.load_tensors(ck, prefix)?;
        load_param(ck, prefix, &mut m.head_w)?;
        load_param(ck, prefix, &mut m.head_b)?;
        Ok(m)
    }

    pub(crate) fn push_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.trunk.push_tensors(prefix, out);
        for p in [&self.head_w, &self.head_b] {
            out.push((format!("{prefix}{}", p.name), p.value.clone()));
        }
    }

    fn check_input<'a>(&self, inputs: &'a [FeatureSequence]) -> Result<&'a FeatureSequence> {
        let [seq] = inputs else {
            return Err(Error::invalid(format!(
                "tcgru model takes 1 input stream, got {}",
                inputs.len()
            )));
        };
        if seq.dim() != self.cfg.input_dim {
            return Err(Error::invalid(format!(
                "feature width {} does not match model input_dim {}",
                seq.dim(),
                self.cfg.input_dim
            )));
        }
        Ok(seq)
    }
}

impl Model for TcGruModel {
    type Trace = TcGruTrace;

    fn forward(&self, inputs: &[FeatureSequence]) -> Result<(EmotionEstimate, TcGruTrace)> {
        let seq = self.check_input(inputs)?;
        let (emb, trunk) = self.trunk.forward(seq.to_f64(), seq.frames())?;
        let e = Tensor::from_vec(&[1, self.cfg.embed_dim], emb.clone())?;
        let out = dense_forward(&e, &self.head_w.value, &self.head_b.value)?;
        let d = out.data();
        Ok((
            EmotionEstimate {
                triple: EmotionTriple::new(d[0], d[1], d[2]),
                embedding: emb,
            },
            TcGruTrace { trunk, e },
        ))
    }

    fn backward(
        &self,
        trace: &TcGruTrace,
        d_triple: [f64; 3],
        d_embedding: Option<&[f64]>,
        grads: &mut [Tensor],
    ) {
        let dy = Tensor::from_vec(&[1, 3], d_triple.to_vec()).unwrap();
        let (trunk_g, head_g) = grads.split_at_mut(TRUNK_PARAMS);
        let [dw, db] = head_g else { unreachable!() };
        let mut de = dense_backward(&trace.e, &self.head_w.value, &dy, dw, db).into_data();
        if let Some(extra) = d_embedding {
            de.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        self.trunk.backward(&trace.trunk, &de, trunk_g);
    }

    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.trunk.params.iter().collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.trunk.params.iter_mut().collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn n_inputs(&self) -> usize {
        1
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut config = vec![("model".to_string(), "tcgru".to_string())];
        config.extend(self.cfg.echo(""));
        let mut tensors = Vec::new();
        self.push_tensors("", &mut tensors);
        Checkpoint { config, tensors }
    }

    fn set_output_bias(&mut self, b: [f64; 3]) {
        self.head_b.value.data_mut().copy_from_slice(&b);
    }

    fn fit_normalization(&mut self, examples: &[&[FeatureSequence]]) -> Result<()> {
        let norm = Normalization::fit(examples.iter().map(|s| &s[0]))?;
        self.set_normalization(Some(norm))
    }
}
