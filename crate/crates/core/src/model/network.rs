use super::config::ModelConfig;
use super::state::{ModelState, ParamVars};
use crate::error::{Error, Result};
use crate::layers::{digitcap, mask_activity, pointcap_a, pointcap_b, pointcap_c, CapsuleBlock, LayerParams};
use crate::routing::RoutingSpec;
use crate::tensor::{BnStats, Tape, Var};

/// Batch-norm behaviour: batch statistics while training, running
/// statistics otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[B, a, b]`
    pub digit: CapsuleBlock,
    /// `[B, a]`
    pub lengths: Var,
    /// Routing logits of the path-A PointCapA, `[B, N, c]`.
    pub part_logits: Var,
    /// conv2 features `[B, N, w2]`, fed to the decoder's skip connection.
    pub skip: Var,
}

#[derive(Clone, Debug)]
pub struct OutputVars {
    pub encoded: EncodedVars,
    /// Masked class-capsule activity `[B, b]`.
    pub latent: Var,
    /// Capsule row each sample's latent was taken from.
    pub masked_rows: Vec<usize>,
    /// `[B, N, 3]`
    pub reconstruction: Var,
}

/// Loss weights: `total = margin + gamma * chamfer`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 0.5,
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl From<&ModelConfig> for LossWeights {
    fn from(c: &ModelConfig) -> Self {
        LossWeights {
            gamma: c.gamma,
            m_plus: c.m_plus,
            m_minus: c.m_minus,
            lambda: c.lambda,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub margin: Var,
    pub chamfer: Var,
}

/// Margin, Chamfer and their weighted sum, all batch means.
pub fn loss_vars(
    tape: &mut Tape,
    lengths: Var,
    labels: &[usize],
    target: Var,
    reconstruction: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    let margin = tape.margin_loss(lengths, labels, w.m_plus, w.m_minus, w.lambda)?;
    let chamfer = tape.chamfer(target, reconstruction)?;
    let weighted = tape.scale(chamfer, w.gamma)?;
    let total = tape.add(margin, weighted)?;
    Ok(LossVars { total, margin, chamfer })
}

/// One forward pass of the model, recorded on a tape.
pub struct Network<'a> {
    config: &'a ModelConfig,
    state: &'a ModelState,
    vars: ParamVars,
    mode: Mode,
    bn_stats: Vec<(String, BnStats)>,
}

impl<'a> Network<'a> {
    /// Registers the parameters of `state` on `tape`; `trainable` decides
    /// whether they collect gradients.
    pub fn new(tape: &mut Tape, config: &'a ModelConfig, state: &'a ModelState, mode: Mode, trainable: bool) -> Self {
        Network {
            config,
            state,
            vars: state.register(tape, trainable),
            mode,
            bn_stats: Vec::new(),
        }
    }

    pub fn vars(&self) -> &ParamVars {
        &self.vars
    }

    /// Batch statistics gathered by train-mode batch norms so far.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BnStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    fn bn(&mut self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let gamma = self.vars.get(&format!("{name}.gamma"))?;
        let beta = self.vars.get(&format!("{name}.beta"))?;
        let eps = self.config.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
                self.bn_stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.state.buffer(&format!("{name}.running_mean"))?.data();
                let var = self.state.buffer(&format!("{name}.running_var"))?.data();
                tape.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }

    fn layer(&self, name: &str, routing: Option<RoutingSpec>) -> Result<LayerParams> {
        Ok(LayerParams {
            kernels: self.vars.get(&format!("{name}.weight"))?,
            bias: self.vars.bias(name),
            routing,
        })
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.vars.get(&format!("{name}.weight"))?;
        let h = tape.conv1d_feature(x, w, self.vars.bias(name))?;
        tape.swish(h)
    }

    /// Encoder for inputs `[B, N, C]`.
    pub fn encode(&mut self, tape: &mut Tape, input: Var) -> Result<EncodedVars> {
        let cfg = self.config;
        let s = tape.shape(input).to_vec();
        if s.len() != 3 || s[1] != cfg.num_points || s[2] != cfg.input_channels {
            return Err(Error::Input(format!(
                "input {s:?} does not match [B, {}, {}]",
                cfg.num_points, cfg.input_channels
            )));
        }
        let batch = s[0];

        let w1 = self.vars.get("encoder.conv1.weight")?;
        let h = tape.conv1d_feature(input, w1, self.vars.bias("encoder.conv1"))?;
        let h = self.bn(tape, h, "encoder.bn1")?;
        let h = tape.swish(h)?;
        let skip = self.conv(tape, h, "encoder.conv2")?;
        let f3 = self.conv(tape, skip, "encoder.conv3")?;

        // Path B.
        let p = cfg.primary_caps;
        let params = self.layer("path_b.primary", Some(cfg.routing_spec(&p)))?;
        let (primary, _) = pointcap_a(tape, &CapsuleBlock::new(f3, "conv3"), &params, p.capsules, p.dim)?;
        let entities = tape.reshape(primary.activities, [batch, p.capsules, 1, p.dim])?;
        let (ec, ed) = cfg.entity_caps;
        let params = self.layer("path_b.entity", None)?;
        let entity = pointcap_c(tape, &CapsuleBlock::new(entities, "PointCapA"), &params, ec, ed)?;
        let q = cfg.part_caps;
        let params = self.layer("path_b.parts", Some(cfg.routing_spec(&q)))?;
        let parts = pointcap_b(tape, &entity, &params, q.capsules, q.dim)?;
        let flat = tape.reshape(parts.activities, [batch, cfg.regen_inputs(), q.dim])?;
        let r = cfg.regen_caps;
        let params = self.layer("path_b.regen", Some(cfg.routing_spec(&r)))?;
        let (regen, _) = pointcap_a(tape, &CapsuleBlock::new(flat, "PointCapB"), &params, r.capsules, r.dim)?;

        // Path A.
        let a = cfg.point_caps;
        let params = self.layer("path_a", Some(cfg.routing_spec(&a)))?;
        let (point, part_logits) = pointcap_a(tape, &CapsuleBlock::new(skip, "conv2"), &params, a.capsules, a.dim)?;

        let joined = tape.concat(regen.activities, point.activities, 1)?;
        let weights = self.vars.get("digit.weight")?;
        let (digit, lengths) = digitcap(tape, &CapsuleBlock::new(joined, "concat"), weights, &cfg.digit_routing_spec())?;
        Ok(EncodedVars {
            digit,
            lengths,
            part_logits,
            skip,
        })
    }

    /// Decoder from latents `[B, b]`; `skip` is required when the skip
    /// connection is enabled and ignored otherwise.
    pub fn decode(&mut self, tape: &mut Tape, latent: Var, skip: Option<Var>) -> Result<Var> {
        let cfg = self.config;
        let ls = tape.shape(latent).to_vec();
        if ls.len() != 2 || ls[1] != cfg.digit_dim {
            return Err(Error::dim("decode", format!("latent {ls:?}, expected [B, {}]", cfg.digit_dim)));
        }
        let batch = ls[0];
        let w = self.vars.get("decoder.dense.weight")?;
        let h = tape.linear(latent, w, self.vars.bias("decoder.dense"))?;
        let h = self.bn(tape, h, "decoder.bn")?;
        let h = tape.swish(h)?;
        let base = cfg.decoder_base_width();
        let h = tape.reshape(h, [batch, base, cfg.decoder_dense / base])?;

        let stride = cfg.upsample_stride;
        let mut h = h;
        for (i, k) in [(1, stride), (2, stride)] {
            h = self.deconv(tape, h, i, k)?;
            h = tape.swish(h)?;
        }
        if cfg.skip_connection {
            let skip = skip.ok_or_else(|| Error::Config("decoder skip connection needs features".into()))?;
            let want = [batch, cfg.num_points, cfg.decoder_widths[1]];
            if tape.shape(skip) != want {
                return Err(Error::Config(format!(
                    "skip features {:?}, decoder expects {want:?}",
                    tape.shape(skip)
                )));
            }
            h = tape.add(h, skip)?;
        }
        for i in [3, 4] {
            h = self.deconv(tape, h, i, 1)?;
            h = tape.swish(h)?;
        }
        self.deconv(tape, h, 5, 1)
    }

    fn deconv(&self, tape: &mut Tape, x: Var, index: usize, stride: usize) -> Result<Var> {
        let name = format!("decoder.deconv{index}");
        let w = self.vars.get(&format!("{name}.weight"))?;
        tape.deconv_width(x, w, self.vars.bias(&name), stride)
    }

    /// Encode, mask (by `labels` when given, longest capsule otherwise) and
    /// decode.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, labels: Option<&[usize]>) -> Result<OutputVars> {
        let encoded = self.encode(tape, input)?;
        let (latent, masked_rows) = mask_activity(tape, &encoded.digit, labels)?;
        let reconstruction = self.decode(tape, latent, Some(encoded.skip))?;
        Ok(OutputVars {
            encoded,
            latent,
            masked_rows,
            reconstruction,
        })
    }
}
