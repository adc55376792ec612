use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{BnStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn slot(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Slot {
    Slot {
        name: name.into(),
        shape: shape.into(),
        init,
    }
}

/// Ordered parameter and buffer layout implied by a config.
pub(crate) fn layout(cfg: &ModelConfig) -> (Vec<Slot>, Vec<Slot>) {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let bias = cfg.use_bias;
    let conv = |params: &mut Vec<Slot>, name: &str, shape: Vec<usize>, fan_in: usize, out: usize| {
        params.push(slot(format!("{name}.weight"), shape, Init::Uniform(fan_in)));
        if bias {
            params.push(slot(format!("{name}.bias"), [out], Init::Zeros));
        }
    };
    let bn = |params: &mut Vec<Slot>, buffers: &mut Vec<Slot>, name: &str, c: usize| {
        params.push(slot(format!("{name}.gamma"), [c], Init::Ones));
        params.push(slot(format!("{name}.beta"), [c], Init::Zeros));
        buffers.push(slot(format!("{name}.running_mean"), [c], Init::Zeros));
        buffers.push(slot(format!("{name}.running_var"), [c], Init::Ones));
    };

    let [w1, w2, w3] = cfg.conv_widths;
    let cin = cfg.input_channels;
    conv(&mut params, "encoder.conv1", vec![w1, 1, cin], cin, w1);
    bn(&mut params, &mut buffers, "encoder.bn1", w1);
    conv(&mut params, "encoder.conv2", vec![w2, 1, w1], w1, w2);
    conv(&mut params, "encoder.conv3", vec![w3, 1, w2], w2, w3);

    let p = cfg.primary_caps;
    conv(&mut params, "path_b.primary", vec![p.capsules * p.dim, 1, w3], w3, p.capsules * p.dim);
    let (ec, ed) = cfg.entity_caps;
    conv(&mut params, "path_b.entity", vec![ec * ed, 1, p.dim], p.dim, ec * ed);
    let q = cfg.part_caps;
    conv(&mut params, "path_b.parts", vec![q.capsules * q.dim, 1, ed], ed, q.capsules * q.dim);
    let r = cfg.regen_caps;
    conv(&mut params, "path_b.regen", vec![r.capsules * r.dim, 1, q.dim], q.dim, r.capsules * r.dim);
    let a = cfg.point_caps;
    conv(&mut params, "path_a", vec![a.capsules * a.dim, 1, w2], w2, a.capsules * a.dim);

    params.push(slot(
        "digit.weight",
        [cfg.digit_inputs(), cfg.num_classes, cfg.digit_dim, r.dim],
        Init::Uniform(r.dim),
    ));

    let dense = cfg.decoder_dense;
    conv(&mut params, "decoder.dense", vec![dense, cfg.digit_dim], cfg.digit_dim, dense);
    bn(&mut params, &mut buffers, "decoder.bn", dense);
    let s = cfg.upsample_stride;
    let [d0, d1, d2, d3] = cfg.decoder_widths;
    let grid_channels = dense / cfg.decoder_base_width();
    conv(&mut params, "decoder.deconv1", vec![s, d0, grid_channels], grid_channels, d0);
    conv(&mut params, "decoder.deconv2", vec![s, d1, d0], d0, d1);
    conv(&mut params, "decoder.deconv3", vec![1, d2, d1], d1, d2);
    conv(&mut params, "decoder.deconv4", vec![1, d3, d2], d2, d3);
    conv(&mut params, "decoder.deconv5", vec![1, 3, d3], d3, 3);
    (params, buffers)
}

fn materialise(slots: &[Slot], rng: &mut ChaCha8Rng) -> IndexMap<String, Tensor> {
    slots
        .iter()
        .map(|s| {
            let t = match s.init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(s.shape.clone(), -bound, bound, rng)
                }
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), 1.0),
            };
            (s.name.clone(), t)
        })
        .collect()
}

/// Learned parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ModelState {
    /// Fresh weights for `config`, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (p, b) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelState {
            params: materialise(&p, &mut rng),
            buffers: materialise(&b, &mut rng),
        })
    }

    /// Rebuilds a state from named tensors, checking every name and shape
    /// against the layout `config` implies.
    pub fn from_tensors(config: &ModelConfig, mut tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let (p, b) = layout(config);
        let mut take = |slots: &[Slot]| -> Result<IndexMap<String, Tensor>> {
            slots
                .iter()
                .map(|s| {
                    let t = tensors.shift_remove(&s.name).ok_or_else(|| {
                        Error::Version(format!("checkpoint lacks tensor `{}`", s.name))
                    })?;
                    if t.shape() != s.shape.as_slice() {
                        return Err(Error::Version(format!(
                            "tensor `{}` has shape {:?}, config expects {:?}",
                            s.name,
                            t.shape(),
                            s.shape
                        )));
                    }
                    Ok((s.name.clone(), t))
                })
                .collect()
        };
        let params = take(&p)?;
        let buffers = take(&b)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Version(format!("unexpected tensor `{extra}` for this config")));
        }
        let state = ModelState { params, buffers };
        state.check()?;
        Ok(state)
    }

    /// Every value finite and every running variance positive.
    pub fn check(&self) -> Result<()> {
        for (name, t) in self.params.iter().chain(&self.buffers) {
            if !t.is_finite() {
                return Err(Error::Contract(format!("state `{name}` has non-finite values")));
            }
        }
        for (name, t) in &self.buffers {
            if name.ends_with("running_var") && t.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Contract(format!("`{name}` has a non-positive entry")));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("no buffer `{name}`")))
    }

    /// Total number of learned scalars (BN running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`, as a trainable leaf or a constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        ParamVars { vars }
    }

    /// Exponential moving average of BN statistics:
    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, updates: &[(String, BnStats)], momentum: f64) -> Result<()> {
        for (prefix, stats) in updates {
            let correction = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let mean_key = format!("{prefix}.running_mean");
            let var_key = format!("{prefix}.running_var");
            for (key, batch, scale) in [(&mean_key, &stats.mean, 1.0), (&var_key, &stats.var, correction)] {
                let running = self
                    .buffers
                    .get_mut(key.as_str())
                    .ok_or_else(|| Error::Config(format!("no buffer `{key}`")))?;
                for (r, b) in running.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b * scale;
                }
            }
        }
        Ok(())
    }

    /// All tensors, parameters first, for serialisation.
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(&self.buffers)
    }
}

/// Tape handles of every parameter, keyed by name.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))
    }

    /// `Some(bias)` when the layer has one.
    pub fn bias(&self, layer: &str) -> Option<Var> {
        self.vars.get(&format!("{layer}.bias")).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients after `backward`; parameters the loss did not reach get zeros.
    pub fn grads(&self, tape: &Tape) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::micro(32, 2);
        let a = ModelState::init(&cfg, 7).unwrap();
        let b = ModelState::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelState::init(&cfg, 8).unwrap());
        let w = a.param("encoder.conv2.weight").unwrap();
        let bound = 1.0 / (cfg.conv_widths[0] as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound + 1e-15));
        assert!(a.param("encoder.conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.param("encoder.bn1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.buffer("decoder.bn.running_var").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn no_bias_config_drops_bias_tensors() {
        let mut cfg = ModelConfig::micro(32, 2);
        cfg.use_bias = false;
        let s = ModelState::init(&cfg, 0).unwrap();
        assert!(s.params().keys().all(|k| !k.ends_with(".bias")));
    }

    #[test]
    fn from_tensors_rejects_mismatch() {
        let cfg = ModelConfig::micro(32, 2);
        let s = ModelState::init(&cfg, 0).unwrap();
        let all: IndexMap<_, _> = s.tensors().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert_eq!(ModelState::from_tensors(&cfg, all.clone()).unwrap(), s);

        let other = ModelConfig::micro(32, 3);
        assert!(matches!(ModelState::from_tensors(&other, all.clone()), Err(Error::Version(_))));

        let mut missing = all;
        missing.shift_remove("digit.weight");
        assert!(matches!(ModelState::from_tensors(&cfg, missing), Err(Error::Version(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let cfg = ModelConfig::micro(32, 2);
        let mut s = ModelState::init(&cfg, 0).unwrap();
        let c = cfg.conv_widths[0];
        let stats = BnStats {
            mean: vec![2.0; c],
            var: vec![3.0; c],
            count: 4,
        };
        s.update_running_stats(&[("encoder.bn1".into(), stats)], 0.9).unwrap();
        let m = s.buffer("encoder.bn1.running_mean").unwrap().data()[0];
        let v = s.buffer("encoder.bn1.running_var").unwrap().data()[0];
        assert!((m - 0.2).abs() < 1e-15);
        assert!((v - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }
}
