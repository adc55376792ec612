//! The full PointCaps autoencoder: encoder paths, class capsules, masked
//! class-independent decoder, losses and cost accounting.

mod checkpoint;
mod complexity;
mod config;
mod network;
mod state;

pub use checkpoint::{checkpoint_to_string, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use complexity::{count_params_flops, routing_flops, Complexity, LayerCost};
pub use config::{CapsLayerConfig, ModelConfig, RoutingMode};
pub use network::{loss_vars, EncodedVars, LossVars, LossWeights, Mode, Network, OutputVars};
pub use state::{ModelState, ParamVars};

use rayon::prelude::*;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Per-sample results of an evaluation-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub class_lengths: Vec<f64>,
    /// Longest class capsule.
    pub predicted: usize,
    /// `[N, 3]`
    pub reconstruction: Tensor,
    /// `[N, c]`
    pub part_logits: Tensor,
    pub latent: Vec<f64>,
}

/// Encoder results for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    /// `[a, b]`
    pub digit: Tensor,
    pub class_lengths: Vec<f64>,
    /// `[N, c]`
    pub part_logits: Tensor,
    /// `[N, w2]`
    pub skip: Tensor,
}

/// Stacks clouds into the model input `[B, N, C]`.
pub fn input_tensor(clouds: &[PointCloud], config: &ModelConfig) -> Result<Tensor> {
    if clouds.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut data = Vec::with_capacity(clouds.len() * config.num_points * config.input_channels);
    for c in clouds {
        if c.len() != config.num_points {
            return Err(Error::Input(format!(
                "cloud has {} points, model expects {}",
                c.len(),
                config.num_points
            )));
        }
        data.extend(c.features(config.input_channels)?);
    }
    Tensor::new([clouds.len(), config.num_points, config.input_channels], data)
}

/// Coordinates only, `[B, N, 3]`.
pub fn coords_tensor(clouds: &[PointCloud]) -> Result<Tensor> {
    let n = clouds.first().map(PointCloud::len).unwrap_or(0);
    if n == 0 || clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Input("batch clouds must be non-empty and of equal size".into()));
    }
    Tensor::new([clouds.len(), n, 3], clouds.iter().flat_map(|c| c.points.iter().flatten().copied()).collect())
}

fn split_rows(t: &Tensor) -> Vec<Tensor> {
    let s = t.shape();
    let inner: Vec<usize> = s[1..].to_vec();
    let size: usize = inner.iter().product();
    t.data()
        .chunks(size)
        .map(|c| Tensor::from_parts(inner.clone(), c.to_vec()))
        .collect()
}

/// Samples per tape in batched inference.
const INFER_CHUNK: usize = 16;

/// Evaluation-mode forward pass: running BN statistics, latent taken from
/// the longest class capsule. Samples are independent, so chunks run in
/// parallel and results do not depend on chunking.
pub fn infer(clouds: &[PointCloud], config: &ModelConfig, state: &ModelState) -> Result<Vec<ForwardOutput>> {
    let chunks: Vec<Result<Vec<ForwardOutput>>> = clouds
        .par_chunks(INFER_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let mut net = Network::new(&mut tape, config, state, Mode::Eval, false);
            let x = tape.constant(input_tensor(chunk, config)?);
            let out = net.forward(&mut tape, x, None)?;
            let lengths = split_rows(tape.value(out.encoded.lengths));
            let recon = split_rows(tape.value(out.reconstruction));
            let logits = split_rows(tape.value(out.encoded.part_logits));
            let latent = split_rows(tape.value(out.latent));
            Ok(lengths
                .into_iter()
                .zip(recon)
                .zip(logits)
                .zip(latent)
                .zip(&out.masked_rows)
                .map(|((((l, r), p), z), &row)| ForwardOutput {
                    class_lengths: l.into_data(),
                    predicted: row,
                    reconstruction: r,
                    part_logits: p,
                    latent: z.into_data(),
                })
                .collect())
        })
        .collect();
    let mut all = Vec::with_capacity(clouds.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

pub fn forward(cloud: &PointCloud, config: &ModelConfig, state: &ModelState) -> Result<ForwardOutput> {
    Ok(infer(std::slice::from_ref(cloud), config, state)?.remove(0))
}

/// Evaluation-mode encoder for one cloud.
pub fn encode(cloud: &PointCloud, config: &ModelConfig, state: &ModelState) -> Result<Encoding> {
    let mut tape = Tape::new();
    let mut net = Network::new(&mut tape, config, state, Mode::Eval, false);
    let x = tape.constant(input_tensor(std::slice::from_ref(cloud), config)?);
    let e = net.encode(&mut tape, x)?;
    let first = |v| split_rows(tape.value(v)).remove(0);
    Ok(Encoding {
        digit: first(e.digit.activities),
        class_lengths: first(e.lengths).into_data(),
        part_logits: first(e.part_logits),
        skip: first(e.skip),
    })
}

/// Evaluation-mode decoder: latent `[b]` and skip features `[N, w2]` to
/// coordinates `[N, 3]`.
pub fn decode(latent: &[f64], skip: &Tensor, config: &ModelConfig, state: &ModelState) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut net = Network::new(&mut tape, config, state, Mode::Eval, false);
    let z = tape.constant(Tensor::new([1, latent.len()], latent.to_vec())?);
    let want = [config.num_points, config.decoder_widths[1]];
    if config.skip_connection && skip.shape() != want {
        return Err(Error::Config(format!(
            "skip features {:?}, decoder expects {want:?}",
            skip.shape()
        )));
    }
    let mut s = skip.shape().to_vec();
    s.insert(0, 1);
    let skip = tape.constant(skip.clone().reshape(s)?);
    let y = net.decode(&mut tape, z, Some(skip))?;
    let mut out = tape.value(y).clone();
    out = out.reshape([config.num_points, 3])?;
    Ok(out)
}

fn cloud_tensor(points: &[[f64; 3]]) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::Input("empty point cloud".into()));
    }
    Tensor::new([1, points.len(), 3], points.iter().flatten().copied().collect())
}

/// Symmetric Chamfer distance: mean squared distance to the nearest
/// neighbour, in both directions, summed.
pub fn chamfer(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(cloud_tensor(x)?);
    let b = tape.constant(cloud_tensor(y)?);
    let d = tape.chamfer(a, b)?;
    tape.value(d).item()
}

/// Margin loss of one sample, summed over classes.
pub fn margin_loss(lengths: &[f64], label: usize, m_plus: f64, m_minus: f64, lambda: f64) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Input("no class lengths".into()));
    }
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new([1, lengths.len()], lengths.to_vec())?);
    let v = tape.margin_loss(l, &[label], m_plus, m_minus, lambda)?;
    tape.value(v).item()
}

/// `margin + gamma * chamfer(x, x_hat)`.
pub fn total_loss(lengths: &[f64], label: usize, x: &[[f64; 3]], x_hat: &[[f64; 3]], weights: &LossWeights) -> Result<f64> {
    let m = margin_loss(lengths, label, weights.m_plus, weights.m_minus, weights.lambda)?;
    Ok(m + weights.gamma * chamfer(x, x_hat)?)
}

/// Reconstruction as `[x, y, z]` rows.
pub fn tensor_points(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}
