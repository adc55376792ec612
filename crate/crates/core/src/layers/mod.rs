//! Convolutional capsule layers and the class-capsule layer.
//!
//! | layer     | input                | transform                              | routing |
//! |-----------|----------------------|----------------------------------------|---------|
//! | PointCapA | `[.., c, n]`         | shared `(1, n)` kernels per capsule    | yes     |
//! | PointCapB | `[.., E, c, n]`      | `(1, n)` 2D kernels, stride `n`        | yes     |
//! | PointCapC | `[.., E, c, n]`      | `(1, c·n)` kernels over each entity    | no      |
//! | DigitCap  | `[.., c, n]`         | one matrix per (child, class) pair     | yes     |

use crate::error::{Error, Result};
use crate::routing::{route, RoutingKind, RoutingSpec};
use crate::tensor::{Tape, Var};

/// A set of capsules on the tape: `[..., count, dim]` activities.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleBlock {
    pub activities: Var,
    pub layer: &'static str,
    pub routing: Option<RoutingKind>,
}

impl CapsuleBlock {
    pub fn new(activities: Var, layer: &'static str) -> Self {
        CapsuleBlock {
            activities,
            layer,
            routing: None,
        }
    }

    /// `(count, dim)` from the two trailing axes.
    pub fn dims(&self, tape: &Tape) -> (usize, usize) {
        let s = tape.shape(self.activities);
        (s[s.len() - 2], s[s.len() - 1])
    }
}

/// Learned parameters of one capsule layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub kernels: Var,
    pub bias: Option<Var>,
    pub routing: Option<RoutingSpec>,
}

fn routing_of(params: &LayerParams, layer: &str) -> Result<RoutingSpec> {
    params
        .routing
        .ok_or_else(|| Error::Config(format!("{layer} needs a routing spec")))
}

fn check_kernels(tape: &Tape, params: &LayerParams, layer: &str, count: usize, width: usize) -> Result<()> {
    let ks = tape.shape(params.kernels);
    if ks != [count, 1, width] {
        return Err(Error::Config(format!(
            "{layer}: kernels {ks:?}, expected [{count}, 1, {width}]"
        )));
    }
    Ok(())
}

fn with_tail(shape: &[usize], keep: usize, tail: &[usize]) -> Vec<usize> {
    let mut out = shape[..keep].to_vec();
    out.extend_from_slice(tail);
    out
}

/// PointCapA: 1D convolutional capsule layer with routing.
///
/// Each input capsule is convolved with `c_out · d_out` kernels of width
/// `d_in`, passed through swish, and reshaped into votes
/// `[..., c_in, c_out, d_out]`. Returns the routed parents and the final
/// routing logits `[..., c_in, c_out]`.
pub fn pointcap_a(
    tape: &mut Tape,
    input: &CapsuleBlock,
    params: &LayerParams,
    c_out: usize,
    d_out: usize,
) -> Result<(CapsuleBlock, Var)> {
    let spec = routing_of(params, "PointCapA")?;
    let (c_in, d_in) = input.dims(tape);
    check_kernels(tape, params, "PointCapA", c_out * d_out, d_in)?;
    let shape = tape.shape(input.activities).to_vec();
    let lead = shape.len() - 2;

    let conv = tape.conv1d_feature(input.activities, params.kernels, params.bias)?;
    let act = tape.swish(conv)?;
    let votes = tape.reshape(act, with_tail(&shape, lead, &[c_in, c_out, d_out]))?;
    let routed = route(tape, votes, &spec)?;
    Ok((
        CapsuleBlock {
            activities: routed.parents,
            layer: "PointCapA",
            routing: Some(spec.kind),
        },
        routed.logits,
    ))
}

/// PointCapB: 2D convolutional capsule layer routed per entity.
///
/// Input `[..., E, c_in, d_in]` is viewed as `[..., E, c_in · d_in, 1]` and
/// convolved by `(1, d_in)` kernels with stride `d_in`, which yields one
/// vote block per input capsule.
pub fn pointcap_b(
    tape: &mut Tape,
    input: &CapsuleBlock,
    params: &LayerParams,
    c_out: usize,
    d_out: usize,
) -> Result<CapsuleBlock> {
    let spec = routing_of(params, "PointCapB")?;
    let shape = tape.shape(input.activities).to_vec();
    if shape.len() < 3 {
        return Err(Error::Config(format!("PointCapB input {shape:?} needs an entity axis")));
    }
    let (c_in, d_in) = input.dims(tape);
    check_kernels(tape, params, "PointCapB", c_out * d_out, d_in)?;
    let lead = shape.len() - 2;

    let columns = tape.reshape(input.activities, with_tail(&shape, lead, &[c_in * d_in, 1]))?;
    let conv = tape.conv2d_strided(columns, params.kernels, params.bias, d_in)?;
    let act = tape.swish(conv)?;
    let votes = tape.reshape(act, with_tail(&shape, lead, &[c_in, c_out, d_out]))?;
    let routed = route(tape, votes, &spec)?;
    Ok(CapsuleBlock {
        activities: routed.parents,
        layer: "PointCapB",
        routing: Some(spec.kind),
    })
}

/// PointCapC: flattens each entity's capsules, applies a full-width 1D
/// convolution and squashes the result. No routing.
pub fn pointcap_c(
    tape: &mut Tape,
    input: &CapsuleBlock,
    params: &LayerParams,
    c_out: usize,
    d_out: usize,
) -> Result<CapsuleBlock> {
    let shape = tape.shape(input.activities).to_vec();
    if shape.len() < 3 {
        return Err(Error::Config(format!("PointCapC input {shape:?} needs an entity axis")));
    }
    let (c_in, d_in) = input.dims(tape);
    check_kernels(tape, params, "PointCapC", c_out * d_out, c_in * d_in)?;
    let lead = shape.len() - 2;

    let flat = tape.reshape(input.activities, with_tail(&shape, lead, &[c_in * d_in]))?;
    let conv = tape.conv1d_feature(flat, params.kernels, params.bias)?;
    let caps = tape.reshape(conv, with_tail(&shape, lead, &[c_out, d_out]))?;
    Ok(CapsuleBlock {
        activities: tape.squash(caps)?,
        layer: "PointCapC",
        routing: None,
    })
}

/// DigitCap: fully-connected capsule layer. `weights` is
/// `[c_in, classes, d_out, d_in]`. Returns the class capsules and their
/// lengths `[..., classes]`.
pub fn digitcap(
    tape: &mut Tape,
    input: &CapsuleBlock,
    weights: Var,
    routing: &RoutingSpec,
) -> Result<(CapsuleBlock, Var)> {
    let (c_in, d_in) = input.dims(tape);
    let ws = tape.shape(weights);
    if ws.len() != 4 || ws[0] != c_in || ws[3] != d_in {
        return Err(Error::Config(format!(
            "DigitCap: weights {ws:?} for input capsules {c_in}x{d_in}"
        )));
    }
    let votes = tape.capsule_transform(input.activities, weights)?;
    let routed = route(tape, votes, routing)?;
    let lengths = tape.norm_last(routed.parents)?;
    Ok((
        CapsuleBlock {
            activities: routed.parents,
            layer: "DigitCap",
            routing: Some(routing.kind),
        },
        lengths,
    ))
}

/// Index of the longest capsule in each row of `[B, a, d]`; ties resolve to
/// the lowest index.
pub fn longest_capsules(tape: &Tape, digit: &CapsuleBlock) -> Vec<usize> {
    let s = tape.shape(digit.activities);
    let (a, d) = (s[s.len() - 2], s[s.len() - 1]);
    tape.value(digit.activities)
        .data()
        .chunks(a * d)
        .map(|sample| {
            let mut best = 0;
            let mut best_len = f64::NEG_INFINITY;
            for (k, cap) in sample.chunks(d).enumerate() {
                let len: f64 = cap.iter().map(|v| v * v).sum();
                if len > best_len {
                    best_len = len;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Selects one class capsule per sample as the decoder input: the labelled
/// row during training, the longest capsule otherwise. Only the `d`-dim
/// activity vector is passed on, never the class identity.
pub fn mask_activity(
    tape: &mut Tape,
    digit: &CapsuleBlock,
    labels: Option<&[usize]>,
) -> Result<(Var, Vec<usize>)> {
    let s = tape.shape(digit.activities).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("mask_activity", format!("expected [B, a, d], got {s:?}")));
    }
    let rows = match labels {
        Some(labels) => {
            if labels.len() != s[0] {
                return Err(Error::Input(format!(
                    "{} labels for a batch of {}",
                    labels.len(),
                    s[0]
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
                return Err(Error::Input(format!("label {bad} out of range for {} classes", s[1])));
            }
            labels.to_vec()
        }
        None => longest_capsules(tape, digit),
    };
    let masked = tape.select_rows(digit.activities, &rows)?;
    Ok((masked, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
    }

    #[test]
    fn pointcap_a_zero_kernels_give_zero_parents() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(rand_t(&mut rng, &[4, 3]));
        let params = LayerParams {
            kernels: tape.constant(Tensor::zeros([4, 1, 3])),
            bias: Some(tape.constant(Tensor::zeros([4]))),
            routing: Some(RoutingSpec::euclidean(3)),
        };
        let (out, logits) = pointcap_a(&mut tape, &CapsuleBlock::new(x, "in"), &params, 2, 2).unwrap();
        assert_eq!(tape.shape(out.activities), &[2, 2]);
        assert_eq!(tape.shape(logits), &[4, 2]);
        assert!(tape.value(out.activities).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointcap_a_rejects_bad_kernel_count() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([4, 3]));
        let params = LayerParams {
            kernels: tape.constant(Tensor::zeros([5, 1, 3])),
            bias: None,
            routing: Some(RoutingSpec::euclidean(1)),
        };
        let err = pointcap_a(&mut tape, &CapsuleBlock::new(x, "in"), &params, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pointcap_b_and_c_shapes() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(rand_t(&mut rng, &[64, 1, 32]));
        let c_params = LayerParams {
            kernels: tape.constant(rand_t(&mut rng, &[64, 1, 32])),
            bias: None,
            routing: None,
        };
        let c = pointcap_c(&mut tape, &CapsuleBlock::new(x, "in"), &c_params, 4, 16).unwrap();
        assert_eq!(tape.shape(c.activities), &[64, 4, 16]);
        let b_params = LayerParams {
            kernels: tape.constant(rand_t(&mut rng, &[128, 1, 16])),
            bias: Some(tape.constant(Tensor::zeros([128]))),
            routing: Some(RoutingSpec::dynamic(3)),
        };
        let b = pointcap_b(&mut tape, &c, &b_params, 8, 16).unwrap();
        assert_eq!(tape.shape(b.activities), &[64, 8, 16]);
        for row in tape.value(b.activities).data().chunks(16) {
            assert!(row.iter().map(|v| v * v).sum::<f64>().sqrt() < 1.0);
        }
    }

    #[test]
    fn pointcap_c_zero_input_gives_zero() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::zeros([3, 2, 4]));
        let params = LayerParams {
            kernels: tape.constant(rand_t(&mut rng, &[6, 1, 8])),
            bias: None,
            routing: None,
        };
        let out = pointcap_c(&mut tape, &CapsuleBlock::new(x, "in"), &params, 2, 3).unwrap();
        assert!(tape.value(out.activities).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn digitcap_lengths_below_one() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(rand_t(&mut rng, &[2, 6, 4]));
        let w = tape.constant(rand_t(&mut rng, &[6, 3, 5, 4]));
        let (digit, lengths) = digitcap(&mut tape, &CapsuleBlock::new(x, "in"), w, &RoutingSpec::dynamic(3)).unwrap();
        assert_eq!(tape.shape(digit.activities), &[2, 3, 5]);
        assert_eq!(tape.shape(lengths), &[2, 3]);
        assert!(tape.value(lengths).data().iter().all(|&l| (0.0..1.0).contains(&l)));
    }

    #[test]
    fn mask_picks_label_or_longest() {
        let mut tape = Tape::new();
        // lengths 0.1, 0.9, 0.3, 0.2 along the first axis of each capsule
        let mut data = vec![0.0; 4 * 2];
        for (k, l) in [0.1, 0.9, 0.3, 0.2].iter().enumerate() {
            data[k * 2] = *l;
        }
        let digit = CapsuleBlock::new(tape.constant(Tensor::new([1, 4, 2], data).unwrap()), "digit");
        let (v, rows) = mask_activity(&mut tape, &digit, None).unwrap();
        assert_eq!(rows, vec![1]);
        assert_eq!(tape.shape(v), &[1, 2]);
        let (v, rows) = mask_activity(&mut tape, &digit, Some(&[2])).unwrap();
        assert_eq!(rows, vec![2]);
        assert_eq!(tape.value(v).data(), &[0.3, 0.0]);
        assert!(matches!(
            mask_activity(&mut tape, &digit, Some(&[4])),
            Err(Error::Input(_))
        ));
    }
}
