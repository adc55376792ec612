//! Central finite-difference checks of the tape's reverse sweep.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::layers::{digitcap, pointcap_a, pointcap_b, pointcap_c, CapsuleBlock, LayerParams};
use crate::model::{input_tensor, loss_vars, LossWeights, Mode, ModelConfig, ModelState, Network};
use crate::routing::{route, DrAgreement, RoutingSpec};
use crate::tensor::{Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
pub const PER_OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Denominator floor of [`relative_error`]; keeps gradients that are zero
/// up to rounding from reporting huge relative errors.
pub const FLOOR: f64 = 1e-8;

/// Denominator floor of the end-to-end check. Central differences of an
/// O(1) loss carry about `eps · |L| / h ≈ 1e-11` of rounding noise, so
/// relative agreement to 1e-4 is only meaningful above ~1e-7.
pub const END_TO_END_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FLOOR)` with Euclidean norms over the whole
/// gradient of one input.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FLOOR)
}

/// Graph under test: maps leaf handles to one or more outputs.
pub type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + 'a;

/// Projects every output onto fixed random weights so that the scalar loss
/// exercises each output entry with a distinct sensitivity.
fn projection_weights(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    shapes.iter().map(|s| Tensor::uniform(s.clone(), -1.0, 1.0, &mut rng)).collect()
}

fn loss_value(inputs: &[Tensor], graph: &Graph<'_>, weights: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let outs = graph(&mut tape, &vars)?;
    let mut total = 0.0;
    for (o, w) in outs.iter().zip(weights) {
        total += tape.value(*o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Worst relative error over all inputs of `graph`, comparing the tape's
/// gradients with coordinate-wise central differences.
pub fn check_graph(inputs: &[Tensor], seed: u64, graph: &Graph<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let outs = graph(&mut tape, &vars)?;
    let shapes: Vec<Vec<usize>> = outs.iter().map(|&o| tape.shape(o).to_vec()).collect();
    let weights = projection_weights(&shapes, seed);
    let mut loss = None;
    for (&o, w) in outs.iter().zip(&weights) {
        let w = tape.constant(w.clone());
        let p = tape.mul(o, w)?;
        let s = tape.sum(p)?;
        loss = Some(match loss {
            Some(l) => tape.add(l, s)?,
            None => s,
        });
    }
    let loss = loss.ok_or_else(|| Error::Contract("graph produced no outputs".into()))?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = loss_value(&probe, graph, &weights)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = loss_value(&probe, graph, &weights)?;
            probe[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// One differentiable operation with its random-instance generator.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), -2.0, 2.0, rng)
}

macro_rules! case {
    ($name:literal, |$rng:ident| $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
        OpCase {
            name: $name,
            run: |seed| {
                let mut $rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = $inputs;
                check_graph(&inputs, seed, &|$t: &mut Tape, $v: &[Var]| -> Result<Vec<Var>> { $body })
            },
        }
    };
}

fn route_case(spec: RoutingSpec, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let votes = u(&mut rng, &[3, 2, 4]);
    check_graph(&[votes], seed, &|t, v| {
        let r = route(t, v[0], &spec)?;
        Ok(vec![r.parents, r.logits, r.couplings])
    })
}

fn caps_params(v: &[Var], spec: RoutingSpec) -> LayerParams {
    LayerParams {
        kernels: v[1],
        bias: Some(v[2]),
        routing: Some(spec),
    }
}

/// Every differentiable tape operation and capsule layer.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("linear", |r| vec![u(&mut r, &[2, 3, 4]), u(&mut r, &[5, 4]), u(&mut r, &[5])], |t, v| Ok(vec![
            t.linear(v[0], v[1], Some(v[2]))?
        ])),
        case!("conv1d_feature", |r| vec![u(&mut r, &[2, 3, 4]), u(&mut r, &[5, 1, 4]), u(&mut r, &[5])], |t, v| Ok(
            vec![t.conv1d_feature(v[0], v[1], Some(v[2]))?]
        )),
        case!("conv2d_strided", |r| vec![u(&mut r, &[2, 6, 1]), u(&mut r, &[3, 1, 2]), u(&mut r, &[3])], |t, v| Ok(
            vec![t.conv2d_strided(v[0], v[1], Some(v[2]), 2)?]
        )),
        case!("deconv_width", |r| vec![u(&mut r, &[2, 3, 4]), u(&mut r, &[2, 5, 4]), u(&mut r, &[5])], |t, v| Ok(
            vec![t.deconv_width(v[0], v[1], Some(v[2]), 2)?]
        )),
        case!("add_bias", |r| vec![u(&mut r, &[3, 4]), u(&mut r, &[4])], |t, v| Ok(vec![t.add_bias(v[0], v[1])?])),
        case!("swish", |r| vec![u(&mut r, &[3, 4])], |t, v| Ok(vec![t.swish(v[0])?])),
        case!("squash", |r| vec![u(&mut r, &[3, 4])], |t, v| Ok(vec![t.squash(v[0])?])),
        case!("softmax_rows", |r| vec![u(&mut r, &[3, 4])], |t, v| Ok(vec![t.softmax_rows(v[0])?])),
        case!("norm_last", |r| vec![u(&mut r, &[3, 4])], |t, v| Ok(vec![t.norm_last(v[0])?])),
        case!("add_sub_mul", |r| vec![u(&mut r, &[3, 4]), u(&mut r, &[3, 4])], |t, v| Ok(vec![
            t.add(v[0], v[1])?,
            t.sub(v[0], v[1])?,
            t.mul(v[0], v[1])?
        ])),
        case!("scale_sum_reshape", |r| vec![u(&mut r, &[3, 4])], |t, v| {
            let s = t.scale(v[0], -1.5)?;
            let r = t.reshape(s, [2, 6])?;
            Ok(vec![r, t.sum(v[0])?])
        }),
        case!("concat", |r| vec![u(&mut r, &[2, 3, 2]), u(&mut r, &[2, 1, 2])], |t, v| Ok(vec![t.concat(v[0], v[1], 1)?])),
        case!("select_rows", |r| vec![u(&mut r, &[2, 3, 4])], |t, v| Ok(vec![t.select_rows(v[0], &[2, 0])?])),
        case!("weighted_vote_sum", |r| vec![u(&mut r, &[2, 3, 2]), u(&mut r, &[2, 3, 2, 4])], |t, v| Ok(vec![
            t.weighted_vote_sum(v[0], v[1])?
        ])),
        case!("vote_distance_sq", |r| vec![u(&mut r, &[2, 3, 2, 4]), u(&mut r, &[2, 2, 4])], |t, v| Ok(vec![
            t.vote_distance_sq(v[0], v[1])?
        ])),
        case!("vote_dot", |r| vec![u(&mut r, &[2, 3, 2, 4]), u(&mut r, &[2, 2, 4])], |t, v| Ok(vec![
            t.vote_dot(v[0], v[1])?
        ])),
        case!("vote_cosine", |r| vec![u(&mut r, &[2, 3, 2, 4]), u(&mut r, &[2, 2, 4])], |t, v| Ok(vec![
            t.vote_cosine(v[0], v[1])?
        ])),
        case!("capsule_transform", |r| vec![u(&mut r, &[2, 3, 4]), u(&mut r, &[3, 2, 5, 4])], |t, v| Ok(vec![
            t.capsule_transform(v[0], v[1])?
        ])),
        case!("batch_norm_train", |r| vec![u(&mut r, &[6, 4]), u(&mut r, &[4]), u(&mut r, &[4])], |t, v| Ok(vec![
            t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
        ])),
        case!("batch_norm_eval", |r| vec![u(&mut r, &[6, 4]), u(&mut r, &[4]), u(&mut r, &[4])], |t, v| Ok(vec![
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[0.5, 1.0, 2.0, 1.5], 1e-5)?
        ])),
        case!("margin_loss", |r| vec![u(&mut r, &[3, 4])], |t, v| Ok(vec![t.margin_loss(v[0], &[1, 0, 3], 0.9, 0.1, 0.5)?])),
        case!("chamfer", |r| vec![u(&mut r, &[2, 5, 3]), u(&mut r, &[2, 4, 3])], |t, v| Ok(vec![t.chamfer(v[0], v[1])?])),
        OpCase {
            name: "route_er",
            run: |seed| route_case(RoutingSpec::euclidean(2), seed),
        },
        OpCase {
            name: "route_dr",
            run: |seed| route_case(RoutingSpec::dynamic(3), seed),
        },
        OpCase {
            name: "route_dr_cosine",
            run: |seed| {
                let mut spec = RoutingSpec::dynamic(2);
                spec.agreement = DrAgreement::Cosine;
                route_case(spec, seed)
            },
        },
        case!("pointcap_a", |r| vec![u(&mut r, &[2, 5, 4]), u(&mut r, &[6, 1, 4]), u(&mut r, &[6])], |t, v| {
            let p = caps_params(v, RoutingSpec::euclidean(2));
            let (caps, logits) = pointcap_a(t, &CapsuleBlock::new(v[0], "in"), &p, 3, 2)?;
            Ok(vec![caps.activities, logits])
        }),
        case!("pointcap_b", |r| vec![u(&mut r, &[2, 3, 2, 4]), u(&mut r, &[6, 1, 4]), u(&mut r, &[6])], |t, v| {
            let p = caps_params(v, RoutingSpec::dynamic(2));
            Ok(vec![pointcap_b(t, &CapsuleBlock::new(v[0], "in"), &p, 2, 3)?.activities])
        }),
        case!("pointcap_c", |r| vec![u(&mut r, &[2, 3, 2, 2]), u(&mut r, &[6, 1, 4]), u(&mut r, &[6])], |t, v| {
            let p = caps_params(v, RoutingSpec::dynamic(1));
            Ok(vec![pointcap_c(t, &CapsuleBlock::new(v[0], "in"), &p, 2, 3)?.activities])
        }),
        case!("digitcap", |r| vec![u(&mut r, &[2, 4, 3]), u(&mut r, &[4, 2, 3, 3])], |t, v| {
            let (caps, lengths) = digitcap(t, &CapsuleBlock::new(v[0], "in"), v[1], &RoutingSpec::dynamic(3))?;
            Ok(vec![caps.activities, lengths])
        }),
    ]
}

/// Model and batch used by the end-to-end check: the micro configuration on
/// 32-point clouds, two samples of different classes.
///
/// Freshly initialised biases are zero, which parks deep capsule layers at
/// the origin of squash, where it is flat to second order. Biases and
/// batch-norm affine terms are therefore redrawn so that every parameter
/// is checked at a generic point.
pub fn end_to_end_setup(seed: u64) -> Result<(ModelConfig, ModelState, Tensor, Vec<usize>)> {
    let cfg = ModelConfig::micro(32, 2);
    let mut state = ModelState::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    for (name, t) in state.params_mut() {
        let (lo, hi) = if name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
    let labels = vec![0, 1];
    let clouds: Vec<PointCloud> = labels
        .iter()
        .map(|&l| {
            let pts = (0..cfg.num_points)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect();
            PointCloud::new(pts, l)
        })
        .collect();
    let x = input_tensor(&clouds, &cfg)?;
    Ok((cfg, state, x, labels))
}

/// Nearest-neighbour assignment in both directions between each input
/// cloud and its reconstruction. Chamfer distance is smooth only while this
/// stays fixed.
fn nearest_pairs(x: &Tensor, y: &Tensor) -> Vec<usize> {
    let n = x.shape()[1];
    let m = y.shape()[1];
    let nearest = |p: &[f64], set: &[f64], count: usize| {
        (0..count)
            .map(|j| {
                let q = &set[3 * j..3 * j + 3];
                (j, (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
            })
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
            .0
    };
    let mut out = Vec::new();
    for (xs, ys) in x.data().chunks(3 * n).zip(y.data().chunks(3 * m)) {
        out.extend(xs.chunks(3).map(|p| nearest(p, ys, m)));
        out.extend(ys.chunks(3).map(|q| nearest(q, xs, n)));
    }
    out
}

struct Evaluation {
    loss: f64,
    pairs: Vec<usize>,
    grads: IndexMap<String, Tensor>,
}

fn model_loss(cfg: &ModelConfig, state: &ModelState, x: &Tensor, labels: &[usize], with_grads: bool) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let mut net = Network::new(&mut tape, cfg, state, Mode::Train, with_grads);
    let input = tape.constant(x.clone());
    let out = net.forward(&mut tape, input, Some(labels))?;
    let loss = loss_vars(&mut tape, out.encoded.lengths, labels, input, out.reconstruction, &LossWeights::from(cfg))?;
    let mut eval = Evaluation {
        loss: tape.value(loss.total).item()?,
        pairs: nearest_pairs(x, tape.value(out.reconstruction)),
        grads: IndexMap::new(),
    };
    if with_grads {
        tape.backward(loss.total)?;
        eval.grads = net.vars().grads(&tape);
    }
    Ok(eval)
}

/// Per-parameter-tensor errors of the end-to-end check.
#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub directional: f64,
    pub coordinate: f64,
}

fn pointwise_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(END_TO_END_FLOOR)
}

/// Checks the gradient of the total loss with respect to every parameter
/// tensor: along one random unit direction and at the coordinate with the
/// largest gradient.
///
/// When the stencil `x ± h` changes a Chamfer nearest-neighbour pair the
/// loss has a kink inside it, and `h` is reduced tenfold (at most twice)
/// until both sides keep the assignment of `x`.
pub fn end_to_end(seed: u64) -> Result<Vec<ParamError>> {
    let (cfg, state, x, labels) = end_to_end_setup(seed)?;
    let base_eval = model_loss(&cfg, &state, &x, &labels, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1);
    let mut probe = state.clone();
    let mut out = Vec::new();
    for (name, g) in &base_eval.grads {
        let base = state.param(name)?.clone();
        let mut dir: Vec<f64> = (0..g.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);

        let mut eval_along = |dir: &[f64]| -> Result<f64> {
            let mut h = STEP;
            loop {
                let mut shifted = |step: f64| -> Result<Evaluation> {
                    let p = probe.params_mut().get_mut(name).expect("same layout");
                    for ((w, b), d) in p.data_mut().iter_mut().zip(base.data()).zip(dir) {
                        *w = b + step * d;
                    }
                    model_loss(&cfg, &probe, &x, &labels, false)
                };
                let up = shifted(h)?;
                let down = shifted(-h)?;
                let smooth = up.pairs == base_eval.pairs && down.pairs == base_eval.pairs;
                if smooth || h < STEP * 0.02 {
                    return Ok((up.loss - down.loss) / (2.0 * h));
                }
                h *= 0.1;
            }
        };

        let analytic_dir: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let numeric_dir = eval_along(&dir)?;

        let (k, _) = g
            .data()
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
        let mut unit = vec![0.0; g.numel()];
        unit[k] = 1.0;
        let numeric_coord = eval_along(&unit)?;
        *probe.params_mut().get_mut(name).expect("same layout") = base;

        out.push(ParamError {
            name: name.clone(),
            directional: pointwise_error(analytic_dir, numeric_dir),
            coordinate: pointwise_error(g.data()[k], numeric_coord),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes_on_one_seed() {
        for case in op_cases() {
            let err = (case.run)(7).unwrap();
            assert!(err < PER_OP_TOLERANCE, "{}: {err:e}", case.name);
        }
    }

    #[test]
    fn detached_gradient_is_caught() {
        // A graph whose backward ignores part of the dependency must fail.
        let x = Tensor::new([3], vec![0.3, -0.7, 1.1]).unwrap();
        let err = check_graph(&[x], 0, &|t, v| {
            let d = t.detach(v[0]);
            Ok(vec![t.mul(v[0], d)?])
        })
        .unwrap();
        assert!(err > 0.1);
    }
}
