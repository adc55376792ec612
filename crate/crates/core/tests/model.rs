use pointcaps::data::{generate_shape, synthesize, PointCloud, ShapeKind, Split, SyntheticSpec};
use pointcaps::model::{
    decode, encode, forward, infer, input_tensor, loss_vars, LossWeights, Mode, ModelConfig, ModelState, Network,
    RoutingMode,
};
use pointcaps::routing::{RoutedVars, RoutingKind, RoutingSpec};
use pointcaps::train::{evaluate, optimizer_for, train, train_step, TrainConfig};
use pointcaps::verify::routing_oracle;
use pointcaps::{Result, Tape, Tensor, Var};
use proptest::prelude::*;

fn small_set(points: usize, per_class: usize, seed: u64) -> Vec<PointCloud> {
    synthesize(&SyntheticSpec::new(points, per_class, 0, seed), Split::Train).unwrap()
}

fn steps(cfg: &ModelConfig, clouds: &[PointCloud], n: usize, lr: f64) -> Vec<f64> {
    let mut state = ModelState::init(cfg, 0).unwrap();
    let tcfg = TrainConfig {
        epochs: n,
        lr,
        milestones: vec![],
        ..Default::default()
    };
    let mut opt = optimizer_for(&tcfg, 1).unwrap();
    (0..n)
        .map(|_| train_step(cfg, &mut state, &mut opt, clouds).unwrap().loss)
        .collect()
}

#[test]
fn overfits_a_single_cloud() {
    let cfg = ModelConfig::micro(32, 5);
    let cloud = generate_shape(ShapeKind::Torus, 32, 4).unwrap();
    let losses = steps(&cfg, &[cloud], 200, 1e-2);
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn loss_falls_in_every_routing_mode() {
    let clouds = small_set(32, 2, 1);
    for mode in [RoutingMode::PointCaps, RoutingMode::AllDr, RoutingMode::AllEr] {
        let mut cfg = ModelConfig::micro(32, 5);
        cfg.routing_mode = mode;
        let losses = steps(&cfg, &clouds, 20, 1e-2);
        let head: f64 = losses[..3].iter().sum();
        let tail: f64 = losses[17..].iter().sum();
        assert!(tail < head, "{mode}: {losses:?}");
    }
}

#[test]
fn decoder_ignores_skip_features_when_disabled() {
    let mut cfg = ModelConfig::micro(64, 5);
    let cloud = generate_shape(ShapeKind::Cube, 64, 2).unwrap();
    let skip_shape = [64, cfg.decoder_widths[1]];
    let other = Tensor::new(skip_shape, (0..64 * skip_shape[1]).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

    let state = ModelState::init(&cfg, 3).unwrap();
    let enc = encode(&cloud, &cfg, &state).unwrap();
    let latent = forward(&cloud, &cfg, &state).unwrap().latent;
    assert_ne!(decode(&latent, &enc.skip, &cfg, &state).unwrap(), decode(&latent, &other, &cfg, &state).unwrap());

    cfg.skip_connection = false;
    let state = ModelState::init(&cfg, 3).unwrap();
    let enc = encode(&cloud, &cfg, &state).unwrap();
    assert_eq!(decode(&latent, &enc.skip, &cfg, &state).unwrap(), decode(&latent, &other, &cfg, &state).unwrap());
}

#[test]
fn reconstruction_gradient_reaches_only_the_label_capsule() {
    let cfg = ModelConfig::micro(32, 5);
    let state = ModelState::init(&cfg, 1).unwrap();
    let clouds = small_set(32, 1, 2);
    let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
    let mut tape = Tape::new();
    let mut net = Network::new(&mut tape, &cfg, &state, Mode::Train, true);
    let x = tape.constant(input_tensor(&clouds, &cfg).unwrap());
    let out = net.forward(&mut tape, x, Some(&labels)).unwrap();
    let weights = LossWeights {
        gamma: 1.0,
        ..LossWeights::from(&cfg)
    };
    let loss = loss_vars(&mut tape, out.encoded.lengths, &labels, x, out.reconstruction, &weights).unwrap();
    tape.backward(loss.chamfer).unwrap();

    let grad = tape.grad(out.encoded.digit.activities).unwrap();
    let (a, d) = (cfg.num_classes, cfg.digit_dim);
    for (b, &label) in labels.iter().enumerate() {
        for row in 0..a {
            let g = &grad.data()[(b * a + row) * d..(b * a + row + 1) * d];
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if row == label {
                assert!(norm > 0.0, "sample {b}: no gradient on its label capsule");
            } else {
                assert_eq!(norm, 0.0, "sample {b}: gradient leaked into capsule {row}");
            }
        }
    }
}

#[test]
fn eval_masks_by_prediction_not_label() {
    let cfg = ModelConfig::micro(32, 5);
    let state = ModelState::init(&cfg, 5).unwrap();
    let cloud = generate_shape(ShapeKind::Sphere, 32, 0).unwrap();
    let predicted = forward(&cloud, &cfg, &state).unwrap().predicted;
    let wrong = (predicted + 1) % cfg.num_classes;

    let run = |labels: Option<&[usize]>| {
        let mut tape = Tape::new();
        let mut net = Network::new(&mut tape, &cfg, &state, Mode::Eval, false);
        let x = tape.constant(input_tensor(std::slice::from_ref(&cloud), &cfg).unwrap());
        let out = net.forward(&mut tape, x, labels).unwrap();
        (out.masked_rows, tape.value(out.latent).clone())
    };
    let (rows_pred, latent_pred) = run(None);
    let (rows_label, latent_label) = run(Some(&[wrong]));
    assert_eq!(rows_pred, vec![predicted]);
    assert_eq!(rows_label, vec![wrong]);
    assert_ne!(latent_pred, latent_label);
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::micro(32, 5);
    let clouds = small_set(32, 3, 7);
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 5,
        ..Default::default()
    };
    let a = train(&cfg, &tcfg, &clouds, &[]).unwrap();
    let b = train(&cfg, &tcfg, &clouds, &[]).unwrap();
    assert_eq!(a.log, b.log);
    assert!(a.last.tensors().eq(b.last.tensors()));
}

#[test]
fn batched_inference_matches_single_clouds() {
    let cfg = ModelConfig::micro(32, 5);
    let state = ModelState::init(&cfg, 2).unwrap();
    let clouds = small_set(32, 1, 3);
    let batched = infer(&clouds, &cfg, &state).unwrap();
    for (cloud, out) in clouds.iter().zip(&batched) {
        let single = forward(cloud, &cfg, &state).unwrap();
        assert_eq!(single.predicted, out.predicted);
        for (x, y) in single.class_lengths.iter().zip(&out.class_lengths) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let cfg = ModelConfig::micro(32, 5);
    let clouds = small_set(32, 10, 11);
    let seeds = 20;
    let mean: f64 = (0..seeds)
        .map(|s| evaluate(&cfg, &ModelState::init(&cfg, s).unwrap(), &clouds).unwrap().accuracy)
        .sum::<f64>()
        / seeds as f64;
    assert!((0.1..=0.3).contains(&mean), "mean untrained accuracy {mean}");
}

#[test]
fn cube_faces_are_sampled_uniformly() {
    let n = 6000;
    let cube = generate_shape(ShapeKind::Cube, n, 9).unwrap();
    let mut counts = [0usize; 6];
    for p in cube.part_labels.as_ref().expect("cube has faces") {
        counts[p.expect("cube points carry a face")] += 1;
    }
    // four standard deviations of a binomial(6000, 1/6) count
    let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 6.0).abs() < 4.0 * sd, "{counts:?}");
    }
}

fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
    (prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 2..40), 0usize..5)
        .prop_map(|(points, label)| PointCloud::new(points, label))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(cloud in cloud_strategy()) {
        let once = cloud.normalized();
        let twice = once.clone().normalized();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
        prop_assert!(once.radius() <= 1.0 + 1e-12);
    }

    #[test]
    fn routing_ignores_child_order(
        (ci, cp, d) in (1..6usize, 1..5usize, 1..5usize),
        iterations in 1..4usize,
        seed in 0..1000u64,
        euclidean in any::<bool>(),
    ) {
        use pointcaps::routing::{route_with, VoteTensor};
        let data: Vec<f64> = (0..ci * cp * d).map(|i| ((i as u64 * 7919 + seed) as f64 * 0.618).sin()).collect();
        let kind = if euclidean { RoutingKind::Euclidean } else { RoutingKind::Dynamic };
        let spec = RoutingSpec::new(kind, iterations);
        let base = route_with(&VoteTensor::new(Tensor::new([ci, cp, d], data.clone()).unwrap()).unwrap(), &spec).unwrap();
        let block = cp * d;
        let reversed: Vec<f64> = data.chunks(block).rev().flatten().copied().collect();
        let flipped = route_with(&VoteTensor::new(Tensor::new([ci, cp, d], reversed).unwrap()).unwrap(), &spec).unwrap();
        for (a, b) in base.parents.data().iter().zip(flipped.parents.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

/// Euclidean routing with the sign of the agreement update flipped.
fn flipped_er(tape: &mut Tape, votes: Var, spec: &RoutingSpec) -> Result<RoutedVars> {
    let shape = tape.shape(votes).to_vec();
    let r = shape.len();
    let (ci, cp, d) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let groups: usize = shape[..r - 3].iter().product();
    let v = tape.reshape(votes, [groups, ci, cp, d])?;
    let mut logits = tape.constant(Tensor::zeros([groups, ci, cp]));
    let mut couplings = logits;
    let mut parents = None;
    for _ in 0..spec.iterations {
        couplings = tape.softmax_rows(logits)?;
        let s = tape.weighted_vote_sum(couplings, v)?;
        let s = tape.squash(s)?;
        let agree = match spec.kind {
            RoutingKind::Euclidean => tape.vote_distance_sq(v, s)?,
            RoutingKind::Dynamic => tape.vote_dot(v, s)?,
        };
        logits = tape.add(logits, agree)?;
        parents = Some(s);
    }
    let mut parent_shape = shape[..r - 3].to_vec();
    parent_shape.extend([cp, d]);
    let mut logit_shape = shape[..r - 3].to_vec();
    logit_shape.extend([ci, cp]);
    Ok(RoutedVars {
        parents: tape.reshape(parents.unwrap(), parent_shape)?,
        logits: tape.reshape(logits, logit_shape.clone())?,
        couplings: tape.reshape(couplings, logit_shape)?,
    })
}

#[test]
fn oracle_catches_a_sign_flipped_router() {
    let (passed, detail) = routing_oracle(&flipped_er, RoutingKind::Euclidean, 50, 0).unwrap();
    assert!(!passed, "mutant passed: {detail}");
    // the same construction is faithful for dynamic routing
    let (passed, detail) = routing_oracle(&flipped_er, RoutingKind::Dynamic, 50, 0).unwrap();
    assert!(passed, "{detail}");
}
