//! Self-check battery: routing and kernel oracles, finite-difference
//! gradient checks, closed-form values and model invariants.
//!
//! The router is a parameter of [`run_battery`] so that a deliberately
//! broken implementation can be plugged in and shown to fail.

pub mod gradcheck;
pub mod reference;

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_shape, PointCloud, ShapeKind};
use crate::error::Result;
use crate::model::{count_params_flops, forward, ModelConfig, ModelState};
use crate::routing::{route, RoutedVars, RoutingKind, RoutingSpec};
use crate::tensor::{conv_output_width, Tape, Tensor, Var};

/// A routing implementation under test.
pub type Router<'a> = &'a dyn Fn(&mut Tape, Var, &RoutingSpec) -> Result<RoutedVars>;

/// Tolerance of the oracle comparisons.
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} {:>9.3}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn total_time(&self) -> Duration {
        self.checks.iter().map(|c| c.elapsed).sum()
    }
}

/// Sizes of the randomized parts of the battery.
#[derive(Clone, Debug, PartialEq)]
pub struct BatteryConfig {
    pub routing_cases: usize,
    pub gradcheck_seeds: u64,
    pub end_to_end_seeds: u64,
    pub probe_pairs: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl BatteryConfig {
    pub fn full() -> Self {
        BatteryConfig {
            routing_cases: 200,
            gradcheck_seeds: 100,
            end_to_end_seeds: 100,
            probe_pairs: 1000,
            permutations: 50,
            seed: 0,
        }
    }

    /// A few seconds' worth of every check.
    pub fn quick() -> Self {
        BatteryConfig {
            routing_cases: 40,
            gradcheck_seeds: 5,
            end_to_end_seeds: 3,
            probe_pairs: 1000,
            permutations: 5,
            seed: 0,
        }
    }
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Outcome of one check body: pass flag and a human-readable summary.
type Outcome = Result<(bool, String)>;

fn timed(name: impl Into<String>, body: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.into(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Runs every check with the given router.
pub fn run_battery(cfg: &BatteryConfig, router: Router<'_>) -> Report {
    run_battery_with(cfg, router, |_| {})
}

/// [`run_battery`] with a callback after each finished check.
pub fn run_battery_with(cfg: &BatteryConfig, router: Router<'_>, mut progress: impl FnMut(&CheckResult)) -> Report {
    let mut report = Report::default();
    let mut push = |r: CheckResult| {
        progress(&r);
        report.checks.push(r);
    };

    for kind in [RoutingKind::Euclidean, RoutingKind::Dynamic] {
        push(timed(format!("routing_oracle_{kind}"), || {
            routing_oracle(router, kind, cfg.routing_cases, cfg.seed)
        }));
    }
    push(timed("layer_oracle_pointcap_a", || pointcap_a_oracle(router, cfg.seed)));
    push(timed("kernel_oracle_conv", || conv_oracles(cfg.seed)));
    push(timed("kernel_oracle_deconv", || deconv_oracle(cfg.seed)));
    push(timed("kernel_oracle_softmax_squash", || softmax_squash_oracle(cfg.seed)));
    push(timed("kernel_oracle_chamfer", || chamfer_oracle(cfg.seed)));

    for case in gradcheck::op_cases() {
        push(timed(format!("gradcheck_{}", case.name), || {
            let mut worst = 0.0f64;
            for s in 0..cfg.gradcheck_seeds {
                worst = worst.max((case.run)(cfg.seed + s)?);
            }
            Ok((
                worst < gradcheck::PER_OP_TOLERANCE,
                format!("max rel err {worst:.2e} over {} seeds", cfg.gradcheck_seeds),
            ))
        }));
    }
    push(timed("gradcheck_end_to_end", || end_to_end(cfg)));

    push(timed("analytic_squash", analytic_squash));
    push(timed("analytic_singleton_chamfer", || analytic_chamfer(cfg.seed)));
    push(timed("analytic_margin", analytic_margin));
    push(timed("width_identity", width_identity));
    push(timed("logit_range", || logit_range(cfg.probe_pairs, cfg.seed)));
    push(timed("permutation_invariance", || permutation_invariance(cfg.permutations, cfg.seed)));
    push(timed("complexity_hand_tally", complexity_hand_tally));
    report
}

/// [`run_battery`] with the library router.
pub fn run_default(cfg: &BatteryConfig) -> Report {
    run_battery(cfg, &route)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random vote tensors up to `8 x 8 x 8`, one to four iterations, compared
/// entry by entry with the loop reference.
pub fn routing_oracle(router: Router<'_>, kind: RoutingKind, cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0AC1E);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (ci, cp, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let iterations = rng.random_range(1..=4);
        let scale = rng.random_range(0.1..3.0);
        let votes = Tensor::uniform([ci, cp, d], -scale, scale, &mut rng);

        let mut tape = Tape::new();
        let v = tape.constant(votes.clone());
        let out = router(&mut tape, v, &RoutingSpec::new(kind, iterations))?;
        let want = reference::route(&reference::nest_votes(votes.data(), ci, cp, d), iterations, kind);
        worst = worst
            .max(max_diff(tape.value(out.parents).data(), &reference::flatten(&want.parents)))
            .max(max_diff(tape.value(out.logits).data(), &reference::flatten(&want.logits)))
            .max(max_diff(tape.value(out.couplings).data(), &reference::flatten(&want.couplings)));
    }
    Ok((
        worst <= ORACLE_TOLERANCE,
        format!("max abs diff {worst:.2e} over {cases} vote tensors"),
    ))
}

/// PointCapA against naive convolution, swish and the reference router.
fn pointcap_a_oracle(router: Router<'_>, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA);
    let (c_in, d_in, c_out, d_out) = (4, 3, 2, 2);
    let x = Tensor::uniform([c_in, d_in], -1.0, 1.0, &mut rng);
    let kernels = Tensor::uniform([c_out * d_out, 1, d_in], -1.0, 1.0, &mut rng);
    let bias = Tensor::uniform([c_out * d_out], -0.5, 0.5, &mut rng);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(kernels.clone());
    let bv = tape.constant(bias.clone());
    let conv = tape.conv1d_feature(xv, kv, Some(bv))?;
    let act = tape.swish(conv)?;
    let votes = tape.reshape(act, [c_in, c_out, d_out])?;
    let out = router(&mut tape, votes, &RoutingSpec::euclidean(3))?;

    let rows: Vec<Vec<f64>> = x.data().chunks(d_in).map(<[f64]>::to_vec).collect();
    let ks: Vec<Vec<f64>> = kernels.data().chunks(d_in).map(<[f64]>::to_vec).collect();
    let pre = reference::conv_rows(&rows, &ks, Some(bias.data()));
    let act: Vec<f64> = reference::flatten(&pre).iter().map(|&z| z / (1.0 + (-z).exp())).collect();
    let want = reference::route(&reference::nest_votes(&act, c_in, c_out, d_out), 3, RoutingKind::Euclidean);
    let diff = max_diff(tape.value(out.parents).data(), &reference::flatten(&want.parents))
        .max(max_diff(tape.value(out.logits).data(), &reference::flatten(&want.logits)));
    Ok((diff <= ORACLE_TOLERANCE, format!("max abs diff {diff:.2e}")))
}

fn conv_oracles(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // full-feature convolution on [R, F] rows
        let (r, f, k) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let x = Tensor::uniform([r, f], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform([k, 1, f], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv1d_feature(xv, wv, None)?;
        let rows: Vec<Vec<f64>> = x.data().chunks(f).map(<[f64]>::to_vec).collect();
        let ks: Vec<Vec<f64>> = w.data().chunks(f).map(<[f64]>::to_vec).collect();
        worst = worst.max(max_diff(tape.value(y).data(), &reference::flatten(&reference::conv_rows(&rows, &ks, None))));

        // strided height-1 convolution on a [c·n, 1] column
        let (c, n) = (rng.random_range(1..6), rng.random_range(1..5));
        let col = Tensor::uniform([c * n, 1], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform([k, 1, n], -2.0, 2.0, &mut rng);
        let cv = tape.constant(col.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d_strided(cv, wv, None, n)?;
        let ks: Vec<Vec<f64>> = w.data().chunks(n).map(<[f64]>::to_vec).collect();
        let want = reference::sliding_conv(col.data(), &ks, n);
        worst = worst.max(max_diff(tape.value(y).data(), &reference::flatten(&want)));
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max abs diff {worst:.2e}")))
}

fn deconv_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (w, c_in, c_out, k) = (
            rng.random_range(1..6),
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let x = Tensor::uniform([w, c_in], -2.0, 2.0, &mut rng);
        let kern = Tensor::uniform([k, c_out, c_in], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(kern.clone()));
        let y = tape.deconv_width(xv, kv, None, k)?;
        let cols: Vec<Vec<f64>> = x.data().chunks(c_in).map(<[f64]>::to_vec).collect();
        let ks: Vec<Vec<Vec<f64>>> = kern
            .data()
            .chunks(c_out * c_in)
            .map(|t| t.chunks(c_in).map(<[f64]>::to_vec).collect())
            .collect();
        worst = worst.max(max_diff(tape.value(y).data(), &reference::flatten(&reference::deconv(&cols, &ks, k))));
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max abs diff {worst:.2e}")))
}

fn softmax_squash_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5F);
    let x = Tensor::uniform([20, 7], -5.0, 5.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sm = tape.softmax_rows(xv)?;
    let sq = tape.squash(xv)?;
    let mut worst = 0.0f64;
    for (r, row) in x.data().chunks(7).enumerate() {
        let span = r * 7..(r + 1) * 7;
        worst = worst
            .max(max_diff(&tape.value(sm).data()[span.clone()], &reference::softmax(row)))
            .max(max_diff(&tape.value(sq).data()[span], &reference::squash(row)));
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max abs diff {worst:.2e}")))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

fn chamfer_oracle(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCD);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_points(&mut rng, 32);
        let y = random_points(&mut rng, 32);
        let got = crate::model::chamfer(&x, &y)?;
        worst = worst.max((got - reference::chamfer(&x, &y)).abs());
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max abs diff {worst:.2e} on 32-point clouds")))
}

fn end_to_end(cfg: &BatteryConfig) -> Outcome {
    let mut worst = (0.0f64, String::new());
    for s in 0..cfg.end_to_end_seeds {
        for e in gradcheck::end_to_end(cfg.seed + s)? {
            let err = e.directional.max(e.coordinate);
            if err > worst.0 {
                worst = (err, format!("{} (seed {})", e.name, cfg.seed + s));
            }
        }
    }
    Ok((
        worst.0 < gradcheck::END_TO_END_TOLERANCE,
        format!(
            "max rel err {:.2e} at {} over {} seeds",
            worst.0, worst.1, cfg.end_to_end_seeds
        ),
    ))
}

/// Equal up to `ulps` units in the last place of `want`.
fn close_ulps(got: f64, want: f64, ulps: f64) -> bool {
    (got - want).abs() <= ulps * f64::EPSILON * want.abs().max(f64::MIN_POSITIVE)
}

fn analytic_squash() -> Outcome {
    let mut tape = Tape::new();
    let mut norms = Vec::new();
    for v in [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]] {
        let x = tape.constant(Tensor::new([3], v.to_vec())?);
        let s = tape.squash(x)?;
        let n = tape.norm_last(s)?;
        norms.push(tape.value(n).item()?);
    }
    let ok = norms[0] == 0.0 && norms[1] == 0.5 && close_ulps(norms[2], 0.9, 1.0);
    Ok((ok, format!("norms 0 -> {}, 1 -> {}, 3 -> {}", norms[0], norms[1], norms[2])))
}

fn analytic_chamfer(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let mut ok = true;
    for _ in 0..100 {
        let x = random_points(&mut rng, 1)[0];
        let y = random_points(&mut rng, 1)[0];
        let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
        ok &= crate::model::chamfer(&[x], &[y])? == 2.0 * d2;
    }
    Ok((ok, "CD({x}, {y}) = 2|x - y|^2 on 100 random pairs".into()))
}

fn analytic_margin() -> Outcome {
    let cases: [(&[f64], usize, f64); 4] = [
        (&[0.9, 0.1, 0.1], 0, 0.0),
        (&[0.0, 0.0, 0.0], 0, 0.81),
        (&[0.5, 0.5], 0, 0.24),
        (&[0.95, 0.05, 0.0, 0.1], 2, 0.81 + 0.5 * 0.85 * 0.85),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (lengths, label, want) in cases {
        let got = crate::model::margin_loss(lengths, label, 0.9, 0.1, 0.5)?;
        ok &= if want == 0.0 { got == 0.0 } else { close_ulps(got, want, 4.0) };
        detail.push(format!("{got}"));
    }
    Ok((ok, format!("values [{}]", detail.join(", "))))
}

/// For every configured strided capsule layer the vote width `c·n` with
/// kernel and stride `n` collapses to `c` columns, both by formula and on
/// the tape; the decoder's two upsampling stages restore `N` columns.
fn width_identity() -> Outcome {
    let mut checked = vec![(32, 4, 8)];
    for cfg in [ModelConfig::paper(2048, 40), ModelConfig::micro(256, 5), ModelConfig::tiny(32, 2)] {
        let (c, n) = cfg.entity_caps;
        checked.push((c * n, n, c));
        let w2 = cfg.conv_widths[1];
        checked.push((w2 * 16, 16, w2));
        let base = cfg.decoder_base_width();
        let s = cfg.upsample_stride;
        if base * s * s != cfg.num_points {
            return Ok((false, format!("decoder widths {base}·{s}·{s} != {}", cfg.num_points)));
        }
    }
    let mut tape = Tape::new();
    for &(width, n, want) in &checked {
        if conv_output_width(width, n, n) != want || width / n != want {
            return Ok((false, format!("width {width}, stride {n}: expected {want}")));
        }
        let x = tape.constant(Tensor::zeros([width, 1]));
        let k = tape.constant(Tensor::zeros([2, 1, n]));
        let y = tape.conv2d_strided(x, k, None, n)?;
        if tape.shape(y) != [want, 2] {
            return Ok((false, format!("tape gives {:?} for width {width}", tape.shape(y))));
        }
    }
    Ok((true, format!("{} layer shapes", checked.len())))
}

/// Per-pair logit increments: dot products of unit vectors stay in
/// `[-1, 1]`, negated squared distances are never positive and drop below
/// `-1` once votes are scaled up.
pub fn logit_range(pairs: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x106);
    let d = 8;
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let votes: Vec<f64> = (0..pairs).flat_map(|_| unit(&mut rng)).collect();
    let parents: Vec<f64> = (0..pairs).flat_map(|_| unit(&mut rng)).collect();

    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new([pairs, 1, 1, d], votes.clone())?);
    let s = tape.constant(Tensor::new([pairs, 1, d], parents)?);
    let dr = tape.vote_dot(v, s)?;
    let dist = tape.vote_distance_sq(v, s)?;
    let er = tape.scale(dist, -1.0)?;
    let v10 = tape.constant(Tensor::new([pairs, 1, 1, d], votes.iter().map(|x| 10.0 * x).collect())?);
    let dist10 = tape.vote_distance_sq(v10, s)?;

    let range = |t: &Tensor| {
        t.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (dr_lo, dr_hi) = range(tape.value(dr));
    let (er_lo, er_hi) = range(tape.value(er));
    let er10_lo = -range(tape.value(dist10)).1;
    let ok = dr_lo >= -1.0 && dr_hi <= 1.0 && er_hi <= 0.0 && er10_lo < -1.0;
    Ok((
        ok,
        format!("DR [{dr_lo:.3}, {dr_hi:.3}], ER [{er_lo:.3}, {er_hi:.3}], ER x10 min {er10_lo:.1}"),
    ))
}

/// Class lengths of the micro model are unchanged by shuffling the points.
pub fn permutation_invariance(permutations: usize, seed: u64) -> Outcome {
    let cfg = ModelConfig::micro(256, 5);
    let state = ModelState::init(&cfg, seed)?;
    let cloud = generate_shape(ShapeKind::Torus, cfg.num_points, seed)?;
    let base = forward(&cloud, &cfg, &state)?.class_lengths;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E);
    let mut worst = 0.0f64;
    for _ in 0..permutations {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = PointCloud::new(order.iter().map(|&i| cloud.points[i]).collect(), cloud.label);
        worst = worst.max(max_diff(&forward(&shuffled, &cfg, &state)?.class_lengths, &base));
    }
    Ok((
        worst <= 1e-9,
        format!("max class-length change {worst:.2e} over {permutations} permutations"),
    ))
}

/// Per-layer `(name, params, multiply-adds)` of `ModelConfig::tiny(64, 4)`,
/// worked out by hand:
///
/// ```text
/// conv1   3·8+8 = 32                   64·3·8 = 1536
/// bn1     2·8 = 16                     64·8 = 512
/// conv2   8·32+32 = 288                64·8·32 = 16384
/// conv3   32·128+128 = 4224            64·32·128 = 262144
/// primary 128·512+512 = 66048          64·128·512 + (2·64·32·16 + 64·32 + 32·16) = 4262400
/// entity  16·16+16 = 272               32·(16·16+16) = 8704
/// parts   8·32+32 = 288                32·(2·8·32 + 3·(2·2·4·8 + 2·4 + 4·8)) = 32512
/// regen   8·512+512 = 4608             128·8·512 + 3·(2·128·32·16 + 128·32 + 32·16) = 931328
/// path_a  32·512+512 = 16896           64·32·512 + 3·(2·64·32·16 + 64·32 + 32·16) = 1252864
/// digit   64·4·8·16 = 32768            32768 + 3·(2·64·4·8 + 64·4 + 4·8) = 45920
/// dense   8·64+64 = 576                8·64 = 512
/// bn      2·64 = 128                   64
/// deconv1 4·16·16+16 = 1040            4·4·16·16 = 4096
/// deconv2 4·32·16+32 = 2080            16·4·32·16 = 32768
/// deconv3 32·16+16 = 528               64·32·16 = 32768
/// deconv4 16·8+8 = 136                 64·16·8 = 8192
/// deconv5 8·3+3 = 27                   64·8·3 = 1536
/// total   129955                       6894240
/// ```
pub const TINY_TALLY: [(&str, usize, usize); 17] = [
    ("encoder.conv1", 32, 1536),
    ("encoder.bn1", 16, 512),
    ("encoder.conv2", 288, 16384),
    ("encoder.conv3", 4224, 262144),
    ("path_b.primary", 66048, 4262400),
    ("path_b.entity", 272, 8704),
    ("path_b.parts", 288, 32512),
    ("path_b.regen", 4608, 931328),
    ("path_a", 16896, 1252864),
    ("digit", 32768, 45920),
    ("decoder.dense", 576, 512),
    ("decoder.bn", 128, 64),
    ("decoder.deconv1", 1040, 4096),
    ("decoder.deconv2", 2080, 32768),
    ("decoder.deconv3", 528, 32768),
    ("decoder.deconv4", 136, 8192),
    ("decoder.deconv5", 27, 1536),
];

pub fn complexity_hand_tally() -> Outcome {
    let cfg = ModelConfig::tiny(64, 4);
    let c = count_params_flops(&cfg);
    for (layer, &(name, params, flops)) in c.layers.iter().zip(&TINY_TALLY) {
        if layer.name != name || layer.params != params || layer.flops != flops {
            return Ok((
                false,
                format!(
                    "{}: counted {} params / {} flops, tally {name} {params} / {flops}",
                    layer.name, layer.params, layer.flops
                ),
            ));
        }
    }
    let (params, flops) = (129955, 6894240);
    let stored = ModelState::init(&cfg, 0)?.num_params();
    let ok = c.layers.len() == TINY_TALLY.len() && c.params == params && c.flops == flops && stored == params;
    Ok((
        ok,
        format!("{} params ({stored} stored), {} multiply-adds", c.params, c.flops),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_rows_sum_to_totals() {
        assert_eq!(TINY_TALLY.iter().map(|r| r.1).sum::<usize>(), 129955);
        assert_eq!(TINY_TALLY.iter().map(|r| r.2).sum::<usize>(), 6894240);
    }

    #[test]
    fn quick_battery_passes() {
        let report = run_default(&BatteryConfig {
            gradcheck_seeds: 1,
            end_to_end_seeds: 1,
            permutations: 2,
            ..BatteryConfig::quick()
        });
        for c in &report.checks {
            assert!(c.passed, "{c}");
        }
    }
}
