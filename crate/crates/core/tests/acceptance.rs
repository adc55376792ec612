//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion does.
//!
//! Runs sequentially with its own `main` so that the runtime limits are
//! measured without other tests competing for the CPU.

use std::time::{Duration, Instant};

use pointcaps::data::{synthesize, PointCloud, Split, SyntheticSpec};
use pointcaps::model::{count_params_flops, ModelConfig, ModelState, RoutingMode};
use pointcaps::train::{
    evaluate, holdout, mean_shape_baseline, noise_sweep, sweep_to_csv, train_with, NoiseSweep, TrainConfig,
    TrainOutcome, SWEEP_CSV_HEADER,
};
use pointcaps::verify::{run_default, BatteryConfig, CheckResult, Report};

/// Epochs of the full PointCaps and skip-off arms.
const DESK_EPOCHS: usize = 200;
/// Epochs of the All-DR and All-ER arms, which only have to stay finite.
const ABLATION_EPOCHS: usize = 15;
const DESK_LR: f64 = 1e-2;

struct Line {
    passed: bool,
    text: String,
}

fn line(number: usize, title: &str, passed: bool, detail: impl Into<String>) -> Line {
    let l = Line {
        passed,
        text: format!(
            "{} {number}. {title}: {}",
            if passed { "PASS" } else { "FAIL" },
            detail.into()
        ),
    };
    println!("{}", l.text);
    l
}

fn group<'a>(report: &'a Report, prefixes: &[&str]) -> Vec<&'a CheckResult> {
    report
        .checks
        .iter()
        .filter(|c| prefixes.iter().any(|p| c.name.starts_with(p)))
        .collect()
}

fn summarize(checks: &[&CheckResult]) -> (bool, Duration, String) {
    let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
    let elapsed = checks.iter().map(|c| c.elapsed).sum();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        format!("failed {}", failed.join(", "))
    };
    (passed, elapsed, detail)
}

struct Arm {
    name: &'static str,
    outcome: TrainOutcome,
    accuracy: f64,
    cd: f64,
}

impl Arm {
    fn diverged(&self) -> bool {
        let losses: Vec<f64> = self.outcome.log.iter().map(|l| l.loss).collect();
        losses.iter().any(|l| !l.is_finite()) || losses.last() >= losses.first() || !self.cd.is_finite()
    }
}

fn train_arm(
    name: &'static str,
    cfg: &ModelConfig,
    epochs: usize,
    train: &[PointCloud],
    val: &[PointCloud],
    test: &[PointCloud],
) -> Arm {
    let tcfg = TrainConfig {
        epochs,
        batch_size: 16,
        lr: DESK_LR,
        milestones: vec![0.7, 0.9],
        rectify: true,
        seed: 0,
    };
    let started = Instant::now();
    let outcome = train_with(cfg, &tcfg, train, val, None, |_| {}).expect("training runs");
    let m = evaluate(cfg, &outcome.best, test).expect("evaluation runs");
    eprintln!(
        "  {name}: {epochs} epochs in {:.0}s, accuracy {:.3}, cd {:.5}",
        started.elapsed().as_secs_f64(),
        m.accuracy,
        m.cd_mean
    );
    Arm {
        name,
        outcome,
        accuracy: m.accuracy,
        cd: m.cd_mean,
    }
}

fn desk_learning() -> (Line, ModelConfig, ModelState, Vec<PointCloud>) {
    let started = Instant::now();
    let spec = SyntheticSpec::new(256, 100, 20, 1);
    let train_all = synthesize(&spec, Split::Train).unwrap();
    let test = synthesize(&spec, Split::Test).unwrap();
    let baseline = mean_shape_baseline(&train_all, &test, 20).unwrap();
    let (train, val) = holdout(train_all, 0.1);

    let cfg = ModelConfig::micro(256, 5);
    let with_mode = |mode| ModelConfig {
        routing_mode: mode,
        ..cfg.clone()
    };
    let no_skip = ModelConfig {
        skip_connection: false,
        ..cfg.clone()
    };
    let main = train_arm("pointcaps", &cfg, DESK_EPOCHS, &train, &val, &test);
    let skip_off = train_arm("no_skip", &no_skip, DESK_EPOCHS, &train, &val, &test);
    let all_dr = train_arm("all_dr", &with_mode(RoutingMode::AllDr), ABLATION_EPOCHS, &train, &val, &test);
    let all_er = train_arm("all_er", &with_mode(RoutingMode::AllEr), ABLATION_EPOCHS, &train, &val, &test);
    let elapsed = started.elapsed();

    let diverged: Vec<&str> = [&main, &skip_off, &all_dr, &all_er]
        .iter()
        .filter(|a| a.diverged())
        .map(|a| a.name)
        .collect();
    let passed = main.accuracy >= 0.9
        && main.cd < baseline
        && diverged.is_empty()
        && skip_off.cd > main.cd
        && elapsed < Duration::from_secs(30 * 60);
    let detail = format!(
        "accuracy {:.3} (>= 0.900), cd {:.5} vs baseline {baseline:.5}, no-skip cd {:.5}, \
         all_dr acc {:.3}, all_er acc {:.3}, diverged [{}], {:.0}s",
        main.accuracy,
        main.cd,
        skip_off.cd,
        all_dr.accuracy,
        all_er.accuracy,
        diverged.join(","),
        elapsed.as_secs_f64()
    );
    let best = main.outcome.best;
    (line(5, "desk-scale learning", passed, detail), cfg, best, test)
}

fn csv_well_formed(csv: &str, rows: usize) -> bool {
    let lines: Vec<&str> = csv.lines().collect();
    lines.first() == Some(&SWEEP_CSV_HEADER)
        && lines.len() == rows + 1
        && lines[1..].iter().all(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            cols.len() == 7 && cols[1..].iter().all(|c| c.parse::<f64>().is_ok_and(f64::is_finite))
        })
}

fn noise_harness(cfg: &ModelConfig, state: &ModelState, test: &[PointCloud]) -> Line {
    let sigma = NoiseSweep::sigma_grid(vec![0, 1]);
    let rows = noise_sweep(cfg, state, test, &sigma).unwrap();
    let plain = evaluate(cfg, state, test).unwrap();
    let zero = &rows[0];
    let zero_exact = zero.level == 0.0
        && zero.accuracy == plain.accuracy
        && zero.cd_mean == plain.cd_mean
        && zero.accuracy_std == 0.0
        && zero.cd_std == 0.0;
    let sigma_ok = csv_well_formed(&sweep_to_csv(sigma.mode, &rows), sigma.levels.len())
        && sigma.levels.first() == Some(&0.0)
        && sigma.levels.last() == Some(&0.2);

    // 400 outliers need clouds of at least 400 points, so the count grid
    // runs on 2048-point clouds.
    let big = ModelConfig::micro(2048, 5);
    let big_state = ModelState::init(&big, 0).unwrap();
    let clouds = synthesize(&SyntheticSpec::new(2048, 0, 2, 3), Split::Test).unwrap();
    let outliers = NoiseSweep::outlier_grid(vec![0]);
    let out_rows = noise_sweep(&big, &big_state, &clouds, &outliers).unwrap();
    let out_plain = evaluate(&big, &big_state, &clouds).unwrap();
    let outliers_ok = csv_well_formed(&sweep_to_csv(outliers.mode, &out_rows), 4)
        && outliers.levels == [0.0, 100.0, 200.0, 400.0]
        && out_rows[0].cd_mean == out_plain.cd_mean
        && out_rows[0].accuracy == out_plain.accuracy;

    line(
        7,
        "noise-sweep harness",
        zero_exact && sigma_ok && outliers_ok,
        format!(
            "sigma rows {}, outlier rows {}, sigma=0 cd {} vs plain {}",
            rows.len(),
            out_rows.len(),
            zero.cd_mean,
            plain.cd_mean
        ),
    )
}

fn main() {
    let mut lines = Vec::new();
    let report = run_default(&BatteryConfig::full());

    let (ok, t, detail) = summarize(&group(&report, &["routing_oracle_"]));
    lines.push(line(
        1,
        "routing oracle equivalence",
        ok && t < Duration::from_secs(10),
        format!("{detail}, 200 cases per router, {:.2}s (< 10s)", t.as_secs_f64()),
    ));

    let (ok, t, detail) = summarize(&group(&report, &["gradcheck_"]));
    lines.push(line(
        2,
        "gradient correctness",
        ok && t < Duration::from_secs(300),
        format!("{detail}, 100 seeds, {:.1}s (< 300s)", t.as_secs_f64()),
    ));

    let (ok, _, detail) = summarize(&group(&report, &["analytic_", "width_identity"]));
    lines.push(line(3, "analytic values", ok, detail));

    let (ok, _, _) = summarize(&group(&report, &["logit_range"]));
    let detail = report.get("logit_range").map_or(String::new(), |c| c.detail.clone());
    lines.push(line(4, "logit range", ok, detail));

    let (desk, cfg, state, test) = desk_learning();
    lines.push(desk);

    let (ok, _, _) = summarize(&group(&report, &["permutation_invariance"]));
    let detail = report.get("permutation_invariance").map_or(String::new(), |c| c.detail.clone());
    lines.push(line(6, "permutation invariance", ok, detail));

    lines.push(noise_harness(&cfg, &state, &test));

    let (ok, _, _) = summarize(&group(&report, &["complexity_hand_tally"]));
    let paper = count_params_flops(&ModelConfig::paper(2048, 40));
    lines.push(line(
        8,
        "parameter/FLOP counter",
        ok,
        format!(
            "tiny tally exact; default config {:.2}M params / {:.0}M multiply-adds (reported 3.52M / 615M)",
            paper.params as f64 / 1e6,
            paper.flops as f64 / 1e6
        ),
    ));

    let others: Vec<&CheckResult> = group(&report, &["layer_oracle_", "kernel_oracle_"]);
    let (ok, _, detail) = summarize(&others);
    println!("{} supporting kernel and layer oracles: {detail}", if ok { "PASS" } else { "FAIL" });

    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 || !ok {
        std::process::exit(1);
    }
}
