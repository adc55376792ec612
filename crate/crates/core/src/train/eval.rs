use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::trainer::argmax;
use crate::data::{add_outliers, perturb_gaussian, sample_seed, select_few_labels, PointCloud, Split};
use crate::error::{Error, Result};
use crate::model::{chamfer, decode, encode, infer, tensor_points, ModelConfig, ModelState};

/// Evaluation summary. `cd_mean` is the raw mean Chamfer distance; use
/// [`Metrics::cd_x1e3`] for the conventional reporting scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub cd_mean: f64,
    pub seg_accuracy: Option<f64>,
    pub seg_iou: Option<f64>,
}

impl Metrics {
    pub fn cd_x1e3(&self) -> f64 {
        self.cd_mean * 1e3
    }
}

/// Accuracy from the longest class capsule and mean Chamfer distance of the
/// reconstructions to the inputs.
pub fn evaluate(config: &ModelConfig, state: &ModelState, clouds: &[PointCloud]) -> Result<Metrics> {
    evaluate_against(config, state, clouds, clouds)
}

/// Like [`evaluate`], but reconstructions of `inputs[i]` are scored
/// against `targets[i]` (the clean clouds in robustness sweeps).
pub fn evaluate_against(
    config: &ModelConfig,
    state: &ModelState,
    inputs: &[PointCloud],
    targets: &[PointCloud],
) -> Result<Metrics> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Input("evaluation needs equally many non-empty inputs and targets".into()));
    }
    let outputs = infer(inputs, config, state)?;
    let cds: Vec<f64> = outputs
        .par_iter()
        .zip(targets)
        .map(|(o, t)| chamfer(&t.points, &tensor_points(&o.reconstruction)))
        .collect::<Result<_>>()?;
    let correct = outputs.iter().zip(inputs).filter(|(o, c)| o.predicted == c.label).count();
    Ok(Metrics {
        accuracy: correct as f64 / inputs.len() as f64,
        cd_mean: cds.iter().sum::<f64>() / cds.len() as f64,
        seg_accuracy: None,
        seg_iou: None,
    })
}

/// Reference reconstruction error: each test cloud is compared with the
/// medoid of its own class among the training clouds. Medoid candidates are
/// the first `candidates` training clouds of each class.
pub fn mean_shape_baseline(train: &[PointCloud], test: &[PointCloud], candidates: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&PointCloud>> = BTreeMap::new();
    for c in train {
        by_class.entry(c.label).or_default().push(c);
    }
    let mut medoids = HashMap::new();
    for (&label, members) in &by_class {
        let scores: Vec<f64> = members
            .par_iter()
            .take(candidates.max(1))
            .map(|cand| {
                members
                    .iter()
                    .map(|m| chamfer(&cand.points, &m.points))
                    .sum::<Result<f64>>()
            })
            .collect::<Result<_>>()?;
        medoids.insert(label, members[argmin(&scores)]);
    }
    let cds: Vec<f64> = test
        .par_iter()
        .map(|c| {
            let m = medoids
                .get(&c.label)
                .ok_or_else(|| Error::Input(format!("class {} absent from the training set", c.label)))?;
            chamfer(&c.points, &m.points)
        })
        .collect::<Result<_>>()?;
    Ok(cds.iter().sum::<f64>() / cds.len() as f64)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Per point, the path-A parent capsule with the largest final routing
/// logit (ties to the lowest index).
pub fn part_assign(config: &ModelConfig, state: &ModelState, cloud: &PointCloud) -> Result<Vec<usize>> {
    let e = encode(cloud, config, state)?;
    Ok(assignments(&e.part_logits))
}

fn assignments(logits: &crate::Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap();
    logits.data().chunks(c).map(argmax).collect()
}

/// Segmentation quality from capsule assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// Fraction of labelled test points given the right part.
    pub accuracy: f64,
    /// Mean over test shapes of the mean IoU over the shape's ground-truth
    /// parts.
    pub iou: f64,
    pub labeled_clouds: usize,
}

/// Fits a capsule-to-part map on a class-balanced `fraction` of `train`
/// and scores it on `test`.
///
/// The map is fitted per class (the class is known, as in the usual
/// part-segmentation protocol): each capsule takes the majority part of the
/// labelled points routed to it. A capsule that saw no labelled points
/// takes the class's most frequent part, or the overall most frequent part
/// if the class had no labelled points at all.
pub fn segment_eval(
    config: &ModelConfig,
    state: &ModelState,
    train: &[PointCloud],
    test: &[PointCloud],
    fraction: f64,
    seed: u64,
) -> Result<SegMetrics> {
    let labeled = select_few_labels(train, fraction, seed)?;
    let fit: Vec<&PointCloud> = labeled.iter().map(|&i| &train[i]).collect();
    let fit_assign: Vec<Vec<usize>> = fit
        .par_iter()
        .map(|c| part_assign(config, state, c))
        .collect::<Result<_>>()?;

    let mut votes: HashMap<(usize, usize), BTreeMap<usize, usize>> = HashMap::new();
    let mut class_freq: HashMap<usize, BTreeMap<usize, usize>> = HashMap::new();
    let mut global: BTreeMap<usize, usize> = BTreeMap::new();
    for (cloud, assign) in fit.iter().zip(&fit_assign) {
        let parts = cloud
            .part_labels
            .as_ref()
            .ok_or_else(|| Error::Input("segmentation needs part labels".into()))?;
        for (&cap, part) in assign.iter().zip(parts) {
            if let Some(p) = *part {
                *votes.entry((cloud.label, cap)).or_default().entry(p).or_default() += 1;
                *class_freq.entry(cloud.label).or_default().entry(p).or_default() += 1;
                *global.entry(p).or_default() += 1;
            }
        }
    }
    let majority = |m: &BTreeMap<usize, usize>| {
        m.iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&p, _)| p)
    };
    let fallback_global = majority(&global).unwrap_or(0);
    let predict = |label: usize, cap: usize| {
        votes
            .get(&(label, cap))
            .and_then(majority)
            .or_else(|| class_freq.get(&label).and_then(majority))
            .unwrap_or(fallback_global)
    };

    let per_shape: Vec<(usize, usize, Option<f64>)> = test
        .par_iter()
        .map(|cloud| -> Result<_> {
            let parts = cloud
                .part_labels
                .as_ref()
                .ok_or_else(|| Error::Input("segmentation needs part labels".into()))?;
            let assign = part_assign(config, state, cloud)?;
            let pred: Vec<usize> = assign.iter().map(|&cap| predict(cloud.label, cap)).collect();
            Ok(shape_scores(&pred, parts))
        })
        .collect::<Result<_>>()?;
    let correct: usize = per_shape.iter().map(|s| s.0).sum();
    let total: usize = per_shape.iter().map(|s| s.1).sum();
    let ious: Vec<f64> = per_shape.iter().filter_map(|s| s.2).collect();
    if total == 0 || ious.is_empty() {
        return Err(Error::Input("test set has no labelled points".into()));
    }
    Ok(SegMetrics {
        accuracy: correct as f64 / total as f64,
        iou: ious.iter().sum::<f64>() / ious.len() as f64,
        labeled_clouds: labeled.len(),
    })
}

/// `(correct, labelled points, mean IoU over ground-truth parts)` of one
/// shape. Points with unknown parts are ignored.
pub fn shape_scores(pred: &[usize], truth: &[Option<usize>]) -> (usize, usize, Option<f64>) {
    let mut correct = 0;
    let mut total = 0;
    let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, t) in pred.iter().zip(truth) {
        let Some(t) = *t else { continue };
        total += 1;
        *gt_count.entry(t).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if p == t {
            correct += 1;
            *inter.entry(t).or_default() += 1;
        }
    }
    if gt_count.is_empty() {
        return (0, 0, None);
    }
    let iou = gt_count
        .iter()
        .map(|(part, &g)| {
            let i = inter.get(part).copied().unwrap_or(0);
            let u = g + pred_count.get(part).copied().unwrap_or(0) - i;
            i as f64 / u as f64
        })
        .sum::<f64>()
        / gt_count.len() as f64;
    (correct, total, Some(iou))
}

/// Reconstructions with entry `dim` of the masked latent set to each of
/// `values`. The latent comes from the longest class capsule.
pub fn latent_perturb(
    config: &ModelConfig,
    state: &ModelState,
    cloud: &PointCloud,
    dim: usize,
    values: &[f64],
) -> Result<Vec<PointCloud>> {
    if dim >= config.digit_dim {
        return Err(Error::Input(format!(
            "latent dimension {dim} out of range for {} dims",
            config.digit_dim
        )));
    }
    let e = encode(cloud, config, state)?;
    let row = argmax(&e.class_lengths);
    let b = config.digit_dim;
    let base: Vec<f64> = e.digit.data()[row * b..(row + 1) * b].to_vec();
    values
        .iter()
        .map(|&v| {
            let mut z = base.clone();
            z[dim] = v;
            let recon = decode(&z, &e.skip, config, state)?;
            Ok(PointCloud::new(tensor_points(&recon), row))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Gaussian jitter of every coordinate; levels are standard deviations.
    Perturb,
    /// Points replaced by `N(0, outlier_sigma)` draws; levels are counts.
    Outliers,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Perturb => "perturb",
            NoiseMode::Outliers => "outliers",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perturb" => Ok(NoiseMode::Perturb),
            "outliers" => Ok(NoiseMode::Outliers),
            _ => Err(Error::Config(format!("unknown noise mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweep {
    pub mode: NoiseMode,
    pub levels: Vec<f64>,
    /// One noise draw per seed; rows report mean and standard deviation.
    pub seeds: Vec<u64>,
    pub outlier_sigma: f64,
}

impl NoiseSweep {
    /// Gaussian standard deviations 0, 0.05, ..., 0.2.
    pub fn sigma_grid(seeds: Vec<u64>) -> Self {
        NoiseSweep {
            mode: NoiseMode::Perturb,
            levels: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            seeds,
            outlier_sigma: 0.2,
        }
    }

    /// Outlier counts 0, 100, 200, 400.
    pub fn outlier_grid(seeds: Vec<u64>) -> Self {
        NoiseSweep {
            mode: NoiseMode::Outliers,
            levels: vec![0.0, 100.0, 200.0, 400.0],
            seeds,
            outlier_sigma: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub level: f64,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub cd_mean: f64,
    pub cd_std: f64,
}

fn corrupt(sweep: &NoiseSweep, cloud: &PointCloud, level: f64, seed: u64) -> Result<PointCloud> {
    match sweep.mode {
        NoiseMode::Perturb => perturb_gaussian(cloud, level, seed),
        NoiseMode::Outliers => {
            if level < 0.0 || level.fract() != 0.0 {
                return Err(Error::Input(format!("outlier count must be a whole number, got {level}")));
            }
            add_outliers(cloud, level as usize, sweep.outlier_sigma, seed)
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy and Chamfer distance (against the clean clouds) at every noise
/// level. Each sample's noise seed depends only on the sweep seed and the
/// sample index.
pub fn noise_sweep(config: &ModelConfig, state: &ModelState, clouds: &[PointCloud], sweep: &NoiseSweep) -> Result<Vec<SweepRow>> {
    if sweep.seeds.is_empty() {
        return Err(Error::Config("noise sweep needs at least one seed".into()));
    }
    sweep
        .levels
        .iter()
        .map(|&level| {
            let mut accs = Vec::new();
            let mut cds = Vec::new();
            for &seed in &sweep.seeds {
                let noisy: Vec<PointCloud> = clouds
                    .iter()
                    .enumerate()
                    .map(|(i, c)| corrupt(sweep, c, level, sample_seed(seed, Split::Test, c.label, i)))
                    .collect::<Result<_>>()?;
                let m = evaluate_against(config, state, &noisy, clouds)?;
                accs.push(m.accuracy);
                cds.push(m.cd_mean);
            }
            let (accuracy, accuracy_std) = mean_std(&accs);
            let (cd_mean, cd_std) = mean_std(&cds);
            Ok(SweepRow {
                level,
                accuracy,
                accuracy_std,
                cd_mean,
                cd_std,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "mode,level,accuracy,accuracy_std,cd,cd_std,cd_x1e3";

pub fn sweep_to_csv(mode: NoiseMode, rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{mode},{},{},{},{},{},{}\n",
            r.level,
            r.accuracy,
            r.accuracy_std,
            r.cd_mean,
            r.cd_std,
            r.cd_mean * 1e3
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = vec![Some(0), Some(0), Some(1), None];
        let (c, t, iou) = shape_scores(&[0, 0, 1, 5], &truth);
        assert_eq!((c, t), (3, 3));
        assert_eq!(iou, Some(1.0));
    }

    #[test]
    fn iou_hand_case() {
        // part 0: inter 1, union 3; part 1: inter 1, union 2
        let truth = vec![Some(0), Some(0), Some(1)];
        let (_, _, iou) = shape_scores(&[0, 1, 1], &truth);
        assert!((iou.unwrap() - (0.5 + 0.5) / 2.0).abs() < 1e-15);
        let (_, _, iou) = shape_scores(&[1, 1, 1], &truth);
        assert!((iou.unwrap() - (0.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn relabeling_parts_keeps_iou() {
        let truth = vec![Some(0), Some(0), Some(1), Some(2)];
        let pred = [0, 1, 1, 2];
        let swap = |p: usize| [2, 0, 1][p];
        let truth2: Vec<_> = truth.iter().map(|t| t.map(swap)).collect();
        let pred2: Vec<_> = pred.iter().map(|&p| swap(p)).collect();
        assert_eq!(shape_scores(&pred, &truth).2, shape_scores(&pred2, &truth2).2);
    }

    #[test]
    fn csv_has_one_row_per_level() {
        let rows = vec![
            SweepRow {
                level: 0.0,
                accuracy: 1.0,
                accuracy_std: 0.0,
                cd_mean: 0.01,
                cd_std: 0.0,
            };
            4
        ];
        let csv = sweep_to_csv(NoiseMode::Outliers, &rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 7));
    }
}
