use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, Metrics};
use super::optim::{LrSchedule, OptimizerConfig, OptimizerState};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::model::{coords_tensor, input_tensor, loss_vars, LossWeights, Mode, ModelConfig, ModelState, Network};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of the run after which the learning rate drops tenfold.
    pub milestones: Vec<f64>,
    pub rectify: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            milestones: vec![0.5, 0.8],
            rectify: true,
            seed: 0,
        }
    }
}

/// One row of the training log. `loss`, `margin`, `cd` and `accuracy` are
/// means over the epoch's training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub cd: f64,
    pub accuracy: f64,
    pub val: Option<Metrics>,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,margin,cd,accuracy,val_cd,val_accuracy,lr";

    pub fn csv_row(&self) -> String {
        let (vcd, vacc) = match &self.val {
            Some(m) => (m.cd_mean.to_string(), m.accuracy.to_string()),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{vcd},{vacc},{}",
            self.epoch, self.loss, self.margin, self.cd, self.accuracy, self.lr
        )
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation Chamfer distance seen (last epoch without a
    /// validation set).
    pub best: ModelState,
    pub best_epoch: usize,
    pub last: ModelState,
    pub log: Vec<EpochLog>,
}

/// Reported after every epoch; `improved` carries the new best state.
pub struct EpochEvent<'a> {
    pub log: &'a EpochLog,
    pub improved: Option<&'a ModelState>,
}

/// Batches of `order`; a trailing batch of one sample joins the previous
/// batch so batch statistics are never taken over a single cloud.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub margin: f64,
    pub cd: f64,
    pub correct: usize,
}

/// Forward, backward and update on one batch, with true-label masking.
pub fn train_step(
    config: &ModelConfig,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    batch: &[PointCloud],
) -> Result<StepStats> {
    let labels: Vec<usize> = batch.iter().map(|c| c.label).collect();
    let mut tape = Tape::new();
    let (grads, bn, stats) = {
        let mut net = Network::new(&mut tape, config, state, Mode::Train, true);
        let x = tape.constant(input_tensor(batch, config)?);
        let target = if config.input_channels == 3 {
            x
        } else {
            tape.constant(coords_tensor(batch)?)
        };
        let out = net.forward(&mut tape, x, Some(&labels))?;
        let loss = loss_vars(&mut tape, out.encoded.lengths, &labels, target, out.reconstruction, &LossWeights::from(config))?;
        tape.backward(loss.total)?;
        let lengths = tape.value(out.encoded.lengths);
        let a = config.num_classes;
        let correct = lengths
            .data()
            .chunks(a)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let stats = StepStats {
            loss: tape.value(loss.total).item()?,
            margin: tape.value(loss.margin).item()?,
            cd: tape.value(loss.chamfer).item()?,
            correct,
        };
        (net.vars().grads(&tape), net.take_bn_stats(), stats)
    };
    opt.step(state.params_mut(), &grads)?;
    state.update_running_stats(&bn, config.bn_momentum)?;
    Ok(stats)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn optimizer_for(tcfg: &TrainConfig, steps_per_epoch: usize) -> Result<OptimizerState> {
    let total = tcfg.epochs * steps_per_epoch;
    let milestones = tcfg
        .milestones
        .iter()
        .map(|f| ((f * total as f64).round() as usize).max(1) + 1)
        .collect();
    OptimizerState::new(OptimizerConfig {
        schedule: LrSchedule {
            base: tcfg.lr,
            milestones,
            factor: 0.1,
        },
        rectify: tcfg.rectify,
        ..Default::default()
    })
}

/// Trains from `initial` (or a fresh seeded state). The best state is
/// chosen by validation Chamfer distance.
pub fn train_with(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    train_set: &[PointCloud],
    val_set: &[PointCloud],
    initial: Option<ModelState>,
    mut observer: impl FnMut(EpochEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if tcfg.epochs == 0 || tcfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if let Some(bad) = train_set.iter().chain(val_set).find(|c| c.label >= config.num_classes) {
        return Err(Error::Input(format!(
            "label {} out of range for {} classes",
            bad.label, config.num_classes
        )));
    }
    let mut state = match initial {
        Some(s) => s,
        None => ModelState::init(config, tcfg.seed)?,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = batches(&order, tcfg.batch_size).len();
    let mut opt = optimizer_for(tcfg, steps_per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5EED);

    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut best = (f64::INFINITY, state.clone(), 0);
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.current_lr();
        let (mut loss, mut margin, mut cd, mut correct) = (0.0, 0.0, 0.0, 0);
        for (step, idx) in batches(&order, tcfg.batch_size).into_iter().enumerate() {
            let batch: Vec<PointCloud> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let s = train_step(config, &mut state, &mut opt, &batch).map_err(|e| match e {
                Error::NonFinite { .. } | Error::Contract(_) => Error::Diverged { epoch, step: step + 1 },
                other => other,
            })?;
            if !s.loss.is_finite() {
                return Err(Error::Diverged { epoch, step: step + 1 });
            }
            let w = idx.len() as f64;
            loss += s.loss * w;
            margin += s.margin * w;
            cd += s.cd * w;
            correct += s.correct;
        }
        let n = train_set.len() as f64;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(config, &state, val_set)?)
        };
        let entry = EpochLog {
            epoch,
            loss: loss / n,
            margin: margin / n,
            cd: cd / n,
            accuracy: correct as f64 / n,
            val,
            lr,
        };
        let score = entry.val.as_ref().map(|m| m.cd_mean).unwrap_or(f64::NEG_INFINITY);
        let improved = score < best.0 || (entry.val.is_none());
        if improved {
            best = (score, state.clone(), epoch);
        }
        observer(EpochEvent {
            log: &entry,
            improved: improved.then_some(&best.1),
        });
        log.push(entry);
    }
    Ok(TrainOutcome {
        best: best.1,
        best_epoch: best.2,
        last: state,
        log,
    })
}

pub fn train(config: &ModelConfig, tcfg: &TrainConfig, train_set: &[PointCloud], val_set: &[PointCloud]) -> Result<TrainOutcome> {
    train_with(config, tcfg, train_set, val_set, None, |_| {})
}

/// Deterministic stratified split: every `k`-th sample of each class (by
/// position) goes to validation, where `k = round(1 / fraction)`.
pub fn holdout(clouds: Vec<PointCloud>, fraction: f64) -> (Vec<PointCloud>, Vec<PointCloud>) {
    if fraction <= 0.0 {
        return (clouds, Vec::new());
    }
    let k = ((1.0 / fraction).round() as usize).max(2);
    let mut seen = std::collections::HashMap::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in clouds {
        let count = seen.entry(c.label).or_insert(0usize);
        *count += 1;
        if *count % k == 0 {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trailing_sample_is_merged() {
        let order: Vec<usize> = (0..33).collect();
        let b = batches(&order, 16);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![16, 17]);
        let order: Vec<usize> = (0..34).collect();
        assert_eq!(batches(&order, 16).len(), 3);
        assert_eq!(batches(&[0], 16), vec![&[0][..]]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn milestones_follow_fractions() {
        let t = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let opt = optimizer_for(&t, 4).unwrap();
        assert_eq!(opt.config.schedule.milestones, vec![21, 33]);
    }
}
