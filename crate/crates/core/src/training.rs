//! Mini-batch SGD with momentum and weight decay, plus the two
//! path-restricted regimes: training a fixed-size random subset of blocks
//! per batch, and stochastic depth.
//!
//! Shuffling and block sampling draw from separate streams of the run seed,
//! so a regime that never bypasses a block reproduces plain training bit
//! for bit.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lesion::evaluate;
use crate::numerics::{Mode, Tape};
use crate::resnet::{BnStat, Gate, Network, ResidualNet, RoutingMask};
use crate::rng::stream_rng;

const SHUFFLE_STREAM: u64 = 0;
const ROUTING_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied at every milestone.
    pub lr_decay: f64,
    /// Epochs at which the learning rate is decayed.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// lr 0.1, momentum 0.9, weight decay 1e-4, decay ×0.1 at 50% and 75%
    /// of training.
    pub fn standard(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr: 0.1,
            lr_decay: 0.1,
            milestones: vec![epochs / 2, epochs * 3 / 4],
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::invalid(format!("{key}: {why}")));
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2 (batch norm needs batch statistics)");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be a nonnegative number");
        }
        if !(self.lr_decay > 0.0) || !self.lr_decay.is_finite() {
            return bad("lr_decay", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay", "must be nonnegative");
        }
        if self.milestones.iter().any(|&m| m > self.epochs) {
            return bad("milestones", "must lie within the epoch range");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Misclassification rate of the training batches as they were seen.
    pub train_err: f64,
    pub test_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_test_error(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_err)
    }

    /// `epoch,train_loss,train_err,test_err`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "train_err", "test_err"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                crate::lesion::fmt(e.train_loss),
                crate::lesion::fmt(e.train_err),
                crate::lesion::fmt(e.test_err),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Plain training: every block active on every batch.
pub fn train<N: Network>(net: N, train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<(N, TrainHistory)> {
    run(net, train, test, config, |_| None)
}

/// Each batch trains exactly `m` uniformly chosen blocks; the rest are
/// bypassed in both passes. Path lengths during training are then
/// `Binomial(m, 1/2)`.
pub fn train_effective_paths(
    net: ResidualNet,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    m: usize,
) -> Result<(ResidualNet, TrainHistory)> {
    let n = net.n();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("subset size m={m} must be in 1..={n}")));
    }
    run(net, train, test, config, move |rng| {
        let mut gates = vec![Gate::SkipOnly; n];
        for i in sample(rng, n, m) {
            gates[i] = Gate::Standard;
        }
        Some(RoutingMask::new(gates))
    })
}

/// Each batch keeps block `i` with probability `survival[i]`; bypassed blocks
/// reduce to their skip. All blocks are used at test time.
pub fn train_stochastic_depth(
    net: ResidualNet,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    survival: &[f64],
) -> Result<(ResidualNet, TrainHistory)> {
    let n = net.n();
    if survival.len() != n {
        return Err(Error::invalid(format!("{} survival probabilities for {n} blocks", survival.len())));
    }
    if let Some(p) = survival.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::invalid(format!("survival probability {p} must be in (0, 1]")));
    }
    let survival = survival.to_vec();
    run(net, train, test, config, move |rng| {
        let gates = survival
            .iter()
            .map(|&p| if rng.random::<f64>() < p { Gate::Standard } else { Gate::SkipOnly })
            .collect();
        Some(RoutingMask::new(gates))
    })
}

/// Survival decaying linearly with depth, `p_i = 1 − (i+1)/n · (1 − p_final)`.
pub fn linear_survival(n: usize, p_final: f64) -> Vec<f64> {
    (0..n)
        .map(|i| 1.0 - (i + 1) as f64 / n as f64 * (1.0 - p_final))
        .collect()
}

/// Subset size whose training path lengths (mean `m/2`) sit closest to the
/// middle of `band`; ties go to the smaller `m`.
pub fn choose_subset_size(n: usize, band: (usize, usize)) -> Result<usize> {
    let (lo, hi) = band;
    if lo > hi {
        return Err(Error::invalid(format!("empty band ({lo}, {hi})")));
    }
    if hi > n {
        return Err(Error::invalid(format!("band ({lo}, {hi}) exceeds {n} blocks")));
    }
    // compare |m/2 − mid| as |m − (lo+hi)| to stay in integers
    let target = lo + hi;
    let best = (1..=n).min_by_key(|&m| m.abs_diff(target)).unwrap_or(1);
    Ok(best)
}

/// Replaces every running batch-norm statistic with its average over one
/// in-order, full-depth pass through `data`. Parameters are untouched.
pub fn recalibrate_batch_norm<N: Network>(net: &mut N, data: &Dataset, batch_size: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut sums: Vec<BnStat> = Vec::new();
    let mut rows = 0usize;
    for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
        let (x, _) = data.batch(chunk);
        let mut tape = Tape::new();
        let rec = net.record(&mut tape, &x, None, Mode::Train)?;
        let w = chunk.len() as f64;
        if sums.is_empty() {
            sums = rec.bn_stats.clone();
            for s in &mut sums {
                s.stats.mean.iter_mut().chain(s.stats.var.iter_mut()).for_each(|v| *v *= w);
            }
        } else {
            for (acc, s) in sums.iter_mut().zip(&rec.bn_stats) {
                for (a, b) in acc.stats.mean.iter_mut().zip(&s.stats.mean) {
                    *a += w * b;
                }
                for (a, b) in acc.stats.var.iter_mut().zip(&s.stats.var) {
                    *a += w * b;
                }
            }
        }
        rows += chunk.len();
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    for s in &mut sums {
        s.stats.mean.iter_mut().chain(s.stats.var.iter_mut()).for_each(|v| *v /= rows as f64);
    }
    net.blend_batch_stats(&sums, 0.0);
    Ok(())
}

fn run<N, F>(mut net: N, train: &Dataset, test: &Dataset, config: &TrainConfig, mut routing: F) -> Result<(N, TrainHistory)>
where
    N: Network,
    F: FnMut(&mut rand_chacha::ChaCha8Rng) -> Option<RoutingMask>,
{
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut routing_rng = stream_rng(config.seed, ROUTING_STREAM);
    let mut velocity: Vec<Vec<f64>> = net.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut bypassed = false;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.batch(chunk);
            let mask = routing(&mut routing_rng);
            bypassed |= mask.as_ref().is_some_and(|m| m.gates().contains(&Gate::SkipOnly));
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch },
                other => other,
            };
            let mut tape = Tape::new();
            let rec = net.record(&mut tape, &x, mask.as_ref(), Mode::Train).map_err(diverged)?;
            let loss = tape.softmax_cross_entropy(rec.logits, &y).map_err(diverged)?;
            let loss_value = tape.value(loss).get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let pred = tape.value(rec.logits).argmax_rows();
            wrong += pred.iter().zip(&y).filter(|(p, t)| p != t).count();
            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();

            let grads = tape.backward(loss)?;
            for ((p, v), &var) in net.params_mut().into_iter().zip(&mut velocity).zip(&rec.params) {
                // parameters of bypassed blocks sit this batch out entirely,
                // momentum and weight decay included
                let Some(g) = grads.get(var) else { continue };
                for ((w, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = config.momentum * *vel + gi + config.weight_decay * *w;
                    *w -= lr * *vel;
                }
                if !p.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
            }
            net.fold_batch_stats(&rec.bn_stats);
        }
        if bypassed {
            recalibrate_batch_norm(&mut net, train, config.batch_size)?;
        }
        let test_err = evaluate(&net, test)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_err: wrong as f64 / seen.max(1) as f64,
            test_err,
        });
    }
    Ok((net, history))
}
