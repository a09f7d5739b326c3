//! Test-time lesion studies: deleting single blocks, deleting several at
//! random, and reordering blocks. No retraining happens between lesions.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::paths::kendall_tau;
use crate::resnet::{Network, ResidualNet};
use crate::rng::{stream_id, stream_rng};

const EVAL_CHUNK: usize = 256;

/// Fraction of misclassified examples, eval-mode batch norm, argmax with
/// ties broken towards the lowest class.
pub fn evaluate<N: Network>(net: &N, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = net.logits(&x)?.argmax_rows();
        wrong += pred.iter().zip(&y).filter(|(p, t)| p != t).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Single,
    Multi,
    Reorder,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LesionRow {
    /// Blocks (or layers) removed; empty for an intact net.
    pub deleted: Vec<usize>,
    /// Block order (`perm[j]` = original block now at position `j`).
    pub permutation: Option<Vec<usize>>,
    pub num_swaps: Option<usize>,
    pub tau: Option<f64>,
    pub error: f64,
    pub trial: usize,
    /// Stream of the experiment seed this row was drawn from.
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LesionReport {
    pub kind: LesionKind,
    pub seed: u64,
    pub baseline_error: f64,
    pub rows: Vec<LesionRow>,
}

impl LesionReport {
    /// CSV in the schema of the experiment kind:
    /// `block_index,error` (the intact baseline is `block_index` -1),
    /// `k_deleted,trial,error`, or `num_swaps,trial,tau,error`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match self.kind {
            LesionKind::Single => {
                w.write_record(["block_index", "error"])?;
                w.write_record(["-1".to_string(), fmt(self.baseline_error)])?;
                for r in &self.rows {
                    w.write_record([r.deleted[0].to_string(), fmt(r.error)])?;
                }
            }
            LesionKind::Multi => {
                w.write_record(["k_deleted", "trial", "error"])?;
                for r in &self.rows {
                    w.write_record([r.deleted.len().to_string(), r.trial.to_string(), fmt(r.error)])?;
                }
            }
            LesionKind::Reorder => {
                w.write_record(["num_swaps", "trial", "tau", "error"])?;
                for r in &self.rows {
                    w.write_record([
                        r.num_swaps.unwrap_or(0).to_string(),
                        r.trial.to_string(),
                        fmt(r.tau.unwrap_or(1.0)),
                        fmt(r.error),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Errors of the rows with `key(row) == value`, in row order.
    pub fn errors_where(&self, key: impl Fn(&LesionRow) -> usize, value: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| key(r) == value).map(|r| r.error).collect()
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Error after deleting each unit in turn, plus the intact baseline.
pub fn lesion_single<N: Network>(net: &N, data: &Dataset) -> Result<LesionReport> {
    let baseline_error = evaluate(net, data)?;
    let rows = (0..net.units())
        .into_par_iter()
        .map(|i| {
            let error = evaluate(&net.delete_unit(i)?, data)?;
            Ok(LesionRow {
                deleted: vec![i],
                permutation: None,
                num_swaps: None,
                tau: None,
                error,
                trial: 0,
                stream: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LesionReport {
        kind: LesionKind::Single,
        seed: 0,
        baseline_error,
        rows,
    })
}

/// For each `k`, `trials` nets with `k` distinct standard blocks deleted
/// uniformly at random. Transition blocks are never deleted here.
pub fn lesion_multi(net: &ResidualNet, data: &Dataset, ks: &[usize], trials: usize, seed: u64) -> Result<LesionReport> {
    let eligible = net.standard_indices();
    if let Some(&k) = ks.iter().find(|&&k| k >= eligible.len()) {
        return Err(Error::invalid(format!(
            "cannot delete {k} blocks: only {} standard blocks are available",
            eligible.len()
        )));
    }
    let baseline_error = evaluate(net, data)?;
    let jobs: Vec<(usize, usize)> = ks.iter().flat_map(|&k| (0..trials).map(move |t| (k, t))).collect();
    let rows = jobs
        .into_par_iter()
        .map(|(k, trial)| {
            let stream = stream_id(k, trial);
            let mut rng = stream_rng(seed, stream);
            let mut deleted: Vec<usize> = sample(&mut rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
            deleted.sort_unstable();
            let error = if k == 0 {
                baseline_error
            } else {
                evaluate(&net.delete_blocks(&deleted)?, data)?
            };
            Ok(LesionRow {
                deleted,
                permutation: None,
                num_swaps: None,
                tau: None,
                error,
                trial,
                stream,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LesionReport {
        kind: LesionKind::Multi,
        seed,
        baseline_error,
        rows,
    })
}

/// Groups of mutually swap-compatible positions: same stage, identity skip.
fn swap_groups(net: &ResidualNet) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); net.stage_count()];
    for (i, b) in net.blocks.iter().enumerate() {
        if !b.is_transition() {
            groups[b.stage].push(i);
        }
    }
    groups.retain(|g| g.len() >= 2);
    groups
}

/// Applies `swaps` random transpositions of distinct compatible blocks to
/// the identity order.
pub fn random_swaps<R: Rng + ?Sized>(net: &ResidualNet, swaps: usize, rng: &mut R) -> Result<Vec<usize>> {
    let groups = swap_groups(net);
    let mut perm: Vec<usize> = (0..net.n()).collect();
    if swaps == 0 {
        return Ok(perm);
    }
    let total: usize = groups.iter().map(Vec::len).sum();
    if total < 2 {
        return Err(Error::Incompatible("fewer than two swap-compatible blocks".into()));
    }
    for _ in 0..swaps {
        // choose the group in proportion to its size, then a pair inside it
        let mut pick = rng.random_range(0..total);
        let group = groups
            .iter()
            .find(|g| {
                if pick < g.len() {
                    true
                } else {
                    pick -= g.len();
                    false
                }
            })
            .expect("pick < total");
        let pair = sample(rng, group.len(), 2);
        perm.swap(group[pair.index(0)], group[pair.index(1)]);
    }
    Ok(perm)
}

/// For each swap count, `trials` random reorderings and their error and
/// Kendall tau. Nets with several stages need `stage_local`, which keeps
/// every swap inside one stage; transition blocks never move.
pub fn reorder_experiment(
    net: &ResidualNet,
    data: &Dataset,
    swap_counts: &[usize],
    trials: usize,
    seed: u64,
    stage_local: bool,
) -> Result<LesionReport> {
    if net.stage_count() > 1 && !stage_local {
        return Err(Error::Incompatible(
            "net has several stages of different widths; reordering requires stage-local swaps".into(),
        ));
    }
    let baseline_error = evaluate(net, data)?;
    let jobs: Vec<(usize, usize)> = swap_counts.iter().flat_map(|&s| (0..trials).map(move |t| (s, t))).collect();
    let rows = jobs
        .into_par_iter()
        .map(|(swaps, trial)| {
            let stream = stream_id(swaps, trial);
            let mut rng = stream_rng(seed, stream);
            let perm = random_swaps(net, swaps, &mut rng)?;
            let tau = kendall_tau(&perm)?;
            let error = if swaps == 0 {
                baseline_error
            } else {
                evaluate(&net.permute_blocks(&perm)?, data)?
            };
            Ok(LesionRow {
                deleted: Vec::new(),
                permutation: Some(perm),
                num_swaps: Some(swaps),
                tau: Some(tau),
                error,
                trial,
                stream,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LesionReport {
        kind: LesionKind::Reorder,
        seed,
        baseline_error,
        rows,
    })
}
