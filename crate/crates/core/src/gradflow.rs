//! Gradient carried by individual paths.
//!
//! To measure one path of length `k`, a batch goes forward through the whole
//! network; on the way back, `k` randomly chosen blocks pass gradient only
//! through their residual branch and the other `n − k` only through their
//! skip. The norm of the gradient arriving at the embedded input `y_0` is
//! the contribution of that single path.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Mode, Tape, Tensor};
use crate::paths::{gradient_mass, GradientMass, LengthDistribution};
use crate::resnet::{Network, ResidualNet, RoutingMask};
use crate::rng::{stream_id, stream_rng};

/// Gradient of the mean batch loss at `y_0` with the backward pass
/// restricted to the path that goes through the residual branch of exactly
/// the flagged blocks.
pub fn path_gradient(
    net: &ResidualNet,
    x: &Tensor,
    labels: &[usize],
    through: &[bool],
    mode: Mode,
) -> Result<Tensor> {
    if through.len() != net.n() {
        return Err(Error::invalid(format!(
            "path code has {} entries for {} blocks",
            through.len(),
            net.n()
        )));
    }
    let mask = RoutingMask::single_path(through);
    full_forward_input_gradient(net, x, labels, Some(&mask), mode)
}

/// Gradient at `y_0` under an arbitrary mask (`None` = unrestricted).
pub fn full_forward_input_gradient(
    net: &ResidualNet,
    x: &Tensor,
    labels: &[usize],
    mask: Option<&RoutingMask>,
    mode: Mode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, x, mask, mode)?;
    let loss = tape.softmax_cross_entropy(rec.logits, labels)?;
    Ok(tape.backward(loss)?.get_or_zeros(rec.stream[0]))
}

/// Mean over examples of the per-example 2-norm.
pub fn mean_row_norm(g: &Tensor) -> f64 {
    if g.rows() == 0 {
        return 0.0;
    }
    (0..g.rows())
        .map(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / g.rows() as f64
}

/// How gradient is sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPlan {
    pub samples_per_length: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(samples_per_length: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            samples_per_length,
            batch_size,
            mode: Mode::Train,
            seed,
        }
    }
}

/// One measurement: a random training batch and `k` random blocks.
pub fn sample_path_gradient<R: Rng + ?Sized>(
    net: &ResidualNet,
    data: &Dataset,
    batch_size: usize,
    k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<f64> {
    let n = net.n();
    if k > n {
        return Err(Error::invalid(format!("path length {k} exceeds {n} blocks")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let b = batch_size.min(data.len());
    if b == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let rows = sample(rng, data.len(), b).into_vec();
    let (x, labels) = data.batch(&rows);
    let mut through = vec![false; n];
    for i in sample(rng, n, k) {
        through[i] = true;
    }
    let g = path_gradient(net, &x, &labels, &through, mode)?;
    Ok(mean_row_norm(&g))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthStats {
    pub k: usize,
    pub samples: usize,
    pub mean_norm: f64,
    pub std_norm: f64,
    pub mean_log2_norm: f64,
}

/// Per-length path-gradient statistics of one network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientProfile {
    pub n: usize,
    pub lengths: Vec<LengthStats>,
}

impl GradientProfile {
    /// Mean norms indexed by `k = 0..=n`, `None` where nothing was sampled.
    pub fn mean_norms(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.n + 1];
        for s in &self.lengths {
            out[s.k] = Some(s.mean_norm);
        }
        out
    }

    pub fn mass(&self, pmf: &LengthDistribution) -> Result<GradientMass> {
        if pmf.n != self.n {
            return Err(Error::invalid("profile and length distribution disagree on n"));
        }
        gradient_mass(pmf, &self.mean_norms())
    }

    /// Pearson correlation between `k` and the mean log2 norm.
    pub fn log_norm_correlation(&self) -> f64 {
        let xs: Vec<f64> = self.lengths.iter().map(|s| s.k as f64).collect();
        let ys: Vec<f64> = self.lengths.iter().map(|s| s.mean_log2_norm).collect();
        crate::stats::pearson(&xs, &ys)
    }

    /// CSV with columns
    /// `k,samples,mean_norm,std_norm,mean_log2_norm,mass_raw,mass_normalized`.
    pub fn to_csv(&self, pmf: &LengthDistribution) -> Result<String> {
        let mass = self.mass(pmf)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "k",
            "samples",
            "mean_norm",
            "std_norm",
            "mean_log2_norm",
            "mass_raw",
            "mass_normalized",
        ])?;
        for s in &self.lengths {
            let f = crate::lesion::fmt;
            w.write_record([
                s.k.to_string(),
                s.samples.to_string(),
                f(s.mean_norm),
                f(s.std_norm),
                f(s.mean_log2_norm),
                f(mass.raw[s.k].unwrap_or(0.0)),
                f(mass.normalized[s.k].unwrap_or(0.0)),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Samples `plan.samples_per_length` path gradients for every requested
/// length. Every measurement draws its own batch and block subset from
/// stream `(length index, sample index)` of `plan.seed`.
pub fn gradient_profile(net: &ResidualNet, data: &Dataset, lengths: &[usize], plan: &SamplingPlan) -> Result<GradientProfile> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&k) = lengths.iter().find(|&&k| k > net.n()) {
        return Err(Error::invalid(format!("path length {k} exceeds {} blocks", net.n())));
    }
    if plan.samples_per_length == 0 {
        return Err(Error::invalid("need at least one sample per length"));
    }
    let mut out = Vec::with_capacity(lengths.len());
    for (li, &k) in lengths.iter().enumerate() {
        let norms = (0..plan.samples_per_length)
            .into_par_iter()
            .map(|s| {
                let mut rng = stream_rng(plan.seed, stream_id(li, s));
                sample_path_gradient(net, data, plan.batch_size, k, plan.mode, &mut rng)
            })
            .collect::<Result<Vec<f64>>>()?;
        let m = norms.len() as f64;
        let mean = norms.iter().sum::<f64>() / m;
        let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let mean_log2 = norms.iter().map(|v| v.log2()).sum::<f64>() / m;
        out.push(LengthStats {
            k,
            samples: norms.len(),
            mean_norm: mean,
            std_norm: var.sqrt(),
            mean_log2_norm: mean_log2,
        });
    }
    Ok(GradientProfile { n: net.n(), lengths: out })
}

/// Narrowest contiguous band of lengths holding at least `coverage` of the
/// normalized gradient mass. Ties go to the band with more mass, then to the
/// shorter lengths.
pub fn effective_band(profile: &GradientProfile, pmf: &LengthDistribution, coverage: f64) -> Result<(usize, usize)> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!("coverage {coverage} must be in (0, 1]")));
    }
    let mass = profile.mass(pmf)?;
    let m: Vec<f64> = mass.normalized.iter().map(|v| v.unwrap_or(0.0)).collect();
    if m.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("profile carries no gradient mass"));
    }
    const SLACK: f64 = 1e-12;
    let mut best: Option<(usize, f64, usize, usize)> = None;
    for lo in 0..m.len() {
        let mut acc = 0.0;
        for hi in lo..m.len() {
            acc += m[hi];
            if acc >= coverage - SLACK {
                // trim zero-mass ends so the band hugs the measured mass
                let (mut a, mut b) = (lo, hi);
                while a < b && m[a] == 0.0 {
                    a += 1;
                }
                while b > a && m[b] == 0.0 {
                    b -= 1;
                }
                let width = b - a;
                let better = match best {
                    None => true,
                    Some((w, s, _, _)) => width < w || (width == w && acc > s + SLACK),
                };
                if better {
                    best = Some((width, acc, a, b));
                }
                break;
            }
        }
    }
    let (_, _, lo, hi) = best.expect("full range covers all mass");
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::path_length_pmf;
    use crate::resnet::{Architecture, Block, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Identity embedding, `n` identity-skip blocks with branch `scale·I`,
    /// random head.
    fn scaled_identity_net(n: usize, width: usize, scale: f64) -> ResidualNet {
        let blocks = (0..n)
            .map(|_| Block::linear(Tensor::identity(width).scale(scale)).unwrap())
            .collect();
        let head = Linear::he(width, 3, &mut ChaCha8Rng::seed_from_u64(2));
        ResidualNet::from_parts(Linear::identity(width), blocks, head).unwrap()
    }

    fn profile_of(masses: &[f64]) -> GradientProfile {
        let n = masses.len() - 1;
        GradientProfile {
            n,
            lengths: masses
                .iter()
                .enumerate()
                .map(|(k, &m)| LengthStats {
                    k,
                    samples: 1,
                    mean_norm: m,
                    std_norm: 0.0,
                    mean_log2_norm: m.log2(),
                })
                .collect(),
        }
    }

    #[test]
    fn halving_branches_halve_gradient_per_block() {
        let net = scaled_identity_net(6, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(5, 3, 1.0, &mut rng);
        let labels = [0, 1, 2, 0, 1];
        let base = mean_row_norm(&path_gradient(&net, &x, &labels, &[false; 6], Mode::Train).unwrap());
        for k in 0..=6 {
            let mut through = [false; 6];
            through[..k].iter_mut().for_each(|b| *b = true);
            let g = mean_row_norm(&path_gradient(&net, &x, &labels, &through, Mode::Train).unwrap());
            let expected = 0.5f64.powi(k as i32) * base;
            assert!((g - expected).abs() <= 1e-10 * expected, "k={k}: {g} vs {expected}");
        }
    }

    #[test]
    fn zero_length_path_is_head_gradient() {
        let net = ResidualNet::new(&Architecture::uniform(2, 3, 4, 6), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(8, 2, 1.0, &mut rng);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let mut tape = Tape::new();
        let mask = RoutingMask::single_path(&[false; 4]);
        let rec = net.record(&mut tape, &x, Some(&mask), Mode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(rec.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get_or_zeros(rec.stream[0]), grads.get_or_zeros(rec.stream[4]));
    }

    #[test]
    fn full_length_is_all_residual_route() {
        let net = ResidualNet::new(&Architecture::uniform(2, 3, 4, 6), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let data = crate::data::gen_spirals(20, 3, 0.1, 1).unwrap();
        let mut rng = stream_rng(5, 0);
        let sampled = sample_path_gradient(&net, &data, 16, 4, Mode::Train, &mut rng).unwrap();
        // replay the same batch draw
        let mut rng = stream_rng(5, 0);
        let rows = sample(&mut rng, data.len(), 16).into_vec();
        let (x, labels) = data.batch(&rows);
        let mask = RoutingMask::uniform(4, crate::resnet::Gate::ResidualOnlyBackward);
        let direct = mean_row_norm(&full_forward_input_gradient(&net, &x, &labels, Some(&mask), Mode::Train).unwrap());
        assert_eq!(sampled, direct);
    }

    #[test]
    fn zero_branch_net_has_zero_path_gradients() {
        let net = scaled_identity_net(4, 3, 0.0);
        let data = Dataset::new(Tensor::randn(30, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(0)), vec![1; 30], 3).unwrap();
        let plan = SamplingPlan::new(5, 8, 1);
        let profile = gradient_profile(&net, &data, &[4], &plan).unwrap();
        assert_eq!(profile.lengths[0].mean_norm, 0.0);
        assert_eq!(profile.lengths[0].std_norm, 0.0);
    }

    #[test]
    fn profile_is_seed_deterministic() {
        let net = ResidualNet::new(&Architecture::uniform(2, 3, 4, 6), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let data = crate::data::gen_spirals(20, 3, 0.1, 1).unwrap();
        let plan = SamplingPlan::new(6, 10, 42);
        let a = gradient_profile(&net, &data, &[0, 2, 4], &plan).unwrap();
        assert_eq!(a, gradient_profile(&net, &data, &[0, 2, 4], &plan).unwrap());
        assert!(gradient_profile(&net, &data, &[5], &plan).is_err());
    }

    #[test]
    fn batch_order_does_not_change_norm() {
        let net = ResidualNet::new(&Architecture::uniform(2, 3, 4, 6), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let data = crate::data::gen_spirals(4, 3, 0.1, 2).unwrap();
        let through = [true, false, true, false];
        let x = data.features.clone();
        let g = mean_row_norm(&path_gradient(&net, &x, &data.labels, &through, Mode::Train).unwrap());
        let rev: Vec<usize> = (0..data.len()).rev().collect();
        let (xr, lr) = data.batch(&rev);
        let gr = mean_row_norm(&path_gradient(&net, &xr, &lr, &through, Mode::Train).unwrap());
        assert!((g - gr).abs() < 1e-12 * g.max(1e-300));
    }

    #[test]
    fn band_of_single_spike() {
        let pmf = path_length_pmf(4);
        let profile = profile_of(&[0.0, 0.0, 5.0, 0.0, 0.0]);
        assert_eq!(effective_band(&profile, &pmf, 0.9).unwrap(), (2, 2));
        assert_eq!(effective_band(&profile, &pmf, 1.0).unwrap(), (2, 2));
    }

    #[test]
    fn full_coverage_spans_nonzero_mass() {
        let pmf = path_length_pmf(5);
        let profile = profile_of(&[0.0, 1.0, 0.5, 0.25, 0.125, 0.0]);
        assert_eq!(effective_band(&profile, &pmf, 1.0).unwrap(), (1, 4));
        assert!(effective_band(&profile, &pmf, 0.0).is_err());
        assert!(effective_band(&profile, &pmf, 1.5).is_err());
    }

    #[test]
    fn csv_mass_columns_match_gradient_mass() {
        let pmf = path_length_pmf(3);
        let profile = profile_of(&[1.0, 0.5, 0.25, 0.125]);
        let csv = profile.to_csv(&pmf).unwrap();
        let mass = gradient_mass(&pmf, &profile.mean_norms()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,samples,mean_norm,std_norm,mean_log2_norm,mass_raw,mass_normalized"
        );
        for (k, line) in lines.enumerate() {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols[5], mass.raw[k].unwrap());
            assert_eq!(cols[6], mass.normalized[k].unwrap());
        }
    }
}
