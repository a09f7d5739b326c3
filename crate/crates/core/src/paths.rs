//! Path combinatorics of the unraveled residual network.
//!
//! A net of `n` blocks has `2^n` input-to-output paths, one per binary code
//! `b ∈ {0,1}^n` (`b_i = 1` iff the path goes through the residual branch of
//! block `i`). Path length is the popcount of the code, so lengths follow
//! `Binomial(n, 1/2)`.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, Zero};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest `n` for which [`enumerate_path_codes`] materializes all codes.
pub const MAX_ENUMERATED_BLOCKS: usize = 20;

/// Largest `n` accepted by [`linear_unravel_oracle`].
pub const MAX_ORACLE_BLOCKS: usize = 12;

/// `2^n` as a checked 64-bit count.
pub fn num_paths(n: usize) -> Result<u64> {
    if n >= 64 {
        return Err(Error::Overflow(n));
    }
    Ok(1u64 << n)
}

/// `2^n` without a size limit.
pub fn num_paths_big(n: usize) -> BigUint {
    BigUint::one() << n
}

/// Exact `C(n, k)`, zero when `k > n`.
pub fn binomial_exact(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for j in 0..k {
        acc *= BigUint::from(n - j);
        acc /= BigUint::from(j + 1);
    }
    acc
}

/// One path through an `n`-block network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathCode {
    bits: Vec<bool>,
}

impl PathCode {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of residual branches the path traverses.
    pub fn length(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of the blocks whose residual branch is on the path.
    pub fn through(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }
}

/// All `2^n` codes in lexicographic order (block 0 is the most significant bit).
pub fn enumerate_path_codes(n: usize) -> Result<Vec<PathCode>> {
    if n > MAX_ENUMERATED_BLOCKS {
        return Err(Error::Capacity {
            what: format!("enumerating 2^{n} path codes"),
            limit: MAX_ENUMERATED_BLOCKS,
        });
    }
    Ok((0u64..1 << n)
        .map(|c| PathCode::new((0..n).map(|i| (c >> (n - 1 - i)) & 1 == 1).collect()))
        .collect())
}

/// Probability of each path length `k = 0..=n` among all `2^n` paths.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    pub n: usize,
    pub pmf: Vec<f64>,
}

impl LengthDistribution {
    pub fn mean(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }
}

/// `pmf[k] = C(n,k) / 2^n`, evaluated in log space so large `n` cannot overflow.
pub fn path_length_pmf(n: usize) -> LengthDistribution {
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let pmf = (0..=n)
        .map(|k| (ln_binomial(n as u64, k as u64) - ln2n).exp())
        .collect();
    LengthDistribution { n, pmf }
}

/// The same distribution as exact rationals.
pub fn path_length_pmf_exact(n: usize) -> Vec<BigRational> {
    let denom = num_bigint::BigInt::from(num_paths_big(n));
    (0..=n)
        .map(|k| BigRational::new(binomial_exact(n, k).into(), denom.clone()))
        .collect()
}

fn check_remaining_args(n: usize, d: usize, x: usize) -> Result<()> {
    if d > n {
        return Err(Error::invalid(format!("cannot delete {d} of {n} blocks")));
    }
    if x > n {
        return Err(Error::invalid(format!("path length {x} exceeds {n} blocks")));
    }
    Ok(())
}

/// Fraction of length-`x` paths that survive deleting `d` of `n` blocks,
/// `C(n-d, x) / C(n, x)`.
///
/// Evaluated as `∏_{j<x} (n-d-j)/(n-j)`, each factor at most one.
pub fn remaining_fraction(n: usize, d: usize, x: usize) -> Result<f64> {
    check_remaining_args(n, d, x)?;
    if x > n - d {
        return Ok(0.0);
    }
    Ok((0..x).map(|j| (n - d - j) as f64 / (n - j) as f64).product())
}

/// [`remaining_fraction`] as an exact rational.
pub fn remaining_fraction_exact(n: usize, d: usize, x: usize) -> Result<BigRational> {
    check_remaining_args(n, d, x)?;
    Ok(BigRational::new(
        binomial_exact(n - d, x).into(),
        binomial_exact(n, x).into(),
    ))
}

/// `Σ_{k=lo..=hi} pmf[k]`.
pub fn effective_fraction(pmf: &LengthDistribution, k_lo: usize, k_hi: usize) -> Result<f64> {
    if k_lo > k_hi || k_hi > pmf.n {
        return Err(Error::invalid(format!(
            "band [{k_lo}, {k_hi}] is not inside [0, {}]",
            pmf.n
        )));
    }
    Ok(pmf.pmf[k_lo..=k_hi].iter().sum())
}

/// Gradient contributed by each path length: path frequency times the
/// expected gradient magnitude of one path of that length.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMass {
    /// `pmf[k] · mean_norm[k]`; `None` where length `k` was not measured.
    pub raw: Vec<Option<f64>>,
    /// `raw` rescaled to sum to one over the measured lengths.
    pub normalized: Vec<Option<f64>>,
}

pub fn gradient_mass(pmf: &LengthDistribution, mean_norms: &[Option<f64>]) -> Result<GradientMass> {
    if mean_norms.len() != pmf.pmf.len() {
        return Err(Error::invalid(format!(
            "{} gradient norms for {} path lengths",
            mean_norms.len(),
            pmf.pmf.len()
        )));
    }
    if mean_norms.iter().flatten().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("gradient norms must be nonnegative"));
    }
    let raw: Vec<Option<f64>> = pmf
        .pmf
        .iter()
        .zip(mean_norms)
        .map(|(&p, m)| m.map(|m| p * m))
        .collect();
    let total: f64 = raw.iter().flatten().sum();
    let normalized = raw
        .iter()
        .map(|m| m.map(|m| if total > 0.0 { m / total } else { 0.0 }))
        .collect();
    Ok(GradientMass { raw, normalized })
}

pub(crate) fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Permutation(format!("expected {n} entries, got {}", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Permutation(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Kendall rank correlation between `perm` and the identity ordering,
/// `1 − 2·discordant / C(n,2)`. Discordant pairs are counted as inversions
/// with a merge sort.
pub fn kendall_tau(perm: &[usize]) -> Result<f64> {
    let n = perm.len();
    validate_permutation(perm, n)?;
    if n < 2 {
        return Ok(1.0);
    }
    let mut work = perm.to_vec();
    let mut buf = vec![0; n];
    let discordant = count_inversions(&mut work, &mut buf);
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(1.0 - 2.0 * discordant as f64 / pairs)
}

fn count_inversions(v: &mut [usize], buf: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        count_inversions(l, bl) + count_inversions(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            inv += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..].copy_from_slice(&v[j..]);
    v.copy_from_slice(&buf[..n]);
    inv
}

/// Sum over all `2^n` paths of a residual net whose branches are linear
/// maps `x ↦ x·M_iᵀ` (rows of `y0` are examples). Each path applies its
/// selected maps in block order; the all-skip path contributes `y0` itself.
pub fn linear_unravel_oracle(blocks: &[Tensor], y0: &Tensor) -> Result<Tensor> {
    let n = blocks.len();
    if n > MAX_ORACLE_BLOCKS {
        return Err(Error::Capacity {
            what: format!("unraveling {n} blocks"),
            limit: MAX_ORACLE_BLOCKS,
        });
    }
    for m in blocks {
        if m.shape() != (y0.cols(), y0.cols()) {
            return Err(Error::Dimension {
                op: "linear_unravel_oracle",
                left: y0.shape(),
                right: m.shape(),
            });
        }
    }
    let mut total = Tensor::zeros(y0.rows(), y0.cols());
    for code in enumerate_path_codes(n)? {
        let mut term = y0.clone();
        for i in code.through() {
            term = term.matmul_nt(&blocks[i])?;
        }
        total.add_assign(&term)?;
    }
    Ok(total)
}
