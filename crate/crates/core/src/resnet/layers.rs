use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Mode, NormStats, Tape, Tensor, Var, BN_MOMENTUM};

/// Dense affine map `x · Wᵀ + b`, `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-scaled Gaussian weights, zero bias.
    pub fn he<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: he_init(output, input, rng),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            weight: Tensor::identity(width),
            bias: Tensor::zeros(1, width),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn validate(&self, what: &str) -> Result<()> {
        if self.bias.shape() != (1, self.weight.rows()) {
            return Err(Error::invalid(format!(
                "{what}: bias shape {:?} does not match weight {:?}",
                self.bias.shape(),
                self.weight.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn record(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        let w = tape.leaf(self.weight.clone())?;
        let b = tape.leaf(self.bias.clone())?;
        params.extend([w, b]);
        let h = tape.linear(x, w)?;
        tape.add_row(h, b)
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub(crate) fn he_init<R: Rng + ?Sized>(rows: usize, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, fan_in, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Learned per-feature scale/shift plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::ones(1, width),
            beta: Tensor::zeros(1, width),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    pub(crate) fn validate(&self, what: &str) -> Result<()> {
        let w = self.width();
        if self.gamma.rows() != 1
            || self.beta.shape() != (1, w)
            || self.running_mean.len() != w
            || self.running_var.len() != w
        {
            return Err(Error::invalid(format!("{what}: inconsistent batch-norm shapes")));
        }
        Ok(())
    }

    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        params: &mut Vec<Var>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let g = tape.leaf(self.gamma.clone())?;
        let b = tape.leaf(self.beta.clone())?;
        params.extend([g, b]);
        let stats = NormStats::for_mode(mode, &self.running_mean, &self.running_var);
        tape.batch_norm(x, g, b, stats)
    }

    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn fold(&mut self, stats: &BatchStats) {
        self.blend(stats, BN_MOMENTUM);
    }

    /// `running = keep · running + (1 − keep) · batch`; `keep = 0` overwrites.
    pub fn blend(&mut self, stats: &BatchStats, keep: f64) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + (1.0 - keep) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + (1.0 - keep) * v;
        }
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Which batch norm produced a set of batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId {
    /// Block index for residual nets, layer index for feedforward nets.
    pub unit: usize,
    /// Position of the batch norm inside the unit.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnStat {
    pub id: BnId,
    pub stats: BatchStats,
}
