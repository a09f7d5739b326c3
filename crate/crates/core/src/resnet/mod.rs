//! Residual networks built from dense pre-activation blocks.
//!
//! Block `i` computes `y_i = skip(y_{i-1}) + f_i(y_{i-1})` with
//! `f_i(x) = W_out · relu(BN(W_in · relu(BN(x))))`. The skip is the identity
//! inside a stage and a learned projection `P` on the transition block that
//! opens each later stage.
//!
//! Every forward pass takes a [`RoutingMask`] with one [`Gate`] per block; the
//! gates implement test-time deletion and the single-path backward passes
//! used by the gradient-flow measurements.

mod feedforward;
mod layers;

use rand::Rng;

pub use feedforward::{FeedforwardNet, FfLayer};
pub use layers::{BatchNorm, BnId, BnStat, Linear};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Mode, NormStats, Tape, Tensor, Var, BN_MOMENTUM};

/// Per-block routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gate {
    /// `y = skip(x) + f(x)`, gradients through both.
    Standard,
    /// `y = skip(x)`; the residual branch is not evaluated.
    SkipOnly,
    /// Full forward; the backward pass only goes through the residual branch.
    ResidualOnlyBackward,
    /// Full forward; the backward pass only goes through the skip.
    SkipOnlyBackward,
}

impl Gate {
    fn routes(self) -> (bool, bool) {
        match self {
            Gate::Standard => (true, true),
            Gate::ResidualOnlyBackward => (false, true),
            Gate::SkipOnlyBackward => (true, false),
            Gate::SkipOnly => (true, false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingMask(Vec<Gate>);

impl RoutingMask {
    pub fn new(gates: Vec<Gate>) -> Self {
        Self(gates)
    }

    pub fn uniform(n: usize, gate: Gate) -> Self {
        Self(vec![gate; n])
    }

    pub fn standard(n: usize) -> Self {
        Self::uniform(n, Gate::Standard)
    }

    /// `SkipOnly` exactly at the listed blocks, `Standard` elsewhere.
    pub fn skipping(n: usize, skipped: &[usize]) -> Self {
        let mut gates = vec![Gate::Standard; n];
        for &i in skipped {
            gates[i] = Gate::SkipOnly;
        }
        Self(gates)
    }

    /// The backward route of a single path: blocks flagged in `through`
    /// propagate only through their residual branch, all others only
    /// through the skip. The forward pass is the full network.
    pub fn single_path(through: &[bool]) -> Self {
        Self(
            through
                .iter()
                .map(|&b| if b { Gate::ResidualOnlyBackward } else { Gate::SkipOnlyBackward })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gates(&self) -> &[Gate] {
        &self.0
    }

    pub fn set(&mut self, i: usize, gate: Gate) {
        self.0[i] = gate;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Skip {
    Identity,
    /// Learned `width_out × width_in` projection.
    Projection(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Branch {
    PreActivation {
        bn_in: BatchNorm,
        w_in: Tensor,
        bn_out: BatchNorm,
        w_out: Tensor,
    },
    /// `f(x) = x · Wᵀ`, no normalization or nonlinearity. Used for analytic
    /// test networks whose unraveled form has a closed expression.
    Linear { weight: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub skip: Skip,
    /// `None` once the block has been deleted; only the skip remains.
    pub branch: Option<Branch>,
    pub stage: usize,
    width_in: usize,
    width_out: usize,
}

impl Block {
    /// Width-changing block opening a later stage.
    pub fn transition<R: Rng + ?Sized>(width_in: usize, width_out: usize, stage: usize, rng: &mut R) -> Self {
        let proj = Tensor::randn(width_out, width_in, (1.0 / width_in as f64).sqrt(), rng);
        Self::with_skip(Skip::Projection(proj), width_in, width_out, stage, rng)
    }

    /// Standard identity-skip block.
    pub fn standard<R: Rng + ?Sized>(width: usize, stage: usize, rng: &mut R) -> Self {
        Self::with_skip(Skip::Identity, width, width, stage, rng)
    }

    fn with_skip<R: Rng + ?Sized>(skip: Skip, width_in: usize, width_out: usize, stage: usize, rng: &mut R) -> Self {
        Self {
            skip,
            branch: Some(Branch::PreActivation {
                bn_in: BatchNorm::new(width_in),
                w_in: layers::he_init(width_out, width_in, rng),
                bn_out: BatchNorm::new(width_out),
                w_out: layers::he_init(width_out, width_out, rng),
            }),
            stage,
            width_in,
            width_out,
        }
    }

    /// Assembles a block from explicit parts; shapes are checked when the
    /// block joins a net.
    pub fn from_parts(skip: Skip, branch: Option<Branch>, stage: usize, width_in: usize, width_out: usize) -> Self {
        Self { skip, branch, stage, width_in, width_out }
    }

    /// Identity-skip block with a linear residual branch `x · Wᵀ`.
    pub fn linear(weight: Tensor) -> Result<Self> {
        if weight.rows() != weight.cols() {
            return Err(Error::invalid("linear branch must be square"));
        }
        let w = weight.rows();
        Ok(Self {
            skip: Skip::Identity,
            branch: Some(Branch::Linear { weight }),
            stage: 0,
            width_in: w,
            width_out: w,
        })
    }

    pub fn width_in(&self) -> usize {
        self.width_in
    }

    pub fn width_out(&self) -> usize {
        self.width_out
    }

    pub fn is_transition(&self) -> bool {
        matches!(self.skip, Skip::Projection(_))
    }

    pub fn is_deleted(&self) -> bool {
        self.branch.is_none()
    }

    fn validate(&self, i: usize) -> Result<()> {
        let what = format!("block {i}");
        match &self.skip {
            Skip::Identity if self.width_in != self.width_out => {
                return Err(Error::invalid(format!("{what}: identity skip cannot change width")))
            }
            Skip::Projection(p) if p.shape() != (self.width_out, self.width_in) => {
                return Err(Error::invalid(format!("{what}: projection has shape {:?}", p.shape())))
            }
            _ => {}
        }
        match &self.branch {
            Some(Branch::PreActivation { bn_in, w_in, bn_out, w_out }) => {
                bn_in.validate(&what)?;
                bn_out.validate(&what)?;
                if bn_in.width() != self.width_in
                    || w_in.shape() != (self.width_out, self.width_in)
                    || bn_out.width() != self.width_out
                    || w_out.shape() != (self.width_out, self.width_out)
                {
                    return Err(Error::invalid(format!("{what}: branch shapes do not match widths")));
                }
            }
            Some(Branch::Linear { weight }) => {
                if weight.shape() != (self.width_out, self.width_in) {
                    return Err(Error::invalid(format!("{what}: linear branch shape mismatch")));
                }
            }
            None => {}
        }
        Ok(())
    }

    /// Records the block on `tape`. All parameters become leaves (appended
    /// to `params`) even when the gate never touches them, so the parameter
    /// list always lines up with [`ResidualNet::params_mut`].
    fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        gate: Gate,
        mode: Mode,
        index: usize,
        params: &mut Vec<Var>,
        bn_stats: &mut Vec<BnStat>,
    ) -> Result<Var> {
        let in_width = tape.value(x).cols();
        if in_width != self.width_in {
            return Err(Error::Dimension {
                op: "block_forward",
                left: tape.value(x).shape(),
                right: (self.width_out, self.width_in),
            });
        }
        let skip = match &self.skip {
            Skip::Identity => x,
            Skip::Projection(p) => {
                let pv = tape.leaf(p.clone())?;
                params.push(pv);
                tape.linear(x, pv)?
            }
        };
        let Some(branch) = &self.branch else {
            return Ok(skip);
        };
        // Leaves first, so skipped blocks still contribute zero gradients.
        let first = params.len();
        push_branch_leaves(tape, branch, params)?;
        if gate == Gate::SkipOnly {
            return Ok(skip);
        }
        let f = record_branch(tape, branch, x, &params[first..], mode, index, bn_stats)?;
        let (to_skip, to_branch) = gate.routes();
        tape.add_routed(skip, f, to_skip, to_branch)
    }

    /// `skip(x) + f(x)` in isolation.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let y = self.record(&mut tape, xv, Gate::Standard, mode, 0, &mut Vec::new(), &mut Vec::new())?;
        Ok(tape.value(y).clone())
    }

    /// The residual branch `f(x)` alone; zeros for a deleted block.
    pub fn branch_forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let Some(branch) = &self.branch else {
            return Ok(Tensor::zeros(x.rows(), self.width_out));
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let mut params = Vec::new();
        push_branch_leaves(&mut tape, branch, &mut params)?;
        let f = record_branch(&mut tape, branch, xv, &params, mode, 0, &mut Vec::new())?;
        Ok(tape.value(f).clone())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Skip::Projection(p) = &mut self.skip {
            out.push(p);
        }
        match &mut self.branch {
            Some(Branch::PreActivation { bn_in, w_in, bn_out, w_out }) => {
                let [g, b] = bn_in.params_mut();
                out.extend([g, b, w_in]);
                let [g, b] = bn_out.params_mut();
                out.extend([g, b, w_out]);
            }
            Some(Branch::Linear { weight }) => out.push(weight),
            None => {}
        }
        out
    }

    fn named_params(&self, i: usize, out: &mut Vec<(String, Tensor)>) {
        if let Skip::Projection(p) = &self.skip {
            out.push((format!("block.{i}.P"), p.clone()));
        }
        match &self.branch {
            Some(Branch::PreActivation { bn_in, w_in, bn_out, w_out }) => {
                push_bn(out, &format!("block.{i}.bn_in"), bn_in);
                out.push((format!("block.{i}.W_in"), w_in.clone()));
                push_bn(out, &format!("block.{i}.bn_out"), bn_out);
                out.push((format!("block.{i}.W_out"), w_out.clone()));
            }
            Some(Branch::Linear { weight }) => out.push((format!("block.{i}.W"), weight.clone())),
            None => {}
        }
    }

    fn blend(&mut self, slot: usize, stats: &BatchStats, keep: f64) {
        if let Some(Branch::PreActivation { bn_in, bn_out, .. }) = &mut self.branch {
            match slot {
                0 => bn_in.blend(stats, keep),
                _ => bn_out.blend(stats, keep),
            }
        }
    }
}

fn push_branch_leaves(tape: &mut Tape, branch: &Branch, params: &mut Vec<Var>) -> Result<()> {
    match branch {
        Branch::PreActivation { bn_in, w_in, bn_out, w_out } => {
            for t in [&bn_in.gamma, &bn_in.beta, w_in, &bn_out.gamma, &bn_out.beta, w_out] {
                params.push(tape.leaf(t.clone())?);
            }
        }
        Branch::Linear { weight } => params.push(tape.leaf(weight.clone())?),
    }
    Ok(())
}

/// `f(x)` given the branch's parameter leaves.
fn record_branch(
    tape: &mut Tape,
    branch: &Branch,
    x: Var,
    p: &[Var],
    mode: Mode,
    index: usize,
    bn_stats: &mut Vec<BnStat>,
) -> Result<Var> {
    match branch {
        Branch::PreActivation { bn_in, bn_out, .. } => {
            let (h, s_in) = tape.batch_norm(x, p[0], p[1], NormStats::for_mode(mode, &bn_in.running_mean, &bn_in.running_var))?;
            let h = tape.relu(h)?;
            let h = tape.linear(h, p[2])?;
            let (h, s_out) =
                tape.batch_norm(h, p[3], p[4], NormStats::for_mode(mode, &bn_out.running_mean, &bn_out.running_var))?;
            let h = tape.relu(h)?;
            let f = tape.linear(h, p[5])?;
            for (slot, s) in [s_in, s_out].into_iter().enumerate() {
                if let Some(stats) = s {
                    bn_stats.push(BnStat { id: BnId { unit: index, slot }, stats });
                }
            }
            Ok(f)
        }
        Branch::Linear { .. } => tape.linear(x, p[0]),
    }
}

pub(crate) fn push_bn(out: &mut Vec<(String, Tensor)>, prefix: &str, bn: &BatchNorm) {
    out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
    out.push((format!("{prefix}.beta"), bn.beta.clone()));
    out.push((format!("{prefix}.running_mean"), Tensor::row_vector(&bn.running_mean)));
    out.push((format!("{prefix}.running_var"), Tensor::row_vector(&bn.running_var)));
}

/// Everything a forward pass leaves on the tape that callers need.
pub struct Recorded {
    pub logits: Var,
    /// `y_0, y_1, …, y_n`: the embedded input then each block output.
    pub stream: Vec<Var>,
    /// Parameter leaves in the same order as `params_mut`.
    pub params: Vec<Var>,
    /// Batch statistics from every train-mode batch norm that ran.
    pub bn_stats: Vec<BnStat>,
}

/// Models the training loop and the lesion harness can drive.
pub trait Network: Clone + Send + Sync {
    /// Records a forward pass starting from an input node already on the
    /// tape. `mask` is only meaningful for residual nets.
    fn record_input(&self, tape: &mut Tape, input: Var, mask: Option<&RoutingMask>, mode: Mode) -> Result<Recorded>;

    /// Records a forward pass of `x`.
    fn record(&self, tape: &mut Tape, x: &Tensor, mask: Option<&RoutingMask>, mode: Mode) -> Result<Recorded> {
        let input = tape.leaf(x.clone())?;
        self.record_input(tape, input, mask, mode)
    }

    /// Trainable parameters in a fixed canonical order.
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Folds batch statistics into the running averages.
    fn fold_batch_stats(&mut self, stats: &[BnStat]) {
        self.blend_batch_stats(stats, BN_MOMENTUM);
    }

    /// `running = keep · running + (1 − keep) · stats` for every listed
    /// batch norm.
    fn blend_batch_stats(&mut self, stats: &[BnStat], keep: f64);

    /// Number of deletable units (blocks or layers).
    fn units(&self) -> usize;

    /// A copy with unit `i` removed.
    fn delete_unit(&self, i: usize) -> Result<Self>;

    /// Eval-mode logits with the default routing.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, x, None, Mode::Eval)?;
        Ok(tape.value(r.logits).clone())
    }
}

/// Widths and block counts of a residual net.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub classes: usize,
    /// `(width, blocks)` per stage. Every stage after the first opens with a
    /// transition block.
    pub stages: Vec<(usize, usize)>,
    /// Multiplier on the He standard deviation of the embedding weights.
    pub embed_gain: f64,
    /// Batch norm between the last block and the head.
    pub head_norm: bool,
}

impl Architecture {
    /// One stage of `n` identity-skip blocks; every block is swap-compatible.
    pub fn uniform(input_dim: usize, classes: usize, n: usize, width: usize) -> Self {
        Self {
            input_dim,
            classes,
            stages: vec![(width, n)],
            embed_gain: 1.0,
            head_norm: false,
        }
    }

    /// Three stages with widths 16/32/64 joined by projection transitions.
    pub fn three_stage(input_dim: usize, classes: usize, blocks_per_stage: usize) -> Self {
        Self {
            input_dim,
            classes,
            stages: vec![(16, blocks_per_stage), (32, blocks_per_stage), (64, blocks_per_stage)],
            embed_gain: 1.0,
            head_norm: false,
        }
    }

    pub fn with_embed_gain(mut self, gain: f64) -> Self {
        self.embed_gain = gain;
        self
    }

    pub fn with_head_norm(mut self, on: bool) -> Self {
        self.head_norm = on;
        self
    }

    pub fn blocks(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    /// Optional normalization of the final stream before the head.
    pub head_bn: Option<BatchNorm>,
    pub head: Linear,
}

impl ResidualNet {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.blocks() == 0 || arch.stages.iter().any(|s| s.0 == 0) {
            return Err(Error::invalid("a residual net needs at least one block of nonzero width"));
        }
        if !(arch.embed_gain > 0.0) || !arch.embed_gain.is_finite() {
            return Err(Error::invalid("embed_gain must be positive"));
        }
        let first_width = arch.stages[0].0;
        let mut embed = Linear::he(arch.input_dim, first_width, rng);
        embed.weight = embed.weight.scale(arch.embed_gain);
        let mut blocks = Vec::with_capacity(arch.blocks());
        let mut width = first_width;
        for (stage, &(w, count)) in arch.stages.iter().enumerate() {
            for j in 0..count {
                if stage > 0 && j == 0 {
                    blocks.push(Block::transition(width, w, stage, rng));
                } else {
                    blocks.push(Block::standard(w, stage, rng));
                }
            }
            if count > 0 {
                width = w;
            }
        }
        let head = Linear::he(width, arch.classes, rng);
        let mut net = Self::from_parts(embed, blocks, head)?;
        if arch.head_norm {
            net.head_bn = Some(BatchNorm::new(width));
        }
        Ok(net)
    }

    /// Assembles a net, checking that widths chain.
    pub fn from_parts(embed: Linear, blocks: Vec<Block>, head: Linear) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("a residual net needs at least one block"));
        }
        embed.validate("embed")?;
        head.validate("head")?;
        let mut width = embed.output_dim();
        for (i, b) in blocks.iter().enumerate() {
            b.validate(i)?;
            if b.width_in != width {
                return Err(Error::invalid(format!(
                    "block {i} expects width {}, previous layer gives {width}",
                    b.width_in
                )));
            }
            width = b.width_out;
        }
        if head.input_dim() != width {
            return Err(Error::invalid("head input width does not match last block"));
        }
        Ok(Self {
            embed,
            blocks,
            head_bn: None,
            head,
        })
    }

    /// Adds or replaces the batch norm in front of the head.
    pub fn with_head_bn(mut self, bn: BatchNorm) -> Result<Self> {
        bn.validate("head_bn")?;
        if bn.width() != self.head.input_dim() {
            return Err(Error::invalid("head_bn width does not match the head"));
        }
        self.head_bn = Some(bn);
        Ok(self)
    }

    /// Block count `n`.
    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.embed.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn stage_count(&self) -> usize {
        self.blocks.iter().map(|b| b.stage).max().map_or(0, |s| s + 1)
    }

    pub fn transition_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.blocks[i].is_transition()).collect()
    }

    /// Blocks whose skip is the identity and whose branch is still present.
    pub fn standard_indices(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| !self.blocks[i].is_transition() && !self.blocks[i].is_deleted())
            .collect()
    }

    /// Logits for `x` under `mask`.
    pub fn forward(&self, x: &Tensor, mask: &RoutingMask, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, x, Some(mask), mode)?;
        Ok(tape.value(r.logits).clone())
    }

    /// Logits with every residual branch silenced: the embedding, any
    /// transition projections, then the head.
    pub fn head_of_embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul_nt(&self.embed.weight)?.add_row(&self.embed.bias)?;
        for b in &self.blocks {
            if let Skip::Projection(p) = &b.skip {
                h = h.matmul_nt(p)?;
            }
        }
        if let Some(bn) = &self.head_bn {
            let mut tape = Tape::new();
            let hv = tape.leaf(h)?;
            let (y, _) = bn.record(&mut tape, hv, Mode::Eval, &mut Vec::new())?;
            h = tape.value(y).clone();
        }
        h.matmul_nt(&self.head.weight)?.add_row(&self.head.bias)
    }

    /// Copy with block `i`'s residual branch removed. The skip (identity
    /// or projection) stays, so evaluation is identical to gating the block
    /// with [`Gate::SkipOnly`].
    pub fn delete_block(&self, i: usize) -> Result<Self> {
        self.delete_blocks(&[i])
    }

    pub fn delete_blocks(&self, indices: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for &i in indices {
            if i >= self.n() {
                return Err(Error::invalid(format!("block index {i} out of range for {} blocks", self.n())));
            }
            out.blocks[i].branch = None;
        }
        Ok(out)
    }

    /// Copy with blocks reordered: new position `j` holds old block
    /// `perm[j]`. Only blocks of the same stage may move, and transition
    /// blocks stay where they are.
    pub fn permute_blocks(&self, perm: &[usize]) -> Result<Self> {
        crate::paths::validate_permutation(perm, self.n())?;
        for (j, &src) in perm.iter().enumerate() {
            if src == j {
                continue;
            }
            let (a, b) = (&self.blocks[src], &self.blocks[j]);
            if a.is_transition() || b.is_transition() {
                return Err(Error::Incompatible(format!(
                    "transition blocks cannot move (position {j} <- block {src})"
                )));
            }
            if a.stage != b.stage || a.width_in != b.width_in || a.width_out != b.width_out {
                return Err(Error::Incompatible(format!(
                    "block {src} (stage {}) cannot move to position {j} (stage {})",
                    a.stage, b.stage
                )));
            }
        }
        let blocks = perm.iter().map(|&src| self.blocks[src].clone()).collect();
        Ok(Self {
            embed: self.embed.clone(),
            blocks,
            head_bn: self.head_bn.clone(),
            head: self.head.clone(),
        })
    }

    /// Named tensors (parameters and running statistics) in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), self.embed.weight.clone()),
            ("embed.bias".to_string(), self.embed.bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(i, &mut out);
        }
        if let Some(bn) = &self.head_bn {
            push_bn(&mut out, "head_bn", bn);
        }
        out.push(("head.weight".to_string(), self.head.weight.clone()));
        out.push(("head.bias".to_string(), self.head.bias.clone()));
        out
    }
}

impl Network for ResidualNet {
    fn record_input(&self, tape: &mut Tape, input: Var, mask: Option<&RoutingMask>, mode: Mode) -> Result<Recorded> {
        let shape = tape.value(input).shape();
        if let Some(m) = mask {
            if m.len() != self.n() {
                return Err(Error::invalid(format!(
                    "routing mask has {} gates for {} blocks",
                    m.len(),
                    self.n()
                )));
            }
        }
        if shape.1 != self.input_dim() {
            return Err(Error::Dimension {
                op: "net_forward",
                left: shape,
                right: self.embed.weight.shape(),
            });
        }
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut y = self.embed.record(tape, input, &mut params)?;
        let mut stream = vec![y];
        for (i, block) in self.blocks.iter().enumerate() {
            let gate = mask.map_or(Gate::Standard, |m| m.gates()[i]);
            y = block.record(tape, y, gate, mode, i, &mut params, &mut bn_stats)?;
            stream.push(y);
        }
        if let Some(bn) = &self.head_bn {
            let (h, s) = bn.record(tape, y, mode, &mut params)?;
            if let Some(stats) = s {
                bn_stats.push(BnStat { id: BnId { unit: self.n(), slot: 0 }, stats });
            }
            y = h;
        }
        let logits = self.head.record(tape, y, &mut params)?;
        Ok(Recorded {
            logits,
            stream,
            params,
            bn_stats,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.embed.params_mut().into_iter().collect();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        if let Some(bn) = &mut self.head_bn {
            out.extend(bn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn blend_batch_stats(&mut self, stats: &[BnStat], keep: f64) {
        for s in stats {
            match (self.blocks.get_mut(s.id.unit), &mut self.head_bn) {
                (Some(b), _) => b.blend(s.id.slot, &s.stats, keep),
                (None, Some(bn)) => bn.blend(&s.stats, keep),
                (None, None) => {}
            }
        }
    }

    fn units(&self) -> usize {
        self.n()
    }

    fn delete_unit(&self, i: usize) -> Result<Self> {
        self.delete_block(i)
    }
}

#[cfg(test)]
mod tests;
