//! Mechanical emission of the stack weights.
//!
//! One block of 2N+4 layers implements a single projected-GD step on the
//! carried parameters:
//!
//!   1. N attention layers fill pbar(j)\[k\] = rhat(v_{j,k}^T pbar(j-1)),
//!      reading the weight row from the source tokens' w slot and the running
//!      activations from the destination token.
//!   2. One attention layer fills every rprime(j-1)\[k\] = rphat(v_{j,k}^T pbar(j-1)).
//!   3. One MLP fills g\[k\] = u(pbar(N), y)\[k\] on example tokens and exactly 0
//!      on the query token (every ReLU argument is shifted by -R3 (1 - t)).
//!   4. N multiplication layers fill sbar(N) = rprime(N-1) .* g, then
//!      sbar(j) = rprime(j-1) .* (V_{j+1}^T sbar(j+1)) downward.
//!   5. One attention layer adds -eta * grad to the w slot of every token,
//!      pairing +/- heads so relu(x) - relu(-x) recovers the raw score.
//!   6. One MLP clips each w coordinate to the box and clears the scratch
//!      slots, restoring the canonical block-input format.
//!
//! Swapping the sum-of-ReLUs approximators for exact scalar hooks (diagnostic
//! mode) leaves every layer shape identical and makes the stack reproduce
//! exact projected GD.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::analysis::RadiiReport;
use crate::approx::{build_affine2, build_pwl_approx, measure_sup_error, SumOfRelus};
use crate::layers::{
    attn_forward, ewml_forward, mlp_forward, AttnHead, AttnLayer, EwmlHead, EwmlLayer, LayerKind,
    LayerWeights, MlpLayer, ScoreFn, SparseMat,
};
use crate::layout::{PromptMatrix, Slot, TokenLayout};
use crate::network::{chain_intermediates, exact_gradient, Dataset, DomainBox, NetworkParams, NetworkShape};
use crate::{Error, Result};

/// Production mode evaluates sum-of-ReLUs weights only; exact mode swaps in
/// scalar-function hooks to isolate construction error from approximation
/// error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Exact,
    Approx,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMode::Exact => write!(f, "exact"),
            RunMode::Approx => write!(f, "approx"),
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RunMode::Exact),
            "approx" => Ok(RunMode::Approx),
            other => Err(Error::InvalidConfig(format!(
                "mode must be exact|approx, got '{other}'"
            ))),
        }
    }
}

/// A scalar-function approximator slot in the plan: real sum-of-ReLUs terms
/// or a diagnostic exact hook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Approximator {
    Sum(SumOfRelus),
    ExactValue(Activation),
    ExactDerivative(Activation),
}

impl Approximator {
    pub fn evaluate(&self, t: f64) -> f64 {
        match self {
            Approximator::Sum(s) => s.evaluate1(t),
            Approximator::ExactValue(a) => a.value(t),
            Approximator::ExactDerivative(a) => a.derivative(t),
        }
    }

    pub fn term_count(&self) -> usize {
        match self {
            Approximator::Sum(s) => s.term_count(),
            _ => 1,
        }
    }

    /// Coefficient mass C of the stored terms; exact hooks have none.
    pub fn coeff_sum(&self) -> Option<f64> {
        match self {
            Approximator::Sum(s) => Some(s.coeff_sum()),
            _ => None,
        }
    }
}

/// Per-function error budget and the segment counts that achieve it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBudget {
    pub eps_target: f64,
    pub eps_r: f64,
    pub eps_rprime: f64,
    /// 0 when the loss-gradient map is represented exactly (squared loss).
    pub eps_loss: f64,
    pub segments_r: usize,
    pub segments_rprime: usize,
}

impl EpsilonBudget {
    /// Budget for exact mode, where no approximation happens.
    pub fn exact() -> Self {
        EpsilonBudget {
            eps_target: 0.0,
            eps_r: 0.0,
            eps_rprime: 0.0,
            eps_loss: 0.0,
            segments_r: 1,
            segments_rprime: 1,
        }
    }
}

/// Emitted size of one approximator next to its asymptotic envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRecord {
    pub function: String,
    pub terms: usize,
    pub coeff_sum: f64,
    pub eps: f64,
    pub envelope: f64,
}

/// Caps guarding against runaway budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildCaps {
    pub max_segments: usize,
    pub max_total_heads: usize,
}

impl Default for BuildCaps {
    fn default() -> Self {
        BuildCaps {
            max_segments: 100_000,
            max_total_heads: 100_000,
        }
    }
}

/// Everything the six builders need: shape, slot layout, approximators,
/// step size, box, and the approximation radii.
#[derive(Debug, Clone, Serialize)]
pub struct BlockPlan {
    pub shape: NetworkShape,
    pub layout: TokenLayout,
    pub activation: Activation,
    pub eta: f64,
    pub domain: DomainBox,
    pub n_examples: usize,
    pub r_hat: Approximator,
    pub rprime_hat: Approximator,
    /// Exact affine representation of one coordinate of u(t, y) = 2 (t - y),
    /// as a 2-variable sum of ReLUs in (t_k, y_k).
    pub u_hat: SumOfRelus,
    /// Masking shift for the loss-gradient MLP.
    pub r3: f64,
    pub radii: RadiiReport,
    pub budget: EpsilonBudget,
    pub mode: RunMode,
}

impl BlockPlan {
    pub fn new(
        shape: NetworkShape,
        activation: Activation,
        eta: f64,
        domain: DomainBox,
        n_examples: usize,
        radii: RadiiReport,
        budget: EpsilonBudget,
        mode: RunMode,
    ) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidConfig(format!("eta must be > 0, got {eta}")));
        }
        if n_examples < 1 {
            return Err(Error::InvalidConfig("need >= 1 in-context example".into()));
        }
        let layout = TokenLayout::new(shape)?;
        let (r_hat, rprime_hat) = match mode {
            RunMode::Exact => (
                Approximator::ExactValue(activation),
                Approximator::ExactDerivative(activation),
            ),
            RunMode::Approx => {
                let act = activation;
                let r = build_pwl_approx(|t| act.value(t), radii.r1, budget.segments_r)?;
                let rp =
                    build_pwl_approx(|t| act.derivative(t), radii.r2, budget.segments_rprime)?;
                (Approximator::Sum(r), Approximator::Sum(rp))
            }
        };
        let u_hat = build_affine2(2.0, -2.0, radii.r3)?;
        Ok(BlockPlan {
            shape,
            layout,
            activation,
            eta,
            domain,
            n_examples,
            r_hat,
            rprime_hat,
            u_hat,
            r3: radii.r3,
            radii,
            budget,
            mode,
        })
    }

    /// Size bookkeeping of the emitted approximators against the
    /// H <= C^2 log(1 + C/eps) / eps^2 envelope (reported, not asserted:
    /// the envelope is asymptotic and the PWL builder sits far below it).
    pub fn size_bookkeeping(&self, eps_r: f64, eps_rp: f64) -> Vec<SizeRecord> {
        let record = |name: &str, approx: &Approximator, eps: f64| -> Option<SizeRecord> {
            let c = approx.coeff_sum()?;
            let h = approx.term_count();
            let envelope = if eps > 0.0 {
                c * c * (1.0 + c / eps).ln() / (eps * eps)
            } else {
                f64::INFINITY
            };
            Some(SizeRecord {
                function: name.to_string(),
                terms: h,
                coeff_sum: c,
                eps,
                envelope,
            })
        };
        [
            record("activation", &self.r_hat, eps_r),
            record("activation_derivative", &self.rprime_hat, eps_rp),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    /// Measured sup errors of the plan's approximators on their build
    /// domains. These stand in for eps_r, eps_r', eps_l in the bound checks.
    pub fn measured_approx_errors(&self, grid: usize) -> Result<(f64, f64, f64)> {
        let act = self.activation;
        let eps_r = match &self.r_hat {
            Approximator::Sum(s) => {
                measure_sup_error(s, |z| act.value(z[0]), grid, self.budget.eps_r)?.sup_error
            }
            _ => 0.0,
        };
        let eps_rp = match &self.rprime_hat {
            Approximator::Sum(s) => {
                measure_sup_error(s, |z| act.derivative(z[0]), grid, self.budget.eps_rprime)?
                    .sup_error
            }
            _ => 0.0,
        };
        let side = ((grid as f64).sqrt() as usize).max(64);
        let eps_l = measure_sup_error(
            &self.u_hat,
            |z| 2.0 * (z[0] - z[1]),
            side,
            self.budget.eps_loss,
        )?
        .sup_error;
        Ok((eps_r, eps_rp, eps_l))
    }
}

fn read_block(m: &mut SparseMat, src: Slot, scale: f64) {
    for i in 0..src.len {
        m.push(i, src.offset + i, scale);
    }
}

fn exact_head(
    dim: usize,
    src: Slot,
    w_row: Slot,
    out_row: usize,
    one_col: usize,
    score: ScoreFn,
) -> AttnHead {
    let mut q = SparseMat::zeros(dim, dim);
    read_block(&mut q, src, 1.0);
    let mut k = SparseMat::zeros(dim, dim);
    read_block(&mut k, w_row, 1.0);
    let mut v = SparseMat::zeros(dim, dim);
    v.push(out_row, one_col, 1.0);
    AttnHead { q, k, v, score }
}

/// Heads writing fhat(<v_{j,k}, p(j-1)>) into `out_row`: one head per ReLU
/// term, with the query side reading the running activations from the
/// destination token and the key side reading the weight row (uniform across
/// tokens) plus the constant-1 coordinate. An exact hook collapses the group
/// to one head.
fn scalar_heads(
    dim: usize,
    approx: &Approximator,
    src: Slot,
    w_row: Slot,
    out_row: usize,
    one_col: usize,
) -> Vec<AttnHead> {
    debug_assert_eq!(src.len, w_row.len);
    match approx {
        Approximator::Sum(sum) => sum
            .terms
            .iter()
            .map(|term| {
                let mut q = SparseMat::zeros(dim, dim);
                read_block(&mut q, src, term.a[0]);
                q.push(src.len, one_col, term.a[1]);
                let mut k = SparseMat::zeros(dim, dim);
                read_block(&mut k, w_row, 1.0);
                k.push(src.len, one_col, 1.0);
                let mut v = SparseMat::zeros(dim, dim);
                v.push(out_row, one_col, term.c);
                AttnHead::relu(q, k, v)
            })
            .collect(),
        Approximator::ExactValue(act) => vec![exact_head(
            dim,
            src,
            w_row,
            out_row,
            one_col,
            ScoreFn::ActivationValue(*act),
        )],
        Approximator::ExactDerivative(act) => vec![exact_head(
            dim,
            src,
            w_row,
            out_row,
            one_col,
            ScoreFn::ActivationDerivative(*act),
        )],
    }
}

/// The N forward attention layers; layer j fills pbar(j).
pub fn build_forward_layers(plan: &BlockPlan) -> Result<Vec<AttnLayer>> {
    let layout = &plan.layout;
    let dim = layout.dim();
    let mut layers = Vec::with_capacity(plan.shape.depth);
    for j in 1..=plan.shape.depth {
        let src = layout.pbar_or_x(j - 1);
        let out = layout.pbar_block(j);
        let mut heads = Vec::new();
        for k in 0..plan.shape.layer_width(j) {
            heads.extend(scalar_heads(
                dim,
                &plan.r_hat,
                src,
                layout.w_row(j, k),
                out.offset + k,
                layout.one(),
            ));
        }
        layers.push(AttnLayer { heads });
    }
    Ok(layers)
}

/// The single attention layer filling every derivative block
/// rprime(j-1)\[k\] = rphat(v_{j,k}^T pbar(j-1)), j = 1..=N.
pub fn build_rprime_layer(plan: &BlockPlan) -> Result<AttnLayer> {
    let layout = &plan.layout;
    let dim = layout.dim();
    let mut heads = Vec::new();
    for j in 1..=plan.shape.depth {
        let src = layout.pbar_or_x(j - 1);
        let out = layout.rprime_block(j - 1);
        for k in 0..plan.shape.layer_width(j) {
            heads.extend(scalar_heads(
                dim,
                &plan.rprime_hat,
                src,
                layout.w_row(j, k),
                out.offset + k,
                layout.one(),
            ));
        }
    }
    Ok(AttnLayer { heads })
}

/// The loss-gradient MLP: g\[k\] = 1{t = 1} u(pbar(N), y)\[k\], with the query
/// token masked to exactly zero by the -R3 (1 - t) shift inside every ReLU
/// argument.
pub fn build_loss_grad_mlp(plan: &BlockPlan) -> Result<MlpLayer> {
    let layout = &plan.layout;
    let dim = layout.dim();
    let dy = plan.shape.output_dim;
    let terms_per_coord = plan.u_hat.term_count();
    let hidden = dy * terms_per_coord;
    let mut w1 = SparseMat::zeros(hidden, dim);
    let mut w2 = SparseMat::zeros(dim, hidden);
    let pbar_n = layout.pbar_block(plan.shape.depth);
    for k in 0..dy {
        for (t_idx, term) in plan.u_hat.terms.iter().enumerate() {
            let row = k * terms_per_coord + t_idx;
            // <a, [t_k; y_k; 1]> - R3 (1 - flag)
            w1.push(row, pbar_n.offset + k, term.a[0]);
            w1.push(row, layout.y().offset + k, term.a[1]);
            w1.push(row, layout.one(), term.a[2] - plan.r3);
            w1.push(row, layout.flag(), plan.r3);
            w2.push(layout.g().offset + k, row, term.c);
        }
    }
    Ok(MlpLayer { w1, w2 })
}

/// The N multiplication layers: first sbar(N) = rprime(N-1) .* g, then for
/// j = N-1 .. 1, sbar(j) = rprime(j-1) .* (V_{j+1}^T sbar(j+1)) with the
/// weight columns read from the w slot.
pub fn build_s_layers(plan: &BlockPlan) -> Result<Vec<EwmlLayer>> {
    let layout = &plan.layout;
    let dim = layout.dim();
    let depth = plan.shape.depth;
    let mut layers = Vec::with_capacity(depth);
    // seed layer: sbar(N)[k] = rprime(N-1)[k] * g[k]
    let rp_last = layout.rprime_block(depth - 1);
    let s_last = layout.sbar_block(depth);
    let mut heads = Vec::new();
    for k in 0..plan.shape.output_dim {
        let mut q = SparseMat::zeros(dim, dim);
        q.push(0, rp_last.offset + k, 1.0);
        let mut key = SparseMat::zeros(dim, dim);
        key.push(0, layout.g().offset + k, 1.0);
        let mut v = SparseMat::zeros(dim, dim);
        v.push(s_last.offset + k, layout.one(), 1.0);
        heads.push(EwmlHead { q, k: key, v });
    }
    layers.push(EwmlLayer { heads });
    // descent layers, j = N-1 .. 1
    for j in (1..depth).rev() {
        let next_width = plan.shape.layer_width(j + 1);
        let s_next = layout.sbar_block(j + 1);
        let s_out = layout.sbar_block(j);
        let rp = layout.rprime_block(j - 1);
        let mut heads = Vec::new();
        for k in 0..plan.shape.width {
            let mut q = SparseMat::zeros(dim, dim);
            let mut key = SparseMat::zeros(dim, dim);
            for m in 0..next_width {
                // column k of layer j+1: entries v_{j+1,m}[k]
                q.push(m, layout.w_row(j + 1, m).offset + k, 1.0);
                key.push(m, s_next.offset + m, 1.0);
            }
            let mut v = SparseMat::zeros(dim, dim);
            v.push(s_out.offset + k, rp.offset + k, 1.0);
            heads.push(EwmlHead { q, k: key, v });
        }
        layers.push(EwmlLayer { heads });
    }
    Ok(layers)
}

/// The update attention layer: every token's w slot gains
/// -(eta / 2n) sum_t sum_{j,k} sbar_t(j)\[k\] pbar_t(j-1) in the rows of
/// v_{j,k}. Two heads per (j, k) recover the raw score via
/// relu(x) - relu(-x) = x; the query token contributes nothing because its
/// sbar vanishes.
pub fn build_update_layer(plan: &BlockPlan) -> Result<AttnLayer> {
    let layout = &plan.layout;
    let dim = layout.dim();
    let tokens = (plan.n_examples + 1) as f64;
    let scale = plan.eta * tokens / (2.0 * plan.n_examples as f64);
    let mut heads = Vec::new();
    for j in 1..=plan.shape.depth {
        let src = layout.pbar_or_x(j - 1);
        for k in 0..plan.shape.layer_width(j) {
            let w_row = layout.w_row(j, k);
            let s_pos = layout.sbar_block(j).offset + k;
            for sign in [1.0, -1.0] {
                let mut q = SparseMat::zeros(dim, dim);
                q.push(0, layout.one(), sign);
                let mut key = SparseMat::zeros(dim, dim);
                key.push(0, s_pos, 1.0);
                let mut v = SparseMat::zeros(dim, dim);
                for i in 0..src.len {
                    v.push(w_row.offset + i, src.offset + i, -sign * scale);
                }
                heads.push(AttnHead::relu(q, key, v));
            }
        }
    }
    Ok(AttnLayer { heads })
}

/// The projection MLP: per w coordinate the residual correction
/// clip(x) - x = relu(x + b) - relu(x - b) - b - relu(x) + relu(-x), with the
/// constant -b carried by one shared relu(1) row; every scratch coordinate v
/// (pbar, rprime, g, sbar) is cleared by adding relu(-v) - relu(v).
pub fn build_projection_mlp(plan: &BlockPlan) -> Result<MlpLayer> {
    let layout = &plan.layout;
    let dim = layout.dim();
    let b = plan.domain.b;
    let w_slot = layout.w();
    let scratch = layout.scratch_range();
    let hidden = 4 * w_slot.len + 1 + 2 * scratch.len;
    let mut w1 = SparseMat::zeros(hidden, dim);
    let mut w2 = SparseMat::zeros(dim, hidden);
    let mut row = 0;
    for c in 0..w_slot.len {
        let col = w_slot.offset + c;
        w1.push(row, col, 1.0);
        w1.push(row, layout.one(), b);
        w2.push(col, row, 1.0); // + relu(x + b)
        row += 1;
        w1.push(row, col, 1.0);
        w1.push(row, layout.one(), -b);
        w2.push(col, row, -1.0); // - relu(x - b)
        row += 1;
        w1.push(row, col, 1.0);
        w2.push(col, row, -1.0); // - relu(x)
        row += 1;
        w1.push(row, col, -1.0);
        w2.push(col, row, 1.0); // + relu(-x)
        row += 1;
    }
    // shared constant: -b into every w coordinate
    w1.push(row, layout.one(), 1.0);
    for c in 0..w_slot.len {
        w2.push(w_slot.offset + c, row, -b);
    }
    row += 1;
    for c in 0..scratch.len {
        let col = scratch.offset + c;
        w1.push(row, col, 1.0);
        w2.push(col, row, -1.0);
        row += 1;
        w1.push(row, col, -1.0);
        w2.push(col, row, 1.0);
        row += 1;
    }
    debug_assert_eq!(row, hidden);
    Ok(MlpLayer { w1, w2 })
}

/// The assembled (2N+4)L-layer stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackWeights {
    pub layers: Vec<LayerWeights>,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub mode: RunMode,
}

impl StackWeights {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Kind tags of one block: [attn x (N+1), mlp, ewml x N, attn, mlp].
    pub fn block_kinds(&self) -> Vec<LayerKind> {
        self.layers[..self.layers_per_block]
            .iter()
            .map(|l| l.kind())
            .collect()
    }

    pub fn total_heads(&self) -> usize {
        self.layers[..self.layers_per_block]
            .iter()
            .map(|l| match l {
                LayerWeights::Attn(a) => a.heads.len(),
                LayerWeights::Ewml(e) => e.heads.len(),
                LayerWeights::Mlp(_) => 0,
            })
            .sum()
    }
}

/// Build one block and repeat it L times.
pub fn assemble(plan: &BlockPlan, blocks: usize, caps: &BuildCaps) -> Result<StackWeights> {
    if blocks < 1 {
        return Err(Error::InvalidConfig("need >= 1 block".into()));
    }
    let depth = plan.shape.depth;
    let mut block: Vec<LayerWeights> = Vec::with_capacity(2 * depth + 4);
    for layer in build_forward_layers(plan)? {
        block.push(LayerWeights::Attn(layer));
    }
    block.push(LayerWeights::Attn(build_rprime_layer(plan)?));
    block.push(LayerWeights::Mlp(build_loss_grad_mlp(plan)?));
    for layer in build_s_layers(plan)? {
        block.push(LayerWeights::Ewml(layer));
    }
    block.push(LayerWeights::Attn(build_update_layer(plan)?));
    block.push(LayerWeights::Mlp(build_projection_mlp(plan)?));
    debug_assert_eq!(block.len(), 2 * depth + 4);

    let head_count: usize = block
        .iter()
        .map(|l| match l {
            LayerWeights::Attn(a) => a.heads.len(),
            LayerWeights::Ewml(e) => e.heads.len(),
            LayerWeights::Mlp(_) => 0,
        })
        .sum();
    if head_count > caps.max_total_heads {
        return Err(Error::BudgetInfeasible {
            quantity: format!(
                "attention heads per block ({} r terms, {} r' terms)",
                plan.r_hat.term_count(),
                plan.rprime_hat.term_count()
            ),
            required: head_count,
            unit: "heads".into(),
            cap: caps.max_total_heads,
        });
    }

    let mut layers = Vec::with_capacity(block.len() * blocks);
    for _ in 0..blocks {
        layers.extend(block.iter().cloned());
    }
    Ok(StackWeights {
        layers,
        blocks,
        layers_per_block: block.len(),
        mode: plan.mode,
    })
}

/// Phase boundaries within one block at which the runner snapshots state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    Rprime,
    LossGrad,
    Sensitivity,
    Update,
    Projection,
}

/// Snapshot of the prompt state after one phase of one block.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub block: usize,
    pub phase: Phase,
    pub h: Array2<f64>,
}

/// Per-layer snapshot for the full trace CSV.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub block: usize,
    pub layer_in_block: usize,
    pub kind: LayerKind,
    pub h: Array2<f64>,
}

/// Everything a stack run records: the carried-parameter trajectory at block
/// boundaries, per-phase snapshots, and (optionally) per-layer snapshots.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub layout: TokenLayout,
    /// w at block boundaries, read from token 0: w(0) .. w(L).
    pub w_trajectory: Vec<Vec<f64>>,
    /// Max over blocks of the w-slot spread across tokens.
    pub max_w_spread: f64,
    pub phases: Vec<PhaseState>,
    pub layer_states: Vec<LayerState>,
    pub final_h: Array2<f64>,
}

/// Run the stack on an encoded prompt. Phase snapshots are always kept for
/// verification; `keep_layer_states` additionally snapshots every layer.
pub fn run(
    stack: &StackWeights,
    prompt: &PromptMatrix,
    keep_layer_states: bool,
) -> Result<TraceRecord> {
    let layout = prompt.layout;
    let depth = layout.shape.depth;
    let per_block = stack.layers_per_block;
    let mut h = prompt.h.clone();
    let mut w_trajectory = vec![prompt.w_column(0)];
    let mut phases = Vec::new();
    let mut layer_states = Vec::new();
    let mut max_w_spread: f64 = 0.0;

    for block in 0..stack.blocks {
        for idx in 0..per_block {
            let layer = &stack.layers[block * per_block + idx];
            h = match layer {
                LayerWeights::Attn(l) => attn_forward(&h, l)?,
                LayerWeights::Mlp(l) => mlp_forward(&h, l)?,
                LayerWeights::Ewml(l) => ewml_forward(&h, l)?,
            };
            if keep_layer_states {
                layer_states.push(LayerState {
                    block,
                    layer_in_block: idx,
                    kind: layer.kind(),
                    h: h.clone(),
                });
            }
            let phase = if idx + 1 == depth {
                Some(Phase::Forward)
            } else if idx == depth {
                Some(Phase::Rprime)
            } else if idx == depth + 1 {
                Some(Phase::LossGrad)
            } else if idx + 3 == per_block {
                Some(Phase::Sensitivity)
            } else if idx + 2 == per_block {
                Some(Phase::Update)
            } else if idx + 1 == per_block {
                Some(Phase::Projection)
            } else {
                None
            };
            if let Some(phase) = phase {
                phases.push(PhaseState {
                    block,
                    phase,
                    h: h.clone(),
                });
            }
        }
        // block boundary: carried parameters must agree across tokens
        let w_slot = layout.w();
        let tokens = h.ncols();
        let mut spread: f64 = 0.0;
        for r in w_slot.offset..w_slot.end() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..tokens {
                lo = lo.min(h[(r, i)]);
                hi = hi.max(h[(r, i)]);
            }
            spread = spread.max(hi - lo);
        }
        max_w_spread = max_w_spread.max(spread);
        let w: Vec<f64> = (w_slot.offset..w_slot.end()).map(|r| h[(r, 0)]).collect();
        w_trajectory.push(w);
    }

    Ok(TraceRecord {
        layout,
        w_trajectory,
        max_w_spread,
        phases,
        layer_states,
        final_h: h,
    })
}

/// Sup deviations of the in-stack quantities from the exact chain-rule
/// oracle, per block, evaluated at the carried parameters the block started
/// from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDeviations {
    pub block: usize,
    /// max over tokens, layers, coords of |pbar - p|
    pub pbar: f64,
    pub rprime: f64,
    /// max over example tokens of |g - u|
    pub loss_grad: f64,
    /// query-token g coordinates (must be exactly zero)
    pub query_loss_grad: f64,
    pub sbar: f64,
    /// largest |sbar| magnitude seen (checked against B_s)
    pub sbar_abs: f64,
    /// l2 error of the implied gradient vs the exact gradient
    pub grad_l2: f64,
    /// l2 distance of the post-block w from the exact one-step update taken
    /// from the same starting point
    pub step_l2: f64,
    /// scratch slots after projection (must be exactly zero)
    pub scratch_residue: f64,
}

/// Compare a run's phase snapshots against the exact oracle.
pub fn measure_deviations(
    trace: &TraceRecord,
    act: Activation,
    data: &Dataset,
    eta: f64,
    domain: DomainBox,
) -> Result<Vec<BlockDeviations>> {
    let layout = &trace.layout;
    let shape = layout.shape;
    let depth = shape.depth;
    let tokens = data.len() + 1;
    let zero_y = vec![0.0; shape.output_dim];
    let mut out = Vec::new();
    for block in 0..trace.w_trajectory.len() - 1 {
        let w_start = NetworkParams::from_vec(shape, trace.w_trajectory[block].clone())?;
        // oracle intermediates per token; the query has no label, so its u
        // and s reference values are not used (g and sbar must vanish there)
        let mut chains = Vec::with_capacity(tokens);
        for i in 0..tokens {
            let (x, labeled) = if i < data.len() {
                (&data.examples[i].0, true)
            } else {
                (&data.query, false)
            };
            let y = if labeled { &data.examples[i].1 } else { &zero_y };
            chains.push((chain_intermediates(&w_start, act, x, y)?, labeled));
        }
        let state = |phase: Phase| -> Result<&PhaseState> {
            trace
                .phases
                .iter()
                .find(|p| p.block == block && p.phase == phase)
                .ok_or_else(|| Error::InvalidConfig(format!("missing {phase:?} snapshot")))
        };

        let mut pbar_dev: f64 = 0.0;
        let hf = &state(Phase::Forward)?.h;
        for (i, (ci, _)) in chains.iter().enumerate() {
            for j in 1..=depth {
                let slot = layout.pbar_block(j);
                for c in 0..slot.len {
                    pbar_dev = pbar_dev.max((hf[(slot.offset + c, i)] - ci.p[j][c]).abs());
                }
            }
        }
        let mut rp_dev: f64 = 0.0;
        let hr = &state(Phase::Rprime)?.h;
        for (i, (ci, _)) in chains.iter().enumerate() {
            for j in 0..depth {
                let slot = layout.rprime_block(j);
                for c in 0..slot.len {
                    rp_dev = rp_dev.max((hr[(slot.offset + c, i)] - ci.rprime[j][c]).abs());
                }
            }
        }
        let mut g_dev: f64 = 0.0;
        let mut gq: f64 = 0.0;
        let hg = &state(Phase::LossGrad)?.h;
        let g_slot = layout.g();
        for (i, (ci, labeled)) in chains.iter().enumerate() {
            for c in 0..g_slot.len {
                let v = hg[(g_slot.offset + c, i)];
                if *labeled {
                    g_dev = g_dev.max((v - ci.u[c]).abs());
                } else {
                    gq = gq.max(v.abs());
                }
            }
        }
        let mut s_dev: f64 = 0.0;
        let mut s_abs: f64 = 0.0;
        let hs = &state(Phase::Sensitivity)?.h;
        for (i, (ci, labeled)) in chains.iter().enumerate() {
            for j in 1..=depth {
                let slot = layout.sbar_block(j);
                for c in 0..slot.len {
                    let v = hs[(slot.offset + c, i)];
                    let reference = if *labeled { ci.s[j][c] } else { 0.0 };
                    s_dev = s_dev.max((v - reference).abs());
                    s_abs = s_abs.max(v.abs());
                }
            }
        }
        // implied gradient: (w_before - w_after) / eta at the update layer
        let hu = &state(Phase::Update)?.h;
        let w_slot = layout.w();
        let implied: Vec<f64> = (0..w_slot.len)
            .map(|c| (trace.w_trajectory[block][c] - hu[(w_slot.offset + c, 0)]) / eta)
            .collect();
        let exact = exact_gradient(&w_start, act, data)?;
        let grad_l2 = implied
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let hp = &state(Phase::Projection)?.h;
        let scratch = layout.scratch_range();
        let mut residue: f64 = 0.0;
        for i in 0..tokens {
            for c in 0..scratch.len {
                residue = residue.max(hp[(scratch.offset + c, i)].abs());
            }
        }
        let step_l2 = {
            let mut exact_step = trace.w_trajectory[block].clone();
            for (wc, gc) in exact_step.iter_mut().zip(&exact) {
                *wc = domain.clip(*wc - eta * gc);
            }
            exact_step
                .iter()
                .zip(&trace.w_trajectory[block + 1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        out.push(BlockDeviations {
            block,
            pbar: pbar_dev,
            rprime: rp_dev,
            loss_grad: g_dev,
            query_loss_grad: gq,
            sbar: s_dev,
            sbar_abs: s_abs,
            grad_l2,
            step_l2,
            scratch_residue: residue,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{compute_radii, epsilon_budget};
    use crate::layout::encode_prompt;
    use crate::network::gd_trajectory;

    fn standard_plan(mode: RunMode, eps: f64) -> (BlockPlan, Dataset) {
        let shape = NetworkShape::new(2, 2, 3, 3).unwrap();
        let act = Activation::Sigmoid;
        let domain = DomainBox::new(0.5).unwrap();
        let data = Dataset::random(shape, 4, 1.0, 1.0, 42).unwrap();
        let radii = compute_radii(
            shape,
            act,
            data.bound_x(),
            data.bound_y(),
            domain.row_norm_bound(shape),
        )
        .unwrap();
        let caps = BuildCaps::default();
        let budget = match mode {
            RunMode::Exact => EpsilonBudget::exact(),
            RunMode::Approx => epsilon_budget(eps, &radii, act, &caps).unwrap(),
        };
        let plan =
            BlockPlan::new(shape, act, 0.05, domain, data.len(), radii, budget, mode).unwrap();
        (plan, data)
    }

    #[test]
    fn block_has_expected_layer_kinds() {
        let (plan, _) = standard_plan(RunMode::Exact, 0.0);
        let stack = assemble(&plan, 2, &BuildCaps::default()).unwrap();
        assert_eq!(stack.layer_count(), (2 * 3 + 4) * 2);
        let kinds = stack.block_kinds();
        let depth = 3;
        for (i, kind) in kinds.iter().enumerate() {
            let expect = if i < depth + 1 {
                LayerKind::Attn
            } else if i == depth + 1 {
                LayerKind::Mlp
            } else if i < 2 * depth + 2 {
                LayerKind::Ewml
            } else if i == 2 * depth + 2 {
                LayerKind::Attn
            } else {
                LayerKind::Mlp
            };
            assert_eq!(*kind, expect, "layer {i}");
        }
    }

    #[test]
    fn exact_stack_reproduces_projected_gd() {
        let (plan, data) = standard_plan(RunMode::Exact, 0.0);
        let stack = assemble(&plan, 10, &BuildCaps::default()).unwrap();
        let w0 = vec![0.0; plan.shape.param_count()];
        let prompt = encode_prompt(&data, &w0, &plan.layout).unwrap();
        let trace = run(&stack, &prompt, false).unwrap();
        let oracle = gd_trajectory(
            plan.shape,
            plan.activation,
            &data,
            plan.eta,
            10,
            plan.domain,
        )
        .unwrap();
        assert_eq!(trace.w_trajectory.len(), 11);
        for (step, (got, want)) in trace.w_trajectory.iter().zip(&oracle).enumerate() {
            let dev = got
                .iter()
                .zip(want)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dev <= 1e-9, "step {step}: deviation {dev}");
        }
        assert!(trace.max_w_spread <= 1e-12, "spread {}", trace.max_w_spread);
    }

    #[test]
    fn exact_stack_deviations_vanish() {
        let (plan, data) = standard_plan(RunMode::Exact, 0.0);
        let stack = assemble(&plan, 3, &BuildCaps::default()).unwrap();
        let w0 = vec![0.0; plan.shape.param_count()];
        let prompt = encode_prompt(&data, &w0, &plan.layout).unwrap();
        let trace = run(&stack, &prompt, false).unwrap();
        let devs = measure_deviations(&trace, plan.activation, &data, plan.eta, plan.domain)
            .unwrap();
        for d in &devs {
            assert!(d.pbar <= 1e-12, "pbar {}", d.pbar);
            assert!(d.rprime <= 1e-12);
            assert!(d.loss_grad <= 1e-12);
            assert_eq!(d.query_loss_grad, 0.0);
            assert!(d.sbar <= 1e-12);
            assert!(d.grad_l2 <= 1e-10, "grad {}", d.grad_l2);
            assert_eq!(d.scratch_residue, 0.0);
        }
    }

    #[test]
    fn approx_stack_meets_its_budget() {
        let (plan, data) = standard_plan(RunMode::Approx, 1e-2);
        let stack = assemble(&plan, 2, &BuildCaps::default()).unwrap();
        let w0 = vec![0.0; plan.shape.param_count()];
        let prompt = encode_prompt(&data, &w0, &plan.layout).unwrap();
        let trace = run(&stack, &prompt, false).unwrap();
        let devs = measure_deviations(&trace, plan.activation, &data, plan.eta, plan.domain)
            .unwrap();
        for d in &devs {
            assert!(
                d.grad_l2 <= 1e-2,
                "block {}: grad error {} exceeds target",
                d.block,
                d.grad_l2
            );
            assert!(d.step_l2 <= plan.eta * 1e-2, "step error {}", d.step_l2);
            assert_eq!(d.query_loss_grad, 0.0);
            assert_eq!(d.scratch_residue, 0.0);
        }
        assert!(trace.max_w_spread <= 1e-12);
    }

    #[test]
    fn zero_weights_fill_uniform_scratch_values() {
        // at w = 0 every preactivation is 0, so pbar entries all equal
        // rhat(0) and rprime entries rphat(0), identically across tokens
        let (plan, data) = standard_plan(RunMode::Approx, 1e-2);
        let stack = assemble(&plan, 1, &BuildCaps::default()).unwrap();
        let w0 = vec![0.0; plan.shape.param_count()];
        let prompt = encode_prompt(&data, &w0, &plan.layout).unwrap();
        let trace = run(&stack, &prompt, false).unwrap();
        let r0 = plan.r_hat.evaluate(0.0);
        let rp0 = plan.rprime_hat.evaluate(0.0);
        let depth = plan.shape.depth;
        let hf = &trace
            .phases
            .iter()
            .find(|p| p.phase == Phase::Forward)
            .unwrap()
            .h;
        for i in 0..data.len() + 1 {
            // hidden layers all see zero scores; layer 1 sees v = 0 too
            for j in 1..=depth {
                let slot = plan.layout.pbar_block(j);
                let expect = if j == 1 {
                    r0
                } else {
                    plan.r_hat
                        .evaluate(0.0)
                };
                let _ = expect;
                for c in 0..slot.len {
                    assert!(
                        (hf[(slot.offset + c, i)] - r0).abs() <= 1e-12,
                        "pbar({j})[{c}] token {i}"
                    );
                }
            }
        }
        let hr = &trace
            .phases
            .iter()
            .find(|p| p.phase == Phase::Rprime)
            .unwrap()
            .h;
        let slot = plan.layout.rprime_block(0);
        for i in 0..data.len() + 1 {
            for c in 0..slot.len {
                assert!((hr[(slot.offset + c, i)] - rp0).abs() <= 1e-12);
            }
        }
        // rphat(0) itself approximates r'(0) = 1/4 within its tolerance
        assert!((rp0 - 0.25).abs() <= plan.budget.eps_rprime);
    }

    #[test]
    fn perfect_fit_labels_freeze_the_parameters() {
        // labels equal to the stack's own outputs zero the loss gradient:
        // g = 0 exactly, the whole sensitivity cascade vanishes, and the
        // carried parameters pass through the block unchanged
        let (plan, data) = standard_plan(RunMode::Approx, 1e-2);
        let stack = assemble(&plan, 1, &BuildCaps::default()).unwrap();
        let w0 = NetworkParams::random(plan.shape, 0.3, 77);
        let prompt = encode_prompt(&data, w0.as_slice(), &plan.layout).unwrap();
        let trace = run(&stack, &prompt, false).unwrap();
        let hf = &trace
            .phases
            .iter()
            .find(|p| p.phase == Phase::Forward)
            .unwrap()
            .h;
        let out_slot = plan.layout.pbar_block(plan.shape.depth);
        let mut fitted = data.clone();
        for (i, (_, y)) in fitted.examples.iter_mut().enumerate() {
            *y = (0..out_slot.len)
                .map(|c| hf[(out_slot.offset + c, i)])
                .collect();
        }
        let prompt2 = encode_prompt(&fitted, w0.as_slice(), &plan.layout).unwrap();
        let trace2 = run(&stack, &prompt2, false).unwrap();
        let phase = |p: Phase| trace2.phases.iter().find(|s| s.phase == p).unwrap();
        let g_slot = plan.layout.g();
        let hg = &phase(Phase::LossGrad).h;
        for i in 0..fitted.len() + 1 {
            for c in 0..g_slot.len {
                assert_eq!(hg[(g_slot.offset + c, i)], 0.0, "g[{c}] token {i}");
            }
        }
        let hs = &phase(Phase::Sensitivity).h;
        for i in 0..fitted.len() + 1 {
            for j in 1..=plan.shape.depth {
                let slot = plan.layout.sbar_block(j);
                for c in 0..slot.len {
                    assert_eq!(hs[(slot.offset + c, i)], 0.0);
                }
            }
        }
        // parameters inside the box stay put; the clip MLP's add/subtract of
        // b leaves at most an ulp of float noise per coordinate
        for (a, b) in trace2.w_trajectory[1].iter().zip(w0.as_slice()) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn query_token_is_inert() {
        // changing the test input must not change any carried parameters
        let (plan, data) = standard_plan(RunMode::Approx, 1e-2);
        let stack = assemble(&plan, 2, &BuildCaps::default()).unwrap();
        let w0 = vec![0.0; plan.shape.param_count()];
        let prompt_a = encode_prompt(&data, &w0, &plan.layout).unwrap();
        let mut data_b = data.clone();
        data_b.query = vec![0.9, -0.8];
        let prompt_b = encode_prompt(&data_b, &w0, &plan.layout).unwrap();
        let ta = run(&stack, &prompt_a, false).unwrap();
        let tb = run(&stack, &prompt_b, false).unwrap();
        for (wa, wb) in ta.w_trajectory.iter().zip(&tb.w_trajectory) {
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn nonzero_w0_is_carried() {
        // blocks step from whatever parameters the prompt carries
        let (plan, data) = standard_plan(RunMode::Exact, 0.0);
        let stack = assemble(&plan, 1, &BuildCaps::default()).unwrap();
        let w0 = NetworkParams::random(plan.shape, 0.3, 5);
        let prompt = encode_prompt(&data, w0.as_slice(), &plan.layout).unwrap();
        let trace = run(&stack, &prompt, false).unwrap();
        let grad = exact_gradient(&w0, plan.activation, &data).unwrap();
        let expect: Vec<f64> = w0
            .as_slice()
            .iter()
            .zip(&grad)
            .map(|(w, g)| plan.domain.clip(w - plan.eta * g))
            .collect();
        let got = &trace.w_trajectory[1];
        let dev: f64 = got
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-12, "one-step deviation {dev}");
    }

    #[test]
    fn head_cap_is_enforced() {
        let (plan, _) = standard_plan(RunMode::Approx, 1e-2);
        let caps = BuildCaps {
            max_segments: 100_000,
            max_total_heads: 10,
        };
        let err = assemble(&plan, 1, &caps).unwrap_err();
        assert!(matches!(err, Error::BudgetInfeasible { .. }), "{err}");
    }

    #[test]
    fn slot_discipline_per_layer() {
        // every constructed layer only writes its designated slots
        let (plan, data) = standard_plan(RunMode::Approx, 1e-1);
        let stack = assemble(&plan, 1, &BuildCaps::default()).unwrap();
        let w0 = NetworkParams::random(plan.shape, 0.2, 8);
        let prompt = encode_prompt(&data, w0.as_slice(), &plan.layout).unwrap();
        let trace = run(&stack, &prompt, true).unwrap();
        let layout = &plan.layout;
        let depth = plan.shape.depth;
        let mut prev = prompt.h.clone();
        for state in &trace.layer_states {
            let idx = state.layer_in_block;
            // rows this layer may write
            let writable: Vec<Slot> = if idx < depth {
                vec![layout.pbar_block(idx + 1)]
            } else if idx == depth {
                (0..depth).map(|j| layout.rprime_block(j)).collect()
            } else if idx == depth + 1 {
                vec![layout.g()]
            } else if idx < 2 * depth + 2 {
                let j = depth - (idx - depth - 2);
                vec![layout.sbar_block(j)]
            } else if idx == 2 * depth + 2 {
                vec![layout.w()]
            } else {
                vec![layout.w(), layout.scratch_range()]
            };
            for r in 0..prev.nrows() {
                let allowed = writable
                    .iter()
                    .any(|s| r >= s.offset && r < s.end());
                if allowed {
                    continue;
                }
                for c in 0..prev.ncols() {
                    assert_eq!(
                        prev[(r, c)],
                        state.h[(r, c)],
                        "layer {idx} wrote row {r} token {c}"
                    );
                }
            }
            prev = state.h.clone();
        }
    }
}
