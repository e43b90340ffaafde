//! End-to-end orchestration of one experiment: seed the instance, compute
//! radii and the budget, build the stack, run it, and verify everything
//! against the oracles. The CLI, the Python bindings, and the acceptance
//! suite all drive this one path, so reports are identical across entry
//! points.

use serde::Serialize;

use crate::activation::Activation;
use crate::analysis::{
    accumulation_envelope, check_deviation_bounds, check_layer_norms, compute_radii,
    convergence_check, epsilon_budget, estimate_grad_lipschitz, estimate_inf_loss, BoundRow,
    ConvergenceReport, NormRow, RadiiReport,
};
use crate::builder::{
    assemble, measure_deviations, run, BlockDeviations, BlockPlan, EpsilonBudget, RunMode,
    StackWeights, TraceRecord,
};
use crate::config::ExperimentConfig;
use crate::layout::encode_prompt;
use crate::network::{
    gd_trajectory, loss, Dataset, DomainBox, InstanceDoc, NetworkParams, NetworkShape,
};
use crate::Result;

/// Per-step trajectory comparison row.
#[derive(Debug, Clone, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub w_deviation_l2: f64,
    pub loss_oracle: f64,
    pub loss_stack: f64,
    /// accumulation envelope at this step (approx mode only)
    pub envelope: Option<f64>,
}

/// Everything one verified run produces.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub config_hash: String,
    pub mode: RunMode,
    pub shape: NetworkShape,
    pub instance: InstanceDoc,
    pub radii: RadiiReport,
    pub budget: EpsilonBudget,
    pub stack_layer_count: usize,
    pub stack_heads_per_block: usize,
    pub trace: TraceRecord,
    pub deviations: Vec<BlockDeviations>,
    pub eps_r_measured: f64,
    pub eps_rprime_measured: f64,
    pub eps_loss_measured: f64,
    pub bound_rows: Vec<BoundRow>,
    /// empty in exact mode (no coefficient masses to check against)
    pub norm_rows: Vec<NormRow>,
    /// emitted approximator sizes vs the asymptotic envelope
    pub size_records: Vec<crate::builder::SizeRecord>,
    pub steps: Vec<StepRow>,
    pub grad_lipschitz: f64,
    pub envelope_ok: bool,
    pub convergence: ConvergenceReport,
    pub max_w_spread: f64,
    /// max trajectory deviation from exact projected GD over all steps
    pub max_traj_deviation: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Build the instance a config describes (seeded dataset and domain).
pub fn instance_from_config(
    cfg: &ExperimentConfig,
) -> Result<(NetworkShape, Activation, Dataset, DomainBox)> {
    let shape = cfg.shape()?;
    let act = Activation::from_name(&cfg.activation)?;
    let data = Dataset::random(shape, cfg.examples, cfg.b_x, cfg.b_y, cfg.seed)?;
    let domain = DomainBox::new(cfg.box_b)?;
    Ok((shape, act, data, domain))
}

/// Plan from a config: radii from the measured dataset bounds, budget from
/// the target (approx) or the exact hooks (exact mode).
pub fn plan_from_config(cfg: &ExperimentConfig) -> Result<(BlockPlan, Dataset)> {
    let (shape, act, data, domain) = instance_from_config(cfg)?;
    let radii = compute_radii(
        shape,
        act,
        data.bound_x(),
        data.bound_y(),
        domain.row_norm_bound(shape),
    )?;
    let mode = cfg.run_mode()?;
    let budget = match mode {
        RunMode::Exact => EpsilonBudget::exact(),
        RunMode::Approx => epsilon_budget(cfg.eps_target, &radii, act, &cfg.caps())?,
    };
    let plan = BlockPlan::new(shape, act, cfg.eta, domain, data.len(), radii, budget, mode)?;
    Ok((plan, data))
}

/// Sup-error measurement grid for the emitted approximators.
const APPROX_MEASURE_GRID: usize = 100_001;
/// Tolerance for the cross-token parameter spread and the exact-mode
/// trajectory deviation.
pub const SPREAD_TOL: f64 = 1e-12;
pub const EXACT_TRAJ_TOL: f64 = 1e-9;

/// The full verification pipeline for one instance.
pub fn run_instance(cfg: &ExperimentConfig, keep_layer_states: bool) -> Result<VerifyOutcome> {
    cfg.validate()?;
    let (plan, data) = plan_from_config(cfg)?;
    let shape = plan.shape;
    let act = plan.activation;
    let domain = plan.domain;
    let mode = plan.mode;

    let stack = assemble(&plan, cfg.steps, &cfg.caps())?;
    let w0 = vec![0.0; shape.param_count()];
    let prompt = encode_prompt(&data, &w0, &plan.layout)?;
    let trace = run(&stack, &prompt, keep_layer_states)?;
    let deviations = measure_deviations(&trace, act, &data, cfg.eta, domain)?;
    let (eps_r, eps_rp, eps_l) = plan.measured_approx_errors(APPROX_MEASURE_GRID)?;

    let bound_rows = check_deviation_bounds(&deviations, &plan.radii, eps_r, eps_rp, eps_l, cfg.eta);
    let size_records = plan.size_bookkeeping(eps_r, eps_rp);
    let norm_rows = match mode {
        RunMode::Approx => check_layer_norms(&stack, &plan)?,
        RunMode::Exact => Vec::new(),
    };

    // oracle trajectory and per-step comparison
    let oracle = gd_trajectory(shape, act, &data, cfg.eta, cfg.steps, domain)?;
    let grad_lipschitz =
        estimate_grad_lipschitz(shape, act, &data, domain, 100, cfg.seed ^ 0x5eed)?;
    let mut steps = Vec::with_capacity(cfg.steps + 1);
    let mut max_traj_deviation: f64 = 0.0;
    let mut envelope_ok = true;
    for (l, (got, want)) in trace.w_trajectory.iter().zip(&oracle).enumerate() {
        let dev = got
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        max_traj_deviation = max_traj_deviation.max(dev);
        let loss_oracle = loss(&NetworkParams::from_vec(shape, want.clone())?, act, &data)?;
        let loss_stack = loss(&NetworkParams::from_vec(shape, got.clone())?, act, &data)?;
        let envelope = match mode {
            RunMode::Approx => {
                let env = accumulation_envelope(cfg.eps_target, grad_lipschitz, data.len(), l);
                if dev > env {
                    envelope_ok = false;
                }
                Some(env)
            }
            RunMode::Exact => None,
        };
        steps.push(StepRow {
            step: l,
            w_deviation_l2: dev,
            loss_oracle,
            loss_stack,
            envelope,
        });
    }

    let f_zero = loss(&NetworkParams::zeros(shape), act, &data)?;
    let f_inf = estimate_inf_loss(shape, act, &data, domain, 1000, cfg.seed ^ 0x1f)?;
    let eps_for_convergence = match mode {
        RunMode::Approx => cfg.eps_target,
        RunMode::Exact => 0.0,
    };
    let convergence = convergence_check(
        &trace.w_trajectory,
        shape,
        act,
        &data,
        domain,
        cfg.eta,
        eps_for_convergence,
        f_zero,
        f_inf,
        grad_lipschitz,
    )?;

    // verdicts
    let mut failures = Vec::new();
    let expected_layers = (2 * shape.depth + 4) * cfg.steps;
    if stack.layer_count() != expected_layers {
        failures.push(format!(
            "layer count {} != (2N+4)L = {expected_layers}",
            stack.layer_count()
        ));
    }
    if trace.max_w_spread > SPREAD_TOL {
        failures.push(format!("w spread {} > {SPREAD_TOL}", trace.max_w_spread));
    }
    for d in &deviations {
        if d.query_loss_grad != 0.0 {
            failures.push(format!("block {}: query loss-grad {}", d.block, d.query_loss_grad));
        }
        if d.scratch_residue != 0.0 {
            failures.push(format!("block {}: scratch residue {}", d.block, d.scratch_residue));
        }
    }
    match mode {
        RunMode::Exact => {
            if max_traj_deviation > EXACT_TRAJ_TOL {
                failures.push(format!(
                    "exact-mode trajectory deviation {max_traj_deviation} > {EXACT_TRAJ_TOL}"
                ));
            }
        }
        RunMode::Approx => {
            for row in &bound_rows {
                if !row.pass {
                    failures.push(format!(
                        "bound violated: {} measured {} > {}",
                        row.quantity, row.measured, row.bound
                    ));
                }
            }
            for row in &norm_rows {
                if !row.pass {
                    failures.push(format!(
                        "norm bound violated: layer {} ({}) {} > {}",
                        row.layer_index, row.role, row.measured, row.bound
                    ));
                }
            }
            for d in &deviations {
                if d.step_l2 > cfg.eta * cfg.eps_target {
                    failures.push(format!(
                        "block {}: step error {} > eta*eps = {}",
                        d.block,
                        d.step_l2,
                        cfg.eta * cfg.eps_target
                    ));
                }
            }
            if !envelope_ok {
                failures.push("accumulation envelope violated".into());
            }
        }
    }
    if !convergence.pass {
        failures.push(format!(
            "convergence inequality violated: {} > {}",
            convergence.min_grad_mapping_sq, convergence.bound
        ));
    }

    let params0 = NetworkParams::zeros(shape);
    let instance = InstanceDoc::pack(&params0, act, &data, domain, cfg.eta, Some(cfg.seed));
    let max_w_spread = trace.max_w_spread;
    Ok(VerifyOutcome {
        config_hash: cfg.hash(),
        mode,
        shape,
        instance,
        radii: plan.radii.clone(),
        budget: plan.budget,
        stack_layer_count: stack.layer_count(),
        stack_heads_per_block: stack.total_heads(),
        trace,
        deviations,
        eps_r_measured: eps_r,
        eps_rprime_measured: eps_rp,
        eps_loss_measured: eps_l,
        bound_rows,
        norm_rows,
        size_records,
        steps,
        grad_lipschitz,
        envelope_ok,
        convergence,
        max_w_spread,
        max_traj_deviation,
        pass: failures.is_empty(),
        failures,
    })
}

/// Build the stack a config describes without running it.
pub fn build_stack_only(cfg: &ExperimentConfig) -> Result<(BlockPlan, StackWeights)> {
    let (plan, _) = plan_from_config(cfg)?;
    let stack = assemble(&plan, cfg.steps, &cfg.caps())?;
    Ok((plan, stack))
}
