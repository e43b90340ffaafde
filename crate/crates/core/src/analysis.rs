//! Closed-form radii, error coefficients, the epsilon budget, accumulation
//! and convergence envelopes, and the measured-vs-bound checks.
//!
//! Two families of constants are computed side by side:
//! - `*_nominal`: the constants in their original bookkeeping form;
//! - the primary (unprefixed) constants, which patch the nominal ones where
//!   the derivation needs it to stay sound for this architecture: the l2
//!   norm of a layer output is bounded by sqrt(width) times the entrywise
//!   bound (so score radii use an l2 ladder), ||pbar||_2 <= max(B_x, P B_r),
//!   and the derivative-layer head count is (N-1)K + d_y.
//!
//! Every check in this module asserts against the primary constants and
//! reports the nominal ones alongside.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::approx::segments_for_tolerance;
use crate::builder::{BlockDeviations, BlockPlan, BuildCaps, EpsilonBudget, StackWeights};

use crate::layers::{param_norm, param_norm_spectral};
use crate::network::{exact_gradient, Dataset, DomainBox, NetworkParams, NetworkShape};
use crate::{Error, Result};

/// All radius and coefficient constants for one (shape, activation, bounds)
/// triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiiReport {
    pub b_x: f64,
    pub b_y: f64,
    pub b_v: f64,
    /// entrywise output ladder B_r^j, j = 1..=N, over the nominal intervals
    pub b_r_ladder: Vec<f64>,
    /// nominal entrywise activation bound max_j B_r^j
    pub b_r_nominal: f64,
    /// entrywise activation bound over the sound score radius
    pub b_r: f64,
    /// entrywise derivative bound over the sound score radius (the nominal
    /// ladder gives the same value for sigmoid)
    pub b_rprime: f64,
    /// entrywise bound on the loss-gradient coordinates: 2 (B_r + B_y)
    pub b_l: f64,
    /// l2 ladder of layer outputs; beta\[j\], j = 0..=N
    pub beta_ladder: Vec<f64>,
    /// sound score radius for the activation approximator
    pub r1: f64,
    /// sound score radius for the derivative approximator (same argument
    /// range as r1)
    pub r2: f64,
    /// approximation radius for the loss-gradient map and its masking shift
    pub r3: f64,
    /// nominal radii for reference
    pub r1_nominal: f64,
    pub r2_nominal: f64,
    /// P = max(sqrt(K), sqrt(d_y))
    pub p_factor: f64,
    /// l2 bound on any pbar(j-1): max(B_x, P B_r)
    pub pbar_l2: f64,
    /// error-propagation coefficient for the forward pass
    pub e_r: f64,
    /// sensitivity bounds and error coefficients
    pub b_s: f64,
    pub e_s_r: f64,
    pub e_s_rprime: f64,
    pub e_s_l: f64,
    /// gradient-error coefficients (primary, sound)
    pub c_r: f64,
    pub c_rprime: f64,
    pub c_l: f64,
    /// gradient-error coefficients with the nominal ||pbar||_2 factor
    pub c_r_nominal: f64,
    pub c_rprime_nominal: f64,
    pub c_l_nominal: f64,
    pub lipschitz_r: f64,
    pub lipschitz_rprime: f64,
    pub lipschitz_loss: f64,
}

/// Evaluate every closed form. `b_x`, `b_y` are the dataset bounds; `b_v`
/// the row-norm bound of the projection domain.
pub fn compute_radii(
    shape: NetworkShape,
    act: Activation,
    b_x: f64,
    b_y: f64,
    b_v: f64,
) -> Result<RadiiReport> {
    shape.validate()?;
    for (name, v) in [("b_x", b_x), ("b_y", b_y), ("b_v", b_v)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let depth = shape.depth;
    let k = shape.width as f64;
    let dy = shape.output_dim as f64;
    let l_r = act.lipschitz_value();
    let l_rp = act.lipschitz_derivative();
    let l_l = 2.0; // squared loss: u(t, y) = 2 (t - y)

    // nominal entrywise ladder: B_r^0 = B_x, B_r^j = max |r| over
    // [-B_v B_r^{j-1}, B_v B_r^{j-1}]
    let mut b_r_ladder = Vec::with_capacity(depth);
    let mut prev = b_x;
    for _ in 1..=depth {
        let cur = act.max_abs_value_on(b_v * prev);
        b_r_ladder.push(cur);
        prev = cur;
    }
    let b_r_nominal = b_r_ladder.iter().fold(0.0f64, |m, &v| m.max(v));

    // l2 ladder: beta_0 = B_x, beta_j = sqrt(width_j) max |r| over
    // [-B_v beta_{j-1}, B_v beta_{j-1}]; sound bound on ||p(j)||_2
    let mut beta_ladder = Vec::with_capacity(depth + 1);
    beta_ladder.push(b_x);
    for j in 1..=depth {
        let width = shape.layer_width(j) as f64;
        let prev = beta_ladder[j - 1];
        beta_ladder.push(width.sqrt() * act.max_abs_value_on(b_v * prev));
    }
    // scores v^T p(j-1) are bounded by B_v max(B_x, sqrt(K) sup|r|): the
    // layers score p(0) = x and the width-K blocks p(1..N-1), whose entries
    // stay below the activation's saturation cap. This covers the in-stack
    // approximate activations too, which the exact ladder alone would not
    let score_bound = b_v * b_x.max(k.sqrt() * act.value_sup());
    let r1 = score_bound.max(1.0);
    let r2 = r1;
    let r1_nominal = (b_v * b_r_nominal).max(1.0);

    // nominal derivative ladder (chains r' through its own values); for
    // sigmoid every interval contains 0 so both readings give sup |r'|
    let mut prev = b_x;
    let mut b_rp_nominal: f64 = 0.0;
    for _ in 1..=depth {
        let cur = act.max_abs_derivative_on(b_v * prev);
        b_rp_nominal = b_rp_nominal.max(cur);
        prev = cur;
    }
    let r2_nominal = (b_v * b_rp_nominal).max(1.0);

    // entrywise bounds over the sound score radius
    let b_r = act.max_abs_value_on(r1);
    let b_rprime = act.max_abs_derivative_on(r2).max(b_rp_nominal);
    let b_l = 2.0 * (b_r + b_y);
    let r3 = (b_v * b_r).max(b_y).max(1.0);

    let p_factor = k.sqrt().max(dy.sqrt());

    // E_r = max_j of the forward error coefficients: the hidden layers give
    // sqrt(K) sum_{l<j} (sqrt(K) L_r B_v)^l, the output layer sqrt(d_y)
    // with the sum up to N-1
    let t = k.sqrt() * l_r * b_v;
    let geom = |terms: usize| -> f64 {
        let mut sum = 0.0;
        let mut pw = 1.0;
        for _ in 0..terms {
            sum += pw;
            pw *= t;
        }
        sum
    };
    let mut e_r: f64 = 0.0;
    for j in 1..depth {
        e_r = e_r.max(k.sqrt() * geom(j));
    }
    e_r = e_r.max(dy.sqrt() * geom(depth));

    // sensitivity bound and error coefficients
    let g = p_factor * b_rprime * b_v;
    let gpow = |e: usize| -> f64 { g.powi(e as i32) };
    let gsum = |terms: usize| -> f64 {
        let mut sum = 0.0;
        let mut pw = 1.0;
        for _ in 0..terms {
            sum += pw;
            pw *= g;
        }
        sum
    };
    let mut b_s: f64 = 0.0;
    let mut e_s_r: f64 = 0.0;
    let mut e_s_rp: f64 = 0.0;
    let mut e_s_l: f64 = 0.0;
    for j in 1..=depth {
        let hops = depth - j;
        b_s = b_s.max(gpow(hops) * b_rprime * b_l);
        e_s_l = e_s_l.max(gpow(hops) * b_rprime);
    }
    for j in 1..=depth {
        let hops = depth - j;
        e_s_r = e_s_r.max(
            l_rp * e_r * p_factor * b_s * b_v * b_v * gsum(hops)
                + gpow(hops) * (b_l * l_rp * b_v * e_r + b_rprime * l_l * e_r),
        );
        e_s_rp = e_s_rp.max(p_factor * b_s * b_v * gsum(hops) + gpow(hops) * b_l);
    }

    // gradient-error coefficients; primary uses the sound ||pbar||_2 bound
    let pbar_l2 = b_x.max(p_factor * b_r);
    let n_f = depth as f64;
    let c_l = n_f * p_factor * pbar_l2 * e_s_l;
    let c_r = n_f * p_factor * pbar_l2 * e_s_r + n_f * p_factor * b_s * e_r;
    let c_rprime = n_f * p_factor * pbar_l2 * e_s_rp;
    let sqrt_p = p_factor.sqrt();
    let c_l_nominal = n_f * p_factor * sqrt_p * b_r_nominal * e_s_l;
    let c_r_nominal = n_f * p_factor * sqrt_p * b_r_nominal * e_s_r + n_f * p_factor * b_s * e_r;
    let c_rprime_nominal = n_f * p_factor * sqrt_p * b_r_nominal * e_s_rp;

    Ok(RadiiReport {
        b_x,
        b_y,
        b_v,
        b_r_ladder,
        b_r_nominal,
        b_r,
        b_rprime,
        b_l,
        beta_ladder,
        r1,
        r2,
        r3,
        r1_nominal,
        r2_nominal,
        p_factor,
        pbar_l2,
        e_r,
        b_s,
        e_s_r,
        e_s_rprime: e_s_rp,
        e_s_l,
        c_r,
        c_rprime,
        c_l,
        c_r_nominal,
        c_rprime_nominal,
        c_l_nominal,
        lipschitz_r: l_r,
        lipschitz_rprime: l_rp,
        lipschitz_loss: l_l,
    })
}

/// Split a target gradient error into per-function tolerances
/// eps_f = eps / (3 C_f) (the conservative split; the loss-gradient map is
/// exact under squared loss, so eps_l = 0) and select the PWL segment counts
/// achieving them.
pub fn epsilon_budget(
    eps_target: f64,
    radii: &RadiiReport,
    act: Activation,
    caps: &BuildCaps,
) -> Result<EpsilonBudget> {
    if !(eps_target > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "eps_target must be > 0, got {eps_target}"
        )));
    }
    let eps_r = eps_target / (3.0 * radii.c_r);
    let eps_rp = eps_target / (3.0 * radii.c_rprime);
    let segments_r = segments_for_tolerance(|t| act.value(t), radii.r1, eps_r, caps.max_segments)
        .map_err(|e| rename_infeasible(e, "eps_r"))?;
    let segments_rp =
        segments_for_tolerance(|t| act.derivative(t), radii.r2, eps_rp, caps.max_segments)
            .map_err(|e| rename_infeasible(e, "eps_rprime"))?;
    Ok(EpsilonBudget {
        eps_target,
        eps_r,
        eps_rprime: eps_rp,
        eps_loss: 0.0,
        segments_r,
        segments_rprime: segments_rp,
    })
}

fn rename_infeasible(e: Error, binding: &str) -> Error {
    match e {
        Error::BudgetInfeasible {
            required,
            unit,
            cap,
            ..
        } => Error::BudgetInfeasible {
            quantity: binding.to_string(),
            required,
            unit,
            cap,
        },
        other => other,
    }
}

/// Accumulation envelope L_f^{-1} (1 + n L_f)^l eps for the drift between
/// the stack trajectory and exact projected GD after l steps.
pub fn accumulation_envelope(eps: f64, l_f: f64, n_examples: usize, step: usize) -> f64 {
    (1.0 + n_examples as f64 * l_f).powi(step as i32) * eps / l_f
}

/// Empirical gradient-smoothness constant: max over random (w, delta) pairs
/// of ||grad(w + delta) - grad(w)|| / ||delta||.
pub fn estimate_grad_lipschitz(
    shape: NetworkShape,
    act: Activation,
    data: &Dataset,
    domain: DomainBox,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let dim = shape.param_count();
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let w: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-domain.b..=domain.b))
            .collect();
        let delta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1e-3..=1e-3)).collect();
        let delta_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if delta_norm == 0.0 {
            continue;
        }
        let params = NetworkParams::from_vec(shape, w.clone())?;
        let g0 = exact_gradient(&params, act, data)?;
        let wp: Vec<f64> = w.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let params_p = NetworkParams::from_vec(shape, wp)?;
        let g1 = exact_gradient(&params_p, act, data)?;
        let gdiff = g0
            .iter()
            .zip(&g1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        best = best.max(gdiff / delta_norm);
    }
    Ok(best)
}

/// Loss infimum estimate: min over uniform box samples (reported, not
/// claimed exact).
pub fn estimate_inf_loss(
    shape: NetworkShape,
    act: Activation,
    data: &Dataset,
    domain: DomainBox,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let dim = shape.param_count();
    let mut best = f64::INFINITY;
    // include the origin, the trajectory's starting point
    let zero = NetworkParams::zeros(shape);
    best = best.min(crate::network::loss(&zero, act, data)?);
    for _ in 0..samples {
        let w: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-domain.b..=domain.b))
            .collect();
        let params = NetworkParams::from_vec(shape, w)?;
        best = best.min(crate::network::loss(&params, act, data)?);
    }
    Ok(best)
}

/// Result of the convergence inequality along a trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// min over visited iterates of ||G(w)||^2
    pub min_grad_mapping_sq: f64,
    /// 8 (f(0) - inf f) / (eta L) + 10 eps^2
    pub bound: f64,
    pub pass: bool,
    pub margin: f64,
    /// the step-size precondition in its original form (eta <= L_f); recorded, since
    /// the smoothness constant's intended reading is ambiguous in the source
    pub eta_leq_lf: bool,
    /// the conventional smooth-descent reading (eta L_f <= 1)
    pub eta_lf_product: f64,
}

/// Gradient-mapping convergence check along a parameter trajectory:
/// min_l ||(w^l - clip(w^l - eta grad(w^l))) / eta||^2 must not exceed
/// 8 (f(0) - inf f) / (eta L) + 10 eps^2. Both readings of the step-size
/// precondition are recorded in the report.
pub fn convergence_check(
    trajectory: &[Vec<f64>],
    shape: NetworkShape,
    act: Activation,
    data: &Dataset,
    domain: DomainBox,
    eta: f64,
    eps: f64,
    f_zero: f64,
    f_inf_est: f64,
    l_f: f64,
) -> Result<ConvergenceReport> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidConfig(
            "trajectory needs at least one step".into(),
        ));
    }
    let steps = trajectory.len() - 1;
    let mut min_sq = f64::INFINITY;
    for w in &trajectory[..steps] {
        let params = NetworkParams::from_vec(shape, w.clone())?;
        let grad = exact_gradient(&params, act, data)?;
        let sq: f64 = w
            .iter()
            .zip(&grad)
            .map(|(wi, gi)| {
                let moved = domain.clip(wi - eta * gi);
                let gm = (wi - moved) / eta;
                gm * gm
            })
            .sum();
        min_sq = min_sq.min(sq);
    }
    let bound = 8.0 * (f_zero - f_inf_est) / (eta * steps as f64) + 10.0 * eps * eps;
    Ok(ConvergenceReport {
        min_grad_mapping_sq: min_sq,
        bound,
        pass: min_sq <= bound,
        margin: bound - min_sq,
        eta_leq_lf: eta <= l_f,
        eta_lf_product: eta * l_f,
    })
}

/// One measured-vs-bound comparison row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundRow {
    pub quantity: String,
    pub bound: f64,
    pub measured: f64,
    pub ratio: f64,
    pub pass: bool,
    /// The constant in its original bookkeeping form, where it differs from
    /// the sound bound actually asserted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_bound: Option<f64>,
}

impl BoundRow {
    fn new(quantity: &str, bound: f64, measured: f64) -> Self {
        BoundRow {
            quantity: quantity.to_string(),
            bound,
            measured,
            ratio: if bound > 0.0 { measured / bound } else { f64::INFINITY },
            pass: measured <= bound,
            nominal_bound: None,
        }
    }

    fn with_nominal(mut self, nominal: f64) -> Self {
        self.nominal_bound = Some(nominal);
        self
    }
}

/// Closed-form bounds for every per-quantity deviation, evaluated with the
/// measured approximator sup errors, against the worst deviation over all
/// blocks.
pub fn check_deviation_bounds(
    deviations: &[BlockDeviations],
    radii: &RadiiReport,
    eps_r: f64,
    eps_rp: f64,
    eps_l: f64,
    eta: f64,
) -> Vec<BoundRow> {
    let worst = |f: fn(&BlockDeviations) -> f64| -> f64 {
        deviations.iter().map(f).fold(0.0, f64::max)
    };
    let rp_bound = eps_rp + radii.lipschitz_rprime * radii.b_v * radii.e_r * eps_r;
    let g_bound = eps_l + radii.lipschitz_loss * radii.e_r * eps_r;
    let s_bound = radii.e_s_r * eps_r + radii.e_s_rprime * eps_rp + radii.e_s_l * eps_l;
    let grad_bound =
        0.5 * (radii.c_r * eps_r + radii.c_rprime * eps_rp + radii.c_l * eps_l);
    let grad_bound_nominal = 0.5
        * (radii.c_r_nominal * eps_r
            + radii.c_rprime_nominal * eps_rp
            + radii.c_l_nominal * eps_l);
    vec![
        BoundRow::new("pbar", radii.e_r * eps_r, worst(|d| d.pbar)),
        BoundRow::new("rprime", rp_bound, worst(|d| d.rprime)),
        BoundRow::new("loss_grad", g_bound, worst(|d| d.loss_grad)),
        BoundRow::new("sbar", s_bound, worst(|d| d.sbar)),
        BoundRow::new("sbar_magnitude", radii.b_s, worst(|d| d.sbar_abs)),
        BoundRow::new("grad_l2", grad_bound, worst(|d| d.grad_l2))
            .with_nominal(grad_bound_nominal),
        BoundRow::new("step_l2", eta * grad_bound, worst(|d| d.step_l2)),
        BoundRow::new("query_loss_grad", 0.0, worst(|d| d.query_loss_grad)),
        BoundRow::new("scratch_residue", 0.0, worst(|d| d.scratch_residue)),
    ]
}

/// One layer-norm comparison row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormRow {
    pub layer_index: usize,
    pub role: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    pub spectral: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_bound: Option<f64>,
}

/// Check each constructed layer's parameter norm against its per-role bound.
/// Meaningful in approx mode only (the exact hooks carry no coefficient
/// masses to bound against).
///
/// The derivative layer's nominal constant 1 + K(N-1)C_2 misses the output
/// block (the asserted bound counts the actual (N-1)K + d_y head groups),
/// and the loss-gradient MLP's nominal max{R_3 + 1, C_3} ignores the masking
/// columns, whose induced-1-norm mass is H_3 d_y (R_3 + 1); the asserted
/// bounds include both.
pub fn check_layer_norms(stack: &StackWeights, plan: &BlockPlan) -> Result<Vec<NormRow>> {
    let shape = plan.shape;
    let depth = shape.depth;
    let k = shape.width as f64;
    let dy = shape.output_dim as f64;
    let n = plan.n_examples as f64;
    let c1 = plan.r_hat.coeff_sum().ok_or_else(|| {
        Error::InvalidConfig("layer-norm bounds are defined for approx mode only".into())
    })?;
    let c2 = plan.rprime_hat.coeff_sum().ok_or_else(|| {
        Error::InvalidConfig("layer-norm bounds are defined for approx mode only".into())
    })?;
    let c3 = plan.u_hat.coeff_sum();
    let h3 = plan.u_hat.term_count() as f64;

    let forward_bound = 1.0 + k.max(dy) * c1;
    let rprime_groups = (depth as f64 - 1.0) * k + dy;
    let rprime_bound = 1.0 + rprime_groups * c2;
    let rprime_nominal = 1.0 + k * (depth as f64 - 1.0) * c2;
    let gmlp_bound = dy * h3 * (plan.r3 + 1.0) + c3;
    let gmlp_nominal = (plan.r3 + 1.0).max(c3);
    let update_bound = 1.0 + plan.eta * (n + 1.0) / n * rprime_groups;
    let update_nominal = 1.0 + 2.0 * plan.eta * depth as f64 * k;
    // projection MLP (the assumed Proj = MLP layer; its norm is the C_w of
    // the setting, derived from our clip construction):
    // ||W1||_1 = max over columns {4 (each w column), 2 b D_N + 1 (the one
    // column), 2 (scratch columns)}; ||W2||_1 = max {1, b D_N} (the shared
    // constant column).
    let w_len = shape.param_count() as f64;
    let b = plan.domain.b;
    let proj_bound = 4.0f64.max(2.0 * b * w_len + 1.0) + 1.0f64.max(b * w_len);

    let mut rows = Vec::new();
    for (idx, layer) in stack.layers[..stack.layers_per_block].iter().enumerate() {
        let measured = param_norm(layer);
        let spectral = param_norm_spectral(layer);
        let (role, bound, nominal): (&str, f64, Option<f64>) = if idx < depth {
            ("forward", forward_bound, Some(1.0 + k * c1))
        } else if idx == depth {
            ("rprime", rprime_bound, Some(rprime_nominal))
        } else if idx == depth + 1 {
            ("loss_grad_mlp", gmlp_bound, Some(gmlp_nominal))
        } else if idx < 2 * depth + 2 {
            ("sensitivity_ewml", 1.0, None)
        } else if idx == 2 * depth + 2 {
            ("update", update_bound, Some(update_nominal))
        } else {
            ("projection_mlp", proj_bound, None)
        };
        rows.push(NormRow {
            layer_index: idx,
            role: role.to_string(),
            measured,
            bound,
            pass: measured <= bound + 1e-12,
            spectral,
            nominal_bound: nominal,
        });
    }
    Ok(rows)
}
