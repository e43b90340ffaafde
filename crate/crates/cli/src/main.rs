//! Batch driver for the in-context gradient descent construction: build the
//! stack, run it against the exact oracles, verify every bound, and sweep
//! parameter grids. Reports are machine-readable (CSV, or JSON with --json);
//! exit status is nonzero when any check fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use icgd_core::analysis::{compute_radii, epsilon_budget};
use icgd_core::builder::{assemble, measure_deviations, run, BlockPlan, EpsilonBudget};
use icgd_core::layout::encode_prompt;
use icgd_core::network::{gd_trajectory, loss, NetworkParams};
use icgd_core::pipeline::{build_stack_only, instance_from_config, run_instance, VerifyOutcome};
use icgd_core::report::{
    bounds_json, deviations_csv, sweep_csv, trace_csv, trajectory_csv, write_stack_dir,
    BoundsReport, SweepRow, CSV_HEADER,
};
use icgd_core::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "icgd-forge",
    version,
    about = "Construct, run and verify transformer stacks that implement projected gradient descent in-context"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Configuration file (JSON); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for reports
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the run mode
    #[arg(long, value_parser = ["exact", "approx"])]
    mode: Option<String>,
    /// Override the instance seed
    #[arg(long)]
    seed: Option<u64>,
    /// Emit reports as JSON instead of CSV
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the stack, run it, and verify every bound and invariant
    Verify(CommonOpts),
    /// Cartesian-product sweep over the configured axes
    Sweep(CommonOpts),
    /// Emit the constructed stack weights only
    Build(CommonOpts),
    /// Exact projected-GD trajectory only
    Oracle(CommonOpts),
}

fn load_config(opts: &CommonOpts) -> Result<ExperimentConfig, icgd_core::Error> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::from_json(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = &opts.mode {
        cfg.mode = mode.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), icgd_core::Error> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_steps(dir: &Path, outcome: &VerifyOutcome, json: bool) -> Result<(), icgd_core::Error> {
    if json {
        write_json(&dir.join("trajectory.json"), &outcome.steps)?;
    } else {
        let rows: Vec<(usize, f64, f64, f64)> = outcome
            .steps
            .iter()
            .map(|s| (s.step, s.w_deviation_l2, s.loss_oracle, s.loss_stack))
            .collect();
        fs::write(
            dir.join("trajectory.csv"),
            trajectory_csv(&outcome.config_hash, &rows),
        )?;
    }
    Ok(())
}

fn cmd_verify(opts: &CommonOpts) -> Result<bool, icgd_core::Error> {
    let cfg = load_config(opts)?;
    fs::create_dir_all(&opts.out)?;
    let outcome = run_instance(&cfg, true)?;

    write_steps(&opts.out, &outcome, opts.json)?;
    if opts.json {
        write_json(&opts.out.join("deviations.json"), &outcome.deviations)?;
    } else {
        fs::write(
            opts.out.join("deviations.csv"),
            deviations_csv(&outcome.config_hash, &outcome.deviations),
        )?;
    }
    fs::write(
        opts.out.join("trace.csv"),
        trace_csv(&outcome.config_hash, &outcome.trace),
    )?;
    let bounds = BoundsReport {
        config: &outcome.config_hash,
        version: env!("CARGO_PKG_VERSION"),
        eps_r_measured: outcome.eps_r_measured,
        eps_rprime_measured: outcome.eps_rprime_measured,
        eps_loss_measured: outcome.eps_loss_measured,
        deviation_bounds: &outcome.bound_rows,
        layer_norms: &outcome.norm_rows,
        approximator_sizes: &outcome.size_records,
        all_pass: outcome.pass,
    };
    fs::write(opts.out.join("bounds.json"), bounds_json(&bounds)?)?;
    write_json(&opts.out.join("radii.json"), &outcome.radii)?;
    write_json(&opts.out.join("convergence.json"), &outcome.convergence)?;
    write_json(&opts.out.join("instance.json"), &outcome.instance)?;

    println!(
        "instance {}: mode={} layers={} heads/block={} measured eps=({:.3e}, {:.3e}, {:.3e})",
        outcome.config_hash,
        outcome.mode,
        outcome.stack_layer_count,
        outcome.stack_heads_per_block,
        outcome.eps_r_measured,
        outcome.eps_rprime_measured,
        outcome.eps_loss_measured,
    );
    for row in &outcome.bound_rows {
        println!(
            "  bound {:<18} measured {:>12.5e}  bound {:>12.5e}  {}",
            row.quantity,
            row.measured,
            row.bound,
            if row.pass { "ok" } else { "VIOLATED" }
        );
    }
    for step in &outcome.steps {
        println!(
            "  step {:>2}  |w_stack - w_gd| = {:.5e}  loss {:.6}",
            step.step, step.w_deviation_l2, step.loss_stack
        );
    }
    if outcome.pass {
        println!("verify: PASS");
    } else {
        println!("verify: FAIL");
        for f in &outcome.failures {
            println!("  {f}");
        }
    }
    Ok(outcome.pass)
}

fn cmd_build(opts: &CommonOpts) -> Result<bool, icgd_core::Error> {
    let cfg = load_config(opts)?;
    let (plan, stack) = build_stack_only(&cfg)?;
    let dir = opts.out.join("stack");
    write_stack_dir(&dir, &stack)?;
    write_json(&opts.out.join("plan.json"), &plan)?;
    write_json(&opts.out.join("radii.json"), &plan.radii)?;
    write_json(&opts.out.join("budget.json"), &plan.budget)?;
    println!(
        "built {} layers ({} blocks of {}), {} heads per block -> {}",
        stack.layer_count(),
        stack.blocks,
        stack.layers_per_block,
        stack.total_heads(),
        dir.display()
    );
    Ok(true)
}

fn cmd_oracle(opts: &CommonOpts) -> Result<bool, icgd_core::Error> {
    let cfg = load_config(opts)?;
    fs::create_dir_all(&opts.out)?;
    let (shape, act, data, domain) = instance_from_config(&cfg)?;
    let traj = gd_trajectory(shape, act, &data, cfg.eta, cfg.steps, domain)?;
    let hash = cfg.hash();
    #[derive(serde::Serialize)]
    struct OracleRow {
        step: usize,
        loss: f64,
        w_norm: f64,
    }
    let rows: Vec<OracleRow> = traj
        .iter()
        .enumerate()
        .map(|(step, w)| {
            let params = NetworkParams::from_vec(shape, w.clone())?;
            Ok(OracleRow {
                step,
                loss: loss(&params, act, &data)?,
                w_norm: w.iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect::<Result<_, icgd_core::Error>>()?;
    if opts.json {
        write_json(&opts.out.join("oracle.json"), &rows)?;
    } else {
        let mut out = String::from(CSV_HEADER);
        out.push_str("config,step,loss,w_norm\n");
        for r in &rows {
            out.push_str(&format!("{hash},{},{},{}\n", r.step, r.loss, r.w_norm));
        }
        fs::write(opts.out.join("oracle.csv"), out)?;
    }
    write_json(&opts.out.join("oracle_trajectory.json"), &traj)?;
    for r in &rows {
        println!("step {}: loss {:.8}", r.step, r.loss);
    }
    Ok(true)
}

/// One sweep job: a fully resolved single-cell config plus an optional
/// pinned segment count (overriding the budget selector).
type SweepJob = (ExperimentConfig, Option<usize>);

fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<SweepJob> {
    let axis = |values: &[usize], default: usize| -> Vec<usize> {
        if values.is_empty() {
            vec![default]
        } else {
            values.to_vec()
        }
    };
    let depths = axis(&cfg.sweep_depth, cfg.depth);
    let widths = axis(&cfg.sweep_width, cfg.width);
    let steps = axis(&cfg.sweep_steps, cfg.steps);
    let segments: Vec<Option<usize>> = if cfg.sweep_segments.is_empty() {
        vec![None]
    } else {
        cfg.sweep_segments.iter().copied().map(Some).collect()
    };
    let mut jobs = Vec::new();
    for &depth in &depths {
        for &width in &widths {
            for &l in &steps {
                for &seg in &segments {
                    let mut cell = cfg.clone();
                    cell.depth = depth;
                    cell.width = width;
                    cell.steps = l;
                    cell.sweep_depth.clear();
                    cell.sweep_width.clear();
                    cell.sweep_steps.clear();
                    cell.sweep_segments.clear();
                    jobs.push((cell, seg));
                }
            }
        }
    }
    jobs
}

fn run_sweep_cell(cfg: &ExperimentConfig, segments: Option<usize>) -> SweepRow {
    let start = Instant::now();
    let result = run_cell_inner(cfg, segments);
    let runtime_ms = start.elapsed().as_millis();
    match result {
        Ok((grad_err, bound, max_step_dev, seg_used)) => SweepRow {
            config: cfg.hash(),
            depth: cfg.depth,
            width: cfg.width,
            steps: cfg.steps,
            segments_r: seg_used,
            grad_error_measured: grad_err,
            grad_error_bound: bound,
            max_step_deviation: max_step_dev,
            runtime_ms,
            status: "ok".into(),
        },
        Err(e) => SweepRow {
            config: cfg.hash(),
            depth: cfg.depth,
            width: cfg.width,
            steps: cfg.steps,
            segments_r: segments.unwrap_or(0),
            grad_error_measured: f64::NAN,
            grad_error_bound: f64::NAN,
            max_step_deviation: f64::NAN,
            runtime_ms,
            status: format!("error: {e}"),
        },
    }
}

/// Returns (measured grad error, closed-form bound with measured eps,
/// max per-step deviation, segment count used).
fn run_cell_inner(
    cfg: &ExperimentConfig,
    segments: Option<usize>,
) -> Result<(f64, f64, f64, usize), icgd_core::Error> {
    let (shape, act, data, domain) = instance_from_config(cfg)?;
    let radii = compute_radii(
        shape,
        act,
        data.bound_x(),
        data.bound_y(),
        domain.row_norm_bound(shape),
    )?;
    let budget = match segments {
        Some(seg) => EpsilonBudget {
            eps_target: cfg.eps_target,
            eps_r: f64::INFINITY,
            eps_rprime: f64::INFINITY,
            eps_loss: 0.0,
            segments_r: seg,
            segments_rprime: seg,
        },
        None => epsilon_budget(cfg.eps_target, &radii, act, &cfg.caps())?,
    };
    let plan = BlockPlan::new(
        shape,
        act,
        cfg.eta,
        domain,
        data.len(),
        radii.clone(),
        budget,
        cfg.run_mode()?,
    )?;
    let segments_used = budget.segments_r;
    let stack = assemble(&plan, cfg.steps, &cfg.caps())?;
    let w0 = vec![0.0; shape.param_count()];
    let prompt = encode_prompt(&data, &w0, &plan.layout)?;
    let trace = run(&stack, &prompt, false)?;
    let devs = measure_deviations(&trace, act, &data, cfg.eta, domain)?;
    let (er, erp, el) = plan.measured_approx_errors(20_001)?;
    let grad_err = devs.iter().map(|d| d.grad_l2).fold(0.0, f64::max);
    let bound = 0.5 * (radii.c_r * er + radii.c_rprime * erp + radii.c_l * el);
    let max_step = devs.iter().map(|d| d.step_l2).fold(0.0, f64::max);
    Ok((grad_err, bound, max_step, segments_used))
}

fn cmd_sweep(opts: &CommonOpts) -> Result<bool, icgd_core::Error> {
    let cfg = load_config(opts)?;
    if !cfg.has_sweep_axes() {
        return Err(icgd_core::Error::InvalidConfig(
            "sweep requires at least one non-empty sweep axis".into(),
        ));
    }
    fs::create_dir_all(&opts.out)?;
    let jobs = sweep_jobs(&cfg);

    let threads: usize = std::env::var("ICGD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .max(1);
    let mut rows: Vec<Option<SweepRow>> = vec![None; jobs.len()];
    if threads <= 1 {
        for (i, (cell, seg)) in jobs.iter().enumerate() {
            rows[i] = Some(run_sweep_cell(cell, *seg));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<SweepRow>>> =
            (0..jobs.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let (cell, seg) = &jobs[i];
                    *slots[i].lock().unwrap() = Some(run_sweep_cell(cell, *seg));
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            rows[i] = slot.into_inner().unwrap();
        }
    }
    let rows: Vec<SweepRow> = rows.into_iter().flatten().collect();
    if opts.json {
        write_json(&opts.out.join("sweep.json"), &rows)?;
    } else {
        fs::write(opts.out.join("sweep.csv"), sweep_csv(&rows))?;
    }
    let mut ok = true;
    for r in &rows {
        println!(
            "cell depth={} width={} steps={} segs={}: grad_err={:.3e} bound={:.3e} [{}]",
            r.depth,
            r.width,
            r.steps,
            r.segments_r,
            r.grad_error_measured,
            r.grad_error_bound,
            r.status
        );
        if r.status != "ok" {
            ok = false;
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(opts) => cmd_verify(opts),
        Command::Sweep(opts) => cmd_sweep(opts),
        Command::Build(opts) => cmd_build(opts),
        Command::Oracle(opts) => cmd_oracle(opts),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let icgd_core::Error::BudgetInfeasible { .. } = e {
                eprintln!("hint: raise max_segments/max_total_heads or relax eps_target");
            }
            ExitCode::FAILURE
        }
    }
}
