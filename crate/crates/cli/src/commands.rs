use std::path::{Path, PathBuf};

use elrdyn_core::metrics::SpreadReport;
use elrdyn_core::scenario::ScenarioConfig;
use elrdyn_core::simulate::{convergence_horizon_with, Trajectory};
use elrdyn_core::stochastic::{elr_goal_deviation, model_deviation, Deviation, ExcludedTrial};
use elrdyn_core::{
    mc_ensemble, simulate_with, spread_report, ModelError, NetworkState, Schedule, SimOptions,
};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::output;

/// Command-line overrides and environment shared by all commands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub record_every: Option<u64>,
    pub quiet: bool,
    /// Upper bound on trial threads (from `ELRDYN_THREADS`).
    pub thread_cap: Option<usize>,
}

impl RunOptions {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FailureRecord {
    pub step: u64,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub schedule: String,
    pub depth: usize,
    pub steps: u64,
    pub steps_taken: u64,
    pub ratio_tolerance: f64,
    /// First step with every pairwise ratio within tolerance of 1.
    pub convergence_horizon: Option<u64>,
    pub total_flips: usize,
    pub flip_steps: Vec<u64>,
    pub initial_spread: SpreadReport,
    pub final_spread: Option<SpreadReport>,
    pub failure: Option<FailureRecord>,
}

struct ScheduleRun {
    trajectory: Trajectory,
    summary: SimulationSummary,
}

fn run_schedule(
    init: &NetworkState,
    schedule: &Schedule,
    cfg: &ScenarioConfig,
    opts: &RunOptions,
) -> Result<ScheduleRun> {
    let tolerance = cfg.model.numeric_tolerance;
    let sim_opts = SimOptions {
        record_every: opts.record_every.unwrap_or(cfg.record_every),
        tolerance,
        pairwise_flips: false,
    };
    let (trajectory, failure) = match simulate_with(init, schedule, cfg.steps, &sim_opts) {
        Ok(t) => (t, None),
        Err(f) if matches!(f.source, ModelError::Config(_)) => return Err(f.source.into()),
        Err(f) => {
            let record = FailureRecord {
                step: f.step,
                error: f.source.to_string(),
            };
            (*f.trajectory, Some(record))
        }
    };
    // The horizon is searched at full resolution, independent of record_every.
    let horizon =
        match convergence_horizon_with(init, schedule, cfg.ratio_tolerance, cfg.steps, tolerance) {
            Ok(h) => h,
            Err(ModelError::Config(m)) => return Err(CliError::Config(m)),
            Err(_) => None,
        };
    let summary = SimulationSummary {
        schedule: schedule.kind_name().to_string(),
        depth: init.len(),
        steps: cfg.steps,
        steps_taken: trajectory.steps_taken,
        ratio_tolerance: cfg.ratio_tolerance,
        convergence_horizon: horizon,
        total_flips: trajectory.flips.len(),
        flip_steps: trajectory.flip_steps().collect(),
        initial_spread: spread_report(init),
        final_spread: trajectory.final_state.as_ref().map(spread_report),
        failure,
    };
    Ok(ScheduleRun {
        trajectory,
        summary,
    })
}

fn output_path(opts: &RunOptions, configured: &Option<String>, default: &str) -> PathBuf {
    output::resolve(&opts.out_dir, configured.as_deref().unwrap_or(default))
}

pub fn simulate(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<()> {
    let schedule = cfg.require_schedule()?;
    let init = cfg.profile.build()?;
    let run = run_schedule(&init, schedule, cfg, opts)?;

    let csv_path = output_path(opts, &cfg.outputs.trajectory_csv, "trajectory.csv");
    let json_path = output_path(opts, &cfg.outputs.summary_json, "summary.json");
    output::write_trajectory(&csv_path, init.len(), &run.trajectory.rows)?;
    output::write_json(&json_path, &run.summary)?;
    opts.say(format!(
        "wrote {} and {}",
        csv_path.display(),
        json_path.display()
    ));

    let s = &run.summary;
    match &s.failure {
        Some(f) => Err(CliError::Numerical(format!(
            "numerical failure at step {}: {}",
            f.step, f.error
        ))),
        None => {
            let horizon = s
                .convergence_horizon
                .map_or("not reached".to_string(), |h| h.to_string());
            opts.say(format!(
                "convergence horizon: {horizon}, flips: {}",
                s.total_flips
            ));
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RankedSchedule {
    pub rank: usize,
    pub name: String,
    pub trajectory_csv: String,
    #[serde(flatten)]
    pub summary: SimulationSummary,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub depth: usize,
    pub steps: u64,
    pub ratio_tolerance: f64,
    /// Ordered by convergence horizon (unreached last), then total flips,
    /// then name.
    pub ranking: Vec<RankedSchedule>,
}

/// File-name-safe version of a schedule name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn compare(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<()> {
    let named = cfg.require_schedules()?;
    let init = cfg.profile.build()?;

    let mut stems: Vec<String> = named.iter().map(|n| file_stem(&n.name)).collect();
    stems.sort_unstable();
    if stems.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config(
            "schedule names collide after file-name sanitising".into(),
        ));
    }

    let mut ranking = Vec::with_capacity(named.len());
    for n in named {
        let run = run_schedule(&init, &n.schedule, cfg, opts)?;
        let file = format!("trajectory_{}.csv", file_stem(&n.name));
        output::write_trajectory(
            &output::resolve(&opts.out_dir, &file),
            init.len(),
            &run.trajectory.rows,
        )?;
        ranking.push(RankedSchedule {
            rank: 0,
            name: n.name.clone(),
            trajectory_csv: file,
            summary: run.summary,
        });
    }
    ranking.sort_by(|a, b| {
        let key = |r: &RankedSchedule| {
            (
                r.summary.convergence_horizon.unwrap_or(u64::MAX),
                r.summary.total_flips,
            )
        };
        key(a).cmp(&key(b)).then_with(|| a.name.cmp(&b.name))
    });
    for (i, r) in ranking.iter_mut().enumerate() {
        r.rank = i + 1;
    }

    let failed: Vec<String> = ranking
        .iter()
        .filter_map(|r| {
            r.summary
                .failure
                .as_ref()
                .map(|f| format!("{} (step {})", r.name, f.step))
        })
        .collect();
    let comparison = Comparison {
        depth: init.len(),
        steps: cfg.steps,
        ratio_tolerance: cfg.ratio_tolerance,
        ranking,
    };
    let json_path = output_path(opts, &cfg.outputs.comparison_json, "comparison.json");
    output::write_json(&json_path, &comparison)?;
    opts.say(format!(
        "wrote {} and {} trajectories",
        json_path.display(),
        comparison.ranking.len()
    ));
    for r in &comparison.ranking {
        let horizon = r
            .summary
            .convergence_horizon
            .map_or("-".to_string(), |h| h.to_string());
        opts.say(format!(
            "{:>3}. {:<28} horizon {:>8}  flips {}",
            r.rank, r.name, horizon, r.summary.total_flips
        ));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "numerical failure in: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Debug, Serialize)]
pub struct EnsembleSummary {
    pub schedule: String,
    pub depth: usize,
    pub steps: u64,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub trials_run: usize,
    pub trials_included: usize,
    pub excluded_trials: usize,
    pub excluded: Vec<ExcludedTrial>,
    /// Ensemble mean `||W||^2` against the deterministic model. Only
    /// meaningful without rescaling, so absent when constrain or
    /// renormalisation is enabled.
    pub model_deviation: Option<Deviation>,
    pub model_error: Option<String>,
    /// Ensemble mean ELR against the constrain target, from step 1 on.
    pub elr_goal_deviation: Option<Deviation>,
    pub max_abs_cosine: f64,
    pub final_mean_s_rel: Option<f64>,
}

fn thread_count(configured: Option<usize>, cap: Option<usize>) -> usize {
    let base =
        configured.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.map_or(base, |c| base.min(c)).max(1)
}

pub fn monte_carlo(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<()> {
    let schedule = cfg.require_schedule()?;
    let init = cfg.profile.build()?;
    let mut mc = cfg.require_mc()?.clone();
    if let Some(seed) = opts.seed {
        mc.seed = seed;
    }
    mc.threads = Some(thread_count(mc.threads, opts.thread_cap));

    let ensemble = mc_ensemble(&init, schedule, cfg.steps, &mc)?;

    let rescaled = mc.constrain.is_some() || mc.renormalize_weights;
    let (model_dev, model_error) = if rescaled || ensemble.steps.is_empty() {
        (None, None)
    } else {
        match model_deviation(&ensemble, &init, schedule) {
            Ok(d) => (d, None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let summary = EnsembleSummary {
        schedule: schedule.kind_name().to_string(),
        depth: init.len(),
        steps: cfg.steps,
        rows: mc.rows,
        cols: mc.cols,
        seed: mc.seed,
        trials_run: ensemble.trials_run,
        trials_included: ensemble.trials_included,
        excluded_trials: ensemble.excluded.len(),
        excluded: ensemble.excluded.clone(),
        model_deviation: model_dev,
        model_error,
        elr_goal_deviation: mc
            .constrain
            .as_ref()
            .and_then(|p| elr_goal_deviation(&ensemble, p.e_goal)),
        max_abs_cosine: ensemble
            .steps
            .iter()
            .map(|s| s.max_abs_cosine)
            .fold(0.0, f64::max),
        final_mean_s_rel: ensemble.steps.last().map(|s| s.mean_s_rel),
    };

    let csv_path = output_path(opts, &cfg.outputs.ensemble_csv, "ensemble.csv");
    let json_path = output_path(opts, &cfg.outputs.summary_json, "summary.json");
    output::write_ensemble(&csv_path, &ensemble)?;
    output::write_json(&json_path, &summary)?;
    opts.say(format!(
        "wrote {} and {}",
        csv_path.display(),
        json_path.display()
    ));
    if let Some(d) = &summary.model_deviation {
        opts.say(format!(
            "max relative deviation from model: {:.3e} at step {} (layer {}), {:.2} standard errors",
            d.max_rel_deviation, d.step, d.layer, d.max_std_errors
        ));
    }
    if let Some(d) = &summary.elr_goal_deviation {
        opts.say(format!(
            "max relative deviation from ELR goal: {:.3e} at step {} (layer {})",
            d.max_rel_deviation, d.step, d.layer
        ));
    }
    if summary.excluded_trials > 0 {
        opts.say(format!(
            "excluded {} of {} trials",
            summary.excluded_trials, summary.trials_run
        ));
    }
    if ensemble.trials_included == 0 {
        return Err(CliError::Numerical("every trial overflowed".into()));
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
