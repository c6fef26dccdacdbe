//! Monte Carlo experiment harness with byte-deterministic artifacts.
//!
//! Trials are paired: the scene of trial `t` depends only on the experiment
//! seed and `t`, and each stage's noise depends only on the trial seed and
//! the stage index, so every strategy, transmit power and exploration split
//! faces identical targets and noise. Trials run in parallel but are
//! reduced sequentially in trial order, making the emitted CSV bytes
//! independent of the thread count.

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, BeamformerPair, SceneParams, steering_vector};
use crate::error::{Result, SenseError};
use crate::linalg::{C64, cr};
use crate::posterior::AngleGrid;
use crate::random::{complex_standard_normal, derive_seed, rng_from};
use crate::strategy::{RunOutput, SensingConfig, StageRecord, StrategyKind, run_strategy};
use rand::Rng;

/// Fraction of failed trials a cell may absorb before the aggregate is
/// considered untrustworthy.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Seed stream tag for the per-trial scene draw. Stage seeds use small tags
/// on the same trial seed, so this must stay far away from any plausible
/// stage count.
const SCENE_STREAM: u64 = u64::MAX;

/// Full description of one experiment. Field names double as the JSON
/// configuration schema; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub n_tx: usize,
    pub n_rx: usize,
    /// Transmit beams and combiner columns per stage.
    pub m_t: usize,
    pub m_r: usize,
    pub num_targets: usize,
    pub grid_points_per_axis: usize,
    pub angle_range: (f64, f64),
    /// Sensing stages per trial.
    pub stages: usize,
    /// Alternation rounds per stage for the bound-minimizing strategy.
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
    /// Per-stage transmit energy is `10^(snr_db / 10)`; with the default
    /// unit-magnitude coefficients this is the per-stage SNR.
    pub snr_db: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
    /// Exploration splits to sweep for the bound-minimizing strategy.
    /// Baselines ignore the split and report a single cell at 0.
    pub t_explore: Vec<usize>,
    /// Draw coefficients as standard complex Gaussians instead of fixed
    /// magnitudes with uniform phases.
    pub alpha_random: bool,
    /// Per-target coefficient magnitudes; unit magnitude when omitted.
    pub coeff_magnitudes: Option<Vec<f64>>,
    /// Pin the target angles instead of drawing them uniformly per trial.
    pub fixed_angles: Option<Vec<f64>>,
    /// Also run one traced trial and emit posterior, beampattern and stage
    /// record artifacts for it.
    pub trace: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            n_tx: 1,
            n_rx: 8,
            m_t: 1,
            m_r: 4,
            num_targets: 1,
            grid_points_per_axis: 64,
            angle_range: (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
            stages: 8,
            rounds: 1,
            trials: 10,
            seed: 0,
            snr_db: vec![10.0],
            strategies: vec![
                StrategyKind::Proposed,
                StrategyKind::Random,
                StrategyKind::Steering,
            ],
            t_explore: vec![0],
            alpha_random: false,
            coeff_magnitudes: None,
            fixed_angles: None,
            trace: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(SenseError::Config("need at least one trial".into()));
        }
        if self.snr_db.is_empty() {
            return Err(SenseError::Config("need at least one SNR point".into()));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(SenseError::Config("SNR points must be finite".into()));
        }
        if has_duplicates(&self.snr_db, |a, b| a == b) {
            return Err(SenseError::Config("duplicate SNR points".into()));
        }
        if self.strategies.is_empty() {
            return Err(SenseError::Config("need at least one strategy".into()));
        }
        if has_duplicates(&self.strategies, |a, b| a == b) {
            return Err(SenseError::Config("duplicate strategies".into()));
        }
        if self.strategies.contains(&StrategyKind::Proposed) && self.t_explore.is_empty() {
            return Err(SenseError::Config(
                "the proposed strategy needs at least one exploration split".into(),
            ));
        }
        if has_duplicates(&self.t_explore, |a, b| a == b) {
            return Err(SenseError::Config("duplicate exploration splits".into()));
        }
        if let Some(mags) = &self.coeff_magnitudes {
            if mags.len() != self.num_targets {
                return Err(SenseError::Config(format!(
                    "{} coefficient magnitudes for {} targets",
                    mags.len(),
                    self.num_targets
                )));
            }
            if mags.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
                return Err(SenseError::Config(
                    "coefficient magnitudes must be positive and finite".into(),
                ));
            }
        }
        if let Some(angles) = &self.fixed_angles {
            if angles.len() != self.num_targets {
                return Err(SenseError::Config(format!(
                    "{} fixed angles for {} targets",
                    angles.len(),
                    self.num_targets
                )));
            }
            let (lo, hi) = self.angle_range;
            if angles.iter().any(|a| !(*a >= lo && *a <= hi)) {
                return Err(SenseError::Config(
                    "fixed angles must lie inside the angle range".into(),
                ));
            }
        }
        // Geometry and per-stage parameters are validated through a sample
        // sensing configuration.
        self.sensing_config(self.snr_db[0], 0)?.validate()
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.n_tx, self.n_rx)
    }

    /// Per-cell run configuration at one transmit power and exploration
    /// split.
    pub fn sensing_config(&self, snr_db: f64, t_explore: usize) -> Result<SensingConfig> {
        Ok(SensingConfig {
            geom: self.geometry()?,
            num_targets: self.num_targets,
            grid_points_per_axis: self.grid_points_per_axis,
            angle_range: self.angle_range,
            stages: self.stages,
            m_t: self.m_t,
            m_r: self.m_r,
            power: 10f64.powf(snr_db / 10.0),
            explore_stages: t_explore,
            rounds: self.rounds,
            dual: Default::default(),
        })
    }
}

fn has_duplicates<T>(items: &[T], eq: impl Fn(&T, &T) -> bool) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[..i].iter().any(|b| eq(a, b)))
}

/// Scene of one trial, identical across strategies, powers and splits.
pub fn draw_scene(spec: &ExperimentSpec, trial_seed: u64) -> Result<SceneParams> {
    let mut rng = rng_from(derive_seed(trial_seed, SCENE_STREAM));
    let l = spec.num_targets;
    let angles: Vec<f64> = match &spec.fixed_angles {
        Some(fixed) => fixed.clone(),
        None => {
            let (lo, hi) = spec.angle_range;
            (0..l).map(|_| rng.random_range(lo..hi)).collect()
        }
    };
    let mut coeffs = Vec::with_capacity(l);
    for i in 0..l {
        let mag = spec
            .coeff_magnitudes
            .as_ref()
            .map_or(1.0, |mags| mags[i]);
        let alpha = if spec.alpha_random {
            complex_standard_normal(&mut rng) * cr(mag)
        } else {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            C64::new(phase.cos(), phase.sin()) * cr(mag)
        };
        coeffs.push(alpha);
    }
    SceneParams::new(angles, coeffs)
}

/// One row of the aggregate error table.
#[derive(Debug, Clone, PartialEq)]
pub struct WmseRow {
    pub strategy: String,
    pub snr_db: f64,
    pub t_explore: usize,
    pub trials: usize,
    pub wmse_mean: f64,
    pub wmse_stderr: f64,
    pub failures: usize,
}

/// Result of a full experiment, before any files are written.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub wmse_rows: Vec<WmseRow>,
    pub traced: Option<TracedTrial>,
}

/// The single traced trial behind the posterior and beampattern artifacts.
#[derive(Debug)]
pub struct TracedTrial {
    pub strategy: StrategyKind,
    pub snr_db: f64,
    pub t_explore: usize,
    pub run: RunOutput,
}

/// Averages the surviving trials of one cell. Failed trials are excluded
/// from the mean and counted; more than [`MAX_FAILURE_FRACTION`] of them
/// fails the cell.
fn summarize_cell(outcomes: Vec<Result<f64>>) -> Result<(f64, f64, usize)> {
    let trials = outcomes.len();
    let mut kept = Vec::with_capacity(trials);
    let mut failures = 0usize;
    for (trial, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(wmse) => kept.push(wmse),
            Err(e) if e.is_trial_failure() => {
                failures += 1;
                log::warn!("event=trial_failure trial={trial} error=\"{e}\"");
            }
            Err(e) => return Err(e),
        }
    }
    if failures as f64 > trials as f64 * MAX_FAILURE_FRACTION {
        return Err(SenseError::FailureBudget {
            failures,
            trials,
            max_fraction: MAX_FAILURE_FRACTION,
        });
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let stderr = if kept.len() > 1 {
        let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr, failures))
}

fn run_cell(
    spec: &ExperimentSpec,
    strategy: StrategyKind,
    snr_db: f64,
    t_explore: usize,
) -> Result<WmseRow> {
    let config = spec.sensing_config(snr_db, t_explore)?;
    let outcomes: Vec<Result<f64>> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = derive_seed(spec.seed, trial as u64);
            let scene = draw_scene(spec, trial_seed)?;
            run_strategy(strategy, &config, &scene, trial_seed, false).map(|out| out.wmse)
        })
        .collect();
    let (wmse_mean, wmse_stderr, failures) = summarize_cell(outcomes)?;
    log::info!(
        "event=cell_done strategy={} snr_db={snr_db} t_explore={t_explore} wmse={wmse_mean:.6e} failures={failures}",
        strategy.label()
    );
    Ok(WmseRow {
        strategy: strategy.label().to_string(),
        snr_db,
        t_explore,
        trials: spec.trials,
        wmse_mean,
        wmse_stderr,
        failures,
    })
}

/// Runs every cell of the experiment and, when requested, one traced trial
/// of the first cell.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &strategy in &spec.strategies {
        let splits: &[usize] = if strategy == StrategyKind::Proposed {
            &spec.t_explore
        } else {
            &[0]
        };
        for &snr_db in &spec.snr_db {
            for &t_explore in splits {
                rows.push(run_cell(spec, strategy, snr_db, t_explore)?);
            }
        }
    }
    rows.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(a.snr_db.partial_cmp(&b.snr_db).unwrap())
            .then(a.t_explore.cmp(&b.t_explore))
    });

    let traced = if spec.trace {
        let strategy = spec.strategies[0];
        let snr_db = spec.snr_db[0];
        let t_explore = if strategy == StrategyKind::Proposed {
            spec.t_explore[0]
        } else {
            0
        };
        let config = spec.sensing_config(snr_db, t_explore)?;
        let trial_seed = derive_seed(spec.seed, 0);
        let scene = draw_scene(spec, trial_seed)?;
        let run = run_strategy(strategy, &config, &scene, trial_seed, true)?;
        Some(TracedTrial {
            strategy,
            snr_db,
            t_explore,
            run,
        })
    } else {
        None
    };

    Ok(ExperimentOutcome {
        wmse_rows: rows,
        traced,
    })
}

/// Formats the aggregate table. Floats use 10 significant digits, which
/// round-trips exactly through [`parse_wmse_csv`].
pub fn format_wmse_csv(rows: &[WmseRow]) -> String {
    let mut out = String::from("strategy,snr_db,t_explore,trials,wmse_mean,wmse_stderr,failures\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.9e},{},{},{:.9e},{:.9e},{}",
            r.strategy, r.snr_db, r.t_explore, r.trials, r.wmse_mean, r.wmse_stderr, r.failures
        )
        .expect("writing to a string cannot fail");
    }
    out
}

pub fn parse_wmse_csv(text: &str) -> Result<Vec<WmseRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SenseError::Config("empty aggregate table".into()))?;
    if header != "strategy,snr_db,t_explore,trials,wmse_mean,wmse_stderr,failures" {
        return Err(SenseError::Config(format!(
            "unexpected aggregate header '{header}'"
        )));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(SenseError::Config(format!(
                "row {} has {} fields, expected 7",
                idx + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| SenseError::Config(format!("bad float '{s}': {e}")))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|e| SenseError::Config(format!("bad integer '{s}': {e}")))
        };
        rows.push(WmseRow {
            strategy: fields[0].to_string(),
            snr_db: parse_f(fields[1])?,
            t_explore: parse_u(fields[2])?,
            trials: parse_u(fields[3])?,
            wmse_mean: parse_f(fields[4])?,
            wmse_stderr: parse_f(fields[5])?,
            failures: parse_u(fields[6])?,
        });
    }
    Ok(rows)
}

/// Posterior weights per stage over the whole grid. Stage 0 is the prior.
pub fn format_posterior_trace(grid: &AngleGrid, trace: &[Vec<f64>]) -> String {
    let l = grid.num_targets();
    let mut out = String::from("stage,grid_point_index");
    for i in 1..=l {
        write!(out, ",angle_{i}").expect("writing to a string cannot fail");
    }
    out.push_str(",weight\n");
    for (stage, weights) in trace.iter().enumerate() {
        for (g, w) in weights.iter().enumerate() {
            write!(out, "{stage},{g}").expect("writing to a string cannot fail");
            for angle in grid.point(g) {
                write!(out, ",{angle:.9e}").expect("writing to a string cannot fail");
            }
            writeln!(out, ",{w:.9e}").expect("writing to a string cannot fail");
        }
    }
    out
}

/// Number of angles the beampatterns are sampled at.
pub const BEAMPATTERN_POINTS: usize = 512;

/// Transmit and receive array gains of each stage's beamformers over the
/// angle range.
pub fn format_beampattern(
    geom: &ArrayGeometry,
    angle_range: (f64, f64),
    pairs: &[BeamformerPair],
) -> String {
    let (lo, hi) = angle_range;
    let step = (hi - lo) / (BEAMPATTERN_POINTS - 1) as f64;
    let mut out = String::from("stage,beamformer,angle,gain\n");
    for (stage, pair) in pairs.iter().enumerate() {
        for (side, columns, len) in [("tx", &pair.v, geom.n_tx), ("rx", &pair.w, geom.n_rx)] {
            for i in 0..BEAMPATTERN_POINTS {
                let angle = lo + step * i as f64;
                let steer = steering_vector(len, angle);
                let gain: f64 = columns
                    .column_iter()
                    .map(|c| c.dotc(&steer).norm_sqr())
                    .sum();
                writeln!(out, "{stage},{side},{angle:.9e},{gain:.9e}")
                    .expect("writing to a string cannot fail");
            }
        }
    }
    out
}

/// Per-stage diagnostics of the traced trial.
pub fn format_stage_records(strategy_label: &str, records: &[StageRecord]) -> String {
    let mut out = String::from("stage,strategy,bcrb,rx_certified,tx_certified,squared_angle_error\n");
    for r in records {
        write!(out, "{},{}", r.stage, strategy_label).expect("writing to a string cannot fail");
        match r.bcrb {
            Some(b) => write!(out, ",{b:.9e}"),
            None => write!(out, ","),
        }
        .expect("writing to a string cannot fail");
        match r.rx_certified {
            Some(c) => write!(out, ",{c}"),
            None => write!(out, ","),
        }
        .expect("writing to a string cannot fail");
        match r.tx_certified {
            Some(c) => write!(out, ",{c}"),
            None => write!(out, ","),
        }
        .expect("writing to a string cannot fail");
        writeln!(out, ",{:.9e}", r.angle_mse).expect("writing to a string cannot fail");
    }
    out
}

#[derive(Serialize)]
struct RunMeta<'a> {
    spec: &'a ExperimentSpec,
    commit: String,
}

fn git_commit_hash() -> Option<String> {
    let output = Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    if !output.status.success() {
        return None;
    }
    let hash = String::from_utf8_lossy(&output.stdout).trim().to_string();
    (!hash.is_empty()).then_some(hash)
}

/// Writes `wmse.csv` and `run_meta.json`, plus the traced-trial artifacts
/// (`posterior_trace.csv`, `beampattern.csv`, `stage_records.csv`) when the
/// outcome carries a trace.
pub fn write_artifacts(
    spec: &ExperimentSpec,
    outcome: &ExperimentOutcome,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("wmse.csv"), format_wmse_csv(&outcome.wmse_rows))?;
    let meta = RunMeta {
        spec,
        commit: git_commit_hash().unwrap_or_else(|| "unknown".to_string()),
    };
    let mut meta_json = serde_json::to_string_pretty(&meta)?;
    meta_json.push('\n');
    std::fs::write(out_dir.join("run_meta.json"), meta_json)?;

    if let Some(traced) = &outcome.traced {
        let grid = traced.run.final_state.grid();
        let trace = traced
            .run
            .trace
            .as_ref()
            .expect("traced trials always record weights");
        std::fs::write(
            out_dir.join("posterior_trace.csv"),
            format_posterior_trace(grid, trace),
        )?;
        let geom = *traced.run.final_state.geom();
        std::fs::write(
            out_dir.join("beampattern.csv"),
            format_beampattern(&geom, spec.angle_range, &traced.run.pairs),
        )?;
        std::fs::write(
            out_dir.join("stage_records.csv"),
            format_stage_records(traced.strategy.label(), &traced.run.records),
        )?;
    }
    Ok(())
}
