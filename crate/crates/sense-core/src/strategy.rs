//! Per-trial sensing strategies: how each stage's beamformer pair is chosen
//! and how the posterior advances through a fixed number of stages.
//!
//! All strategies share the same stage driver. The noise of stage `t` is
//! seeded from `(trial_seed, t)` alone, never from the strategy or its
//! options, so runs with the same trial seed see identical noise and their
//! error differences come from the beamformer choices only. Each strategy
//! consumes the leading columns of the stage noise matching its transmit
//! column count.

use crate::array::{
    ArrayGeometry, BeamformerPair, SceneParams, draw_noise, measurement_from_noise,
    target_response,
};
use crate::bfim::{WeightMatrix, fim_cache, prior_fim, standard_base_prior};
use crate::dual::{AlternatingOptions, DualOptions, alternating_optimize};
use crate::error::{Result, SenseError};
use crate::linalg::{C64, CMat, RVec, cr};
use crate::posterior::{PosteriorState, absorb_measurement, init_posterior, mmse_estimate};
use crate::random::{derive_seed, haar_orthonormal_columns, rng_from};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Seed stream tags under one stage seed. The noise stream must stay
/// strategy-independent; the design stream feeds whatever randomness the
/// strategy itself needs.
const NOISE_STREAM: u64 = 0;
const DESIGN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// Bound-minimizing design via the alternating dual solves.
    Proposed,
    /// Isotropic random probing: orthonormal combiner, power-normalized
    /// random orthogonal beams.
    Random,
    /// Beams steered at the current channel estimate.
    Steering,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Proposed => "proposed",
            StrategyKind::Random => "random",
            StrategyKind::Steering => "steering",
        }
    }

    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Proposed,
        StrategyKind::Random,
        StrategyKind::Steering,
    ];
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = SenseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(StrategyKind::Proposed),
            "random" => Ok(StrategyKind::Random),
            "steering" => Ok(StrategyKind::Steering),
            other => Err(SenseError::Config(format!(
                "unknown strategy '{other}', expected proposed, random or steering"
            ))),
        }
    }
}

/// Static description of one sensing run.
#[derive(Debug, Clone)]
pub struct SensingConfig {
    pub geom: ArrayGeometry,
    pub num_targets: usize,
    /// Grid resolution per angle axis.
    pub grid_points_per_axis: usize,
    pub angle_range: (f64, f64),
    /// Number of sensing stages.
    pub stages: usize,
    /// Transmit beams and combiner columns per stage.
    pub m_t: usize,
    pub m_r: usize,
    /// Transmit energy budget per stage.
    pub power: f64,
    /// Stages (from the start) on which the bound-minimizing design spreads
    /// power instead of concentrating it.
    pub explore_stages: usize,
    /// Alternation rounds per stage.
    pub rounds: usize,
    pub dual: DualOptions,
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_targets == 0 {
            return Err(SenseError::Config("need at least one target".into()));
        }
        if self.stages == 0 {
            return Err(SenseError::Config("need at least one stage".into()));
        }
        if self.rounds == 0 {
            return Err(SenseError::Config("need at least one alternation round".into()));
        }
        if self.m_t == 0 || self.m_t > self.geom.n_tx {
            return Err(SenseError::Config(format!(
                "transmit beams {} must be in 1..={}",
                self.m_t, self.geom.n_tx
            )));
        }
        if self.m_r == 0 || self.m_r > self.geom.n_rx {
            return Err(SenseError::Config(format!(
                "combiner columns {} must be in 1..={}",
                self.m_r, self.geom.n_rx
            )));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(SenseError::Config(format!(
                "transmit power must be positive and finite, got {}",
                self.power
            )));
        }
        Ok(())
    }
}

/// Diagnostics recorded after every stage.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: usize,
    /// Bound value the design achieved before the measurement, when the
    /// strategy computes one.
    pub bcrb: Option<f64>,
    /// Whether every combiner / transmit solve of the stage was certified.
    pub rx_certified: Option<bool>,
    pub tx_certified: Option<bool>,
    /// Steering fell back to random probing for lack of a channel estimate.
    pub fallback: bool,
    /// Posterior weight entropy after the update.
    pub entropy: f64,
    /// Mean squared angle error of the running estimate, truth and estimate
    /// both sorted.
    pub angle_mse: f64,
}

/// Result of one full trial.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_state: PosteriorState,
    /// Final angle estimate, ascending.
    pub estimate: RVec,
    /// Mean squared angle error of the final estimate.
    pub wmse: f64,
    pub records: Vec<StageRecord>,
    /// Beamformer pair used at each stage.
    pub pairs: Vec<BeamformerPair>,
    /// Posterior weights before any measurement and after each stage, when
    /// tracing was requested.
    pub trace: Option<Vec<Vec<f64>>>,
}

struct StageChoice {
    pair: BeamformerPair,
    bcrb: Option<f64>,
    rx_certified: Option<bool>,
    tx_certified: Option<bool>,
    fallback: bool,
}

/// Stage noise shared by every strategy at the same `(trial_seed, stage)`.
fn stage_noise(trial_seed: u64, stage: usize, geom: &ArrayGeometry, cols: usize) -> CMat {
    let stage_seed = derive_seed(trial_seed, stage as u64);
    let mut rng = rng_from(derive_seed(stage_seed, NOISE_STREAM));
    draw_noise(geom, cols, &mut rng)
}

fn design_seed(trial_seed: u64, stage: usize) -> u64 {
    derive_seed(derive_seed(trial_seed, stage as u64), DESIGN_STREAM)
}

fn random_pair(config: &SensingConfig, rng: &mut impl Rng) -> BeamformerPair {
    let geom = config.geom;
    let v = haar_orthonormal_columns(rng, geom.n_tx, config.m_t)
        .map(|x| x * cr((config.power / config.m_t as f64).sqrt()));
    let w = haar_orthonormal_columns(rng, geom.n_rx, config.m_r);
    BeamformerPair::new(v, w)
}

/// Posterior mean of the scene: angles and coefficients averaged after
/// sorting each grid point's targets by angle, so relabelings of the same
/// constellation reinforce instead of cancelling.
fn mmse_scene_estimate(state: &PosteriorState) -> Result<SceneParams> {
    let l = state.num_targets();
    let mut angles = vec![0.0; l];
    let mut coeffs = vec![C64::new(0.0, 0.0); l];
    let weights = state.weights();
    for (g, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let point = state.grid().point(g);
        let mean = &state.conditional(g).mean;
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| point[a].partial_cmp(&point[b]).unwrap());
        for (slot, &i) in order.iter().enumerate() {
            angles[slot] += w * point[i];
            coeffs[slot] += mean[i] * cr(w);
        }
    }
    SceneParams::new(angles, coeffs)
}

/// Extends orthonormal columns to `total` columns with seeded random ones.
fn complete_orthonormal(base: &CMat, total: usize, rng: &mut impl Rng) -> CMat {
    let rows = base.nrows();
    debug_assert!(total <= rows);
    if base.ncols() >= total {
        return base.columns(0, total).into_owned();
    }
    let extra = crate::random::complex_gaussian_matrix(rng, rows, total - base.ncols());
    let mut stacked = CMat::zeros(rows, base.ncols() + extra.ncols());
    stacked.view_mut((0, 0), (rows, base.ncols())).copy_from(base);
    stacked
        .view_mut((0, base.ncols()), (rows, extra.ncols()))
        .copy_from(&extra);
    let q = stacked.qr().q();
    q.columns(0, total).into_owned()
}

/// Beams at the posterior-mean channel: combiner from its top left singular
/// vectors, a single full-power transmit beam at its top right singular
/// vector. Falls back to random probing while the channel estimate is zero,
/// which is always the case before the first measurement under the
/// zero-mean coefficient prior.
fn steering_pair(
    state: &PosteriorState,
    config: &SensingConfig,
    rng: &mut impl Rng,
) -> Result<(BeamformerPair, bool)> {
    let geom = config.geom;
    let scene = mmse_scene_estimate(state)?;
    let h = target_response(&scene, &geom);
    if h.norm() <= 1e-12 {
        return Ok((random_pair(config, rng), true));
    }
    let svd = h.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut u_sorted = CMat::zeros(u.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src).into_owned());
    }
    let w = complete_orthonormal(&u_sorted, config.m_r, rng);
    let top_right = v_t.row(order[0]);
    let mut v = CMat::zeros(top_right.ncols(), 1);
    for (i, x) in top_right.iter().enumerate() {
        v[(i, 0)] = x.conj() * cr(config.power.sqrt());
    }
    Ok((BeamformerPair::new(v, w), false))
}

fn choose_pair(
    kind: StrategyKind,
    config: &SensingConfig,
    state: &PosteriorState,
    stage: usize,
    trial_seed: u64,
) -> Result<StageChoice> {
    match kind {
        StrategyKind::Proposed => {
            let cache = fim_cache(state);
            let base = standard_base_prior(config.num_targets);
            let (prior, _clipped) = prior_fim(&cache, state.history(), &base)?;
            let q = WeightMatrix::angles_only(config.num_targets);
            let alt = alternating_optimize(
                &cache,
                &prior,
                &q,
                &AlternatingOptions {
                    rounds: config.rounds,
                    m_t: config.m_t,
                    m_r: config.m_r,
                    power: config.power,
                    explore: stage < config.explore_stages,
                    dual: config.dual.clone(),
                    seed: design_seed(trial_seed, stage),
                },
            )?;
            Ok(StageChoice {
                pair: alt.pair,
                bcrb: Some(alt.final_bound),
                rx_certified: Some(alt.rx_certificates.iter().all(|&c| c)),
                tx_certified: Some(alt.tx_certificates.iter().all(|&c| c)),
                fallback: false,
            })
        }
        StrategyKind::Random => {
            let mut rng = rng_from(design_seed(trial_seed, stage));
            Ok(StageChoice {
                pair: random_pair(config, &mut rng),
                bcrb: None,
                rx_certified: None,
                tx_certified: None,
                fallback: false,
            })
        }
        StrategyKind::Steering => {
            let mut rng = rng_from(design_seed(trial_seed, stage));
            let (pair, fallback) = steering_pair(state, config, &mut rng)?;
            Ok(StageChoice {
                pair,
                bcrb: None,
                rx_certified: None,
                tx_certified: None,
                fallback,
            })
        }
    }
}

fn sorted_angles(scene: &SceneParams) -> Vec<f64> {
    let mut a = scene.angles().to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    a
}

/// Runs one trial of `kind` against the fixed `scene`. Errors inside a
/// stage are tagged with the stage index so the caller can budget failures.
pub fn run_strategy(
    kind: StrategyKind,
    config: &SensingConfig,
    scene: &SceneParams,
    trial_seed: u64,
    record_trace: bool,
) -> Result<RunOutput> {
    config.validate()?;
    if scene.num_targets() != config.num_targets {
        return Err(SenseError::Config(format!(
            "scene has {} targets, config expects {}",
            scene.num_targets(),
            config.num_targets
        )));
    }
    let geom = config.geom;
    let mut state = init_posterior(
        geom,
        config.angle_range,
        config.grid_points_per_axis,
        config.num_targets,
    )?;
    let truth = sorted_angles(scene);
    let mut records = Vec::with_capacity(config.stages);
    let mut pairs = Vec::with_capacity(config.stages);
    let mut trace = if record_trace {
        Some(vec![state.weights()])
    } else {
        None
    };

    for stage in 0..config.stages {
        let noise = stage_noise(trial_seed, stage, &geom, config.m_t);
        let choice =
            choose_pair(kind, config, &state, stage, trial_seed).map_err(|e| e.at_stage(stage))?;
        let y = measurement_from_noise(scene, &geom, &choice.pair, &noise)
            .map_err(|e| e.at_stage(stage))?;
        state = absorb_measurement(&state, &choice.pair, &y).map_err(|e| e.at_stage(stage))?;
        let estimate = mmse_estimate(&state);
        let angle_mse = truth
            .iter()
            .zip(estimate.iter())
            .map(|(t, e)| (t - e).powi(2))
            .sum::<f64>()
            / config.num_targets as f64;
        records.push(StageRecord {
            stage,
            bcrb: choice.bcrb,
            rx_certified: choice.rx_certified,
            tx_certified: choice.tx_certified,
            fallback: choice.fallback,
            entropy: state.entropy(),
            angle_mse,
        });
        pairs.push(choice.pair);
        if let Some(t) = trace.as_mut() {
            t.push(state.weights());
        }
    }

    let estimate = mmse_estimate(&state);
    let wmse = records.last().expect("at least one stage").angle_mse;
    Ok(RunOutput {
        final_state: state,
        estimate,
        wmse,
        records,
        pairs,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::IM;
    use crate::posterior::ConditionalGaussian;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_3;

    fn tiny_config(geom: ArrayGeometry, m_t: usize, m_r: usize, stages: usize) -> SensingConfig {
        SensingConfig {
            geom,
            num_targets: 1,
            grid_points_per_axis: 12,
            angle_range: (-FRAC_PI_3, FRAC_PI_3),
            stages,
            m_t,
            m_r,
            power: 2.0,
            explore_stages: 0,
            rounds: 1,
            dual: DualOptions::default(),
        }
    }

    fn test_scene() -> SceneParams {
        SceneParams::new(vec![0.27], vec![C64::new(0.8, -0.6)]).unwrap()
    }

    #[test]
    fn random_probing_is_power_feasible_and_seed_deterministic() {
        let config = tiny_config(ArrayGeometry::new(3, 3).unwrap(), 2, 2, 3);
        let scene = test_scene();
        let a = run_strategy(StrategyKind::Random, &config, &scene, 5, false).unwrap();
        let b = run_strategy(StrategyKind::Random, &config, &scene, 5, false).unwrap();
        assert_eq!(a.wmse.to_bits(), b.wmse.to_bits());
        for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
            for (x, y) in pa.v.iter().zip(pb.v.iter()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
        for pair in &a.pairs {
            assert_relative_eq!(pair.transmit_energy(), 2.0, max_relative = 1e-10);
            let wtw = pair.w.adjoint() * &pair.w;
            assert!((wtw - CMat::identity(2, 2)).norm() < 1e-10);
        }
        let c = run_strategy(StrategyKind::Random, &config, &scene, 6, false).unwrap();
        assert_ne!(a.wmse.to_bits(), c.wmse.to_bits());
    }

    #[test]
    fn stage_noise_ignores_strategy_and_options() {
        let geom = ArrayGeometry::new(2, 4).unwrap();
        let n1 = stage_noise(99, 3, &geom, 2);
        let n2 = stage_noise(99, 3, &geom, 2);
        for (x, y) in n1.iter().zip(n2.iter()) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
        let other_stage = stage_noise(99, 4, &geom, 2);
        assert!((&n1 - other_stage).norm() > 1e-6);
    }

    #[test]
    fn bound_minimizing_runs_report_bounds_and_certificates() {
        let mut config = tiny_config(ArrayGeometry::new(3, 3).unwrap(), 1, 2, 2);
        config.explore_stages = 1;
        let scene = test_scene();
        let out = run_strategy(StrategyKind::Proposed, &config, &scene, 17, false).unwrap();
        assert_eq!(out.records.len(), 2);
        for rec in &out.records {
            let bcrb = rec.bcrb.expect("bound recorded");
            assert!(bcrb.is_finite() && bcrb > 0.0);
            assert!(rec.rx_certified.is_some());
            assert!(rec.tx_certified.is_some());
            assert!(rec.entropy.is_finite());
        }
        assert!(out.wmse.is_finite());
    }

    #[test]
    fn exploration_split_is_inert_with_a_single_transmit_beam() {
        let geom = ArrayGeometry::new(2, 3).unwrap();
        let mut config = tiny_config(geom, 1, 2, 3);
        let scene = test_scene();
        config.explore_stages = 0;
        let exploit = run_strategy(StrategyKind::Proposed, &config, &scene, 21, false).unwrap();
        config.explore_stages = 3;
        let explore = run_strategy(StrategyKind::Proposed, &config, &scene, 21, false).unwrap();
        assert_eq!(exploit.wmse.to_bits(), explore.wmse.to_bits());
        for (ra, rb) in exploit.records.iter().zip(&explore.records) {
            assert_eq!(ra.bcrb.unwrap().to_bits(), rb.bcrb.unwrap().to_bits());
            assert_eq!(ra.angle_mse.to_bits(), rb.angle_mse.to_bits());
        }
    }

    #[test]
    fn steering_aims_at_a_concentrated_posterior() {
        let geom = ArrayGeometry::new(4, 5).unwrap();
        let config = tiny_config(geom, 1, 2, 1);
        let state = init_posterior(geom, config.angle_range, 15, 1).unwrap();
        let g0 = 9;
        let mut lw = vec![f64::NEG_INFINITY; state.grid().len()];
        lw[g0] = 0.0;
        let state = state
            .with_log_weights(lw)
            .unwrap()
            .with_conditional(
                g0,
                ConditionalGaussian {
                    mean: nalgebra::DVector::from_vec(vec![C64::new(1.0, 0.3)]),
                    cov: CMat::identity(1, 1),
                },
            )
            .unwrap();
        let phi = state.grid().point(g0)[0];
        let mut rng = rng_from(2);
        let (pair, fallback) = steering_pair(&state, &config, &mut rng).unwrap();
        assert!(!fallback);
        assert_eq!(pair.v.ncols(), 1);
        assert_relative_eq!(pair.v.norm(), config.power.sqrt(), max_relative = 1e-10);
        let a_t = crate::array::steering_vector(geom.n_tx, phi);
        let tx_align = (pair.v.adjoint() * &a_t)[(0, 0)].norm()
            / (config.power.sqrt() * (geom.n_tx as f64).sqrt());
        assert!(tx_align > 1.0 - 1e-10, "transmit alignment {tx_align}");
        let a_r = crate::array::steering_vector(geom.n_rx, phi);
        let rx_align = (pair.w.column(0).adjoint() * &a_r).norm() / (geom.n_rx as f64).sqrt();
        assert!(rx_align > 1.0 - 1e-10, "combiner alignment {rx_align}");
        let wtw = pair.w.adjoint() * &pair.w;
        assert!((wtw - CMat::identity(2, 2)).norm() < 1e-10);
    }

    #[test]
    fn steering_falls_back_while_the_channel_estimate_is_zero() {
        let config = tiny_config(ArrayGeometry::new(3, 3).unwrap(), 2, 2, 2);
        let scene = test_scene();
        let out = run_strategy(StrategyKind::Steering, &config, &scene, 11, false).unwrap();
        assert!(
            out.records[0].fallback,
            "the zero-mean coefficient prior gives a zero channel estimate at stage 0"
        );
        assert!(!out.records[1].fallback);
    }

    #[test]
    fn traces_cover_prior_and_every_stage() {
        let config = tiny_config(ArrayGeometry::new(2, 2).unwrap(), 1, 1, 2);
        let scene = test_scene();
        let out = run_strategy(StrategyKind::Random, &config, &scene, 8, true).unwrap();
        let trace = out.trace.expect("requested");
        assert_eq!(trace.len(), 3);
        for weights in &trace {
            let sum: f64 = weights.iter().sum();
            assert_relative_eq!(sum, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn label_fold_keeps_scene_estimates_consistent() {
        let geom = ArrayGeometry::new(2, 2).unwrap();
        let state = init_posterior(geom, (-FRAC_PI_3, FRAC_PI_3), 5, 2).unwrap();
        let k = state.grid().len();
        // Two mirrored relabelings of the same constellation: mass on
        // (a, b) and on (b, a) with swapped coefficient means.
        let pa = state.grid().point_index(&[1, 3]);
        let pb = state.grid().point_index(&[3, 1]);
        let mut lw = vec![f64::NEG_INFINITY; k];
        lw[pa] = (0.5f64).ln();
        lw[pb] = (0.5f64).ln();
        let mean_a = nalgebra::DVector::from_vec(vec![C64::new(1.0, 0.0), IM]);
        let mean_b = nalgebra::DVector::from_vec(vec![IM, C64::new(1.0, 0.0)]);
        let state = state
            .with_log_weights(lw)
            .unwrap()
            .with_conditional(pa, ConditionalGaussian { mean: mean_a, cov: CMat::identity(2, 2) })
            .unwrap()
            .with_conditional(pb, ConditionalGaussian { mean: mean_b, cov: CMat::identity(2, 2) })
            .unwrap();
        let scene = mmse_scene_estimate(&state).unwrap();
        let grid_a = state.grid().point(pa);
        assert_relative_eq!(scene.angles()[0], grid_a[0].min(grid_a[1]), max_relative = 1e-12);
        assert_relative_eq!(scene.angles()[1], grid_a[0].max(grid_a[1]), max_relative = 1e-12);
        // The sorted fold pairs the same coefficient with the same angle in
        // both relabelings, so nothing cancels.
        assert_relative_eq!(scene.coeffs()[0].re, 1.0, max_relative = 1e-12);
        assert_relative_eq!(scene.coeffs()[1].im, 1.0, max_relative = 1e-12);
    }
}
