//! Grid posterior over target angles with complex Gaussian conditionals for
//! the reflection coefficients.
//!
//! The angle vector is discretized on a Cartesian grid. The posterior after
//! any number of stages factors exactly as
//! `p(angles, coeffs | data) = weight(grid point) * CN(coeffs; mean, cov)`,
//! because the measurement model is linear in the coefficients once the
//! angles are fixed. A measurement therefore enters in two steps sharing the
//! same predictive moments: a Bayes factor update of the grid log weights,
//! then a per-point Kalman update of the conditionals.

use rayon::prelude::*;

use crate::array::{ArrayGeometry, ArraySide, BeamformerPair};
use crate::error::{Result, SenseError};
use crate::linalg::{
    CMat, CVec, RVec, cholesky_with_jitter, hermitian_part, logsumexp, vec_columns,
};

/// Hard cap on the total number of grid points.
pub const MAX_GRID_POINTS: usize = 1 << 20;

/// Cartesian product grid over the angle vector. Points are stored flattened
/// with the last target's axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    flat: Vec<f64>,
    num_targets: usize,
    per_axis: usize,
    range: (f64, f64),
}

impl AngleGrid {
    pub fn new(range: (f64, f64), per_axis: usize, num_targets: usize) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SenseError::Config(format!(
                "angle range [{lo}, {hi}] is not a finite nonempty interval"
            )));
        }
        if per_axis < 2 {
            return Err(SenseError::Config(format!(
                "grid needs at least 2 points per axis, got {per_axis}"
            )));
        }
        if num_targets == 0 {
            return Err(SenseError::Config("grid needs at least one target".into()));
        }
        let total = per_axis
            .checked_pow(num_targets as u32)
            .filter(|&t| t <= MAX_GRID_POINTS)
            .ok_or_else(|| {
                SenseError::Config(format!(
                    "grid of {per_axis}^{num_targets} points exceeds the cap of {MAX_GRID_POINTS}"
                ))
            })?;
        let step = (hi - lo) / (per_axis - 1) as f64;
        let axis: Vec<f64> = (0..per_axis).map(|i| lo + step * i as f64).collect();
        let mut flat = Vec::with_capacity(total * num_targets);
        let mut digits = vec![0usize; num_targets];
        for _ in 0..total {
            flat.extend(digits.iter().map(|&d| axis[d]));
            for j in (0..num_targets).rev() {
                digits[j] += 1;
                if digits[j] < per_axis {
                    break;
                }
                digits[j] = 0;
            }
        }
        Ok(AngleGrid {
            flat,
            num_targets,
            per_axis,
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.num_targets
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64] {
        let l = self.num_targets;
        &self.flat[index * l..(index + 1) * l]
    }

    /// Flat index of the point with the given per-axis indices, last axis
    /// fastest.
    pub fn point_index(&self, axis_indices: &[usize]) -> usize {
        assert_eq!(axis_indices.len(), self.num_targets);
        axis_indices.iter().fold(0, |acc, &d| {
            assert!(d < self.per_axis);
            acc * self.per_axis + d
        })
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    /// Distance between adjacent points on one axis.
    pub fn spacing(&self) -> f64 {
        (self.range.1 - self.range.0) / (self.per_axis - 1) as f64
    }
}

/// Complex Gaussian over the coefficient vector at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: CVec,
    pub cov: CMat,
}

/// Beamformers applied during one past stage together with the measurement
/// they produced.
#[derive(Debug, Clone)]
pub struct StageData {
    pub pair: BeamformerPair,
    pub measurement: CMat,
}

/// Full posterior after any number of absorbed stages.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    geom: ArrayGeometry,
    grid: AngleGrid,
    log_weights: Vec<f64>,
    conditionals: Vec<ConditionalGaussian>,
    history: Vec<StageData>,
}

/// Uniform grid weights and standard CN(0, I) conditionals everywhere.
pub fn init_posterior(
    geom: ArrayGeometry,
    range: (f64, f64),
    per_axis: usize,
    num_targets: usize,
) -> Result<PosteriorState> {
    let grid = AngleGrid::new(range, per_axis, num_targets)?;
    let k = grid.len();
    let uniform = -(k as f64).ln();
    let prior = ConditionalGaussian {
        mean: CVec::zeros(num_targets),
        cov: CMat::identity(num_targets, num_targets),
    };
    Ok(PosteriorState {
        geom,
        grid,
        log_weights: vec![uniform; k],
        conditionals: vec![prior; k],
        history: Vec::new(),
    })
}

/// Predictive distribution of the vectorized measurement at one grid point,
/// before the measurement is seen.
#[derive(Debug, Clone)]
pub struct PredictiveMoments {
    /// Predicted measurement mean `C mean`.
    pub mean: CVec,
    /// Coefficient-measurement cross covariance `cov C^H`.
    pub cross: CMat,
    /// Innovation covariance `C cov C^H + I kron (W^H W)`.
    pub innovation: CMat,
}

/// Observation operator at fixed angles: column `j` is
/// `vec(W^H a_rx(angle_j) a_tx(angle_j)^H V)` in column-major order, so the
/// vectorized noiseless measurement is `C * coeffs`.
pub fn observation_operator(angles: &[f64], pair: &BeamformerPair, geom: &ArrayGeometry) -> CMat {
    let m_r = pair.w.ncols();
    let m_t = pair.v.ncols();
    let mut c = CMat::zeros(m_r * m_t, angles.len());
    for (j, &angle) in angles.iter().enumerate() {
        let wa = pair.w.adjoint() * geom.steering(ArraySide::Rx, angle);
        let va = pair.v.adjoint() * geom.steering(ArraySide::Tx, angle);
        for m in 0..m_t {
            let scale = va[m].conj();
            for r in 0..m_r {
                c[(m * m_r + r, j)] = wa[r] * scale;
            }
        }
    }
    c
}

/// Covariance of the vectorized combined noise `vec(W^H Z)`, namely
/// `I kron (W^H W)`.
pub fn combined_noise_cov(pair: &BeamformerPair) -> CMat {
    let gram = pair.w.adjoint() * &pair.w;
    CMat::identity(pair.v.ncols(), pair.v.ncols()).kronecker(&gram)
}

fn predictive_from_parts(cond: &ConditionalGaussian, c: &CMat, noise_cov: &CMat) -> PredictiveMoments {
    let mean = c * &cond.mean;
    let cross = &cond.cov * c.adjoint();
    let innovation = hermitian_part(&(c * &cross + noise_cov));
    PredictiveMoments {
        mean,
        cross,
        innovation,
    }
}

pub fn predictive_moments(
    state: &PosteriorState,
    grid_index: usize,
    pair: &BeamformerPair,
) -> Result<PredictiveMoments> {
    pair.validate(&state.geom)?;
    let c = observation_operator(state.grid.point(grid_index), pair, &state.geom);
    let noise_cov = combined_noise_cov(pair);
    Ok(predictive_from_parts(
        &state.conditionals[grid_index],
        &c,
        &noise_cov,
    ))
}

/// Projects a small Hermitian matrix onto the PSD cone. Conditional
/// covariances can pick up tiny negative eigenvalues through the Kalman
/// downdate.
fn clip_conditional_cov(cov: CMat) -> CMat {
    let herm = hermitian_part(&cov);
    let eig = nalgebra::SymmetricEigen::new(herm.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return herm;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let scaled = {
        let mut m = eig.eigenvectors.clone();
        for (j, &v) in clipped.iter().enumerate() {
            m.column_mut(j).scale_mut(v);
        }
        m
    };
    hermitian_part(&(scaled * eig.eigenvectors.adjoint()))
}

struct UpdateOutcome {
    log_like: f64,
    cond: Option<ConditionalGaussian>,
}

fn update_one_point(
    cond: &ConditionalGaussian,
    c: &CMat,
    noise_cov: &CMat,
    y: &CVec,
    want_cond: bool,
) -> Result<UpdateOutcome> {
    let pred = predictive_from_parts(cond, c, noise_cov);
    let (chol, _) = cholesky_with_jitter(&pred.innovation, "innovation covariance")?;
    let resid = y - &pred.mean;
    let solved = chol.solve(&resid);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.re.ln()).sum();
    let n = y.len() as f64;
    let log_like = -n * std::f64::consts::PI.ln() - log_det - resid.dotc(&solved).re;
    let cond = if want_cond {
        // Gain G = cov C^H S^{-1}; the solve uses S^H = S.
        let gain = chol.solve(&(c * &cond.cov)).adjoint();
        let mean = &cond.mean + &gain * resid;
        let cov = clip_conditional_cov(&cond.cov - gain * c * &cond.cov);
        Some(ConditionalGaussian { mean, cov })
    } else {
        None
    };
    Ok(UpdateOutcome { log_like, cond })
}

fn check_measurement(
    state: &PosteriorState,
    pair: &BeamformerPair,
    y: &CMat,
) -> Result<CVec> {
    pair.validate(&state.geom)?;
    if y.nrows() != pair.w.ncols() || y.ncols() != pair.v.ncols() {
        return Err(SenseError::Shape {
            context: "posterior measurement update",
            detail: format!(
                "measurement is {}x{}, beamformers give {}x{}",
                y.nrows(),
                y.ncols(),
                pair.w.ncols(),
                pair.v.ncols()
            ),
        });
    }
    Ok(vec_columns(y))
}

fn absorb_impl(
    state: &PosteriorState,
    pair: &BeamformerPair,
    y: &CMat,
    update_weights: bool,
    update_conditionals: bool,
) -> Result<PosteriorState> {
    let y_vec = check_measurement(state, pair, y)?;
    let noise_cov = combined_noise_cov(pair);
    let geom = state.geom;
    let grid = &state.grid;

    let process = |g: usize| -> Result<UpdateOutcome> {
        let c = observation_operator(grid.point(g), pair, &geom);
        update_one_point(
            &state.conditionals[g],
            &c,
            &noise_cov,
            &y_vec,
            update_conditionals,
        )
    };
    let outcomes: Vec<UpdateOutcome> = if grid.len() >= 4096 {
        (0..grid.len())
            .into_par_iter()
            .map(process)
            .collect::<Result<_>>()?
    } else {
        (0..grid.len()).map(process).collect::<Result<_>>()?
    };

    let mut next = state.clone();
    if update_conditionals {
        next.conditionals = outcomes
            .iter()
            .map(|o| o.cond.clone().expect("conditional requested"))
            .collect();
        next.history.push(StageData {
            pair: pair.clone(),
            measurement: y.clone(),
        });
    }
    if update_weights {
        let mut lw: Vec<f64> = state
            .log_weights
            .iter()
            .zip(&outcomes)
            .map(|(w, o)| w + o.log_like)
            .collect();
        let norm = logsumexp(&lw);
        if norm.is_finite() {
            for w in &mut lw {
                *w -= norm;
            }
        } else {
            log::warn!("event=posterior_weight_reset reason=degenerate_likelihood");
            let uniform = -(grid.len() as f64).ln();
            lw = vec![uniform; grid.len()];
        }
        next.log_weights = lw;
    }
    Ok(next)
}

/// Multiplies each grid weight by the marginal likelihood of the measurement
/// at that grid point and renormalizes. Conditionals and history are
/// untouched.
pub fn bayes_weight_update(
    state: &PosteriorState,
    pair: &BeamformerPair,
    y: &CMat,
) -> Result<PosteriorState> {
    absorb_impl(state, pair, y, true, false)
}

/// Kalman update of every conditional, leaving the grid weights untouched.
/// Appends the stage to the history.
pub fn kalman_update(
    state: &PosteriorState,
    pair: &BeamformerPair,
    y: &CMat,
) -> Result<PosteriorState> {
    absorb_impl(state, pair, y, false, true)
}

/// Weight update followed by the conditional update, sharing one pass of
/// predictive moments. Equivalent to [`bayes_weight_update`] then
/// [`kalman_update`].
pub fn absorb_measurement(
    state: &PosteriorState,
    pair: &BeamformerPair,
    y: &CMat,
) -> Result<PosteriorState> {
    absorb_impl(state, pair, y, true, true)
}

/// Second moments of the coefficient conditional at one grid point:
/// `(E[a], E[a a^H], E[a a^T])`. The conditional is circularly symmetric, so
/// the last of these is `mean mean^T`.
pub fn posterior_second_moments(
    state: &PosteriorState,
    grid_index: usize,
) -> (CVec, CMat, CMat) {
    let cond = &state.conditionals[grid_index];
    let m2_h = &cond.cov + &cond.mean * cond.mean.adjoint();
    let m2_t = &cond.mean * cond.mean.transpose();
    (cond.mean.clone(), m2_h, m2_t)
}

/// Posterior mean of the sorted angle vector. Each grid point's angles are
/// sorted ascending before averaging, which removes the target labeling
/// ambiguity that would otherwise cancel symmetric modes against each other.
/// For one target this is the plain posterior mean.
pub fn mmse_estimate(state: &PosteriorState) -> RVec {
    let l = state.grid.num_targets();
    let mut acc = RVec::zeros(l);
    let mut point = vec![0.0; l];
    for (g, lw) in state.log_weights.iter().enumerate() {
        let w = lw.exp();
        point.copy_from_slice(state.grid.point(g));
        point.sort_by(f64::total_cmp);
        for j in 0..l {
            acc[j] += w * point[j];
        }
    }
    acc
}

impl PosteriorState {
    pub fn geom(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn grid(&self) -> &AngleGrid {
        &self.grid
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn conditionals(&self) -> &[ConditionalGaussian] {
        &self.conditionals
    }

    pub fn conditional(&self, grid_index: usize) -> &ConditionalGaussian {
        &self.conditionals[grid_index]
    }

    pub fn history(&self) -> &[StageData] {
        &self.history
    }

    pub fn num_targets(&self) -> usize {
        self.grid.num_targets()
    }

    /// Shannon entropy of the grid weights in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .log_weights
            .iter()
            .map(|&lw| {
                let w = lw.exp();
                if w > 0.0 { w * lw } else { 0.0 }
            })
            .sum::<f64>()
    }

    /// Replaces the grid weights, normalizing in the log domain.
    /// Intended for tests and for loading externally computed posteriors.
    pub fn with_log_weights(mut self, log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.len() != self.grid.len() {
            return Err(SenseError::Shape {
                context: "with_log_weights",
                detail: format!(
                    "{} weights for {} grid points",
                    log_weights.len(),
                    self.grid.len()
                ),
            });
        }
        let norm = logsumexp(&log_weights);
        if !norm.is_finite() {
            return Err(SenseError::Config("weights sum to zero".into()));
        }
        self.log_weights = log_weights.into_iter().map(|w| w - norm).collect();
        Ok(self)
    }

    /// Replaces the conditional at one grid point.
    /// Intended for tests and for loading externally computed posteriors.
    pub fn with_conditional(mut self, grid_index: usize, cond: ConditionalGaussian) -> Result<Self> {
        let l = self.num_targets();
        if cond.mean.len() != l || cond.cov.nrows() != l || cond.cov.ncols() != l {
            return Err(SenseError::Shape {
                context: "with_conditional",
                detail: format!("conditional dimension does not match {l} targets"),
            });
        }
        self.conditionals[grid_index] = cond;
        Ok(self)
    }
}
