//! Dual-domain design of one beamformer side, and the alternating loop that
//! couples the two sides.
//!
//! Minimizing the weighted error bound over one side's covariance is convex
//! but expensive to handle directly; its Lagrange dual is an unconstrained
//! concave maximization over a real matrix with one column per estimation
//! parameter. The structure constraint (orthonormal combiner columns, or a
//! transmit power budget) enters only through a partial eigenvalue sum of a
//! direction matrix assembled from the dual variable. The maximizer is
//! recovered from the top eigenvectors of that direction matrix; an eigengap
//! at the split index certifies that the recovery is exact.
//!
//! The solver runs damped fixed-point steps toward `J^{-1} Q^{1/2}` while
//! they keep improving the objective, falling back to backtracking gradient
//! ascent. Neither path requires the information matrix to be invertible;
//! the fixed-point acceleration is simply skipped when it is not.

use crate::array::BeamformerPair;
use crate::bfim::{DirectionOperator, GridFimCache, WeightMatrix, bcrb_value, data_fim};
use crate::error::{Result, SenseError};
use crate::linalg::{CMat, RMat, RVec, cr, hermitian_eig_desc, symmetric_part};
use crate::random::{derive_seed, haar_orthonormal_columns, rng_from};

/// Which beamformer side is being designed, and with what objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Receive combiner with orthonormal columns.
    RxCombiner,
    /// Transmit beamformer concentrating the whole power budget in one
    /// direction.
    TxExploit,
    /// Transmit beamformer spreading the power budget over orthogonal
    /// directions.
    TxExplore,
}

/// Result of one dual solve.
#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Dual variable, one column per estimation parameter.
    pub lambda: RMat,
    /// Assembled direction matrix at the solution.
    pub direction: CMat,
    /// Direction matrix eigenvalues, descending.
    pub direction_eigvals: RVec,
    /// Direction matrix eigenvectors, columns matching `direction_eigvals`.
    pub direction_eigvecs: CMat,
    /// Extracted beamformer for the designed side.
    pub beamformer: CMat,
    /// Dual objective value at the solution.
    pub objective: f64,
    /// Gradient norm at termination.
    pub grad_norm: f64,
    /// Eigengap at the split index; infinite when the split consumes the
    /// whole spectrum.
    pub eigengap: f64,
    /// Whether the eigengap certificate held, making the extracted
    /// beamformer the exact minimizer of the primal side.
    pub certificate_ok: bool,
    /// Worst-case column distance to the closed-form optimality condition
    /// `lambda_l = sqrt(q_l) J^{-1} e_l`.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solver knobs. Defaults follow the tolerances used by the experiments.
#[derive(Debug, Clone)]
pub struct DualOptions {
    pub max_iters: usize,
    /// Gradient norm tolerance, scaled by `1 + |objective|`.
    pub grad_tol: f64,
    /// Armijo slope fraction for the backtracking line search.
    pub armijo: f64,
    /// Step shrink factor.
    pub backtrack: f64,
    /// Initial damping of the fixed-point step toward `J^{-1} Q^{1/2}`;
    /// adapted multiplicatively from there.
    pub damping: f64,
    /// Relative eigengap below which the spectrum counts as tied: the
    /// recovery certificate fails and ascent ending there is treated as
    /// having reached the nonsmooth boundary.
    pub eigengap_rel_tol: f64,
    /// First-order residual below which an iterate that can no longer make
    /// ascent progress still counts as converged. The euclidean gradient
    /// norm has an f64 floor that grows with the information matrix
    /// conditioning; the residual of `Lambda - J^{-1} Q^{1/2}` is scale
    /// free, so it is the right arbiter at such a stall.
    pub stall_kkt_tol: f64,
    /// Seed for deterministic tie breaking in degenerate eigenspaces.
    pub tie_seed: u64,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            max_iters: 2000,
            grad_tol: 1e-7,
            armijo: 1e-4,
            backtrack: 0.5,
            damping: 0.5,
            eigengap_rel_tol: 1e-4,
            stall_kkt_tol: 1e-7,
            tie_seed: 0,
        }
    }
}

/// One side's design problem with the other side frozen.
pub struct SubProblem<'a> {
    pub kind: ProblemKind,
    pub cache: &'a GridFimCache,
    /// Prior information matrix, PSD.
    pub prior: &'a RMat,
    pub weights: &'a WeightMatrix,
    /// Total transmit energy budget.
    pub power: f64,
    /// Column budget of the designed side (combiner columns or transmit
    /// beams).
    pub ports: usize,
    /// The frozen other side: the transmit beamformer when designing the
    /// combiner, the orthonormalized combiner when designing the transmit
    /// side.
    pub fixed: &'a CMat,
}

impl SubProblem<'_> {
    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn is_transmit(&self) -> bool {
        !matches!(self.kind, ProblemKind::RxCombiner)
    }

    /// Scale of the recovered covariance and number of eigenvectors it
    /// spans. All three kinds share the form `scale * U U^H` with `U` the
    /// top eigenvectors of the direction matrix.
    fn scale_and_split(&self, out_dim: usize) -> (f64, usize) {
        match self.kind {
            ProblemKind::RxCombiner => (1.0, self.ports.min(out_dim)),
            ProblemKind::TxExploit => (self.power, 1),
            ProblemKind::TxExplore => (
                self.power / self.ports as f64,
                self.ports.min(out_dim),
            ),
        }
    }

    fn operator(&self) -> DirectionOperator {
        if self.is_transmit() {
            DirectionOperator::for_transmit(self.cache, self.fixed)
        } else {
            DirectionOperator::for_receive(self.cache, self.fixed)
        }
    }

    /// Full information matrix when the designed side has covariance `r`.
    fn information(&self, r: &CMat) -> RMat {
        let data = if self.is_transmit() {
            let r_w = self.fixed * self.fixed.adjoint();
            data_fim(self.cache, r, &r_w)
        } else {
            let r_v = self.fixed * self.fixed.adjoint();
            data_fim(self.cache, &r_v, r)
        };
        symmetric_part(&(data + self.prior))
    }
}

struct Evaluation {
    objective: f64,
    eigvals: RVec,
    eigvecs: CMat,
    direction: CMat,
    eigengap: f64,
}

fn covariance_from_eigs(eigvecs: &CMat, split: usize, scale: f64) -> CMat {
    let u = eigvecs.columns(0, split);
    (&u * u.adjoint()).map(|x| x * cr(scale))
}

fn eigengap_at_split(eigvals: &RVec, split: usize) -> f64 {
    if split >= eigvals.len() {
        f64::INFINITY
    } else {
        eigvals[split - 1] - eigvals[split]
    }
}

fn evaluate(
    sub: &SubProblem,
    op: &DirectionOperator,
    qsqrt: &RVec,
    lambda: &RMat,
) -> Evaluation {
    let (scale, split) = sub.scale_and_split(op.out_dim());
    let a = lambda * lambda.transpose();
    let direction = op.apply(&a);
    let (eigvals, eigvecs) = hermitian_eig_desc(&direction);
    let penalty: f64 = 2.0 * scale * eigvals.iter().take(split).sum::<f64>();
    let linear: f64 = 2.0 * (0..sub.dim()).map(|l| qsqrt[l] * lambda[(l, l)]).sum::<f64>();
    let quad = (sub.prior * lambda).dot(lambda);
    Evaluation {
        objective: linear - quad - penalty,
        eigengap: eigengap_at_split(&eigvals, split),
        eigvals,
        eigvecs,
        direction,
    }
}

/// Dual objective, ascent direction and eigengap at an arbitrary dual
/// variable.
#[derive(Debug, Clone)]
pub struct DualPoint {
    pub objective: f64,
    /// Danskin direction through the recovered covariance; at an eigenvalue
    /// tie this is only a supergradient.
    pub gradient: RMat,
    /// Gap below the last eigenvalue the recovered covariance spans.
    pub eigengap: f64,
}

/// Evaluates the dual objective at `lambda` without running the solver.
pub fn dual_point(sub: &SubProblem, lambda: &RMat) -> Result<DualPoint> {
    let dim = sub.dim();
    if lambda.nrows() != dim || lambda.ncols() != dim {
        return Err(SenseError::Shape {
            context: "dual_point",
            detail: format!(
                "dual variable is {}x{}, parameters need {dim}x{dim}",
                lambda.nrows(),
                lambda.ncols()
            ),
        });
    }
    let op = sub.operator();
    let (scale, split) = sub.scale_and_split(op.out_dim());
    let qsqrt = sub.weights.sqrt_entries();
    let eval = evaluate(sub, &op, &qsqrt, lambda);
    let r = covariance_from_eigs(&eval.eigvecs, split, scale);
    let j_r = sub.information(&r);
    let mut gradient = &j_r * lambda;
    gradient.scale_mut(-2.0);
    for l in 0..dim {
        gradient[(l, l)] += 2.0 * qsqrt[l];
    }
    Ok(DualPoint {
        objective: eval.objective,
        gradient,
        eigengap: eval.eigengap,
    })
}

/// Maximizes the dual for one side. Fails with `NonConverged` carrying the
/// best iterate if the iteration budget runs out away from any
/// nondifferentiable point.
pub fn solve_dual(sub: &SubProblem, opts: &DualOptions) -> Result<DualSolution> {
    let dim = sub.dim();
    if sub.ports == 0 {
        return Err(SenseError::Config("beamformer needs at least one column".into()));
    }
    if sub.power <= 0.0 && sub.is_transmit() {
        return Err(SenseError::Config(format!(
            "transmit power budget must be positive, got {}",
            sub.power
        )));
    }
    let op = sub.operator();
    let out_dim = op.out_dim();
    let (scale, split) = sub.scale_and_split(out_dim);
    let qsqrt = sub.weights.sqrt_entries();

    // Warm start from the most informative feasible covariance: the full
    // receive space, or isotropic transmission at full power. If that
    // information matrix is invertible the fixed-point formula gives a
    // near-optimal first iterate; otherwise start from the weight square
    // roots on the diagonal.
    let r0 = CMat::identity(out_dim, out_dim).map(|x| {
        x * cr(if sub.is_transmit() {
            sub.power / out_dim as f64
        } else {
            1.0
        })
    });
    let j0 = sub.information(&r0);
    let mut lambda = solve_columns(&j0, &qsqrt)
        .unwrap_or_else(|| RMat::from_diagonal(&qsqrt));

    let mut eval = evaluate(sub, &op, &qsqrt, &lambda);
    let mut fp_damping = opts.damping;
    let mut fp_enabled = true;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;

    while iterations < opts.max_iters {
        iterations += 1;
        let r = covariance_from_eigs(&eval.eigvecs, split, scale);
        let j_r = sub.information(&r);
        let grad = {
            let mut g = &j_r * &lambda;
            g.scale_mut(-2.0);
            for l in 0..dim {
                g[(l, l)] += 2.0 * qsqrt[l];
            }
            g
        };
        grad_norm = grad.norm();
        if grad_norm <= opts.grad_tol * (1.0 + eval.objective.abs()) {
            converged = true;
            break;
        }

        // Damped fixed-point step toward J(R)^{-1} Q^{1/2} with adaptive
        // damping: shrink when the step overshoots, regrow on success. This
        // is the only step that beats the curvature spread when the
        // information matrix is badly conditioned, so it must never be
        // abandoned for good while the matrix stays positive definite.
        if fp_enabled {
            if let Some(target) = solve_columns(&j_r, &qsqrt) {
                let cand = &lambda * (1.0 - fp_damping) + target * fp_damping;
                let cand_eval = evaluate(sub, &op, &qsqrt, &cand);
                if cand_eval.objective > eval.objective + 1e-12 * (1.0 + eval.objective.abs()) {
                    lambda = cand;
                    eval = cand_eval;
                    fp_damping = (fp_damping * 1.5).min(1.0);
                    continue;
                }
                fp_damping = (fp_damping * 0.5).max(1e-4);
            } else {
                fp_enabled = false;
            }
        }

        // Backtracking gradient ascent.
        let mut t = step * 2.0;
        let mut accepted = false;
        while t > 1e-18 {
            let cand = &lambda + &grad * t;
            let cand_eval = evaluate(sub, &op, &qsqrt, &cand);
            if cand_eval.objective >= eval.objective + opts.armijo * t * grad_norm * grad_norm {
                lambda = cand;
                eval = cand_eval;
                step = t;
                accepted = true;
                break;
            }
            t *= opts.backtrack;
        }
        if !accepted {
            // No ascent progress at machine precision.
            break;
        }
    }

    // The sup of the dual can sit on the nonsmooth boundary where the
    // certifying eigenvalues tie. Ascent then crawls toward the tie without
    // the gradient ever vanishing, so a run that ends near the boundary is
    // the expected terminal state there, with the certificate withheld.
    let at_tie =
        eval.eigengap <= opts.eigengap_rel_tol * eval.eigvals[0].abs().max(1e-300);

    let (beamformer, certificate_ok) = extract_beamformer(
        sub.kind,
        &eval.eigvals,
        &eval.eigvecs,
        split,
        scale,
        opts.eigengap_rel_tol,
        opts.tie_seed,
    );
    let r_final = covariance_from_eigs(&eval.eigvecs, split, scale);
    let j_final = sub.information(&r_final);
    let kkt_residual = match solve_columns(&j_final, &qsqrt) {
        Some(target) => (&lambda - target).column_iter().map(|c| c.norm()).fold(0.0, f64::max),
        None => f64::INFINITY,
    };

    let solution = DualSolution {
        lambda,
        direction: eval.direction,
        direction_eigvals: eval.eigvals,
        direction_eigvecs: eval.eigvecs,
        beamformer,
        objective: eval.objective,
        grad_norm,
        eigengap: eval.eigengap,
        certificate_ok,
        kkt_residual,
        iterations,
    };
    log::debug!(
        "event=dual_solve kind={:?} iters={} obj={:.9e} grad_norm={:.3e} eigengap={:.3e} cert={} kkt={:.3e}",
        sub.kind,
        solution.iterations,
        solution.objective,
        solution.grad_norm,
        solution.eigengap,
        solution.certificate_ok,
        solution.kkt_residual
    );

    if converged || at_tie || kkt_residual <= opts.stall_kkt_tol {
        Ok(solution)
    } else {
        Err(SenseError::NonConverged {
            iterations: solution.iterations,
            grad_norm: solution.grad_norm,
            stage: None,
            best: Box::new(solution),
        })
    }
}

/// Solves `J x_l = qsqrt_l e_l` for every column, via Cholesky. None when
/// the matrix is not positive definite.
fn solve_columns(j: &RMat, qsqrt: &RVec) -> Option<RMat> {
    let dim = j.nrows();
    let chol = nalgebra::Cholesky::new(symmetric_part(j))?;
    let mut out = RMat::zeros(dim, dim);
    for l in 0..dim {
        if qsqrt[l] == 0.0 {
            continue;
        }
        let mut e = RVec::zeros(dim);
        e[l] = qsqrt[l];
        out.set_column(l, &chol.solve(&e));
    }
    Some(out)
}

/// Realizes the designed beamformer from the direction matrix spectrum:
/// `sqrt(scale)` times the top eigenvectors (one column for the
/// single-direction transmit kind). When the certifying eigengap is absent,
/// the boundary columns are drawn deterministically from the tied eigenspace
/// instead.
fn extract_beamformer(
    kind: ProblemKind,
    eigvals: &RVec,
    eigvecs: &CMat,
    split: usize,
    scale: f64,
    gap_rel_tol: f64,
    tie_seed: u64,
) -> (CMat, bool) {
    let out_dim = eigvecs.nrows();
    let col_scale = cr(scale.sqrt());
    let gap = eigengap_at_split(eigvals, split);
    let tie_tol = gap_rel_tol * eigvals[0].abs().max(1e-300);
    if gap > tie_tol {
        let u = eigvecs.columns(0, split).map(|x| x * col_scale);
        return (u, true);
    }

    // Certificate failed: the boundary eigenvalue is degenerate. Keep the
    // strictly separated leading eigenvectors and fill the remaining columns
    // with a seeded random orthonormal combination of the tied ones, so
    // reruns stay reproducible.
    let boundary = eigvals[split - 1];
    let kept: Vec<usize> = (0..split).filter(|&i| eigvals[i] > boundary + tie_tol).collect();
    let tied: Vec<usize> = (0..out_dim)
        .filter(|&i| (eigvals[i] - boundary).abs() <= tie_tol)
        .collect();
    let need = split - kept.len();
    let mut rng = rng_from(tie_seed);
    let mixer = haar_orthonormal_columns(&mut rng, tied.len(), need.min(tied.len()));
    let mut u = CMat::zeros(out_dim, split);
    for (idx, &col) in kept.iter().enumerate() {
        u.set_column(idx, &eigvecs.column(col).into_owned());
    }
    for j in 0..need.min(tied.len()) {
        let mut mixed = nalgebra::DVector::zeros(out_dim);
        for (row, &col) in tied.iter().enumerate() {
            mixed += eigvecs.column(col) * mixer[(row, j)];
        }
        u.set_column(kept.len() + j, &mixed);
    }
    log::debug!(
        "event=tie_break kind={kind:?} split={split} kept={} tied={}",
        kept.len(),
        tied.len()
    );
    (u.map(|x| x * col_scale), false)
}

/// Outcome of the alternating per-stage design.
#[derive(Debug, Clone)]
pub struct AlternatingOutcome {
    pub pair: BeamformerPair,
    /// Bound value after every half-step (combiner solve, transmit solve,
    /// alternating). A half-step that fails to improve repeats the previous
    /// value.
    pub bound_trace: Vec<f64>,
    pub rx_certificates: Vec<bool>,
    pub tx_certificates: Vec<bool>,
    pub final_bound: f64,
}

/// Options for [`alternating_optimize`].
#[derive(Debug, Clone)]
pub struct AlternatingOptions {
    /// Full alternation rounds (one combiner solve plus one transmit solve
    /// each).
    pub rounds: usize,
    /// Transmit ports, combiner ports.
    pub m_t: usize,
    pub m_r: usize,
    /// Transmit energy budget per stage.
    pub power: f64,
    /// Spread power over orthogonal beams instead of concentrating it.
    pub explore: bool,
    pub dual: DualOptions,
    /// Seed for the transmit initialization and tie breaking. Derivations
    /// from it depend only on the round index, never on the objective kind.
    pub seed: u64,
}

/// Alternates the two one-side solves starting from a random isotropic
/// transmit draw. Returns the final pair together with the bound trace and
/// per-solve certificate flags.
pub fn alternating_optimize(
    cache: &GridFimCache,
    prior: &RMat,
    weights: &WeightMatrix,
    opts: &AlternatingOptions,
) -> Result<AlternatingOutcome> {
    let geom = *cache.geom();
    if opts.m_t == 0 || opts.m_t > geom.n_tx || opts.m_r == 0 || opts.m_r > geom.n_rx {
        return Err(SenseError::Config(format!(
            "port counts ({}, {}) must fit the arrays ({}, {})",
            opts.m_t, opts.m_r, geom.n_tx, geom.n_rx
        )));
    }
    if opts.rounds == 0 {
        return Err(SenseError::Config("alternation needs at least one round".into()));
    }
    let tx_kind = if opts.explore {
        ProblemKind::TxExplore
    } else {
        ProblemKind::TxExploit
    };

    let mut rng = rng_from(derive_seed(opts.seed, 0));
    let mut v = haar_orthonormal_columns(&mut rng, geom.n_tx, opts.m_t)
        .map(|x| x * cr((opts.power / opts.m_t as f64).sqrt()));
    let mut w = CMat::zeros(geom.n_rx, opts.m_r);
    // Realized bound of the current pair; a half-step is kept only if it
    // does not worsen this, so the trace is non-increasing even when a
    // degenerate spectrum forces a tie-broken extraction.
    let mut incumbent = f64::INFINITY;
    let mut bound_trace = Vec::new();
    let mut rx_certificates = Vec::new();
    let mut tx_certificates = Vec::new();

    let realized = |v: &CMat, w: &CMat| -> Result<f64> {
        bcrb_value(
            weights,
            &symmetric_part(&(data_fim(cache, &(v * v.adjoint()), &(w * w.adjoint())) + prior)),
        )
    };

    for round in 0..opts.rounds {
        let rx_opts = DualOptions {
            tie_seed: derive_seed(opts.seed, 1 + 2 * round as u64),
            ..opts.dual.clone()
        };
        let rx = solve_dual(
            &SubProblem {
                kind: ProblemKind::RxCombiner,
                cache,
                prior,
                weights,
                power: opts.power,
                ports: opts.m_r,
                fixed: &v,
            },
            &rx_opts,
        )?;
        let cand = realized(&v, &rx.beamformer)?;
        if cand <= incumbent {
            w = rx.beamformer.clone();
            incumbent = cand;
        }
        rx_certificates.push(rx.certificate_ok);
        bound_trace.push(incumbent);

        let tx_opts = DualOptions {
            tie_seed: derive_seed(opts.seed, 2 + 2 * round as u64),
            ..opts.dual.clone()
        };
        let tx = solve_dual(
            &SubProblem {
                kind: tx_kind,
                cache,
                prior,
                weights,
                power: opts.power,
                ports: opts.m_t,
                fixed: &w,
            },
            &tx_opts,
        )?;
        let cand = realized(&tx.beamformer, &w)?;
        if cand <= incumbent {
            v = tx.beamformer.clone();
            incumbent = cand;
        }
        tx_certificates.push(tx.certificate_ok);
        bound_trace.push(incumbent);
    }

    let final_bound = *bound_trace.last().expect("at least one round");
    Ok(AlternatingOutcome {
        pair: BeamformerPair::new(v, w),
        bound_trace,
        rx_certificates,
        tx_certificates,
        final_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{ArrayGeometry, SceneParams, simulate_measurement, steering_vector};
    use crate::bfim::fim_cache;
    use crate::bfim::standard_base_prior;
    use crate::linalg::{C64, hermitian_part};
    use crate::posterior::{PosteriorState, absorb_measurement, init_posterior};
    use crate::random::complex_gaussian_matrix;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_3;

    /// Single-target posterior sharpened by one random measurement, so the
    /// grid weights and conditionals are generic rather than uniform.
    fn small_state(seed: u64, geom: ArrayGeometry, per_axis: usize) -> PosteriorState {
        let state = init_posterior(geom, (-FRAC_PI_3, FRAC_PI_3), per_axis, 1).unwrap();
        let mut rng = rng_from(seed);
        let v = complex_gaussian_matrix(&mut rng, geom.n_tx, 1).map(|x| x * cr(1.2));
        let w = haar_orthonormal_columns(&mut rng, geom.n_rx, geom.n_rx.min(2));
        let pair = BeamformerPair::new(v, w);
        let scene = SceneParams::new(vec![0.31], vec![C64::new(0.9, -0.4)]).unwrap();
        let y = simulate_measurement(&scene, &geom, &pair, &mut rng).unwrap();
        absorb_measurement(&state, &pair, &y).unwrap()
    }

    fn random_real(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> RMat {
        complex_gaussian_matrix(rng, rows, cols).map(|x| x.re)
    }

    #[test]
    fn projected_trace_is_bounded_by_top_eigenvalue_sums() {
        let mut rng = rng_from(71);
        let h = hermitian_part(&complex_gaussian_matrix(&mut rng, 6, 6));
        let (vals, vecs) = hermitian_eig_desc(&h);
        for r in 1..=6 {
            let best: f64 = vals.iter().take(r).sum();
            let top = vecs.columns(0, r);
            let attained = (top.adjoint() * &h * top).trace().re;
            assert_relative_eq!(attained, best, max_relative = 1e-10, epsilon = 1e-10);
            for _ in 0..100 {
                let u = haar_orthonormal_columns(&mut rng, 6, r);
                let t = (u.adjoint() * &h * &u).trace().re;
                assert!(t <= best + 1e-9, "rank {r}: {t} exceeds {best}");
            }
        }
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let geom = ArrayGeometry::new(3, 3).unwrap();
        let state = small_state(11, geom, 9);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(5);
        let v_fixed = complex_gaussian_matrix(&mut rng, 3, 2).map(|x| x * cr(0.8));
        let w_fixed = haar_orthonormal_columns(&mut rng, 3, 2);
        let cases = [
            (ProblemKind::RxCombiner, 2usize, &v_fixed),
            (ProblemKind::TxExplore, 2usize, &w_fixed),
            (ProblemKind::TxExploit, 1usize, &w_fixed),
        ];
        for (kind, ports, fixed) in cases {
            let sub = SubProblem {
                kind,
                cache: &cache,
                prior: &prior,
                weights: &q,
                power: 1.9,
                ports,
                fixed,
            };
            let op = sub.operator();
            let qsqrt = q.sqrt_entries();
            let (scale, split) = sub.scale_and_split(op.out_dim());
            let lambda = random_real(&mut rng, 3, 3);
            let eval = evaluate(&sub, &op, &qsqrt, &lambda);
            let r = covariance_from_eigs(&eval.eigvecs, split, scale);
            let mut grad = sub.information(&r) * &lambda;
            grad.scale_mut(-2.0);
            for l in 0..3 {
                grad[(l, l)] += 2.0 * qsqrt[l];
            }
            for _ in 0..4 {
                let mut delta = random_real(&mut rng, 3, 3);
                delta /= delta.norm();
                let h = 1e-6;
                let fp = evaluate(&sub, &op, &qsqrt, &(&lambda + &delta * h)).objective;
                let fm = evaluate(&sub, &op, &qsqrt, &(&lambda - &delta * h)).objective;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grad.dot(&delta);
                assert_relative_eq!(numeric, analytic, max_relative = 2e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn dual_objective_is_concave_along_segments() {
        let geom = ArrayGeometry::new(3, 3).unwrap();
        let state = small_state(17, geom, 9);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(29);
        let v_fixed = complex_gaussian_matrix(&mut rng, 3, 2).map(|x| x * cr(0.8));
        let sub = SubProblem {
            kind: ProblemKind::RxCombiner,
            cache: &cache,
            prior: &prior,
            weights: &q,
            power: 1.0,
            ports: 2,
            fixed: &v_fixed,
        };
        let op = sub.operator();
        let qsqrt = q.sqrt_entries();
        for _ in 0..20 {
            let la = random_real(&mut rng, 3, 3);
            let lb = random_real(&mut rng, 3, 3);
            let fa = evaluate(&sub, &op, &qsqrt, &la).objective;
            let fb = evaluate(&sub, &op, &qsqrt, &lb).objective;
            for t in [0.25, 0.5, 0.75] {
                let mix = &la * (1.0 - t) + &lb * t;
                let fmix = evaluate(&sub, &op, &qsqrt, &mix).objective;
                let chord = (1.0 - t) * fa + t * fb;
                assert!(
                    fmix >= chord - 1e-9 * (1.0 + fmix.abs()),
                    "concavity violated: f(mix)={fmix} chord={chord}"
                );
            }
        }
    }

    #[test]
    fn full_receive_rank_matches_closed_form_bound() {
        let geom = ArrayGeometry::new(2, 4).unwrap();
        let state = small_state(23, geom, 12);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(9);
        let v_fixed = complex_gaussian_matrix(&mut rng, 2, 2).map(|x| x * cr(0.7));
        let sub = SubProblem {
            kind: ProblemKind::RxCombiner,
            cache: &cache,
            prior: &prior,
            weights: &q,
            power: 1.0,
            ports: 4,
            fixed: &v_fixed,
        };
        let sol = solve_dual(&sub, &DualOptions::default()).unwrap();
        assert!(sol.certificate_ok);
        assert!(sol.eigengap.is_infinite());
        let j = sub.information(&CMat::identity(4, 4));
        let beta = bcrb_value(&q, &j).unwrap();
        assert_relative_eq!(sol.objective, beta, max_relative = 1e-9);
        assert!(sol.kkt_residual <= 1e-8, "kkt residual {}", sol.kkt_residual);
        let wtw = sol.beamformer.adjoint() * &sol.beamformer;
        assert!((wtw - CMat::identity(4, 4)).norm() < 1e-9);
    }

    #[test]
    fn certified_combiner_solve_attains_its_primal_bound() {
        let geom = ArrayGeometry::new(2, 4).unwrap();
        let state = small_state(37, geom, 16);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(13);
        let v_fixed = complex_gaussian_matrix(&mut rng, 2, 1).map(|x| x * cr(1.3));
        let sub = SubProblem {
            kind: ProblemKind::RxCombiner,
            cache: &cache,
            prior: &prior,
            weights: &q,
            power: 1.0,
            ports: 2,
            fixed: &v_fixed,
        };
        let sol = solve_dual(&sub, &DualOptions::default()).unwrap();
        assert!(sol.certificate_ok, "expected a clean eigengap for this instance");
        let w = &sol.beamformer;
        let wtw = w.adjoint() * w;
        assert!((wtw - CMat::identity(2, 2)).norm() < 1e-10);
        let j = sub.information(&(w * w.adjoint()));
        let beta = bcrb_value(&q, &j).unwrap();
        assert!(
            sol.objective <= beta * (1.0 + 1e-8) + 1e-12,
            "weak duality violated: dual {} primal {}",
            sol.objective,
            beta
        );
        assert_relative_eq!(sol.objective, beta, max_relative = 1e-6);
        assert!(sol.kkt_residual <= 1e-6, "kkt residual {}", sol.kkt_residual);
    }

    #[test]
    fn exploit_transmit_reduces_to_matched_filter_for_coefficient_weights() {
        let geom = ArrayGeometry::new(4, 2).unwrap();
        let base = init_posterior(geom, (-FRAC_PI_3, FRAC_PI_3), 15, 1).unwrap();
        let target_angle = 0.22;
        let g0 = (0..base.grid().len())
            .min_by(|&a, &b| {
                let da = (base.grid().point(a)[0] - target_angle).abs();
                let db = (base.grid().point(b)[0] - target_angle).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let mut lw = vec![f64::NEG_INFINITY; base.grid().len()];
        lw[g0] = 0.0;
        let state = base.with_log_weights(lw).unwrap();
        let phi = state.grid().point(g0)[0];
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::new(vec![0.0, 0.5, 0.5]).unwrap();
        let w_fixed = CMat::identity(2, 2);
        let power = 2.5;
        let sub = SubProblem {
            kind: ProblemKind::TxExploit,
            cache: &cache,
            prior: &prior,
            weights: &q,
            power,
            ports: 1,
            fixed: &w_fixed,
        };
        let sol = solve_dual(&sub, &DualOptions::default()).unwrap();
        assert!(sol.certificate_ok);
        let v = &sol.beamformer;
        assert_eq!(v.ncols(), 1);
        assert_relative_eq!(v.norm(), power.sqrt(), max_relative = 1e-10);
        let a_t = steering_vector(4, phi);
        let align = (v.adjoint() * &a_t)[(0, 0)].norm() / (power.sqrt() * 2.0);
        assert!(align >= 1.0 - 1e-8, "alignment {align} with the matched filter");
    }

    #[test]
    fn single_beam_transmit_kinds_are_bit_identical() {
        let geom = ArrayGeometry::new(3, 2).unwrap();
        let state = small_state(41, geom, 10);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(3);
        let w_fixed = haar_orthonormal_columns(&mut rng, 2, 2);
        let solve = |kind| {
            solve_dual(
                &SubProblem {
                    kind,
                    cache: &cache,
                    prior: &prior,
                    weights: &q,
                    power: 1.7,
                    ports: 1,
                    fixed: &w_fixed,
                },
                &DualOptions::default(),
            )
            .unwrap()
        };
        let a = solve(ProblemKind::TxExploit);
        let b = solve(ProblemKind::TxExplore);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.iterations, b.iterations);
        for (x, y) in a.lambda.iter().zip(b.lambda.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.beamformer.iter().zip(b.beamformer.iter()) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }

    #[test]
    fn exhausted_iteration_budget_returns_best_iterate() {
        let geom = ArrayGeometry::new(2, 3).unwrap();
        let state = small_state(47, geom, 8);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(2);
        let v_fixed = complex_gaussian_matrix(&mut rng, 2, 1);
        let sub = SubProblem {
            kind: ProblemKind::RxCombiner,
            cache: &cache,
            prior: &prior,
            weights: &q,
            power: 1.0,
            ports: 2,
            fixed: &v_fixed,
        };
        let opts = DualOptions {
            max_iters: 1,
            grad_tol: 0.0,
            stall_kkt_tol: 0.0,
            ..DualOptions::default()
        };
        match solve_dual(&sub, &opts) {
            Err(SenseError::NonConverged {
                iterations, best, ..
            }) => {
                assert_eq!(iterations, 1);
                assert!(best.objective.is_finite());
                assert!(best.grad_norm.is_finite());
            }
            Err(other) => panic!("expected NonConverged, got {other:?}"),
            Ok(sol) => panic!("expected NonConverged, got convergence at {}", sol.objective),
        }
    }

    #[test]
    fn explore_transmit_extraction_spreads_power_over_orthogonal_beams() {
        let geom = ArrayGeometry::new(4, 2).unwrap();
        let state = small_state(59, geom, 12);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let mut rng = rng_from(8);
        let w_fixed = haar_orthonormal_columns(&mut rng, 2, 2);
        let power = 2.0;
        let ports = 3;
        let sub = SubProblem {
            kind: ProblemKind::TxExplore,
            cache: &cache,
            prior: &prior,
            weights: &q,
            power,
            ports,
            fixed: &w_fixed,
        };
        let sol = solve_dual(&sub, &DualOptions::default()).unwrap();
        let v = &sol.beamformer;
        assert_eq!((v.nrows(), v.ncols()), (4, 3));
        let gram = v.adjoint() * v;
        let expected = CMat::identity(3, 3).map(|x| x * cr(power / ports as f64));
        assert!(
            (gram - expected).norm() < 1e-8,
            "beams are not orthogonal at equal power"
        );
    }

    #[test]
    fn alternating_design_never_worsens_the_bound() {
        let geom = ArrayGeometry::new(4, 4).unwrap();
        let state = small_state(53, geom, 14);
        let cache = fim_cache(&state);
        let prior = standard_base_prior(1);
        let q = WeightMatrix::angles_only(1);
        let opts = AlternatingOptions {
            rounds: 3,
            m_t: 2,
            m_r: 2,
            power: 2.0,
            explore: true,
            dual: DualOptions::default(),
            seed: 77,
        };
        let out = alternating_optimize(&cache, &prior, &q, &opts).unwrap();
        assert_eq!(out.bound_trace.len(), 6);
        for win in out.bound_trace.windows(2) {
            assert!(
                win[1] <= win[0] * (1.0 + 1e-9) + 1e-12,
                "bound increased along the alternation: {} -> {}",
                win[0],
                win[1]
            );
        }
        assert_eq!(out.rx_certificates.len(), 3);
        assert_eq!(out.tx_certificates.len(), 3);
        assert_relative_eq!(out.pair.transmit_energy(), 2.0, max_relative = 1e-9);
        let wtw = out.pair.w.adjoint() * &out.pair.w;
        assert!((wtw - CMat::identity(2, 2)).norm() < 1e-9);
        assert_eq!(out.final_bound, *out.bound_trace.last().unwrap());
    }

    #[test]
    fn degenerate_extraction_is_seeded_and_orthonormal() {
        let vals = RVec::from_vec(vec![1.0, 1.0, 0.25]);
        let vecs = CMat::identity(3, 3);
        let scale = 2.0;
        let (u1, cert) =
            extract_beamformer(ProblemKind::TxExploit, &vals, &vecs, 1, scale, 1e-8, 99);
        let (u2, _) =
            extract_beamformer(ProblemKind::TxExploit, &vals, &vecs, 1, scale, 1e-8, 99);
        let (u3, _) =
            extract_beamformer(ProblemKind::TxExploit, &vals, &vecs, 1, scale, 1e-8, 100);
        assert!(!cert);
        for (a, b) in u1.iter().zip(u2.iter()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
        assert!((&u1 - &u3).norm() > 1e-3, "different seeds picked the same mix");
        assert_relative_eq!(u1.norm(), scale.sqrt(), max_relative = 1e-12);
        assert!(u1[(2, 0)].norm() < 1e-12, "mix left the tied eigenspace");
    }
}
