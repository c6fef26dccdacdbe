//! Bayesian Fisher information of the stacked parameter vector and the
//! induced lower bound on weighted estimation error.
//!
//! The information matrix at stage `k` splits into a data term, biaffine in
//! the transmit covariance `V V^H` and the receive projector
//! `W (W^H W)^{-1} W^H`, plus a prior term accumulating every past stage and
//! the coefficient prior. All expectations run over the current grid
//! posterior: the angle part as a weighted sum over grid points, the
//! coefficient part in closed form through the per-point Gaussian moments.
//!
//! Derivatives of the response factor as `scalar(coeffs) * factor(angles)`,
//! so the coefficient expectations reduce to a 3L x 3L moment matrix per
//! grid point and every information quantity becomes a weighted Hadamard
//! contraction of angle-only factor products against that matrix.

use crate::array::{ArrayGeometry, ParamKind, ResponseBasis, param_kind, response_basis};
use crate::array::BeamformerPair;
use crate::error::{Result, SenseError};
use crate::linalg::{
    C64, CMat, CVec, IM, RMat, RVec, cr, hermitian_part, psd_project, symmetric_eig_desc,
    symmetric_part, trace_prod, trace_prod_adjoint,
};
use crate::posterior::{PosteriorState, StageData};

/// Diagonal weighting of the squared errors, nonnegative with unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: RVec,
}

impl WeightMatrix {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() || entries.len() % 3 != 0 {
            return Err(SenseError::Config(format!(
                "weight vector length {} is not a positive multiple of 3",
                entries.len()
            )));
        }
        if entries.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
            return Err(SenseError::Config("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SenseError::Config(format!(
                "weights must sum to 1, got {sum:.15}"
            )));
        }
        Ok(WeightMatrix {
            entries: RVec::from_vec(entries),
        })
    }

    /// Equal weight on every angle, none on the coefficients.
    pub fn angles_only(num_targets: usize) -> Self {
        let l = num_targets;
        let mut q = vec![0.0; 3 * l];
        for item in q.iter_mut().take(l) {
            *item = 1.0 / l as f64;
        }
        WeightMatrix {
            entries: RVec::from_vec(q),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &RVec {
        &self.entries
    }

    /// Entrywise square root, the factor appearing in the dual objective.
    pub fn sqrt_entries(&self) -> RVec {
        self.entries.map(f64::sqrt)
    }
}

/// Everything about the current posterior that information assembly needs,
/// precomputed once per stage: response factors, coefficient moments, and
/// weights per retained grid point.
#[derive(Debug, Clone)]
pub struct GridFimCache {
    geom: ArrayGeometry,
    num_targets: usize,
    weights: Vec<f64>,
    bases: Vec<ResponseBasis>,
    /// E[c c^H] per grid point for the stacked coefficient scalars
    /// c = [coeffs, 1, .., 1, i, .., i].
    moments: Vec<CMat>,
    /// E[coeffs] per grid point.
    means: Vec<CVec>,
    /// E[coeffs coeffs^H] per grid point.
    second: Vec<CMat>,
}

/// Grid points whose posterior weight falls below this fraction of the
/// maximum contribute less than summation roundoff and are dropped from the
/// cache.
const WEIGHT_PRUNE_REL: f64 = 1e-14;

/// Builds the per-stage information cache from the current posterior.
pub fn fim_cache(state: &PosteriorState) -> GridFimCache {
    let geom = *state.geom();
    let l = state.num_targets();
    let max_w = state
        .log_weights()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights = Vec::new();
    let mut bases = Vec::new();
    let mut moments = Vec::new();
    let mut means = Vec::new();
    let mut second = Vec::new();
    for (g, &lw) in state.log_weights().iter().enumerate() {
        if lw - max_w < WEIGHT_PRUNE_REL.ln() {
            continue;
        }
        let cond = state.conditional(g);
        let mu = cond.mean.clone();
        let m2 = hermitian_part(&(&cond.cov + &mu * mu.adjoint()));
        moments.push(coefficient_moment_matrix(&mu, &m2));
        means.push(mu);
        second.push(m2);
        bases.push(response_basis(state.grid().point(g), &geom));
        weights.push(lw.exp());
    }
    GridFimCache {
        geom,
        num_targets: l,
        weights,
        bases,
        moments,
        means,
        second,
    }
}

/// Moment matrix E[c c^H] of the stacked derivative scalars
/// c = [coeffs, ones, i ones] under CN(mean, cov) coefficients.
fn coefficient_moment_matrix(mean: &CVec, m2: &CMat) -> CMat {
    let l = mean.len();
    let dim = 3 * l;
    let mut s = CMat::zeros(dim, dim);
    for a in 0..l {
        for b in 0..l {
            s[(a, b)] = m2[(a, b)];
        }
        for b in 0..l {
            s[(a, l + b)] = mean[a];
            s[(a, 2 * l + b)] = mean[a] * (-IM);
            s[(l + b, a)] = mean[a].conj();
            s[(2 * l + b, a)] = IM * mean[a].conj();
        }
    }
    for a in 0..l {
        for b in 0..l {
            s[(l + a, l + b)] = cr(1.0);
            s[(l + a, 2 * l + b)] = -IM;
            s[(2 * l + a, l + b)] = IM;
            s[(2 * l + a, 2 * l + b)] = cr(1.0);
        }
    }
    s
}

impl GridFimCache {
    pub fn geom(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn dim(&self) -> usize {
        3 * self.num_targets
    }

    pub fn retained_points(&self) -> usize {
        self.weights.len()
    }

    fn factor(&self, g: usize, index: usize) -> &CMat {
        let kind = param_kind(index, self.num_targets).expect("index bounded by dim");
        self.bases[g].factor(kind)
    }
}

/// Transmit covariance `V V^H` and receive projector
/// `W (W^H W)^{-1} W^H` of a beamformer pair.
pub fn beamformer_covariances(pair: &BeamformerPair) -> Result<(CMat, CMat)> {
    let r_v = &pair.v * pair.v.adjoint();
    let r_w = receive_projector(&pair.w)?;
    Ok((r_v, r_w))
}

/// Orthogonal projector onto the column space of `w`.
pub fn receive_projector(w: &CMat) -> Result<CMat> {
    let qr = w.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let scale = r[(0, 0)].norm().max(1.0);
    for j in 0..r.nrows().min(r.ncols()) {
        if r[(j, j)].norm() <= 1e-12 * scale {
            return Err(SenseError::Singular {
                context: "receive combiner is column rank deficient",
            });
        }
    }
    Ok(&q * q.adjoint())
}

/// Data term of the Bayesian information matrix for raw covariance inputs.
/// Biaffine in `(r_v, r_w)` and PSD whenever both inputs are PSD.
pub fn data_fim(cache: &GridFimCache, r_v: &CMat, r_w: &CMat) -> RMat {
    let l = cache.num_targets;
    let dim = cache.dim();
    let mut j = RMat::zeros(dim, dim);
    // Distinct factor matrices per target: tangent (angle derivative) and
    // outer (coefficient derivative). Parameter index i maps to factor
    // d(i) = i for angles, L + target for both coefficient parts.
    let factor_of = |i: usize| -> usize {
        match param_kind(i, l).expect("bounded") {
            ParamKind::Angle(t) => t,
            ParamKind::CoeffRe(t) | ParamKind::CoeffIm(t) => l + t,
        }
    };
    let mut pair_traces = vec![C64::new(0.0, 0.0); 4 * l * l];
    for (g, w) in cache.weights.iter().enumerate() {
        let basis = &cache.bases[g];
        let s = &cache.moments[g];
        let distinct: Vec<&CMat> = basis
            .tangent
            .iter()
            .chain(basis.outer.iter())
            .collect();
        let transformed: Vec<CMat> = distinct.iter().map(|f| r_w * *f * r_v).collect();
        for (d1, t) in transformed.iter().enumerate() {
            for (d2, f) in distinct.iter().enumerate() {
                pair_traces[d1 * 2 * l + d2] = trace_prod_adjoint(t, f);
            }
        }
        for i in 0..dim {
            let di = factor_of(i);
            for jj in 0..dim {
                let dj = factor_of(jj);
                let contrib = s[(i, jj)] * pair_traces[di * 2 * l + dj];
                j[(i, jj)] += 2.0 * w * contrib.re;
            }
        }
    }
    symmetric_part(&j)
}

/// Data term for an explicit beamformer pair.
pub fn data_fim_pair(cache: &GridFimCache, pair: &BeamformerPair) -> Result<RMat> {
    let (r_v, r_w) = beamformer_covariances(pair)?;
    Ok(data_fim(cache, &r_v, &r_w))
}

/// Negative expected curvature of the coefficient prior plus the flat angle
/// prior: zero for angles, 2 per real coefficient coordinate.
pub fn standard_base_prior(num_targets: usize) -> RMat {
    let l = num_targets;
    let mut m = RMat::zeros(3 * l, 3 * l);
    for i in l..3 * l {
        m[(i, i)] = 2.0;
    }
    m
}

/// Prior information carried into the current stage: curvature of all past
/// likelihood stages under the current posterior, plus `base_prior`. The
/// result is projected onto the PSD cone; the second return value is the
/// clipped eigenvalue mass, a diagnostic for how indefinite the raw matrix
/// was.
pub fn prior_fim(
    cache: &GridFimCache,
    history: &[StageData],
    base_prior: &RMat,
) -> Result<(RMat, f64)> {
    let l = cache.num_targets;
    let dim = cache.dim();
    if base_prior.nrows() != dim || base_prior.ncols() != dim {
        return Err(SenseError::Shape {
            context: "prior_fim",
            detail: format!(
                "base prior is {}x{}, parameters need {dim}x{dim}",
                base_prior.nrows(),
                base_prior.ncols()
            ),
        });
    }
    let mut total = base_prior.clone();
    for stage in history {
        let (r_v, r_w) = beamformer_covariances(&stage.pair)?;
        // Curvature of one past stage splits into the squared-Jacobian part,
        // identical in form to the data term, plus two second-derivative
        // parts: one against the predicted response, one against the
        // observed measurement.
        total += data_fim(cache, &r_v, &r_w);

        let m_pinv = {
            let gram = stage.pair.w.adjoint() * &stage.pair.w;
            let chol = nalgebra::Cholesky::new(hermitian_part(&gram)).ok_or(
                SenseError::Singular {
                    context: "combiner gram matrix in prior information",
                },
            )?;
            chol.solve(&stage.pair.w.adjoint().into_owned())
        };
        // x = V Y^H (W^H W)^{-1} W^H collapses the measurement part of the
        // curvature to one trace per factor matrix.
        let x = &stage.pair.v * stage.measurement.adjoint() * &m_pinv;

        for (g, w) in cache.weights.iter().enumerate() {
            let basis = &cache.bases[g];
            let mu = &cache.means[g];
            let m2 = &cache.second[g];
            for t in 0..l {
                let u_curv = &r_w * &basis.curvature[t] * &r_v;
                let u_tan = &r_w * &basis.tangent[t] * &r_v;
                // Response part: E[scalar(i,j) conj(coeff_b)] * tr(U B_b^H).
                let mut curv_resp = C64::new(0.0, 0.0);
                let mut tan_resp = C64::new(0.0, 0.0);
                for b in 0..l {
                    let tau_c = trace_prod_adjoint(&u_curv, &basis.outer[b]);
                    let tau_t = trace_prod_adjoint(&u_tan, &basis.outer[b]);
                    curv_resp += m2[(t, b)] * tau_c;
                    tan_resp += mu[b].conj() * tau_t;
                }
                // Measurement part: E[scalar(i,j)] * tr(x K).
                let curv_meas = mu[t] * trace_prod(&x, &basis.curvature[t]);
                let tan_meas = trace_prod(&x, &basis.tangent[t]);

                let w2 = 2.0 * w;
                total[(t, t)] += w2 * (curv_resp.re - curv_meas.re);
                let cross_re = w2 * (tan_resp.re - tan_meas.re);
                let cross_im = w2 * ((IM * tan_resp).re - (IM * tan_meas).re);
                total[(t, l + t)] += cross_re;
                total[(l + t, t)] += cross_re;
                total[(t, 2 * l + t)] += cross_im;
                total[(2 * l + t, t)] += cross_im;
            }
        }
    }
    let (projected, clipped) = psd_project(&total);
    if clipped > 0.0 {
        log::debug!("event=prior_fim_psd_clip mass={clipped:.3e} stages={}", history.len());
    }
    Ok((projected, clipped))
}

/// Full Bayesian information matrix at one stage.
#[derive(Debug, Clone)]
pub struct Bfim {
    pub total: RMat,
    pub data_part: RMat,
    pub prior_part: RMat,
    /// Eigenvalue mass removed when projecting the prior part to PSD.
    pub clipped_mass: f64,
}

/// Assembles data and prior parts for an explicit beamformer pair.
pub fn assemble_bfim(
    cache: &GridFimCache,
    history: &[StageData],
    pair: &BeamformerPair,
) -> Result<Bfim> {
    let base = standard_base_prior(cache.num_targets);
    let (prior_part, clipped_mass) = prior_fim(cache, history, &base)?;
    let data_part = data_fim_pair(cache, pair)?;
    let total = symmetric_part(&(&data_part + &prior_part));
    Ok(Bfim {
        total,
        data_part,
        prior_part,
        clipped_mass,
    })
}

/// Condition threshold beyond which the information matrix is treated as
/// effectively singular.
pub const MAX_FIM_CONDITION: f64 = 1e12;

/// Weighted error lower bound tr(Q J^{-1}) through a symmetric solve per
/// weighted parameter.
pub fn bcrb_value(q: &WeightMatrix, fim: &RMat) -> Result<f64> {
    let dim = fim.nrows();
    if q.dim() != dim || fim.ncols() != dim {
        return Err(SenseError::Shape {
            context: "bcrb_value",
            detail: format!("weights dim {} vs information {}x{}", q.dim(), dim, fim.ncols()),
        });
    }
    let sym = symmetric_part(fim);
    let (values, _) = symmetric_eig_desc(&sym);
    let max = values[0];
    let min = values[dim - 1];
    if !(min > 0.0) || max / min > MAX_FIM_CONDITION {
        return Err(SenseError::NonIdentifiable {
            min_eigenvalue: min,
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    let chol = nalgebra::Cholesky::new(sym).ok_or(SenseError::NonIdentifiable {
        min_eigenvalue: min,
        condition: max / min,
    })?;
    let mut acc = 0.0;
    for (idx, &weight) in q.entries().iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let mut e = RVec::zeros(dim);
        e[idx] = 1.0;
        let col = chol.solve(&e);
        acc += weight * col[idx];
    }
    Ok(acc)
}

/// Linear operator mapping a PSD dual outer product to the direction matrix
/// whose top eigenvectors define the optimal beamformer on one side. Fixes
/// the posterior cache and the other side's beamformer at construction so
/// repeated applications inside the solver stay cheap.
#[derive(Debug, Clone)]
pub struct DirectionOperator {
    out_dim: usize,
    dim: usize,
    weights: Vec<f64>,
    /// Per grid point, per fixed-side column: columns are the factor
    /// matrices applied to that column.
    columns: Vec<Vec<CMat>>,
    /// Per grid point: Hadamard companion of the dual outer product.
    hadamard: Vec<CMat>,
}

impl DirectionOperator {
    /// Operator for designing the receive side, with the transmit beamformer
    /// fixed.
    pub fn for_receive(cache: &GridFimCache, v: &CMat) -> Self {
        Self::build(cache, v, false)
    }

    /// Operator for designing the transmit side, with the receive combiner
    /// fixed. Columns of `w` must be orthonormal so that the receive
    /// projector is their Gram expansion.
    pub fn for_transmit(cache: &GridFimCache, w_orth: &CMat) -> Self {
        Self::build(cache, w_orth, true)
    }

    fn build(cache: &GridFimCache, fixed: &CMat, transmit: bool) -> Self {
        let dim = cache.dim();
        let out_dim = if transmit {
            cache.geom.n_tx
        } else {
            cache.geom.n_rx
        };
        let mut columns = Vec::with_capacity(cache.weights.len());
        let mut hadamard = Vec::with_capacity(cache.weights.len());
        for g in 0..cache.weights.len() {
            let mut per_col = Vec::with_capacity(fixed.ncols());
            for m in 0..fixed.ncols() {
                let col = fixed.column(m);
                let mut stacked = CMat::zeros(out_dim, dim);
                for i in 0..dim {
                    let f = cache.factor(g, i);
                    let applied = if transmit {
                        f.adjoint() * col
                    } else {
                        f * col
                    };
                    stacked.set_column(i, &applied);
                }
                per_col.push(stacked);
            }
            columns.push(per_col);
            hadamard.push(if transmit {
                cache.moments[g].conjugate()
            } else {
                cache.moments[g].clone()
            });
        }
        DirectionOperator {
            out_dim,
            dim,
            weights: cache.weights.clone(),
            columns,
            hadamard,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies the operator to the outer product `a = lambda lambda^T`.
    /// The result is Hermitian PSD whenever `a` is PSD.
    pub fn apply(&self, a: &RMat) -> CMat {
        debug_assert_eq!(a.nrows(), self.dim);
        let mut out = CMat::zeros(self.out_dim, self.out_dim);
        for (g, w) in self.weights.iter().enumerate() {
            let mut b = self.hadamard[g].clone();
            for i in 0..self.dim {
                for j in 0..self.dim {
                    b[(i, j)] *= cr(a[(i, j)] * *w);
                }
            }
            for stacked in &self.columns[g] {
                out += stacked * &b * stacked.adjoint();
            }
        }
        hermitian_part(&out)
    }
}
