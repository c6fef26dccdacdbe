//! Uniform linear array model: steering vectors, target responses, their
//! derivatives with respect to the estimation parameters, and noisy
//! measurement synthesis.
//!
//! Both arrays are half-wavelength ULAs referenced to their first element,
//! so entry `n` of a steering vector is `exp(i pi n sin(angle))`. A scene of
//! `L` targets is parameterized by the real vector
//! `[angles, Re(coeffs), Im(coeffs)]` of length `3 L`.
//!
//! # Example
//!
//! ```
//! use sense_core::array::{ArrayGeometry, SceneParams, target_response};
//! use sense_core::C64;
//!
//! let geom = ArrayGeometry::new(4, 8).unwrap();
//! let scene = SceneParams::new(vec![0.3], vec![C64::new(1.0, -0.5)]).unwrap();
//! let h = target_response(&scene, &geom);
//! assert_eq!((h.nrows(), h.ncols()), (8, 4));
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SenseError};
use crate::linalg::{C64, CMat, CVec, IM, RVec, cr};
use crate::random::complex_gaussian_matrix;

/// Antenna counts for the transmit and receive arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_tx: usize,
    pub n_rx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArraySide {
    Tx,
    Rx,
}

impl ArrayGeometry {
    pub fn new(n_tx: usize, n_rx: usize) -> Result<Self> {
        if n_tx == 0 || n_rx == 0 {
            return Err(SenseError::Config(format!(
                "arrays need at least one antenna, got tx {n_tx}, rx {n_rx}"
            )));
        }
        Ok(ArrayGeometry { n_tx, n_rx })
    }

    pub fn antennas(&self, side: ArraySide) -> usize {
        match side {
            ArraySide::Tx => self.n_tx,
            ArraySide::Rx => self.n_rx,
        }
    }

    pub fn steering(&self, side: ArraySide, angle: f64) -> CVec {
        steering_vector(self.antennas(side), angle)
    }

    pub fn steering_derivative(&self, side: ArraySide, angle: f64) -> CVec {
        steering_derivative(self.antennas(side), angle)
    }

    pub fn steering_second_derivative(&self, side: ArraySide, angle: f64) -> CVec {
        steering_second_derivative(self.antennas(side), angle)
    }
}

/// Steering vector of a half-wavelength ULA with `len` elements.
pub fn steering_vector(len: usize, angle: f64) -> CVec {
    let s = std::f64::consts::PI * angle.sin();
    CVec::from_fn(len, |n, _| (IM * cr(n as f64 * s)).exp())
}

/// Entrywise derivative of [`steering_vector`] with respect to the angle.
pub fn steering_derivative(len: usize, angle: f64) -> CVec {
    let s = std::f64::consts::PI * angle.sin();
    let c = std::f64::consts::PI * angle.cos();
    CVec::from_fn(len, |n, _| {
        let n = n as f64;
        IM * cr(n * c) * (IM * cr(n * s)).exp()
    })
}

/// Entrywise second derivative of [`steering_vector`] with respect to the
/// angle.
pub fn steering_second_derivative(len: usize, angle: f64) -> CVec {
    let s = std::f64::consts::PI * angle.sin();
    let c = std::f64::consts::PI * angle.cos();
    CVec::from_fn(len, |n, _| {
        let n = n as f64;
        (IM * cr(-n * s) + cr(-n * n * c * c)) * (IM * cr(n * s)).exp()
    })
}

/// True target parameters: one angle and one complex reflection coefficient
/// per target.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    angles: Vec<f64>,
    coeffs: Vec<C64>,
}

impl SceneParams {
    pub fn new(angles: Vec<f64>, coeffs: Vec<C64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(SenseError::Config("scene needs at least one target".into()));
        }
        if angles.len() != coeffs.len() {
            return Err(SenseError::Shape {
                context: "SceneParams::new",
                detail: format!("{} angles but {} coefficients", angles.len(), coeffs.len()),
            });
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(SenseError::Config("scene angles must be finite".into()));
        }
        Ok(SceneParams { angles, coeffs })
    }

    pub fn num_targets(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    /// Stacks the parameters as `[angles, Re(coeffs), Im(coeffs)]`.
    pub fn as_real_vector(&self) -> RVec {
        let l = self.num_targets();
        RVec::from_fn(3 * l, |i, _| match param_kind(i, l).expect("index in range") {
            ParamKind::Angle(j) => self.angles[j],
            ParamKind::CoeffRe(j) => self.coeffs[j].re,
            ParamKind::CoeffIm(j) => self.coeffs[j].im,
        })
    }

    /// Inverse of [`SceneParams::as_real_vector`].
    pub fn from_real_vector(theta: &RVec) -> Result<Self> {
        if theta.len() % 3 != 0 || theta.is_empty() {
            return Err(SenseError::Shape {
                context: "SceneParams::from_real_vector",
                detail: format!("length {} is not a positive multiple of 3", theta.len()),
            });
        }
        let l = theta.len() / 3;
        let angles = (0..l).map(|j| theta[j]).collect();
        let coeffs = (0..l).map(|j| C64::new(theta[l + j], theta[2 * l + j])).collect();
        SceneParams::new(angles, coeffs)
    }
}

/// Which real estimation parameter an index into the stacked vector refers
/// to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Angle(usize),
    CoeffRe(usize),
    CoeffIm(usize),
}

/// Number of real estimation parameters for `num_targets` targets.
pub fn param_count(num_targets: usize) -> usize {
    3 * num_targets
}

pub fn param_kind(index: usize, num_targets: usize) -> Result<ParamKind> {
    let l = num_targets;
    if index >= 3 * l {
        return Err(SenseError::Shape {
            context: "param_kind",
            detail: format!("index {index} out of range for {l} targets"),
        });
    }
    Ok(if index < l {
        ParamKind::Angle(index)
    } else if index < 2 * l {
        ParamKind::CoeffRe(index - l)
    } else {
        ParamKind::CoeffIm(index - 2 * l)
    })
}

/// Channel matrix `sum_j coeff_j a_rx(angle_j) a_tx(angle_j)^H`.
pub fn target_response(scene: &SceneParams, geom: &ArrayGeometry) -> CMat {
    let mut h = CMat::zeros(geom.n_rx, geom.n_tx);
    for (angle, coeff) in scene.angles.iter().zip(&scene.coeffs) {
        let a_r = geom.steering(ArraySide::Rx, *angle);
        let a_t = geom.steering(ArraySide::Tx, *angle);
        h += a_r * a_t.adjoint() * *coeff;
    }
    h
}

/// Angle-dependent factor matrices of the response derivatives, one set per
/// target. These carry no dependence on the reflection coefficients: the
/// first derivative with respect to angle `j` is `coeff_j * tangent[j]`, and
/// the derivatives with respect to `Re(coeff_j)` and `Im(coeff_j)` are
/// `outer[j]` and `i * outer[j]`.
#[derive(Debug, Clone)]
pub struct ResponseBasis {
    /// `a_rx a_tx^H` per target.
    pub outer: Vec<CMat>,
    /// `d/d angle (a_rx a_tx^H)` per target.
    pub tangent: Vec<CMat>,
    /// `d^2/d angle^2 (a_rx a_tx^H)` per target.
    pub curvature: Vec<CMat>,
}

pub fn response_basis(angles: &[f64], geom: &ArrayGeometry) -> ResponseBasis {
    let mut outer = Vec::with_capacity(angles.len());
    let mut tangent = Vec::with_capacity(angles.len());
    let mut curvature = Vec::with_capacity(angles.len());
    for &angle in angles {
        let a_r = geom.steering(ArraySide::Rx, angle);
        let a_t = geom.steering(ArraySide::Tx, angle);
        let d_r = geom.steering_derivative(ArraySide::Rx, angle);
        let d_t = geom.steering_derivative(ArraySide::Tx, angle);
        let s_r = geom.steering_second_derivative(ArraySide::Rx, angle);
        let s_t = geom.steering_second_derivative(ArraySide::Tx, angle);
        outer.push(&a_r * a_t.adjoint());
        tangent.push(&d_r * a_t.adjoint() + &a_r * d_t.adjoint());
        curvature.push(&s_r * a_t.adjoint() + (&d_r * d_t.adjoint()).scale(2.0) + &a_r * s_t.adjoint());
    }
    ResponseBasis {
        outer,
        tangent,
        curvature,
    }
}

impl ResponseBasis {
    pub fn num_targets(&self) -> usize {
        self.outer.len()
    }

    /// Factor matrix of the first derivative for one parameter. The scalar
    /// coefficient multiplying it is `coeff_j`, `1`, or `i` respectively.
    pub fn factor(&self, kind: ParamKind) -> &CMat {
        match kind {
            ParamKind::Angle(j) => &self.tangent[j],
            ParamKind::CoeffRe(j) | ParamKind::CoeffIm(j) => &self.outer[j],
        }
    }
}

/// First derivative of the channel matrix with respect to one stacked
/// parameter.
pub fn response_jacobian(scene: &SceneParams, geom: &ArrayGeometry, index: usize) -> Result<CMat> {
    let basis = response_basis(&scene.angles, geom);
    Ok(match param_kind(index, scene.num_targets())? {
        ParamKind::Angle(j) => basis.tangent[j].map(|x| x * scene.coeffs[j]),
        ParamKind::CoeffRe(j) => basis.outer[j].clone(),
        ParamKind::CoeffIm(j) => basis.outer[j].map(|x| x * IM),
    })
}

/// Second derivative of the channel matrix with respect to two stacked
/// parameters. Cross-target second derivatives vanish because the response
/// is a sum of per-target terms, and coefficient-coefficient derivatives
/// vanish because the response is affine in each coefficient.
pub fn response_hessian(
    scene: &SceneParams,
    geom: &ArrayGeometry,
    index_a: usize,
    index_b: usize,
) -> Result<CMat> {
    let l = scene.num_targets();
    let (ka, kb) = (param_kind(index_a, l)?, param_kind(index_b, l)?);
    // Canonical order so hessian(i, j) and hessian(j, i) share a code path.
    let (ka, kb) = if index_a <= index_b { (ka, kb) } else { (kb, ka) };
    let basis = response_basis(&scene.angles, geom);
    let zero = || CMat::zeros(geom.n_rx, geom.n_tx);
    Ok(match (ka, kb) {
        (ParamKind::Angle(a), ParamKind::Angle(b)) if a == b => {
            basis.curvature[a].map(|x| x * scene.coeffs[a])
        }
        (ParamKind::Angle(a), ParamKind::CoeffRe(b)) if a == b => basis.tangent[a].clone(),
        (ParamKind::Angle(a), ParamKind::CoeffIm(b)) if a == b => basis.tangent[a].map(|x| x * IM),
        _ => zero(),
    })
}

/// Transmit and receive beamforming matrices applied during one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerPair {
    /// Transmit beamformer, `n_tx` rows.
    pub v: CMat,
    /// Receive combiner, `n_rx` rows.
    pub w: CMat,
}

impl BeamformerPair {
    pub fn new(v: CMat, w: CMat) -> Self {
        BeamformerPair { v, w }
    }

    pub fn validate(&self, geom: &ArrayGeometry) -> Result<()> {
        if self.v.nrows() != geom.n_tx || self.v.ncols() == 0 {
            return Err(SenseError::Shape {
                context: "BeamformerPair::validate",
                detail: format!(
                    "transmit beamformer is {}x{}, array has {} antennas",
                    self.v.nrows(),
                    self.v.ncols(),
                    geom.n_tx
                ),
            });
        }
        if self.w.nrows() != geom.n_rx || self.w.ncols() == 0 {
            return Err(SenseError::Shape {
                context: "BeamformerPair::validate",
                detail: format!(
                    "receive combiner is {}x{}, array has {} antennas",
                    self.w.nrows(),
                    self.w.ncols(),
                    geom.n_rx
                ),
            });
        }
        Ok(())
    }

    /// tr(V V^H), the transmit energy of the stage.
    pub fn transmit_energy(&self) -> f64 {
        self.v.norm_squared()
    }
}

/// Receiver noise matrix with i.i.d. CN(0, 1) entries, one column per
/// transmit beam.
pub fn draw_noise<R: Rng + ?Sized>(geom: &ArrayGeometry, cols: usize, rng: &mut R) -> CMat {
    complex_gaussian_matrix(rng, geom.n_rx, cols)
}

/// Noiseless combined response `W^H H V`.
pub fn noiseless_measurement(
    scene: &SceneParams,
    geom: &ArrayGeometry,
    pair: &BeamformerPair,
) -> Result<CMat> {
    pair.validate(geom)?;
    let h = target_response(scene, geom);
    Ok(pair.w.adjoint() * h * &pair.v)
}

/// Measurement `W^H (H V + Z)` using the leading columns of a caller-supplied
/// noise matrix. Sharing one noise matrix across strategies gives paired
/// comparisons.
pub fn measurement_from_noise(
    scene: &SceneParams,
    geom: &ArrayGeometry,
    pair: &BeamformerPair,
    noise: &CMat,
) -> Result<CMat> {
    let m_t = pair.v.ncols();
    if noise.nrows() != geom.n_rx || noise.ncols() < m_t {
        return Err(SenseError::Shape {
            context: "measurement_from_noise",
            detail: format!(
                "noise is {}x{}, need {}x{} or wider",
                noise.nrows(),
                noise.ncols(),
                geom.n_rx,
                m_t
            ),
        });
    }
    let clean = noiseless_measurement(scene, geom, pair)?;
    Ok(clean + pair.w.adjoint() * noise.columns(0, m_t))
}

/// Measurement with freshly drawn noise.
pub fn simulate_measurement<R: Rng + ?Sized>(
    scene: &SceneParams,
    geom: &ArrayGeometry,
    pair: &BeamformerPair,
    rng: &mut R,
) -> Result<CMat> {
    let noise = draw_noise(geom, pair.v.ncols(), rng);
    measurement_from_noise(scene, geom, pair, &noise)
}
