//! Density-dependent nonlinear elastic law
//!
//! `T(eps) = eps / E1 - E2 f(xi) xi I`, with `xi = tr eps` and
//! `f(xi) = (1 + beta xi) / (E1 + d E2 (1 + beta xi))`,
//! together with the linear-fractional response functions `Phi1`, `Phi2`
//! of the parent implicit relation and their critical thresholds.

use thiserror::Error;

/// Relative guard on the volumetric denominator and on response-function poles.
pub const DENOM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("invalid material parameters: {0}")]
    InvalidParams(String),
    #[error("response function evaluated at tr T = {tr_t}, within tolerance of a pole (denominator {denominator:e})")]
    PoleProximity { tr_t: f64, denominator: f64 },
    #[error("inadmissible volumetric strain xi = {xi} (critical volumetric strain {xi_crit:?})")]
    InadmissibleStrain { xi: f64, xi_crit: Option<f64> },
}

/// Constitutive constants. `a1..a3` only enter `Phi1`/`Phi2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub e1: f64,
    pub e2: f64,
    pub beta: f64,
    pub d: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Default for MaterialParams {
    /// `E = 1`, `nu = 0.3` in normalised units, two-dimensional, linear (`beta = 0`).
    fn default() -> Self {
        Self {
            e1: 1.3,
            e2: -0.3,
            beta: 0.0,
            d: 2.0,
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
        }
    }
}

impl MaterialParams {
    pub fn new(e1: f64, e2: f64, beta: f64, d: f64) -> Result<Self, MaterialError> {
        let p = Self {
            e1,
            e2,
            beta,
            d,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    /// Compliance coefficients of linear elasticity: `E1 = (1 + nu) / E`, `E2 = -nu / E`.
    pub fn from_young_poisson(young: f64, poisson: f64, beta: f64) -> Result<Self, MaterialError> {
        Self::new((1.0 + poisson) / young, -poisson / young, beta, 2.0)
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_response_constants(mut self, a1: f64, a2: f64, a3: f64) -> Self {
        self.a1 = a1;
        self.a2 = a2;
        self.a3 = a3;
        self
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        if !(self.e1 > 0.0) {
            return Err(MaterialError::InvalidParams(format!("E1 = {} must be positive", self.e1)));
        }
        if self.d != 2.0 && self.d != 3.0 {
            return Err(MaterialError::InvalidParams(format!("d = {} must be 2 or 3", self.d)));
        }
        if (self.e1 + self.d * self.e2).abs() <= DENOM_TOL * self.e1 {
            return Err(MaterialError::InvalidParams(
                "E1 + d E2 must be nonzero".to_string(),
            ));
        }
        if ![self.e2, self.beta, self.a1, self.a2, self.a3].iter().all(|v| v.is_finite()) {
            return Err(MaterialError::InvalidParams("non-finite constant".to_string()));
        }
        Ok(())
    }

    /// Coefficients `(lambda, mu)` of the `beta = 0` law written as
    /// `T = 2 mu eps + lambda tr(eps) I`.
    pub fn linear_coefficients(&self) -> (f64, f64) {
        (-self.e2 / (self.e1 + self.d * self.e2), 0.5 / self.e1)
    }
}

/// Lamé constants from Young's modulus and Poisson's ratio.
pub fn lame_from_young_poisson(young: f64, poisson: f64) -> (f64, f64) {
    (
        young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson)),
        young / (2.0 * (1.0 + poisson)),
    )
}

/// Symmetric 2x2 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor2 {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
}

impl SymTensor2 {
    pub const ZERO: Self = Self { xx: 0.0, yy: 0.0, xy: 0.0 };

    pub fn new(xx: f64, yy: f64, xy: f64) -> Self {
        Self { xx, yy, xy }
    }

    pub fn diag(xx: f64, yy: f64) -> Self {
        Self { xx, yy, xy: 0.0 }
    }

    /// Symmetric part of a displacement gradient `g[i][j] = d u_i / d x_j`.
    pub fn sym_grad(g: [[f64; 2]; 2]) -> Self {
        Self {
            xx: g[0][0],
            yy: g[1][1],
            xy: 0.5 * (g[0][1] + g[1][0]),
        }
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    /// Frobenius product; the off-diagonal entry appears twice.
    pub fn ddot(&self, other: &Self) -> f64 {
        self.xx * other.xx + self.yy * other.yy + 2.0 * self.xy * other.xy
    }

    pub fn norm(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::new(a * self.xx, a * self.yy, a * self.xy)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.xx + other.xx, self.yy + other.yy, self.xy + other.xy)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.xx - other.xx, self.yy - other.yy, self.xy - other.xy)
    }

    /// Row `i` of the full tensor.
    pub fn row(&self, i: usize) -> [f64; 2] {
        if i == 0 {
            [self.xx, self.xy]
        } else {
            [self.xy, self.yy]
        }
    }
}

fn checked_ratio(num: f64, den: f64, tr_t: f64) -> Result<f64, MaterialError> {
    if den.abs() < DENOM_TOL {
        Err(MaterialError::PoleProximity { tr_t, denominator: den })
    } else {
        Ok(num / den)
    }
}

fn phi_denominators(tr_t: f64, p: &MaterialParams) -> Result<f64, MaterialError> {
    let first = 1.0 + p.a3 * tr_t;
    let second = 1.0 + (p.a3 - p.e1 * p.a1 - p.d * p.e2 * p.a2) * tr_t;
    for den in [first, second] {
        if den.abs() < DENOM_TOL {
            return Err(MaterialError::PoleProximity { tr_t, denominator: den });
        }
    }
    Ok(first * second)
}

/// `Phi1(tr T)`.
pub fn phi1(tr_t: f64, p: &MaterialParams) -> Result<f64, MaterialError> {
    let den = phi_denominators(tr_t, p)?;
    let num = 1.0 + (p.a3 + (p.a1 - p.a2) * p.e2 * p.d) * tr_t;
    checked_ratio(num, den, tr_t)
}

/// `Phi2(tr T)`.
pub fn phi2(tr_t: f64, p: &MaterialParams) -> Result<f64, MaterialError> {
    let den = phi_denominators(tr_t, p)?;
    let num = 1.0 + (p.a3 + (p.a1 - p.a2) * p.e1) * tr_t;
    checked_ratio(num, den, tr_t)
}

/// Critical stress traces of `Phi1`/`Phi2` and the critical volumetric strain
/// of the governing law. `None` means the threshold does not exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub t_cr1: Option<f64>,
    pub t_cr2: Option<f64>,
    pub xi_crit: Option<f64>,
}

pub fn critical_thresholds(p: &MaterialParams) -> Thresholds {
    let inv = |den: f64| (den != 0.0).then(|| -1.0 / den);
    let vol = p.d * p.e2 * p.beta;
    Thresholds {
        t_cr1: inv(p.a3),
        t_cr2: inv(p.a3 - p.e1 * p.a1 - p.d * p.e2 * p.a2),
        xi_crit: (vol != 0.0).then(|| -(p.e1 + p.d * p.e2) / vol),
    }
}

pub fn xi_crit(p: &MaterialParams) -> Option<f64> {
    critical_thresholds(p).xi_crit
}

/// Volumetric response at `xi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumetricState {
    pub xi: f64,
    pub f_val: f64,
    pub f_deriv: f64,
    pub admissible: bool,
}

impl VolumetricState {
    /// Coefficient of `tr(d eps) I` in the consistent tangent, `-E2 (f + xi f')`.
    pub fn tangent_coefficient(&self, p: &MaterialParams) -> f64 {
        -p.e2 * (self.f_val + self.xi * self.f_deriv)
    }
}

pub fn vol_response(xi: f64, p: &MaterialParams) -> VolumetricState {
    let s = 1.0 + p.beta * xi;
    let den = p.e1 + p.d * p.e2 * s;
    let den0 = p.e1 + p.d * p.e2;
    let f_val = s / den;
    let f_deriv = p.beta * p.e1 / (den * den);
    // same side of the pole as the unstrained state, and a positive
    // tangent volumetric stiffness 1/E1 + h'(xi)
    let away_from_pole = den.abs() > DENOM_TOL * den0.abs() && den.signum() == den0.signum();
    let stiffness = 1.0 / p.e1 - p.e2 * (f_val + xi * f_deriv);
    VolumetricState {
        xi,
        f_val,
        f_deriv,
        admissible: away_from_pole && stiffness > 0.0 && f_val.is_finite(),
    }
}

/// Scalar `1/E1 + h'(xi)`; positive in the elliptic regime.
pub fn volumetric_stiffness(xi: f64, p: &MaterialParams) -> f64 {
    let v = vol_response(xi, p);
    1.0 / p.e1 + v.tangent_coefficient(p)
}

fn admissible_state(eps: &SymTensor2, p: &MaterialParams) -> Result<VolumetricState, MaterialError> {
    let v = vol_response(eps.trace(), p);
    if v.admissible {
        Ok(v)
    } else {
        Err(MaterialError::InadmissibleStrain { xi: v.xi, xi_crit: xi_crit(p) })
    }
}

pub fn stress(eps: &SymTensor2, p: &MaterialParams) -> Result<SymTensor2, MaterialError> {
    let v = admissible_state(eps, p)?;
    let vol = -p.e2 * v.f_val * v.xi;
    let g = 1.0 / p.e1;
    Ok(SymTensor2::new(g * eps.xx + vol, g * eps.yy + vol, g * eps.xy))
}

/// Linear map `d eps -> shear * d eps + volumetric * tr(d eps) I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentOperator {
    pub shear: f64,
    pub volumetric: f64,
}

impl TangentOperator {
    pub fn apply(&self, d_eps: &SymTensor2) -> SymTensor2 {
        let v = self.volumetric * d_eps.trace();
        SymTensor2::new(
            self.shear * d_eps.xx + v,
            self.shear * d_eps.yy + v,
            self.shear * d_eps.xy,
        )
    }
}

/// Consistent tangent of [`stress`] at `eps`.
pub fn tangent(eps: &SymTensor2, p: &MaterialParams) -> Result<TangentOperator, MaterialError> {
    let v = admissible_state(eps, p)?;
    Ok(TangentOperator {
        shear: 1.0 / p.e1,
        volumetric: v.tangent_coefficient(p),
    })
}

/// Stress and tangent in one evaluation.
pub fn stress_and_tangent(
    eps: &SymTensor2,
    p: &MaterialParams,
) -> Result<(SymTensor2, TangentOperator), MaterialError> {
    let v = admissible_state(eps, p)?;
    let vol = -p.e2 * v.f_val * v.xi;
    let g = 1.0 / p.e1;
    Ok((
        SymTensor2::new(g * eps.xx + vol, g * eps.yy + vol, g * eps.xy),
        TangentOperator {
            shear: g,
            volumetric: v.tangent_coefficient(p),
        },
    ))
}

/// `1/2 T : eps`.
pub fn strain_energy_density(eps: &SymTensor2, t: &SymTensor2) -> f64 {
    0.5 * t.ddot(eps)
}
