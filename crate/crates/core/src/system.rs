//! Discrete-time LTI problem instances, zero-order-hold discretization and
//! random parameter variants.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("{name}: {detail}")]
    Invalid { name: String, detail: String },
    #[error("{name}: (A, B) is not stabilizable")]
    NotStabilizable { name: String },
    #[error("{name}: (Q^1/2, A) is not detectable")]
    NotDetectable { name: String },
    #[error("could not draw a well-posed variant of {base} within {attempts} attempts")]
    VariantBudget { base: String, attempts: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Continuous-time model `ẋ = Ac x + Bc u` a discrete system was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel<T> {
    pub ac: Tensor<T>,
    pub bc: Tensor<T>,
}

/// One LQR problem instance: `x⁺ = A x + B u` with stage cost `xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem<T = f64> {
    pub id: usize,
    pub name: String,
    /// Catalog entry this system belongs to (equal to `name` for nominal systems).
    pub family: String,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub q: Tensor<T>,
    pub r: Tensor<T>,
    pub dt: f64,
    /// Half-width of the box initial conditions are drawn from.
    pub ic_bound: f64,
    pub continuous: Option<ContinuousModel<T>>,
}

impl<T: Scalar> LtiSystem<T> {
    /// Validates shapes, `Q ⪰ 0`, `R ≻ 0`, stabilizability and detectability.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        name: impl Into<String>,
        family: impl Into<String>,
        a: Tensor<T>,
        b: Tensor<T>,
        q: Tensor<T>,
        r: Tensor<T>,
        dt: f64,
    ) -> Result<Self, SystemError> {
        let sys = Self {
            id,
            name: name.into(),
            family: family.into(),
            a,
            b,
            q,
            r,
            dt,
            ic_bound: 1.0,
            continuous: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_continuous(mut self, model: ContinuousModel<T>) -> Self {
        self.continuous = Some(model);
        self
    }

    pub fn with_ic_bound(mut self, bound: f64) -> Self {
        self.ic_bound = bound;
        self
    }

    pub fn n_x(&self) -> usize {
        self.a.rows()
    }

    pub fn n_u(&self) -> usize {
        self.b.cols()
    }

    fn invalid(&self, detail: impl Into<String>) -> SystemError {
        SystemError::Invalid {
            name: self.name.clone(),
            detail: detail.into(),
        }
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let n = self.a.rows();
        if self.a.rank() != 2 || self.a.cols() != n || n == 0 {
            return Err(self.invalid(format!("A must be square, got {:?}", self.a.shape())));
        }
        if self.b.rank() != 2 || self.b.rows() != n || self.b.cols() == 0 {
            return Err(self.invalid(format!("B must be {n}×m, got {:?}", self.b.shape())));
        }
        let m = self.b.cols();
        if self.q.shape() != [n, n] {
            return Err(self.invalid(format!("Q must be {n}×{n}, got {:?}", self.q.shape())));
        }
        if self.r.shape() != [m, m] {
            return Err(self.invalid(format!("R must be {m}×{m}, got {:?}", self.r.shape())));
        }
        if !(self.dt > 0.0) {
            return Err(self.invalid("sample time must be positive"));
        }
        for (label, mat) in [("A", &self.a), ("B", &self.b), ("Q", &self.q), ("R", &self.r)] {
            if !mat.is_finite() {
                return Err(self.invalid(format!("{label} has non-finite entries")));
            }
        }
        let q_scale = self.q.max_abs().as_f64().max(1.0);
        if linalg::max_asymmetry(&self.q)? > 1e-12 * q_scale {
            return Err(self.invalid("Q is not symmetric"));
        }
        if linalg::min_symmetric_eigenvalue(&self.q)? < -1e-12 * q_scale {
            return Err(self.invalid("Q is not positive semi-definite"));
        }
        let r_scale = self.r.max_abs().as_f64().max(1.0);
        if linalg::max_asymmetry(&self.r)? > 1e-12 * r_scale {
            return Err(self.invalid("R is not symmetric"));
        }
        if linalg::cholesky(&self.r).is_err() {
            return Err(self.invalid("R is not positive definite"));
        }
        if !linalg::is_stabilizable(&self.a, &self.b)? {
            return Err(SystemError::NotStabilizable {
                name: self.name.clone(),
            });
        }
        if !linalg::is_detectable(&self.q, &self.a)? {
            return Err(SystemError::NotDetectable {
                name: self.name.clone(),
            });
        }
        Ok(())
    }

    /// One step `A x + B u`.
    pub fn step(&self, x: &[T], u: &[T]) -> Vec<T> {
        let n = self.n_x();
        let m = self.n_u();
        let mut next = vec![T::zero(); n];
        for (i, out) in next.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &xj) in x.iter().enumerate() {
                acc += self.a.data()[i * n + j] * xj;
            }
            for (j, &uj) in u.iter().enumerate() {
                acc += self.b.data()[i * m + j] * uj;
            }
            *out = acc;
        }
        next
    }

    /// Stage cost `xᵀQx + uᵀRu`.
    pub fn stage_cost(&self, x: &[T], u: &[T]) -> T {
        quad_form(&self.q, x) + quad_form(&self.r, u)
    }
}

pub(crate) fn quad_form<T: Scalar>(m: &Tensor<T>, v: &[T]) -> T {
    let n = v.len();
    let mut acc = T::zero();
    for i in 0..n {
        let mut row = T::zero();
        for j in 0..n {
            row += m.data()[i * n + j] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// Zero-order-hold discretization of `ẋ = Ac x + Bc u` with sample time `dt`:
/// `exp([[Ac, Bc], [0, 0]]·dt) = [[A, B], [0, I]]`.
pub fn discretize<T: Scalar>(ac: &Tensor<T>, bc: &Tensor<T>, dt: T) -> Result<(Tensor<T>, Tensor<T>), SystemError> {
    let n = ac.rows();
    if ac.rank() != 2 || ac.cols() != n {
        return Err(ShapeError::Invalid {
            op: "discretize",
            detail: format!("Ac must be square, got {:?}", ac.shape()),
        }
        .into());
    }
    if bc.rank() != 2 || bc.rows() != n {
        return Err(ShapeError::Mismatch {
            op: "discretize",
            left: ac.shape().to_vec(),
            right: bc.shape().to_vec(),
        }
        .into());
    }
    if !(dt > T::zero()) {
        return Err(SystemError::Invalid {
            name: "discretize".into(),
            detail: "sample time must be positive".into(),
        });
    }
    let m = bc.cols();
    let size = n + m;
    let aug = Tensor::from_fn(size, size, |i, j| {
        if i >= n {
            T::zero()
        } else if j < n {
            ac.at(i, j) * dt
        } else {
            bc.at(i, j - n) * dt
        }
    });
    let e = linalg::expm(&aug, T::epsilon())?;
    let a = Tensor::from_fn(n, n, |i, j| e.at(i, j));
    let b = Tensor::from_fn(n, m, |i, j| e.at(i, n + j));
    Ok((a, b))
}

/// Recipe for random parameter variants of a catalog system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub base_name: String,
    /// Relative perturbation bound, `0 ≤ delta < 1`.
    pub delta: f64,
    pub seed: u64,
    pub count: usize,
}

pub const VARIANT_ATTEMPTS: usize = 64;

/// Draws `spec.count` variants of `base`.
///
/// Every nonzero entry of the base's continuous-time `(Ac, Bc)` is scaled by an
/// independent factor in `[1 − δ, 1 + δ]` and the result is discretized again
/// with the base's sample time; structural zeros stay zero. Systems without a
/// continuous model are perturbed directly in discrete time. Draws that fail
/// validation are redrawn from the same variant's stream.
pub fn make_variants(base: &LtiSystem<f64>, spec: &VariantSpec, first_id: usize) -> Result<Vec<LtiSystem<f64>>, SystemError> {
    if !(0.0..1.0).contains(&spec.delta) {
        return Err(SystemError::Invalid {
            name: spec.base_name.clone(),
            detail: format!("perturbation bound {} outside [0, 1)", spec.delta),
        });
    }
    (0..spec.count)
        .map(|k| {
            let mut stream = rng::substream(spec.seed, rng::VARIANTS, k as u64);
            for _ in 0..VARIANT_ATTEMPTS {
                let mut perturb = |m: &Tensor<f64>| {
                    let mut out = m.clone();
                    for v in out.data_mut() {
                        if *v != 0.0 && spec.delta != 0.0 {
                            *v *= stream.gen_range(1.0 - spec.delta..=1.0 + spec.delta);
                        }
                    }
                    out
                };
                let name = format!("{} #{}", base.family, k + 1);
                let candidate = match &base.continuous {
                    Some(cm) => {
                        let ac = perturb(&cm.ac);
                        let bc = perturb(&cm.bc);
                        discretize(&ac, &bc, base.dt).and_then(|(a, b)| {
                            LtiSystem::new(first_id + k, name, base.family.clone(), a, b, base.q.clone(), base.r.clone(), base.dt)
                                .map(|s| s.with_continuous(ContinuousModel { ac, bc }))
                        })
                    }
                    None => {
                        let a = perturb(&base.a);
                        let b = perturb(&base.b);
                        LtiSystem::new(first_id + k, name, base.family.clone(), a, b, base.q.clone(), base.r.clone(), base.dt)
                    }
                };
                if let Ok(sys) = candidate {
                    return Ok(sys.with_ic_bound(base.ic_bound));
                }
            }
            Err(SystemError::VariantBudget {
                base: spec.base_name.clone(),
                attempts: VARIANT_ATTEMPTS,
            })
        })
        .collect()
}
