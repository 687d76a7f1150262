//! Discrete algebraic Riccati equation and closed-loop cost evaluation.

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::scalar::Scalar;
use crate::system::{quad_form, LtiSystem};
use crate::tensor::{ShapeError, Tensor};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// State norm beyond which a rollout is declared diverged.
pub const DEFAULT_BLOWUP: f64 = 1e8;

#[derive(Debug, Error)]
pub enum LqrError {
    #[error("{name}: Riccati iteration did not converge in {iterations} iterations (last step {last_step:e})")]
    NotConverged { name: String, iterations: usize, last_step: f64 },
    #[error("{name}: {source}")]
    Numeric { name: String, source: LinalgError },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution<T = f64> {
    pub p: Tensor<T>,
    pub k: Tensor<T>,
    /// Frobenius norm of the Riccati defect at `p`.
    pub residual: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    /// Stop once `‖P⁺ − P‖_F < max(tol, 16 ε ‖P⁺‖_F)`; the second term is the
    /// roundoff floor of one Riccati step.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

struct Step<T> {
    next: Tensor<T>,
    k: Tensor<T>,
}

/// One Riccati map `P ↦ Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, plus the gain at `P`.
fn riccati_step<T: Scalar>(sys: &LtiSystem<T>, p: &Tensor<T>) -> Result<Step<T>, LqrError> {
    let pa = p.matmul(&sys.a)?;
    let pb = p.matmul(&sys.b)?;
    let gram = sys.r.add(&sys.b.t_matmul(&pb)?)?.symmetrized()?;
    let chol = linalg::cholesky(&gram).map_err(|source| LqrError::Numeric {
        name: sys.name.clone(),
        source,
    })?;
    let bt_pa = sys.b.t_matmul(&pa)?;
    let k = linalg::cholesky_solve(&chol, &bt_pa)?;
    let next = sys.q.add(&sys.a.t_matmul(&pa)?)?.sub(&bt_pa.t_matmul(&k)?)?.symmetrized()?;
    Ok(Step { next, k })
}

/// Frobenius norm of `Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA − P`.
pub fn riccati_residual<T: Scalar>(sys: &LtiSystem<T>, p: &Tensor<T>) -> Result<T, LqrError> {
    Ok(riccati_step(sys, p)?.next.sub(p)?.frobenius_norm())
}

/// Value iteration from `P₀ = Q`. The returned `P` is the first iterate whose
/// own Riccati step is below tolerance, so `residual` is that step.
pub fn solve_dare<T: Scalar>(sys: &LtiSystem<T>, opts: DareOptions) -> Result<LqrSolution<T>, LqrError> {
    let tol = T::lit(opts.tol);
    let mut p = sys.q.clone();
    let mut last_step = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let Step { next, k } = riccati_step(sys, &p)?;
        let residual = next.sub(&p)?.frobenius_norm();
        if !residual.is_finite() {
            break;
        }
        last_step = residual.as_f64();
        let floor = T::lit(16.0) * T::epsilon() * p.frobenius_norm();
        if residual < tol.max(floor) {
            return Ok(LqrSolution {
                p,
                k,
                residual,
                iterations: iter,
            });
        }
        p = next;
    }
    Err(LqrError::NotConverged {
        name: sys.name.clone(),
        iterations: opts.max_iter,
        last_step,
    })
}

/// Convenience wrapper with default tolerances.
pub fn lqr<T: Scalar>(sys: &LtiSystem<T>) -> Result<LqrSolution<T>, LqrError> {
    solve_dare(sys, DareOptions::default())
}

impl<T: Scalar> LqrSolution<T> {
    /// `u = −K x`.
    pub fn control(&self, x: &[T]) -> Vec<T> {
        self.k.mul_vec(x).expect("gain matches state dimension").into_iter().map(|v| -v).collect()
    }

    /// Infinite-horizon optimal cost `x₀ᵀ P x₀`.
    pub fn value(&self, x0: &[T]) -> T {
        quad_form(&self.p, x0)
    }

    /// `A − B K`.
    pub fn closed_loop(&self, sys: &LtiSystem<T>) -> Tensor<T> {
        sys.a.sub(&sys.b.matmul(&self.k).expect("shapes checked")).expect("shapes checked")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostOutcome<T> {
    /// `+∞` when diverged.
    pub cost: T,
    pub diverged: bool,
    /// Steps simulated before finishing or tripping the guard.
    pub steps: usize,
}

/// `Σ_{t<horizon} x_tᵀQx_t + u_tᵀRu_t` under `u_t = policy(x_t)`.
///
/// A state that is non-finite or whose norm exceeds `blowup` ends the rollout
/// with `cost = +∞`.
pub fn closed_loop_cost<T: Scalar>(
    sys: &LtiSystem<T>,
    mut policy: impl FnMut(&[T]) -> Vec<T>,
    x0: &[T],
    horizon: usize,
    blowup: f64,
) -> CostOutcome<T> {
    assert_eq!(x0.len(), sys.n_x(), "initial state dimension");
    let mut x = x0.to_vec();
    let mut cost = T::zero();
    for t in 0..horizon {
        let norm = x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(norm <= blowup) {
            return CostOutcome {
                cost: T::infinity(),
                diverged: true,
                steps: t,
            };
        }
        let u = policy(&x);
        cost += sys.stage_cost(&x, &u);
        x = sys.step(&x, &u);
    }
    if !cost.is_finite() {
        return CostOutcome {
            cost: T::infinity(),
            diverged: true,
            steps: horizon,
        };
    }
    CostOutcome {
        cost,
        diverged: false,
        steps: horizon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_radius;
    use rand::{Rng, SeedableRng};

    fn scalar_sys(a: f64, b: f64, q: f64, r: f64) -> LtiSystem<f64> {
        LtiSystem::new(0, "scalar", "scalar", Tensor::scalar(a), Tensor::scalar(b), Tensor::scalar(q), Tensor::scalar(r), 1.0)
            .unwrap()
    }

    fn double_integrator() -> LtiSystem<f64> {
        let dt = 0.02;
        LtiSystem::new(
            0,
            "di",
            "di",
            Tensor::from_f64_rows(&[[1.0, dt], [0.0, 1.0]]).unwrap(),
            Tensor::from_f64_rows(&[[dt * dt / 2.0], [dt]]).unwrap(),
            Tensor::identity(2),
            Tensor::scalar(0.1),
            dt,
        )
        .unwrap()
    }

    #[test]
    fn golden_ratio() {
        let sol = lqr(&scalar_sys(1.0, 1.0, 1.0, 1.0)).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.p.at(0, 0) - phi).abs() < 1e-12);
        assert!((sol.k.at(0, 0) - phi / (1.0 + phi)).abs() < 1e-12);
    }

    #[test]
    fn deadbeat_when_a_is_zero() {
        let sol = lqr(&scalar_sys(0.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(sol.p.at(0, 0), 1.0);
        assert_eq!(sol.k.at(0, 0), 0.0);
    }

    #[test]
    fn double_integrator_residual_and_stability() {
        let sys = double_integrator();
        let sol = lqr(&sys).unwrap();
        assert!(sol.residual < 1e-10, "residual {}", sol.residual);
        assert!(spectral_radius(&sol.closed_loop(&sys)).unwrap() < 1.0);
        assert!(crate::linalg::max_asymmetry(&sol.p).unwrap() < 1e-10);
        assert!(crate::linalg::min_symmetric_eigenvalue(&sol.p).unwrap() >= 0.0);
    }

    #[test]
    fn f32_solver_is_generic() {
        let sys = LtiSystem::<f32>::new(0, "s", "s", Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0), 1.0)
            .unwrap();
        let sol = solve_dare(&sys, DareOptions { tol: 1e-6, max_iter: 1000 }).unwrap();
        assert!((sol.p.at(0, 0) - 1.618034).abs() < 1e-5);
    }

    #[test]
    fn non_convergence_reports_last_step() {
        let err = solve_dare(&double_integrator(), DareOptions { tol: 1e-12, max_iter: 3 }).unwrap_err();
        assert!(matches!(err, LqrError::NotConverged { iterations: 3, .. }));
    }

    #[test]
    fn scalar_cost_matches_value_function() {
        let sys = scalar_sys(1.0, 1.0, 1.0, 1.0);
        let sol = lqr(&sys).unwrap();
        let out = closed_loop_cost(&sys, |x| sol.control(x), &[1.0], 200, DEFAULT_BLOWUP);
        assert!(!out.diverged);
        assert!((out.cost - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-8);
        let zero = closed_loop_cost(&sys, |x| sol.control(x), &[0.0], 200, DEFAULT_BLOWUP);
        assert_eq!(zero.cost, 0.0);
    }

    #[test]
    fn divergence_guard_trips() {
        let sys = scalar_sys(1.5, 1.0, 1.0, 1.0);
        let out = closed_loop_cost(&sys, |_| vec![0.0], &[1.0], 1000, 1e6);
        assert!(out.diverged);
        assert!(out.cost.is_infinite());
        assert!(out.steps < 1000);
    }

    #[test]
    fn perturbed_gains_never_beat_optimal() {
        let sys = double_integrator();
        let sol = lqr(&sys).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dk = Tensor::from_fn(1, 2, |_, _| rng.gen_range(-1.0..1.0));
            let dk = dk.scale(1e-2 / dk.frobenius_norm());
            let k2 = sol.k.add(&dk).unwrap();
            let cl = sys.a.sub(&sys.b.matmul(&k2).unwrap()).unwrap();
            if spectral_radius(&cl).unwrap() >= 1.0 {
                continue;
            }
            let opt = closed_loop_cost(&sys, |x| sol.control(x), &x0, 5000, DEFAULT_BLOWUP).cost;
            let pert = closed_loop_cost(&sys, |x| vec![-(k2.at(0, 0) * x[0] + k2.at(0, 1) * x[1])], &x0, 5000, DEFAULT_BLOWUP).cost;
            assert!(pert >= opt - 1e-9, "{pert} < {opt}");
        }
    }
}
