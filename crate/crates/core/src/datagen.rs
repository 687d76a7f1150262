//! Optimal-controller rollouts and raw dataset assembly.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lqr::{self, DareOptions, LqrError, LqrSolution};
use crate::rng;
use crate::system::LtiSystem;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("system {system_id}: {source}")]
    Solver { system_id: usize, source: LqrError },
    #[error("system {system_id}, trajectory {init_id}: state became non-finite at step {step}")]
    NonFinite { system_id: usize, init_id: usize, step: usize },
    #[error("{0}")]
    Invalid(String),
}

/// States `x_0..x_{T-1}` and controls `u_0..u_{T-1}` of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub system_id: usize,
    pub init_id: usize,
    /// `T × n_x`.
    pub states: Tensor<f64>,
    /// `T × n_u`.
    pub controls: Tensor<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x0(&self) -> &[f64] {
        self.states.row(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub seed: u64,
    pub trajectories_per_system: usize,
    pub horizon: usize,
    pub dare_tol: f64,
    pub dare_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    /// `systems[i].id == i`.
    pub systems: Vec<LtiSystem<f64>>,
    pub solutions: Vec<LqrSolution<f64>>,
    /// Ordered by `(system_id, init_id)`.
    pub trajectories: Vec<Trajectory>,
    pub meta: GenerationMeta,
}

impl TrajectoryDataset {
    pub fn trajectories_of(&self, system_id: usize) -> &[Trajectory] {
        let j = self.meta.trajectories_per_system;
        &self.trajectories[system_id * j..(system_id + 1) * j]
    }
}

/// Simulates `u_t = −K x_t`, `x_{t+1} = A x_t + B u_t` for `horizon` steps.
pub fn rollout_optimal(sys: &LtiSystem<f64>, sol: &LqrSolution<f64>, x0: &[f64], horizon: usize, init_id: usize) -> Result<Trajectory, DatagenError> {
    if x0.len() != sys.n_x() {
        return Err(DatagenError::Invalid(format!(
            "initial state has {} entries, system {} has {} states",
            x0.len(),
            sys.id,
            sys.n_x()
        )));
    }
    if horizon == 0 {
        return Err(DatagenError::Invalid("horizon must be at least 1".into()));
    }
    let (n, m) = (sys.n_x(), sys.n_u());
    let mut states = Vec::with_capacity(horizon * n);
    let mut controls = Vec::with_capacity(horizon * m);
    let mut x = x0.to_vec();
    for step in 0..horizon {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DatagenError::NonFinite {
                system_id: sys.id,
                init_id,
                step,
            });
        }
        let u = sol.control(&x);
        states.extend_from_slice(&x);
        controls.extend_from_slice(&u);
        x = sys.step(&x, &u);
    }
    Ok(Trajectory {
        system_id: sys.id,
        init_id,
        states: Tensor::new(vec![horizon, n], states).expect("sized above"),
        controls: Tensor::new(vec![horizon, m], controls).expect("sized above"),
    })
}

/// `count` vectors with entries i.i.d. uniform in `[−bound, bound]`.
pub fn sample_initial_conditions(n_x: usize, count: usize, bound: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..n_x)
                .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Solves each system once and rolls out `per_system` trajectories from
/// initial conditions in `[−ic_bound, ic_bound]`. Systems are re-indexed by
/// position. Initial conditions for system `i` come from the `datagen`
/// substream `i` of `seed`, so the result is independent of thread count.
pub fn build_dataset(systems: Vec<LtiSystem<f64>>, per_system: usize, horizon: usize, seed: u64) -> Result<TrajectoryDataset, DatagenError> {
    build_dataset_with(systems, per_system, horizon, seed, DareOptions::default())
}

pub fn build_dataset_with(
    mut systems: Vec<LtiSystem<f64>>,
    per_system: usize,
    horizon: usize,
    seed: u64,
    dare: DareOptions,
) -> Result<TrajectoryDataset, DatagenError> {
    if per_system == 0 || horizon == 0 {
        return Err(DatagenError::Invalid("need at least one trajectory of at least one step".into()));
    }
    for (i, sys) in systems.iter_mut().enumerate() {
        sys.id = i;
    }
    let per: Vec<(LqrSolution<f64>, Vec<Trajectory>)> = systems
        .par_iter()
        .map(|sys| {
            let sol = lqr::solve_dare(sys, dare).map_err(|source| DatagenError::Solver { system_id: sys.id, source })?;
            let mut stream = rng::substream(seed, rng::DATAGEN, sys.id as u64);
            let trajs = sample_initial_conditions(sys.n_x(), per_system, sys.ic_bound, &mut stream)
                .iter()
                .enumerate()
                .map(|(j, x0)| rollout_optimal(sys, &sol, x0, horizon, j))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((sol, trajs))
        })
        .collect::<Result<_, DatagenError>>()?;
    let mut solutions = Vec::with_capacity(per.len());
    let mut trajectories = Vec::with_capacity(per.len() * per_system);
    for (sol, trajs) in per {
        solutions.push(sol);
        trajectories.extend(trajs);
    }
    Ok(TrajectoryDataset {
        systems,
        solutions,
        trajectories,
        meta: GenerationMeta {
            seed,
            trajectories_per_system: per_system,
            horizon,
            dare_tol: dare.tol,
            dare_max_iter: dare.max_iter,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn golden() -> LtiSystem<f64> {
        LtiSystem::new(0, "g", "g", Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0), 1.0).unwrap()
    }

    #[test]
    fn zero_initial_state_gives_zero_trajectory() {
        let sys = golden();
        let sol = lqr::lqr(&sys).unwrap();
        let tr = rollout_optimal(&sys, &sol, &[0.0], 10, 0).unwrap();
        assert!(tr.states.data().iter().chain(tr.controls.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn golden_ratio_first_step() {
        let sys = golden();
        let sol = lqr::lqr(&sys).unwrap();
        let tr = rollout_optimal(&sys, &sol, &[1.0], 2, 0).unwrap();
        let k = (5f64.sqrt() - 1.0) / 2.0;
        assert!((tr.states.at(1, 0) - (1.0 - k)).abs() < 1e-12);
    }

    #[test]
    fn initial_conditions_are_bounded_and_reproducible() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let xa = sample_initial_conditions(3, 50, 0.5, &mut a);
        assert_eq!(xa, sample_initial_conditions(3, 50, 0.5, &mut b));
        assert!(xa.iter().flatten().all(|v| v.abs() <= 0.5));
        let zeros = sample_initial_conditions(3, 4, 0.0, &mut a);
        assert!(zeros.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_counts_and_feedback_consistency() {
        let cat = crate::catalog::catalog();
        let systems = vec![
            cat.nominal(cat.get("Double Integrator").unwrap(), 7).unwrap(),
            cat.nominal(cat.get("DC Motor").unwrap(), 9).unwrap(),
        ];
        let ds = build_dataset(systems, 3, 50, 11).unwrap();
        assert_eq!(ds.trajectories.len(), 6);
        assert_eq!(ds.systems[1].id, 1);
        for tr in &ds.trajectories {
            let sol = &ds.solutions[tr.system_id];
            for t in 0..tr.len() {
                let u = sol.control(tr.states.row(t));
                for (a, b) in u.iter().zip(tr.controls.row(t)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert_eq!(ds.trajectories_of(1)[2].init_id, 2);
    }
}
