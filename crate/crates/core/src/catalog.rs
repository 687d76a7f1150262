//! Named benchmark plants.
//!
//! The catalog lives in a versioned TOML file (`data/catalog.toml` is
//! embedded as the default). Each entry names a *builder* and its physical
//! parameters; the builder produces the continuous-time model which is then
//! discretized with zero-order hold.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::system::{self, ContinuousModel, LtiSystem, SystemError};
use crate::tensor::Tensor;

const BUILTIN: &str = include_str!("../data/catalog.toml");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io error reading catalog: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported catalog version {0}")]
    Version(u32),
    #[error("{entry}: {detail}")]
    Param { entry: String, detail: String },
    #[error("unknown system {0:?}")]
    UnknownSystem(String),
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub index: usize,
    pub name: String,
    pub split: Split,
    pub model: String,
    pub equilibrium: String,
    pub params: toml::Table,
    #[serde(default)]
    pub q_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub r_weight: Option<f64>,
    #[serde(default)]
    pub ic_bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    pub dt: f64,
    pub default_r_weight: f64,
    pub default_ic_bound: f64,
    #[serde(rename = "system")]
    pub entries: Vec<CatalogEntry>,
}

/// Lowercased alphanumerics only, so "double-integrator" finds "Double Integrator".
pub fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// The embedded default catalog.
pub fn catalog() -> Catalog {
    Catalog::from_toml_str(BUILTIN).expect("embedded catalog is valid")
}

impl Catalog {
    pub fn from_toml_str(text: &str) -> Result<Self, CatalogError> {
        let cat: Catalog = toml::from_str(text)?;
        if cat.version != 1 {
            return Err(CatalogError::Version(cat.version));
        }
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn seen(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.iter().filter(|e| e.split == Split::Seen)
    }

    pub fn unseen(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.iter().filter(|e| e.split == Split::Unseen)
    }

    pub fn get(&self, name: &str) -> Option<&CatalogEntry> {
        let key = normalize_name(name);
        self.entries.iter().find(|e| normalize_name(&e.name) == key)
    }

    /// `seen`, `unseen`, `all`, or a comma-separated list of names.
    pub fn select(&self, selector: &str) -> Result<Vec<&CatalogEntry>, CatalogError> {
        match selector.trim() {
            "seen" => Ok(self.seen().collect()),
            "unseen" => Ok(self.unseen().collect()),
            "all" => Ok(self.entries.iter().collect()),
            list => list
                .split(',')
                .map(|n| self.get(n).ok_or_else(|| CatalogError::UnknownSystem(n.trim().to_string())))
                .collect(),
        }
    }

    /// Nominal discrete-time system for `entry`, with the catalog's sample time.
    pub fn nominal(&self, entry: &CatalogEntry, id: usize) -> Result<LtiSystem<f64>, CatalogError> {
        entry.build(id, self.dt, self.default_r_weight, self.default_ic_bound)
    }

    /// `n_variants` perturbed copies of every entry at `±delta`, sampled with
    /// `dt` (the nominal systems when `n_variants == 0`). Variants of entry
    /// `e` use seed `derive_seed(seed, "variants", e.index)`. Ids are positions.
    pub fn population(&self, entries: &[&CatalogEntry], n_variants: usize, delta: f64, dt: f64, seed: u64) -> Result<Vec<LtiSystem<f64>>, CatalogError> {
        let mut out = Vec::new();
        for e in entries {
            let base = e.build(out.len(), dt, self.default_r_weight, self.default_ic_bound)?;
            if n_variants == 0 {
                out.push(base);
                continue;
            }
            let spec = system::VariantSpec {
                base_name: e.name.clone(),
                delta,
                seed: crate::rng::derive_seed(seed, crate::rng::VARIANTS, e.index as u64),
                count: n_variants,
            };
            out.extend(system::make_variants(&base, &spec, out.len())?);
        }
        Ok(out)
    }
}

impl CatalogEntry {
    pub fn continuous(&self) -> Result<ContinuousModel<f64>, CatalogError> {
        let p = Params { entry: self };
        let (ac, bc) = match self.model.as_str() {
            "state_space" => (p.mat("ac")?, p.mat("bc")?),
            "second_order" => second_order(&p.mat("mass")?, &p.mat("stiffness")?, &p.mat("damping")?, &p.mat("input")?, &p)?,
            "mass_spring_damper" => mass_spring_damper(&p)?,
            "mass_chain" => mass_chain(&p)?,
            "pendulum" => pendulum(&p)?,
            "cart_pole" => cart_pole(&p)?,
            "dc_motor" => dc_motor(&p)?,
            "planar_arm" => {
                let (m, k, c, e) = planar_arm(&p.vec("masses")?, &p.vec("lengths")?, p.num("gravity")?, p.num("joint_damping")?);
                second_order(&m, &k, &c, &e, &p)?
            }
            "scara" => scara(&p)?,
            "dual_arm" => dual_arm(&p)?,
            "diff_drive" => diff_drive(&p)?,
            "omni_robot" => omni_robot(&p)?,
            "cable_robot" => cable_robot(&p)?,
            "flexible_joint" => flexible_joint(&p)?,
            "lotka_volterra" => lotka_volterra(&p)?,
            "em_actuator" => em_actuator(&p)?,
            "thermal_rc" => thermal_rc(&p)?,
            "coupled_tanks" => coupled_tanks(&p)?,
            "modal" => modal(&p)?,
            "motor_generator" => motor_generator(&p)?,
            other => return Err(p.err(format!("unknown model builder {other:?}"))),
        };
        if ac.rank() != 2 || ac.rows() != ac.cols() || bc.rows() != ac.rows() {
            return Err(p.err(format!("inconsistent shapes Ac {:?}, Bc {:?}", ac.shape(), bc.shape())));
        }
        Ok(ContinuousModel { ac, bc })
    }

    pub fn build(&self, id: usize, dt: f64, default_r: f64, default_bound: f64) -> Result<LtiSystem<f64>, CatalogError> {
        let model = self.continuous()?;
        let (a, b) = system::discretize(&model.ac, &model.bc, dt)?;
        let n = a.rows();
        let q_weights = self.q_weights.clone().unwrap_or_else(|| vec![1.0; n]);
        if q_weights.len() != n {
            return Err(CatalogError::Param {
                entry: self.name.clone(),
                detail: format!("q_weights has {} entries for {n} states", q_weights.len()),
            });
        }
        let q = Tensor::diag(&q_weights);
        let r = Tensor::identity(b.cols()).scale(self.r_weight.unwrap_or(default_r));
        Ok(LtiSystem::new(id, self.name.clone(), self.name.clone(), a, b, q, r, dt)?
            .with_continuous(model)
            .with_ic_bound(self.ic_bound.unwrap_or(default_bound)))
    }
}

struct Params<'a> {
    entry: &'a CatalogEntry,
}

impl Params<'_> {
    fn err(&self, detail: impl Into<String>) -> CatalogError {
        CatalogError::Param {
            entry: self.entry.name.clone(),
            detail: detail.into(),
        }
    }

    fn value(&self, key: &str) -> Result<&toml::Value, CatalogError> {
        self.entry.params.get(key).ok_or_else(|| self.err(format!("missing parameter {key:?}")))
    }

    fn as_num(&self, v: &toml::Value, key: &str) -> Result<f64, CatalogError> {
        match v {
            toml::Value::Float(f) => Ok(*f),
            toml::Value::Integer(i) => Ok(*i as f64),
            _ => Err(self.err(format!("parameter {key:?} must be a number"))),
        }
    }

    fn num(&self, key: &str) -> Result<f64, CatalogError> {
        self.as_num(self.value(key)?, key)
    }

    fn num_or(&self, key: &str, default: f64) -> Result<f64, CatalogError> {
        match self.entry.params.get(key) {
            Some(v) => self.as_num(v, key),
            None => Ok(default),
        }
    }

    fn positive(&self, key: &str) -> Result<f64, CatalogError> {
        let v = self.num(key)?;
        if !(v > 0.0) {
            return Err(self.err(format!("parameter {key:?} must be positive")));
        }
        Ok(v)
    }

    fn vec(&self, key: &str) -> Result<Vec<f64>, CatalogError> {
        match self.value(key)? {
            toml::Value::Array(items) => items.iter().map(|v| self.as_num(v, key)).collect(),
            _ => Err(self.err(format!("parameter {key:?} must be an array"))),
        }
    }

    fn mat(&self, key: &str) -> Result<Tensor<f64>, CatalogError> {
        let rows = match self.value(key)? {
            toml::Value::Array(rows) => rows,
            _ => return Err(self.err(format!("parameter {key:?} must be an array of rows"))),
        };
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| match r {
                toml::Value::Array(items) => items.iter().map(|v| self.as_num(v, key)).collect(),
                _ => Err(self.err(format!("parameter {key:?} must be an array of rows"))),
            })
            .collect::<Result<_, _>>()?;
        Tensor::from_rows(&rows).map_err(|e| self.err(e.to_string()))
    }
}

type Model = (Tensor<f64>, Tensor<f64>);

/// `M q̈ + C q̇ + K q = E u` in first-order form with `x = [q, q̇]`.
fn second_order(m: &Tensor<f64>, k: &Tensor<f64>, c: &Tensor<f64>, e: &Tensor<f64>, p: &Params) -> Result<Model, CatalogError> {
    let n = m.rows();
    let chol = linalg::cholesky(m).map_err(|_| p.err("mass matrix must be symmetric positive definite"))?;
    let shape_err = |e: crate::tensor::ShapeError| p.err(e.to_string());
    let mk = linalg::cholesky_solve(&chol, k).map_err(shape_err)?;
    let mc = linalg::cholesky_solve(&chol, c).map_err(shape_err)?;
    let me = linalg::cholesky_solve(&chol, e).map_err(shape_err)?;
    let ac = Tensor::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, true) => 0.0,
        (true, false) => f64::from(u8::from(j - n == i)),
        (false, true) => -mk.at(i - n, j),
        (false, false) => -mc.at(i - n, j - n),
    });
    let bc = Tensor::from_fn(2 * n, e.cols(), |i, j| if i < n { 0.0 } else { me.at(i - n, j) });
    Ok((ac, bc))
}

fn mass_spring_damper(p: &Params) -> Result<Model, CatalogError> {
    let (m, k, c) = (p.positive("mass")?, p.num("stiffness")?, p.num("damping")?);
    Ok((
        Tensor::from_f64_rows(&[[0.0, 1.0], [-k / m, -c / m]]).unwrap(),
        Tensor::from_f64_rows(&[[0.0], [1.0 / m]]).unwrap(),
    ))
}

/// Masses in a line. `springs[0]` ties mass 0 to the left wall, `springs[i]`
/// ties mass `i-1` to mass `i`, and an optional extra spring ties the last
/// mass to a right wall. Dampers follow the same layout. Each row of
/// `inputs` gives one actuator's force on every mass.
fn mass_chain(p: &Params) -> Result<Model, CatalogError> {
    let masses = p.vec("masses")?;
    let n = masses.len();
    let springs = p.vec("springs")?;
    let dampers = p.vec("dampers")?;
    let inputs = p.mat("inputs")?;
    if !(springs.len() == n || springs.len() == n + 1) || !(dampers.len() == n || dampers.len() == n + 1) {
        return Err(p.err("springs/dampers need one entry per mass, plus an optional right-wall element"));
    }
    if inputs.cols() != n {
        return Err(p.err("each input row needs one coefficient per mass"));
    }
    let couple = |coeffs: &[f64]| {
        let mut mat = Tensor::<f64>::zeros(&[n, n]);
        for (s, &k) in coeffs.iter().enumerate() {
            let left = s.checked_sub(1);
            let right = (s < n).then_some(s);
            for (a, b) in [(left, right), (right, left)] {
                if let Some(a) = a {
                    mat.set(a, a, mat.at(a, a) + k);
                    if let Some(b) = b {
                        mat.set(a, b, mat.at(a, b) - k);
                    }
                }
            }
        }
        mat
    };
    let k = couple(&springs);
    let c = couple(&dampers);
    let e = inputs.transpose().unwrap();
    second_order(&Tensor::diag(&masses), &k, &c, &e, p)
}

fn pendulum(p: &Params) -> Result<Model, CatalogError> {
    let (m, l, g, c) = (p.positive("mass")?, p.positive("length")?, p.num("gravity")?, p.num("damping")?);
    let inertia = m * l * l;
    Ok((
        Tensor::from_f64_rows(&[[0.0, 1.0], [-g / l, -c / inertia]]).unwrap(),
        Tensor::from_f64_rows(&[[0.0], [1.0 / inertia]]).unwrap(),
    ))
}

/// Point-mass pole on a cart, linearized upright. With `wheel_radius` the
/// input is a wheel torque instead of a cart force.
fn cart_pole(p: &Params) -> Result<Model, CatalogError> {
    let big_m = p.positive("cart_mass")?;
    let m = p.positive("pole_mass")?;
    let l = p.positive("length")?;
    let g = p.num("gravity")?;
    let b = p.num("friction")?;
    let r = p.num_or("wheel_radius", 1.0)?;
    let ac = Tensor::from_f64_rows(&[
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -b / big_m, -m * g / big_m, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, b / (big_m * l), (big_m + m) * g / (big_m * l), 0.0],
    ])
    .unwrap();
    let bc = Tensor::col_vector(vec![0.0, 1.0 / (big_m * r), 0.0, -1.0 / (big_m * l * r)]);
    Ok((ac, bc))
}

fn dc_motor(p: &Params) -> Result<Model, CatalogError> {
    let j = p.positive("inertia")?;
    let b = p.num("friction")?;
    let k = p.num("torque_constant")?;
    let r = p.num("resistance")?;
    let l = p.positive("inductance")?;
    Ok((
        Tensor::from_f64_rows(&[[0.0, 1.0, 0.0], [0.0, -b / j, k / j], [0.0, -k / l, -r / l]]).unwrap(),
        Tensor::col_vector(vec![0.0, 0.0, 1.0 / l]),
    ))
}

/// Planar serial chain of point masses at the link tips, linearized about the
/// straight configuration, in absolute link angles. Returns `(M, K, C, E)`.
fn planar_arm(masses: &[f64], lengths: &[f64], g: f64, damping: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let n = masses.len().min(lengths.len());
    let outboard = |i: usize| masses[i..n].iter().sum::<f64>();
    let m = Tensor::from_fn(n, n, |i, j| lengths[i] * lengths[j] * outboard(i.max(j)));
    let k = Tensor::from_fn(n, n, |i, j| if i == j { g * lengths[i] * outboard(i) } else { 0.0 });
    // relative joint angles ψ = D φ; joint torques act through Dᵀ
    let d = Tensor::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if j + 1 == i {
            -1.0
        } else {
            0.0
        }
    });
    let c = d.t_matmul(&d).unwrap().scale(damping);
    let e = d.transpose().unwrap();
    (m, k, c, e)
}

fn block_diag(blocks: &[&Tensor<f64>]) -> Tensor<f64> {
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Tensor::zeros(&[rows, cols]);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out.set(r0 + i, c0 + j, b.at(i, j));
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

/// Two-link arm moving in the horizontal plane plus a vertical quill.
fn scara(p: &Params) -> Result<Model, CatalogError> {
    let damping = p.num("joint_damping")?;
    let (m, k, c, e) = planar_arm(&p.vec("masses")?, &p.vec("lengths")?, 0.0, damping);
    let quill = Tensor::scalar(p.positive("quill_mass")?);
    let zero = Tensor::scalar(0.0);
    let one = Tensor::scalar(1.0);
    let cq = Tensor::scalar(damping);
    second_order(
        &block_diag(&[&m, &quill]),
        &block_diag(&[&k, &zero]),
        &block_diag(&[&c, &cq]),
        &block_diag(&[&e, &one]),
        p,
    )
}

/// Two identical hanging two-link arms; a spring between the tips models the
/// shared object.
fn dual_arm(p: &Params) -> Result<Model, CatalogError> {
    let lengths = p.vec("lengths")?;
    let (m, k, c, e) = planar_arm(&p.vec("masses")?, &lengths, p.num("gravity")?, p.num("joint_damping")?);
    let kc = p.num("coupling_stiffness")?;
    let mut k2 = block_diag(&[&k, &k]);
    let n = lengths.len();
    // horizontal tip offset is Σ lᵢ φᵢ for each arm
    let g: Vec<f64> = lengths.iter().copied().chain(lengths.iter().map(|l| -l)).collect();
    for i in 0..2 * n {
        for j in 0..2 * n {
            k2.set(i, j, k2.at(i, j) + kc * g[i] * g[j]);
        }
    }
    second_order(&block_diag(&[&m, &m]), &k2, &block_diag(&[&c, &c]), &block_diag(&[&e, &e]), p)
}

fn diff_drive(p: &Params) -> Result<Model, CatalogError> {
    let m = p.positive("mass")?;
    let inertia = p.positive("inertia")?;
    let r = p.positive("wheel_radius")?;
    let half = p.positive("half_track")?;
    let v0 = p.num("speed")?;
    let drag = p.num("drag")?;
    let ac = Tensor::from_f64_rows(&[
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, v0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, -drag / m, 0.0],
        [0.0, 0.0, 0.0, 0.0, -drag / inertia],
    ])
    .unwrap();
    let bc = Tensor::from_f64_rows(&[
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [1.0 / (m * r), 1.0 / (m * r)],
        [half / (inertia * r), -half / (inertia * r)],
    ])
    .unwrap();
    Ok((ac, bc))
}

/// Three omni wheels at 120° spacing, each pushing tangentially.
fn omni_robot(p: &Params) -> Result<Model, CatalogError> {
    let m = p.positive("mass")?;
    let inertia = p.positive("inertia")?;
    let radius = p.positive("radius")?;
    let drag = p.num("drag")?;
    let mut ac = Tensor::zeros(&[6, 6]);
    for i in 0..3 {
        ac.set(i, i + 3, 1.0);
    }
    ac.set(3, 3, -drag / m);
    ac.set(4, 4, -drag / m);
    ac.set(5, 5, -drag / inertia);
    let mut bc = Tensor::zeros(&[6, 3]);
    for k in 0..3 {
        let alpha = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
        bc.set(3, k, -alpha.sin() / m);
        bc.set(4, k, alpha.cos() / m);
        bc.set(5, k, radius / inertia);
    }
    Ok((ac, bc))
}

/// Point mass held by four cables from the corners of a square; inputs are
/// tension increments. Pretension adds geometric stiffness `T/ℓ (I − ĉĉᵀ)`.
fn cable_robot(p: &Params) -> Result<Model, CatalogError> {
    let m = p.positive("mass")?;
    let w = p.positive("half_width")?;
    let t0 = p.num("pretension")?;
    let c = p.num("damping")?;
    let anchors = [(w, w), (-w, w), (-w, -w), (w, -w)];
    let mut k = Tensor::zeros(&[2, 2]);
    let mut e = Tensor::zeros(&[2, 4]);
    for (idx, &(ax, ay)) in anchors.iter().enumerate() {
        let len = (ax * ax + ay * ay).sqrt();
        let u = [ax / len, ay / len];
        for i in 0..2 {
            for j in 0..2 {
                let proj = f64::from(u8::from(i == j)) - u[i] * u[j];
                k.set(i, j, k.at(i, j) + t0 / len * proj);
            }
            e.set(i, idx, u[i]);
        }
    }
    second_order(&Tensor::diag(&[m, m]), &k, &Tensor::diag(&[c, c]), &e, p)
}

fn flexible_joint(p: &Params) -> Result<Model, CatalogError> {
    let jl = p.positive("link_inertia")?;
    let jm = p.positive("motor_inertia")?;
    let ks = p.num("joint_stiffness")?;
    let bl = p.num("link_damping")?;
    let bm = p.num("motor_damping")?;
    let kg = p.num("gravity_stiffness")?;
    second_order(
        &Tensor::diag(&[jl, jm]),
        &Tensor::from_f64_rows(&[[ks + kg, -ks], [-ks, ks]]).unwrap(),
        &Tensor::diag(&[bl, bm]),
        &Tensor::col_vector(vec![0.0, 1.0]),
        p,
    )
}

/// ẋ = αx − βxy + u, ẏ = δxy − γy, linearized at (γ/δ, α/β).
fn lotka_volterra(p: &Params) -> Result<Model, CatalogError> {
    let alpha = p.num("alpha")?;
    let beta = p.positive("beta")?;
    let gamma = p.num("gamma")?;
    let delta = p.positive("delta")?;
    let prey = gamma / delta;
    let predator = alpha / beta;
    Ok((
        Tensor::from_f64_rows(&[[alpha - beta * predator, -beta * prey], [delta * predator, delta * prey - gamma]]).unwrap(),
        Tensor::col_vector(vec![1.0, 0.0]),
    ))
}

fn em_actuator(p: &Params) -> Result<Model, CatalogError> {
    let jm = p.positive("motor_inertia")?;
    let jl = p.positive("load_inertia")?;
    let k = p.num("shaft_stiffness")?;
    let c = p.num("shaft_damping")?;
    let kt = p.num("torque_constant")?;
    let r = p.num("resistance")?;
    let l = p.positive("inductance")?;
    let ac = Tensor::from_f64_rows(&[
        [0.0, 1.0, 0.0, 0.0, 0.0],
        [-k / jm, -c / jm, k / jm, c / jm, kt / jm],
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [k / jl, c / jl, -k / jl, -c / jl, 0.0],
        [0.0, -kt / l, 0.0, 0.0, -r / l],
    ])
    .unwrap();
    Ok((ac, Tensor::col_vector(vec![0.0, 0.0, 0.0, 0.0, 1.0 / l])))
}

/// Lumped thermal nodes in a line: `Cᵢ Ṫᵢ = −lossᵢ Tᵢ − Σ g (Tᵢ − Tⱼ) + heat`.
fn thermal_rc(p: &Params) -> Result<Model, CatalogError> {
    let caps = p.vec("capacitances")?;
    let couplings = p.vec("couplings")?;
    let losses = p.vec("losses")?;
    let heaters = p.vec("heaters")?;
    let n = caps.len();
    if couplings.len() + 1 != n || losses.len() != n {
        return Err(p.err("need n capacitances, n-1 couplings and n losses"));
    }
    let mut ac = Tensor::zeros(&[n, n]);
    for i in 0..n {
        ac.set(i, i, -losses[i] / caps[i]);
    }
    for (s, &g) in couplings.iter().enumerate() {
        let (i, j) = (s, s + 1);
        ac.set(i, i, ac.at(i, i) - g / caps[i]);
        ac.set(j, j, ac.at(j, j) - g / caps[j]);
        ac.set(i, j, ac.at(i, j) + g / caps[i]);
        ac.set(j, i, ac.at(j, i) + g / caps[j]);
    }
    let mut bc = Tensor::zeros(&[n, heaters.len()]);
    for (col, &h) in heaters.iter().enumerate() {
        let node = h as usize;
        if node >= n || h.fract() != 0.0 {
            return Err(p.err(format!("heater node {h} out of range")));
        }
        bc.set(node, col, 1.0 / caps[node]);
    }
    Ok((ac, bc))
}

fn coupled_tanks(p: &Params) -> Result<Model, CatalogError> {
    let areas = p.vec("areas")?;
    if areas.len() != 2 || areas.iter().any(|&a| a <= 0.0) {
        return Err(p.err("areas must hold two positive values"));
    }
    let valve = p.num("valve")?;
    let out = p.num("outflow")?;
    Ok((
        Tensor::from_f64_rows(&[[-valve / areas[0], valve / areas[0]], [valve / areas[1], -(valve + out) / areas[1]]]).unwrap(),
        Tensor::col_vector(vec![1.0 / areas[0], 0.0]),
    ))
}

fn modal(p: &Params) -> Result<Model, CatalogError> {
    let freqs = p.vec("frequencies")?;
    let zetas = p.vec("damping_ratios")?;
    let gains = p.mat("input_gains")?;
    let n = freqs.len();
    if zetas.len() != n || gains.rows() != n {
        return Err(p.err("one damping ratio and one gain row per mode"));
    }
    let k = Tensor::diag(&freqs.iter().map(|w| w * w).collect::<Vec<_>>());
    let c = Tensor::diag(&freqs.iter().zip(&zetas).map(|(w, z)| 2.0 * z * w).collect::<Vec<_>>());
    second_order(&Tensor::identity(n), &k, &c, &gains, p)
}

fn motor_generator(p: &Params) -> Result<Model, CatalogError> {
    let j = p.positive("inertia")?;
    let b = p.num("friction")?;
    let km = p.num("motor_constant")?;
    let kg = p.num("generator_constant")?;
    let rm = p.num("motor_resistance")?;
    let lm = p.positive("motor_inductance")?;
    let rg = p.num("generator_resistance")?;
    let lg = p.positive("generator_inductance")?;
    let rl = p.num("load_resistance")?;
    Ok((
        Tensor::from_f64_rows(&[[-b / j, km / j, -kg / j], [-km / lm, -rm / lm, 0.0], [kg / lg, 0.0, -(rg + rl) / lg]]).unwrap(),
        Tensor::col_vector(vec![0.0, 1.0 / lm, 0.0]),
    ))
}
