//! Transformer policy `S_t ↦ ū_t`.
//!
//! All `L` blocks read the same embedded sequence `H` by default; the last row
//! of every block output is concatenated and mapped to `n_u_max` controls by
//! one linear readout. With `sequential = true` blocks are stacked instead.
//!
//! The differentiable path ([`forward_tape`]) processes a batch of stacked
//! windows and, for parallel blocks, carries only the last query row through
//! attention output, layer norms and feed-forward layers, since no other row
//! reaches the readout. [`reference_forward`] evaluates every row with plain
//! tensor ops and serves as the oracle for that shortcut.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineConfig;
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn default_rho() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    pub window: usize,
    pub d_in: usize,
    pub n_u_max: usize,
    /// Layer-norm epsilon.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Stack blocks (`Y_ℓ = Block_ℓ(Y_{ℓ−1})`) instead of running them in parallel on `H`.
    #[serde(default)]
    pub sequential: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_pipeline(&PipelineConfig::default(), 64, 16, 4, 256)
    }
}

impl ModelConfig {
    pub fn for_pipeline(p: &PipelineConfig, d_model: usize, heads: usize, blocks: usize, d_ff: usize) -> Self {
        Self {
            d_model,
            heads,
            blocks,
            d_ff,
            window: p.window,
            d_in: p.d_in(),
            n_u_max: p.n_u_max,
            rho: default_rho(),
            sequential: false,
        }
    }

    pub fn d_h(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.window + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [self.d_model, self.heads, self.blocks, self.d_ff, self.window, self.d_in, self.n_u_max];
        if sizes.contains(&0) {
            return Err(ModelError::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!("{} heads do not divide d_model = {}", self.heads, self.d_model)));
        }
        if self.d_model < 2 {
            return Err(ModelError::Config("layer norm needs d_model ≥ 2".into()));
        }
        if !(self.rho > 0.0) {
            return Err(ModelError::Config("rho must be positive".into()));
        }
        Ok(())
    }

    /// Whether samples cut with `p` fit this model.
    pub fn matches_pipeline(&self, p: &PipelineConfig) -> bool {
        self.window == p.window && self.d_in == p.d_in() && self.n_u_max == p.n_u_max
    }

    pub fn param_count(&self) -> usize {
        layout(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±√(6/(fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    /// Uniform in `±0.02`.
    Positional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

const PER_BLOCK_TAIL: usize = 9;

/// Named parameter layout, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (dm, dh, dff) = (cfg.d_model, cfg.d_h(), cfg.d_ff);
    let spec = |name: String, shape: Vec<usize>, init| ParamSpec { name, shape, init };
    let xavier = |fan_in, fan_out| Init::Xavier { fan_in, fan_out };
    let mut out = vec![
        spec("embed.w_in".into(), vec![dm, cfg.d_in], xavier(cfg.d_in, dm)),
        spec("embed.b_in".into(), vec![dm], Init::Zeros),
        spec("embed.pos".into(), vec![cfg.seq_len(), dm], Init::Positional),
    ];
    for l in 0..cfg.blocks {
        for i in 0..cfg.heads {
            for m in ["w_q", "w_k", "w_v"] {
                out.push(spec(format!("block{l}.head{i}.{m}"), vec![dm, dh], xavier(dm, dh)));
            }
        }
        out.extend([
            spec(format!("block{l}.w_o"), vec![dm, dm], xavier(dm, dm)),
            spec(format!("block{l}.ln1.gamma"), vec![dm], Init::Ones),
            spec(format!("block{l}.ln1.beta"), vec![dm], Init::Zeros),
            spec(format!("block{l}.ffn.w_1"), vec![dm, dff], xavier(dm, dff)),
            spec(format!("block{l}.ffn.b_1"), vec![dff], Init::Zeros),
            spec(format!("block{l}.ffn.w_2"), vec![dff, dm], xavier(dff, dm)),
            spec(format!("block{l}.ffn.b_2"), vec![dm], Init::Zeros),
            spec(format!("block{l}.ln2.gamma"), vec![dm], Init::Ones),
            spec(format!("block{l}.ln2.beta"), vec![dm], Init::Zeros),
        ]);
    }
    out.push(spec("readout.w_out".into(), vec![cfg.n_u_max, cfg.blocks * dm], xavier(cfg.blocks * dm, cfg.n_u_max)));
    out.push(spec("readout.b_out".into(), vec![cfg.n_u_max], Init::Zeros));
    out
}

/// Storage indices of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockIndex {
    base: usize,
    heads: usize,
}

impl BlockIndex {
    pub fn w_q(&self, head: usize) -> usize {
        self.base + 3 * head
    }
    pub fn w_k(&self, head: usize) -> usize {
        self.base + 3 * head + 1
    }
    pub fn w_v(&self, head: usize) -> usize {
        self.base + 3 * head + 2
    }
    fn tail(&self, k: usize) -> usize {
        self.base + 3 * self.heads + k
    }
    pub fn w_o(&self) -> usize {
        self.tail(0)
    }
    pub fn ln1(&self) -> (usize, usize) {
        (self.tail(1), self.tail(2))
    }
    pub fn w_1(&self) -> usize {
        self.tail(3)
    }
    pub fn b_1(&self) -> usize {
        self.tail(4)
    }
    pub fn w_2(&self) -> usize {
        self.tail(5)
    }
    pub fn b_2(&self) -> usize {
        self.tail(6)
    }
    pub fn ln2(&self) -> (usize, usize) {
        (self.tail(7), self.tail(8))
    }
}

pub const W_IN: usize = 0;
pub const B_IN: usize = 1;
pub const POS: usize = 2;

impl ModelConfig {
    pub fn block_index(&self, l: usize) -> BlockIndex {
        BlockIndex {
            base: 3 + l * (3 * self.heads + PER_BLOCK_TAIL),
            heads: self.heads,
        }
    }

    pub fn w_out(&self) -> usize {
        3 + self.blocks * (3 * self.heads + PER_BLOCK_TAIL)
    }

    pub fn b_out(&self) -> usize {
        self.w_out() + 1
    }
}

/// Every trainable tensor of the policy, in [`layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> TransformerParams<T> {
    /// Checks the tensor list against the config's layout.
    pub fn new(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != tensors.len() {
            return Err(ModelError::Config(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(ModelError::ParamShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        layout(&self.config).iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Deterministic initialization from the `init` substream of `seed`.
/// Values are drawn in `f32`, so they survive an `f32` checkpoint exactly.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<TransformerParams<T>, ModelError> {
    config.validate()?;
    let mut stream = rng::substream(seed, rng::INIT, 0);
    let tensors = layout(config)
        .into_iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let mut draw = |bound: f64| -> Vec<T> {
                let b = bound as f32;
                (0..n).map(|_| T::lit(f64::from(stream.gen_range(-b..=b)))).collect()
            };
            let data = match s.init {
                Init::Xavier { fan_in, fan_out } => draw((6.0 / (fan_in + fan_out) as f64).sqrt()),
                Init::Positional => draw(0.02),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            Tensor::new(s.shape, data).expect("layout shapes are consistent")
        })
        .collect();
    TransformerParams::new(*config, tensors)
}

/// Registers every parameter on `tape`. With `trainable = false` they enter
/// as constants and no gradient bookkeeping is done.
pub fn bind<'a, T: Scalar>(tape: &mut Tape<'a, T>, params: &'a TransformerParams<T>, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| if trainable { tape.param(ParamId(i), t) } else { tape.constant_ref(t) })
        .collect()
}

/// `Z = S W_inᵀ + 1 b_inᵀ`, `H = Z + P`, for `batch` stacked windows.
fn embed_tape<T: Scalar>(tape: &mut Tape<'_, T>, v: &[Var], s: Var) -> Result<Var, ShapeError> {
    let z = tape.matmul_t(s, v[W_IN])?;
    let z = tape.add_row_bias(z, v[B_IN])?;
    tape.add_tiled(z, v[POS])
}

/// One block on stacked sequences `h` (`B·n` rows). With `last_only` the
/// output holds just the last row of every sequence (`B` rows).
fn block_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    v: &[Var],
    l: usize,
    h: Var,
    h_last: Option<Var>,
) -> Result<Var, ShapeError> {
    let ix = cfg.block_index(l);
    let n = cfg.seq_len();
    let scale = T::one() / T::lit(cfg.d_h() as f64).sqrt();
    let (queries, q_per) = match h_last {
        Some(last) => (last, 1),
        None => (h, n),
    };
    let mut ctx = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let q = tape.matmul(queries, v[ix.w_q(i)])?;
        let k = tape.matmul(h, v[ix.w_k(i)])?;
        let val = tape.matmul(h, v[ix.w_v(i)])?;
        ctx.push(tape.grouped_attention(q, k, val, n, q_per, scale)?);
    }
    let cat = tape.concat_cols(&ctx)?;
    let a = tape.matmul(cat, v[ix.w_o()])?;
    let res = tape.add(queries, a)?;
    let (g1, b1) = ix.ln1();
    let c = tape.layer_norm(res, v[g1], v[b1], T::lit(cfg.rho))?;
    let f = tape.matmul(c, v[ix.w_1()])?;
    let f = tape.add_row_bias(f, v[ix.b_1()])?;
    let f = tape.gelu(f);
    let g = tape.matmul(f, v[ix.w_2()])?;
    let g = tape.add_row_bias(g, v[ix.b_2()])?;
    let y = tape.add(c, g)?;
    let (g2, b2) = ix.ln2();
    tape.layer_norm(y, v[g2], v[b2], T::lit(cfg.rho))
}

/// Batched forward pass. `s` stacks `B` windows (`B·(w+1) × d_in`); the
/// result is `B × n_u_max`.
pub fn forward_tape<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, v: &[Var], s: Var) -> Result<Var, ShapeError> {
    let n = cfg.seq_len();
    let h = embed_tape(tape, v, s)?;
    let mut rows = Vec::with_capacity(cfg.blocks);
    if cfg.sequential {
        let mut cur = h;
        for l in 0..cfg.blocks {
            if l + 1 == cfg.blocks {
                let last = tape.strided_rows(cur, n, n - 1)?;
                rows.push(block_tape(tape, cfg, v, l, cur, Some(last))?);
            } else {
                cur = block_tape(tape, cfg, v, l, cur, None)?;
                rows.push(tape.strided_rows(cur, n, n - 1)?);
            }
        }
    } else {
        let last = tape.strided_rows(h, n, n - 1)?;
        for l in 0..cfg.blocks {
            rows.push(block_tape(tape, cfg, v, l, h, Some(last))?);
        }
    }
    let r = tape.concat_cols(&rows)?;
    let out = tape.matmul_t(r, v[cfg.w_out()])?;
    tape.add_row_bias(out, v[cfg.b_out()])
}

/// Predictions for `B` stacked windows, `B × n_u_max`.
pub fn predict_batch<T: Scalar>(params: &TransformerParams<T>, s: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let cfg = &params.config;
    if s.rank() != 2 || s.cols() != cfg.d_in || s.rows() % cfg.seq_len() != 0 || s.rows() == 0 {
        return Err(ModelError::Shape(ShapeError::Invalid {
            op: "predict_batch",
            detail: format!("expected a multiple of {} rows of width {}, got {:?}", cfg.seq_len(), cfg.d_in, s.shape()),
        }));
    }
    let mut tape = Tape::new();
    let v = bind(&mut tape, params, false);
    let sv = tape.constant_ref(s);
    let out = forward_tape(&mut tape, cfg, &v, sv)?;
    Ok(tape.value(out).clone())
}

/// `ū = π(S)` for a single `(w+1) × d_in` window.
pub fn forward<T: Scalar>(s: &Tensor<T>, params: &TransformerParams<T>) -> Result<Vec<T>, ModelError> {
    let cfg = &params.config;
    if s.shape() != [cfg.seq_len(), cfg.d_in] {
        return Err(ModelError::Shape(ShapeError::Invalid {
            op: "forward",
            detail: format!("expected {}×{}, got {:?}", cfg.seq_len(), cfg.d_in, s.shape()),
        }));
    }
    Ok(predict_batch(params, s)?.into_data())
}

/// `H = S W_inᵀ + 1 b_inᵀ + P`.
pub fn embed<T: Scalar>(s: &Tensor<T>, params: &TransformerParams<T>) -> Result<Tensor<T>, ModelError> {
    let h = s.matmul_t(params.get(W_IN))?.add_row_bias(params.get(B_IN))?.add(params.get(POS))?;
    Ok(h)
}

/// Full block `Y = Block_ℓ(H)` on one sequence, every row evaluated.
pub fn attention_block<T: Scalar>(h: &Tensor<T>, params: &TransformerParams<T>, l: usize) -> Result<Tensor<T>, ModelError> {
    let cfg = &params.config;
    let ix = cfg.block_index(l);
    let p = |i: usize| params.get(i);
    let scale = T::one() / T::lit(cfg.d_h() as f64).sqrt();
    let heads = (0..cfg.heads)
        .map(|i| {
            let q = h.matmul(p(ix.w_q(i)))?;
            let k = h.matmul(p(ix.w_k(i)))?;
            let v = h.matmul(p(ix.w_v(i)))?;
            q.matmul_t(&k)?.scale(scale).softmax_rows()?.matmul(&v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cat = Tensor::concat_cols(&heads.iter().collect::<Vec<_>>())?;
    let a = cat.matmul(p(ix.w_o()))?;
    let (g1, b1) = ix.ln1();
    let c = h.add(&a)?.layer_norm(p(g1), p(b1), T::lit(cfg.rho))?;
    let g = c.matmul(p(ix.w_1()))?.add_row_bias(p(ix.b_1()))?.gelu().matmul(p(ix.w_2()))?.add_row_bias(p(ix.b_2()))?;
    let (g2, b2) = ix.ln2();
    Ok(c.add(&g)?.layer_norm(p(g2), p(b2), T::lit(cfg.rho))?)
}

/// Unoptimized forward pass over full sequences.
pub fn reference_forward<T: Scalar>(s: &Tensor<T>, params: &TransformerParams<T>) -> Result<Vec<T>, ModelError> {
    let cfg = &params.config;
    let h = embed(s, params)?;
    let last = cfg.seq_len() - 1;
    let mut r = Vec::with_capacity(cfg.blocks * cfg.d_model);
    let mut cur = h.clone();
    for l in 0..cfg.blocks {
        let y = attention_block(if cfg.sequential { &cur } else { &h }, params, l)?;
        r.extend_from_slice(y.row(last));
        cur = y;
    }
    let out = params.get(cfg.w_out()).mul_vec(&r)?;
    Ok(out.iter().zip(params.get(cfg.b_out()).data()).map(|(&a, &b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 2,
            d_ff: 16,
            window: 3,
            d_in: 5,
            n_u_max: 3,
            rho: 1e-5,
            sequential: false,
        }
    }

    fn random_input(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut r = rng::substream(seed, "test-input", 0);
        Tensor::from_fn(cfg.seq_len(), cfg.d_in, |_, _| r.gen_range(-1.0..1.0))
    }

    /// Non-trivial values for every parameter, including biases and norms.
    fn randomized(cfg: &ModelConfig, seed: u64) -> TransformerParams<f64> {
        let mut p = init_params::<f64>(cfg, seed).unwrap();
        let mut r = rng::substream(seed, "test-params", 0);
        for t in &mut p.tensors {
            for v in t.data_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
        p
    }

    #[test]
    fn full_scale_parameter_count() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.d_h(), 4);
        assert_eq!(cfg.d_in, 19);
        let (dm, din, n, dff, l, nu) = (64, 19, 13, 256, 4, 6);
        let per_block = 3 * dm * dm + dm * dm + 2 * dm + dm * dff + dff + dff * dm + dm + 2 * dm;
        let expected = dm * din + dm + n * dm + l * per_block + nu * l * dm + nu;
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(expected, 202_566);
    }

    #[test]
    fn init_is_deterministic_and_follows_rules() {
        let cfg = small();
        let a = init_params::<f64>(&cfg, 3).unwrap();
        assert_eq!(a, init_params::<f64>(&cfg, 3).unwrap());
        assert_ne!(a, init_params::<f64>(&cfg, 4).unwrap());
        let ix = cfg.block_index(1);
        assert!(a.get(ix.ln1().0).data().iter().all(|&v| v == 1.0));
        assert!(a.get(ix.b_1()).data().iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / (8 + 4) as f64).sqrt();
        assert!(a.get(ix.w_q(0)).data().iter().all(|v| v.abs() <= bound));
        assert!(a.get(POS).data().iter().all(|v| v.abs() <= 0.02 + 1e-9));
        assert!(a.tensors.iter().flat_map(|t| t.data()).all(|&v| f64::from(v as f32) == v));
    }

    #[test]
    fn embed_examples() {
        let cfg = small();
        let mut p = randomized(&cfg, 1);
        let s = random_input(&cfg, 2);
        // naive loop oracle
        let h = embed(&s, &p).unwrap();
        for t in 0..cfg.seq_len() {
            for k in 0..cfg.d_model {
                let mut acc = p.get(B_IN).data()[k] + p.get(POS).at(t, k);
                for j in 0..cfg.d_in {
                    acc += s.at(t, j) * p.get(W_IN).at(k, j);
                }
                assert!((h.at(t, k) - acc).abs() < 1e-12);
            }
        }
        p.tensors[W_IN] = Tensor::zeros(&[8, 5]);
        p.tensors[B_IN] = Tensor::zeros(&[8]);
        assert_eq!(embed(&s, &p).unwrap(), p.get(POS).clone());
    }

    /// Independent single-sequence implementation used as the block oracle.
    fn oracle_block(h: &[Vec<f64>], p: &TransformerParams<f64>, l: usize) -> Vec<Vec<f64>> {
        let cfg = &p.config;
        let ix = cfg.block_index(l);
        let n = h.len();
        let dm = cfg.d_model;
        let proj = |x: &[Vec<f64>], w: &Tensor<f64>| -> Vec<Vec<f64>> {
            x.iter().map(|r| (0..w.cols()).map(|c| (0..w.rows()).map(|k| r[k] * w.at(k, c)).sum()).collect()).collect()
        };
        let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().enumerate().map(|(k, v)| g.data()[k] * (v - m) / (var + cfg.rho).sqrt() + b.data()[k]).collect()
        };
        let mut cat = vec![Vec::new(); n];
        for i in 0..cfg.heads {
            let q = proj(h, p.get(ix.w_q(i)));
            let k = proj(h, p.get(ix.w_k(i)));
            let v = proj(h, p.get(ix.w_v(i)));
            for t in 0..n {
                let logits: Vec<f64> = (0..n).map(|s| q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() / (cfg.d_h() as f64).sqrt()).collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                for c in 0..cfg.d_h() {
                    cat[t].push((0..n).map(|s| logits[s].exp() / z * v[s][c]).sum());
                }
            }
        }
        let a = proj(&cat, p.get(ix.w_o()));
        let (g1, b1) = ix.ln1();
        let c: Vec<Vec<f64>> = (0..n).map(|t| ln(&(0..dm).map(|k| h[t][k] + a[t][k]).collect::<Vec<_>>(), p.get(g1), p.get(b1))).collect();
        let f: Vec<Vec<f64>> = proj(&c, p.get(ix.w_1()))
            .into_iter()
            .map(|r| r.iter().zip(p.get(ix.b_1()).data()).map(|(x, b)| {
                let z = x + b;
                0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt()))
            }).collect())
            .collect();
        let g = proj(&f, p.get(ix.w_2()));
        let (g2, b2) = ix.ln2();
        (0..n).map(|t| ln(&(0..dm).map(|k| c[t][k] + g[t][k] + p.get(ix.b_2()).data()[k]).collect::<Vec<_>>(), p.get(g2), p.get(b2))).collect()
    }

    #[test]
    fn block_matches_independent_oracle() {
        let cfg = small();
        let p = randomized(&cfg, 5);
        let h = embed(&random_input(&cfg, 6), &p).unwrap();
        let rows: Vec<Vec<f64>> = (0..h.rows()).map(|r| h.row(r).to_vec()).collect();
        for l in 0..cfg.blocks {
            let y = attention_block(&h, &p, l).unwrap();
            let want = oracle_block(&rows, &p, l);
            for t in 0..h.rows() {
                for k in 0..cfg.d_model {
                    assert!((y.at(t, k) - want[t][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_projections_reduce_to_norms_and_bias_ffn() {
        let cfg = small();
        let mut p = randomized(&cfg, 7);
        let ix = cfg.block_index(0);
        for i in [ix.w_q(0), ix.w_k(0), ix.w_v(0), ix.w_q(1), ix.w_k(1), ix.w_v(1), ix.w_o(), ix.w_1(), ix.w_2()] {
            p.tensors[i] = Tensor::zeros(p.get(i).shape());
        }
        for (g, b) in [ix.ln1(), ix.ln2()] {
            p.tensors[g] = Tensor::ones(&[8]);
            p.tensors[b] = Tensor::zeros(&[8]);
        }
        let h = embed(&random_input(&cfg, 8), &p).unwrap();
        let ones = Tensor::ones(&[8]);
        let zeros = Tensor::zeros(&[8]);
        let c = h.layer_norm(&ones, &zeros, 1e-5).unwrap();
        // F = GELU(b_1) on every row, G₀ = F W_2 + b_2 = b_2 since W_2 = 0
        let want = c.add_row_bias(p.get(ix.b_2())).unwrap().layer_norm(&ones, &zeros, 1e-5).unwrap();
        let got = attention_block(&h, &p, 0).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn attention_plus_ffn_is_row_permutation_equivariant() {
        let cfg = small();
        let p = randomized(&cfg, 9);
        let h = embed(&random_input(&cfg, 10), &p).unwrap();
        let perm = [2usize, 0, 3, 1];
        let hp = Tensor::from_fn(4, 8, |r, c| h.at(perm[r], c));
        let y = attention_block(&h, &p, 1).unwrap();
        let yp = attention_block(&hp, &p, 1).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((yp.at(r, c) - y.at(perm[r], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_path_matches_reference_for_both_block_modes() {
        for sequential in [false, true] {
            let cfg = ModelConfig { sequential, ..small() };
            let p = randomized(&cfg, 11);
            let s = random_input(&cfg, 12);
            let fast = forward(&s, &p).unwrap();
            let slow = reference_forward(&s, &p).unwrap();
            assert_eq!(fast.len(), 3);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "sequential = {sequential}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = small();
        let p = randomized(&cfg, 13);
        let (a, b) = (random_input(&cfg, 14), random_input(&cfg, 15));
        let stacked = Tensor::new(vec![8, 5], a.data().iter().chain(b.data()).copied().collect()).unwrap();
        let out = predict_batch(&p, &stacked).unwrap();
        assert_eq!(out.row(0), forward(&a, &p).unwrap().as_slice());
        assert_eq!(out.row(1), forward(&b, &p).unwrap().as_slice());
    }

    #[test]
    fn readout_and_block_independence() {
        let cfg = small();
        let mut p = randomized(&cfg, 16);
        let s = random_input(&cfg, 17);
        p.tensors[cfg.w_out()] = Tensor::zeros(&[3, 16]);
        assert_eq!(forward(&s, &p).unwrap(), p.get(cfg.b_out()).data().to_vec());

        // zeroing block 1's readout columns hides block 1's parameters
        let mut p = randomized(&cfg, 16);
        for r in 0..3 {
            p.tensors[cfg.w_out()].row_mut(r)[8..].fill(0.0);
        }
        let before = forward(&s, &p).unwrap();
        let w1 = cfg.block_index(1).w_1();
        p.tensors[w1] = p.get(w1).scale(-3.0);
        assert_eq!(forward(&s, &p).unwrap(), before);
    }

    #[test]
    fn single_block_reads_last_row() {
        let cfg = ModelConfig { blocks: 1, ..small() };
        let p = randomized(&cfg, 18);
        let s = random_input(&cfg, 19);
        let y = attention_block(&embed(&s, &p).unwrap(), &p, 0).unwrap();
        let want: Vec<f64> = p.get(cfg.w_out()).mul_vec(y.row(3)).unwrap().iter().zip(p.get(cfg.b_out()).data()).map(|(a, b)| a + b).collect();
        let got = forward(&s, &p).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_contract() {
        let cfg = small();
        let p = randomized(&cfg, 20);
        assert!(forward(&Tensor::zeros(&[3, 5]), &p).is_err());
        assert!(ModelConfig { heads: 3, ..cfg }.validate().is_err());
        let mut bad = p.tensors.clone();
        bad[0] = Tensor::zeros(&[2, 2]);
        assert!(matches!(TransformerParams::new(cfg, bad), Err(ModelError::ParamShape { .. })));
    }
}
