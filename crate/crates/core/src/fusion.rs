//! Cross-attention adapter that fuses a query vector with a context of
//! vectors from the other modality.
//!
//! Block: `z = LN1(MHA(q, K, V) + q)`, `y = LN2(FF(z) + z)`, `g = P_task(y)`,
//! with `K = V = ctx` and `FF = Linear(d, 4d) -> GELU -> Linear(4d, d)`.
//! Everything except the four task projections is shared across tasks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    add_into, dot, gelu, gelu_grad, join, softmax, softmax_backward, LayerNorm, LayerNormCache, Linear, Matrix, Params,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "text-mention")]
    TextMention,
    #[serde(rename = "text-argument")]
    TextArgument,
    #[serde(rename = "visual-mention")]
    VisualMention,
    #[serde(rename = "visual-argument")]
    VisualArgument,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::TextMention,
        Task::TextArgument,
        Task::VisualMention,
        Task::VisualArgument,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::TextMention => "text-mention",
            Task::TextArgument => "text-argument",
            Task::VisualMention => "visual-mention",
            Task::VisualArgument => "visual-argument",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_textual(self) -> bool {
        matches!(self, Task::TextMention | Task::TextArgument)
    }

    pub fn is_argument(self) -> bool {
        matches!(self, Task::TextArgument | Task::VisualArgument)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Adapter,
    /// Softmax over cosine similarities, then a convex combination of the
    /// context rows. Parameter-free.
    Cosine,
}

/// Key/value vectors of the other modality plus where each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionContext {
    pub keys_values: Matrix,
    pub source_ids: Vec<String>,
}

impl FusionContext {
    pub fn new(keys_values: Matrix, source_ids: Vec<String>) -> Result<Self> {
        if keys_values.rows() == 0 {
            return Err(Error::Contract("fusion context must have at least one row".into()));
        }
        if source_ids.len() != keys_values.rows() {
            return Err(Error::Contract("source_ids length must match context rows".into()));
        }
        Ok(Self {
            keys_values,
            source_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.keys_values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    /// Indexed by `Task::index`.
    pub task: Vec<Linear>,
}

impl AdapterParams {
    pub fn new<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d={d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            wq: Linear::scaled(d, d, rng),
            wk: Linear::scaled(d, d, rng),
            wv: Linear::scaled(d, d, rng),
            wo: Linear::scaled(d, d, rng),
            ln1: LayerNorm::new(d),
            ff1: Linear::scaled(d, 4 * d, rng),
            ff2: Linear::scaled(4 * d, d, rng),
            ln2: LayerNorm::new(d),
            task: (0..4).map(|_| Linear::near_identity(d, 0.02, rng)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        Self {
            heads: self.heads,
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln1: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, 4 * d),
            ff2: Linear::zeros(4 * d, d),
            ln2: LayerNorm::zeros(d),
            task: (0..4).map(|_| Linear::zeros(d, d)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.input_dim()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Shared parameters only (everything except the task projections).
    pub fn visit_shared(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
    }

    pub fn visit_shared_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }

    pub fn task_prefix(prefix: &str, task: Task) -> String {
        join(&join(prefix, "task"), task.name())
    }
}

impl Params for AdapterParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.visit_shared(prefix, f);
        for t in Task::ALL {
            self.task[t.index()].visit(&Self::task_prefix(prefix, t), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_shared_mut(prefix, f);
        for t in Task::ALL {
            self.task[t.index()].visit_mut(&Self::task_prefix(prefix, t), f);
        }
    }
}

/// Context rows after the key and value projections; shared by every query
/// attending to the same context.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedContext {
    pub kp: Matrix,
    pub vp: Matrix,
}

impl ProjectedContext {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            kp: Matrix::zeros(n, d),
            vp: Matrix::zeros(n, d),
        }
    }
}

pub fn project_context(params: &AdapterParams, ctx: &FusionContext) -> Result<ProjectedContext> {
    check_dim(params.dim(), ctx.keys_values.cols(), "context")?;
    let proj = |l: &Linear| {
        let rows: Vec<Vec<f64>> = ctx.keys_values.iter_rows().map(|r| l.forward(r)).collect();
        Matrix::from_rows(&rows)
    };
    Ok(ProjectedContext {
        kp: proj(&params.wk),
        vp: proj(&params.wv),
    })
}

fn check_dim(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Contract(format!(
            "{what} has width {got}, adapter expects {expected}"
        )));
    }
    Ok(())
}

/// Intermediate values of one adapter call, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    task: Task,
    q: Vec<f64>,
    qp: Vec<f64>,
    attn: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln1: LayerNormCache,
    z: Vec<f64>,
    f1: Vec<f64>,
    act: Vec<f64>,
    ln2: LayerNormCache,
    y: Vec<f64>,
}

impl AdapterCache {
    pub fn attention(&self) -> &[Vec<f64>] {
        &self.attn
    }
}

fn head_attention(params: &AdapterParams, qp: &[f64], pc: &ProjectedContext) -> Vec<Vec<f64>> {
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    (0..params.heads)
        .map(|h| {
            let r = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = pc
                .kp
                .iter_rows()
                .map(|k| dot(&qp[r.clone()], &k[r.clone()]) * scale)
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn adapter_forward_cached(
    params: &AdapterParams,
    q: &[f64],
    pc: &ProjectedContext,
    task: Task,
) -> Result<(Vec<f64>, AdapterCache)> {
    let d = params.dim();
    check_dim(d, q.len(), "query")?;
    check_dim(d, pc.kp.cols(), "projected context")?;
    let dh = params.head_dim();
    let qp = params.wq.forward(q);
    let attn = head_attention(params, &qp, pc);
    let mut o = vec![0.0; d];
    for (h, a) in attn.iter().enumerate() {
        for (i, v) in pc.vp.iter_rows().enumerate() {
            for j in h * dh..(h + 1) * dh {
                o[j] += a[i] * v[j];
            }
        }
    }
    let mut r1 = params.wo.forward(&o);
    add_into(&mut r1, q);
    let (z, ln1) = params.ln1.forward(&r1);
    let f1 = params.ff1.forward(&z);
    let act: Vec<f64> = f1.iter().map(|&x| gelu(x)).collect();
    let mut r2 = params.ff2.forward(&act);
    add_into(&mut r2, &z);
    let (y, ln2) = params.ln2.forward(&r2);
    let g = params.task[task.index()].forward(&y);
    Ok((
        g,
        AdapterCache {
            task,
            q: q.to_vec(),
            qp,
            attn,
            o,
            ln1,
            z,
            f1,
            act,
            ln2,
            y,
        },
    ))
}

/// Backpropagates `dg` through one adapter call. Parameter gradients go to
/// `grad`, projected-context gradients to `dpc`; returns `dq`.
pub fn adapter_backward(
    params: &AdapterParams,
    cache: &AdapterCache,
    pc: &ProjectedContext,
    dg: &[f64],
    grad: &mut AdapterParams,
    dpc: &mut ProjectedContext,
) -> Vec<f64> {
    let t = cache.task.index();
    let dy = params.task[t].backward(&cache.y, dg, &mut grad.task[t]);
    let dr2 = params.ln2.backward(&cache.ln2, &dy, &mut grad.ln2);
    let dact = params.ff2.backward(&cache.act, &dr2, &mut grad.ff2);
    let df1: Vec<f64> = dact.iter().zip(&cache.f1).map(|(d, &x)| d * gelu_grad(x)).collect();
    let mut dz = params.ff1.backward(&cache.z, &df1, &mut grad.ff1);
    add_into(&mut dz, &dr2);
    let dr1 = params.ln1.backward(&cache.ln1, &dz, &mut grad.ln1);
    let mut dq = dr1.clone();
    let d_o = params.wo.backward(&cache.o, &dr1, &mut grad.wo);

    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqp = vec![0.0; params.dim()];
    for (h, a) in cache.attn.iter().enumerate() {
        let r = h * dh..(h + 1) * dh;
        let da: Vec<f64> = pc.vp.iter_rows().map(|v| dot(&d_o[r.clone()], &v[r.clone()])).collect();
        for (i, &ai) in a.iter().enumerate() {
            let dv = &mut dpc.vp.row_mut(i)[r.clone()];
            for (x, y) in dv.iter_mut().zip(&d_o[r.clone()]) {
                *x += ai * y;
            }
        }
        let dlogits = softmax_backward(a, &da);
        for (i, k) in pc.kp.iter_rows().enumerate() {
            let s = dlogits[i] * scale;
            for j in r.clone() {
                dqp[j] += s * k[j];
            }
        }
        for (i, &dl) in dlogits.iter().enumerate() {
            let s = dl * scale;
            let dk = dpc.kp.row_mut(i);
            for j in r.clone() {
                dk[j] += s * cache.qp[j];
            }
        }
    }
    add_into(&mut dq, &params.wq.backward(&cache.q, &dqp, &mut grad.wq));
    dq
}

/// Pushes accumulated projected-context gradients back through the key and
/// value projections; returns the gradient w.r.t. the raw context rows.
pub fn context_backward(
    params: &AdapterParams,
    ctx: &FusionContext,
    dpc: &ProjectedContext,
    grad: &mut AdapterParams,
) -> Matrix {
    let mut dctx = Matrix::zeros(ctx.len(), params.dim());
    for (i, row) in ctx.keys_values.iter_rows().enumerate() {
        let mut d = params.wk.backward(row, dpc.kp.row(i), &mut grad.wk);
        add_into(&mut d, &params.wv.backward(row, dpc.vp.row(i), &mut grad.wv));
        dctx.row_mut(i).copy_from_slice(&d);
    }
    dctx
}

/// `g = Adapter(q, ctx)` for one task.
pub fn adapter_forward(q: &[f64], ctx: &FusionContext, task: Task, params: &AdapterParams) -> Result<Vec<f64>> {
    let pc = project_context(params, ctx)?;
    Ok(adapter_forward_cached(params, q, &pc, task)?.0)
}

/// Per-head attention weights, `[heads, n]`.
pub fn attention_weights(q: &[f64], ctx: &FusionContext, params: &AdapterParams) -> Result<Matrix> {
    check_dim(params.dim(), q.len(), "query")?;
    let pc = project_context(params, ctx)?;
    let qp = params.wq.forward(q);
    Ok(Matrix::from_rows(&head_attention(params, &qp, &pc)))
}

/// Cached values of a cosine-mode fusion.
#[derive(Debug, Clone)]
pub struct CosineCache {
    sims: Vec<f64>,
    weights: Vec<f64>,
    q_norm: f64,
    c_norms: Vec<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

pub fn cosine_forward(q: &[f64], ctx: &Matrix) -> (Vec<f64>, CosineCache) {
    let q_norm = crate::tensor::norm(q).max(NORM_FLOOR);
    let c_norms: Vec<f64> = ctx
        .iter_rows()
        .map(|c| crate::tensor::norm(c).max(NORM_FLOOR))
        .collect();
    let sims: Vec<f64> = ctx
        .iter_rows()
        .zip(&c_norms)
        .map(|(c, cn)| dot(q, c) / (q_norm * cn))
        .collect();
    let weights = softmax(&sims);
    let mut g = vec![0.0; q.len()];
    for (c, &w) in ctx.iter_rows().zip(&weights) {
        crate::tensor::axpy(w, c, &mut g);
    }
    (
        g,
        CosineCache {
            sims,
            weights,
            q_norm,
            c_norms,
        },
    )
}

/// Returns `dq` and accumulates the context-row gradients into `dctx`.
pub fn cosine_backward(q: &[f64], ctx: &Matrix, cache: &CosineCache, dg: &[f64], dctx: &mut Matrix) -> Vec<f64> {
    let da: Vec<f64> = ctx.iter_rows().map(|c| dot(dg, c)).collect();
    let ds = softmax_backward(&cache.weights, &da);
    let mut dq = vec![0.0; q.len()];
    for (i, c) in ctx.iter_rows().enumerate() {
        let (qn, cn, s) = (cache.q_norm, cache.c_norms[i], cache.sims[i]);
        let dci = dctx.row_mut(i);
        for j in 0..q.len() {
            dq[j] += ds[i] * (c[j] / (qn * cn) - s * q[j] / (qn * qn));
            dci[j] += ds[i] * (q[j] / (qn * cn) - s * c[j] / (cn * cn)) + cache.weights[i] * dg[j];
        }
    }
    dq
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize, n: usize, seed: u64) -> (AdapterParams, Vec<f64>, FusionContext) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AdapterParams::new(d, heads, &mut rng).unwrap();
        // move layer norms and task projections off their symmetric init
        p.visit_mut("", &mut |_, xs| {
            for x in xs.iter_mut() {
                *x += 0.1 * rng.random_range(-1.0..1.0);
            }
        });
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ctx = Matrix::random_normal(n, d, 1.0, &mut rng);
        let ids = (0..n).map(|i| format!("c{i}")).collect();
        (p, q, FusionContext::new(ctx, ids).unwrap())
    }

    #[test]
    fn single_row_context_gives_unit_weights() {
        let (p, q, _) = setup(8, 2, 1, 0);
        let ctx = FusionContext::new(Matrix::from_vec(1, 8, vec![0.3; 8]), vec!["a".into()]).unwrap();
        let w = attention_weights(&q, &ctx, &p).unwrap();
        assert_eq!(w.rows(), 2);
        for h in 0..2 {
            assert_eq!(w.row(h), &[1.0]);
        }
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let (p, q, _) = setup(8, 2, 1, 1);
        let row = vec![0.5, -0.2, 0.1, 0.9, 0.0, 0.3, -0.7, 0.4];
        let ctx = FusionContext::new(Matrix::from_rows(&[row.clone(), row.clone(), row]), vec!["a".into(); 3]).unwrap();
        let w = attention_weights(&q, &ctx, &p).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_rejected() {
        assert!(FusionContext::new(Matrix::zeros(0, 4), vec![]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let (p, _, ctx) = setup(8, 2, 3, 2);
        assert!(matches!(
            adapter_forward(&[0.0; 4], &ctx, Task::TextMention, &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn task_projection_isolation() {
        let (mut p, q, ctx) = setup(8, 2, 3, 3);
        let before: Vec<_> = Task::ALL
            .iter()
            .map(|&t| adapter_forward(&q, &ctx, t, &p).unwrap())
            .collect();
        p.task[Task::TextMention.index()].weight.as_mut_slice()[0] += 1.0;
        for (i, &t) in Task::ALL.iter().enumerate().skip(1) {
            assert_eq!(adapter_forward(&q, &ctx, t, &p).unwrap(), before[i]);
        }
        assert_ne!(adapter_forward(&q, &ctx, Task::TextMention, &p).unwrap(), before[0]);
    }

    #[test]
    fn cosine_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let (g, cache) = cosine_forward(&[1.0, 0.0, 0.0, 0.0], &ctx);
        assert!((cache.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut oracle = [0.0; 4];
        for (c, w) in ctx.iter_rows().zip(&cache.weights) {
            for j in 0..4 {
                oracle[j] += w * c[j];
            }
        }
        for j in 0..4 {
            assert!((g[j] - oracle[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |q: &[f64], c: &Matrix| dot(&cosine_forward(q, c).0, &w);
        let (_, cache) = cosine_forward(&q, &ctx);
        let mut dctx = Matrix::zeros(3, 4);
        let dq = cosine_backward(&q, &ctx, &cache, &w, &mut dctx);
        let h = 1e-6;
        for j in 0..4 {
            let (mut a, mut b) = (q.clone(), q.clone());
            a[j] += h;
            b[j] -= h;
            let num = (loss(&a, &ctx) - loss(&b, &ctx)) / (2.0 * h);
            assert!((num - dq[j]).abs() < 1e-6, "dq[{j}]");
        }
        for k in 0..12 {
            let (mut a, mut b) = (ctx.clone(), ctx.clone());
            a.as_mut_slice()[k] += h;
            b.as_mut_slice()[k] -= h;
            let num = (loss(&q, &a) - loss(&q, &b)) / (2.0 * h);
            assert!((num - dctx.as_slice()[k]).abs() < 1e-6, "dctx[{k}]");
        }
    }
}
