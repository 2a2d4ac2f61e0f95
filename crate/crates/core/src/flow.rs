//! Invertible autoregressive flow.
//!
//! Each block maps `z_i -> (z_i - mu(z_<i)) * exp(a(z_<i))`, with the first
//! token copied. Blocks run inside an order-reversal sandwich: tokens are
//! reversed, transformed, and reversed back, so recorded states are always
//! in the original token order.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{randn, Binder, LayerNorm, Linear, ParamId, ParamStore, TransformerLayer};
use crate::real::{c, Real};
use crate::tensor::Tensor;

/// `|a| <= ln(1e3)`, so per-channel scales stay within `[1e-3, 1e3]`.
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    /// Sequence length `N` the position table is sized for.
    pub tokens: usize,
    /// Channels per token `d`.
    pub token_dim: usize,
    pub blocks: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            tokens: 16,
            token_dim: 48,
            blocks: 4,
            width: 64,
            layers: 1,
            heads: 4,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.token_dim == 0 || self.width == 0 {
            return Err(Error::invalid("flow extents must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "flow width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// One affine block's conditioner: shifted input, position table, a small
/// transformer and a zero-initialized `(mu, a)` head.
#[derive(Clone, Debug)]
pub struct AfBlock {
    pub index: usize,
    in_proj: Linear,
    pos: ParamId,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
    out_proj: Linear,
    token_dim: usize,
    max_tokens: usize,
}

/// `mu` and clamped `a`, both `[B*seq, d]`.
pub(crate) struct CondOut {
    pub mu: Var,
    pub a: Var,
}

impl AfBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        index: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Self {
        let name = format!("{prefix}block{index}");
        let in_proj = Linear::new(
            store,
            &format!("{name}.in"),
            cfg.token_dim,
            cfg.width,
            1.0 / (cfg.token_dim as f64).sqrt(),
            rng,
        );
        let pos = store.add(format!("{name}.pos"), randn(rng, &[cfg.tokens, cfg.width], 0.02));
        let layers = (0..cfg.layers)
            .map(|l| {
                TransformerLayer::new(store, &format!("{name}.layer{l}"), cfg.width, cfg.heads, cfg.layers, rng)
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), cfg.width);
        // Zero head: an untrained block is the identity map.
        let out_proj = Linear::new(store, &format!("{name}.out"), cfg.width, 2 * cfg.token_dim, 0.0, rng);
        AfBlock {
            index,
            in_proj,
            pos,
            layers,
            ln_f,
            out_proj,
            token_dim: cfg.token_dim,
            max_tokens: cfg.tokens,
        }
    }

    /// Runs the conditioner on `z` (`[B*seq, d]`); row `i` of the output
    /// sees only rows `< i` of its sequence under a causal mask. With
    /// `copy_first` the first row of each sequence gets `mu = a = 0`.
    pub(crate) fn conditioner<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        z: Var,
        seq: usize,
        mask: Mask,
        copy_first: bool,
    ) -> Result<CondOut> {
        let rows = g.value(z).rows();
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("flow conditioner", format!("{rows} rows, seq {seq}")));
        }
        if seq > self.max_tokens {
            return Err(Error::invalid(format!(
                "sequence of {seq} tokens exceeds the flow's {} positions",
                self.max_tokens
            )));
        }
        let d = self.token_dim;
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let shift: Vec<(usize, usize)> = (0..rows)
            .map(|r| if r % seq == 0 { (1, 0) } else { (0, r - 1) })
            .collect();
        let shifted = g.select_rows(&[z, zero], shift)?;
        let h = self.in_proj.forward(g, p, shifted)?;
        let pos = p.var(g, self.pos);
        let pos_idx: Vec<usize> = (0..rows).map(|r| r % seq).collect();
        let pe = g.gather_rows(pos, &pos_idx)?;
        let mut h = g.add(h, pe)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h, seq, mask)?;
        }
        let h = self.ln_f.forward(g, p, h)?;
        let out = self.out_proj.forward(g, p, h)?;
        let mu = g.col_slice(out, 0, d)?;
        let raw_a = g.col_slice(out, d, d)?;
        let a = g.soft_clamp(raw_a, c(MAX_LOG_SCALE));
        if !copy_first {
            return Ok(CondOut { mu, a });
        }
        let mut keep = Tensor::full(&[rows, d], T::one());
        for r in (0..rows).step_by(seq) {
            keep.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
        let keep = g.constant(keep);
        let mu = g.mul(mu, keep)?;
        let a = g.mul(a, keep)?;
        Ok(CondOut { mu, a })
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, seq: usize, stage: &str, block: usize) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        let row = i / t.cols().max(1);
        return Err(Error::NonFinite {
            stage: stage.to_string(),
            block: Some(block),
            position: Some(row % seq),
        });
    }
    Ok(())
}

/// Reverses token order inside each sequence of `seq` rows.
pub fn reverse_tokens<T: Real>(t: &Tensor<T>, seq: usize) -> Result<Tensor<T>> {
    let rows = t.rows();
    if seq == 0 || rows % seq != 0 {
        return Err(Error::shape("reverse_tokens", format!("{rows} rows, seq {seq}")));
    }
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..rows {
        let src = (r / seq) * seq + (seq - 1 - r % seq);
        out.extend_from_slice(t.row(src));
    }
    Tensor::new(t.shape(), out)
}

fn seq_len<T: Real>(t: &Tensor<T>, seq: usize, d: usize) -> Result<()> {
    if t.shape().len() != 2 || t.cols() != d || seq == 0 || t.rows() % seq != 0 {
        return Err(Error::shape(
            "flow",
            format!("input {:?} is not a stack of {seq}x{d} sequences", t.shape()),
        ));
    }
    Ok(())
}

/// Intermediate states of one forward pass.
#[derive(Clone, Debug)]
pub struct FlowTrace<T> {
    /// `Z^0 = X, Z^1, ..., Z^n`, each `[B*N, d]` in original token order.
    pub states: Vec<Tensor<T>>,
    /// Per-item log-determinant summed over blocks.
    pub logdet: Vec<T>,
    /// Per-block, per-item log-determinants.
    pub block_logdets: Vec<Vec<T>>,
}

impl<T: Real> FlowTrace<T> {
    pub fn latent(&self) -> &Tensor<T> {
        self.states.last().expect("trace holds at least the input")
    }
}

/// Graph handles from a differentiable forward pass.
pub struct FlowGraphOut {
    pub latent: Var,
    /// `[B, 1]` total log-determinant.
    pub logdet: Var,
    pub states: Vec<Var>,
}

/// The teacher flow: `n` causal affine blocks.
#[derive(Debug)]
pub struct Flow<T> {
    cfg: FlowConfig,
    store: ParamStore<T>,
    blocks: Vec<AfBlock>,
    evals: AtomicUsize,
}

impl<T: Real> Clone for Flow<T> {
    fn clone(&self) -> Self {
        Flow {
            cfg: self.cfg,
            store: self.store.clone(),
            blocks: self.blocks.clone(),
            evals: AtomicUsize::new(0),
        }
    }
}

pub(crate) const FLOW_PREFIX: &str = "flow.";

impl<T: Real> Flow<T> {
    /// Randomly initialized conditioners with zero output heads, i.e. the
    /// identity map.
    pub fn new<R: Rng + ?Sized>(cfg: FlowConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let blocks = (0..cfg.blocks)
            .map(|t| AfBlock::new(&mut store, FLOW_PREFIX, t, &cfg, rng))
            .collect();
        Ok(Flow {
            cfg,
            store,
            blocks,
            evals: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[AfBlock] {
        &self.blocks
    }

    /// Conditioner passes since construction or the last reset. A batched
    /// pass counts once.
    pub fn conditioner_evals(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_counter(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Real>(&self) -> Flow<U> {
        Flow {
            cfg: self.cfg,
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            evals: AtomicUsize::new(0),
        }
    }

    fn cond(&self, g: &mut Graph<T>, p: &mut Binder<T>, t: usize, z: Var, seq: usize) -> Result<CondOut> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.blocks[t].conditioner(g, p, z, seq, Mask::Causal, true)
    }

    fn block_graph(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        t: usize,
        z: Var,
        seq: usize,
    ) -> Result<(Var, Var)> {
        let CondOut { mu, a } = self.cond(g, p, t, z, seq)?;
        check_finite(g.value(mu), seq, "flow forward (mu)", t)?;
        check_finite(g.value(a), seq, "flow forward (log-scale)", t)?;
        let centered = g.sub(z, mu)?;
        let s = g.exp(a);
        let out = g.mul(centered, s)?;
        let ld = g.segment_sum(a, seq)?;
        Ok((out, ld))
    }

    /// Differentiable forward pass over `x` (`[B*N, d]`).
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Result<FlowGraphOut> {
        let n = self.cfg.tokens;
        seq_len(g.value(x), n, self.cfg.token_dim)?;
        let mut z = x;
        let mut states = vec![x];
        let mut logdet = None;
        for t in 0..self.blocks.len() {
            let zr = g.reverse_segments(z, n)?;
            let (yr, ld) = self.block_graph(g, p, t, zr, n)?;
            z = g.reverse_segments(yr, n)?;
            states.push(z);
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => g.add(acc, ld)?,
            });
        }
        let logdet = match logdet {
            Some(l) => l,
            None => g.constant(Tensor::zeros(&[g.value(x).rows() / n, 1])),
        };
        Ok(FlowGraphOut {
            latent: z,
            logdet,
            states,
        })
    }

    /// One block without the reversal sandwich; returns the output and the
    /// per-item log-determinant.
    pub fn block_forward(&self, t: usize, z: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let seq = self.check_block(t, z)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let zv = g.constant(z.clone());
        let (out, ld) = self.block_graph(&mut g, &mut p, t, zv, seq)?;
        Ok((g.value(out).clone(), g.value(ld).data().to_vec()))
    }

    fn check_block(&self, t: usize, z: &Tensor<T>) -> Result<usize> {
        if t >= self.blocks.len() {
            return Err(Error::invalid(format!("no block {t}")));
        }
        seq_len(z, self.cfg.tokens, self.cfg.token_dim)?;
        Ok(self.cfg.tokens)
    }

    /// Sequential inverse of [`Flow::block_forward`]: token `i` is
    /// recovered from the already recovered tokens `< i`.
    pub fn block_inverse(&self, t: usize, y: &Tensor<T>) -> Result<Tensor<T>> {
        let seq = self.check_block(t, y)?;
        let d = self.cfg.token_dim;
        let batch = y.rows() / seq;
        let mut x = y.clone();
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        p.bind_all(&mut g);
        let mark = g.len();
        let mut prefix = Vec::with_capacity(y.numel());
        for i in 1..seq {
            // Row i of a length-(i+1) prefix depends on rows < i only.
            let len = i + 1;
            prefix.clear();
            for b in 0..batch {
                prefix.extend_from_slice(&x.data()[b * seq * d..(b * seq + len) * d]);
            }
            g.truncate(mark);
            let xv = g.constant(Tensor::new(&[batch * len, d], prefix.clone())?);
            let CondOut { mu, a } = self.cond(&mut g, &mut p, t, xv, len)?;
            let (mu, a) = (g.value(mu), g.value(a));
            for b in 0..batch {
                let r = b * len + i;
                let out = x.row_mut(b * seq + i);
                for ((o, &m), &s) in out.iter_mut().zip(mu.row(r)).zip(a.row(r)) {
                    *o = *o * (-s).exp() + m;
                }
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        stage: "flow inverse".into(),
                        block: Some(t),
                        position: Some(i),
                    });
                }
            }
        }
        Ok(x)
    }

    /// Forward pass over `x` (`[B*N, d]`) recording every state.
    pub fn flow_forward(&self, x: &Tensor<T>) -> Result<FlowTrace<T>> {
        let n = self.cfg.tokens;
        seq_len(x, n, self.cfg.token_dim)?;
        let batch = x.rows() / n;
        let mut states = vec![x.clone()];
        let mut block_logdets = Vec::with_capacity(self.blocks.len());
        let mut logdet = vec![T::zero(); batch];
        for t in 0..self.blocks.len() {
            let zr = reverse_tokens(states.last().unwrap(), n)?;
            let (yr, ld) = self.block_forward(t, &zr)?;
            states.push(reverse_tokens(&yr, n)?);
            for (acc, &l) in logdet.iter_mut().zip(&ld) {
                *acc = *acc + l;
            }
            block_logdets.push(ld);
        }
        Ok(FlowTrace {
            states,
            logdet,
            block_logdets,
        })
    }

    /// Undoes the blocks in reverse order; `N - 1` conditioner passes per
    /// block.
    pub fn flow_inverse(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.cfg.tokens;
        seq_len(z, n, self.cfg.token_dim)?;
        let mut x = z.clone();
        for t in (0..self.blocks.len()).rev() {
            let yr = reverse_tokens(&x, n)?;
            let xr = self.block_inverse(t, &yr)?;
            x = reverse_tokens(&xr, n)?;
        }
        Ok(x)
    }
}

/// Distilled inverse: the teacher's blocks, run last to first, each in a
/// single bidirectional pass computing `y * exp(-a(y)) + mu(y)`. Unlike the
/// teacher, the first position is not forced to be copied.
#[derive(Debug)]
pub struct StudentFlow<T> {
    cfg: FlowConfig,
    store: ParamStore<T>,
    blocks: Vec<AfBlock>,
    evals: AtomicUsize,
}

impl<T: Real> Clone for StudentFlow<T> {
    fn clone(&self) -> Self {
        StudentFlow {
            cfg: self.cfg,
            store: self.store.clone(),
            blocks: self.blocks.clone(),
            evals: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> StudentFlow<T> {
    /// Copies the teacher's weights; block `t` of the student inverts
    /// teacher block `t`, and blocks are applied from `n - 1` down to `0`.
    pub fn from_teacher(teacher: &Flow<T>) -> Self {
        StudentFlow {
            cfg: teacher.cfg,
            store: teacher.store.clone(),
            blocks: teacher.blocks.clone(),
            evals: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[AfBlock] {
        &self.blocks
    }

    pub fn conditioner_evals(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_counter(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Real>(&self) -> StudentFlow<U> {
        StudentFlow {
            cfg: self.cfg,
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            evals: AtomicUsize::new(0),
        }
    }

    /// Student block `t` applied to `z` inside the reversal sandwich.
    pub fn block_graph(&self, g: &mut Graph<T>, p: &mut Binder<T>, t: usize, z: Var) -> Result<Var> {
        let n = self.cfg.tokens;
        self.evals.fetch_add(1, Ordering::Relaxed);
        let zr = g.reverse_segments(z, n)?;
        let CondOut { mu, a } = self.blocks[t].conditioner(g, p, zr, n, Mask::Bidirectional, false)?;
        check_finite(g.value(mu), n, "student (mu)", t)?;
        check_finite(g.value(a), n, "student (log-scale)", t)?;
        let neg = g.scale(a, -T::one());
        let s = g.exp(neg);
        let scaled = g.mul(zr, s)?;
        let xr = g.add(scaled, mu)?;
        g.reverse_segments(xr, n)
    }

    /// Cascades all blocks from `n - 1` to `0`; returns every output, the
    /// last one being the reconstruction.
    pub fn cascade_graph(&self, g: &mut Graph<T>, p: &mut Binder<T>, z: Var) -> Result<Vec<Var>> {
        seq_len(g.value(z), self.cfg.tokens, self.cfg.token_dim)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut cur = z;
        for t in (0..self.blocks.len()).rev() {
            cur = self.block_graph(g, p, t, cur)?;
            outs.push(cur);
        }
        Ok(outs)
    }

    /// One-pass-per-block inverse of the teacher.
    pub fn student_invert(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let zv = g.constant(z.clone());
        let outs = self.cascade_graph(&mut g, &mut p, zv)?;
        Ok(match outs.last() {
            Some(&v) => g.value(v).clone(),
            None => z.clone(),
        })
    }
}
