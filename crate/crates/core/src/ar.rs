//! Autoregressive density over flow latents.
//!
//! The input sequence is `M` copies of the condition embedding followed by
//! the projected informative channels `z^I_1 .. z^I_N`. Position `i`'s
//! mixture is read from the hidden state of input `M + i - 2` (0-based), so
//! it sees the condition and `z^I_{<i}` only. The redundant channels of all
//! tokens share one mixture read from the final hidden state.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::{GmmParams, RawLayout};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{randn, Binder, LayerNorm, Linear, ParamId, ParamStore, TransformerLayer};
use crate::real::{c, Real};
use crate::tensor::Tensor;

/// Fixed channel split `[0, d_I)` informative, `[d_I, d)` redundant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimSplit {
    pub informative: usize,
    pub redundant: usize,
}

impl DimSplit {
    pub fn new(token_dim: usize, informative: usize) -> Result<Self> {
        if informative == 0 || informative > token_dim {
            return Err(Error::invalid(format!(
                "informative channels must be in 1..={token_dim}, got {informative}"
            )));
        }
        Ok(DimSplit {
            informative,
            redundant: token_dim - informative,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.informative + self.redundant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RedundantPrior {
    /// One learned mixture shared by every redundant token.
    SharedGmm,
    /// Fixed standard normal on the redundant channels.
    StandardNormal,
}

impl FromStr for RedundantPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared_gmm" => Ok(RedundantPrior::SharedGmm),
            "standard_normal" => Ok(RedundantPrior::StandardNormal),
            other => Err(Error::invalid(format!(
                "unknown redundant prior {other:?} (expected shared_gmm or standard_normal)"
            ))),
        }
    }
}

impl std::fmt::Display for RedundantPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RedundantPrior::SharedGmm => "shared_gmm",
            RedundantPrior::StandardNormal => "standard_normal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArConfig {
    pub tokens: usize,
    pub split: DimSplit,
    pub classes: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub informative_components: usize,
    pub redundant_components: usize,
    pub cond_repeat: usize,
    pub redundant_prior: RedundantPrior,
    /// Reverse token order between the flow and this model.
    pub final_permute: bool,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            tokens: 16,
            split: DimSplit {
                informative: 8,
                redundant: 40,
            },
            classes: 4,
            width: 128,
            layers: 2,
            heads: 4,
            informative_components: 8,
            redundant_components: 16,
            cond_repeat: 4,
            redundant_prior: RedundantPrior::SharedGmm,
            final_permute: false,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.classes == 0 || self.width == 0 || self.cond_repeat == 0 {
            return Err(Error::invalid("model extents must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.informative_components == 0 || self.redundant_components == 0 {
            return Err(Error::invalid("mixtures need at least one component"));
        }
        DimSplit::new(self.split.token_dim(), self.split.informative)?;
        Ok(())
    }

    pub fn informative_layout(&self) -> RawLayout {
        RawLayout::new(self.informative_components, self.split.informative)
    }

    pub fn redundant_layout(&self) -> RawLayout {
        RawLayout::new(self.redundant_components, self.split.redundant)
    }

    fn learned_redundant(&self) -> bool {
        self.redundant_prior == RedundantPrior::SharedGmm && self.split.redundant > 0
    }
}

/// Per-item log-likelihoods from a differentiable pass, each `[B, 1]`.
pub struct ArGraphOut {
    pub ll_informative: Var,
    pub ll_redundant: Var,
}

#[derive(Clone, Debug)]
pub struct ArModel<T> {
    cfg: ArConfig,
    store: ParamStore<T>,
    cond_emb: ParamId,
    in_proj: Linear,
    pos: ParamId,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
    head_inf: Linear,
    head_red: Option<Linear>,
}

pub(crate) const AR_PREFIX: &str = "ar.";

fn head<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    width: usize,
    layout: RawLayout,
    rng: &mut R,
) -> Linear {
    let lin = Linear::new(store, name, width, layout.width(), 0.1 / (width as f64).sqrt(), rng);
    // Spread initial component means so the mixture starts asymmetric.
    let spread = randn::<T, _>(rng, &[layout.components * layout.dims], 1.0);
    let b = store.get_mut(lin.b).data_mut();
    b[layout.components..layout.components * (1 + layout.dims)].copy_from_slice(spread.data());
    lin
}

impl<T: Real> ArModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ArConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let w = cfg.width;
        let p = AR_PREFIX;
        let cond_emb = store.add(format!("{p}cond"), randn(rng, &[cfg.classes + 1, w], 1.0));
        let in_proj = Linear::new(
            &mut store,
            &format!("{p}in"),
            cfg.split.informative,
            w,
            1.0 / (cfg.split.informative as f64).sqrt(),
            rng,
        );
        let pos = store.add(format!("{p}pos"), randn(rng, &[cfg.cond_repeat + cfg.tokens, w], 0.02));
        let layers = (0..cfg.layers)
            .map(|l| TransformerLayer::new(&mut store, &format!("{p}layer{l}"), w, cfg.heads, cfg.layers, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, &format!("{p}ln_f"), w);
        let head_inf = head(&mut store, &format!("{p}head_inf"), w, cfg.informative_layout(), rng);
        let head_red = cfg
            .learned_redundant()
            .then(|| head(&mut store, &format!("{p}head_red"), w, cfg.redundant_layout(), rng));
        Ok(ArModel {
            cfg,
            store,
            cond_emb,
            in_proj,
            pos,
            layers,
            ln_f,
            head_inf,
            head_red,
        })
    }

    pub fn config(&self) -> &ArConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Row of the condition table; the final row is the null condition.
    pub fn condition_id(&self) -> ParamId {
        self.cond_emb
    }

    pub fn head_ids(&self) -> (&Linear, Option<&Linear>) {
        (&self.head_inf, self.head_red.as_ref())
    }

    pub fn cast<U: Real>(&self) -> ArModel<U> {
        ArModel {
            cfg: self.cfg,
            store: self.store.cast(),
            cond_emb: self.cond_emb,
            in_proj: self.in_proj.clone(),
            pos: self.pos,
            layers: self.layers.clone(),
            ln_f: self.ln_f.clone(),
            head_inf: self.head_inf.clone(),
            head_red: self.head_red.clone(),
        }
    }

    fn cond_rows(&self, labels: &[Option<usize>]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| match *l {
                None => Ok(self.cfg.classes),
                Some(c) if c < self.cfg.classes => Ok(c),
                Some(c) => Err(Error::invalid(format!(
                    "class {c} outside the {} known classes",
                    self.cfg.classes
                ))),
            })
            .collect()
    }

    /// Transformer over `[cond x M, z^I_1 .. z^I_len]` for each item;
    /// `z_inf` is `[B*len, d_I]`. Returns final hidden states `[B*(M+len), D]`.
    fn trunk(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        z_inf: Var,
        len: usize,
        labels: &[Option<usize>],
    ) -> Result<Var> {
        let m = self.cfg.cond_repeat;
        let b = labels.len();
        if g.value(z_inf).rows() != b * len || g.value(z_inf).cols() != self.cfg.split.informative {
            return Err(Error::shape(
                "ar",
                format!("informative input {:?} for {b} items of {len} tokens", g.shape(z_inf)),
            ));
        }
        if len > self.cfg.tokens {
            return Err(Error::invalid(format!("{len} tokens exceed the model's {}", self.cfg.tokens)));
        }
        let rows = self.cond_rows(labels)?;
        let table = p.var(g, self.cond_emb);
        let rep: Vec<usize> = rows.iter().flat_map(|&r| std::iter::repeat_n(r, m)).collect();
        let cond = g.gather_rows(table, &rep)?;
        let seq = m + len;
        let mut index = Vec::with_capacity(b * seq);
        for item in 0..b {
            index.extend((0..m).map(|j| (0, item * m + j)));
            index.extend((0..len).map(|i| (1, item * len + i)));
        }
        let h = if len > 0 {
            let zin = self.in_proj.forward(g, p, z_inf)?;
            g.select_rows(&[cond, zin], index)?
        } else {
            cond
        };
        let pos = p.var(g, self.pos);
        let pos_idx: Vec<usize> = (0..b * seq).map(|r| r % seq).collect();
        let pe = g.gather_rows(pos, &pos_idx)?;
        let mut h = g.add(h, pe)?;
        for layer in &self.layers {
            h = layer.forward(g, p, h, seq, Mask::Causal)?;
        }
        self.ln_f.forward(g, p, h)
    }

    /// Reverses token order when the final permutation is enabled.
    pub fn permute_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        if self.cfg.final_permute {
            g.reverse_segments(z, self.cfg.tokens)
        } else {
            Ok(z)
        }
    }

    pub fn permute(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cfg.final_permute {
            crate::flow::reverse_tokens(z, self.cfg.tokens)
        } else {
            Ok(z.clone())
        }
    }

    /// Per-item `(ll_informative, ll_redundant)` of flow latents `z`
    /// (`[B*N, d]`, already permuted if the final permutation is on).
    pub fn log_lik_graph(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        z: Var,
        labels: &[Option<usize>],
    ) -> Result<ArGraphOut> {
        let n = self.cfg.tokens;
        let m = self.cfg.cond_repeat;
        let (di, dr) = (self.cfg.split.informative, self.cfg.split.redundant);
        let b = labels.len();
        if g.value(z).rows() != b * n || g.value(z).cols() != di + dr {
            return Err(Error::shape(
                "ar",
                format!("latent {:?} for {b} items of {n}x{}", g.shape(z), di + dr),
            ));
        }
        let z_inf = g.col_slice(z, 0, di)?;
        let h = self.trunk(g, p, z_inf, n, labels)?;
        let seq = m + n;
        let inf_rows: Vec<usize> = (0..b)
            .flat_map(|item| (0..n).map(move |i| item * seq + m - 1 + i))
            .collect();
        let h_inf = g.gather_rows(h, &inf_rows)?;
        let raw_inf = self.head_inf.forward(g, p, h_inf)?;
        let lp = g.gmm_log_prob(raw_inf, z_inf, (0..b * n).collect(), self.cfg.informative_components)?;
        let ll_informative = g.segment_sum(lp, n)?;
        let ll_redundant = if dr == 0 {
            g.constant(Tensor::zeros(&[b, 1]))
        } else {
            let z_red = g.col_slice(z, di, dr)?;
            match &self.head_red {
                Some(head) => {
                    let last: Vec<usize> = (0..b).map(|item| item * seq + seq - 1).collect();
                    let h_red = g.gather_rows(h, &last)?;
                    let raw = head.forward(g, p, h_red)?;
                    let map = (0..b * n).map(|r| r / n).collect();
                    let lp = g.gmm_log_prob(raw, z_red, map, self.cfg.redundant_components)?;
                    g.segment_sum(lp, n)?
                }
                None => {
                    let sq = g.square(z_red);
                    let s = g.segment_sum(sq, n)?;
                    let s = g.scale(s, c(-0.5));
                    g.add_scalar(s, c(-0.5 * (2.0 * PI).ln() * (n * dr) as f64))
                }
            }
        };
        Ok(ArGraphOut {
            ll_informative,
            ll_redundant,
        })
    }

    /// Per-item `(ll_informative, ll_redundant)` for `z` (`[B*N, d]`, in
    /// flow order; the final permutation is applied here).
    pub fn sequence_log_lik(&self, z: &Tensor<T>, labels: &[Option<usize>]) -> Result<Vec<(f64, f64)>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let zv = g.constant(z.clone());
        let zv = self.permute_graph(&mut g, zv)?;
        let out = self.log_lik_graph(&mut g, &mut p, zv, labels)?;
        let li = g.value(out.ll_informative).data();
        let lr = g.value(out.ll_redundant).data();
        Ok(li.iter().zip(lr).map(|(a, b)| (a.as_f64(), b.as_f64())).collect())
    }

    /// Mixture for the next token of each prefix. `prefixes` is `[B*len,
    /// d_I]`; for `len < N` this is the informative mixture of position
    /// `len + 1`, for `len == N` the shared redundant mixture.
    pub fn next_gmms(&self, prefixes: &Tensor<T>, len: usize, labels: &[Option<usize>]) -> Result<Vec<GmmParams>> {
        let n = self.cfg.tokens;
        if len > n {
            return Err(Error::invalid(format!("prefix of {len} tokens, model has {n}")));
        }
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let zv = g.constant(prefixes.clone());
        let h = self.trunk(&mut g, &mut p, zv, len, labels)?;
        let seq = self.cfg.cond_repeat + len;
        let last: Vec<usize> = (0..labels.len()).map(|item| item * seq + seq - 1).collect();
        let hl = g.gather_rows(h, &last)?;
        if len < n {
            let raw = self.head_inf.forward(&mut g, &mut p, hl)?;
            let layout = self.cfg.informative_layout();
            return Ok((0..labels.len())
                .map(|r| GmmParams::from_raw(&layout, g.value(raw).row(r)))
                .collect());
        }
        match &self.head_red {
            Some(head) => {
                let raw = head.forward(&mut g, &mut p, hl)?;
                let layout = self.cfg.redundant_layout();
                Ok((0..labels.len())
                    .map(|r| GmmParams::from_raw(&layout, g.value(raw).row(r)))
                    .collect())
            }
            None => Ok(vec![GmmParams::standard_normal(self.cfg.split.redundant); labels.len()]),
        }
    }

    /// All mixtures for one sequence: `N` informative and the shared
    /// redundant one. `z_inf` is `[N, d_I]` (model order).
    pub fn predict_gmms(&self, z_inf: &Tensor<T>, class: Option<usize>) -> Result<(Vec<GmmParams>, GmmParams)> {
        let n = self.cfg.tokens;
        let m = self.cfg.cond_repeat;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store, false);
        let zv = g.constant(z_inf.clone());
        let h = self.trunk(&mut g, &mut p, zv, n, &[class])?;
        let rows: Vec<usize> = (m - 1..m + n - 1).collect();
        let hi = g.gather_rows(h, &rows)?;
        let raw = self.head_inf.forward(&mut g, &mut p, hi)?;
        let layout = self.cfg.informative_layout();
        let inf = (0..n).map(|r| GmmParams::from_raw(&layout, g.value(raw).row(r))).collect();
        let red = match &self.head_red {
            Some(head) => {
                let hl = g.gather_rows(h, &[m + n - 1])?;
                let raw = head.forward(&mut g, &mut p, hl)?;
                GmmParams::from_raw(&self.cfg.redundant_layout(), g.value(raw).row(0))
            }
            None => GmmParams::standard_normal(self.cfg.split.redundant),
        };
        Ok((inf, red))
    }
}
