//! Guided sampling by resampling.
//!
//! Per token: draw candidates from the conditional and unconditional
//! mixtures, weight them so the pool targets `p_c^{1+w} / p_u^w`, and pick
//! by a categorical draw over the normalized weights.

use rand::Rng;

use crate::ar::ArModel;
use crate::error::{Error, Result};
use crate::flow::{Flow, StudentFlow};
use crate::gmm::{gmm_log_prob, gmm_sample, GmmParams};
use crate::numeric::{log_softmax_in_place, sample_categorical};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfgConfig {
    pub w: f64,
    pub s_c: usize,
    pub s_u: usize,
    pub t_pi: f64,
    pub t_sigma: f64,
    pub t_pi_v: f64,
    pub t_sigma_v: f64,
    pub t_s: f64,
    /// Pool enlargement for the redundant stage.
    pub redundant_multiplier: usize,
    /// Multiplies the shared redundant mixture's scales before sampling.
    pub redundant_scale: f64,
}

impl Default for CfgConfig {
    fn default() -> Self {
        CfgConfig {
            w: 1.0,
            s_c: 5,
            s_u: 5,
            t_pi: 1.0,
            t_sigma: 1.0,
            t_pi_v: 1.0,
            t_sigma_v: 1.0,
            t_s: 1.0,
            redundant_multiplier: 4,
            redundant_scale: 1.0,
        }
    }
}

impl CfgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Error::invalid(format!("{name} out of range: {v}"));
        if self.s_c + self.s_u == 0 {
            return Err(Error::invalid("need at least one candidate (s_c + s_u >= 1)"));
        }
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(bad("w", self.w));
        }
        for (name, v) in [("t_pi", self.t_pi), ("t_pi_v", self.t_pi_v), ("t_s", self.t_s)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(name, v));
            }
        }
        for (name, v) in [("t_sigma", self.t_sigma), ("t_sigma_v", self.t_sigma_v)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(name, v));
            }
        }
        if self.redundant_multiplier == 0 {
            return Err(Error::invalid("redundant_multiplier must be >= 1"));
        }
        if !(self.redundant_scale > 0.0) || !self.redundant_scale.is_finite() {
            return Err(bad("redundant_scale", self.redundant_scale));
        }
        Ok(())
    }

    /// Guidance off and no unconditional candidates: resampling reduces to
    /// a plain draw from the conditional model.
    pub fn is_unguided(&self) -> bool {
        self.w == 0.0 && self.s_u == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub value: Vec<f64>,
    pub conditional: bool,
}

fn check_pair(g_c: &GmmParams, g_u: &GmmParams) -> Result<()> {
    if g_c.dims != g_u.dims {
        return Err(Error::invalid(format!(
            "conditional mixture has {} dims, unconditional {}",
            g_c.dims, g_u.dims
        )));
    }
    Ok(())
}

/// `s_c` draws from `g_c` followed by `s_u` draws from `g_u`.
pub fn propose_counts<R: Rng + ?Sized>(
    g_c: &GmmParams,
    g_u: &GmmParams,
    s_c: usize,
    s_u: usize,
    t_pi: f64,
    t_sigma: f64,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    check_pair(g_c, g_u)?;
    let mut out = Vec::with_capacity(s_c + s_u);
    for _ in 0..s_c {
        out.push(Candidate {
            value: gmm_sample(g_c, t_pi, t_sigma, rng)?,
            conditional: true,
        });
    }
    for _ in 0..s_u {
        out.push(Candidate {
            value: gmm_sample(g_u, t_pi, t_sigma, rng)?,
            conditional: false,
        });
    }
    Ok(out)
}

pub fn propose<R: Rng + ?Sized>(
    g_c: &GmmParams,
    g_u: &GmmParams,
    cfg: &CfgConfig,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    propose_counts(g_c, g_u, cfg.s_c, cfg.s_u, cfg.t_pi, cfg.t_sigma, rng)
}

fn eval_mixture(g: &GmmParams, t_pi: f64, t_sigma: f64) -> Result<GmmParams> {
    if t_pi == 1.0 && t_sigma == 1.0 {
        Ok(g.clone())
    } else {
        g.tempered(t_pi, t_sigma)
    }
}

/// Normalized log-weights: `w·Δ` for conditional candidates and `(w+1)·Δ`
/// for unconditional ones, `Δ = log p_c − log p_u` under the evaluation
/// temperatures, then scaled by `t_s` and log-softmaxed.
pub fn weigh(candidates: &[Candidate], g_c: &GmmParams, g_u: &GmmParams, cfg: &CfgConfig) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to weigh"));
    }
    check_pair(g_c, g_u)?;
    let ec = eval_mixture(g_c, cfg.t_pi_v, cfg.t_sigma_v)?;
    let eu = eval_mixture(g_u, cfg.t_pi_v, cfg.t_sigma_v)?;
    let mut lw = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let delta = gmm_log_prob(&ec, &cand.value)? - gmm_log_prob(&eu, &cand.value)?;
        let k = if cand.conditional { cfg.w } else { cfg.w + 1.0 };
        lw.push(k * delta * cfg.t_s);
    }
    log_softmax_in_place(&mut lw)?;
    Ok(lw)
}

pub fn resample_informative<R: Rng + ?Sized>(
    candidates: &[Candidate],
    log_weights: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if candidates.is_empty() || candidates.len() != log_weights.len() {
        return Err(Error::invalid("candidate and weight counts differ"));
    }
    Ok(candidates[sample_categorical(log_weights, rng.random())].value.clone())
}

/// `n` independent draws, with replacement, from one shared pool.
pub fn resample_redundant<R: Rng + ?Sized>(
    candidates: &[Candidate],
    log_weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    (0..n).map(|_| resample_informative(candidates, log_weights, rng)).collect()
}

/// Inverse map used to turn latents into images.
pub enum Inverter<'a, T> {
    Teacher(&'a Flow<T>),
    Student(&'a StudentFlow<T>),
}

impl<T: Real> Inverter<'_, T> {
    pub fn invert(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Inverter::Teacher(f) => f.flow_inverse(z),
            Inverter::Student(s) => s.student_invert(z),
        }
    }
}

/// Latents in model order (`[B*N, d]`) for `labels.len()` items.
pub fn sample_latents<T: Real, R: Rng + ?Sized>(
    ar: &ArModel<T>,
    labels: &[usize],
    cfg: &CfgConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let acfg = ar.config();
    let (n, di, dr) = (acfg.tokens, acfg.split.informative, acfg.split.redundant);
    let b = labels.len();
    let guided = !cfg.is_unguided();
    let mut query: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    if guided {
        query.extend(std::iter::repeat_n(None, b));
    }
    // Informative channels, token by token; per item a row-major [N, d_I].
    let mut inf: Vec<Vec<f64>> = vec![Vec::with_capacity(n * di); b];
    for len in 0..n {
        let mut prefix = Vec::with_capacity(query.len() * len * di);
        for q in 0..query.len() {
            prefix.extend(inf[q % b].iter().map(|&v| T::from_f64(v)));
        }
        let prefix = Tensor::new(&[query.len() * len, di], prefix)?;
        let gmms = ar.next_gmms(&prefix, len, &query)?;
        for item in 0..b {
            let tok = if guided {
                let cands = propose(&gmms[item], &gmms[b + item], cfg, rng)?;
                let lw = weigh(&cands, &gmms[item], &gmms[b + item], cfg)?;
                resample_informative(&cands, &lw, rng)?
            } else {
                gmm_sample(&gmms[item], cfg.t_pi, cfg.t_sigma, rng)?
            };
            inf[item].extend(tok);
        }
    }
    let mut red: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    if dr > 0 {
        let mut prefix = Vec::with_capacity(query.len() * n * di);
        for q in 0..query.len() {
            prefix.extend(inf[q % b].iter().map(|&v| T::from_f64(v)));
        }
        let prefix = Tensor::new(&[query.len() * n, di], prefix)?;
        let gmms = ar.next_gmms(&prefix, n, &query)?;
        for item in 0..b {
            let g_c = gmms[item].with_scale_factor(cfg.redundant_scale);
            red[item] = if guided {
                let g_u = gmms[b + item].with_scale_factor(cfg.redundant_scale);
                let m = cfg.redundant_multiplier;
                let cands = propose_counts(&g_c, &g_u, cfg.s_c * m, cfg.s_u * m, cfg.t_pi, cfg.t_sigma, rng)?;
                let lw = weigh(&cands, &g_c, &g_u, cfg)?;
                resample_redundant(&cands, &lw, n, rng)?
            } else {
                (0..n)
                    .map(|_| gmm_sample(&g_c, cfg.t_pi, cfg.t_sigma, rng))
                    .collect::<Result<_>>()?
            };
        }
    }
    let mut data = Vec::with_capacity(b * n * (di + dr));
    for item in 0..b {
        for i in 0..n {
            data.extend(inf[item][i * di..(i + 1) * di].iter().map(|&v| T::from_f64(v)));
            if dr > 0 {
                data.extend(red[item][i].iter().map(|&v| T::from_f64(v)));
            }
        }
    }
    Tensor::new(&[b * n, di + dr], data)
}

/// Samples latents, undoes the final permutation and inverts. Returns
/// `[B*N, d]` tokens in flow input space.
pub fn generate<T: Real, R: Rng + ?Sized>(
    ar: &ArModel<T>,
    inverter: &Inverter<T>,
    labels: &[usize],
    cfg: &CfgConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let z = sample_latents(ar, labels, cfg, rng)?;
    let z = ar.permute(&z)?;
    inverter.invert(&z)
}
