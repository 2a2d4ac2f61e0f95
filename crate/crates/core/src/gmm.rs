//! Diagonal Gaussian mixtures: the per-position conditional density emitted
//! by the autoregressive model.
//!
//! Network heads emit raw rows laid out as
//! `[logits (K) | means (K*dims) | log-scales (K*dims)]`.
//! Scales are `SCALE_FLOOR + exp(clamp(raw))`, which keeps every density
//! finite for finite inputs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::lse;
use crate::numeric::{log_softmax_in_place, sample_categorical};
use crate::real::{c, Real};

pub const SCALE_FLOOR: f64 = 1e-4;
pub const LOG_SCALE_MIN: f64 = -12.0;
pub const LOG_SCALE_MAX: f64 = 8.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Column layout of a raw GMM head row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawLayout {
    pub components: usize,
    pub dims: usize,
}

impl RawLayout {
    pub fn new(components: usize, dims: usize) -> Self {
        RawLayout { components, dims }
    }

    pub fn width(&self) -> usize {
        self.components * (1 + 2 * self.dims)
    }

    fn mean_at(&self, k: usize, j: usize) -> usize {
        self.components + k * self.dims + j
    }

    fn scale_at(&self, k: usize, j: usize) -> usize {
        self.components + self.components * self.dims + k * self.dims + j
    }
}

fn scale_from_raw<T: Real>(raw: T) -> T {
    let r = raw.max(c(LOG_SCALE_MIN)).min(c(LOG_SCALE_MAX));
    T::from_f64(SCALE_FLOOR) + r.exp()
}

fn component_log_probs<T: Real>(layout: &RawLayout, row: &[T], z: &[T], out: &mut [T]) {
    let k = layout.components;
    let log_norm = lse(&row[..k]);
    let half: T = c(0.5);
    for (comp, o) in out.iter_mut().enumerate().take(k) {
        let mut lp = row[comp] - log_norm;
        for (j, &zj) in z.iter().enumerate() {
            let sigma = scale_from_raw(row[layout.scale_at(comp, j)]);
            let u = (zj - row[layout.mean_at(comp, j)]) / sigma;
            lp = lp - c::<T>(HALF_LN_2PI) - sigma.ln() - half * u * u;
        }
        *o = lp;
    }
}

/// Log-density of `z` under the mixture encoded by a raw head row.
pub(crate) fn raw_log_prob<T: Real>(layout: &RawLayout, row: &[T], z: &[T], scratch: &mut [T]) -> T {
    component_log_probs(layout, row, z, scratch);
    lse(&scratch[..layout.components])
}

/// Gradient of [`raw_log_prob`] with respect to the raw row and the target.
pub(crate) struct GradScratch<T> {
    comp: Vec<T>,
    pub d_params: Vec<T>,
    pub d_target: Vec<T>,
}

impl<T: Real> GradScratch<T> {
    pub fn new(layout: &RawLayout) -> Self {
        GradScratch {
            comp: vec![T::zero(); layout.components],
            d_params: vec![T::zero(); layout.width()],
            d_target: vec![T::zero(); layout.dims],
        }
    }

    pub fn compute(&mut self, layout: &RawLayout, row: &[T], z: &[T]) {
        let k = layout.components;
        component_log_probs(layout, row, z, &mut self.comp);
        let total = lse(&self.comp);
        let log_norm = lse(&row[..k]);
        self.d_params.iter_mut().for_each(|x| *x = T::zero());
        self.d_target.iter_mut().for_each(|x| *x = T::zero());
        let (lo, hi): (T, T) = (c(LOG_SCALE_MIN), c(LOG_SCALE_MAX));
        for comp in 0..k {
            let resp = (self.comp[comp] - total).exp();
            let prior = (row[comp] - log_norm).exp();
            self.d_params[comp] = resp - prior;
            for (j, &zj) in z.iter().enumerate() {
                let raw = row[layout.scale_at(comp, j)];
                let sigma = scale_from_raw(raw);
                let u = (zj - row[layout.mean_at(comp, j)]) / sigma;
                self.d_params[layout.mean_at(comp, j)] = resp * u / sigma;
                self.d_target[j] = self.d_target[j] - resp * u / sigma;
                if raw > lo && raw < hi {
                    let d_sigma = resp * (u * u - T::one()) / sigma;
                    self.d_params[layout.scale_at(comp, j)] = d_sigma * raw.exp();
                }
            }
        }
    }
}

/// A decoded mixture: normalized log-weights, means and scales, each
/// component's vectors stored contiguously (`means[k*dims + j]`).
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub log_weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub dims: usize,
}

impl GmmParams {
    pub fn new(mut log_weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let k = log_weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() % k != 0 || means.len() != scales.len() {
            return Err(Error::invalid(format!(
                "{k} components with {} means and {} scales",
                means.len(),
                scales.len()
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("mixture scales must be positive"));
        }
        log_softmax_in_place(&mut log_weights)?;
        let dims = means.len() / k;
        Ok(GmmParams {
            log_weights,
            means,
            scales,
            dims,
        })
    }

    /// Single standard normal component.
    pub fn standard_normal(dims: usize) -> Self {
        GmmParams {
            log_weights: vec![0.0],
            means: vec![0.0; dims],
            scales: vec![1.0; dims],
            dims,
        }
    }

    /// Decodes a raw head row.
    pub fn from_raw<T: Real>(layout: &RawLayout, row: &[T]) -> Self {
        let k = layout.components;
        let d = layout.dims;
        let logits: Vec<f64> = row[..k].iter().map(|x| x.as_f64()).collect();
        let z = lse(&logits);
        let mut means = Vec::with_capacity(k * d);
        let mut scales = Vec::with_capacity(k * d);
        for comp in 0..k {
            for j in 0..d {
                means.push(row[layout.mean_at(comp, j)].as_f64());
                scales.push(scale_from_raw(row[layout.scale_at(comp, j)].as_f64()));
            }
        }
        GmmParams {
            log_weights: logits.iter().map(|l| l - z).collect(),
            means,
            scales,
            dims: d,
        }
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dims..(k + 1) * self.dims]
    }

    pub fn scale(&self, k: usize) -> &[f64] {
        &self.scales[k * self.dims..(k + 1) * self.dims]
    }

    /// Weights tempered as `softmax(log π / t_pi)` and scales multiplied by
    /// `t_sigma` (floored at [`SCALE_FLOOR`] so densities stay defined).
    pub fn tempered(&self, t_pi: f64, t_sigma: f64) -> Result<Self> {
        if !(t_pi > 0.0) {
            return Err(Error::invalid(format!("weight temperature must be > 0, got {t_pi}")));
        }
        if !(t_sigma >= 0.0) {
            return Err(Error::invalid(format!("scale temperature must be >= 0, got {t_sigma}")));
        }
        let mut lw: Vec<f64> = self.log_weights.iter().map(|l| l / t_pi).collect();
        log_softmax_in_place(&mut lw)?;
        Ok(GmmParams {
            log_weights: lw,
            means: self.means.clone(),
            scales: self.scales.iter().map(|s| (s * t_sigma).max(SCALE_FLOOR)).collect(),
            dims: self.dims,
        })
    }

    /// Returns a copy with every scale multiplied by `factor`.
    pub fn with_scale_factor(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scales.iter_mut().for_each(|s| *s *= factor);
        out
    }

    /// Evaluation through per-component affine normalization: each
    /// component maps `z` to `(z - μ)/σ`, scores it under a standard normal
    /// and adds the volume term `Σ ln(1/σ)`.
    pub fn log_prob_affine(&self, z: &[f64]) -> Result<f64> {
        self.check_dims(z)?;
        let terms: Vec<f64> = (0..self.components())
            .map(|k| {
                let mut std_lp = 0.0;
                let mut log_vol = 0.0;
                for (j, &zj) in z.iter().enumerate() {
                    let u = (zj - self.mean(k)[j]) * (1.0 / self.scale(k)[j]);
                    std_lp += -HALF_LN_2PI - 0.5 * u * u;
                    log_vol += (1.0 / self.scale(k)[j]).abs().ln();
                }
                self.log_weights[k] + std_lp + log_vol
            })
            .collect();
        Ok(lse(&terms))
    }

    fn check_dims(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dims {
            return Err(Error::invalid(format!(
                "point has {} dims, mixture has {}",
                z.len(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// `log p(z)` for a diagonal Gaussian mixture.
pub fn gmm_log_prob(params: &GmmParams, z: &[f64]) -> Result<f64> {
    params.check_dims(z)?;
    let terms: Vec<f64> = (0..params.components())
        .map(|k| {
            let mut lp = params.log_weights[k];
            for (j, &zj) in z.iter().enumerate() {
                let s = params.scale(k)[j];
                let u = (zj - params.mean(k)[j]) / s;
                lp += -HALF_LN_2PI - s.ln() - 0.5 * u * u;
            }
            lp
        })
        .collect();
    Ok(lse(&terms))
}

/// Draws one point: a component from the tempered weights, then
/// `μ_k + t_sigma * σ_k ⊙ ε`.
pub fn gmm_sample<R: Rng + ?Sized>(
    params: &GmmParams,
    t_pi: f64,
    t_sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(t_pi > 0.0) {
        return Err(Error::invalid(format!("weight temperature must be > 0, got {t_pi}")));
    }
    if !(t_sigma >= 0.0) {
        return Err(Error::invalid(format!("scale temperature must be >= 0, got {t_sigma}")));
    }
    let k = if params.components() == 1 {
        0
    } else if t_pi == 1.0 {
        sample_categorical(&params.log_weights, rng.random())
    } else {
        let mut lw: Vec<f64> = params.log_weights.iter().map(|l| l / t_pi).collect();
        log_softmax_in_place(&mut lw)?;
        sample_categorical(&lw, rng.random())
    };
    Ok((0..params.dims)
        .map(|j| {
            let eps: f64 = rng.sample(StandardNormal);
            params.mean(k)[j] + t_sigma * params.scale(k)[j] * eps
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::gradcheck::finite_diff_check_many;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal_pdf(z: f64, mu: f64, s: f64) -> f64 {
        (-(z - mu) * (z - mu) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = GmmParams::standard_normal(2);
        let lp = gmm_log_prob(&p, &[0.0, 0.0]).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp - (-1.837877)).abs() < 1e-6);
    }

    #[test]
    fn identical_components_collapse() {
        let one = GmmParams::new(vec![0.0], vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let two = GmmParams::new(vec![0.2, -1.7], vec![0.3, -1.0, 0.3, -1.0], vec![0.5, 2.0, 0.5, 2.0]).unwrap();
        for z in [[0.0, 0.0], [1.0, -3.0], [-2.0, 4.0]] {
            let a = gmm_log_prob(&one, &z).unwrap();
            let b = gmm_log_prob(&two, &z).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_components_match_direct_density_sum() {
        let (w, mu, s) = ([0.3, 0.7], [-1.0, 2.0], [0.5, 1.5]);
        let p = GmmParams::new(w.iter().map(|x: &f64| x.ln()).collect(), mu.to_vec(), s.to_vec()).unwrap();
        for z in [-3.0, -1.0, 0.0, 0.7, 2.0, 5.5] {
            let direct: f64 = (0..2).map(|k| w[k] * normal_pdf(z, mu[k], s[k])).sum();
            let lp = gmm_log_prob(&p, &[z]).unwrap();
            assert!(((lp - direct.ln()) / direct.ln()).abs() < 1e-9, "z={z}");
            let affine = p.log_prob_affine(&[z]).unwrap();
            assert!(((affine - lp) / lp).abs() < 1e-6);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let p = GmmParams::standard_normal(3);
        assert!(matches!(gmm_log_prob(&p, &[0.0, 1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn normalizes_to_one_on_grid() {
        let p = GmmParams::new(vec![0.1, -0.4, 0.9], vec![-2.0, 0.5, 3.0], vec![0.3, 1.2, 0.7]).unwrap();
        let (lo, hi) = (-2.0 - 10.0 * 1.2, 3.0 + 10.0 * 1.2);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| gmm_log_prob(&p, &[lo + (i as f64 + 0.5) * h]).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn zero_scale_temperature_returns_mean() {
        let p = GmmParams::new(vec![0.0, 0.0], vec![1.0, 2.0, -3.0, 4.0], vec![1.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let z = gmm_sample(&p, 1.0, 0.0, &mut rng).unwrap();
            assert!(z == vec![1.0, 2.0] || z == vec![-3.0, 4.0]);
        }
    }

    #[test]
    fn cold_weight_temperature_selects_argmax() {
        let p = GmmParams::new(
            vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()],
            vec![0.0, 10.0, 20.0],
            vec![1.0; 3],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| gmm_sample(&p, 0.01, 0.0, &mut rng).unwrap()[0] == 0.0)
            .count();
        assert!(hits as f64 / n as f64 > 0.99);
    }

    #[test]
    fn non_positive_weight_temperature_rejected() {
        let p = GmmParams::standard_normal(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gmm_sample(&p, 0.0, 1.0, &mut rng).is_err());
        assert!(gmm_sample(&p, -1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn single_component_sample_statistics() {
        let p = GmmParams::new(vec![0.0], vec![1.5], vec![0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| gmm_sample(&p, 1.0, 1.0, &mut rng).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.5).abs() < 3.0 * 0.7 / (n as f64).sqrt());
        assert!((var.sqrt() - 0.7).abs() < 0.01);
    }

    #[test]
    fn raw_row_decoding_matches_graph_op() {
        let layout = RawLayout::new(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..layout.width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = [0.3, -0.8];
        let decoded = GmmParams::from_raw(&layout, &row);
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new(&[1, layout.width()], row).unwrap());
        let zv = g.constant(Tensor::new(&[1, 2], z.to_vec()).unwrap());
        let lp = g.gmm_log_prob(pv, zv, vec![0], 3).unwrap();
        let want = gmm_log_prob(&decoded, &z).unwrap();
        assert!((g.value(lp).item() - want).abs() < 1e-12);
    }

    #[test]
    fn graph_op_gradients_match_finite_differences() {
        let layout = RawLayout::new(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = Tensor::new(
            &[2, layout.width()],
            (0..2 * layout.width()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let targets = Tensor::new(&[3, 2], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = finite_diff_check_many(
            |g, v| {
                let lp = g.gmm_log_prob(v[0], v[1], vec![0, 1, 1], 3)?;
                Ok(g.sum(lp))
            },
            &[params, targets],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    proptest! {
        #[test]
        fn direct_and_affine_paths_agree(
            lw in proptest::collection::vec(-3.0f64..3.0, 4),
            mu in proptest::collection::vec(-5.0f64..5.0, 8),
            s in proptest::collection::vec(0.05f64..4.0, 8),
            z in proptest::collection::vec(-6.0f64..6.0, 2),
        ) {
            let p = GmmParams::new(lw, mu, s).unwrap();
            let a = gmm_log_prob(&p, &z).unwrap();
            let b = p.log_prob_affine(&z).unwrap();
            prop_assert!(((a - b) / a.abs().max(1e-12)).abs() < 1e-6);
        }

        #[test]
        fn weights_normalized(lw in proptest::collection::vec(-20.0f64..20.0, 1..10)) {
            let k = lw.len();
            let p = GmmParams::new(lw, vec![0.0; k], vec![1.0; k]).unwrap();
            let total: f64 = p.log_weights.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
