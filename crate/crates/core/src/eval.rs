//! Held-out likelihood, the Gaussian baseline, round-trip checks and a
//! class-consistency proxy for samples.

use std::f64::consts::{LN_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ar::ArModel;
use crate::config::TrainConfig;
use crate::data::{patchify, patchify_batch, Image, PatchGeometry};
use crate::error::{Error, Result};
use crate::flow::{reverse_tokens, Flow, StudentFlow};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{prepare_batch, total_loss};

pub fn bits_per_dim(nats_per_dim: f64) -> f64 {
    nats_per_dim / LN_2
}

/// One independent Gaussian per token channel (`d` of them), fitted to clean
/// training tokens and pooled over token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBaseline {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianBaseline {
    pub fn fit(data: &[(Image, usize)], geom: &PatchGeometry) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("cannot fit a baseline to no data"));
        }
        let d = geom.token_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for (img, _) in data {
            let t = patchify::<f64>(img, geom)?;
            for row in t.data().chunks(d) {
                for j in 0..d {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                count += 1;
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
        Ok(GaussianBaseline { mean, var })
    }

    /// Expected NLL in nats/dim of `data` after adding `N(0, sigma^2)`
    /// noise, in closed form: the fitted variances are widened by `sigma^2`
    /// and the noise contributes `sigma^2 / (2 v)` per channel.
    pub fn expected_nll(&self, data: &[(Image, usize)], geom: &PatchGeometry, sigma: f64) -> Result<f64> {
        let d = geom.token_dim();
        if d != self.mean.len() {
            return Err(Error::invalid("baseline fitted to another geometry"));
        }
        let s2 = sigma * sigma;
        let v: Vec<f64> = self.var.iter().map(|v| v + s2).collect();
        if v.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("baseline needs positive variance; use sigma > 0"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (img, _) in data {
            let t = patchify::<f64>(img, geom)?;
            for row in t.data().chunks(d) {
                for j in 0..d {
                    let e = row[j] - self.mean[j];
                    total += 0.5 * (2.0 * PI * v[j]).ln() + (e * e + s2) / (2.0 * v[j]);
                }
                count += d;
            }
        }
        Ok(total / count as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub items: usize,
    pub sigma: f64,
    pub nats_per_dim: f64,
    pub baseline_nats_per_dim: f64,
}

impl EvalReport {
    pub fn bits_per_dim(&self) -> f64 {
        bits_per_dim(self.nats_per_dim)
    }

    pub fn baseline_bits_per_dim(&self) -> f64 {
        bits_per_dim(self.baseline_nats_per_dim)
    }

    pub fn to_text(&self) -> String {
        format!(
            "items = {}\nnoise_sigma = {}\nnll_nats_per_dim = {:.6}\nbits_per_dim = {:.6}\n\
             baseline_nats_per_dim = {:.6}\nbaseline_bits_per_dim = {:.6}\n\
             note = continuous density of dequantized data, no discretization correction\n",
            self.items,
            self.sigma,
            self.nats_per_dim,
            self.bits_per_dim(),
            self.baseline_nats_per_dim,
            self.baseline_bits_per_dim()
        )
    }
}

/// Class-conditional held-out NLL with dequantization noise `sigma` drawn
/// from a fixed `seed`, next to the baseline fitted on `train`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    flow: &Flow<T>,
    ar: &ArModel<T>,
    cfg: &TrainConfig,
    train: &[(Image, usize)],
    data: &[(Image, usize)],
    sigma: f64,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("evaluation needs data and a positive batch size"));
    }
    let geom = cfg.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in data.chunks(batch) {
        let imgs: Vec<&Image> = chunk.iter().map(|(i, _)| i).collect();
        let labels: Vec<Option<usize>> = chunk.iter().map(|(_, l)| Some(*l)).collect();
        let x = prepare_batch::<T, _>(&imgs, cfg, sigma, &mut rng)?;
        total += total_loss(flow, ar, &x, &labels)?.loss * chunk.len() as f64;
    }
    let baseline = GaussianBaseline::fit(train, &geom)?;
    Ok(EvalReport {
        items: data.len(),
        sigma,
        nats_per_dim: total / data.len() as f64,
        baseline_nats_per_dim: baseline.expected_nll(data, &geom, sigma)?,
    })
}

/// Largest per-block inverse error and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWorst {
    pub block: usize,
    pub max_err: f64,
    /// Token position in the original order.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundtripReport {
    pub items: usize,
    pub teacher_max: f64,
    pub teacher_mean: f64,
    pub blocks: Vec<BlockWorst>,
    /// `(max, mean)` of `|G(F(x)) - x|` when a student is present.
    pub student: Option<(f64, f64)>,
}

impl RoundtripReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "items = {}\nteacher_max_abs_err = {:.3e}\nteacher_mean_abs_err = {:.3e}\n",
            self.items, self.teacher_max, self.teacher_mean
        );
        for b in &self.blocks {
            s += &format!(
                "block{}_max_abs_err = {:.3e}\nblock{}_worst_position = {}\n",
                b.block, b.max_err, b.block, b.position
            );
        }
        if let Some((m, a)) = self.student {
            s += &format!("student_max_abs_err = {m:.3e}\nstudent_mean_abs_err = {a:.3e}\n");
        }
        s
    }
}

fn err_stats<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> (f64, f64, usize) {
    let mut max = 0.0;
    let mut at = 0;
    let mut sum = 0.0;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let e = (x.as_f64() - y.as_f64()).abs();
        sum += e;
        if e > max || e.is_nan() {
            max = e;
            at = i;
        }
    }
    (max, sum, at)
}

/// Reconstruction errors of the clean images under the teacher inverse,
/// each block separately, and the student if given.
pub fn roundtrip<T: Real>(
    flow: &Flow<T>,
    student: Option<&StudentFlow<T>>,
    data: &[(Image, usize)],
    geom: &PatchGeometry,
    batch: usize,
) -> Result<RoundtripReport> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("roundtrip needs data and a positive batch size"));
    }
    let n = geom.tokens();
    let d = geom.token_dim();
    let nb = flow.blocks().len();
    let mut blocks: Vec<BlockWorst> = (0..nb)
        .map(|block| BlockWorst {
            block,
            max_err: 0.0,
            position: 0,
        })
        .collect();
    let (mut tmax, mut tsum) = (0.0f64, 0.0);
    let mut student_acc = student.map(|_| (0.0f64, 0.0));
    for chunk in data.chunks(batch) {
        let imgs: Vec<&Image> = chunk.iter().map(|(i, _)| i).collect();
        let x = patchify_batch::<T>(&imgs, geom)?;
        let tr = flow.flow_forward(&x)?;
        let back = flow.flow_inverse(tr.latent())?;
        let (m, s, _) = err_stats(&back, &x);
        tmax = tmax.max(m);
        tsum += s;
        for (t, bw) in blocks.iter_mut().enumerate() {
            let zr = reverse_tokens(&tr.states[t], n)?;
            let yr = reverse_tokens(&tr.states[t + 1], n)?;
            let inv = flow.block_inverse(t, &yr)?;
            let (m, _, at) = err_stats(&inv, &zr);
            if m > bw.max_err || m.is_nan() {
                bw.max_err = m;
                // Undo the reversal to report the original position.
                bw.position = n - 1 - (at / d) % n;
            }
        }
        if let (Some(st), Some(acc)) = (student, student_acc.as_mut()) {
            let g = st.student_invert(tr.latent())?;
            let (m, s, _) = err_stats(&g, &x);
            acc.0 = acc.0.max(m);
            acc.1 += s;
        }
    }
    let total = (data.len() * n * d) as f64;
    Ok(RoundtripReport {
        items: data.len(),
        teacher_max: tmax,
        teacher_mean: tsum / total,
        blocks,
        student: student_acc.map(|(m, s)| (m, s / total)),
    })
}

/// Per-class mean images of `data`.
pub fn class_centroids(data: &[(Image, usize)], classes: usize) -> Result<Vec<Image>> {
    let first = &data.first().ok_or_else(|| Error::invalid("no data for centroids"))?.0;
    let mut sums = vec![vec![0.0; first.pixels.len()]; classes];
    let mut counts = vec![0usize; classes];
    for (img, l) in data {
        if *l >= classes || img.pixels.len() != first.pixels.len() {
            return Err(Error::invalid("label or image size inconsistent with centroid layout"));
        }
        sums[*l].iter_mut().zip(&img.pixels).for_each(|(s, p)| *s += p);
        counts[*l] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                return Err(Error::invalid(format!("class {c} has no examples")));
            }
            Image::new(first.height, first.width, first.channels, s.iter().map(|v| v / n as f64).collect())
        })
        .collect()
}

pub fn nearest_centroid(img: &Image, centroids: &[Image]) -> usize {
    let dist = |c: &Image| -> f64 {
        img.pixels.iter().zip(&c.pixels).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    (0..centroids.len())
        .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
        .unwrap_or(0)
}

/// Fraction of `(sample, requested class)` pairs whose nearest centroid is
/// the requested class.
pub fn class_match_rate(samples: &[(Image, usize)], centroids: &[Image]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples.iter().filter(|(img, l)| nearest_centroid(img, centroids) == *l).count();
    hits as f64 / samples.len() as f64
}
