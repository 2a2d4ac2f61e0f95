//! One-step distillation of the flow inverse into a bidirectional student.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::flow::{Flow, StudentFlow};
use crate::graph::{Graph, Var};
use crate::nn::Binder;
use crate::real::{c, Real};
use crate::tensor::Tensor;
use crate::train::{adamw_step, prepare_batch, AdamHyper, AdamState, Trainer};

pub const DISTILL_HEADER: &str = "step,distill_loss,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct DistillStats {
    pub step: usize,
    pub loss: f64,
    /// Mean squared error of each cascade output, in cascade order (teacher
    /// block `n - 1` first).
    pub block_losses: Vec<f64>,
    pub lr: f64,
}

impl DistillStats {
    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.6e}", self.step, self.loss, self.lr)
    }
}

/// Cascade loss `(1/n) Σ_t mse(student output t, teacher state)`, where the
/// cascade starts from the teacher latent plus `scales[b] * eps`. Returns the
/// loss node and the per-block terms.
pub fn distill_loss_graph<T: Real>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    teacher: &Flow<T>,
    student: &StudentFlow<T>,
    x: &Tensor<T>,
    scales: &[f64],
    eps: &Tensor<T>,
) -> Result<(Var, Vec<Var>)> {
    let n = teacher.config().tokens;
    let blocks = teacher.blocks().len();
    if blocks == 0 {
        return Err(Error::invalid("distillation needs at least one flow block"));
    }
    if scales.len() * n != x.rows() || eps.shape() != x.shape() {
        return Err(Error::shape(
            "distill_loss_graph",
            format!("{} scales, x {:?}, eps {:?}", scales.len(), x.shape(), eps.shape()),
        ));
    }
    let trace = teacher.flow_forward(x)?;
    let mut noisy = trace.latent().clone();
    let d = x.cols();
    for (b, &s) in scales.iter().enumerate() {
        let s: T = c(s);
        let rows = b * n * d..(b + 1) * n * d;
        for (z, &e) in noisy.data_mut()[rows.clone()].iter_mut().zip(&eps.data()[rows]) {
            *z = *z + s * e;
        }
    }
    let z = g.constant(noisy);
    let outs = student.cascade_graph(g, p, z)?;
    let inv_numel: T = c(1.0 / x.numel() as f64);
    let mut terms = Vec::with_capacity(blocks);
    for (k, &out) in outs.iter().enumerate() {
        let target = g.constant(trace.states[blocks - 1 - k].clone());
        let diff = g.sub(out, target)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        terms.push(g.scale(s, inv_numel));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, c(1.0 / blocks as f64));
    Ok((loss, terms))
}

/// One AdamW update of the student on prepared inputs `x`. The teacher is
/// only read.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<T: Real, R: Rng + ?Sized>(
    teacher: &Flow<T>,
    student: &mut StudentFlow<T>,
    opt: &mut AdamState<T>,
    x: &Tensor<T>,
    noise_max: f64,
    lr: f64,
    hp: &AdamHyper,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let n = teacher.config().tokens;
    let batch = x.rows() / n.max(1);
    let scales: Vec<f64> = (0..batch).map(|_| rng.random::<f64>() * noise_max).collect();
    let eps = Tensor::new(
        x.shape(),
        (0..x.numel())
            .map(|_| T::from_f64(StandardNormal.sample(rng)))
            .collect(),
    )?;
    let mut g = Graph::new();
    let mut p = Binder::new(student.store(), true);
    let (loss, terms) = distill_loss_graph(&mut g, &mut p, teacher, student, x, &scales, &eps)?;
    let block_losses: Vec<f64> = terms.iter().map(|&t| g.value(t).item().as_f64()).collect();
    if let Some(k) = block_losses.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "distillation loss".into(),
            block: Some(teacher.blocks().len() - 1 - k),
            position: None,
        });
    }
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let gs = p.gradients(&grads);
    drop(grads);
    drop(g);
    adamw_step(student.store_mut().values_mut(), &gs, opt, lr, hp)?;
    Ok((value, block_losses))
}

impl<T: Real> Trainer<T> {
    /// Creates the student from the current teacher if there is none yet.
    pub fn ensure_student(&mut self) {
        if self.student.is_none() {
            let s = StudentFlow::from_teacher(&self.flow);
            self.opt_student = Some(AdamState::new(s.store()));
            self.student = Some(s);
            self.distill_step = 0;
        }
    }

    /// One distillation update on a batch from `data`, dequantized at the
    /// final training noise level.
    pub fn distill_step(&mut self, data: &[(Image, usize)]) -> Result<DistillStats> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        self.ensure_student();
        let cfg = &self.cfg;
        let rng = &mut self.rng;
        let picks: Vec<&Image> = (0..cfg.distill_batch)
            .map(|_| &data[rng.random_range(0..data.len())].0)
            .collect();
        let x = prepare_batch::<T, _>(&picks, cfg, cfg.noise_end, rng)?;
        let hp = AdamHyper::from_config(cfg);
        let (student, opt) = match (&mut self.student, &mut self.opt_student) {
            (Some(s), Some(o)) => (s, o),
            _ => unreachable!("student created above"),
        };
        let (loss, block_losses) = distill_step(
            &self.flow,
            student,
            opt,
            &x,
            cfg.distill_noise_max,
            cfg.distill_lr,
            &hp,
            rng,
        )?;
        self.distill_step += 1;
        Ok(DistillStats {
            step: self.distill_step,
            loss,
            block_losses,
            lr: self.cfg.distill_lr,
        })
    }
}
