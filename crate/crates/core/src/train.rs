//! Joint maximum-likelihood training of the flow and the autoregressive
//! model.

use std::f64::consts::{LN_2, PI};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ar::ArModel;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{dequantize, noise_sigma, patchify_batch, read_manifest, synth_dataset, Image};
use crate::error::{Error, Result};
use crate::flow::{Flow, StudentFlow};
use crate::graph::{Graph, Var};
use crate::nn::{Binder, ParamStore};
use crate::real::{c, Real};
use crate::tensor::Tensor;

pub type Dataset = Vec<(Image, usize)>;

/// Training and held-out sets described by the config.
pub fn datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    if let Some(dir) = &cfg.data_dir {
        let mut all = read_manifest(dir)?;
        if all.len() <= cfg.eval_size {
            return Err(Error::Config {
                key: "eval_size".into(),
                msg: format!("{} images in {} cannot hold out {}", all.len(), dir.display(), cfg.eval_size),
            });
        }
        let geom = cfg.geometry()?;
        if let Some((img, _)) = all.iter().find(|(img, _)| {
            img.height != geom.height || img.width != geom.width || img.channels != geom.channels
        }) {
            return Err(Error::invalid(format!(
                "dataset image is {}x{}x{}, config expects {}x{}x{}",
                img.height, img.width, img.channels, geom.height, geom.width, geom.channels
            )));
        }
        if let Some((_, l)) = all.iter().find(|(_, l)| *l >= cfg.classes) {
            return Err(Error::invalid(format!("label {l} outside {} classes", cfg.classes)));
        }
        let eval = all.split_off(all.len() - cfg.eval_size);
        return Ok((all, eval));
    }
    let s = cfg.image_size;
    let train = synth_dataset(cfg.dataset, cfg.classes, cfg.train_size, cfg.data_seed, s, s, cfg.channels)?;
    let eval = synth_dataset(
        cfg.dataset,
        cfg.classes,
        cfg.eval_size,
        cfg.data_seed ^ 0x9E37_79B9_7F4A_7C15,
        s,
        s,
        cfg.channels,
    )?;
    Ok((train, eval))
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let (total, warm) = (cfg.total_steps, cfg.warmup_steps);
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond {total} total steps")));
    }
    if step < warm {
        return Ok(cfg.lr_max * step as f64 / warm as f64);
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamHyper {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// AdamW with bias correction; weight decay `θ -= lr·wd·θ` is applied to the
/// pre-update parameters, separately from the moment step.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("parameter, gradient and moment counts differ"));
    }
    state.t += 1;
    let (b1, b2): (T, T) = (c(hp.beta1), c(hp.beta2));
    let one = T::one();
    let bc1: T = c(1.0 - hp.beta1.powi(state.t as i32));
    let bc2: T = c(1.0 - hp.beta2.powi(state.t as i32));
    let lr_t: T = c(lr);
    let decay: T = c(1.0 - lr * hp.weight_decay);
    let eps: T = c(hp.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adamw_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi = *pi * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm<T: Real>(groups: &[&[Tensor<T>]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(groups: &mut [&mut [Tensor<T>]], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&[Tensor<T>]> = groups.iter().map(|g| &**g).collect();
        global_norm(&views)
    };
    if norm > max_norm && norm.is_finite() {
        let s: T = c(max_norm / norm);
        for g in groups.iter_mut() {
            for t in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

/// Loss terms as graph nodes. All are per-dimension means over the batch.
pub struct LossGraph {
    pub loss: Var,
    pub nll_inf: Var,
    pub nll_red: Var,
    pub neg_logdet: Var,
    /// `[B, 1]` per-item flow log-determinants (not normalized).
    pub logdet_items: Var,
}

/// `-(ll_inf + ll_red + logdet) / (N d)`, averaged over the batch. `x` is
/// `[B*N, d]` in flow input space.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    pf: &mut Binder<T>,
    pa: &mut Binder<T>,
    flow: &Flow<T>,
    ar: &ArModel<T>,
    x: Var,
    labels: &[Option<usize>],
    stop_grad: bool,
) -> Result<LossGraph> {
    let fcfg = flow.config();
    let b = labels.len();
    let norm = (b * fcfg.tokens * fcfg.token_dim) as f64;
    let out = flow.forward_graph(g, pf, x)?;
    let z = if stop_grad { g.detach(out.latent) } else { out.latent };
    let z = ar.permute_graph(g, z)?;
    let ll = ar.log_lik_graph(g, pa, z, labels)?;
    let scale: T = c(-1.0 / norm);
    let si = g.sum(ll.ll_informative);
    let nll_inf = g.scale(si, scale);
    let sr = g.sum(ll.ll_redundant);
    let nll_red = g.scale(sr, scale);
    let sl = g.sum(out.logdet);
    let neg_logdet = g.scale(sl, scale);
    let partial = g.add(nll_inf, nll_red)?;
    let loss = g.add(partial, neg_logdet)?;
    Ok(LossGraph {
        loss,
        nll_inf,
        nll_red,
        neg_logdet,
        logdet_items: out.logdet,
    })
}

/// Per-dimension loss and its parts; `loss = nll_inf + nll_red + neg_logdet`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub nll_inf: f64,
    pub nll_red: f64,
    pub neg_logdet: f64,
}

impl LossParts {
    fn read<T: Real>(g: &Graph<T>, lg: &LossGraph) -> Result<Self> {
        let parts = LossParts {
            loss: g.value(lg.loss).item().as_f64(),
            nll_inf: g.value(lg.nll_inf).item().as_f64(),
            nll_red: g.value(lg.nll_red).item().as_f64(),
            neg_logdet: g.value(lg.neg_logdet).item().as_f64(),
        };
        for (name, v) in [
            ("informative NLL", parts.nll_inf),
            ("redundant NLL", parts.nll_red),
            ("flow log-determinant", parts.neg_logdet),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("loss ({name})"),
                    block: None,
                    position: None,
                });
            }
        }
        Ok(parts)
    }

    pub fn bits_per_dim(&self) -> f64 {
        self.loss / LN_2
    }
}

/// Loss without gradients on already prepared inputs `x` (`[B*N, d]`).
pub fn total_loss<T: Real>(flow: &Flow<T>, ar: &ArModel<T>, x: &Tensor<T>, labels: &[Option<usize>]) -> Result<LossParts> {
    let mut g = Graph::new();
    let mut pf = Binder::new(flow.store(), false);
    let mut pa = Binder::new(ar.store(), false);
    let xv = g.constant(x.clone());
    let lg = loss_graph(&mut g, &mut pf, &mut pa, flow, ar, xv, labels, false)?;
    LossParts::read(&g, &lg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Number of completed updates including this one.
    pub step: usize,
    pub parts: LossParts,
    pub lr: f64,
    pub sigma_noise: f64,
    pub grad_norm: f64,
    /// Per-item flow log-determinant divided by `N d`.
    pub logdet_per_dim: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

pub const METRICS_HEADER: &str = "step,loss,nll_inf,nll_red,logdet,bits_per_dim,lr,sigma_noise,grad_norm";
pub const LOGDET_HEADER: &str = "step,item,label,logdet_per_dim";

impl StepStats {
    /// Metrics row; the `logdet` column is the per-dimension log-determinant
    /// (the negative of the loss part).
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6e},{:.6},{:.6}",
            self.step,
            p.loss,
            p.nll_inf,
            p.nll_red,
            -p.neg_logdet,
            p.bits_per_dim(),
            self.lr,
            self.sigma_noise,
            self.grad_norm
        )
    }

    pub fn logdet_rows(&self) -> String {
        self.logdet_per_dim
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (l, lab))| {
                let lab = lab.map(|v| v.to_string()).unwrap_or_else(|| "null".into());
                format!("{},{i},{lab},{l:.8}\n", self.step)
            })
            .collect()
    }
}

/// Appends rows to a CSV, writing `header` when the file is new.
pub struct CsvLog {
    file: std::fs::File,
}

impl CsvLog {
    pub fn open(path: &Path, header: &str) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(CsvLog { file })
    }

    pub fn write(&mut self, rows: &str) -> Result<()> {
        self.file
            .write_all(rows.as_bytes())
            .and_then(|_| if rows.ends_with('\n') { Ok(()) } else { self.file.write_all(b"\n") })
            .map_err(|e| Error::io("metrics csv", e))
    }
}

/// Prepares a batch: dequantization noise then patchify.
pub fn prepare_batch<T: Real, R: Rng + ?Sized>(
    images: &[&Image],
    cfg: &TrainConfig,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let geom = cfg.geometry()?;
    let noisy = images
        .iter()
        .map(|img| dequantize(img, sigma, rng))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = noisy.iter().collect();
    patchify_batch(&refs, &geom)
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u32> {
    let mut w: Vec<u32> = rng
        .get_seed()
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let stream = rng.get_stream();
    w.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    w.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    w
}

fn rng_from_words(w: &[u32]) -> Result<ChaCha8Rng> {
    if w.len() != 14 {
        return Err(Error::Checkpoint("rng state must hold 14 words".into()));
    }
    let mut seed = [0u8; 32];
    for (i, word) in w[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[8] as u64 | (w[9] as u64) << 32);
    let pos = w[10..].iter().enumerate().fold(0u128, |acc, (i, &x)| acc | (x as u128) << (32 * i));
    rng.set_word_pos(pos);
    Ok(rng)
}

fn push_store<T: Real>(ck: &mut Checkpoint<T>, store: &ParamStore<T>, prefix: &str) {
    for (name, t) in store.iter() {
        ck.push_tensor(format!("{prefix}{name}"), t.clone());
    }
}

fn push_adam<T: Real>(ck: &mut Checkpoint<T>, store: &ParamStore<T>, opt: &AdamState<T>, tag: &str) {
    for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
        ck.push_tensor(format!("opt.m.{tag}{name}"), m.clone());
        ck.push_tensor(format!("opt.v.{tag}{name}"), v.clone());
    }
    ck.push_u64(format!("meta.opt_t.{tag}"), opt.t);
}

fn load_into<T: Real>(ck: &Checkpoint<T>, name: &str, dst: &mut Tensor<T>, used: &mut Vec<String>) -> Result<()> {
    let src = ck.tensor(name)?;
    if src.shape() != dst.shape() {
        return Err(Error::Checkpoint(format!(
            "{name} has shape {:?}, model expects {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    *dst = src.clone();
    used.push(name.to_string());
    Ok(())
}

fn load_store<T: Real>(ck: &Checkpoint<T>, store: &mut ParamStore<T>, prefix: &str, used: &mut Vec<String>) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("{prefix}{}", store.name(id));
        load_into(ck, &name, store.get_mut(id), used)?;
    }
    Ok(())
}

fn load_adam<T: Real>(
    ck: &Checkpoint<T>,
    store: &ParamStore<T>,
    tag: &str,
    used: &mut Vec<String>,
) -> Result<AdamState<T>> {
    let mut opt = AdamState::new(store);
    for (i, (name, _)) in store.iter().enumerate() {
        load_into(ck, &format!("opt.m.{tag}{name}"), &mut opt.m[i], used)?;
        load_into(ck, &format!("opt.v.{tag}{name}"), &mut opt.v[i], used)?;
    }
    let key = format!("meta.opt_t.{tag}");
    opt.t = ck.u64(&key)?;
    used.push(key);
    Ok(opt)
}

/// All mutable training state: models, optimizer moments, counters, rng.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub flow: Flow<T>,
    pub ar: ArModel<T>,
    pub opt_flow: AdamState<T>,
    pub opt_ar: AdamState<T>,
    pub student: Option<StudentFlow<T>>,
    pub opt_student: Option<AdamState<T>>,
    pub step: usize,
    pub distill_step: usize,
    pub rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let flow = Flow::new(cfg.flow_config()?, &mut rng)?;
        let ar = ArModel::new(cfg.ar_config()?, &mut rng)?;
        Ok(Trainer {
            opt_flow: AdamState::new(flow.store()),
            opt_ar: AdamState::new(ar.store()),
            cfg,
            flow,
            ar,
            student: None,
            opt_student: None,
            step: 0,
            distill_step: 0,
            rng,
        })
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper::from_config(&self.cfg)
    }

    /// One optimizer update on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[(Image, usize)]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if self.step >= self.cfg.total_steps {
            return Err(Error::invalid(format!("training already finished ({} steps)", self.step)));
        }
        let cfg = &self.cfg;
        let sigma = noise_sigma(self.step, &cfg.noise_schedule())?;
        let lr = lr_at(self.step + 1, cfg)?;
        let rng = &mut self.rng;
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let labels: Vec<Option<usize>> = picks
            .iter()
            .map(|&i| {
                let drop = rng.random::<f64>() < cfg.cond_dropout;
                (!drop).then_some(data[i].1)
            })
            .collect();
        let images: Vec<&Image> = picks.iter().map(|&i| &data[i].0).collect();
        let x = prepare_batch::<T, _>(&images, cfg, sigma, rng)?;

        let mut g = Graph::new();
        let mut pf = Binder::new(self.flow.store(), true);
        let mut pa = Binder::new(self.ar.store(), true);
        let xv = g.constant(x);
        let lg = loss_graph(&mut g, &mut pf, &mut pa, &self.flow, &self.ar, xv, &labels, cfg.stop_grad)?;
        let parts = LossParts::read(&g, &lg)?;
        let norm = (self.flow.config().tokens * self.flow.config().token_dim) as f64;
        let logdet_per_dim = g.value(lg.logdet_items).data().iter().map(|v| v.as_f64() / norm).collect();
        let grads = g.backward(lg.loss)?;
        let mut gf = pf.gradients(&grads);
        let mut ga = pa.gradients(&grads);
        drop(grads);
        drop(g);
        let grad_norm = clip_global_norm(&mut [&mut gf[..], &mut ga[..]], cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                stage: "gradient".into(),
                block: None,
                position: None,
            });
        }
        let hp = self.hyper();
        adamw_step(self.flow.store_mut().values_mut(), &gf, &mut self.opt_flow, lr, &hp)?;
        adamw_step(self.ar.store_mut().values_mut(), &ga, &mut self.opt_ar, lr, &hp)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            parts,
            lr,
            sigma_noise: sigma,
            grad_norm,
            logdet_per_dim,
            labels,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.push_bytes("meta.config", self.cfg.to_text().as_bytes());
        ck.push_u64("meta.step", self.step as u64);
        ck.push_u64("meta.distill_step", self.distill_step as u64);
        ck.push_words("meta.rng", rng_words(&self.rng));
        push_store(&mut ck, self.flow.store(), "");
        push_store(&mut ck, self.ar.store(), "");
        push_adam(&mut ck, self.flow.store(), &self.opt_flow, "");
        push_adam(&mut ck, self.ar.store(), &self.opt_ar, "ar_");
        if let (Some(s), Some(o)) = (&self.student, &self.opt_student) {
            push_store(&mut ck, s.store(), "student.");
            push_adam(&mut ck, s.store(), o, "student.");
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds the full state; every entry of the archive must be consumed.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let text = String::from_utf8(ck.bytes("meta.config")?)
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let cfg = TrainConfig::from_text(&text)?;
        let mut tr = Trainer::new(cfg)?;
        let mut used: Vec<String> = ["meta.config", "meta.step", "meta.distill_step", "meta.rng"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tr.step = ck.u64("meta.step")? as usize;
        tr.distill_step = ck.u64("meta.distill_step")? as usize;
        tr.rng = rng_from_words(ck.words("meta.rng")?)?;
        load_store(ck, tr.flow.store_mut(), "", &mut used)?;
        load_store(ck, tr.ar.store_mut(), "", &mut used)?;
        tr.opt_flow = load_adam(ck, tr.flow.store(), "", &mut used)?;
        tr.opt_ar = load_adam(ck, tr.ar.store(), "ar_", &mut used)?;
        if ck.get("meta.opt_t.student.").is_some() {
            let mut student = StudentFlow::from_teacher(&tr.flow);
            load_store(ck, student.store_mut(), "student.", &mut used)?;
            tr.opt_student = Some(load_adam(ck, student.store(), "student.", &mut used)?);
            tr.student = Some(student);
        }
        if let Some((name, _)) = ck.entries.iter().find(|(n, _)| !used.contains(n)) {
            return Err(Error::Checkpoint(format!("unknown tensor name {name}")));
        }
        Ok(tr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig::from_text(
            "image_size = 4\nchannels = 1\npatch = 2\nflow_blocks = 1\nflow_width = 8\nflow_heads = 2\n\
             ar_width = 8\nar_layers = 1\nar_heads = 2\ninformative_dim = 2\nk_inf = 2\nk_red = 2\n\
             cond_repeat = 2\ntotal_steps = 30\nwarmup_steps = 3\nbatch_size = 4\ntrain_size = 16\neval_size = 4\n\
             classes = 2\nlr_max = 1e-3\nf64 = true\n",
        )
        .unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg).unwrap(), 1e-4);
        assert!((lr_at(cfg.total_steps, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        assert!((lr_at(250, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(cfg.total_steps + 1, &cfg).is_err());
    }

    #[test]
    fn adamw_hand_cases() {
        let hp = AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let p0 = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut p = vec![p0.clone()];
        let mut st = AdamState { m: vec![Tensor::zeros(&[3])], v: vec![Tensor::zeros(&[3])], t: 0 };
        adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 1e-4, &hp).unwrap();
        assert_eq!(p[0], p0);

        let hp = AdamHyper { weight_decay: 0.03, ..hp };
        let mut p = vec![p0.clone()];
        adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 1e-4, &hp).unwrap();
        for (a, b) in p[0].data().iter().zip(p0.data()) {
            assert!((a - b * (1.0 - 3e-6)).abs() < 1e-15);
        }

        // One step from zero state with g = 1: m̂ = v̂ = 1.
        let mut p = vec![Tensor::new(&[1], vec![0.7]).unwrap()];
        let mut st = AdamState { m: vec![Tensor::zeros(&[1])], v: vec![Tensor::zeros(&[1])], t: 0 };
        let lr = 1e-3;
        adamw_step(&mut p, &[Tensor::new(&[1], vec![1.0]).unwrap()], &mut st, lr, &hp).unwrap();
        let m = 0.1;
        let v = 0.05;
        let want = 0.7 - lr * 0.03 * 0.7 - lr * (m / 0.1) / ((v / 0.05f64).sqrt() + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = vec![Tensor::new(&[2], vec![3.0f64, 0.0]).unwrap()];
        let mut b = vec![Tensor::new(&[1], vec![4.0f64]).unwrap()];
        let n = clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&[&a[..], &b[..]]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_model_at_zero_input_costs_half_log_two_pi() {
        let mut cfg = tiny_cfg();
        cfg.set("redundant_prior", "standard_normal").unwrap();
        cfg.set("k_inf", "1").unwrap();
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        // Informative head: zero weights and bias gives mu = 0, sigma = 1 + floor.
        let (head, _) = tr.ar.head_ids();
        let (w, b) = (head.w, head.b);
        tr.ar.store_mut().get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        tr.ar.store_mut().get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::zeros(&[4, 4]);
        let parts = total_loss(&tr.flow, &tr.ar, &x, &[Some(0)]).unwrap();
        let sigma = 1.0 + crate::gmm::SCALE_FLOOR;
        let want = 0.5 * (2.0 * PI).ln() + 0.5 * sigma.ln(); // two of four channels have the floored scale
        assert!((parts.loss - want).abs() < 1e-12, "{} vs {want}", parts.loss);
        assert!((parts.loss - (parts.nll_inf + parts.nll_red + parts.neg_logdet)).abs() < 1e-15);
        assert_eq!(parts.neg_logdet, 0.0);
    }

    #[test]
    fn resume_is_bit_exact() {
        let cfg = tiny_cfg();
        let (train, _) = datasets(&cfg).unwrap();
        let mut a = Trainer::<f64>::new(cfg.clone()).unwrap();
        for _ in 0..10 {
            a.train_step(&train).unwrap();
        }
        let bytes = a.to_checkpoint().encode().unwrap();
        let mut b = Trainer::<f64>::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(b.to_checkpoint().encode().unwrap(), bytes);
        for _ in 0..10 {
            let la = a.train_step(&train).unwrap();
            let lb = b.train_step(&train).unwrap();
            assert_eq!(la.parts.loss.to_bits(), lb.parts.loss.to_bits());
        }
        assert_eq!(a.to_checkpoint().encode().unwrap(), b.to_checkpoint().encode().unwrap());
    }

    #[test]
    fn unknown_checkpoint_entry_is_rejected() {
        let tr = Trainer::<f64>::new(tiny_cfg()).unwrap();
        let mut ck = tr.to_checkpoint();
        ck.push_tensor("mystery", Tensor::zeros(&[1]));
        match Trainer::from_checkpoint(&ck) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("mystery")),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn dropout_extremes_select_embedding_rows() {
        for (rate, null_row) in [("0", false), ("1", true)] {
            let mut cfg = tiny_cfg();
            cfg.set("cond_dropout", rate).unwrap();
            let (train, _) = datasets(&cfg).unwrap();
            let mut tr = Trainer::<f64>::new(cfg).unwrap();
            let before = tr.ar.store().get(tr.ar.condition_id()).clone();
            let st = tr.train_step(&train).unwrap();
            assert!(st.labels.iter().all(|l| l.is_none() == null_row));
            let after = tr.ar.store().get(tr.ar.condition_id());
            let classes = tr.cfg.classes;
            // Weight decay touches every row; only rows that received a
            // gradient move by more than the decay factor.
            let moved = |r: usize| {
                before
                    .row(r)
                    .iter()
                    .zip(after.row(r))
                    .any(|(a, b)| (a * (1.0 - st.lr * 0.03) - b).abs() > 1e-12)
            };
            assert_eq!(moved(classes), null_row);
            assert_eq!((0..classes).any(moved), !null_row);
        }
    }
}
