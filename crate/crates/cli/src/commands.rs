use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowar_core::checkpoint::{stored_version, VERSION_F64};
use flowar_core::data::{read_manifest, unpatchify_batch, write_ppm};
use flowar_core::distill::DISTILL_HEADER;
use flowar_core::eval::{evaluate, roundtrip as roundtrip_report};
use flowar_core::sampler::{generate, sample_latents};
use flowar_core::train::{datasets, CsvLog, LOGDET_HEADER, METRICS_HEADER};
use flowar_core::{
    ArConfig, ArModel, CfgConfig, Checkpoint, Flow, FlowConfig, Image, Inverter, Real, StudentFlow, TrainConfig,
    Trainer,
};

use crate::manifest::{content_hash, file_hash, RunManifest};
use crate::{Common, SamplingFlags};

const GRID_WIDTH: usize = 8;

fn apply_sets(cfg: &mut TrainConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

/// Defaults, then the config file, then `--set`, then explicit flags.
fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    apply_sets(&mut cfg, &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.f64 {
        cfg.f64 = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn checkpoint_is_f64(path: &Path, force: bool) -> Result<(bool, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let wide = force || stored_version(&bytes) == Some(VERSION_F64);
    Ok((wide, bytes))
}

/// Loads a trainer and applies `--set` overrides that leave the model
/// architecture unchanged.
fn load_trainer<T: Real>(bytes: &[u8], path: &Path, common: &Common) -> Result<Trainer<T>> {
    let ck = Checkpoint::<T>::decode(bytes).with_context(|| format!("loading {}", path.display()))?;
    let mut tr = Trainer::<T>::from_checkpoint(&ck).with_context(|| format!("loading {}", path.display()))?;
    let (flow, ar) = (tr.cfg.flow_config()?, tr.cfg.ar_config()?);
    if let Some(cpath) = &common.config {
        let text = std::fs::read_to_string(cpath).with_context(|| format!("reading config {}", cpath.display()))?;
        tr.cfg.apply_text(&text)?;
    }
    apply_sets(&mut tr.cfg, &common.set)?;
    tr.cfg.validate()?;
    if tr.cfg.flow_config()? != flow || tr.cfg.ar_config()? != ar {
        bail!("config overrides may not change the architecture stored in {}", path.display());
    }
    Ok(tr)
}

macro_rules! dispatch {
    ($wide:expr, $f:ident ( $($arg:expr),* )) => {
        if $wide { $f::<f64>($($arg),*) } else { $f::<f32>($($arg),*) }
    };
}

pub fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    match resume {
        Some(path) => {
            if common.config.is_some() || !common.set.is_empty() || common.seed.is_some() {
                bail!("--resume continues the stored run; --config, --set and --seed are not allowed");
            }
            let (wide, bytes) = checkpoint_is_f64(path, common.f64)?;
            dispatch!(wide, resume_train(&bytes, path, common))
        }
        None => {
            let cfg = load_config(common)?;
            dispatch!(cfg.f64, fresh_train(cfg, common))
        }
    }
}

fn fresh_train<T: Real>(cfg: TrainConfig, common: &Common) -> Result<()> {
    run_train(Trainer::<T>::new(cfg)?, common)
}

fn resume_train<T: Real>(bytes: &[u8], path: &Path, common: &Common) -> Result<()> {
    let tr = load_trainer::<T>(bytes, path, common)?;
    run_train(tr, common)
}

fn run_train<T: Real>(mut tr: Trainer<T>, common: &Common) -> Result<()> {
    let (train_set, _) = datasets(&tr.cfg)?;
    let out = &common.out_dir;
    create_out_dir(out)?;
    let mut manifest = RunManifest::start("train");
    manifest.config(&tr.cfg.to_text());
    manifest.field("seed", tr.cfg.seed);
    manifest.field("data_seed", tr.cfg.data_seed);
    manifest.field("start_step", tr.step);
    let mut metrics = CsvLog::open(&out.join("metrics.csv"), METRICS_HEADER)?;
    let mut logdets = CsvLog::open(&out.join("logdet.csv"), LOGDET_HEADER)?;
    let ckpt = out.join("checkpoint.farm");
    let (log_every, ckpt_every) = (tr.cfg.log_every.max(1), tr.cfg.checkpoint_every.max(1));
    let mut last = String::from("none");
    let started = Instant::now();
    while tr.step < tr.cfg.total_steps {
        let st = tr
            .train_step(&train_set)
            .with_context(|| format!("training failed at step {}; last logged metrics: {last}", tr.step + 1))?;
        if st.step % log_every == 0 {
            let row = st.csv_row();
            metrics.write(&row)?;
            logdets.write(&st.logdet_rows())?;
            eprintln!(
                "step {:>6}  loss {:.4}  bits/dim {:.4}  lr {:.2e}  |g| {:.3}  {:.1}s",
                st.step,
                st.parts.loss,
                st.parts.bits_per_dim(),
                st.lr,
                st.grad_norm,
                started.elapsed().as_secs_f64()
            );
            last = row;
        }
        if st.step % ckpt_every == 0 {
            tr.save(&ckpt)?;
        }
    }
    tr.save(&ckpt)?;
    manifest.field("final_step", tr.step);
    manifest.field("checkpoint_hash", file_hash(&ckpt)?);
    for a in ["checkpoint.farm", "metrics.csv", "logdet.csv"] {
        manifest.artifact(a);
    }
    manifest.write(out)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn sampling_config(base: &CfgConfig, f: &SamplingFlags) -> Result<CfgConfig> {
    let mut c = *base;
    if let Some(v) = f.w {
        c.w = v;
    }
    if let Some(v) = f.s_c {
        c.s_c = v;
    }
    if let Some(v) = f.s_u {
        c.s_u = v;
    }
    if let Some(v) = f.t_pi {
        c.t_pi = v;
    }
    if let Some(v) = f.t_sigma {
        c.t_sigma = v;
    }
    if let Some(v) = f.t_pi_v {
        c.t_pi_v = v;
    }
    if let Some(v) = f.t_sigma_v {
        c.t_sigma_v = v;
    }
    if let Some(v) = f.t_s {
        c.t_s = v;
    }
    if let Some(v) = f.redundant_mult {
        c.redundant_multiplier = v;
    }
    if let Some(v) = f.redundant_scale {
        c.redundant_scale = v;
    }
    c.validate()?;
    Ok(c)
}

/// Tiles images left to right, `GRID_WIDTH` per row; empty cells are black.
pub fn tile_grid(images: &[Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| anyhow!("no images to tile"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let cols = images.len().min(GRID_WIDTH);
    let rows = images.len().div_ceil(GRID_WIDTH);
    let mut grid = Image::zeros(rows * h, cols * w, c);
    for (k, img) in images.iter().enumerate() {
        let (gy, gx) = (k / GRID_WIDTH, k % GRID_WIDTH);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    grid.set(gy * h + y, gx * w + x, ch, img.at(y, x, ch));
                }
            }
        }
    }
    Ok(grid)
}

pub fn sample(
    common: &Common,
    ckpt: &Path,
    class: usize,
    count: usize,
    flags: &SamplingFlags,
    student: bool,
) -> Result<()> {
    let (wide, bytes) = checkpoint_is_f64(ckpt, common.f64)?;
    dispatch!(wide, run_sample(&bytes, ckpt, common, class, count, flags, student))
}

fn run_sample<T: Real>(
    bytes: &[u8],
    ckpt: &Path,
    common: &Common,
    class: usize,
    count: usize,
    flags: &SamplingFlags,
    use_student: bool,
) -> Result<()> {
    let tr = load_trainer::<T>(bytes, ckpt, common)?;
    let cfg = sampling_config(&tr.cfg.cfg, flags)?;
    if class >= tr.cfg.classes {
        bail!("class {class} outside the model's {} classes", tr.cfg.classes);
    }
    if count == 0 {
        bail!("--count must be positive");
    }
    let inverter = if use_student {
        Inverter::Student(
            tr.student
                .as_ref()
                .ok_or_else(|| anyhow!("{} has no distilled student; run `flowar distill` first", ckpt.display()))?,
        )
    } else {
        Inverter::Teacher(&tr.flow)
    };
    let geom = tr.cfg.geometry()?;
    let out = &common.out_dir;
    create_out_dir(out)?;
    let seed = common.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = vec![class; count];
    let tokens = generate(&tr.ar, &inverter, &labels, &cfg, &mut rng)?;
    // Log-determinant of the inverse map at each sample, measured through
    // the teacher's forward pass.
    let trace = tr.flow.flow_forward(&tokens)?;
    let images = unpatchify_batch(&tokens, &geom)?;
    let ext = if geom.channels == 1 { "pgm" } else { "ppm" };
    let mut manifest = RunManifest::start("sample");
    manifest.field("seed", seed);
    manifest.field("checkpoint_hash", content_hash(bytes));
    manifest.field("class", class);
    manifest.field("inverse", if use_student { "student" } else { "teacher" });
    manifest.field(
        "sampling",
        format!(
            "w={} s_c={} s_u={} t_pi={} t_sigma={} t_pi_v={} t_sigma_v={} t_s={} redundant_mult={} redundant_scale={}",
            cfg.w,
            cfg.s_c,
            cfg.s_u,
            cfg.t_pi,
            cfg.t_sigma,
            cfg.t_pi_v,
            cfg.t_sigma_v,
            cfg.t_s,
            cfg.redundant_multiplier,
            cfg.redundant_scale
        ),
    );
    let dims = geom.dims() as f64;
    for (i, img) in images.iter().enumerate() {
        let name = format!("sample_{i:04}.{ext}");
        write_ppm(&out.join(&name), img)?;
        let ld = -trace.logdet[i].as_f64();
        manifest.field(&format!("inverse_logdet.{i:04}"), format!("{ld:.6} ({:.6} per dim)", ld / dims));
        manifest.artifact(name);
    }
    let grid = format!("grid.{ext}");
    write_ppm(&out.join(&grid), &tile_grid(&images)?)?;
    manifest.artifact(grid);
    manifest.write(out)?;
    Ok(())
}

pub fn distill(common: &Common, ckpt: &Path, steps: Option<usize>) -> Result<()> {
    let (wide, bytes) = checkpoint_is_f64(ckpt, common.f64)?;
    dispatch!(wide, run_distill(&bytes, ckpt, common, steps))
}

fn teacher_hash<T: Real>(flow: &Flow<T>) -> Result<String> {
    let mut ck = Checkpoint::<T>::new();
    for (name, t) in flow.store().iter() {
        ck.push_tensor(name, t.clone());
    }
    Ok(content_hash(&ck.encode()?))
}

fn run_distill<T: Real>(bytes: &[u8], ckpt: &Path, common: &Common, steps: Option<usize>) -> Result<()> {
    let mut tr = load_trainer::<T>(bytes, ckpt, common)?;
    if let Some(s) = steps {
        tr.cfg.distill_steps = s;
    }
    if let Some(seed) = common.seed {
        tr.rng = ChaCha8Rng::seed_from_u64(seed);
    }
    let (train_set, _) = datasets(&tr.cfg)?;
    let out = &common.out_dir;
    create_out_dir(out)?;
    let before = teacher_hash(&tr.flow)?;
    let mut log = CsvLog::open(&out.join("distill.csv"), DISTILL_HEADER)?;
    let log_every = tr.cfg.log_every.max(1);
    tr.ensure_student();
    while tr.distill_step < tr.cfg.distill_steps {
        let st = tr
            .distill_step(&train_set)
            .with_context(|| format!("distillation failed at step {}", tr.distill_step + 1))?;
        if st.step % log_every == 0 {
            log.write(&st.csv_row())?;
            eprintln!("distill {:>6}  loss {:.6}", st.step, st.loss);
        }
    }
    let after = teacher_hash(&tr.flow)?;
    if before != after {
        bail!("teacher weights changed during distillation");
    }
    let path = out.join("distilled.farm");
    tr.save(&path)?;
    let mut manifest = RunManifest::start("distill");
    manifest.config(&tr.cfg.to_text());
    manifest.field("source_checkpoint_hash", content_hash(bytes));
    manifest.field("teacher_hash", after);
    manifest.field("checkpoint_hash", file_hash(&path)?);
    manifest.field("distill_steps", tr.distill_step);
    manifest.artifact("distilled.farm");
    manifest.artifact("distill.csv");
    manifest.write(out)?;
    println!("{}", path.display());
    Ok(())
}

fn eval_data(cfg: &TrainConfig, dir: Option<&Path>) -> Result<Vec<(Image, usize)>> {
    match dir {
        Some(d) => Ok(read_manifest(d)?),
        None => Ok(datasets(cfg)?.1),
    }
}

pub fn eval(common: &Common, ckpt: &Path, data_dir: Option<&Path>, batch: usize) -> Result<()> {
    let (wide, bytes) = checkpoint_is_f64(ckpt, common.f64)?;
    dispatch!(wide, run_eval(&bytes, ckpt, common, data_dir, batch))
}

fn run_eval<T: Real>(bytes: &[u8], ckpt: &Path, common: &Common, dir: Option<&Path>, batch: usize) -> Result<()> {
    let tr = load_trainer::<T>(bytes, ckpt, common)?;
    let (train_set, held_out) = datasets(&tr.cfg)?;
    let data = match dir {
        Some(_) => eval_data(&tr.cfg, dir)?,
        None => held_out,
    };
    let seed = common.seed.unwrap_or(0);
    let report = evaluate(&tr.flow, &tr.ar, &tr.cfg, &train_set, &data, tr.cfg.noise_end, seed, batch)?;
    let out = &common.out_dir;
    create_out_dir(out)?;
    let text = report.to_text();
    std::fs::write(out.join("eval.txt"), &text)?;
    print!("{text}");
    let mut manifest = RunManifest::start("eval");
    manifest.field("seed", seed);
    manifest.field("checkpoint_hash", content_hash(bytes));
    manifest.artifact("eval.txt");
    manifest.write(out)?;
    Ok(())
}

pub fn roundtrip(common: &Common, ckpt: &Path, data_dir: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let (wide, bytes) = checkpoint_is_f64(ckpt, common.f64)?;
    dispatch!(wide, run_roundtrip(&bytes, ckpt, common, data_dir, limit))
}

fn run_roundtrip<T: Real>(
    bytes: &[u8],
    ckpt: &Path,
    common: &Common,
    dir: Option<&Path>,
    limit: Option<usize>,
) -> Result<()> {
    let tr = load_trainer::<T>(bytes, ckpt, common)?;
    let mut data = eval_data(&tr.cfg, dir)?;
    if let Some(l) = limit {
        data.truncate(l);
    }
    let report = roundtrip_report(&tr.flow, tr.student.as_ref(), &data, &tr.cfg.geometry()?, 32)?;
    let out = &common.out_dir;
    create_out_dir(out)?;
    let text = report.to_text();
    std::fs::write(out.join("roundtrip.txt"), &text)?;
    print!("{text}");
    let mut manifest = RunManifest::start("roundtrip");
    manifest.field("checkpoint_hash", content_hash(bytes));
    manifest.artifact("roundtrip.txt");
    manifest.write(out)?;
    Ok(())
}

pub fn bench(common: &Common, ckpt: &Path, ns: &[usize], reps: usize) -> Result<()> {
    let (wide, bytes) = checkpoint_is_f64(ckpt, common.f64)?;
    dispatch!(wide, run_bench(&bytes, ckpt, common, ns, reps))
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

fn time_ms<R>(f: impl FnOnce() -> flowar_core::Result<R>) -> Result<f64> {
    let t0 = Instant::now();
    f()?;
    Ok(t0.elapsed().as_secs_f64() * 1e3)
}

pub const BENCH_HEADER: &str =
    "N,ar_ms,teacher_inv_ms,student_inv_ms,speedup,ar_sd_ms,teacher_inv_sd_ms,student_inv_sd_ms";

fn run_bench<T: Real>(bytes: &[u8], ckpt: &Path, common: &Common, ns: &[usize], reps: usize) -> Result<()> {
    let tr = load_trainer::<T>(bytes, ckpt, common)?;
    let student = tr
        .student
        .as_ref()
        .ok_or_else(|| anyhow!("{} has no distilled student; run `flowar distill` first", ckpt.display()))?;
    if reps < 2 || ns.is_empty() || ns.contains(&0) {
        bail!("bench needs at least 2 repetitions and positive sequence lengths");
    }
    let out = &common.out_dir;
    create_out_dir(out)?;
    let seed = common.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = format!("{BENCH_HEADER}\n");
    let trained_n = tr.cfg.flow_config()?.tokens;
    for &n in ns {
        // Other sequence lengths get freshly initialized models of the same
        // architecture; timing does not depend on the weight values.
        let fresh;
        let (flow, stu, ar): (&Flow<T>, &StudentFlow<T>, &ArModel<T>) = if n == trained_n {
            (&tr.flow, student, &tr.ar)
        } else {
            let fc = FlowConfig {
                tokens: n,
                ..tr.cfg.flow_config()?
            };
            let ac = ArConfig {
                tokens: n,
                ..tr.cfg.ar_config()?
            };
            let f = Flow::<T>::new(fc, &mut rng)?;
            let s = StudentFlow::from_teacher(&f);
            fresh = (f, s, ArModel::<T>::new(ac, &mut rng)?);
            (&fresh.0, &fresh.1, &fresh.2)
        };
        let (mut a, mut t, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..=reps {
            let mut z = None;
            let ar_ms = time_ms(|| {
                z = Some(sample_latents(ar, &[0], &tr.cfg.cfg, &mut rng)?);
                Ok(())
            })?;
            let z = ar.permute(&z.unwrap())?;
            let t_ms = time_ms(|| flow.flow_inverse(&z))?;
            let s_ms = time_ms(|| stu.student_invert(&z))?;
            // The first repetition warms caches and is discarded.
            if r > 0 {
                a.push(ar_ms);
                t.push(t_ms);
                s.push(s_ms);
            }
        }
        let ((am, asd), (tm, tsd), (sm, ssd)) = (mean_sd(&a), mean_sd(&t), mean_sd(&s));
        let row = format!("{n},{am:.4},{tm:.4},{sm:.4},{:.4},{asd:.4},{tsd:.4},{ssd:.4}\n", tm / sm);
        eprint!("{row}");
        csv += &row;
    }
    std::fs::write(out.join("bench.csv"), &csv)?;
    let mut manifest = RunManifest::start("bench");
    manifest.field("seed", seed);
    manifest.field("checkpoint_hash", content_hash(bytes));
    manifest.field("repetitions", reps);
    manifest.artifact("bench.csv");
    manifest.write(out)?;
    Ok(())
}
