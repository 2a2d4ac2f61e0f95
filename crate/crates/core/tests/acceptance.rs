//! End-to-end acceptance checks. Every criterion runs at its stated
//! tolerance and reports one PASS/FAIL line on stderr (written past the
//! test harness capture so it always shows). Long training runs are cached
//! under the cargo target tmp dir, keyed by a checksum of their config, and
//! their original wall-clock time is reused when a cached run is loaded.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use flowar_core::data::{encode_pnm, unpatchify_batch};
use flowar_core::eval::{class_centroids, class_match_rate, evaluate};
use flowar_core::gradcheck::finite_diff_check_many;
use flowar_core::graph::Graph;
use flowar_core::nn::{Binder, ParamStore};
use flowar_core::sampler::{generate, propose, resample_informative, weigh};
use flowar_core::train::{datasets, loss_graph, prepare_batch, total_loss};
use flowar_core::{
    ArModel, CfgConfig, Checkpoint, Flow, FlowConfig, GmmParams, Inverter, RedundantPrior, StudentFlow, Tensor,
    TrainConfig, Trainer,
};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn say(line: &str) {
    let mut e = std::io::stderr();
    let _ = writeln!(e, "{line}");
    let _ = e.flush();
}

fn line(o: &Outcome) -> String {
    format!(
        "criterion {:>2} [{}] {}: {} ({:.1}s)",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.detail,
        o.secs
    )
}

fn cache_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            std * e
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn jitter(store: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    for v in store.values_mut() {
        for x in v.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *x += std * e;
        }
    }
}

fn tiny_cfg(extra: &str) -> TrainConfig {
    TrainConfig::from_text(&format!(
        "image_size = 4\nchannels = 1\npatch = 2\nflow_blocks = 1\nflow_width = 8\nflow_layers = 1\nflow_heads = 2\n\
         ar_width = 8\nar_layers = 1\nar_heads = 2\ninformative_dim = 2\nk_inf = 2\nk_red = 2\ncond_repeat = 1\n\
         classes = 2\nf64 = true\n{extra}"
    ))
    .unwrap()
}

/// Trains (or loads) a run; returns the trainer and the training seconds.
fn trained(name: &str, cfg: &TrainConfig) -> (Trainer<f32>, f64, bool) {
    let text = cfg.to_text();
    let key = crc32fast::hash(text.as_bytes());
    let path = cache_dir().join(format!("{name}-{key:08x}.farm"));
    let secs_path = path.with_extension("secs");
    if let (Ok(tr), Ok(s)) = (Trainer::<f32>::load(&path), std::fs::read_to_string(&secs_path)) {
        return (tr, s.trim().parse().unwrap(), true);
    }
    let (train, _) = datasets(cfg).unwrap();
    let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    let t0 = Instant::now();
    while tr.step < cfg.total_steps {
        let st = tr.train_step(&train).unwrap();
        if st.step % 1000 == 0 {
            say(&format!(
                "  [{name}] step {} loss {:.4} ({:.0}s)",
                st.step,
                st.parts.loss,
                t0.elapsed().as_secs_f64()
            ));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    tr.save(&path).unwrap();
    std::fs::write(&secs_path, format!("{secs}\n")).unwrap();
    (tr, secs, false)
}

fn distilled(teacher: &Trainer<f32>, key_src: &TrainConfig) -> (Trainer<f32>, f64, bool) {
    let key = crc32fast::hash(key_src.to_text().as_bytes());
    let path = cache_dir().join(format!("distill-{key:08x}.farm"));
    let secs_path = path.with_extension("secs");
    if let (Ok(tr), Ok(s)) = (Trainer::<f32>::load(&path), std::fs::read_to_string(&secs_path)) {
        return (tr, s.trim().parse().unwrap(), true);
    }
    let (train, _) = datasets(&teacher.cfg).unwrap();
    let mut tr = teacher.clone();
    let t0 = Instant::now();
    while tr.distill_step < tr.cfg.distill_steps {
        let st = tr.distill_step(&train).unwrap();
        if st.step % 1000 == 0 {
            say(&format!("  [distill] step {} loss {:.6} ({:.0}s)", st.step, st.loss, t0.elapsed().as_secs_f64()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    tr.save(&path).unwrap();
    std::fs::write(&secs_path, format!("{secs}\n")).unwrap();
    (tr, secs, false)
}

fn c1_invertibility(tr: &Trainer<f32>) -> (bool, String) {
    let n = tr.flow.config().tokens;
    let d = tr.flow.config().token_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x64 = Tensor::new(&[1000 * n, d], (0..1000 * n * d).map(|_| rng.random::<f64>()).collect()).unwrap();
    let x32: Tensor<f32> = x64.cast();
    let t0 = Instant::now();
    let z32 = tr.flow.flow_forward(&x32).unwrap();
    let e32 = tr.flow.flow_inverse(z32.latent()).unwrap().max_abs_diff(&x32) as f64;
    let f64flow = tr.flow.cast::<f64>();
    let z64 = f64flow.flow_forward(&x64).unwrap();
    let e64 = f64flow.flow_inverse(z64.latent()).unwrap().max_abs_diff(&x64);
    let secs = t0.elapsed().as_secs_f64();
    (
        e32 < 1e-4 && e64 < 1e-8 && secs < 60.0,
        format!("max err 32-bit {e32:.2e} (< 1e-4), 64-bit {e64:.2e} (< 1e-8), {secs:.1}s (< 60s)"),
    )
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / p;
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
        }
    }
    acc
}

fn c2_logdet() -> (bool, String) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d = 1 + case % 4;
        let cfg = FlowConfig {
            tokens: 2,
            token_dim: d,
            blocks: 1 + case % 3,
            width: 8,
            layers: 1,
            heads: 2,
        };
        let mut flow = Flow::<f64>::new(cfg, &mut rng).unwrap();
        jitter(flow.store_mut(), 0.4, &mut rng);
        let x = randn(&mut rng, &[2, d], 1.0);
        let ld = flow.flow_forward(&x).unwrap().logdet[0];
        let m = 2 * d;
        let eps = 1e-6;
        let mut jac = vec![vec![0.0; m]; m];
        for i in 0..m {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let zp = flow.flow_forward(&xp).unwrap();
            let zm = flow.flow_forward(&xm).unwrap();
            for (o, row) in jac.iter_mut().enumerate() {
                row[i] = (zp.latent().data()[o] - zm.latent().data()[o]) / (2.0 * eps);
            }
        }
        let oracle = log_abs_det(jac);
        worst = worst.max((ld - oracle).abs() / oracle.abs().max(1e-6));
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        worst < 1e-3 && secs < 60.0,
        format!("worst rel err {worst:.2e} over 50 cases (< 1e-3), {secs:.1}s"),
    )
}

fn c3_gradient() -> (bool, String) {
    let t0 = Instant::now();
    let cfg = tiny_cfg("");
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut flow = Flow::<f64>::new(cfg.flow_config().unwrap(), &mut rng).unwrap();
    let mut ar = ArModel::<f64>::new(cfg.ar_config().unwrap(), &mut rng).unwrap();
    jitter(flow.store_mut(), 0.3, &mut rng);
    jitter(ar.store_mut(), 0.3, &mut rng);
    let labels = [Some(0), None, Some(1)];
    let x = randn(&mut rng, &[3 * 4, 4], 0.5);
    let nf = flow.store().len();
    let mut params: Vec<Tensor<f64>> = flow.store().values().to_vec();
    params.extend(ar.store().values().iter().cloned());
    let count: usize = params.iter().map(|t| t.numel()).sum();
    let worst = finite_diff_check_many(
        |g: &mut Graph<f64>, vars| {
            let mut pf = Binder::from_vars(flow.store(), &vars[..nf]);
            let mut pa = Binder::from_vars(ar.store(), &vars[nf..]);
            let xv = g.constant(x.clone());
            Ok(loss_graph(g, &mut pf, &mut pa, &flow, &ar, xv, &labels, false)?.loss)
        },
        &params,
        1e-5,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    (
        worst < 1e-3 && secs < 120.0,
        format!("max rel err {worst:.2e} over {count} parameters (< 1e-3), {secs:.1}s"),
    )
}

fn c4_k1_reduction() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let cfg = tiny_cfg("k_inf = 1\n");
        let mut ar = ArModel::<f64>::new(cfg.ar_config().unwrap(), &mut rng).unwrap();
        jitter(ar.store_mut(), 0.3, &mut rng);
        let z = randn(&mut rng, &[4, 4], 1.0);
        let label = if case % 3 == 0 { None } else { Some(case % 2) };
        let (ll_inf, _) = ar.sequence_log_lik(&z, &[label]).unwrap()[0];
        let zi = z.col_range(0, 2).unwrap();
        let (gmms, _) = ar.predict_gmms(&zi, label).unwrap();
        // Standard normal of (z - mu) / sigma plus the affine log-det.
        let mut oracle = 0.0;
        for (i, g) in gmms.iter().enumerate() {
            assert_eq!(g.components(), 1);
            for j in 0..2 {
                let (mu, s) = (g.mean(0)[j], g.scale(0)[j]);
                let u = (zi.row(i)[j] - mu) / s;
                oracle += -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln();
            }
        }
        worst = worst.max((ll_inf - oracle).abs() / oracle.abs());
    }
    (worst < 1e-9, format!("worst rel err {worst:.2e} over 100 cases (< 1e-9)"))
}

fn c5_cfg_law() -> (bool, String) {
    let t0 = Instant::now();
    let g_c = GmmParams::new(vec![0.6f64.ln(), 0.4f64.ln()], vec![1.0, -1.0], vec![0.5, 0.7]).unwrap();
    let g_u = GmmParams::new(vec![0.5f64.ln(), 0.5f64.ln()], vec![0.0, 1.5], vec![1.5, 1.0]).unwrap();
    let pdf = |g: &GmmParams, x: f64| -> f64 {
        (0..2)
            .map(|k| {
                let (m, s) = (g.mean(k)[0], g.scale(k)[0]);
                g.log_weights[k].exp() * (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    };
    let (lo, hi, bins) = (-4.0, 4.0, 40usize);
    let width = (hi - lo) / bins as f64;
    let mut details = Vec::new();
    let mut pass = true;
    for (wi, w) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        // Target mass per bin by midpoint integration on a fine grid, with
        // the tails as two extra bins.
        let sub = 200;
        let fine = |a: f64, b: f64| -> f64 {
            let h = (b - a) / sub as f64;
            (0..sub)
                .map(|i| {
                    let x = a + (i as f64 + 0.5) * h;
                    pdf(&g_c, x).powf(1.0 + w) / pdf(&g_u, x).powf(w) * h
                })
                .sum()
        };
        let mut target: Vec<f64> = vec![fine(-30.0, lo)];
        target.extend((0..bins).map(|b| fine(lo + b as f64 * width, lo + (b + 1) as f64 * width)));
        target.push(fine(hi, 30.0));
        let z: f64 = target.iter().sum();
        target.iter_mut().for_each(|t| *t /= z);

        let cfg = CfgConfig {
            w,
            s_c: 4096,
            s_u: 4096,
            ..CfgConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55 + wi as u64);
        let draws = 20_000;
        let mut hist = vec![0usize; bins + 2];
        for _ in 0..draws {
            let cands = propose(&g_c, &g_u, &cfg, &mut rng).unwrap();
            let lw = weigh(&cands, &g_c, &g_u, &cfg).unwrap();
            let x = resample_informative(&cands, &lw, &mut rng).unwrap()[0];
            let b = if x < lo {
                0
            } else if x >= hi {
                bins + 1
            } else {
                1 + ((x - lo) / width) as usize
            };
            hist[b] += 1;
        }
        let tv = 0.5
            * hist
                .iter()
                .zip(&target)
                .map(|(&h, &t)| (h as f64 / draws as f64 - t).abs())
                .sum::<f64>();
        pass &= tv < 0.05;
        details.push(format!("w={w}: TV {tv:.4}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        pass && secs < 300.0,
        format!("{} (each < 0.05), {secs:.1}s", details.join(", ")),
    )
}

fn c6_learning(tr: &Trainer<f32>, secs: f64, cached: bool) -> (bool, String) {
    let (train, eval) = datasets(&tr.cfg).unwrap();
    let r = evaluate(&tr.flow, &tr.ar, &tr.cfg, &train, &eval, tr.cfg.noise_end, 0, 64).unwrap();
    let margin = r.baseline_bits_per_dim() - r.bits_per_dim();
    let centroids = class_centroids(&train, tr.cfg.classes).unwrap();
    let geom = tr.cfg.geometry().unwrap();
    let cfg = CfgConfig {
        w: 2.0,
        ..tr.cfg.cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let per_class = 16;
    let mut samples = Vec::new();
    for class in 0..tr.cfg.classes {
        let tokens = generate(&tr.ar, &Inverter::Teacher(&tr.flow), &vec![class; per_class], &cfg, &mut rng).unwrap();
        samples.extend(unpatchify_batch(&tokens, &geom).unwrap().into_iter().map(|i| (i.clamped(), class)));
    }
    let rate = class_match_rate(&samples, &centroids);
    (
        margin >= 0.3 && rate >= 0.8,
        format!(
            "held-out {:.4} bits/dim vs baseline {:.4} (margin {margin:.3} >= 0.3); \
             w=2 nearest-centroid match {:.1}% of {} (>= 80%); training {:.0} min{}",
            r.bits_per_dim(),
            r.baseline_bits_per_dim(),
            100.0 * rate,
            samples.len(),
            secs / 60.0,
            if cached { ", cached run" } else { "" }
        ),
    )
}

fn pixel_variance(tokens: &Tensor<f32>, dims: usize) -> f64 {
    let per: Vec<f64> = tokens
        .data()
        .chunks(dims)
        .map(|s| {
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / dims as f64;
            s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / dims as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Variance of each pixel across same-class samples, averaged over pixels
/// and classes.
fn sample_diversity(tokens: &Tensor<f32>, dims: usize, labels: &[usize], classes: usize) -> f64 {
    let images: Vec<&[f32]> = tokens.data().chunks(dims).collect();
    let mut total = 0.0;
    for c in 0..classes {
        let members: Vec<&[f32]> = images.iter().zip(labels).filter(|(_, &l)| l == c).map(|(i, _)| *i).collect();
        let n = members.len() as f64;
        for j in 0..dims {
            let m = members.iter().map(|s| s[j] as f64).sum::<f64>() / n;
            total += members.iter().map(|s| (s[j] as f64 - m).powi(2)).sum::<f64>() / n;
        }
    }
    total / (classes * dims) as f64
}

fn c7_factorization(tr: &Trainer<f32>) -> (bool, String) {
    // (a) d_I = d: the factorized loss against an independent undecomposed
    // evaluation (tensor-path flow, per-token mixture densities).
    let cfg = tiny_cfg("informative_dim = 4\n");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut flow = Flow::<f64>::new(cfg.flow_config().unwrap(), &mut rng).unwrap();
        let mut ar = ArModel::<f64>::new(cfg.ar_config().unwrap(), &mut rng).unwrap();
        jitter(flow.store_mut(), 0.3, &mut rng);
        jitter(ar.store_mut(), 0.3, &mut rng);
        let labels = [Some(1), None];
        let x = randn(&mut rng, &[8, 4], 0.5);
        let parts = total_loss(&flow, &ar, &x, &labels).unwrap();
        let trace = flow.flow_forward(&x).unwrap();
        let mut total = 0.0;
        for (b, label) in labels.iter().enumerate() {
            let z = Tensor::new(&[4, 4], trace.latent().data()[b * 16..(b + 1) * 16].to_vec()).unwrap();
            let (gmms, _) = ar.predict_gmms(&z, *label).unwrap();
            let mut ll = 0.0;
            for (i, g) in gmms.iter().enumerate() {
                let terms: Vec<f64> = (0..g.components())
                    .map(|k| {
                        g.log_weights[k]
                            + (0..4)
                                .map(|j| {
                                    let u = (z.row(i)[j] - g.mean(k)[j]) / g.scale(k)[j];
                                    -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln() - g.scale(k)[j].ln()
                                })
                                .sum::<f64>()
                    })
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                ll += m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            }
            total += -(ll + trace.logdet[b]) / 16.0;
        }
        let undecomposed = total / 2.0;
        worst = worst.max((parts.loss - undecomposed).abs() / undecomposed.abs());
    }
    // (b) redundant scale sweep on the trained model.
    let dims = tr.cfg.geometry().unwrap().dims();
    let mut vars = Vec::new();
    let mut div = Vec::new();
    for scale in [0.5, 1.0, 2.0] {
        let cfg = CfgConfig {
            redundant_scale: scale,
            ..tr.cfg.cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let labels: Vec<usize> = (0..32).map(|i| i % tr.cfg.classes).collect();
        let tokens = generate(&tr.ar, &Inverter::Teacher(&tr.flow), &labels, &cfg, &mut rng).unwrap();
        vars.push(pixel_variance(&tokens, dims));
        div.push(sample_diversity(&tokens, dims, &labels, tr.cfg.classes));
    }
    let monotone = (vars[0] < vars[1] && vars[1] < vars[2]) || (vars[0] > vars[1] && vars[1] > vars[2]);
    (
        worst < 1e-9 && monotone,
        format!(
            "d_I = d loss vs undecomposed: worst rel err {worst:.2e} (< 1e-9); \
             per-sample pixel variance at scale 0.5/1/2: {:.5}/{:.5}/{:.5} (strictly monotone: {monotone}); \
             across-sample pixel variance {:.5}/{:.5}/{:.5}",
            vars[0], vars[1], vars[2], div[0], div[1], div[2]
        ),
    )
}

fn median_ms(mut f: impl FnMut(), reps: usize) -> f64 {
    f();
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[reps / 2]
}

fn c8_distillation(tr: &Trainer<f32>, secs: f64, cached: bool) -> (bool, String) {
    let student = tr.student.as_ref().unwrap();
    let (_, eval) = datasets(&tr.cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut se = 0.0;
    let mut count = 0usize;
    for chunk in eval.chunks(64) {
        let imgs: Vec<_> = chunk.iter().map(|(i, _)| i).collect();
        let x = prepare_batch::<f32, _>(&imgs, &tr.cfg, tr.cfg.noise_end, &mut rng).unwrap();
        let z = tr.flow.flow_forward(&x).unwrap();
        let xh = student.student_invert(z.latent()).unwrap();
        se += xh.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        count += x.numel();
    }
    let rmse = (se / count as f64).sqrt();

    // Timing at N = 64 (32x32 images, 4x4 patches) with the trained
    // architecture; inversion cost does not depend on the weight values.
    let mut big = tr.cfg.clone();
    big.image_size = 32;
    let fc = big.flow_config().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let flow = Flow::<f32>::new(fc, &mut rng).unwrap();
    let stu = StudentFlow::from_teacher(&flow);
    let z: Tensor<f32> = randn(&mut rng, &[fc.tokens, fc.token_dim], 1.0).cast();
    let teacher_ms = median_ms(|| drop(flow.flow_inverse(&z).unwrap()), 20);
    let student_ms = median_ms(|| drop(stu.student_invert(&z).unwrap()), 20);
    let ratio = teacher_ms / student_ms;
    (
        rmse < 0.05 && ratio >= 4.0 && secs < 1200.0,
        format!(
            "held-out student RMSE {rmse:.4} (< 0.05); N={} n={} inverse {teacher_ms:.2} ms vs {student_ms:.2} ms, \
             ratio {ratio:.1} (>= 4); distillation {:.1} min (< 20){}",
            fc.tokens,
            fc.blocks,
            secs / 60.0,
            if cached { ", cached run" } else { "" }
        ),
    )
}

fn c9_ablation(base: &TrainConfig) -> (bool, String) {
    let mut results = Vec::new();
    for prior in [RedundantPrior::SharedGmm, RedundantPrior::StandardNormal] {
        let mut cfg = base.clone();
        cfg.total_steps = 2000;
        cfg.redundant_prior = prior;
        let (tr, _, _) = trained(&format!("ablation-{prior}"), &cfg);
        let (train, eval) = datasets(&cfg).unwrap();
        let r = evaluate(&tr.flow, &tr.ar, &cfg, &train, &eval, cfg.noise_end, 0, 64).unwrap();
        results.push(r.bits_per_dim());
    }
    (
        results[0] <= results[1],
        format!(
            "2000-step budget each: shared mixture {:.4} bits/dim vs standard normal {:.4} (<=)",
            results[0], results[1]
        ),
    )
}

fn c10_determinism() -> (bool, String) {
    let cfg = TrainConfig::from_text(
        "batch_size = 8\ntrain_size = 64\neval_size = 8\ntotal_steps = 100\nwarmup_steps = 10\nf64 = true\n",
    )
    .unwrap();
    let (train, _) = datasets(&cfg).unwrap();
    let run = || {
        let mut tr = Trainer::<f64>::new(cfg.clone()).unwrap();
        for _ in 0..3 {
            tr.train_step(&train).unwrap();
        }
        tr
    };
    let (a, b) = (run(), run());
    let same_ckpt = a.to_checkpoint().encode().unwrap() == b.to_checkpoint().encode().unwrap();
    let geom = cfg.geometry().unwrap();
    let sample = |tr: &Trainer<f64>| -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = generate(&tr.ar, &Inverter::Teacher(&tr.flow), &[0, 3], &cfg.cfg, &mut rng).unwrap();
        unpatchify_batch(&t, &geom).unwrap().iter().map(|i| encode_pnm(i).unwrap()).collect()
    };
    let same_samples = sample(&a) == sample(&b);

    let mut a = a;
    let bytes = a.to_checkpoint().encode().unwrap();
    let mut resumed = Trainer::<f64>::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    let mut identical = 0;
    for _ in 0..10 {
        let la = a.train_step(&train).unwrap().parts.loss;
        let lb = resumed.train_step(&train).unwrap().parts.loss;
        identical += (la.to_bits() == lb.to_bits()) as usize;
    }
    (
        same_ckpt && same_samples && identical == 10,
        format!(
            "checkpoints identical: {same_ckpt}; sample bytes identical: {same_samples}; \
             resumed losses bit-identical: {identical}/10"
        ),
    )
}

#[test]
fn acceptance() {
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> (bool, String)| {
        let t0 = Instant::now();
        let (pass, detail) = f();
        let o = Outcome {
            id,
            name,
            pass,
            detail,
            secs: t0.elapsed().as_secs_f64(),
        };
        say(&line(&o));
        outcomes.push(o);
    };

    record(2, "log-det oracle", &mut c2_logdet);
    record(3, "gradient oracle", &mut c3_gradient);
    record(4, "K=1 reduction", &mut c4_k1_reduction);
    record(5, "resampling guidance law", &mut c5_cfg_law);
    record(10, "determinism and persistence", &mut c10_determinism);

    let base = TrainConfig::default();
    let (main, train_secs, cached) = trained("default", &base);
    record(6, "learning signal", &mut || c6_learning(&main, train_secs, cached));
    record(1, "invertibility", &mut || c1_invertibility(&main));
    record(7, "dimension-reduction factorization", &mut || c7_factorization(&main));
    let (dist, dist_secs, dcached) = distilled(&main, &base);
    record(8, "distillation speedup", &mut || c8_distillation(&dist, dist_secs, dcached));
    record(9, "shared-mixture vs standard-normal ablation", &mut || c9_ablation(&base));

    outcomes.sort_by_key(|o| o.id);
    let summary: Vec<String> = outcomes.iter().map(line).collect();
    say("\nacceptance summary");
    for l in &summary {
        say(l);
    }
    let _ = std::fs::write(cache_dir().join("summary.txt"), summary.join("\n") + "\n");
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
