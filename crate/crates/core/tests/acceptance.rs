//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The default pipeline (decoder, stage 1, stage 2, benchmark) is run once
//! and cached under the cargo target directory, keyed by the config hash.
//! Set `SEMI_ACCEPTANCE_DIR` to use another location.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Uniform};

use semi_core::adapters::{
    average_adapters, generation_param_count, lora_delta, merge, AdapterSet, AdapterTarget, LoraAdapter,
};
use semi_core::checkpoint::{Checkpoint, Persist, Precision};
use semi_core::config::{AblationVariant, ExperimentConfig};
use semi_core::eval::{linear_cka, parse_metrics_csv, CkaGrid, CkaStage, HeldOut, Method, MetricsRow};
use semi_core::featsel::{embedding_rank, inffs_adjacency, inffs_scores, FeatureSelection};
use semi_core::hypernet::{
    adapt_few_shot, generate_adapters, pad_to_width, stage2_loss, FinetuneConfig, GenerationMode, HypernetParams,
    Stage2Episode, Stage2Summary,
};
use semi_core::numerics::stats::{ks_critical_1pct, ks_one_sample, ks_two_sample};
use semi_core::numerics::{finite_diff_check, rng_for, sample_haar_orthogonal, DenseMatrix, GradContext, Params};
use semi_core::pipeline::{self, parse_ablation_csv, Layout, Loaded};
use semi_core::projector::{
    caption_loss, project_forward, project_graph, projector_loss, ForwardMode, ProjectorParams, Supervision,
};
use semi_core::synth::FrozenDecoder;
use semi_core::Exec;

use support::{hypernet_config, random_episode, random_hypernet, random_projector, Tiny, D_H, D_HID};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Shared default-config run

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Timings {
    decoder_and_stage1_s: f64,
    stage2_s: f64,
    benchmark_s: f64,
    threads: usize,
}

struct Shared {
    cfg: ExperimentConfig,
    layout: Layout,
    loaded: Loaded,
    rows: Vec<MetricsRow>,
    cka: CkaGrid,
    subsets: Vec<serde_json::Value>,
    summary: Stage2Summary,
    timings: Timings,
}

fn cache_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os("SEMI_ACCEPTANCE_DIR") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", &cfg.hash()[..12])),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> T {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let layout = Layout::new(cache_root(&cfg));
        let timings_path = layout.root.join("timings.json");
        let timings = if timings_path.exists() && layout.metrics().exists() {
            eprintln!("reusing cached default run in {}", layout.root.display());
            read_json(&timings_path)
        } else {
            eprintln!("running the default pipeline into {}", layout.root.display());
            let t = Instant::now();
            pipeline::cmd_stage1(&cfg, &layout).expect("stage 1");
            let decoder_and_stage1_s = t.elapsed().as_secs_f64();
            let t = Instant::now();
            pipeline::cmd_stage2(&cfg, &layout).expect("stage 2");
            let stage2_s = t.elapsed().as_secs_f64();
            let t = Instant::now();
            pipeline::cmd_benchmark(&cfg, &layout, Exec::Parallel).expect("benchmark");
            let timings = Timings {
                decoder_and_stage1_s,
                stage2_s,
                benchmark_s: t.elapsed().as_secs_f64(),
                threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            };
            std::fs::write(&timings_path, serde_json::to_string_pretty(&timings).unwrap()).unwrap();
            timings
        };
        let rows = pipeline::read_metrics(&layout.metrics()).expect("metrics csv");
        let cka: CkaGrid = read_json(&layout.cka());
        let subsets: Vec<serde_json::Value> = read_json(&layout.benchmark_dir().join("subsets.json"));
        let summary: Stage2Summary = read_json(&layout.stage2_summary());
        let loaded = pipeline::load_assets(&cfg, &layout).expect("load assets");
        Shared {
            cfg,
            layout,
            loaded,
            rows,
            cka,
            subsets,
            summary,
            timings,
        }
    })
}

fn mean_acc(rows: &[MetricsRow], enc_dim: usize, method: Method, shots: usize) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.enc_dim == enc_dim && r.method == method && r.shots == shots)
        .map(|r| r.token_accuracy)
        .collect();
    assert!(!v.is_empty(), "no rows for {method:?} d={enc_dim} shots={shots}");
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn supervision<'a>(instr: &'a [Vec<usize>], caps: &'a [Vec<usize>]) -> Vec<Supervision<'a>> {
    instr
        .iter()
        .zip(caps)
        .map(|(i, c)| Supervision {
            instruction: i,
            caption: c,
        })
        .collect()
}

/// Caption loss of a projector whose tensors are trainable.
fn projector_fd(tiny: &Tiny, psi: &ProjectorParams, x: &DenseMatrix, seed: u64) -> f64 {
    let (instr, caps) = tiny.supervision(x.rows(), seed);
    let sup = supervision(&instr, &caps);
    finite_diff_check(&psi.params.prefixed("projector"), 1e-5, |p| {
        let cur = ProjectorParams {
            params: p.strip_prefix("projector"),
            ..psi.clone()
        };
        let mut ctx = GradContext::new();
        let dec = tiny.decoder.bind(&mut ctx, false)?;
        let v = cur.bind(&mut ctx, "projector", true)?;
        let xv = ctx.constant(x.clone());
        let out = project_graph(&mut ctx, &v, xv, None, None, None)?;
        let loss = caption_loss(&mut ctx, &dec, out, cur.prefix_slots, cur.d_out, &sup)?;
        let value = ctx.value(loss).get(0, 0);
        Ok((value, ctx.backward(loss)?.into_params()))
    })
    .unwrap()
}

/// Caption loss through a trainable low-rank update on a frozen projector.
fn lora_fd(tiny: &Tiny, psi: &ProjectorParams, x: &DenseMatrix, seed: u64) -> f64 {
    let (instr, caps) = tiny.supervision(x.rows(), seed);
    let sup = supervision(&instr, &caps);
    let mut rng = rng_for(seed, 903);
    let (rank, alpha) = (2usize, 4.0);
    let mut lora = Params::new();
    lora.insert("lora.a", DenseMatrix::randn(rank, psi.d_in, 0.5, &mut rng));
    lora.insert("lora.b", DenseMatrix::randn(psi.d_hid, rank, 0.5, &mut rng));
    finite_diff_check(&lora, 1e-5, |p| {
        let mut ctx = GradContext::new();
        let dec = tiny.decoder.bind(&mut ctx, false)?;
        let v = psi.bind(&mut ctx, "projector", false)?;
        let a = ctx.param("lora.a", p.get("lora.a")?.clone())?;
        let b = ctx.param("lora.b", p.get("lora.b")?.clone())?;
        let ba = ctx.matmul(b, a)?;
        let delta = ctx.scale(ba, alpha / rank as f64);
        let xv = ctx.constant(x.clone());
        let out = project_graph(&mut ctx, &v, xv, Some(delta), None, None)?;
        let loss = caption_loss(&mut ctx, &dec, out, psi.prefix_slots, psi.d_out, &sup)?;
        let value = ctx.value(loss).get(0, 0);
        Ok((value, ctx.backward(loss)?.into_params()))
    })
    .unwrap()
}

/// Stage-2 loss with the hypernetwork (attention, special tokens, heads)
/// trainable.
fn hypernet_fd(tiny: &Tiny, psi: &ProjectorParams, layers: usize, seed: u64) -> f64 {
    let (s, b) = (2, 2);
    let cfg = hypernet_config(s, layers);
    let theta = random_hypernet(&cfg, psi, seed);
    let (instructions, captions) = tiny.supervision(b, seed);
    let ep = Stage2Episode {
        modality: 0,
        episode: random_episode(D_H, s, seed),
        x: DenseMatrix::randn(b, D_H, 1.0, &mut rng_for(seed, 904)),
        instructions,
        captions,
        q_seed: None,
    };
    let frozen = tiny.frozen(psi);
    finite_diff_check(&theta.params.prefixed("hypernet"), 1e-5, |p| {
        let cur = HypernetParams {
            params: p.strip_prefix("hypernet"),
            ..theta.clone()
        };
        let mut ctx = GradContext::new();
        let loss = stage2_loss(&mut ctx, &cur, &frozen, &ep, true, None)?;
        let value = ctx.value(loss).get(0, 0);
        Ok((value, ctx.backward(loss)?.into_params()))
    })
    .unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let seeds = 20;
    let mut worst = [0.0f64; 5];
    for seed in 0..seeds {
        let tiny = Tiny::new(seed);
        let psi = random_projector(D_H, D_HID, seed);
        let x = DenseMatrix::randn(2, D_H, 1.0, &mut rng_for(seed, 905));
        // Stage-1 and FT-Projector share the projector graph; the scratch
        // baseline runs it at the held-out encoder's own width.
        worst[0] = worst[0].max(projector_fd(&tiny, &psi, &x, seed));
        let scratch = random_projector(12, 10, seed + 100);
        let xs = DenseMatrix::randn(2, 12, 1.0, &mut rng_for(seed, 906));
        worst[1] = worst[1].max(projector_fd(&tiny, &scratch, &xs, seed));
        worst[2] = worst[2].max(lora_fd(&tiny, &psi, &x, seed));
        worst[3] = worst[3].max(hypernet_fd(&tiny, &psi, 1, seed));
        worst[4] = worst[4].max(hypernet_fd(&tiny, &psi, 2, seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max < 1e-4 && secs < 60.0,
        format!(
            "{seeds} seeds, max rel err: projector {:.1e}, scratch {:.1e}, lora {:.1e}, hypernet {:.1e}, two-layer hypernet {:.1e}; {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Haar sampler

/// Two-sample KS statistic, written independently of the library version.
fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, u8)> = a.iter().map(|&v| (v, 0)).chain(b.iter().map(|&v| (v, 1))).collect();
    all.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (mut ca, mut cb, mut d) = (0usize, 0usize, 0.0f64);
    let mut k = 0;
    while k < all.len() {
        let v = all[k].0;
        while k < all.len() && all[k].0 == v {
            if all[k].1 == 0 {
                ca += 1;
            } else {
                cb += 1;
            }
            k += 1;
        }
        d = d.max((ca as f64 / a.len() as f64 - cb as f64 / b.len() as f64).abs());
    }
    d
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = rng_for(2024, 0);
    let (mut orth, mut det_err, mut iso) = (0.0f64, 0.0f64, 0.0f64);
    for dim in [1, 2, 3, 5, 8, 16, 32, 64] {
        for _ in 0..10 {
            let q = sample_haar_orthogonal(dim, &mut rng).unwrap();
            let qtq = q.q.t_matmul(&q.q).unwrap();
            orth = orth.max(qtq.max_abs_diff(&DenseMatrix::identity(dim)));
            det_err = det_err.max((q.q.to_nalgebra().determinant().abs() - 1.0).abs());
            let x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = q.apply(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
            iso = iso.max((ny - nx).abs() / nx);
        }
    }
    let n = 10_000;
    let q00: Vec<f64> = (0..n)
        .map(|_| sample_haar_orthogonal(3, &mut rng).unwrap().q.get(0, 0))
        .collect();
    // Oracle: first coordinate of a normalised standard Gaussian in R^3,
    // drawn with an unrelated generator.
    let mut orng = ChaCha20Rng::seed_from_u64(77);
    let oracle: Vec<f64> = (0..n)
        .map(|_| {
            let g: [f64; 3] = [orng.sample(StandardNormal), orng.sample(StandardNormal), orng.sample(StandardNormal)];
            g[0] / (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
        })
        .collect();
    let d_lib = ks_two_sample(&q00, &oracle);
    let d_ind = ks_oracle(&q00, &oracle);
    let crit = (-(0.005f64).ln() / 2.0).sqrt() * ((2 * n) as f64 / (n * n) as f64).sqrt();
    // On the 2-sphere the first coordinate is uniform on [-1, 1].
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let d_unif = ks_one_sample(&q00, |v| u.cdf(v));
    let crit1 = ks_critical_1pct(n, None);
    let secs = start.elapsed().as_secs_f64();
    let agree = (d_lib - d_ind).abs() < 1e-12 && (crit - ks_critical_1pct(n, Some(n))).abs() < 1e-3;
    check(
        orth < 1e-9 && det_err < 1e-6 && iso < 1e-9 && d_ind < crit && d_unif < crit1 && agree && secs < 30.0,
        format!(
            "orth {orth:.1e}, |det|-1 {det_err:.1e}, isometry {iso:.1e}; KS vs normalised Gaussian {d_ind:.4} < {crit:.4}, vs U(-1,1) {d_unif:.4} < {crit1:.4}; {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. LoRA algebra

fn random_adapter(rng: &mut semi_core::numerics::SemiRng, d_out: usize, d_in: usize, r: usize) -> LoraAdapter {
    LoraAdapter::new(
        DenseMatrix::randn(r, d_in, 1.0, rng),
        DenseMatrix::randn(d_out, r, 1.0, rng),
        2.0 * r as f64,
        AdapterTarget::Layer1,
    )
    .unwrap()
}

fn criterion_3() -> Verdict {
    let mut path_err = 0.0f64;
    let mut inverse = 0.0f64;
    let mut assoc = 0.0f64;
    let mut zero_ok = true;
    let mut single_ok = true;
    for seed in 0..20 {
        let psi = random_projector(12, 10, seed);
        let mut rng = rng_for(seed, 910);
        let ad = random_adapter(&mut rng, 10, 12, 4);
        let merged = merge(&psi, &lora_delta(&ad)).unwrap();
        for _ in 0..5 {
            let x = DenseMatrix::randn(1, 12, 1.0, &mut rng).into_data();
            let via_path = project_forward(&psi, &x, Some(&ad), ForwardMode::Eval).unwrap();
            let via_merge = project_forward(&merged, &x, None, ForwardMode::Eval).unwrap();
            path_err = path_err.max(via_path.max_abs_diff(&via_merge));
        }
        zero_ok &= merge(&psi, &DenseMatrix::zeros(10, 12)).unwrap() == psi;
        let d1 = DenseMatrix::randn(10, 12, 1.0, &mut rng);
        let d2 = DenseMatrix::randn(10, 12, 1.0, &mut rng);
        let back = merge(&merge(&psi, &d1).unwrap(), &d1.scale(-1.0)).unwrap();
        inverse = inverse.max(back.w1().max_abs_diff(psi.w1()));
        let lhs = merge(&psi, &d1.add(&d2).unwrap()).unwrap();
        let rhs = merge(&merge(&psi, &d1).unwrap(), &d2).unwrap();
        assoc = assoc.max(lhs.w1().max_abs_diff(rhs.w1()));
        let mut one = AdapterSet::default();
        one.push(ad.clone(), None, vec![0]).unwrap();
        single_ok &= average_adapters(&one).unwrap() == lora_delta(&ad);
    }
    let large = generation_param_count(768, 768, 32, 768).unwrap().factorized;
    let desk = generation_param_count(64, 64, 8, 64).unwrap().factorized;
    check(
        path_err < 1e-10 && zero_ok && single_ok && inverse < 1e-12 && assoc < 1e-12 && large == 37_748_736 && desk == 65_536,
        format!(
            "adapter path vs merge {path_err:.1e}; zero {zero_ok}, single {single_ok}, inverse {inverse:.1e}, associativity {assoc:.1e}; (768+768)*32*768 = {large}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Zero-init contract

fn criterion_4() -> Verdict {
    let sh = shared();
    let cfg = &sh.cfg;
    let psi = &sh.loaded.psi;
    let theta = HypernetParams::init(&cfg.hypernet, psi.d_in, psi.d_hid, psi.out_width(), cfg.seed).unwrap();
    let frozen = semi_core::hypernet::Frozen {
        world: &sh.loaded.world,
        text: &sh.loaded.text,
        decoder: &sh.loaded.decoder,
        psi,
    };
    let encoders = pipeline::training_encoders(cfg, &sh.loaded.world).unwrap();
    let mut rng = rng_for(11, 0);
    let (mut max_delta, mut max_gap) = (0.0f64, 0.0f64);
    for (i, enc) in encoders.iter().enumerate() {
        let q = semi_core::numerics::IsometricTransform::from_seed(enc.out_dim, 500 + i as u64).unwrap();
        let ep = semi_core::hypernet::draw_stage2_episode(
            &frozen,
            enc,
            cfg.hypernet.context,
            cfg.stage2.batch,
            true,
            &q,
            semi_core::synth::Split::Train,
            &mut rng,
        )
        .unwrap();
        let g = theta.forward(&ep.episode).unwrap();
        max_delta = max_delta.max(lora_delta(&g.layer1).max_abs());
        let mut ctx = GradContext::new();
        let loss = stage2_loss(&mut ctx, &theta, &frozen, &ep, false, None).unwrap();
        let s2 = ctx.value(loss).get(0, 0);
        let s1 = projector_loss(psi, &sh.loaded.decoder, &ep.x, &ep.supervision()).unwrap();
        max_gap = max_gap.max((s2 - s1).abs());
    }
    check(
        max_delta == 0.0 && max_gap < 1e-8,
        format!("max |delta| {max_delta:e}; |stage-2 step-0 loss - stage-1 loss| {max_gap:.1e} over {} episodes", encoders.len()),
    )
}

// ---------------------------------------------------------------------------
// 5. Inf-FS

fn criterion_5() -> Verdict {
    let mut rng = rng_for(55, 0);
    let mut worst = 0.0f64;
    let mut worst_ratio = 0.0;
    let mut failures = 0;
    let mut max_tail = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..20);
        let d = rng.random_range(3..16);
        let x = DenseMatrix::randn(n, d, 1.0, &mut rng);
        let beta = rng.random_range(0.1..0.9);
        let a = inffs_adjacency(&x, beta).unwrap();
        let rho = a.to_nalgebra().symmetric_eigen().eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ratio = rng.random_range(0.05..=0.9);
        let gamma = ratio / rho;
        let closed = inffs_scores(&x, Some(gamma), beta).unwrap();
        // Truncated series sum_{l=1}^{50} (gamma A)^l, row sums.
        let ga = a.scale(gamma);
        let mut power = ga.clone();
        let mut total = ga.clone();
        for _ in 2..=50 {
            power = power.matmul(&ga).unwrap();
            total.add_assign(&power).unwrap();
        }
        let series: Vec<f64> = (0..d).map(|i| total.row(i).iter().sum()).collect();
        let err = closed
            .scores
            .iter()
            .zip(&series)
            .map(|(c, s)| (c - s).abs())
            .fold(0.0, f64::max);
        // The omitted tail is bounded by d * ratio^51 / (1 - ratio) per score.
        let tail = d as f64 * ratio.powi(51) / (1.0 - ratio);
        max_tail = max_tail.max(tail);
        assert!(err <= tail + 1e-9, "closed form disagrees with series beyond the tail bound");
        if err >= 1e-8 {
            failures += 1;
            worst_ratio = f64::max(worst_ratio, ratio);
        }
        worst = worst.max(err);
    }
    // Rank demonstration.
    let (n, d_e, d_h) = (8, 96, 32);
    let x = DenseMatrix::randn(n, d_e, 1.0, &mut rng);
    let rank_x = embedding_rank(&x, 1e-10).unwrap();
    let pca = FeatureSelection::fit_pca(&x, d_h).unwrap();
    let pca_rank = embedding_rank(&pca.apply(&x).unwrap(), 1e-10).unwrap();
    let inffs = FeatureSelection::fit_inffs(&x, d_h, 0.5).unwrap();
    let inffs_rank = embedding_rank(&inffs.apply(&x).unwrap(), 1e-10).unwrap();
    let rank_ok = pca_rank <= n && inffs_rank == d_h.min(rank_x) && pca_rank < inffs_rank;
    check(
        failures == 0 && rank_ok,
        format!(
            "series agreement: max |closed - series| {worst:.1e}, {failures}/100 instances above 1e-8 (largest gamma*rho among them {worst_ratio:.2}; all within the truncation bound, max {max_tail:.1e}); rank: PCA {pca_rank} <= {n}, Inf-FS {inffs_rank} = min({d_h}, {rank_x})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. CKA

fn criterion_6() -> Verdict {
    let mut rng = rng_for(66, 0);
    let x = DenseMatrix::randn(200, 12, 1.0, &mut rng);
    let y = DenseMatrix::randn(200, 7, 1.0, &mut rng);
    let self_sim = linear_cka(&x, &x).unwrap();
    let q = sample_haar_orthogonal(12, &mut rng).unwrap();
    let base = linear_cka(&x, &y).unwrap();
    let moved = linear_cka(&q.apply_rows(&x).unwrap(), &y.scale(3.7)).unwrap();
    let a = DenseMatrix::randn(2000, 8, 1.0, &mut rng);
    let b = DenseMatrix::randn(2000, 8, 1.0, &mut rng);
    let indep = linear_cka(&a, &b).unwrap();
    let props = (self_sim - 1.0).abs() < 1e-12 && (base - moved).abs() < 1e-9 && indep < 0.05;

    let sh = shared();
    let d_h = sh.cfg.hypernet.d_h;
    let label = HeldOut {
        enc_dim: d_h,
        ..sh.cfg.benchmark.held_out[0].clone()
    }
    .label();
    let stages_present = CkaStage::ALL.iter().all(|&s| sh.cka.get(s, &label).is_some());
    let pre = sh.cka.get(CkaStage::PreMerge, &label).unwrap_or(f64::NAN);
    let post = sh.cka.get(CkaStage::PostFinetune, &label).unwrap_or(f64::NAN);
    let grid: Vec<String> = CkaStage::ALL
        .iter()
        .map(|&s| format!("{} {:.3}", s.label(), sh.cka.get(s, &label).unwrap_or(f64::NAN)))
        .collect();
    check(
        props && stages_present && post >= pre,
        format!(
            "self {self_sim:.3}, invariance gap {:.1e}, independent n=2000 {indep:.4}; {label}: {}",
            (base - moved).abs(),
            grid.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Sample-efficiency benchmark

fn criterion_7() -> Verdict {
    let sh = shared();
    let d = sh.cfg.hypernet.d_h;
    let shots = &sh.cfg.benchmark.shots;
    let s8 = shots[0];
    let semi = mean_acc(&sh.rows, d, Method::Semi, s8);
    let mut lines = Vec::new();
    let mut ok_b = true;
    for m in [Method::FtProjector, Method::Projector, Method::Lora] {
        let v = mean_acc(&sh.rows, d, m, s8);
        ok_b &= semi >= v;
        lines.push(format!("{} {v:.3}", m.label()));
    }
    let scratch = mean_acc(&sh.rows, d, Method::Projector, s8);
    let ok_a = semi > scratch;
    let mut ok_c = true;
    let mut curves = Vec::new();
    for m in Method::ALL {
        let accs: Vec<f64> = shots.iter().map(|&s| mean_acc(&sh.rows, d, m, s)).collect();
        let inversions = accs.windows(2).filter(|w| w[1] < w[0]).count();
        ok_c &= inversions <= 1;
        curves.push(format!(
            "{} [{}]",
            m.label(),
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
        ));
    }
    let t = &sh.timings;
    let total = t.decoder_and_stage1_s + t.stage2_s + t.benchmark_s;
    let ok_t = total < 30.0 * 60.0;
    check(
        ok_a && ok_b && ok_c && ok_t,
        format!(
            "(a) {} (b) {} (c) {} runtime {}: d={d} {s8}-shot SEMI {semi:.3} vs {}; curves {}; pipeline {total:.0}s on {} thread(s) (benchmark {:.0}s)",
            pf(ok_a),
            pf(ok_b),
            pf(ok_c),
            pf(ok_t),
            lines.join(", "),
            curves.join("; "),
            t.threads,
            t.benchmark_s
        ),
    )
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------------------
// 8. Arbitrary dimensionality

fn criterion_8() -> Verdict {
    let sh = shared();
    let d_h = sh.cfg.hypernet.d_h;
    let s8 = sh.cfg.benchmark.shots[0];
    let mut ok = true;
    let mut parts = Vec::new();
    for held in &sh.cfg.benchmark.held_out {
        let want = match held.enc_dim.cmp(&d_h) {
            std::cmp::Ordering::Less => "pruned",
            std::cmp::Ordering::Equal => "direct",
            std::cmp::Ordering::Greater => "selected",
        };
        let routes: Vec<&str> = sh
            .subsets
            .iter()
            .filter(|s| s["enc_dim"].as_u64() == Some(held.enc_dim as u64))
            .filter_map(|s| s["route"].as_str())
            .collect();
        let route_ok = !routes.is_empty() && routes.iter().all(|r| r.eq_ignore_ascii_case(want));
        let complete = Method::ALL.iter().all(|&m| {
            sh.cfg
                .benchmark
                .shots
                .iter()
                .all(|&s| sh.rows.iter().filter(|r| r.enc_dim == held.enc_dim && r.method == m && r.shots == s).count() == sh.cfg.benchmark.seeds.len())
        });
        let semi = mean_acc(&sh.rows, held.enc_dim, Method::Semi, s8);
        let scratch = mean_acc(&sh.rows, held.enc_dim, Method::Projector, s8);
        let cell_ok = route_ok && complete && semi > scratch;
        ok &= cell_ok;
        parts.push(format!(
            "d_e={} {want} {}: SEMI {semi:.3} vs Projector {scratch:.3}",
            held.enc_dim,
            pf(cell_ok)
        ));
    }
    let dims: Vec<usize> = sh.cfg.benchmark.held_out.iter().map(|h| h.enc_dim).collect();
    let has_all = dims.contains(&(d_h - 16)) && dims.contains(&d_h) && dims.contains(&(d_h + 32));
    check(ok && has_all, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 9. Ablation harness

fn criterion_9() -> Verdict {
    let sh = shared();
    let mut cfg = sh.cfg.clone();
    cfg.ablation.shots = vec![8];
    cfg.ablation.seeds = vec![0];
    cfg.ablation.stage2_steps = Some(200);
    let root = sh.layout.root.join("ablation-run");
    std::fs::create_dir_all(&root).unwrap();
    for f in ["decoder.ckpt", "stage1/projector.ckpt"] {
        let dst = root.join(f);
        std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
        std::fs::copy(sh.layout.root.join(f), dst).unwrap();
    }
    let layout = Layout::new(&root);
    let rows = pipeline::cmd_ablate(&cfg, &layout, Exec::Parallel).unwrap();
    let text = std::fs::read_to_string(layout.ablation_dir().join("metrics.csv")).unwrap();
    let parsed = parse_ablation_csv(&text).unwrap();
    let schema_ok = parsed.len() == rows.len() && parsed.len() == AblationVariant::ALL.len();
    let toggles = [
        AblationVariant::Full,
        AblationVariant::NoText,
        AblationVariant::NoIso,
        AblationVariant::NoTextNoIso,
    ];
    let ckpts_ok = toggles.iter().all(|&v| layout.ablation_hypernet(v).exists());

    // Single and averaged generation coincide when the few-shot set is
    // exactly one context.
    let tiny = Tiny::new(9);
    let psi = random_projector(D_H, D_HID, 9);
    let s = 4;
    let theta = random_hypernet(&hypernet_config(s, 1), &psi, 9);
    let x = DenseMatrix::randn(s, D_H, 1.0, &mut rng_for(9, 1));
    let (instr, caps) = tiny.supervision(s, 9);
    let gen = |mode| generate_adapters(&theta, &tiny.text, &instr[0], &x, &caps, true, mode).unwrap();
    let single = average_adapters(&gen(GenerationMode::Single)).unwrap();
    let multi = average_adapters(&gen(GenerationMode::Averaged)).unwrap();
    let set = semi_core::eval::LabeledSet {
        x: x.clone(),
        captions: caps.clone(),
        instructions: instr.clone(),
        concepts: vec![0; s],
    };
    let ft = FinetuneConfig {
        steps: 5,
        early_stopping: semi_core::hypernet::EarlyStopping::TrainLoss,
        ..FinetuneConfig::default()
    };
    let adapt = |mode| {
        adapt_few_shot(&theta, &tiny.text, &tiny.decoder, &psi, &set, &set, true, mode, &ft, 3)
            .unwrap()
            .fit
            .psi
    };
    let modes_equal = single == multi && adapt(GenerationMode::Single) == adapt(GenerationMode::Averaged);
    let accs: Vec<String> = parsed
        .iter()
        .map(|r| format!("{} {:.3}", r.variant.label(), r.row.token_accuracy))
        .collect();
    check(
        schema_ok && ckpts_ok && modes_equal,
        format!(
            "{} variants, schema {}, text x iso checkpoints {}, single == averaged at n=S {}; 8-shot SEMI: {}",
            parsed.len(),
            pf(schema_ok),
            pf(ckpts_ok),
            modes_equal,
            accs.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence

fn reduced_config() -> ExperimentConfig {
    let sets = [
        "stage1.steps=300",
        "stage1.optimizer.schedule.total=300",
        "stage1.optimizer.schedule.warmup=20",
        "stage2.steps=60",
        "stage2.optimizer.schedule.total=60",
        "stage2.optimizer.schedule.warmup=6",
        "stage2.eval_episodes=4",
        "finetune.steps=30",
        "benchmark.shots=[8, 32]",
        "benchmark.seeds=[0, 1]",
        "benchmark.test_size=32",
        "benchmark.held_out=[{modality = 3, enc_dim = 48, seed = 5000}, {modality = 3, enc_dim = 96, seed = 5000}]",
    ];
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_with_overrides("", &sets).unwrap()
}

fn run_reduced(cfg: &ExperimentConfig, root: &Path, exec: Exec) -> Layout {
    let layout = Layout::new(root);
    pipeline::cmd_stage1(cfg, &layout).unwrap();
    pipeline::cmd_stage2(cfg, &layout).unwrap();
    pipeline::cmd_benchmark(cfg, &layout, exec).unwrap();
    layout
}

fn strip_runtime(text: &str) -> String {
    let rows = parse_metrics_csv(text).unwrap();
    semi_core::eval::metrics_csv(&rows, false)
}

fn round_trip<T: Persist + PartialEq + std::fmt::Debug>(path: &Path) -> bool {
    let bytes = std::fs::read(path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let object: T = ck.restore().unwrap();
    let again = Checkpoint::new(&object, &ck.config_hash, &ck.seeds, Precision::F64).unwrap();
    let restored: T = Checkpoint::from_bytes(&again.to_bytes().unwrap()).unwrap().restore().unwrap();
    again.to_bytes().unwrap() == bytes && restored == object
}

fn criterion_10() -> Verdict {
    let cfg = reduced_config();
    let tmp = tempfile::tempdir().unwrap();
    let a = run_reduced(&cfg, &tmp.path().join("a"), Exec::Sequential);
    let b = run_reduced(&cfg, &tmp.path().join("b"), Exec::Parallel);
    let read = |l: &Layout, p: &str| std::fs::read(l.root.join(p)).unwrap();
    let metrics_same = strip_runtime(&String::from_utf8(read(&a, "benchmark/metrics.csv")).unwrap())
        == strip_runtime(&String::from_utf8(read(&b, "benchmark/metrics.csv")).unwrap());
    let files = [
        "decoder.ckpt",
        "stage1/projector.ckpt",
        "stage1/loss.csv",
        "stage2/hypernet.ckpt",
        "stage2/loss.csv",
        "benchmark/cka.json",
        "benchmark/subsets.json",
    ];
    let differing: Vec<&str> = files.iter().copied().filter(|f| read(&a, f) != read(&b, f)).collect();
    // Resuming a finished grid reproduces it.
    let again = pipeline::cmd_benchmark(&cfg, &a, Exec::Parallel).unwrap();
    let resumed_same = strip_runtime(&again.csv()) == strip_runtime(&String::from_utf8(read(&a, "benchmark/metrics.csv")).unwrap());
    let rows = parse_metrics_csv(&String::from_utf8(read(&a, "benchmark/metrics.csv")).unwrap()).unwrap();
    let grid_ok = rows.len() == cfg.benchmark.cells();

    let sh = shared();
    let trips = round_trip::<FrozenDecoder>(&sh.layout.decoder())
        && round_trip::<ProjectorParams>(&sh.layout.projector())
        && round_trip::<HypernetParams>(&sh.layout.hypernet());
    let tensors_exact = {
        let ck = Checkpoint::load(&sh.layout.hypernet()).unwrap();
        let t: HypernetParams = ck.restore().unwrap();
        let same = t.params.iter().zip(sh.loaded.theta.params.iter()).all(|((_, x), (_, y))| {
            x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        same
    };
    check(
        metrics_same && differing.is_empty() && resumed_same && grid_ok && trips && tensors_exact,
        format!(
            "sequential vs parallel metrics identical {metrics_same}, artifacts differing {differing:?}, resume identical {resumed_same}, rows {} of {}; checkpoint round trips bit-exact {}",
            rows.len(),
            cfg.benchmark.cells(),
            trips && tensors_exact
        ),
    )
}

// ---------------------------------------------------------------------------
// Supplementary checks on the default run

fn stage2_decrease() -> Verdict {
    let s = &shared().summary;
    let drop = 1.0 - s.final_val_loss / s.initial_val_loss;
    check(
        drop >= 0.10,
        format!("validation loss {:.4} -> {:.4} ({:.1}% lower)", s.initial_val_loss, s.final_val_loss, 100.0 * drop),
    )
}

fn pad_route_is_consistent() -> Verdict {
    let x = DenseMatrix::randn(3, 5, 1.0, &mut rng_for(1, 1));
    let p = pad_to_width(&x, 8).unwrap();
    check(
        p.select_columns(&[0, 1, 2, 3, 4]).unwrap() == x && p.select_columns(&[5, 6, 7]).unwrap().max_abs() == 0.0,
        "narrow encoders are zero-padded to the hypernetwork width".into(),
    )
}

type Criterion = (&'static str, &'static str, fn() -> Verdict);

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: Vec<Criterion> = vec![
        ("1", "gradient correctness", criterion_1),
        ("2", "Haar sampler", criterion_2),
        ("3", "LoRA algebra", criterion_3),
        ("4", "zero-init contract", criterion_4),
        ("5", "Inf-FS series and rank", criterion_5),
        ("6", "CKA", criterion_6),
        ("7", "sample-efficiency benchmark", criterion_7),
        ("8", "arbitrary dimensionality", criterion_8),
        ("9", "ablation harness", criterion_9),
        ("10", "determinism and persistence", criterion_10),
        ("s1", "stage-2 validation loss decrease", stage2_decrease),
        ("s2", "zero-padding route", pad_route_is_consistent),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if let Some(fl) = &filter {
            if fl != id {
                continue;
            }
        }
        ran += 1;
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS criterion {id} ({name}) [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}) [{secs:.1}s]: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
