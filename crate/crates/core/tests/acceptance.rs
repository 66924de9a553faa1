//! Acceptance suite: one test per criterion, each writing a single
//! PASS/FAIL line to stderr (bypassing output capture). Criteria 8-10 share
//! one desk-scale framework run from `configs/desk.toml`.

use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

use selftransfer::data::{
    denormalize, fit_normalization, normalize, read_dataset, split_dataset, split_sizes, write_dataset, Dataset,
    Role, Scale, TimeSeriesSample,
};
use selftransfer::datagen::{boucwen_response, BoucWenParams};
use selftransfer::mmd::{mk_mmd, mmd_weight, BandwidthMode, Estimator, MkMmdConfig};
use selftransfer::net::{batch_matrix, DanTr, DanTrArch, DanTrParams, GradOptions};
use selftransfer::orchestrator::{
    per_seed_reduction, FrameworkData, FrameworkRun, IterationKind, IterationRecord, RunConfig, RunRecord,
};
use selftransfer::seed;
use selftransfer::train::{ema_update, train_dantr, DanTrTrainConfig, TrainConfig};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

fn verdict(n: u32, name: &str, ok: bool, detail: String) {
    let line = format!("acceptance {n:02} [{}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn rand_set(rng: &mut impl Rng, n: usize, d: usize, shift: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0) + shift)
}

/// Plain double loop over ordered pairs, averaged Gaussian kernels.
fn brute_mmd(a: &Array2<f64>, b: &Array2<f64>, sigmas: &[f64], est: Estimator) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / sigmas.len() as f64
    };
    let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let (s, t) = (rows(a), rows(b));
    let within = |x: &[Vec<f64>]| {
        let (mut sum, mut n) = (0.0, 0.0);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if est == Estimator::Unbiased && i == j {
                    continue;
                }
                sum += k(&x[i], &x[j]);
                n += 1.0;
            }
        }
        sum / n
    };
    let mut cross = 0.0;
    for x in &s {
        for y in &t {
            cross += k(x, y);
        }
    }
    within(&s) + within(&t) - 2.0 * cross / (s.len() * t.len()) as f64
}

#[test]
fn acceptance_01_mmd_weight_schedule() {
    let n = 1000;
    let direct = |x: f64| 2.0 / (1.0 + (-10.0 * x).exp()) - 1.0;
    let checks = [(0, 0.0, 0.0), (n / 2, direct(0.5), 0.9866143), (n, direct(1.0), 0.9999092)];
    let mut worst: f64 = 0.0;
    for &(nb, exact, quoted) in &checks {
        let w = mmd_weight(nb, n);
        worst = worst.max((w - exact).abs()).max((w - quoted).abs());
    }
    let monotone = (1..=n).all(|i| mmd_weight(i, n) > mmd_weight(i - 1, n));
    verdict(
        1,
        "mmd weight schedule",
        worst < 1e-6 && monotone,
        format!("max deviation {worst:.2e}, strictly increasing over 0..={n}: {monotone}"),
    );
}

#[test]
fn acceptance_02_mk_mmd_matches_brute_force() {
    let t0 = Instant::now();
    let mut rng = seed::rng(20_240_601);
    let (mut cases, mut worst) = (0, 0.0_f64);
    while cases < 200 {
        let (ns, nt, d) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=4));
        let m = [1usize, 3, 5][rng.random_range(0..3)];
        let est = if cases % 2 == 0 { Estimator::Biased } else { Estimator::Unbiased };
        if est == Estimator::Unbiased && (ns < 2 || nt < 2) {
            continue;
        }
        let a = rand_set(&mut rng, ns, d, 0.0);
        let shift = rng.random_range(-1.0..1.0);
        let b = rand_set(&mut rng, nt, d, shift);
        // half the cases use bandwidths drawn here, half the median ladder
        let fixed = (cases % 4 >= 2).then(|| (0..m).map(|_| rng.random_range(0.1..3.0)).collect::<Vec<f64>>());
        let cfg = MkMmdConfig {
            n_kernels: m,
            estimator: est,
            bandwidth_mode: if fixed.is_some() { BandwidthMode::Fixed } else { BandwidthMode::MedianLadder },
            fixed_sigmas: fixed,
            ..MkMmdConfig::default()
        };
        let sigmas = cfg.sigmas(a.view(), b.view()).unwrap();
        let got = mk_mmd(a.view(), b.view(), &cfg).unwrap();
        worst = worst.max((got - brute_mmd(&a, &b, &sigmas, est)).abs());
        cases += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "MK-MMD vs brute force",
        worst < 1e-10 && secs < 10.0,
        format!("{cases} cases, max abs error {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn acceptance_03_mmd_properties() {
    let mut rng = seed::rng(33);
    let cfg = MkMmdConfig::default();
    let (mut min_biased, mut worst_sym) = (f64::INFINITY, 0.0_f64);
    let mut identical_zero = true;
    for _ in 0..1000 {
        let (ns, nt, d) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..5));
        let scale = rng.random_range(0.01..10.0);
        let a = rand_set(&mut rng, ns, d, 0.0) * scale;
        let shift = rng.random_range(-2.0..2.0);
        let b = rand_set(&mut rng, nt, d, shift) * scale;
        let ab = mk_mmd(a.view(), b.view(), &cfg).unwrap();
        let ba = mk_mmd(b.view(), a.view(), &cfg).unwrap();
        min_biased = min_biased.min(ab);
        worst_sym = worst_sym.max((ab - ba).abs());
        identical_zero &= mk_mmd(a.view(), a.view(), &cfg).unwrap() == 0.0;
    }
    verdict(
        3,
        "MMD properties",
        min_biased >= 0.0 && worst_sym <= 1e-12 && identical_zero,
        format!("min biased {min_biased:.2e}, max asymmetry {worst_sym:.2e}, identical sets exactly 0: {identical_zero}"),
    );
}

fn small_dantr(h: usize) -> DanTr {
    DanTr::new(DanTrArch {
        shared_recurrent_layers: 1,
        tailored_recurrent_layers: 1,
        tailored_dense_layers: 2,
        hidden_dim: h,
    })
    .unwrap()
}

#[test]
fn acceptance_04_full_loss_gradient() {
    let t0 = Instant::now();
    let net = small_dantr(8);
    let p = net.init(404);
    let mut rng = seed::rng(405);
    let (xs, xt) = (rand_set(&mut rng, 4, 12, 0.0), rand_set(&mut rng, 4, 12, 0.0));
    let (ys, yt) = (rand_set(&mut rng, 4, 12, 0.0), rand_set(&mut rng, 4, 12, 0.0));
    let cfg = MkMmdConfig::default();
    let lambda = mmd_weight(300, 1000);
    let b = net.forward(&p, xs.view(), xt.view(), &cfg, true).unwrap();
    // bandwidths are data-dependent; fix this batch's so the loss is smooth in the parameters
    let sigmas = cfg
        .layers()
        .map(|l| cfg.sigmas(b.hidden_adapt[l].view(), b.hidden_target[l].view()).unwrap())
        .collect();
    let opts = GradOptions {
        sigmas: Some(sigmas),
        ..GradOptions::default()
    };
    let (parts, g) = net.gradients(&p, &b, ys.view(), yt.view(), lambda, &cfg, &opts).unwrap();
    let loss = |q: &DanTrParams| {
        let b = net.forward(q, xs.view(), xt.view(), &cfg, true).unwrap();
        net.gradients(q, &b, ys.view(), yt.view(), lambda, &cfg, &opts).unwrap().0.total
    };
    let central = |i: usize, h: f64| {
        let (mut plus, mut minus) = (p.clone(), p.clone());
        *plus.get_mut(i) += h;
        *minus.get_mut(i) -= h;
        (loss(&plus) - loss(&minus)) / (2.0 * h)
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    // ReLU units make the loss piecewise smooth. A parameter within h of a kink
    // (or with a gradient small enough for round-off to dominate) shows up as
    // central differences at h and h/2 disagreeing; it is redrawn. The test
    // never looks at the analytic value when deciding.
    let h = 1e-6;
    let (mut worst, mut checked, mut kinks) = (0.0_f64, 0, 0);
    while checked < 60 {
        let i = rng.random_range(0..p.len());
        let (n1, n2) = (central(i, h), central(i, h / 2.0));
        if rel(n1, n2) > 1e-5 {
            kinks += 1;
            continue;
        }
        worst = worst.max(rel(g.get(i), n1));
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        4,
        "DAN-TR loss gradient",
        worst < 1e-4 && parts.mmd > 0.0 && secs < 120.0,
        format!(
            "{checked} parameters, max relative error {worst:.2e} (h {h:e}, {kinks} redrawn as numerically unstable), mmd term {:.2e}, {secs:.2}s",
            parts.mmd
        ),
    );
}

fn toy_set(role: Role, n: usize, t_len: usize, phase: f64, tag: &str) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let u: Vec<f64> = (0..t_len).map(|t| 0.8 * (0.3 * t as f64 + phase + 0.7 * i as f64).sin()).collect();
            let mut acc = 0.0;
            let y = u
                .iter()
                .map(|&x| {
                    acc = 0.8 * acc + 0.2 * x;
                    0.5 * x + 0.4 * acc
                })
                .collect();
            TimeSeriesSample::labeled(format!("{tag}{i}"), u, y).unwrap()
        })
        .collect();
    Dataset::new(role, 0.02, samples).unwrap().with_scale(Scale::Normalized, None)
}

#[test]
fn acceptance_05_sharing_and_stop_gradient() {
    let net = small_dantr(6);
    let source = toy_set(Role::Combined, 8, 16, 0.5, "s");
    let target = toy_set(Role::TargetLabeled, 3, 16, 0.0, "t");
    let cfg = TrainConfig {
        n_steps: 100,
        batch_size: 4,
        base_lr: 5e-3,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    let mut dcfg = DanTrTrainConfig::default();
    dcfg.mmd.layer_range = (0, 1);
    dcfg.target_batch_size = 3;
    let out = train_dantr(&net, &source, &target, &target, &cfg, &dcfg, None).unwrap();
    let p = &out.params;
    let rows: Vec<&[f64]> = target.samples().iter().map(|s| s.input.as_slice()).collect();
    let xt = batch_matrix(&rows).unwrap();
    let bundle = net.forward(p, xt.view(), xt.view(), &dcfg.mmd, true).unwrap();
    // the adaptation branch is the source branch run on target inputs
    let adapt = bundle.y_hat_st.clone().unwrap();
    let shared_ok = adapt == bundle.y_hat_s && adapt == net.source_network(p).unwrap().predict(xt.view()).unwrap();
    let target_ok = bundle.y_hat_t == net.target_network(p).unwrap().predict(xt.view()).unwrap();

    let yt = batch_matrix(&target.samples().iter().map(|s| s.output.as_deref().unwrap()).collect::<Vec<_>>()).unwrap();
    let without = net.forward(p, xt.view(), xt.view(), &dcfg.mmd, false).unwrap();
    let opts = GradOptions::default();
    let (_, g_with) = net.gradients(p, &bundle, yt.view(), yt.view(), 0.0, &dcfg.mmd, &opts).unwrap();
    let (_, g_without) = net.gradients(p, &without, yt.view(), yt.view(), 0.0, &dcfg.mmd, &opts).unwrap();
    let max_diff = (0..g_with.len()).map(|i| (g_with.get(i) - g_without.get(i)).abs()).fold(0.0, f64::max);
    verdict(
        5,
        "branch sharing and stop-gradient",
        shared_ok && target_ok && max_diff == 0.0,
        format!("adaptation == source branch bitwise: {shared_ok}, target branch consistent: {target_ok}, reg-gradient difference {max_diff:e}"),
    );
}

#[test]
fn acceptance_06_ema_closed_form() {
    let (alpha, s) = (TrainConfig::default().ema_alpha, 2.75);
    let mut t = vec![0.0];
    for _ in 0..3 {
        ema_update(&mut t, &[s], alpha).unwrap();
    }
    let err = (t[0] - s * (1.0 - alpha.powi(3))).abs();
    verdict(
        6,
        "EMA closed form",
        err < 1e-12 && alpha == 0.999,
        format!("three-step error {err:.2e}, default alpha {alpha}"),
    );
}

fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_toml(DESK_CONFIG).unwrap();
    cfg.data.case_study.length = 48;
    cfg.data.case_study.dt = 0.1;
    cfg.data.case_study.n_labeled = 40;
    cfg.data.case_study.n_target = 5;
    cfg.data.case_study.n_unlabeled_base = 10;
    cfg.data.case_study.n_unlabeled = 60;
    cfg.framework.n_inits = 2;
    cfg.framework.max_iterations = 4;
    cfg.framework.pseudo_count_per_iter = 20;
    cfg.framework.master_seed = seed;
    cfg.surrogate.hidden_dim = 6;
    cfg.dantr.hidden_dim = 6;
    for t in [Some(&mut cfg.train), cfg.train_direct.as_mut(), cfg.train_final.as_mut(), Some(&mut cfg.train_dantr)]
        .into_iter()
        .flatten()
    {
        t.n_steps = 30;
        t.eval_interval = 10;
    }
    cfg.transfer.target_batch_size = 4;
    cfg
}

#[test]
fn acceptance_07_determinism_and_resume() {
    let cfg = tiny_config(77);
    let run = |dir: &Path| -> RunRecord {
        let data = FrameworkData::load(&cfg.data).unwrap();
        FrameworkRun::create(dir, cfg.clone(), data).unwrap().run_to_end().unwrap()
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    let second = run(b.path());

    let data = FrameworkData::load(&cfg.data).unwrap();
    let mut interrupted = FrameworkRun::create(c.path(), cfg.clone(), data).unwrap();
    interrupted.step().unwrap();
    interrupted.step().unwrap();
    drop(interrupted);
    let resumed = FrameworkRun::resume(c.path()).unwrap().run_to_end().unwrap();
    let ok = first == second && first == resumed && first.complete;
    verdict(
        7,
        "determinism and resume",
        ok,
        format!(
            "{} iterations; repeat identical: {}, kill-and-resume identical: {}",
            first.iterations.len(),
            first == second,
            first == resumed
        ),
    );
}

struct DeskRun {
    history: Vec<IterationRecord>,
    tentative: IterationRecord,
    seconds: f64,
    cfg: RunConfig,
}

/// The desk-scale run shared by criteria 8-10: the scheduled iterations plus
/// a tentative third PL iteration after the second scheduled one. Kept in
/// `$ACCEPTANCE_RUN_DIR` when set.
fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::from_toml(DESK_CONFIG).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = std::env::var_os("ACCEPTANCE_RUN_DIR").map_or_else(|| tmp.path().to_path_buf(), Into::into);
        let t0 = Instant::now();
        let data = FrameworkData::load(&cfg.data).unwrap();
        let mut run = FrameworkRun::create(&dir, cfg.clone(), data).unwrap();
        let mut tentative = None;
        while !run.is_complete() {
            if run.history().len() == 3 && tentative.is_none() {
                tentative = Some(run.tentative_pl().unwrap());
            }
            let r = run.step().unwrap().unwrap();
            let line = format!(
                "  desk run iteration {} {}: per-init val {:?} avg {:.4e} ({:.0}s elapsed)\n",
                r.index,
                r.kind.label(),
                r.per_seed_val_mse,
                r.avg_val_mse,
                t0.elapsed().as_secs_f64()
            );
            let _ = std::io::stderr().write_all(line.as_bytes());
        }
        DeskRun {
            history: run.history().to_vec(),
            tentative: tentative.expect("the schedule starts with two PL iterations"),
            seconds: t0.elapsed().as_secs_f64(),
            cfg,
        }
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[test]
fn acceptance_08_end_to_end_improvement() {
    let run = desk_run();
    let cs = &run.cfg.data.case_study;
    let fw = &run.cfg.framework;
    let kinds: Vec<&str> = run.history.iter().map(|r| r.kind.label()).collect();
    let schedule_ok = kinds == ["direct", "pl", "pl", "dantr", "pl", "pl", "dantr", "final"]
        && cs.n_target == 10
        && cs.length == 256
        && cs.n_unlabeled == 2000
        && fw.pseudo_count_per_iter == 500
        && fw.n_inits == 3;
    let direct = median(&run.history[0].per_seed_val_mse);
    let fin = median(&run.history.last().unwrap().per_seed_val_mse);
    let ratio = fin / direct;
    let minutes = run.seconds / 60.0;
    verdict(
        8,
        "end-to-end improvement",
        schedule_ok && ratio <= 0.6 && minutes <= 30.0,
        format!(
            "median final {fin:.4e} / median direct {direct:.4e} = {ratio:.3} (bar 0.6); schedule {}; {minutes:.1} min",
            kinds.join(",")
        ),
    );
}

#[test]
fn acceptance_09_pl_decay() {
    let run = desk_run();
    let h = &run.history;
    assert!(h[1].kind == IterationKind::Pl && h[2].kind == IterationKind::Pl && run.tentative.tentative);
    let first = per_seed_reduction(&h[0], &h[1]);
    let third = per_seed_reduction(&h[2], &run.tentative);
    let wins = first.iter().zip(&third).filter(|(f, t)| t < f).count();
    verdict(
        9,
        "PL decay",
        wins >= 2,
        format!("first PL reductions {first:.3?}, third PL reductions {third:.3?}; third smaller in {wins}/3 seeds"),
    );
}

#[test]
fn acceptance_10_dantr_rejuvenation() {
    let run = desk_run();
    let h = &run.history;
    assert!(h[2].kind == IterationKind::Pl && h[3].kind == IterationKind::Dantr && h[4].kind == IterationKind::Pl);
    let before = per_seed_reduction(&h[1], &h[2]);
    let after = per_seed_reduction(&h[3], &h[4]);
    let wins = before.iter().zip(&after).filter(|(b, a)| a > b).count();
    verdict(
        10,
        "DAN-TR rejuvenation",
        wins >= 2,
        format!("last PL before transfer {before:.3?}, PL after transfer {after:.3?}; larger in {wins}/3 seeds"),
    );
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6, 2usize..24).prop_flat_map(|(n, t)| {
        prop::collection::vec(
            (prop::collection::vec(-50.0f64..50.0, t), prop::collection::vec(-500.0f64..500.0, t)),
            n,
        )
        .prop_map(|rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (u, y))| TimeSeriesSample::labeled(format!("p{i}"), u, y).unwrap())
                .collect();
            Dataset::new(Role::Combined, 0.01, samples).unwrap()
        })
    })
}

#[test]
fn acceptance_11_data_invariants() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 64,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let round_trip = runner.run(&arb_dataset(), |ds| {
        let Ok(norm) = fit_normalization(&ds) else {
            // constant channels cannot be normalized; that refusal is its own contract
            return Ok(());
        };
        for s in ds.samples() {
            let back = denormalize(&normalize(s, &norm), &norm);
            for (a, b) in back.input.iter().zip(&s.input).chain(back.output.iter().flatten().zip(s.output.iter().flatten())) {
                let err = (a - b).abs() / b.abs().max(1.0);
                prop_assert!(err < 1e-12, "round trip error {err}");
            }
        }
        Ok(())
    });
    let io = runner.run(&arb_dataset(), |ds| {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("d");
        write_dataset(&ds, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), ds);
        Ok(())
    });
    // split sizes and disjointness on a 400-sample set
    let sizes = split_sizes(400, (0.8, 0.1, 0.1)).unwrap();
    let big = Dataset::new(
        Role::Combined,
        0.02,
        (0..400)
            .map(|i| TimeSeriesSample::labeled(format!("s{i}"), vec![i as f64, 1.0], vec![0.0, i as f64]).unwrap())
            .collect(),
    )
    .unwrap();
    let (tr, va, te) = split_dataset(&big, (0.8, 0.1, 0.1), 5).unwrap();
    let mut ids: Vec<&str> = [&tr, &va, &te].iter().flat_map(|d| d.samples().iter().map(|s| s.id.as_str())).collect();
    ids.sort_unstable();
    ids.dedup();
    let split_ok = sizes == (320, 40, 40) && (tr.len(), va.len(), te.len()) == sizes && ids.len() == 400;
    let ok = round_trip.is_ok() && io.is_ok() && split_ok;
    verdict(
        11,
        "normalization, split and file round trips",
        ok,
        format!(
            "normalization round trip: {}, dataset I/O exact: {}, split {:?} disjoint and complete: {split_ok}",
            round_trip.is_ok(),
            io.is_ok(),
            sizes
        ),
    );
}

/// Forward Euler on the same piecewise-linear displacement, written from the
/// model equations independently of the RK4 integrator.
fn euler(u: &[f64], dt: f64, p: &BoucWenParams, h: f64) -> Vec<f64> {
    let n = (dt / h).round() as usize;
    let h = dt / n as f64;
    let mut z = 0.0_f64;
    let mut out = vec![0.0];
    for i in 1..u.len() {
        let v = (u[i] - u[i - 1]) / dt;
        for _ in 0..n {
            z += h * (p.a * v - p.beta * v.abs() * z.abs().powf(p.n_exp - 1.0) * z - p.gamma * v * z.abs().powf(p.n_exp));
        }
        out.push(p.alpha * p.k * (u[i] - u[0]) + (1.0 - p.alpha) * p.k * z);
    }
    out
}

#[test]
fn acceptance_12_bouc_wen_oracles() {
    let dt = 0.02;
    let linear = BoucWenParams {
        a: 1.0,
        beta: 0.0,
        gamma: 0.0,
        ..BoucWenParams::default_for(dt)
    };
    let u: Vec<f64> = (0..300).map(|i| 2.5 * (i as f64 * 0.07).sin()).collect();
    let r = boucwen_response(&u, dt, &linear).unwrap();
    let lin_err = r
        .iter()
        .zip(&u)
        .filter(|(_, ui)| ui.abs() > 1e-6)
        .map(|(ri, ui)| (ri - linear.k * ui).abs() / (linear.k * ui).abs())
        .fold(0.0, f64::max);

    // standard cyclic input: three sine cycles of growing amplitude
    let p = BoucWenParams::default_for(dt);
    let cyc: Vec<f64> = (0..300)
        .map(|i| {
            let t = i as f64 * dt;
            (0.5 + 0.5 * t / 6.0) * 2.0 * (2.0 * std::f64::consts::PI * t / 2.0).sin()
        })
        .collect();
    let rk = boucwen_response(&cyc, dt, &p).unwrap();
    let fine = euler(&cyc, dt, &p, p.dt_sub / 100.0);
    let scale = fine.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let rk_err = rk.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    verdict(
        12,
        "Bouc-Wen oracles",
        lin_err < 1e-9 && rk_err < 1e-4,
        format!("linear-elastic relative error {lin_err:.2e}, RK4 vs 100x finer Euler {rk_err:.2e}"),
    );
}
