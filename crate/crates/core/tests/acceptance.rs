//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line per
//! criterion, preceded by the measured values.

use std::io::Write;
use std::sync::OnceLock;

use kltwin::field::{kernel_basis, sample_gaussian_field, Axis, Field, FieldKind, Grid, RngStream, SeKernel};
use kltwin::harness::config::{ExperimentConfig, GridSpec};
use kltwin::harness::experiment::{source_datasets, transfer_run};
use kltwin::harness::{compute_error, generate_dataset, run, Controls, ErrorMode, ErrorReport, ExperimentRun, ReportRow};
use kltwin::kl::{eigenfunction_difference, empirical_basis, ensemble_mean, kld_inverse};
use kltwin::latent::{assemble_rls_linear, fit_ols, solve_rls, Mlp, RlsWeights};
use kltwin::solver::{solve_count, solve_diffusion, Ibc, Profile, SourceSpec};
use kltwin::transfer::{ConditionSpec, ControlBases};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn table1() -> &'static (ExperimentConfig, ExperimentRun) {
    static RUN: OnceLock<(ExperimentConfig, ExperimentRun)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::bundled("table1").unwrap();
        let out = run(&cfg).unwrap();
        (cfg, out)
    })
}

fn table2() -> &'static (ExperimentConfig, ExperimentRun) {
    static RUN: OnceLock<(ExperimentConfig, ExperimentRun)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::bundled("table2").unwrap();
        let out = run(&cfg).unwrap();
        (cfg, out)
    })
}

/// Written past the test harness's output capture so the line shows for
/// passing tests too.
fn verdict(criterion: u32, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {criterion}: {} ({detail})", if ok { "PASS" } else { "FAIL" }).unwrap();
}

fn within(measured: f64, reference: f64, factor: f64) -> bool {
    measured >= reference / factor && measured <= reference * factor
}

fn close(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|v| (v - b).abs() < 1e-12)
}

fn one_row<'a>(report: &'a ErrorReport, pred: impl Fn(&ReportRow) -> bool, what: &str) -> &'a ReportRow {
    let rows: Vec<_> = report.rows.iter().filter(|r| pred(r)).collect();
    assert_eq!(rows.len(), 1, "expected one report row for {what}");
    rows[0]
}

#[test]
fn criterion_1_linear_table() {
    let (_, out) = table1();
    let r = &out.report;
    // (label, alpha, beta, gamma, reference)
    let cells = [
        ("source", 1.0, 1.0, 0.0, 2.95e-4),
        ("T1", 1.0, 1.0, 0.0, 3.12e-4),
        ("T2", 0.5, 1.0, 1.0, 9.12e-4),
        ("T2", 0.8, 1.0, 0.01, 3.16e-4),
        ("T2", 1.2, 1.0, 0.0, 1.63e-4),
        ("T2", 1.5, 1.0, 0.0, 1.31e-4),
        ("T3", 1.0, 0.5, 0.0, 1.93e-4),
        ("T3", 1.0, 0.8, 0.0, 2.67e-4),
        ("T3", 1.0, 1.2, 0.0, 3.13e-4),
        ("T3", 1.0, 1.5, 0.0, 3.43e-4),
    ];
    let mut ok = true;
    for (label, a, b, g, reference) in cells {
        let row = one_row(
            r,
            |row| row.condition == label && close(row.alpha, a) && close(row.beta, b) && close(row.gamma, g),
            label,
        );
        let pass = within(row.mean_eps, reference, 3.0);
        ok &= pass;
        println!(
            "  {label} alpha={a} beta={b} gamma={g}: eps {:.3e} +- {:.2e} vs {reference:.2e} {}",
            row.mean_eps,
            row.std_eps,
            if pass { "ok" } else { "out of band" }
        );
    }
    let unreg = one_row(r, |row| row.condition == "T2" && close(row.alpha, 0.5) && close(row.gamma, 0.0), "T2 gamma 0");
    let reg = one_row(r, |row| row.condition == "T2" && close(row.alpha, 0.5) && close(row.gamma, 1.0), "T2 gamma 1");
    // "Much greater" read as at least a factor of 3.
    let ordered = unreg.mean_eps >= 3.0 * reg.mean_eps;
    println!(
        "  ordering T2 alpha=0.5: gamma=0 {:.3e} vs gamma=1 {:.3e} {}",
        unreg.mean_eps,
        reg.mean_eps,
        if ordered { "ok" } else { "violated" }
    );
    ok &= ordered;
    verdict(1, ok, "ten cells within x3 and gamma ordering");
    assert!(ok);
}

#[test]
fn criterion_2_one_shot_exactness() {
    let (_, out) = table1();
    let src = one_row(&out.report, |r| r.condition == "source", "source");
    let t1 = one_row(&out.report, |r| r.condition == "T1", "T1");
    let ratio = t1.mean_eps / src.mean_eps;
    let ok = (0.5..=2.0).contains(&ratio) && t1.n_samples == 20;
    verdict(2, ok, &format!("target/source ratio {ratio:.3} over {} samples", t1.n_samples));
    assert!(ok);
}

const SIGMA2: [f64; 3] = [0.1, 0.3, 0.6];

/// `(method, n_train, [sigma2 = 0.1, 0.3, 0.6])` for the target rows.
const TABLE2_TARGET: [(&str, usize, [f64; 3]); 11] = [
    ("rls", 0, [2.20e-3, 3.96e-3, 5.75e-3]),
    ("ols", 5, [2.86e-3, 6.95e-3, 1.32e-2]),
    ("ols", 20, [2.54e-3, 7.27e-3, 1.23e-2]),
    ("ols", 80, [9.59e-4, 3.09e-3, 7.02e-3]),
    ("kl_dnn", 5, [3.92e-3, 6.98e-3, 9.09e-3]),
    ("kl_dnn", 20, [9.82e-4, 2.53e-3, 2.74e-3]),
    ("kl_dnn", 80, [4.38e-4, 1.07e-3, 1.44e-3]),
    ("pi_kl_dnn", 0, [3.40e-4, 2.28e-3, 7.91e-3]),
    ("pi_kl_dnn", 5, [3.32e-4, 2.26e-3, 6.78e-3]),
    ("pi_kl_dnn", 20, [4.23e-4, 1.64e-3, 3.80e-3]),
    ("pi_kl_dnn", 80, [2.74e-4, 6.31e-4, 1.29e-3]),
];

const TABLE2_SOURCE: [(&str, [f64; 3]); 3] = [
    ("rls", [1.49e-3, 2.23e-3, 2.83e-3]),
    ("ols", [4.82e-4, 1.13e-3, 1.72e-3]),
    ("kl_dnn", [3.21e-4, 8.20e-4, 1.46e-3]),
];

fn table2_eps(r: &ErrorReport, condition: &str, method: &str, n: usize, s2: f64) -> f64 {
    one_row(
        r,
        |row| row.condition == condition && row.method == method && close(row.sigma2_y, s2) && (condition == "source" || row.n_train == n),
        method,
    )
    .mean_eps
}

#[test]
fn criterion_3_nonlinear_table() {
    let (_, out) = table2();
    let r = &out.report;
    for (method, refs) in TABLE2_SOURCE {
        for (i, s2) in SIGMA2.iter().enumerate() {
            println!("  source {method} s2={s2}: eps {:.3e} vs {:.2e} (not gated)", table2_eps(r, "source", method, 0, *s2), refs[i]);
        }
    }
    let mut in_band = 0;
    for (method, n, refs) in TABLE2_TARGET {
        for (i, s2) in SIGMA2.iter().enumerate() {
            let eps = table2_eps(r, "target", method, n, *s2);
            let pass = within(eps, refs[i], 3.0);
            in_band += pass as usize;
            println!(
                "  target {method} N={n} s2={s2}: eps {eps:.3e} vs {:.2e} {}",
                refs[i],
                if pass { "ok" } else { "out of band" }
            );
        }
    }
    let mut monotone = true;
    for s2 in SIGMA2 {
        let e: Vec<f64> = [5, 20, 80].iter().map(|&n| table2_eps(r, "target", "kl_dnn", n, s2)).collect();
        let dec = e[0] > e[1] && e[1] > e[2];
        monotone &= dec;
        println!("  kl_dnn target s2={s2}: {:.3e} > {:.3e} > {:.3e} {}", e[0], e[1], e[2], if dec { "ok" } else { "violated" });
    }
    let pi0 = table2_eps(r, "target", "pi_kl_dnn", 0, 0.1);
    let rls = table2_eps(r, "target", "rls", 0, 0.1);
    let beats = pi0 < rls;
    println!("  s2=0.1: pi_kl_dnn N=0 {pi0:.3e} vs rls {rls:.3e} {}", if beats { "ok" } else { "violated" });
    let total = TABLE2_TARGET.len() * SIGMA2.len();
    let ok = in_band == total && monotone && beats;
    verdict(3, ok, &format!("{in_band}/{total} target cells within x3, monotone {monotone}, PI beats RLS {beats}"));
    assert!(ok);
}

/// Source basis, target Monte Carlo ensemble and mean-field solve for one
/// bundled nonlinear case.
struct NonlinearMoments {
    mean_field_gap: f64,
    eigenfunction_gap: f64,
}

fn nonlinear_moments(ci: usize) -> NonlinearMoments {
    let cfg = ExperimentConfig::bundled("table2").unwrap();
    let setup = cfg.setup().unwrap();
    let (train, _, _) = source_datasets(&cfg, &setup, ci).unwrap();
    let target = &cfg.cases[ci].targets[0].condition;
    let mc = generate_dataset(&setup, target, 1000, RngStream::derive_seed(cfg.seed, &format!("case{ci}/target-mc"))).unwrap();
    let ks: Vec<Field> = train
        .samples
        .iter()
        .map(|s| match &s.controls {
            Controls::Nonlinear { k } => k.clone(),
            _ => unreachable!(),
        })
        .collect();
    let k_mean = ensemble_mean(&ks).unwrap();
    let ConditionSpec::Nonlinear(t) = target else { unreachable!() };
    let mean_field = solve_diffusion(setup.grid(), &k_mean, &SourceSpec::none(), &t.ibc()).unwrap();
    let mc_mean = ensemble_mean(&mc.solutions()).unwrap();
    let source_basis = empirical_basis(&train.solutions(), cfg.bases.n_eta).unwrap();
    let target_basis = empirical_basis(&mc.solutions(), cfg.bases.n_eta).unwrap();
    NonlinearMoments {
        mean_field_gap: compute_error(&mc_mean, &mean_field, ErrorMode::Total).unwrap(),
        eigenfunction_gap: eigenfunction_difference(&source_basis, &target_basis, 4).unwrap(),
    }
}

fn moments() -> &'static Vec<NonlinearMoments> {
    static M: OnceLock<Vec<NonlinearMoments>> = OnceLock::new();
    M.get_or_init(|| (0..3).map(nonlinear_moments).collect())
}

#[test]
fn criterion_4_mean_field_fidelity() {
    let refs = [1.23e-3, 2.99e-3, 5.23e-3];
    let mut ok = true;
    for (i, m) in moments().iter().enumerate() {
        let pass = within(m.mean_field_gap, refs[i], 2.0);
        ok &= pass;
        println!("  s2={}: distance {:.3e} vs {:.2e} {}", SIGMA2[i], m.mean_field_gap, refs[i], if pass { "ok" } else { "out of band" });
    }
    verdict(4, ok, "mean-field vs Monte Carlo mean within x2");
    assert!(ok);
}

#[test]
fn criterion_5_eigenfunction_fidelity() {
    let refs = [1.03e-2, 1.05e-2, 1.08e-2];
    let mut ok = true;
    for (i, m) in moments().iter().enumerate() {
        let pass = within(m.eigenfunction_gap, refs[i], 2.0);
        ok &= pass;
        println!("  s2={}: mean |phi_s - phi_t| {:.3e} vs {:.2e} {}", SIGMA2[i], m.eigenfunction_gap, refs[i], if pass { "ok" } else { "out of band" });
    }
    verdict(5, ok, "four leading unit-norm eigenfunctions within x2");
    assert!(ok);
}

fn random_k(grid: Grid, variance: f64, seed: u64) -> Field {
    let y = kernel_basis(&SeKernel::space(variance, 0.5), &grid, Axis::Space, 8).unwrap();
    sample_gaussian_field(&y, &RngStream::new(seed, 0)).0.map(f64::exp).unwrap()
}

fn orthonormality_defect(phi: &DMatrix<f64>) -> f64 {
    let g = phi.transpose() * phi - DMatrix::identity(phi.ncols(), phi.ncols());
    g.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn check(name: &str, ok: bool, detail: String, all: &mut bool) {
    println!("  {name}: {detail} {}", if ok { "ok" } else { "violated" });
    *all &= ok;
}

#[test]
fn criterion_6_property_suites() {
    let mut all = true;
    let grid = Grid::new(10, 20, 1.0, 0.03).unwrap();
    let mut rng = RngStream::new(2024, 0).rng();

    let basis = kernel_basis(&SeKernel::space_time(1.0, 0.4, 0.01), &grid, Axis::SpaceTime, 12).unwrap();
    let eta: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
    let back = kld_inverse(&basis, &basis.forward(&eta).unwrap(), 0.0).unwrap();
    let rt = eta.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check("KLD roundtrip", rt <= 1e-10, format!("{rt:.1e}"), &mut all);
    let d = orthonormality_defect(&basis.eigenfunctions());
    check("analytic orthonormality", d <= 1e-10, format!("{d:.1e}"), &mut all);

    let sols: Vec<Field> = (0..30)
        .map(|i| solve_diffusion(&grid, &random_k(grid, 0.5, i), &SourceSpec::none(), &Ibc::constant(1.05, 0.95, 1.05)).unwrap())
        .collect();
    let emp = empirical_basis(&sols, 8).unwrap();
    let d = orthonormality_defect(&emp.eigenfunctions());
    check("empirical orthonormality", d <= 1e-8, format!("{d:.1e}"), &mut all);
    let phi = emp.eigenfunctions();
    let nulling = (0..grid.len())
        .filter(|&g| grid.is_constrained(g))
        .flat_map(|g| (0..phi.ncols()).map(move |c| (g, c)))
        .fold(0.0f64, |a, (g, c)| a.max(phi[(g, c)].abs()));
    check("boundary nulling", nulling <= 1e-10, format!("{nulling:.1e}"), &mut all);

    let xi = DMatrix::from_fn(6, 40, |_, _| rng.random_range(-1.0..1.0));
    let h = DMatrix::from_fn(5, 40, |_, _| rng.random_range(-1.0..1.0));
    let w = fit_ols(&xi, &h, 0.1).unwrap();
    let grad = (&h - &w.w * &xi) * xi.transpose() - 0.1 * &w.w;
    let rel = grad.norm() / (&h * xi.transpose()).norm();
    check("OLS stationarity", rel <= 1e-8, format!("{rel:.1e}"), &mut all);

    let k = random_k(grid, 0.3, 5);
    let fb = kernel_basis(&SeKernel::space_time(1.0, 0.5, 0.015), &grid, Axis::SpaceTime, 5).unwrap();
    let qb = kernel_basis(&SeKernel::time(1.0, 0.003), &grid, Axis::Time, 3).unwrap();
    let lin: Vec<Field> = (0..20u64)
        .map(|i| {
            let src = SourceSpec {
                f: Some(sample_gaussian_field(&fb, &RngStream::new(1, i)).0),
                q: Some(sample_gaussian_field(&qb, &RngStream::new(2, i)).0),
                x_star: 0.25,
            };
            solve_diffusion(&grid, &k, &src, &Ibc::constant(1.0 + 0.01 * i as f64, 1.0, 1.0 - 0.02 * (i % 3) as f64)).unwrap()
        })
        .collect();
    let state = empirical_basis(&lin, 8).unwrap();
    let sys = assemble_rls_linear(&grid, &k, &state, &fb, &qb, 0.25, RlsWeights::default()).unwrap();
    let a: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ea = solve_rls(&sys, &a).unwrap();
    let res = sys.matrix() * DVector::from_column_slice(&ea) - sys.rhs(&a).unwrap();
    let stat = (sys.matrix().transpose() * &res).norm() / (sys.matrix().transpose() * sys.rhs(&a).unwrap()).norm();
    check("RLS stationarity", stat <= 1e-8, format!("{stat:.1e}"), &mut all);
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.7 * x - 1.3 * y).collect();
    let (eb, em) = (solve_rls(&sys, &b).unwrap(), solve_rls(&sys, &mix).unwrap());
    let lin_err = (0..em.len()).map(|i| (em[i] - (0.7 * ea[i] - 1.3 * eb[i])).abs()).fold(0.0, f64::max);
    check("RLS linearity", lin_err <= 1e-10, format!("{lin_err:.1e}"), &mut all);

    let net = Mlp::new(&[4, 6, 5, 3], 9).unwrap();
    let x = DMatrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
    let g = net.gradient(&x, &y);
    let analytic: Vec<f64> = g.weights.iter().zip(&g.biases).flat_map(|(w, b)| w.iter().chain(b.iter()).cloned().collect::<Vec<_>>()).collect();
    let p0 = net.params();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..p0.len() {
        let mut plus = net.clone();
        let mut minus = net.clone();
        let (mut pp, mut pm) = (p0.clone(), p0.clone());
        pp[i] += step;
        pm[i] -= step;
        plus.set_params(&pp).unwrap();
        minus.set_params(&pm).unwrap();
        let fd = (plus.loss(&x, &y) - minus.loss(&x, &y)) / (2.0 * step);
        worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs().max(1e-3));
    }
    check("MLP gradient vs finite differences", worst <= 1e-6, format!("{worst:.1e}"), &mut all);

    let full_grid = Grid::new(30, 250, 1.0, 0.03).unwrap();
    let mut principle = true;
    for seed in 0..100u64 {
        let mut r = RngStream::new(seed, 11).rng();
        let v: [f64; 3] = [r.random_range(0.5..1.5), r.random_range(0.5..1.5), r.random_range(0.5..1.5)];
        let h = solve_diffusion(&full_grid, &random_k(full_grid, 0.6, 1000 + seed), &SourceSpec::none(), &Ibc::constant(v[0], v[1], v[2])).unwrap();
        let (lo, hi) = (v.iter().cloned().fold(f64::MAX, f64::min), v.iter().cloned().fold(f64::MIN, f64::max));
        principle &= h.values().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12);
    }
    check("maximum principle (100 instances)", principle, String::new(), &mut all);

    let mut errs = Vec::new();
    for n_x in [9usize, 19, 39] {
        let n_t = 2 * (n_x + 1) * (n_x + 1);
        let g = Grid::new(n_x, n_t, 1.0, 0.05).unwrap();
        let ibc = Ibc {
            h0: Profile::Nodes(Field::space_fn(g, |x| (std::f64::consts::PI * x).sin())),
            hl: 0.0.into(),
            hr: 0.0.into(),
        };
        let h = solve_diffusion(&g, &Field::constant(g, FieldKind::SpaceOnly, 1.0), &SourceSpec::none(), &ibc).unwrap();
        let decay = (-std::f64::consts::PI.powi(2) * 0.05).exp();
        let e = (1..=n_x).map(|x| (h.at(x, n_t) - decay * (std::f64::consts::PI * g.x(x)).sin()).abs()).fold(0.0, f64::max);
        errs.push((g.dx(), e));
    }
    let rate = errs.windows(2).map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln()).fold(f64::MAX, f64::min);
    check("spatial convergence rate", rate >= 1.9, format!("{rate:.3}"), &mut all);

    let mut cfg = ExperimentConfig::bundled("table2").unwrap();
    cfg.grid = GridSpec {
        n_x: 22,
        n_t: 40,
        length: 1.0,
        horizon: 0.03,
    };
    cfg.n_train = 60;
    cfg.n_test = 4;
    cfg.bases.n_eta = 10;
    cfg.bases.n_xi_k = 8;
    cfg.bases.hidden = vec![8, 8];
    cfg.bases.train.max_epochs = 200;
    cfg.cases.truncate(1);
    let go = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&cfg).unwrap().report)
    };
    let same = go(1) == go(4);
    check("determinism across thread counts", same, "1 vs 4 threads".into(), &mut all);

    verdict(6, all, "property suites");
    assert!(all);
}

#[test]
fn criterion_7_transfer_cost() {
    let (cfg1, out1) = table1();
    let source = &out1.sources[0]["ols"];
    let t1 = &cfg1.cases[0].targets[0];
    let before = solve_count();
    transfer_run(source, &t1.condition, &t1.runs[0], None).unwrap();
    let linear = solve_count() - before;

    let (cfg2, out2) = table2();
    let mlp = &out2.sources[0]["mlp"];
    assert!(matches!(mlp.controls, ControlBases::Nonlinear { .. }));
    let target = &cfg2.cases[0].targets[0];
    let pi = target
        .runs
        .iter()
        .find(|r| r.method == kltwin::harness::Method::PiKlDnn && r.n_train == 0)
        .expect("bundled table lists a physics-only run");
    let before = solve_count();
    transfer_run(mlp, &target.condition, pi, None).unwrap();
    let physics = solve_count() - before;
    let ok = linear == 1 && physics == 1;
    verdict(7, ok, &format!("transfer_linear {linear} solve(s), pi_kl_dnn N=0 {physics} solve(s)"));
    assert!(ok);
}
