//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits nonzero on any failure.

use nalgebra::{Matrix3, Vector3};
use ndarray::{array, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinpair::dynamics::{
    correlation_tensor, joint_singlet_probability_direct, PropagationMethod, singlet_probability_factorized, CorrelationTensor, DynamicsOptions,
    TimeGrid,
};
use spinpair::ensemble::{
    quantile, random_coupling_system, run_structure_batch, simulate_pair, transfer_grid, yield_vs_size_study, RandomEnsembleSpec,
    RunConfig,
};
use spinpair::fixtures;
use spinpair::hamiltonian::{HBAR, MU0_OVER_4PI};
use spinpair::observables::{
    concurrence, diffusion_traversal_time, reduced_pair_density, threshold_crossings, unique_frequency_bound,
};
use spinpair::relaxation::{default_orientation_grid, longitudinal_rate, relaxation_superop, Mechanism};
use spinpair::spin::SpinSystem;
use std::time::Instant;

type C = Complex64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_molecule(rng: &mut ChaCha8Rng, n: usize) -> SpinSystem {
    let mut j = Array2::zeros((n, n));
    for a in 0..n {
        for b in a + 1..n {
            let v = rng.random_range(-1.0..1.0);
            j[[a, b]] = v;
            j[[b, a]] = v;
        }
    }
    let mut pos: Vec<Vector3<f64>> = Vec::new();
    while pos.len() < n {
        let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        if pos.iter().all(|q| (p - q).norm() > 2.5) {
            pos.push(p);
        }
    }
    let field = if rng.random_bool(0.5) { 0.0 } else { 50e-6 };
    SpinSystem::from_couplings(j)
        .unwrap()
        .with_positions(pos)
        .unwrap()
        .with_tau_c(1e-8)
        .unwrap()
        .with_field(field)
        .unwrap()
}

fn criterion_1() -> Outcome {
    let cases = [(16, 7380u128), (13, 3159), (64, 2035152), (44, 448877)];
    let got: Vec<u128> = cases.iter().map(|&(n, _)| unique_frequency_bound(n).unwrap()).collect();
    let pass = cases.iter().zip(&got).all(|(c, g)| c.1 == *g);
    outcome(pass, format!("z(16,13,64,44) = {got:?}"))
}

fn criterion_2() -> Outcome {
    let grid = TimeGrid::linear(20.0, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_p, mut worst_rho) = (0.0f64, 0.0f64);
    let mut runs = 0;
    for _ in 0..20 {
        let na = rng.random_range(2..=3);
        let a = random_molecule(&mut rng, na);
        let nb = rng.random_range(2..=3);
        let b = random_molecule(&mut rng, nb);
        let pair = (rng.random_range(0..a.n_spins), rng.random_range(0..b.n_spins));
        let b = b.with_field(a.b_field_t).unwrap();
        for opts in [DynamicsOptions::coherent(), DynamicsOptions::with_relaxation(&[Mechanism::Dipolar])] {
            let direct = joint_singlet_probability_direct(&a, &b, pair, &grid, &opts).unwrap();
            let ma = correlation_tensor(&a, pair.0, pair.0, &grid, &opts).unwrap();
            let mb = correlation_tensor(&b, pair.1, pair.1, &grid, &opts).unwrap();
            let p = singlet_probability_factorized(&ma, &mb).unwrap();
            worst_p = worst_p.max(max_diff(&p, &direct.p));
            let rho = reduced_pair_density(&ma, &mb).unwrap();
            for (x, y) in rho.rho.iter().zip(&direct.pair_density) {
                worst_rho = worst_rho.max((x - y).iter().map(|z| z.norm()).fold(0.0, f64::max));
            }
            runs += 1;
        }
    }
    outcome(
        worst_p < 1e-10 && worst_rho < 1e-10,
        format!("{runs} runs, max |dp| = {worst_p:.2e}, max |d rho| = {worst_rho:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let grid = TimeGrid::linear(100.0, 200).unwrap();
    let mut worst_p0 = 0.0f64;
    let mut systems = fixtures::dimers();
    systems.push(fixtures::fixture("monomer").unwrap());
    systems.extend(fixtures::SYNTHETIC.iter().map(|n| fixtures::fixture(n).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    systems.extend((0..5).map(|_| random_molecule(&mut rng, 3)));
    for s in &systems {
        for opts in [DynamicsOptions::coherent(), DynamicsOptions::with_relaxation(&[Mechanism::Dipolar])] {
            let method = if s.n_spins > 4 {
                PropagationMethod::KrylovExpm
            } else {
                PropagationMethod::Eigendecomposition
            };
            let cfg = RunConfig {
                grid: TimeGrid::linear(1.0, 2).unwrap(),
                dynamics: DynamicsOptions { method, ..opts },
                concurrence: false,
                ..RunConfig::default()
            };
            let p = simulate_pair(s, &cfg).unwrap().p;
            worst_p0 = worst_p0.max((p[0] - 1.0).abs());
        }
    }
    let zero = SpinSystem::from_couplings(Array2::zeros((4, 4))).unwrap();
    let flat = simulate_pair(
        &zero,
        &RunConfig {
            grid: grid.clone(),
            ..RunConfig::default()
        },
    )
    .unwrap()
    .p;
    let flat_err = flat.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    let zero_m = CorrelationTensor {
        times: vec![0.0, 1.0],
        m: vec![Matrix3::zeros(); 2],
        source: 0,
        probe: 0,
    };
    let quarter = singlet_probability_factorized(&zero_m, &zero_m).unwrap();
    let pass = worst_p0 <= 1e-12 && flat_err <= 1e-12 && quarter.iter().all(|&p| p == 0.25);
    outcome(
        pass,
        format!(
            "{} systems: max |p(0)-1| = {worst_p0:.1e}; uncoupled max |p-1| = {flat_err:.1e}; m=0 gives {:?}",
            systems.len(),
            quarter
        ),
    )
}

fn criterion_4() -> Outcome {
    let grid = TimeGrid::linear(100.0, 1000).unwrap();
    // [default frame, explicit field] x [coherent, dipolar]
    let mut worst = [[0.0f64; 2]; 2];
    for s in fixtures::dimers() {
        for (k, relax) in [false, true].into_iter().enumerate() {
            let base = if relax {
                DynamicsOptions::with_relaxation(&[Mechanism::Dipolar])
            } else {
                DynamicsOptions::coherent()
            };
            let cfg = RunConfig {
                grid: grid.clone(),
                dynamics: base.clone(),
                concurrence: false,
                ..RunConfig::default()
            };
            let explicit = RunConfig {
                dynamics: DynamicsOptions {
                    zeeman_frame: false,
                    ..base
                },
                ..cfg.clone()
            };
            let p0 = simulate_pair(&s.clone().with_field(0.0).unwrap(), &cfg).unwrap().p;
            let field = s.clone().with_field(50e-6).unwrap();
            let p1 = simulate_pair(&field, &cfg).unwrap().p;
            let p2 = simulate_pair(&field, &explicit).unwrap().p;
            worst[0][k] = worst[0][k].max(max_diff(&p0, &p1));
            worst[1][k] = worst[1][k].max(max_diff(&p0, &p2));
        }
    }
    let pass = worst[0].iter().all(|&w| w <= 1e-10) && worst[1].iter().all(|&w| w <= 1e-9);
    outcome(
        pass,
        format!(
            "6 dimers, max |p(0 T) - p(50 uT)|: {:.1e} coherent, {:.1e} dipolar; with the field propagated explicitly {:.1e} coherent, {:.1e} dipolar",
            worst[0][0], worst[0][1], worst[1][0], worst[1][1]
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = RunConfig {
        concurrence: false,
        ..RunConfig::default()
    };
    let mut lines = Vec::new();
    let mut all_long = true;
    let mut any_recurrence = false;
    for s in fixtures::dimers() {
        let series = simulate_pair(&s, &cfg).unwrap();
        let report = threshold_crossings(&series.times, &series.p, 0.5).unwrap();
        let last = report.last_above_s.unwrap_or(0.0);
        let first = report.first_below_s.unwrap_or(f64::INFINITY);
        let recurrence = first < 500.0
            && series
                .times
                .iter()
                .zip(&series.p)
                .any(|(&t, &p)| t > 500.0 && p > 0.5);
        all_long &= last > 100.0;
        any_recurrence |= recurrence;
        lines.push(format!("{} last_above {:.1} s", s.label, last));
    }
    outcome(all_long && any_recurrence, format!("{}; recurrence beyond 500 s: {any_recurrence}", lines.join(", ")))
}

fn kron(a: &Array2<C>, b: &Array2<C>) -> Array2<C> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

fn spin_halves() -> [Array2<C>; 3] {
    let c = |re: f64, im: f64| C::new(re, im);
    [
        array![[c(0.0, 0.0), c(0.5, 0.0)], [c(0.5, 0.0), c(0.0, 0.0)]],
        array![[c(0.0, 0.0), c(0.0, -0.5)], [c(0.0, 0.5), c(0.0, 0.0)]],
        array![[c(0.5, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-0.5, 0.0)]],
    ]
}

fn comm(a: &Array2<C>, b: &Array2<C>) -> Array2<C> {
    a.dot(b) - b.dot(a)
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    let w = 2.0 / ((1.0 - x * x) * dp * dp);
                    return (x, w);
                }
            }
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let r = 4.5;
    let s = SpinSystem::from_couplings(array![[0.0, 0.3], [0.3, 0.0]])
        .unwrap()
        .with_positions(vec![Vector3::zeros(), Vector3::new(0.0, 0.0, r)])
        .unwrap();
    let gamma = relaxation_superop(&s, &[Mechanism::Dipolar], &default_orientation_grid()).unwrap();
    let rate = longitudinal_rate(&gamma).unwrap();

    // Hilbert-space double commutator of the dipolar coupling, averaged over the sphere
    let b = MU0_OVER_4PI * s.gamma_rad_s_t * s.gamma_rad_s_t * HBAR / (r * 1e-10f64).powi(3);
    let i2 = Array2::<C>::eye(2);
    let sh = spin_halves();
    let i1: Vec<Array2<C>> = sh.iter().map(|m| kron(m, &i2)).collect();
    let i2v: Vec<Array2<C>> = sh.iter().map(|m| kron(&i2, m)).collect();
    let fz = &i1[2] + &i2v[2];
    let norm = fz.dot(&fz).diag().sum().re;
    let mut total = 0.0;
    let gl = gauss_legendre(24);
    let n_phi = 48;
    for &(ct, w) in &gl {
        let st = (1.0 - ct * ct).sqrt();
        for k in 0..n_phi {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / n_phi as f64;
            let u = [st * phi.cos(), st * phi.sin(), ct];
            let mut h = Array2::<C>::zeros((4, 4));
            for a in 0..3 {
                h = h + i1[a].dot(&i2v[a]);
            }
            let iu1 = (0..3).fold(Array2::<C>::zeros((4, 4)), |acc, a| acc + &i1[a] * C::new(u[a], 0.0));
            let iu2 = (0..3).fold(Array2::<C>::zeros((4, 4)), |acc, a| acc + &i2v[a] * C::new(u[a], 0.0));
            h = (h - iu1.dot(&iu2) * C::new(3.0, 0.0)) * C::new(b, 0.0);
            let dd = comm(&h, &comm(&h, &fz));
            total += w / (2.0 * n_phi as f64) * fz.dot(&dd).diag().sum().re;
        }
    }
    let oracle = s.tau_c_s * total / norm;
    let rel = (rate - oracle).abs() / oracle;
    outcome(rel < 0.01, format!("R1 from Gamma {rate:.6e} s^-1, quadrature {oracle:.6e} s^-1, rel diff {rel:.2e}"))
}

fn axial_shielding(system: &SpinSystem, delta_ppm: f64) -> Vec<Matrix3<f64>> {
    let pos = system.positions.as_ref().unwrap();
    let centroid = pos.iter().sum::<Vector3<f64>>() / pos.len() as f64;
    pos.iter()
        .map(|p| {
            let u = (p - centroid).normalize();
            let d = delta_ppm * 1e-6;
            // isotropic part 0, anisotropy d along u
            (u * u.transpose()) * d - Matrix3::identity() * (d / 3.0)
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let base = fixtures::fixture("dimer_s4").unwrap();
    let with_tensors = base.clone().with_shielding(axial_shielding(&base, 100.0)).unwrap();
    let grid = TimeGrid::linear(1000.0, 2000).unwrap();
    let change = |field: f64| {
        let s = with_tensors.clone().with_field(field).unwrap();
        let run = |mechs: &[Mechanism]| {
            let cfg = RunConfig {
                grid: grid.clone(),
                dynamics: DynamicsOptions::with_relaxation(mechs),
                concurrence: false,
                ..RunConfig::default()
            };
            simulate_pair(&s, &cfg).unwrap().p
        };
        max_diff(&run(&[Mechanism::Dipolar]), &run(&[Mechanism::Dipolar, Mechanism::Csa]))
    };
    let low = change(50e-6);
    let high = change(2.0);
    let ratio = high / low;
    outcome(
        low < 1e-4 && ratio >= 1e4,
        format!("max |dp| from CSA: {low:.2e} at 50 uT, {high:.2e} at 2 T, ratio {ratio:.2e}"),
    )
}

fn random_density(rng: &mut ChaCha8Rng) -> Array2<C> {
    let g = Array2::from_shape_fn((4, 4), |_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let rho = g.dot(&g.t().mapv(|z| z.conj()));
    let tr = rho.diag().sum();
    rho / tr
}

fn random_unitary2(rng: &mut ChaCha8Rng) -> Array2<C> {
    let (a, b, phase, mix): (f64, f64, f64, f64) = (
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..1.6),
    );
    let e = |x: f64| C::new(0.0, x).exp();
    let (u, v) = (e(a) * mix.cos(), e(b) * mix.sin());
    array![[u, v], [-v.conj(), u.conj()]] * e(phase)
}

fn criterion_8() -> Outcome {
    let s = 1.0 / 2f64.sqrt();
    let singlet = array![0.0, s, -s, 0.0].mapv(|x| C::new(x, 0.0));
    let pure = Array2::from_shape_fn((4, 4), |(i, j)| singlet[i] * singlet[j].conj());
    let c_singlet = concurrence(&pure).unwrap();
    let mixed = Array2::<C>::eye(4) / C::new(4.0, 0.0);
    let c_mixed = concurrence(&mixed).unwrap();
    let mut werner_err = 0.0f64;
    for k in 0..=100 {
        let p = k as f64 / 100.0;
        let rho = &pure * C::new(p, 0.0) + &mixed * C::new(1.0 - p, 0.0);
        let want = ((3.0 * p - 1.0) / 2.0).max(0.0);
        werner_err = werner_err.max((concurrence(&rho).unwrap() - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lu_err = 0.0f64;
    for _ in 0..100 {
        let rho = random_density(&mut rng);
        let u = kron(&random_unitary2(&mut rng), &random_unitary2(&mut rng));
        let rotated = u.dot(&rho).dot(&u.t().mapv(|z| z.conj()));
        lu_err = lu_err.max((concurrence(&rho).unwrap() - concurrence(&rotated).unwrap()).abs());
    }
    let pass = (c_singlet - 1.0).abs() < 1e-10 && c_mixed.abs() < 1e-10 && werner_err < 1e-10 && lu_err < 1e-9;
    outcome(
        pass,
        format!("C(singlet) = {c_singlet:.12}, C(I/4) = {c_mixed:.1e}, Werner err {werner_err:.1e}, local-unitary err {lu_err:.1e}"),
    )
}

fn criterion_9() -> Outcome {
    let rows = yield_vs_size_study(&RandomEnsembleSpec::default(), &RunConfig::default()).unwrap();
    let medians: Vec<f64> = rows.iter().map(|r| r.median.unwrap_or(f64::NAN)).collect();
    let failures: usize = rows.iter().map(|r| r.failures.len()).sum();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let sizes: Vec<usize> = rows.iter().map(|r| r.n_p).collect();
    outcome(
        decreasing && failures == 0 && sizes == vec![2, 3, 4, 5, 6] && rows.iter().all(|r| r.yields.len() == 50),
        format!("median yield by n_p {sizes:?}: {:?}; failures {failures}", medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()),
    )
}

fn criterion_10() -> Outcome {
    let t = diffusion_traversal_time(1.01e-9, 0.01).unwrap();
    let oracle = 0.01f64.powi(2) / (2.0 * 1.01e-9);
    let hours = t / 3600.0;
    outcome(
        (13.0..=14.5).contains(&hours) && (t - oracle).abs() <= 1e-9 * oracle,
        format!("{t:.4e} s = {hours:.3} h"),
    )
}

fn late_average(times: &[f64], p: &[f64], from: f64, to: f64) -> f64 {
    let mut area = 0.0;
    for i in 0..times.len() - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        if t0 >= from && t1 <= to {
            area += 0.5 * (t1 - t0) * (p[i] + p[i + 1]);
        }
    }
    area / (to - from)
}

fn criterion_11() -> Outcome {
    let systems: Vec<SpinSystem> = (0..20).map(|i| random_coupling_system(6, 1100 + i, 0.4).unwrap()).collect();
    let cfg = RunConfig {
        concurrence: false,
        ..RunConfig::default()
    };
    let summary = run_structure_batch(&systems, &cfg).unwrap();
    let firsts: Vec<f64> = summary
        .structures
        .iter()
        .map(|o| o.crossings.first_below_s.unwrap_or(f64::INFINITY))
        .collect();
    let median_first = quantile(&firsts, 0.5).unwrap();
    let mut late = Vec::new();
    for s in &systems {
        let series = simulate_pair(s, &cfg).unwrap();
        late.push(late_average(&series.times, &series.p, 500.0, 1000.0));
    }
    let mean_late = late_average(&summary.times, &summary.mean_p, 500.0, 1000.0);
    let (lo, hi) = late.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let pass = summary.failures.is_empty() && median_first < 5.0 && (mean_late - 0.25).abs() <= 0.05;
    outcome(
        pass,
        format!(
            "median first_below {median_first:.3} s; late average of the ensemble-mean p {mean_late:.4} (per system {lo:.4} to {hi:.4})"
        ),
    )
}

fn criterion_12() -> Outcome {
    let cfg = RunConfig {
        concurrence: false,
        ..RunConfig::default()
    };
    let dimer = fixtures::fixture("dimer_c2_a").unwrap();
    let grid = transfer_grid(&dimer, &cfg).unwrap();
    let mut start_err = 0.0f64;
    let mut diag_exact = true;
    for (si, &src) in grid.pairs.iter().enumerate() {
        for (qi, _) in grid.pairs.iter().enumerate() {
            if si != qi {
                start_err = start_err.max((grid.series[si][qi][0] - 0.25).abs());
            }
        }
        let standard = simulate_pair(&dimer, &RunConfig { pair: src, ..cfg.clone() }).unwrap().p;
        diag_exact &= grid.series[si][si] == standard;
    }
    let hexa = fixtures::fixture("hexa_c1").unwrap();
    let big = transfer_grid(&hexa, &cfg).unwrap();
    let mut max_off = 0.0f64;
    for (si, row) in big.series.iter().enumerate() {
        for (qi, s) in row.iter().enumerate() {
            if si != qi {
                max_off = max_off.max(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    outcome(
        start_err < 1e-12 && diag_exact && max_off < 0.5,
        format!(
            "dimer: off-diagonal |p(0)-1/4| <= {start_err:.1e}, diagonal bit-exact: {diag_exact}; six-spin max off-diagonal p = {max_off:.4}"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "frequency bound", criterion_1),
        (2, "factorization oracle", criterion_2),
        (3, "initialization and limits", criterion_3),
        (4, "Zeeman invariance", criterion_4),
        (5, "dimer longevity", criterion_5),
        (6, "dipolar relaxation oracle", criterion_6),
        (7, "CSA negligibility", criterion_7),
        (8, "concurrence", criterion_8),
        (9, "yield versus size", criterion_9),
        (10, "diffusion time", criterion_10),
        (11, "six-spin sub-second decay", criterion_11),
        (12, "cross-pair transfer", criterion_12),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!("{tag} criterion {id:>2} ({name}): {} [{:.1} s]", result.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
