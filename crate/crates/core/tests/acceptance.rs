//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stderr (so it shows even when output is captured) and then
//! asserts. Tests hold a shared lock so the timed ones run alone.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rwinit::data::{encode_idx, mnist_sample, parse_idx, parse_idx_header, IdxTensor, IdxType};
use rwinit::experiment::{gradient_check_case, run, ExperimentConfig, ExperimentKind, MANIFEST_FILE};
use rwinit::net::{init_network, GradCheckConfig, Nonlinearity, Objective, OutputActivation};
use rwinit::numeric::{Moments, Rng};
use rwinit::theory::{
    estimate_optimal_g, g_linear, g_relu, ln_z_mean_relu, ln_z_var_linear, ln_z_var_relu, monte_carlo_stats, GainSearch,
    StatsSource,
};
use rwinit::trainer::{build_schedule, parameter_count, size_layers, train, SizingFamily, TrainConfig};
use rwinit::walk::{simulate_walk, variance_fit, WalkConfig, WalkMode};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn note(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn verdict(id: &str, ok: bool, detail: &str) {
    note(&format!("criterion {id}: {} ({detail})", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "criterion {id} failed: {detail}");
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn network_walk(g: f64, seed: u64) -> rwinit::walk::WalkTrace {
    simulate_walk(&WalkConfig::new(100, 500, g, Nonlinearity::Linear, 500, seed, WalkMode::Network)).unwrap()
}

#[test]
fn criterion_01_linear_optimal_gain() {
    let _guard = serial();
    let start = Instant::now();
    let g = g_linear(100).unwrap().g;
    let g_ok = (g - (1.0f64 / 200.0).exp()).abs() < 1e-15 && (g - 1.005).abs() < 5e-4;
    let t = network_walk(g, 1);
    let (mean, se) = (t.final_mean(), t.final_std_error());
    let elapsed = start.elapsed();
    let ok = g_ok && mean.abs() <= 3.0 * se && t.samples >= 500 && within(elapsed, 60);
    verdict("1", ok, &format!("g = {g:.6}, final mean ln Z = {mean:.4} ± {se:.4} (SE), {:.1}s", elapsed.as_secs_f64()));
}

#[test]
fn criterion_02_vanishing_at_unit_gain() {
    let _guard = serial();
    let t = network_walk(1.0, 2);
    let (mean, se) = (t.final_mean(), t.final_std_error());
    let expected = -500.0 / 100.0;
    verdict(
        "2",
        (mean - expected).abs() <= 3.0 * se,
        &format!("final mean ln Z = {mean:.4} ± {se:.4}, expected {expected}"),
    );
}

#[test]
fn criterion_03_variance_growth() {
    let _guard = serial();
    let samples = 4000;
    let walk = |n: usize| {
        simulate_walk(&WalkConfig::new(n, 500, g_linear(n).unwrap().g, Nonlinearity::Linear, samples, 3, WalkMode::Abstract)).unwrap()
    };
    let fit100 = variance_fit(&walk(100)).unwrap();
    let fit200 = variance_fit(&walk(200)).unwrap();
    let ratio = fit200.slope / fit100.slope;

    // Independent per-step oracle: the sample variance of ln z drawn directly.
    let step = monte_carlo_stats(Nonlinearity::Linear, 100, 1.0, 400_000, 33).unwrap();
    let step_se = match step.source {
        StatsSource::MonteCarlo { variance_std_error, .. } => variance_std_error,
        StatsSource::ClosedForm => unreachable!(),
    };
    let slope_tol = 3.0 * fit100.slope * (2.0 / (samples - 1) as f64).sqrt() + 3.0 * step_se;
    let closed = ln_z_var_linear(100).unwrap();

    // The closed form describes the log of the norm ratio, half of ln z.
    let mut rng = Rng::new(34);
    let halves: Vec<f64> = (0..400_000)
        .map(|_| 0.5 * rwinit::theory::sample_ln_z(Nonlinearity::Linear, 100, 1.0, &mut rng).unwrap())
        .collect();
    let half_var = Moments::from_slice(&halves).variance();

    note(&format!(
        "  slope(N=100) = {:.6}, R² = {:.5}; slope(N=200) = {:.6}, R² = {:.5}; ratio = {ratio:.3}",
        fit100.slope, fit100.r_squared, fit200.slope, fit200.r_squared
    ));
    note(&format!(
        "  per-step Var(ln z) measured = {:.6} ± {step_se:.6}; closed form 1/(2N) = {closed:.6}; slope / closed form = {:.3}",
        step.variance,
        fit100.slope / closed
    ));
    note(&format!("  Var(½ ln z) = {half_var:.6}, ratio to 1/(2N) = {:.4}", half_var / closed));
    let ok = fit100.r_squared > 0.99
        && (ratio - 0.5).abs() <= 0.2 * 0.5
        && (fit100.slope - step.variance).abs() <= slope_tol
        && (half_var / closed - 1.0).abs() < 0.05;
    verdict(
        "3",
        ok,
        &format!(
            "R² = {:.4}, slope ratio {ratio:.3}, |slope - step variance| = {:.2e} (tolerance {slope_tol:.2e})",
            fit100.r_squared,
            (fit100.slope - step.variance).abs()
        ),
    );
}

#[test]
fn criterion_04_relu_fits() {
    let _guard = serial();
    let start = Instant::now();
    let mut ok = true;
    let mut outside = Vec::new();
    for (i, n) in [6usize, 20, 100, 500].into_iter().enumerate() {
        let mc = monte_carlo_stats(Nonlinearity::Relu, n, 1.0, 400_000, 40 + i as u64).unwrap();
        let (mean, var) = (ln_z_mean_relu(n).unwrap(), ln_z_var_relu(n).unwrap());
        let mean_err = (mc.mean - mean).abs() / mean.abs();
        let var_err = (mc.variance - var).abs() / var;
        let row_ok = mean_err <= 0.05 && var_err <= 0.10;
        ok &= row_ok;
        if !row_ok {
            outside.push(n);
        }
        let StatsSource::MonteCarlo { mean_std_error, variance_std_error, .. } = mc.source else { unreachable!() };
        note(&format!(
            "  N = {n:>3}: <ln z> MC {:.5}±{mean_std_error:.5} vs fit {mean:.5} ({:.2}%), Var MC {:.5}±{variance_std_error:.5} vs fit {var:.5} ({:.2}%) {}",
            mc.mean,
            100.0 * mean_err,
            mc.variance,
            100.0 * var_err,
            if row_ok { "ok" } else { "outside tolerance" }
        ));
    }
    // g_relu(n) = √2·exp(1.2/(max(n,6) - 2.4)): the exponent vanishes as n
    // grows, so the gap to √2 is bounded by √2(exp(1.2/(n-2.4)) - 1) → 0.
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut prev = f64::INFINITY;
    for k in 2..=10 {
        let n = 10usize.pow(k);
        let gap = g_relu(n).unwrap().g - sqrt2;
        let bound = sqrt2 * ((1.2 / (n as f64 - 2.4)).exp() - 1.0);
        ok &= gap >= -1e-15 && gap <= bound + 1e-14 && gap <= prev + 1e-15;
        prev = gap;
    }
    ok &= prev.abs() < 1e-9;
    let elapsed = start.elapsed();
    ok &= within(elapsed, 120);
    verdict(
        "4",
        ok,
        &format!("widths outside tolerance {outside:?}, g_relu(1e10) - √2 = {prev:.1e}, {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_05_empirical_optimal_gain() {
    let _guard = serial();
    let start = Instant::now();
    let search = GainSearch::default();
    let est = |nl| estimate_optimal_g(nl, 100, 200, 100, 5, &search).unwrap().recommendation.g;
    let (lin, relu, tanh) = (est(Nonlinearity::Linear), est(Nonlinearity::Relu), est(Nonlinearity::Tanh));
    let (lin_ref, relu_ref) = (g_linear(100).unwrap().g, g_relu(100).unwrap().g);
    let elapsed = start.elapsed();
    let ok = (lin - lin_ref).abs() <= 0.01
        && (relu - relu_ref).abs() <= 0.03
        && (1.1..=1.3).contains(&tanh)
        && within(elapsed, 300);
    verdict(
        "5",
        ok,
        &format!(
            "linear {lin:.4} (closed form {lin_ref:.4}), relu {relu:.4} (closed form {relu_ref:.4}), tanh {tanh:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_gradient_correctness() {
    let _guard = serial();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for nl in Nonlinearity::ALL {
        for obj in [Objective::CrossEntropy, Objective::MeanSquaredError] {
            for seed in 0..20 {
                let r = gradient_check_case(&[5, 4, 3], nl, obj, 600 + seed, GradCheckConfig::default()).unwrap();
                worst = worst.max(r.max_rel_error);
                cases += 1;
            }
        }
    }
    verdict("6", worst < 1e-6, &format!("{cases} cases, worst relative error {worst:.2e}"));
}

/// `z_d` from the explicit back-propagation matrix: the transpose of `W_d`
/// with rows scaled by the activation derivative of the layer below (none
/// for the input layer).
fn explicit_z(p: &rwinit::net::NetworkParams, trace: &rwinit::net::ForwardTrace, delta: &[f64], d: usize) -> f64 {
    let w = p.weight(d);
    let mut v = vec![0.0; w.cols()];
    for (j, vj) in v.iter_mut().enumerate() {
        let scale = if d > 1 { p.nonlinearity().derivative(trace.pre_activation(d - 1)[j]) } else { 1.0 };
        *vj = scale * (0..w.rows()).map(|i| w.get(i, j) * delta[i]).sum::<f64>();
    }
    let num: f64 = v.iter().map(|x| x * x).sum();
    let den: f64 = delta.iter().map(|x| x * x).sum();
    num / den
}

#[test]
fn criterion_07_exact_telescoping() {
    let _guard = serial();
    let mut rng = Rng::new(7);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let nl = Nonlinearity::ALL[i % 3];
        let depth = 1 + rng.below(10);
        let widths: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(12)).collect();
        let g = 0.5 + 1.5 * rng.uniform();
        let p = init_network(&widths, g, nl, nl.into(), rand::RngCore::next_u64(&mut rng)).unwrap();
        let input = rng.normal_vec(widths[0]);
        let delta_out = rng.normal_vec(widths[depth]);
        let trace = p.forward(&input).unwrap();
        let deltas = p.backward_deltas(&trace, &delta_out).unwrap();
        let measured = deltas.norm_ratio_sq();
        let mut predicted = g.powi(2 * depth as i32);
        for d in (1..=depth).rev() {
            if predicted == 0.0 {
                break;
            }
            predicted *= explicit_z(&p, &trace, deltas.delta(d), d);
        }
        let err = if measured == 0.0 && predicted == 0.0 { 0.0 } else { (measured - predicted).abs() / predicted.abs() };
        worst = worst.max(err);
    }
    verdict("7", worst <= 1e-8, &format!("100 networks, worst relative error {worst:.2e}"));
}

#[test]
fn criterion_08_schedule_identities() {
    let _guard = serial();
    let mut rng = Rng::new(8);
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    for _ in 0..1000 {
        let lin = 10f64.powf(-6.0 + 5.0 * rng.uniform());
        let lout = 10f64.powf(-6.0 + 5.0 * rng.uniform());
        let d_max = 1 + rng.below(256);
        let d = if rng.uniform() < 0.25 { d_max } else { 1 + rng.below(d_max) };
        let s = build_schedule(d, d_max, lin, lout).unwrap();
        worst = worst.max(rel(s.rate(d), lout));
        if d == d_max && d_max > 1 {
            worst = worst.max(rel(s.rate(1), lin));
        }
    }
    let flat = build_schedule(40, 64, 0.01, 0.01).unwrap();
    let flat_ok = flat.rates().iter().all(|&r| r == 0.01);
    verdict("8", worst <= 1e-12 && flat_ok, &format!("1000 tuples, worst relative endpoint error {worst:.1e}"));
}

#[test]
fn criterion_09_layer_sizing() {
    let _guard = serial();
    let shallow = size_layers(4_000_000, 4, 784, 10, SizingFamily::Constant).unwrap();
    let deep = size_layers(4_000_000, 512, 784, 10, SizingFamily::Constant).unwrap();
    let ae = size_layers(16_000_000, 4, 784, 784, SizingFamily::Autoencoder).unwrap();
    let n4 = shallow.widths[1];
    // Counting every weight and bias and taking the first width at or above
    // the budget reproduces the deep and autoencoder cases exactly; the
    // shallow case lands one unit above the published 1228, which sits
    // below the budget under this convention.
    let published_short = 4_000_000 - parameter_count(&[784, 1228, 1228, 1228, 10]) as i64;
    let ok = deep.widths[1] == 88 && ae.layer_sizes() == [9816, 30, 9816, 784] && (n4 as i64 - 1228).abs() <= 1 && published_short > 0;
    verdict(
        "9",
        ok,
        &format!(
            "D=512 N={}, autoencoder {:?}, D=4 N={n4} (published 1228, residual {:+}; 1228 is {published_short} parameters short)",
            deep.widths[1],
            ae.layer_sizes(),
            n4 as i64 - 1228
        ),
    );
}

#[test]
fn criterion_10_desk_scale_training() {
    let _guard = serial();
    let start = Instant::now();
    let data = mnist_sample(None, false).unwrap().normalize().unwrap();
    let (depth, width) = (32usize, 90usize);
    let mut widths = vec![width; depth + 1];
    widths[0] = 784;
    widths[depth] = 10;
    let schedule = build_schedule(depth, depth, 1e-2, 1e-2).unwrap();
    let run = |g: f64, epochs: usize| {
        let mut p = init_network(&widths, g, Nonlinearity::Tanh, OutputActivation::Softmax, 10).unwrap();
        let cfg = TrainConfig { minibatch: 20, epochs, seed: 11, ..TrainConfig::default() };
        train(&mut p, &data, &schedule, &cfg).unwrap()
    };
    let tuned = run(1.2, 100);
    let plain = run(1.0, 5);

    let errors = tuned.min_training_errors().unwrap();
    let reached = tuned.epochs_to_errors(data.len() / 20 - 1);
    let trains = errors * 20 < data.len() && reached.is_some();

    let factor = tuned.initial().grad_ratio / plain.initial().grad_ratio;
    let geometric = (0.5 * (tuned.initial().mean_ln_z - plain.initial().mean_ln_z)).exp();
    let expected = (depth as f64 / (2.0 * width as f64)).exp();
    let ratio_ok = factor >= expected / 2.0 && factor <= expected * 2.0;

    let slower = (1..=5).all(|e| plain.records[e].objective > tuned.records[e].objective)
        && plain.initial().objective - plain.records[5].objective < tuned.initial().objective - tuned.records[5].objective;
    let elapsed = start.elapsed();

    note(&format!(
        "  g=1.2: min training errors {errors}/{} (first below 5% at epoch {reached:?}); loss epochs 0..5 {:?}",
        data.len(),
        tuned.records[..=5].iter().map(|r| (r.objective * 1e3).round() / 1e3).collect::<Vec<_>>()
    ));
    note(&format!(
        "  g=1.0: loss epochs 0..5 {:?}",
        plain.records[..=5].iter().map(|r| (r.objective * 1e3).round() / 1e3).collect::<Vec<_>>()
    ));
    note(&format!(
        "  epoch-0 |δ0|/|δD|: g=1.2 {:.4}, g=1.0 {:.4}; factor {factor:.3} (geometric {geometric:.3}), target exp(D/2N) = {expected:.3} within 2x",
        tuned.initial().grad_ratio,
        plain.initial().grad_ratio
    ));
    verdict(
        "10",
        trains && ratio_ok && slower && within(elapsed, 600),
        &format!(
            "reaches <5%: {trains}, ratio factor {factor:.2} in [{:.2}, {:.2}]: {ratio_ok}, slower early descent: {slower}, {:.1}s",
            expected / 2.0,
            expected * 2.0,
            elapsed.as_secs_f64()
        ),
    );
}

fn random_tensor(rng: &mut Rng) -> IdxTensor {
    let types = [IdxType::U8, IdxType::I8, IdxType::I16, IdxType::I32, IdxType::F32, IdxType::F64];
    let dtype = types[rng.below(types.len())];
    let dims: Vec<usize> = (0..1 + rng.below(4)).map(|_| 1 + rng.below(5)).collect();
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| match dtype {
            IdxType::U8 => rng.below(256) as f64,
            IdxType::I8 => rng.below(256) as f64 - 128.0,
            IdxType::I16 => rng.below(65536) as f64 - 32768.0,
            IdxType::I32 => (rng.below(1 << 31) as f64) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 },
            IdxType::F32 => (rng.standard_normal() as f32) as f64,
            IdxType::F64 => rng.standard_normal() * 1e6,
        })
        .collect();
    IdxTensor { dtype, dims, data }
}

fn header_bytes(kind: u8, dims: &[u32]) -> Vec<u8> {
    let mut b = vec![0, 0, kind, dims.len() as u8];
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b
}

#[test]
fn criterion_11_idx_round_trip() {
    let _guard = serial();
    let mut rng = Rng::new(11);
    let mut round_trips = 0;
    for _ in 0..500 {
        let t = random_tensor(&mut rng);
        let back = parse_idx(&encode_idx(&t).unwrap()).unwrap();
        let exact = back.dtype == t.dtype
            && back.dims == t.dims
            && back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if exact {
            round_trips += 1;
        }
    }
    let shapes = [
        (header_bytes(0x08, &[60000, 28, 28]), vec![60000, 28, 28]),
        (header_bytes(0x08, &[60000]), vec![60000]),
        (header_bytes(0x08, &[10000, 28, 28]), vec![10000, 28, 28]),
        (header_bytes(0x08, &[10000]), vec![10000]),
    ];
    let headers_ok = shapes.iter().all(|(b, dims)| parse_idx_header(b).unwrap().dims == *dims)
        && u32::from_be_bytes(shapes[0].0[..4].try_into().unwrap()) == 0x0803
        && u32::from_be_bytes(shapes[1].0[..4].try_into().unwrap()) == 0x0801;
    let sample = mnist_sample(None, false).unwrap();
    let sample_ok = sample.len() == 1000 && sample.input_dim() == 784 && sample.labels().unwrap().iter().all(|&l| l < 10);
    verdict(
        "11",
        round_trips == 500 && headers_ok && sample_ok,
        &format!("{round_trips}/500 bit-exact round trips, headers ok: {headers_ok}, bundled sample ok: {sample_ok}"),
    );
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_12_rerun_from_manifest() {
    let _guard = serial();
    let tmp = tempfile::tempdir().unwrap();
    let configs = [
        "schema_version = 1\nkind = \"walk\"\nseed = 4\n[walk]\nn = 30\nd = 40\nsamples = 50\nmode = \"network\"\nnonlinearity = \"relu\"\nstep_samples = 500\n[walk.g_curve]\ngrid = [1.2, 1.4, 1.6]\nsamples = 20\n",
        "schema_version = 1\nkind = \"g-sweep\"\nseed = 5\nworkers = 2\n[data]\nsource = \"synthetic\"\n[data.synthetic]\nexamples = 60\ndims = 6\nclasses = 3\n[network]\nwidth = 8\n[train]\nepochs = 3\nminibatch = 10\n[sweep]\ng_values = [1.0, 1.3]\ndepths = [2, 3]\nlambda_in = [0.01]\nlambda_out = [0.01, 10.0]\n",
        "schema_version = 1\nkind = \"train-once\"\nseed = 6\n[data]\nlimit = 40\n[network]\ndepth = 3\nwidth = 10\n[train]\nepochs = 2\n",
        "schema_version = 1\nkind = \"gradient-check\"\nseed = 7\n[gradient_check]\nseeds = 2\n",
    ];
    let mut compared = 0;
    let mut identical = true;
    for (i, text) in configs.iter().enumerate() {
        let first = tmp.path().join(format!("run{i}-a"));
        let second = tmp.path().join(format!("run{i}-b"));
        run(&ExperimentConfig::from_toml_str(text).unwrap(), &first).unwrap();
        let manifest = ExperimentConfig::load(&first.join(MANIFEST_FILE)).unwrap();
        assert!(matches!(
            manifest.kind,
            ExperimentKind::Walk | ExperimentKind::GSweep | ExperimentKind::TrainOnce | ExperimentKind::GradientCheck
        ));
        run(&manifest, &second).unwrap();
        let (a, b) = (csv_files(&first), csv_files(&second));
        compared += a.len();
        identical &= !a.is_empty() && a == b;
    }
    verdict("12", identical, &format!("{compared} CSV files regenerated byte-identically: {identical}"));
}
