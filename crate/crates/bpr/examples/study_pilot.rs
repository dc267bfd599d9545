//! Small-scale dry run of the simulation study used to sanity-check fit
//! settings before the full run. Usage:
//!
//!   cargo run --release --example study_pilot -- desk [M] [max_steps] [elbo_samples]
//!   cargo run --release --example study_pilot -- clusters [M] [max_steps] [elbo_samples]

use std::time::Instant;

use bpr::model::ModelConfig;
use bpr::posterior::{cluster_summary, draw_posterior, nonempty_clusters, relabel};
use bpr::sim::{generate_cohort, run_study, Fitter, SimulationSpec};
use bpr::svi::{fit, ConvergenceConfig, SviConfig, Termination};
use bpr::ParamLayout;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn svi_config(max_steps: usize, elbo_samples: usize) -> SviConfig {
    let lr: f64 = std::env::args()
        .nth(5)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    SviConfig {
        learning_rate: lr,
        elbo_samples,
        batch_size: None,
        max_steps,
        lr_decay: std::env::args()
            .nth(7)
            .and_then(|s| s.parse().ok())
            .unwrap_or(0.0),
        seed: 1000,
        convergence: ConvergenceConfig {
            window: 250,
            rel_tol: std::env::args()
                .nth(6)
                .and_then(|s| s.parse().ok())
                .unwrap_or(1e-4),
        },
    }
}

fn desk(m: usize, max_steps: usize, elbo_samples: usize) {
    let spec = SimulationSpec::with_defaults(2000, m, 3, 42);
    let fitter = Fitter::Svi {
        model: ModelConfig::new(10).unwrap(),
        svi: svi_config(max_steps, elbo_samples),
        posterior_draws: 1000,
    };
    let start = Instant::now();
    let result = run_study(&spec, &fitter).unwrap();
    println!(
        "desk study: M={m} failures={} elapsed={:.1}s",
        result.failures,
        start.elapsed().as_secs_f64()
    );
    for p in result.beta_parameters() {
        println!(
            "  {:<12} truth={:+.3} bias={:+.4} coverage={:.2}",
            p.name, p.truth, p.mean_bias, p.coverage
        );
    }
    let mut hi_bias: Vec<f64> = Vec::new();
    let mut lo_bias: Vec<f64> = Vec::new();
    let mut hi_cov: Vec<f64> = Vec::new();
    for p in result.phi_parameters() {
        if p.truth > 0.5 {
            hi_bias.push(p.mean_bias);
            hi_cov.push(p.coverage);
        } else {
            lo_bias.push(p.mean_bias);
        }
    }
    let stats = |v: &[f64]| {
        let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (mn, mean, mx)
    };
    println!(
        "  phi high cells: log-odds bias (min, mean, max) = {:?}",
        stats(&hi_bias)
    );
    println!(
        "  phi high cells: coverage (min, mean, max) = {:?}",
        stats(&hi_cov)
    );
    println!(
        "  phi low cells:  log-odds bias (min, mean, max) = {:?}",
        stats(&lo_bias)
    );
}

/// Single k_true = 5 replicate with custom init jitter; prints cluster sizes
/// and the fit's high cells so split/merge failure modes are visible.
/// Usage: k5 <rep> <steps> <S> <lr> <decay> <jitter_phi> <jitter_v> <batch>
fn k5(args: &[String]) {
    let f = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let rep = f(2, 0.0) as u64;
    let steps = f(3, 12_000.0) as usize;
    let s = f(4, 4.0) as usize;
    let lr = f(5, 0.012);
    let decay = f(6, 8e-4);
    let jitter_phi = f(7, 0.3);
    let jitter_v = f(8, 0.1);
    let batch = f(9, 0.0) as usize; // 0 = full batch
    let stagger = f(10, 0.0); // raw-v init slope: mu_v[j] = -stagger * j

    let spec = SimulationSpec::with_defaults(2000, 1, 5, 42);
    let model = ModelConfig::new(10).unwrap();
    let (data, truth) = generate_cohort(&spec, rep).unwrap();
    let layout = ParamLayout::new(model.k_max, spec.d_m, spec.d_r);
    let cfg = SviConfig {
        learning_rate: lr,
        elbo_samples: s,
        batch_size: None,
        max_steps: steps,
        lr_decay: decay,
        seed: 1000u64.wrapping_add(rep.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        convergence: ConvergenceConfig {
            window: 250,
            rel_tol: 1e-8,
        },
    };

    // replicate fit()'s init but with custom jitter scales
    let mut mu = vec![0.0; layout.dim()];
    let base = bpr::math::logit(data.outcome_rate().clamp(1e-3, 1.0 - 1e-3));
    for i in layout.beta0_range() {
        mu[i] = base;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    for i in layout.phi_range() {
        mu[i] = jitter_phi * rand::Rng::sample::<f64, _>(&mut init_rng, rand_distr::StandardNormal);
    }
    for (j, i) in layout.v_range().enumerate() {
        mu[i] = jitter_v * rand::Rng::sample::<f64, _>(&mut init_rng, rand_distr::StandardNormal)
            - stagger * j as f64;
    }
    let init = bpr::svi::VariationalState::isotropic(mu, 0.1);
    let n = data.n();
    let make_target = |rng: &mut ChaCha8Rng| {
        if batch == 0 || batch >= n {
            bpr::svi::BprTarget::full(&data, &model)
        } else {
            let indices = (0..batch)
                .map(|_| rand::Rng::gen_range(rng, 0..n))
                .collect();
            bpr::svi::BprTarget {
                data: &data,
                cfg: &model,
                layout,
                indices: Some(indices),
                scale: n as f64 / batch as f64,
            }
        }
    };
    let start = Instant::now();
    let (state, trace) = bpr::svi::optimize(make_target, init, &cfg);
    assert!(
        trace.terminated_reason != Termination::Aborted,
        "{:?}",
        trace.abort_message
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
    let samples = relabel(&draw_posterior(&state, layout, &model, 1000, &mut rng).unwrap());
    let summary = cluster_summary(
        &samples,
        n,
        data.mixture_names(),
        &spec.response_names(),
        &[],
    )
    .unwrap();
    let k = nonempty_clusters(&summary, 1.0);
    let last = trace.elbo_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "rep={rep} steps_run={} elbo={last:.1} nonempty={k} elapsed={:.1}s",
        trace.elbo_history.len(),
        start.elapsed().as_secs_f64()
    );
    let sd = |i: usize| -> f64 {
        (0..=i)
            .map(|j| state.chol.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let amean: f64 = samples.alpha.iter().sum::<f64>() / samples.alpha.len() as f64;
    println!("  alpha mean {amean:.3}");
    for (j, i) in layout.v_range().enumerate() {
        println!("  v[{j}] raw mu {:+.2} sd {:.2}", state.mu[i], sd(i));
    }
    let mut tw: Vec<f64> = truth.weights.clone();
    tw.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!(
        "  true sizes: {:?}",
        tw.iter()
            .map(|w| (w * n as f64).round())
            .collect::<Vec<f64>>()
    );
    for c in &summary.clusters {
        let size = c.membership.point * n as f64;
        let high: Vec<usize> = c
            .phi
            .iter()
            .enumerate()
            .filter(|(_, p)| p.point > 0.4)
            .map(|(j, _)| j)
            .collect();
        println!(
            "  cluster {:>2}: size {:7.1} high cells {:?}",
            c.cluster, size, high
        );
    }
}

fn clusters(m: usize, max_steps: usize, elbo_samples: usize) {
    let spec = SimulationSpec::with_defaults(2000, m, 5, 42);
    let model = ModelConfig::new(10).unwrap();
    let cfg = svi_config(max_steps, elbo_samples);
    let layout = ParamLayout::new(model.k_max, spec.d_m, spec.d_r);
    let start = Instant::now();
    let mut counts = Vec::new();
    for rep in 0..m as u64 {
        let (data, _) = generate_cohort(&spec, rep).unwrap();
        let mut rep_cfg = cfg.clone();
        rep_cfg.seed = cfg
            .seed
            .wrapping_add(rep.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (state, trace) = fit(&data, &model, &rep_cfg).unwrap();
        assert!(trace.terminated_reason != Termination::Aborted);
        let mut rng = ChaCha8Rng::seed_from_u64(rep_cfg.seed ^ 1);
        let samples = relabel(&draw_posterior(&state, layout, &model, 1000, &mut rng).unwrap());
        let summary = cluster_summary(
            &samples,
            data.n(),
            data.mixture_names(),
            &spec.response_names(),
            &[],
        )
        .unwrap();
        let k = nonempty_clusters(&summary, 1.0);
        let sizes: Vec<f64> = summary
            .clusters
            .iter()
            .map(|c| (c.membership.point * data.n() as f64 * 10.0).round() / 10.0)
            .collect();
        println!(
            "  rep {rep}: nonempty={k} steps={} sizes={sizes:?}",
            trace.elbo_history.len()
        );
        for c in &summary.clusters {
            let size = c.membership.point * data.n() as f64;
            if (1.0..160.0).contains(&size) {
                let phis: Vec<f64> = c
                    .phi
                    .iter()
                    .map(|e| (e.point * 100.0).round() / 100.0)
                    .collect();
                println!(
                    "    suspicious cluster {} size {size:.1} phi={phis:?}",
                    c.cluster
                );
            }
        }
        counts.push(k);
    }
    let hits = counts.iter().filter(|&&k| k == 5).count();
    println!(
        "clusters: {hits}/{m} replicates with exactly 5 non-empty, elapsed={:.1}s",
        start.elapsed().as_secs_f64()
    );
}

/// Batch-fraction sweep pilot. Usage: sweep [M] [max_steps] [S] [lr] [rel_tol] [decay] [frac...]
fn sweep(m: usize, max_steps: usize, elbo_samples: usize) {
    let fracs: Vec<f64> = std::env::args()
        .skip(8)
        .filter_map(|s| s.parse().ok())
        .collect();
    let fracs = if fracs.is_empty() {
        vec![0.01, 0.1, 1.0]
    } else {
        fracs
    };
    let spec = SimulationSpec::with_defaults(2000, m, 3, 42);
    let fitter = Fitter::Svi {
        model: ModelConfig::new(10).unwrap(),
        svi: svi_config(max_steps, elbo_samples),
        posterior_draws: 1000,
    };
    let start = Instant::now();
    let results = bpr::sim::batch_size_sweep(&spec, &fitter, &fracs).unwrap();
    for (frac, result) in &results {
        println!("fraction {frac}: failures={}", result.failures);
        for p in result.beta_parameters() {
            println!(
                "  {:<12} truth={:+.3} bias={:+.4} coverage={:.2}",
                p.name, p.truth, p.mean_bias, p.coverage
            );
        }
        let phi_cov: Vec<f64> = result.phi_parameters().map(|p| p.coverage).collect();
        let mean_cov = phi_cov.iter().sum::<f64>() / phi_cov.len() as f64;
        println!("  phi mean coverage {mean_cov:.3}");
    }
    println!("sweep elapsed={:.1}s", start.elapsed().as_secs_f64());
}

fn one(max_steps: usize, elbo_samples: usize) {
    let spec = SimulationSpec::with_defaults(2000, 1, 3, 42);
    let (data, _) = generate_cohort(&spec, 0).unwrap();
    println!("outcome rate {:.4}", data.outcome_rate());
    let model = ModelConfig::new(10).unwrap();
    let cfg = svi_config(max_steps, elbo_samples);
    let start = Instant::now();
    let (state, trace) = fit(&data, &model, &cfg).unwrap();
    println!(
        "fit: steps={} reason={:?} elapsed={:.1}s",
        trace.elbo_history.len(),
        trace.terminated_reason,
        start.elapsed().as_secs_f64()
    );
    let h = &trace.elbo_history;
    for w in (0..h.len()).step_by((h.len() / 10).max(1)) {
        let end = (w + 250).min(h.len());
        let mean = h[w..end].iter().sum::<f64>() / (end - w) as f64;
        println!("  elbo[{w}..{end}] mean {mean:.1}");
    }
    let layout = ParamLayout::new(model.k_max, data.p(), data.a());
    // marginal sd of each coordinate = row norm of L
    let _ = layout.dim();
    let sd = |i: usize| -> f64 {
        (0..=i)
            .map(|j| state.chol.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for (idx, i) in layout.beta_range().enumerate() {
        println!(
            "  beta[{idx}] mu={:+.3} sd={:.3} (truth {:+.3})",
            state.mu[i],
            sd(i),
            spec.beta_true[idx]
        );
    }
    for (idx, i) in layout.beta0_range().enumerate() {
        println!("  beta0[{idx}] mu={:+.3} sd={:.3}", state.mu[i], sd(i));
    }
    let i = layout.alpha_index();
    println!("  alpha raw mu={:+.3} sd={:.3}", state.mu[i], sd(i));
}

/// Logistic regression MLE with true-cluster intercepts via Newton-Raphson:
/// a convergence oracle for the response block on one replicate.
fn oracle() {
    let spec = SimulationSpec::with_defaults(2000, 1, 3, 42);
    let (data, truth) = generate_cohort(&spec, 0).unwrap();
    let k = spec.k_true;
    let d = k + spec.d_r;
    let n = data.n();
    let design = |i: usize, j: usize| -> f64 {
        if j < k {
            f64::from(truth.z[i] == j)
        } else {
            data.w_row(i)[j - k]
        }
    };
    let mut theta = vec![0.0; d];
    for _ in 0..50 {
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for i in 0..n {
            let eta: f64 = (0..d).map(|j| theta[j] * design(i, j)).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            let r = f64::from(data.y(i)) - p;
            for j in 0..d {
                let xj = design(i, j);
                if xj == 0.0 {
                    continue;
                }
                grad[j] += r * xj;
                for l in 0..d {
                    hess[j * d + l] += p * (1.0 - p) * xj * design(i, l);
                }
            }
        }
        // solve hess * delta = grad by Gaussian elimination
        let mut a = hess.clone();
        let mut b = grad.clone();
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&r1, &r2| {
                    a[r1 * d + col]
                        .abs()
                        .partial_cmp(&a[r2 * d + col].abs())
                        .unwrap()
                })
                .unwrap();
            for j in 0..d {
                a.swap(col * d + j, piv * d + j);
            }
            b.swap(col, piv);
            let diag = a[col * d + col];
            for row in 0..d {
                if row == col {
                    continue;
                }
                let f = a[row * d + col] / diag;
                for j in 0..d {
                    a[row * d + j] -= f * a[col * d + j];
                }
                b[row] -= f * b[col];
            }
        }
        let mut max_step: f64 = 0.0;
        for j in 0..d {
            let delta = b[j] / a[j * d + j];
            theta[j] += delta;
            max_step = max_step.max(delta.abs());
        }
        if max_step < 1e-10 {
            break;
        }
    }
    for j in 0..k {
        println!(
            "intercept[{j}] mle={:+.3} truth={:+.3}",
            theta[j], truth.intercepts[j]
        );
    }
    for j in 0..spec.d_r {
        println!(
            "beta[{j}] mle={:+.3} truth={:+.3}",
            theta[k + j],
            spec.beta_true[j]
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("desk");
    let m: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let samples: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    match mode {
        "desk" => desk(m, steps, samples),
        "one" => one(steps, samples),
        "oracle" => oracle(),
        "clusters" => clusters(m, steps, samples),
        "k5" => k5(&args),
        "sweep" => sweep(m, steps, samples),
        other => panic!("unknown mode {other}"),
    }
}
