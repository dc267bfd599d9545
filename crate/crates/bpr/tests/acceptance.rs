//! The release gate: one test per acceptance criterion. Each prints a
//! single `criterion N PASS/FAIL` line (visible with `--nocapture`; the
//! harness result line carries the same name otherwise).
//!
//! Criteria 5-7 run replicate studies and dominate the wall time; the whole
//! suite is sized for a single desktop core.

use std::time::Instant;

use bpr::math::{logit, sigmoid};
use bpr::mcmc::{rhat, rwm_sample, rwm_sample_from, McmcConfig, ProposalScale};
use bpr::model::{stick_break, ModelConfig};
use bpr::posterior::{
    cluster_outcome_probability, cluster_summary, draw_posterior, mcmc_posterior, odds_ratios,
    relabel, PosteriorSamples, Provenance,
};
use bpr::sim::{batch_size_sweep, match_clusters, run_study, Fitter, SimulationSpec, StudyResult};
use bpr::svi::{
    elbo_and_grad, elbo_estimate, fit, BprTarget, ConvergenceConfig, SviConfig, VariationalState,
};
use bpr::transforms::{from_constrained, log_abs_det_jacobian, to_constrained, ParamVector};
use bpr::ParamLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn criterion<F>(n: usize, desc: &str, body: F)
where
    F: FnOnce() + std::panic::UnwindSafe,
{
    let start = Instant::now();
    let result = std::panic::catch_unwind(body);
    let secs = start.elapsed().as_secs_f64();
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    println!("criterion {n} {verdict} ({secs:.1}s): {desc}");
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    (m, var.sqrt())
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_simplex_transform_jacobian() {
    criterion(
        1,
        "simplex invariant, transform round-trip, Jacobian",
        || {
            let cfg = ModelConfig::new(6).unwrap();
            let layout = ParamLayout::new(6, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            for _ in 0..200 {
                // stick_break output is a simplex point to 1e-12
                let v: Vec<f64> = (0..5).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
                let pi = stick_break(&v).unwrap();
                assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(pi.iter().all(|&p| p >= 0.0));

                // round-trip raw -> constrained -> raw to 1e-10
                let raw: Vec<f64> = (0..layout.dim())
                    .map(|_| rng.gen_range(-4.0..4.0))
                    .collect();
                let pv = ParamVector::new(raw.clone(), layout).unwrap();
                let params = to_constrained(&pv, &cfg);
                let back = from_constrained(&params, &cfg).unwrap();
                for (a, b) in raw.iter().zip(back.raw.iter()) {
                    assert!((a - b).abs() < 1e-10, "round trip {a} vs {b}");
                }

                // log |det J| against central finite differences of the
                // forward map, coordinate by coordinate (the map is diagonal)
                let jac = log_abs_det_jacobian(&pv, &cfg);
                let h = 1e-6;
                let mut fd_sum = 0.0;
                for i in 0..layout.dim() {
                    if layout.beta0_range().contains(&i) || layout.beta_range().contains(&i) {
                        continue; // identity coordinates
                    }
                    let mut up = raw.clone();
                    up[i] += h;
                    let mut dn = raw.clone();
                    dn[i] -= h;
                    let cu = to_constrained(&ParamVector::new(up, layout).unwrap(), &cfg);
                    let cd = to_constrained(&ParamVector::new(dn, layout).unwrap(), &cfg);
                    let pick = |c: &bpr::ConstrainedParams| -> f64 {
                        if layout.v_range().contains(&i) {
                            c.v[i - layout.v_range().start]
                        } else if i == layout.alpha_index() {
                            c.alpha
                        } else {
                            c.phi[i - layout.phi_range().start]
                        }
                    };
                    fd_sum += ((pick(&cu) - pick(&cd)) / (2.0 * h)).ln();
                }
                assert!((jac - fd_sum).abs() < 1e-6, "jacobian {jac} vs fd {fd_sum}");
            }
        },
    );
}

// ---------------------------------------------------------------- 2

fn crn_cohort() -> bpr::CohortData {
    // d = (2-1) + 1 + 2*2 + 2 + 2 = 10
    let spec = SimulationSpec {
        d_m: 2,
        d_r: 2,
        beta_true: vec![0.1, 0.5],
        phi_true: vec![0.8, 0.1, 0.1, 0.8],
        cluster_weights: vec![0.6, 0.4],
        intercepts_true: vec![-1.0, 0.5],
        ..SimulationSpec::with_defaults(40, 1, 2, 4242)
    };
    bpr::sim::generate_cohort(&spec, 0).unwrap().0
}

#[test]
fn criterion_2_gradient_correctness() {
    criterion(
        2,
        "CRN finite differences (d=10) and Gaussian closed form",
        || {
            let data = crn_cohort();
            let cfg = ModelConfig::new(2).unwrap();
            let target = BprTarget::full(&data, &cfg);
            let layout = ParamLayout::new(2, 2, 2);
            assert_eq!(layout.dim(), 10);
            let d = layout.dim();

            let mut state = VariationalState::isotropic(vec![0.0; d], 0.15);
            for i in 0..d {
                state.mu[i] = 0.05 * (i as f64 - 4.5);
            }
            let s = 20;
            let (_, grad_mu, grad_chol) = {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                elbo_and_grad(&state, &target, s, &mut rng).unwrap()
            };
            let elbo_at = |st: &VariationalState| -> f64 {
                let mut rng = ChaCha8Rng::seed_from_u64(99); // common random numbers
                elbo_estimate(st, &target, s, &mut rng).unwrap()
            };
            let h = 1e-5;
            for i in 0..d {
                let mut up = state.clone();
                up.mu[i] += h;
                let mut dn = state.clone();
                dn.mu[i] -= h;
                let fd = (elbo_at(&up) - elbo_at(&dn)) / (2.0 * h);
                let rel = (grad_mu[i] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "mu[{i}]: grad {} vs fd {fd}", grad_mu[i]);
            }
            for i in 0..d {
                for j in 0..=i {
                    let mut up = state.clone();
                    *up.chol.get_mut(i, j) += h;
                    let mut dn = state.clone();
                    *dn.chol.get_mut(i, j) -= h;
                    let fd = (elbo_at(&up) - elbo_at(&dn)) / (2.0 * h);
                    let g = grad_chol.get(i, j);
                    let rel = (g - fd).abs() / fd.abs().max(1e-8);
                    assert!(rel < 1e-4, "chol[{i}][{j}]: grad {g} vs fd {fd}");
                }
            }

            // Gaussian vs Gaussian: target N(0, I), q = N(mu, L L^T) has
            // closed-form gradients E[grad_mu] = -mu, E[grad_L] = -L + diag(1/L_ii)
            struct StdNormal {
                d: usize,
            }
            impl bpr::svi::Target for StdNormal {
                fn dim(&self) -> usize {
                    self.d
                }
                fn log_density(&self, t: &[f64]) -> f64 {
                    -0.5 * t.iter().map(|x| x * x).sum::<f64>()
                }
                fn log_density_grad(&self, t: &[f64]) -> (f64, Vec<f64>) {
                    (self.log_density(t), t.iter().map(|x| -x).collect())
                }
            }
            let gt = StdNormal { d: 3 };
            let mut st = VariationalState::isotropic(vec![0.4, -0.2, 0.1], 0.8);
            *st.chol.get_mut(2, 0) = 0.3;
            let reps = 10_000;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut mu_draws: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); 3];
            for _ in 0..reps {
                let (_, gm, _) = elbo_and_grad(&st, &gt, 1, &mut rng).unwrap();
                for i in 0..3 {
                    mu_draws[i].push(gm[i]);
                }
            }
            for i in 0..3 {
                let (m, sd) = mean_sd(&mu_draws[i]);
                let want = -st.mu[i];
                let se = sd / (reps as f64).sqrt();
                assert!(
                    (m - want).abs() < 3.0 * se,
                    "E[grad_mu[{i}]] {m} vs {want} (se {se})"
                );
            }
        },
    );
}

// ---------------------------------------------------------------- 3

struct BetaBernoulli {
    s: f64,
    f: f64,
}

impl BetaBernoulli {
    fn phi(&self, r: f64) -> f64 {
        1e-4 + (1.0 - 2e-4) * sigmoid(r).clamp(1e-15, 1.0 - 1e-15)
    }
}

impl bpr::svi::Target for BetaBernoulli {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, t: &[f64]) -> f64 {
        let phi = self.phi(t[0]);
        self.s * phi.ln()
            + self.f * (-phi).ln_1p()
            + bpr::math::log_sigmoid(t[0])
            + bpr::math::log_sigmoid(-t[0])
    }
    fn log_density_grad(&self, t: &[f64]) -> (f64, Vec<f64>) {
        let phi = self.phi(t[0]);
        let sg = sigmoid(t[0]);
        let g = (self.s / phi - self.f / (1.0 - phi)) * (1.0 - 2e-4) * sg * (1.0 - sg)
            + (1.0 - 2.0 * sg);
        (self.log_density(t), vec![g])
    }
}

#[test]
fn criterion_3_conjugate_oracle() {
    criterion(
        3,
        "Beta-Bernoulli toy: SVI within 0.02, MCMC within 2%",
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(321);
            let n = 1000;
            let successes = (0..n).filter(|_| rng.gen::<f64>() < 0.3).count() as f64;
            let analytic = (successes + 1.0) / (n as f64 + 2.0);
            let make = || BetaBernoulli {
                s: successes,
                f: n as f64 - successes,
            };

            let cfg = SviConfig {
                learning_rate: 0.02,
                elbo_samples: 10,
                max_steps: 5000,
                seed: 55,
                ..Default::default()
            };
            let (state, trace) = bpr::svi::optimize(
                |_| make(),
                VariationalState::isotropic(vec![0.0], 0.1),
                &cfg,
            );
            assert!(trace.abort_message.is_none());
            let target = make();
            let mut qrng = ChaCha8Rng::seed_from_u64(9);
            let q_mean: f64 = (0..50_000)
                .map(|_| {
                    let z: f64 = qrng.sample(rand_distr::StandardNormal);
                    target.phi(state.mu[0] + state.chol.diag(0) * z)
                })
                .sum::<f64>()
                / 50_000.0;
            assert!(
                (q_mean - analytic).abs() < 0.02,
                "svi {q_mean} vs analytic {analytic}"
            );

            let mcfg = McmcConfig {
                n_chains: 2,
                n_warmup: 3_000,
                n_samples: 30_000,
                proposal_scale: ProposalScale::Scalar(0.2),
                seed: 13,
            };
            let draws = rwm_sample(&target, &mcfg).unwrap();
            let total = (draws.n_chains * draws.n_samples) as f64;
            let mcmc_mean: f64 = (0..draws.n_chains)
                .flat_map(|c| draws.coord(c, 0))
                .map(|r| target.phi(r))
                .sum::<f64>()
                / total;
            assert!(
                (mcmc_mean - analytic).abs() / analytic < 0.02,
                "mcmc {mcmc_mean} vs analytic {analytic}"
            );
        },
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_svi_vs_mcmc_agreement() {
    criterion(
        4,
        "K=2, p=3, a=1, n=500: SVI within 3 oracle SDs, rhat < 1.05",
        || {
            let spec = SimulationSpec {
                d_m: 3,
                d_r: 1,
                k_true: 2,
                cluster_weights: vec![0.6, 0.4],
                phi_true: vec![0.85, 0.85, 0.1, 0.1, 0.1, 0.85],
                beta_true: vec![0.4],
                intercepts_true: vec![-1.5, -0.5],
                ..SimulationSpec::with_defaults(500, 1, 2, 2025)
            };
            let (data, _) = bpr::sim::generate_cohort(&spec, 0).unwrap();
            let model = ModelConfig::new(2).unwrap();
            let layout = ParamLayout::new(2, 3, 1);

            let svi_cfg = SviConfig {
                elbo_samples: 8,
                max_steps: 10_000,
                lr_decay: 1e-3,
                seed: 30,
                convergence: ConvergenceConfig {
                    window: 400,
                    rel_tol: 1e-6,
                },
                ..Default::default()
            };
            let (state, trace) = fit(&data, &model, &svi_cfg).unwrap();
            assert!(trace.abort_message.is_none());
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let svi = relabel(&draw_posterior(&state, layout, &model, 4000, &mut rng).unwrap());

            // per-coordinate proposal scales from the fitted covariance keep
            // the oracle chains efficient without biasing their target
            let scales: Vec<f64> = (0..layout.dim())
                .map(|i| {
                    (0..=i)
                        .map(|j| state.chol.get(i, j).powi(2))
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-3)
                })
                .collect();
            let mcfg = McmcConfig {
                n_chains: 2,
                n_warmup: 30_000,
                n_samples: 120_000,
                proposal_scale: ProposalScale::PerCoord(scales),
                seed: 60,
            };
            // warm-start both chains at the SVI mean so they agree on the
            // permutation mode; raw-coordinate rhat is meaningful within a mode
            let target = BprTarget::full(&data, &model);
            let draws = rwm_sample_from(&target, &mcfg, Some(&state.mu)).unwrap();
            let r = rhat(&draws).unwrap();
            let rmax = r.iter().cloned().fold(0.0, f64::max);
            assert!(rmax < 1.05, "max rhat {rmax}");
            let oracle = relabel(&mcmc_posterior(&draws, layout, &model).unwrap());

            // beta
            let collect = |s: &PosteriorSamples, f: &dyn Fn(&PosteriorSamples, usize) -> f64| {
                (0..s.s).map(|d| f(s, d)).collect::<Vec<f64>>()
            };
            let svi_beta = collect(&svi, &|s, d| s.beta_row(d)[0]);
            let o_beta = collect(&oracle, &|s, d| s.beta_row(d)[0]);
            let (sm, _) = mean_sd(&svi_beta);
            let (om, osd) = mean_sd(&o_beta);
            assert!(
                (sm - om).abs() < 3.0 * osd,
                "beta: svi {sm} vs oracle {om} (sd {osd})"
            );

            // matched phi cells
            let mean_phi = |s: &PosteriorSamples| -> Vec<f64> {
                let mut out = vec![0.0; s.k * s.p];
                for d in 0..s.s {
                    for c in 0..s.k {
                        for (j, v) in s.phi_row(d, c).iter().enumerate() {
                            out[c * s.p + j] += v / s.s as f64;
                        }
                    }
                }
                out
            };
            let svi_phi = mean_phi(&svi);
            let o_phi = mean_phi(&oracle);
            let matching = match_clusters(&svi_phi, 2, &o_phi, 2, 3);
            for k in 0..2 {
                for j in 0..3 {
                    let cell = collect(&oracle, &|s, d| s.phi_row(d, k)[j]);
                    let (om, osd) = mean_sd(&cell);
                    let sv = svi_phi[matching[k] * 3 + j];
                    assert!(
                        (sv - om).abs() < 3.0 * osd,
                        "phi[{k}][{j}]: svi {sv} vs oracle {om} (sd {osd})"
                    );
                }
            }
        },
    );
}

// ---------------------------------------------------------------- 5-7 shared settings

fn study_svi_config(max_steps: usize) -> SviConfig {
    SviConfig {
        learning_rate: 0.012,
        elbo_samples: 4,
        batch_size: None,
        max_steps,
        lr_decay: 8e-4,
        seed: 1000,
        convergence: ConvergenceConfig {
            window: 250,
            rel_tol: 1e-7,
        },
    }
}

fn beta_block(result: &StudyResult) -> Vec<&bpr::sim::ParamSummary> {
    result.beta_parameters().collect()
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_desk_simulation_study() {
    criterion(
        5,
        "n=2000, M=50, k_true=3: beta bias/coverage, phi log-odds bias",
        || {
            let spec = SimulationSpec::with_defaults(2000, 50, 3, 42);
            let fitter = Fitter::Svi {
                model: ModelConfig::new(10).unwrap(),
                svi: study_svi_config(12_000),
                posterior_draws: 1000,
            };
            let result = run_study(&spec, &fitter).unwrap();
            assert_eq!(result.failures, 0, "replicate failures");

            let betas = beta_block(&result);
            let mean_beta_bias: f64 =
                betas.iter().map(|p| p.mean_bias).sum::<f64>() / betas.len() as f64;
            println!("  mean beta bias {mean_beta_bias:+.4}");
            for p in &betas {
                println!(
                    "  {:<12} bias {:+.4} coverage {:.2}",
                    p.name, p.mean_bias, p.coverage
                );
            }
            assert!(
                mean_beta_bias.abs() < 0.05,
                "mean beta bias {mean_beta_bias}"
            );
            for p in &betas {
                assert!(p.coverage >= 0.80, "{} coverage {}", p.name, p.coverage);
            }
            // mid-range phi cells: true value in [0.2, 0.8]
            for p in result.phi_parameters() {
                if p.truth >= 0.2 && p.truth <= 0.8 {
                    assert!(
                        p.mean_bias.abs() < 0.3,
                        "{} log-odds bias {}",
                        p.name,
                        p.mean_bias
                    );
                }
            }
        },
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_batch_size_property() {
    criterion(
        6,
        "batch sweep: bias paired-noise invariance, coverage ordering",
        || {
            let spec = SimulationSpec::with_defaults(2000, 8, 3, 42);
            let fitter = |max_steps: usize| Fitter::Svi {
                model: ModelConfig::new(10).unwrap(),
                svi: study_svi_config(max_steps),
                posterior_draws: 1000,
            };
            // Replicate datasets are keyed by the simulation spec, so the arms
            // stay seed-matched even with different step budgets. The 1% arm
            // needs a far smaller terminal step size before Adam's stationary
            // noise floor stops biasing the weakly informed coefficients (its
            // minibatch gradients are ~10x noisier); its steps cost 1% as much,
            // so the longer schedule keeps the arm the cheapest of the three.
            let mut sweep = batch_size_sweep(&spec, &fitter(200_000), &[0.01]).unwrap();
            sweep.extend(batch_size_sweep(&spec, &fitter(8_000), &[0.1, 1.0]).unwrap());
            let by_frac =
                |f: f64| -> &StudyResult { &sweep.iter().find(|(frac, _)| *frac == f).unwrap().1 };
            let tiny = by_frac(0.01);
            let ten = by_frac(0.1);
            let full = by_frac(1.0);
            for r in [tiny, ten, full] {
                assert_eq!(r.failures, 0);
            }

            // paired per-replicate differences of the beta estimates; matched
            // seeds make the 1% and 100% replicates share their datasets
            let n_beta = beta_block(full).len();
            for idx in 0..n_beta {
                let diffs: Vec<f64> = tiny
                    .replicates
                    .iter()
                    .zip(&full.replicates)
                    .map(|(a, b)| a.estimates[idx].estimate - b.estimates[idx].estimate)
                    .collect();
                let (dm, dsd) = mean_sd(&diffs);
                let bound = 3.0 * dsd / (diffs.len() as f64).sqrt() + 0.02;
                let bias_gap =
                    (beta_block(tiny)[idx].mean_bias - beta_block(full)[idx].mean_bias).abs();
                println!(
                    "  beta[{idx}] bias gap {bias_gap:.4} bound {bound:.4} (paired diff {dm:+.4})"
                );
                assert!(
                    bias_gap <= bound,
                    "beta[{idx}] bias gap {bias_gap} exceeds {bound}"
                );
            }

            // Pool beta and phi coverage (66 parameters x 8 replicates per arm):
            // the per-block means are too coarse at M=8 to order reliably.
            let mean_cov = |r: &StudyResult| -> f64 {
                let cov: Vec<f64> = r
                    .beta_parameters()
                    .chain(r.phi_parameters())
                    .map(|p| p.coverage)
                    .collect();
                cov.iter().sum::<f64>() / cov.len() as f64
            };
            let (c_tiny, c_ten, c_full) = (mean_cov(tiny), mean_cov(ten), mean_cov(full));
            println!("  coverage: 1% {c_tiny:.3}, 10% {c_ten:.3}, 100% {c_full:.3}");
            assert!(
                c_ten >= c_tiny,
                "coverage(10%) {c_ten} < coverage(1%) {c_tiny}"
            );
            assert!(
                c_full >= c_tiny,
                "coverage(100%) {c_full} < coverage(1%) {c_tiny}"
            );
        },
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_cluster_count_recovery() {
    criterion(
        7,
        "k_true=5 with k_max=10: exactly 5 non-empty in >= 45/50",
        || {
            let spec = SimulationSpec::with_defaults(2000, 50, 5, 42);
            let model = ModelConfig::new(10).unwrap();
            let base = study_svi_config(16_000);
            let layout = ParamLayout::new(model.k_max, spec.d_m, spec.d_r);
            let mut hits = 0;
            for rep in 0..spec.m as u64 {
                let (data, _) = bpr::sim::generate_cohort(&spec, rep).unwrap();
                let mut cfg = base.clone();
                cfg.seed = base
                    .seed
                    .wrapping_add(rep.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let (state, trace) = fit(&data, &model, &cfg).unwrap();
                assert!(trace.abort_message.is_none(), "replicate {rep} aborted");
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
                let samples =
                    relabel(&draw_posterior(&state, layout, &model, 1000, &mut rng).unwrap());
                let summary = cluster_summary(
                    &samples,
                    data.n(),
                    data.mixture_names(),
                    data.response_names(),
                    &[],
                )
                .unwrap();
                let k = bpr::posterior::nonempty_clusters(&summary, 1.0);
                if k == 5 {
                    hits += 1;
                } else {
                    println!("  replicate {rep}: {k} non-empty clusters");
                }
            }
            println!("  {hits}/50 replicates with exactly 5 non-empty clusters");
            assert!(hits >= 45, "only {hits}/50 replicates recovered 5 clusters");
        },
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_reporting_arithmetic() {
    criterion(
        8,
        "odds ratio 0.144 -> 1.154; logistic(-3.956) ~ 0.019",
        || {
            // point-mass posterior at beta = [0.144]
            let s = 200;
            let samples = PosteriorSamples {
                s,
                k: 1,
                p: 1,
                a: 1,
                pi: vec![1.0; s],
                alpha: vec![1.0; s],
                phi: vec![0.5; s],
                beta0: vec![-3.956; s],
                beta: vec![0.144; s],
                provenance: Provenance::Svi,
            };
            let ors = odds_ratios(&samples).unwrap();
            let (or, _) = ors[0];
            assert!((or - 1.154).abs() < 1e-3, "odds ratio {or}");

            let probs = cluster_outcome_probability(&samples, &[0.0]).unwrap();
            let (p, _) = probs[0];
            assert!((p - 0.019).abs() < 5e-4, "outcome probability {p}");
            assert!((sigmoid(-3.956) - 0.019).abs() < 5e-4);
            assert!((logit(0.0187) + 3.96).abs() < 0.05);
        },
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_exchangeability_handling() {
    criterion(
        9,
        "relabel idempotence and label-permutation invariance",
        || {
            let s = 300;
            let k = 3;
            let p = 2;
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            // draws around three separated parameter points with distinct weights
            let centers_pi = [0.6, 0.3, 0.1];
            let centers_phi: [[f64; 2]; 3] = [[0.9, 0.1], [0.5, 0.5], [0.1, 0.9]];
            let mut pi = Vec::new();
            let mut phi = Vec::new();
            let mut beta0 = Vec::new();
            for _ in 0..s {
                let noise: f64 = rng.gen_range(-0.01..0.01);
                let raw: Vec<f64> = centers_pi.iter().map(|c| c + noise * c).collect();
                let total: f64 = raw.iter().sum();
                pi.extend(raw.iter().map(|v| v / total));
                for row in &centers_phi {
                    for v in row {
                        phi.push((v + rng.gen_range(-0.02..0.02)).clamp(0.01, 0.99));
                    }
                }
                beta0.extend_from_slice(&[-1.0, -2.0, -3.0]);
            }
            let base = PosteriorSamples {
                s,
                k,
                p,
                a: 1,
                pi,
                alpha: vec![1.0; s],
                phi,
                beta0,
                beta: vec![0.2; s],
                provenance: Provenance::Svi,
            };

            let canonical = relabel(&base);
            // idempotence
            let twice = relabel(&canonical);
            assert_eq!(canonical.pi, twice.pi);
            assert_eq!(canonical.phi, twice.phi);
            assert_eq!(canonical.beta0, twice.beta0);

            // permutation invariance: shuffle cluster labels, relabel, compare
            let perms: [[usize; 3]; 3] = [[1, 0, 2], [2, 1, 0], [1, 2, 0]];
            for perm in perms {
                let mut permuted = base.clone();
                for d in 0..s {
                    for (dst, &src) in perm.iter().enumerate() {
                        permuted.pi[d * k + dst] = base.pi[d * k + src];
                        permuted.beta0[d * k + dst] = base.beta0[d * k + src];
                        for j in 0..p {
                            permuted.phi[(d * k + dst) * p + j] = base.phi[(d * k + src) * p + j];
                        }
                    }
                }
                let back = relabel(&permuted);
                for (a, b) in canonical.pi.iter().zip(back.pi.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
                for (a, b) in canonical.phi.iter().zip(back.phi.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
                // summaries built from both orderings agree
                let names = vec!["d0".to_string(), "d1".to_string()];
                let cnames = vec!["w0".to_string()];
                let sum_a = cluster_summary(&canonical, 100, &names, &cnames, &[]).unwrap();
                let sum_b = cluster_summary(&back, 100, &names, &cnames, &[]).unwrap();
                for (ca, cb) in sum_a.clusters.iter().zip(&sum_b.clusters) {
                    assert!((ca.membership.point - cb.membership.point).abs() < 1e-12);
                    for (pa, pb) in ca.phi.iter().zip(&cb.phi) {
                        assert!((pa.point - pb.point).abs() < 1e-12);
                    }
                }
            }
        },
    );
}
