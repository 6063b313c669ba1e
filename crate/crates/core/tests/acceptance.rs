//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gacsim::envs::{sample_batch, ContextualBanditSpec};
use gacsim::gac::{control_step, cosine, post_projection_cosine, project, AlignmentState, ControlAction, GacConfig, Regime};
use gacsim::gradvec::{dot, unit_direction, GradientVector, ShardLayout};
use gacsim::grpo::{importance_ratio, surrogate_gradient, surrogate_value, GrpoConfig, PolicySnapshot};
use gacsim::pipeline::{run_training, RunMetrics, StalenessSchedule, TrainingSetup, FINAL_RETURN_WINDOW, SUMMARY_WARMUP_STEPS};
use gacsim::theory::{central_differences, check_bias_reduction, finite_diff_check, run_bias_study, run_bound_grid, BiasModel, BiasStudy, BoundGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn gaussian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gv(v: Vec<f64>) -> GradientVector {
    GradientVector::new(v).unwrap()
}

fn projection_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_scale, mut worst_orth, mut worst_closed, mut worst_rank_one) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut instances = 0;
    while instances < 10_000 {
        let dim = rng.gen_range(2..=64);
        let c_low = rng.gen_range(0.01..0.5);
        let config = GacConfig {
            c_low,
            c_high: 1.0,
            ..GacConfig::default()
        };
        let prev = gv(gaussian(dim, 1.0, &mut rng));
        let u = unit_direction(&prev).unwrap();
        let prev = prev.scaled(rng.gen_range(10.0..1000.0) / prev.norm()).unwrap();
        let target = rng.gen_range(c_low..0.99) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let noise = gv(gaussian(dim, 1.0, &mut rng));
        let orth = noise.add_scaled(-dot(&noise, &u).unwrap(), &u).unwrap();
        let orth = orth.scaled(1.0 / orth.norm()).unwrap();
        let g = u
            .scaled(target)
            .unwrap()
            .add_scaled((1.0 - target * target).sqrt(), &orth)
            .unwrap()
            .scaled(rng.gen_range(10.0..1000.0))
            .unwrap();
        let layout = ShardLayout::even(dim, rng.gen_range(1..=dim.min(8))).unwrap();
        let c_t = cosine(&g, &prev, &layout, config.cosine_epsilon).unwrap();
        if !(c_t.abs() > c_low && c_t.abs() < config.c_high) {
            continue;
        }
        instances += 1;
        let out = project(&g, &prev, c_t, &config).unwrap();
        let alpha = c_low / c_t.abs();
        let (g_u, out_u) = (dot(&g, &u).unwrap(), dot(&out, &u).unwrap());
        worst_scale = worst_scale.max(rel(out_u, alpha * g_u));
        let g_perp = g.add_scaled(-g_u, &u).unwrap();
        let out_perp = out.add_scaled(-out_u, &u).unwrap();
        worst_orth = worst_orth.max(out_perp.sub(&g_perp).unwrap().norm() / g_perp.norm());
        let measured = out_u / out.norm();
        worst_closed = worst_closed.max(rel(measured, post_projection_cosine(c_t, c_low)));
        let rank_one = g.add_scaled(-(1.0 - alpha) * g_u, &u).unwrap();
        worst_rank_one = worst_rank_one.max(out.sub(&rank_one).unwrap().norm() / g.norm());
    }
    Outcome {
        pass: worst_scale <= 1e-9 && worst_orth <= 1e-9 && worst_closed <= 1e-9 && worst_rank_one <= 1e-12,
        detail: format!(
            "10^4 instances; parallel {worst_scale:.1e}, orthogonal {worst_orth:.1e}, closed form {worst_closed:.1e} (tol 1e-9); rank-one {worst_rank_one:.1e} (tol 1e-12)"
        ),
    }
}

fn sharded_cosine_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.gen_range(8..=65_536);
        let ranks = rng.gen_range(1..=16usize);
        let mut cuts: Vec<usize> = (1..dim).collect::<Vec<_>>().choose_multiple(&mut rng, ranks - 1).copied().collect();
        cuts.sort_unstable();
        let layout = ShardLayout::new(dim, &cuts).unwrap();
        let prev = gv(gaussian(dim, 1.0, &mut rng));
        let mix = rng.gen_range(-0.95..0.95);
        let fresh = gv(gaussian(dim, 1.0, &mut rng));
        let curr = prev.scaled(mix).unwrap().add_scaled(1.0, &fresh).unwrap();
        let single = cosine(&curr, &prev, &ShardLayout::single(dim).unwrap(), 1e-8).unwrap();
        let sharded = cosine(&curr, &prev, &layout, 1e-8).unwrap();
        worst = worst.max(rel(sharded, single));
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("10^3 cases, dim 8..65536, 1..16 ranks; max rel diff {worst:.1e} (tol 1e-12)"),
    }
}

/// Random behavior snapshot at a random distance from θ, resampled until no
/// ratio sits within 1e-4 of a clip boundary.
fn grpo_config_case(rng: &mut ChaCha8Rng) -> (PolicySnapshot, gacsim::envs::RolloutBatch, PolicySnapshot, GrpoConfig) {
    loop {
        let contexts = rng.gen_range(1..=6);
        let actions = rng.gen_range(2..=6);
        let spec = ContextualBanditSpec::uniform(contexts, actions).unwrap();
        let dim = contexts * actions;
        let version: u64 = rng.gen_range(0..20);
        let behavior = PolicySnapshot::new(contexts, actions, gaussian(dim, 1.0, rng), version).unwrap();
        let drift = [0.0, 0.05, 0.3, 1.0][rng.gen_range(0..4)];
        let mut theta_vals = behavior.theta().to_vec();
        for v in theta_vals.iter_mut() {
            *v += drift * rng.sample::<f64, _>(StandardNormal);
        }
        let theta = PolicySnapshot::new(contexts, actions, theta_vals, version + rng.gen_range(0..8)).unwrap();
        let config = GrpoConfig {
            clip_epsilon: rng.gen_range(0.1..0.3),
            entropy_coef: if rng.gen_bool(0.5) { rng.gen_range(0.0..0.1) } else { 0.0 },
            kl_coef: if rng.gen_bool(0.5) { rng.gen_range(0.0..0.1) } else { 0.0 },
            group_size: rng.gen_range(2..=6),
            ..GrpoConfig::default()
        };
        let batch = sample_batch(&spec, &behavior, rng.gen_range(1..=6), config.group_size, rng).unwrap();
        let near_kink = batch.contexts.iter().enumerate().any(|(i, &c)| {
            batch.actions[i].iter().enumerate().any(|(j, &a)| {
                let r = importance_ratio(&theta, c, a, batch.behavior_logprobs[i][j]).unwrap();
                (r - (1.0 - config.clip_epsilon)).abs() < 1e-4 || (r - (1.0 + config.clip_epsilon)).abs() < 1e-4
            })
        });
        if !near_kink {
            return (theta, batch, behavior, config);
        }
    }
}

const SIGNIFICANT_GRADIENT: f64 = 1e-6;

fn grpo_gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    let (mut clipped_cases, mut checked) = (0, 0);
    for _ in 0..50 {
        let (theta, batch, behavior, config) = grpo_config_case(&mut rng);
        let (grad, report) = surrogate_gradient(&theta, &batch, &behavior, &config).unwrap();
        if report.clip_fraction > 0.0 {
            clipped_cases += 1;
        }
        // Coordinates whose analytic derivative vanishes (rows absent from
        // the batch, zero-advantage rows, KL at ratio 1) leave only O(1e-12)
        // differencing noise, which no relative measure can resolve. Those
        // are checked in absolute terms instead.
        let (significant, vanishing): (Vec<usize>, Vec<usize>) =
            (0..theta.dim()).partition(|&i| grad.as_slice()[i].abs() >= SIGNIFICANT_GRADIENT);
        let objective = |x: &[f64]| surrogate_value(&theta.with_theta(x.to_vec())?, &batch, &config);
        worst = worst.max(finite_diff_check(objective, &grad, theta.theta(), 1e-5, &significant).unwrap());
        checked += significant.len();
        let numeric = central_differences(objective, theta.theta(), 1e-5, &vanishing).unwrap();
        for (&i, n) in vanishing.iter().zip(numeric) {
            worst_abs = worst_abs.max((grad.as_slice()[i] - n).abs());
        }
    }
    Outcome {
        pass: worst < 1e-5 && worst_abs <= 1e-9,
        detail: format!(
            "50 configurations ({clipped_cases} with clipped terms); max rel error {worst:.1e} over {checked} coordinates (tol 1e-5); vanishing coordinates max abs error {worst_abs:.1e} (tol 1e-9)"
        ),
    }
}

fn bias_reduction_oracle() -> Outcome {
    let trials = run_bias_study(&BiasStudy::default()).unwrap();
    let holds = trials.iter().filter(|t| t.check.holds).count();
    let active = trials.iter().filter(|t| t.remainder_norm > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_gap = 0.0f64;
    for i in 0..100 {
        let dim = [10, 50][i % 2];
        let model = BiasModel::scaled_identity(dim, [0.1, 0.3, 1.0][i % 3], 0.5, 0.0);
        let g = gv(gaussian(dim, 1.0, &mut rng));
        let check = check_bias_reduction(&model, &g, &GradientVector::zeros(dim)).unwrap();
        worst_gap = worst_gap.max((check.lhs - check.rhs).abs());
    }
    Outcome {
        pass: holds == trials.len() && trials.len() == 10_000 && worst_gap <= 1e-10,
        detail: format!(
            "{holds}/{} trials hold ({active} with active remainder); B = λI, r = 0 equality gap {worst_gap:.1e} (tol 1e-10)",
            trials.len()
        ),
    }
}

fn convergence_bound_oracle() -> Outcome {
    let grid = BoundGrid::default();
    let records = run_bound_grid(&grid).unwrap();
    let holds = records.iter().filter(|r| r.check.holds).count();
    let mut monotone = true;
    for &sigma in &grid.noise_sigmas {
        let bias: Vec<f64> = records
            .iter()
            .filter(|r| r.noise_sigma == sigma)
            .map(|r| r.check.mean_bias_norm_sq)
            .collect();
        monotone &= bias.windows(2).all(|w| w[1] >= w[0]);
    }
    Outcome {
        pass: holds == records.len() && monotone,
        detail: format!(
            "{holds}/{} configurations hold on {}-seed averages; Σ‖b‖²/T weakly increasing in staleness: {monotone}",
            records.len(),
            grid.seeds
        ),
    }
}

fn run_bandit(staleness: u64, gac: bool, seed: u64) -> RunMetrics {
    run_training(&TrainingSetup {
        schedule: StalenessSchedule::fixed(staleness),
        controller: gac.then(GacConfig::default),
        seed,
        ..TrainingSetup::default()
    })
    .unwrap()
}

fn q90(m: &RunMetrics) -> f64 {
    m.alignment_stats(SUMMARY_WARMUP_STEPS).map_or(0.0, |a| a.q90_abs_cosine)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn dynamics_reproduction() -> Vec<Outcome> {
    let seeds: Vec<u64> = (0..5).collect();
    let levels = [0u64, 4, 8, 16, 32];
    let mut off = Vec::new();
    let mut on = Vec::new();
    for &s in &levels {
        off.push(seeds.iter().map(|&seed| run_bandit(s, false, seed)).collect::<Vec<_>>());
        on.push(seeds.iter().map(|&seed| run_bandit(s, true, seed)).collect::<Vec<_>>());
    }
    let idx = |s: u64| levels.iter().position(|&l| l == s).unwrap();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");

    let sync = &off[idx(0)];
    let sync_final: Vec<f64> = sync.iter().map(|m| m.final_return(FINAL_RETURN_WINDOW)).collect();
    let a_hits = sync_final.iter().filter(|&&r| r >= 0.95).count();

    let q_sync: Vec<f64> = sync.iter().map(q90).collect();
    let q_stale: Vec<f64> = off[idx(16)].iter().map(q90).collect();
    let b_hits = (0..5).filter(|&i| q_sync[i] < 0.15 && q_stale[i] >= 2.0 * q_sync[i] && q_stale[i] > q_sync[i]).count();

    let q_gac: Vec<f64> = on[idx(16)].iter().map(q90).collect();
    let r_gac: Vec<f64> = on[idx(16)].iter().map(|m| m.final_return(FINAL_RETURN_WINDOW)).collect();
    let r_stale: Vec<f64> = off[idx(16)].iter().map(|m| m.final_return(FINAL_RETURN_WINDOW)).collect();
    let c_hits = (0..5).filter(|&i| q_gac[i] <= 1.5 * q_sync[i] && r_gac[i] >= r_stale[i]).count();

    let mut d_pass = true;
    let mut d_detail = Vec::new();
    for &s in &[8u64, 16, 32] {
        let mut with: Vec<f64> = on[idx(s)].iter().map(|m| m.final_return(FINAL_RETURN_WINDOW)).collect();
        let mut without: Vec<f64> = off[idx(s)].iter().map(|m| m.final_return(FINAL_RETURN_WINDOW)).collect();
        let (mw, mo) = (median(&mut with), median(&mut without));
        d_pass &= mw >= mo;
        d_detail.push(format!("s={s}: {mw:.4} vs {mo:.4}"));
    }

    vec![
        Outcome {
            pass: a_hits >= 4,
            detail: format!("(a) sync final return ≥ 0.95 on {a_hits}/5 seeds [{}]", fmt(&sync_final)),
        },
        Outcome {
            pass: b_hits >= 4,
            detail: format!(
                "(b) q0.9|c| s=0 [{}] vs s=16 [{}]: {b_hits}/5 seeds below 0.15 and doubled",
                fmt(&q_sync),
                fmt(&q_stale)
            ),
        },
        Outcome {
            pass: c_hits >= 4,
            detail: format!(
                "(c) s=16 with GAC q0.9|c| [{}], return [{}] vs without [{}]: {c_hits}/5 seeds within 1.5x of sync and not worse",
                fmt(&q_gac),
                fmt(&r_gac),
                fmt(&r_stale)
            ),
        },
        Outcome {
            pass: d_pass,
            detail: format!("(d) seed-median final return with vs without GAC, {}", d_detail.join(", ")),
        },
    ]
}

fn algorithm_trace() -> Outcome {
    let config = GacConfig::default();
    let layout = ShardLayout::even(2, 2).unwrap();
    let g = |x: f64, y: f64| gv(vec![x, y]);
    // g3 sits at cosine 0.2 to g2. Norms are large enough that the ε in the
    // cosine denominator stays below the 1e-9 comparison tolerance.
    let u2 = unit_direction(&g(4.0, 100.0)).unwrap();
    let u2_perp = g(u2.as_slice()[1], -u2.as_slice()[0]);
    let g3 = u2.scaled(0.2).unwrap().add_scaled(0.96f64.sqrt(), &u2_perp).unwrap().scaled(300.0).unwrap();
    let g4 = g3.scaled(2.0).unwrap();
    let g5 = g4.add_scaled(0.1, &g(1.0, 0.0)).unwrap();
    let g6 = g(-g5.as_slice()[1], g5.as_slice()[0]);

    enum Want {
        Apply(GradientVector),
        Project,
        Skip,
    }
    let script = [
        (g(100.0, 0.0), Regime::Warmup, Want::Apply(g(100.0, 0.0))),
        (g(4.0, 100.0), Regime::Safe, Want::Apply(g(4.0, 100.0))),
        (g3.clone(), Regime::Projection, Want::Project),
        (g4.clone(), Regime::Violation, Want::Skip),
        (g5.clone(), Regime::Violation, Want::Skip),
        (g6.clone(), Regime::Safe, Want::Apply(g6.clone())),
    ];

    let mut state = AlignmentState::default();
    let mut failures = Vec::new();
    for (line, (curr, regime, want)) in script.into_iter().enumerate() {
        let prev = state.prev_grad.clone();
        let (action, next) = control_step(state, curr.clone(), &layout, &config).unwrap();
        let mut ok = next.last_regime == Some(regime) && next.prev_grad.as_ref() == Some(&curr) && next.persistent_snapshots() == 1;
        ok &= match (&want, &action, &prev) {
            (Want::Apply(expected), ControlAction::Apply(applied), _) => applied == expected,
            (Want::Project, ControlAction::Apply(applied), Some(p)) => {
                let c_t = next.last_cosine.unwrap();
                let u = unit_direction(p).unwrap();
                (c_t - 0.2).abs() < 1e-8
                    && rel(dot(applied, &u).unwrap(), config.c_low / c_t.abs() * dot(&curr, &u).unwrap()) < 1e-12
                    && rel(dot(applied, &u).unwrap() / applied.norm(), post_projection_cosine(c_t, config.c_low)) < 1e-9
            }
            (Want::Skip, ControlAction::Skip, _) => true,
            _ => false,
        };
        ok &= (line == 0) == next.last_cosine.is_none();
        if !ok {
            failures.push(line + 1);
        }
        state = next;
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "warmup, safe, projection, violation x2, safe; single snapshot held throughout; mismatched lines {failures:?}"
        ),
    }
}

fn run_cli(config: &Path, root: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_gacsim"))
        .arg("run")
        .arg(config)
        .env("GACSIM_OUTPUT_ROOT", root)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        ("sync", "experiment_name = \"sync\"\nseed = 3\n"),
        (
            "stale_gac",
            "experiment_name = \"stale_gac\"\nseed = 7\n[schedule]\nstaleness = 16\n[gac]\nenabled = true\n",
        ),
        (
            "random_lag",
            "experiment_name = \"random_lag\"\nsteps = 200\n[schedule]\nstaleness = 8\nlag_mode = \"uniform_random\"\n",
        ),
    ];
    let mut identical = 0;
    for (name, text) in configs {
        let path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        if !(run_cli(&path, &a) && run_cli(&path, &b)) {
            continue;
        }
        let same = ["metrics.csv", "summary.jsonl"].iter().all(|f| {
            let x = std::fs::read(a.join(name).join(f));
            let y = std::fs::read(b.join(name).join(f));
            matches!((x, y), (Ok(x), Ok(y)) if x == y && !x.is_empty())
        });
        identical += usize::from(same);
    }
    Outcome {
        pass: identical == configs.len(),
        detail: format!("{identical}/{} repeated `run` invocations byte-identical", configs.len()),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    let mut all_pass = true;
    let mut report = |id: &str, outcome: Outcome, elapsed: Duration, budget: Option<Duration>| {
        let in_budget = budget.map_or(true, |b| elapsed <= b);
        let pass = outcome.pass && in_budget;
        all_pass &= pass;
        let budget_note = budget.map_or(String::new(), |b| format!(" budget {:.0}s", b.as_secs_f64()));
        println!(
            "[{}] criterion {id}: {} ({:.2}s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        );
    };
    let secs = |s| Some(Duration::from_secs(s));

    let (o, t) = timed(projection_exactness);
    report("1", o, t, secs(5));
    let (o, t) = timed(sharded_cosine_equivalence);
    report("2", o, t, secs(30));
    let (o, t) = timed(grpo_gradient_correctness);
    report("3", o, t, secs(60));
    let (o, t) = timed(bias_reduction_oracle);
    report("4", o, t, secs(30));
    let (o, t) = timed(convergence_bound_oracle);
    report("5", o, t, secs(120));
    let (parts, t) = timed(dynamics_reproduction);
    for (part, o) in ["6a", "6b", "6c", "6d"].iter().zip(parts) {
        report(part, o, t, secs(600));
    }
    let (o, t) = timed(algorithm_trace);
    report("7", o, t, Some(Duration::from_secs(1)));
    let (o, t) = timed(reproducibility);
    report("8", o, t, None);

    if !all_pass {
        std::process::exit(1);
    }
}
