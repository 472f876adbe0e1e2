//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits non-zero on any failure.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use modsel::env::{rollout, Action, Environment, EpisodeConfig};
use modsel::eval::{baseline_dices, evaluate_agent, mean_std};
use modsel::experiment::{grpo_name, reinforce_name, run_experiment, ExperimentConfig};
use modsel::phantom::{generate_case, generate_dataset, Case, Lesion, Split, WorldSpec};
use modsel::policy::{log_prob_gradient, PolicyParams, StateFeatures};
use modsel::segmenter::{loss_and_gradient, train_seg, SegParams, SegTrainConfig, Segmenter};
use modsel::trainers::{
    mean_exact_kl, random_policy, stream_rng, train_grpo, train_reinforce, GrpoConfig, ReinforceConfig,
};
use modsel::volume::{dice, seg_loss, Dims, PortionScheme, SoftMask, ViewConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Central difference of `f` along each coordinate of `x`.
fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest component error relative to the gradient's own scale.
fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn c1_dice_oracle() -> Outcome {
    let start = Instant::now();
    let dims = Dims::new(16, 16, 4).unwrap();
    let mut rng = stream_rng(101, 0);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (pa, pb): (f64, f64) = (rng.random(), rng.random());
        let a: Vec<bool> = (0..dims.voxels()).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..dims.voxels()).map(|_| rng.random_bool(pb)).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let (na, nb) = (a.iter().filter(|x| **x).count(), b.iter().filter(|x| **x).count());
        let brute = if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        };
        let to_mask = |m: &[bool]| SoftMask::new(dims, m.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap();
        let soft = dice(&to_mask(&a), &to_mask(&b), 0.0).unwrap();
        worst = worst.max((soft - brute).abs());
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: worst <= 1e-9 && within(elapsed, 5),
        detail: format!("max |soft - brute| = {worst:.2e} (tol 1e-9), {elapsed:.2?} (limit 5s)"),
    }
}

fn small_world(seed: u64) -> WorldSpec {
    WorldSpec {
        dims: Dims::new(8, 8, 4).unwrap(),
        portions: 2,
        lesion_radius_range: (1.0, 1.5),
        ..WorldSpec::desk(seed)
    }
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let spec = small_world(202);
    let mut rng = stream_rng(202, 0);
    let weight = Normal::new(0.0, 0.5).unwrap();
    let (mut seg_worst, mut pol_worst) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let case = generate_case(&spec, i).unwrap();
        let views = ViewConfig::all_views(spec.channels);
        let view = views[rng.random_range(0..views.len())];
        let w: Vec<f64> = (0..3 * spec.channels + 1).map(|_| weight.sample(&mut rng)).collect();
        let params = SegParams::from_weights(spec.channels, w.clone()).unwrap();
        let (_, analytic) = loss_and_gradient(&params, &case.image, view, &case.truth).unwrap();
        let numeric = central_difference(&w, 1e-4, |x| {
            let p = SegParams::from_weights(spec.channels, x.to_vec()).unwrap();
            loss_and_gradient(&p, &case.image, view, &case.truth).unwrap().0
        });
        seg_worst = seg_worst.max(max_relative_error(&analytic, &numeric));

        let (portions, views_n, channels) = (2, spec.channels + 1, spec.channels);
        let policy = random_policy(portions, views_n, channels, 0.5, 1000 + i);
        let feats = StateFeatures::new(
            (0..policy.num_features())
                .map(|_| weight.sample(&mut rng) * 2.0)
                .collect(),
        );
        let action = rng.random_range(0..policy.num_actions());
        let analytic = log_prob_gradient(&policy, &feats, action).unwrap();
        let numeric = central_difference(policy.weights(), 1e-5, |x| {
            let p = PolicyParams::from_weights(portions, views_n, channels, x.to_vec()).unwrap();
            modsel::policy::action_distribution(&p, &feats)
                .unwrap()
                .log_prob(action)
        });
        pol_worst = pol_worst.max(max_relative_error(&analytic, &numeric));
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: seg_worst < 1e-3 && pol_worst < 1e-4 && within(elapsed, 30),
        detail: format!(
            "segmenter max rel err {seg_worst:.2e} (tol 1e-3), policy {pol_worst:.2e} (tol 1e-4), {elapsed:.2?} (limit 30s)"
        ),
    }
}

fn c3_telescoping() -> Outcome {
    let spec = WorldSpec::desk(303);
    let mut rng = stream_rng(303, 0);
    let weight = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let case = Arc::new(generate_case(&spec, i).unwrap());
        let seg = if i % 4 == 0 {
            Segmenter::Oracle
        } else {
            Segmenter::Trained(SegParams::from_weights(2, (0..7).map(|_| weight.sample(&mut rng)).collect()).unwrap())
        };
        let env = Environment::new(PortionScheme::new(8, 4).unwrap(), 2, seg).unwrap();
        let policy = random_policy(4, 3, 2, 1.0, i);
        let horizon = rng.random_range(1..=30);
        let prepared = env.prepare(case.clone()).unwrap();
        let trace = rollout(&env, &prepared, &policy, EpisodeConfig::sampled(horizon), &mut rng).unwrap();

        // independent path: unprepared steps, losses from the masks themselves
        let mut state = env.reset(case.clone()).unwrap();
        for rec in &trace.records {
            let a = env.action_space().action(rec.action).unwrap();
            state = env.step(&state, a).unwrap().0;
        }
        let y0 = SoftMask::zeros(case.truth.dims());
        let expected = seg_loss(&y0, &case.truth).unwrap() - seg_loss(state.segmentation(), &case.truth).unwrap();
        let got: f64 = trace.rewards().iter().sum();
        worst = worst.max((got - expected).abs() / expected.abs().max(1e-6));
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("max relative telescoping error {worst:.2e} over 100 rollouts (tol 1e-9)"),
    }
}

fn c4_brute_force() -> Outcome {
    let start = Instant::now();
    let spec = WorldSpec {
        noise_sd: 0.0,
        ..small_world(404)
    };
    let lesion = |z: f64, channel: usize| Lesion {
        center: [z, 3.5, 3.5],
        radii: [1.0, 1.5, 1.5],
        visible_in: vec![channel],
    };
    let mut rng = stream_rng(404, 0);
    let case = Arc::new(Case::from_lesions(&spec, "tiny", vec![lesion(0.5, 0), lesion(2.5, 1)], &mut rng).unwrap());
    let env = Environment::new(PortionScheme::new(4, 2).unwrap(), 2, Segmenter::Oracle).unwrap();
    let space = env.action_space();

    let mut best = f64::NEG_INFINITY;
    let mut sequences = 0;
    for a0 in space.iter() {
        for a1 in space.iter() {
            let s0 = env.reset(case.clone()).unwrap();
            let (s1, _) = env.step(&s0, a0).unwrap();
            let (s2, _) = env.step(&s1, a1).unwrap();
            best = best.max(s2.dice());
            sequences += 1;
        }
    }

    let cfg = ReinforceConfig {
        gamma: 0.5,
        epochs: 200,
        horizon: 2,
        learning_rate: 0.05,
        seed: 404,
    };
    let init = random_policy(2, 3, 2, 0.01, 404);
    let (policy, _) = train_reinforce(std::slice::from_ref(&case), &env, &cfg, init).unwrap();
    let prepared = env.prepare(case.clone()).unwrap();
    let greedy = rollout(&env, &prepared, &policy, EpisodeConfig::greedy(2), &mut rng).unwrap();
    let chosen: Vec<Action> = greedy.records.iter().map(|r| space.action(r.action).unwrap()).collect();
    let elapsed = start.elapsed();
    let gap = (greedy.final_dice() - best).abs();
    Outcome {
        pass: sequences == 36 && gap <= 1e-6 && within(elapsed, 120),
        detail: format!(
            "{sequences} sequences, max dice {best:.6}, greedy {:.6} via {chosen:?}, gap {gap:.1e} (tol 1e-6), {elapsed:.2?} (limit 2min)",
            greedy.final_dice()
        ),
    }
}

fn c5_table_ordering() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let spec = WorldSpec::desk(seed);
        let ds = generate_dataset(&spec, (200, 100, 50)).unwrap();
        let seg = train_seg(
            &ds.split(Split::Seg),
            &SegTrainConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let env = Environment::new(
            PortionScheme::new(spec.dims.depth, spec.portions).unwrap(),
            spec.channels,
            Segmenter::Trained(seg.params),
        )
        .unwrap();
        let holdout = ds.split(Split::Holdout);
        let baseline = |view| mean_std(&baseline_dices(&env, &holdout, view).unwrap()).0;
        let (t2, dw, all) = (
            baseline(ViewConfig::Single(0)),
            baseline(ViewConfig::Single(1)),
            baseline(ViewConfig::All),
        );
        let init = random_policy(spec.portions, spec.num_views(), spec.channels, 0.01, seed);
        let cfg = ReinforceConfig {
            seed,
            ..Default::default()
        };
        let (policy, _) = train_reinforce(&ds.split(Split::Rl), &env, &cfg, init).unwrap();
        let sampled = evaluate_agent(&env, &policy, &holdout, EpisodeConfig::sampled(10), seed, "agent").unwrap();
        let greedy = evaluate_agent(&env, &policy, &holdout, EpisodeConfig::greedy(10), seed, "agent").unwrap();
        let ok = sampled.mean_dice >= all && t2 < all && dw < all;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: t2 {t2:.3} dw {dw:.3} all {all:.3} | agent sampled {:.3} ({:.1} steps) greedy {:.3} [{}]",
            sampled.mean_dice,
            sampled.mean_steps.unwrap(),
            greedy.mean_dice,
            if ok { "ok" } else { "violated" }
        ));
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: pass && within(elapsed, 15 * 60),
        detail: format!("{elapsed:.2?} (limit 15min)\n      {}", lines.join("\n      ")),
    }
}

fn c6_grpo_kl() -> Outcome {
    let start = Instant::now();
    let spec = WorldSpec::desk(606);
    let ds = generate_dataset(&spec, (0, 20, 10)).unwrap();
    let env = Environment::new(PortionScheme::new(8, 4).unwrap(), 2, Segmenter::Oracle).unwrap();
    let reference = random_policy(4, 3, 2, 0.01, 606);
    let holdout = ds.split(Split::Holdout);
    let kl_after = |beta: f64| {
        let cfg = GrpoConfig {
            beta,
            learning_rate: 2e-4,
            epochs: 30,
            seed: 606,
            ..Default::default()
        };
        let (policy, _) = train_grpo(&ds.split(Split::Rl), &env, &cfg, &reference).unwrap();
        // 10 cases x 10 steps = 100 visited states
        let traces: Vec<_> = holdout
            .iter()
            .enumerate()
            .map(|(i, case)| {
                let prepared = env.prepare(case.clone()).unwrap();
                let mut rng = stream_rng(6060, i as u64);
                rollout(&env, &prepared, &policy, EpisodeConfig::sampled(10), &mut rng).unwrap()
            })
            .collect();
        let states: usize = traces.iter().map(|t| t.len()).sum();
        assert_eq!(states, 100);
        mean_exact_kl(&policy, &reference, &traces).unwrap()
    };
    let strong = kl_after(1e3);
    let free = kl_after(0.0);
    let elapsed = start.elapsed();
    Outcome {
        pass: strong < 0.01 && free >= 10.0 * strong && within(elapsed, 600),
        detail: format!(
            "KL(beta=1e3) {strong:.3e} (< 0.01), KL(beta=0) {free:.3e} = {:.0}x (>= 10x), {elapsed:.2?} (limit 10min)",
            free / strong
        ),
    }
}

fn smoke_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    ExperimentConfig::from_toml_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn c7_determinism() -> Outcome {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&cfg, &a).unwrap();
    run_experiment(&cfg, &b).unwrap();
    let (ca, cb) = (
        fs::read(a.join("eval.csv")).unwrap(),
        fs::read(b.join("eval.csv")).unwrap(),
    );
    let rows = String::from_utf8_lossy(&ca).lines().count() - 1;
    Outcome {
        pass: ca == cb && rows > 0,
        detail: format!(
            "two smoke runs, {} bytes / {rows} rows, identical: {}",
            ca.len(),
            ca == cb
        ),
    }
}

fn c8_grid_liveness() -> Outcome {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&cfg, dir.path()).unwrap();
    let mut names: Vec<String> = [0.3, 0.5, 0.8].iter().map(|&g| reinforce_name(g)).collect();
    names.extend([0.1, 0.5, 1.0].iter().map(|&b| grpo_name(b)));
    let mut missing = Vec::new();
    for name in &names {
        let ckpt = dir.path().join("policies").join(format!("{name}.ckpt"));
        let log = dir.path().join("logs").join(format!("{name}.csv"));
        let ckpt_ok = fs::read_to_string(&ckpt)
            .ok()
            .and_then(|t| PolicyParams::from_checkpoint(&t).ok())
            .is_some();
        let log_ok = fs::read_to_string(&log).is_ok_and(|t| t.lines().count() == 1 + 5);
        if !(ckpt_ok && log_ok) {
            missing.push(name.clone());
        }
    }
    Outcome {
        pass: missing.is_empty() && outcome.policies.len() == 6,
        detail: format!(
            "{} cells trained, missing or malformed: {missing:?}",
            outcome.policies.len()
        ),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("dice oracle equivalence", c1_dice_oracle),
        ("gradient checks", c2_gradients),
        ("reward telescoping", c3_telescoping),
        ("brute-force optimality", c4_brute_force),
        ("baseline/agent ordering", c5_table_ordering),
        ("GRPO KL regularization", c6_grpo_kl),
        ("run-experiment determinism", c7_determinism),
        ("gamma/beta grid liveness", c8_grid_liveness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("C{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        let outcome = run();
        println!(
            "{} {id} {name}: {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
