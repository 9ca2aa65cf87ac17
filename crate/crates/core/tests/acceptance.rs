//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ctxfer_core::agents::Shaping;
use ctxfer_core::bench::{
    emit_outputs, pretrain_sources, run_trial, run_trial_with_hook, Exploration, ExperimentConfig, PretrainConfig,
    RunRecord,
};
use ctxfer_core::envs::{EnvFamily, EnvId, MazeSpec};
use ctxfer_core::mdp::{stream_rng, Encoder, Experience, SimRng, State, Stream, Transition};
use ctxfer_core::mixture::{bayes_posterior, MixtureNet};
use ctxfer_core::nn::{Head, Mlp};
use ctxfer_core::sources::SourceLibrary;
use ctxfer_core::transfer::{potential, shaped_reward};
use ctxfer_core::verify::{mixture_gradient_check, sequential_bayes, value_bound_suite, DeterministicMdp};
use rand::Rng;

type Outcome = Result<(bool, String), String>;

fn report(k: usize, title: &str, started: Instant, outcome: Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("{tag} criterion {k}: {title} ({detail}; {secs:.1} s)");
    passed
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let worst = (0..20u64).map(mixture_gradient_check).fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    Ok((worst < 1e-4 && secs < 10.0, format!("max relative error {worst:.2e} over 20 instances")))
}

fn random_simplex(rng: &mut SimRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

fn bayes_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = stream_rng(11, Stream::Init);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=6);
        let prior = random_simplex(&mut rng, n);
        let lik: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let ours = bayes_posterior(&prior, &lik).map_err(err)?;
        let oracle = sequential_bayes(&prior, &[lik]);
        for (a, b) in ours.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((worst < 1e-12 && secs < 1.0, format!("max abs difference {worst:.2e} over 1000 pairs")))
}

fn value_bound() -> Outcome {
    let started = Instant::now();
    let (violations, ratio) = value_bound_suite(2024, 1000).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        violations == 0 && secs < 30.0,
        format!("{violations} violations in 1000 MDPs, max lhs/rhs {ratio:.3}"),
    ))
}

fn identifiability(lib: &SourceLibrary) -> Outcome {
    let started = Instant::now();
    let spec = MazeSpec::two_room_10();
    let mut cfg = ExperimentConfig::defaults(EnvId::TwoRoom, "mapse");
    cfg.steps = 20_000;
    cfg.mapse_p = 0.0;
    cfg.exploration = Exploration::Constant { epsilon: 1.0 };
    cfg.snapshots = vec![20_000];
    let record = run_trial(&cfg, Some(lib), 0).map_err(err)?;
    let snap = record.snapshots.last().ok_or("no gate snapshot")?;
    let (mut correct, mut total) = (0, 0);
    for (cell, (_, gate)) in spec.free_cells().zip(&snap.rows) {
        total += 1;
        if gate[spec.room_of(cell)] > 0.9 {
            correct += 1;
        }
    }
    let frac = correct as f64 / total as f64;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        frac >= 0.9 && secs < 120.0,
        format!("{correct}/{total} in-room states above 0.9 after 20000 transitions"),
    ))
}

/// One-sided sign test p-value for `wins` successes among `n` untied pairs.
fn sign_test(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0;
        for j in 0..k {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        p += c / 2f64.powi(n as i32);
    }
    p
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn final_metric(r: &RunRecord) -> f64 {
    median(&r.curve.last().expect("curve has step 0").episode_lengths)
}

fn curve_average(r: &RunRecord) -> f64 {
    r.curve.iter().map(|row| row.mean()).sum::<f64>() / r.curve.len() as f64
}

fn mars_beats_none(lib: &SourceLibrary) -> Outcome {
    let started = Instant::now();
    let mut mars = ExperimentConfig::defaults(EnvId::TwoRoom, "mars");
    let mut none = ExperimentConfig::defaults(EnvId::TwoRoom, "none");
    for cfg in [&mut mars, &mut none] {
        cfg.steps = 30_000;
        cfg.seed = 7;
        cfg.snapshots.clear();
    }
    let (mut wins, mut losses) = (0, 0);
    let (mut avg_wins, mut m_final, mut n_final) = (0, Vec::new(), Vec::new());
    for k in 0..10 {
        let a = run_trial(&mars, Some(lib), k).map_err(err)?;
        let b = run_trial(&none, None, k).map_err(err)?;
        let (fa, fb) = (final_metric(&a), final_metric(&b));
        m_final.push(fa);
        n_final.push(fb);
        if fa < fb {
            wins += 1;
        } else if fa > fb {
            losses += 1;
        }
        if curve_average(&a) < curve_average(&b) {
            avg_wins += 1;
        }
    }
    let p = sign_test(wins, wins + losses);
    let secs = started.elapsed().as_secs_f64();
    Ok((
        p < 0.05 && secs < 600.0,
        format!(
            "final steps-to-goal median mars {} vs none {}, {wins} wins {losses} losses {} ties, p = {p:.4}; \
             mean over the learning curve lower for mars in {avg_wins}/10 trials",
            median(&m_final),
            median(&n_final),
            10 - wins - losses
        ),
    ))
}

fn frozen_gate() -> MixtureNet {
    let mut mix = MixtureNet::new(
        Mlp::zeros(&[5, 2], Head::Softmax, 0.0),
        Encoder::OneHot { n: 5 },
        0.05,
        1,
        5,
    );
    let batch: Vec<Experience> = (0..5)
        .map(|s| Experience {
            transition: Transition {
                s: State::Discrete(s),
                a: 0,
                r: 0.0,
                s_next: State::Discrete(s),
                terminal: false,
            },
            likelihoods: if s < 3 { vec![1.0, 0.1] } else { vec![0.1, 1.0] },
            advice: Vec::new(),
            advice_next: Vec::new(),
        })
        .collect();
    let refs: Vec<&Experience> = batch.iter().collect();
    for _ in 0..200 {
        mix.grad_step(&refs);
    }
    mix
}

fn shaping_soundness() -> Outcome {
    let started = Instant::now();
    // exact case: dyadic potentials, undiscounted
    let phis = [0.5, 0.25, 0.75, 0.125];
    let mut sum = 0.0;
    for t in 0..3 {
        sum += shaped_reward(0.0, 1.0, 1.0, phis[t], phis[t + 1], false);
    }
    let exact = sum == phis[3] - phis[0];

    let mix = frozen_gate();
    // source 0 always says "left", source 1 always says "right"
    let advice = [1.0, 0.0, 0.0, 1.0];
    let phi: Vec<Vec<f64>> = (0..5)
        .map(|s| {
            let g = mix.gate(&State::Discrete(s));
            (0..2).map(|a| potential(&g, &advice, a)).collect()
        })
        .collect();

    let mut rng = stream_rng(5, Stream::Init);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1..20);
        let gamma: f64 = [0.5, 0.9, 0.95, 1.0][rng.gen_range(0..4)];
        let c = rng.gen_range(0.1..5.0);
        let states: Vec<usize> = (0..=len).map(|_| rng.gen_range(0..5)).collect();
        let acts: Vec<usize> = (0..=len).map(|_| rng.gen_range(0..2)).collect();
        let terminal = rng.gen_bool(0.5);
        let mut total = 0.0;
        for t in 0..len {
            let last = terminal && t + 1 == len;
            let now = phi[states[t]][acts[t]];
            let next = phi[states[t + 1]][acts[t + 1]];
            total += gamma.powi(t as i32) * shaped_reward(0.0, c, gamma, now, next, last);
        }
        let end = if terminal { 0.0 } else { gamma.powi(len as i32) * phi[states[len]][acts[len]] };
        let expect = c * (end - phi[states[0]][acts[0]]);
        worst = worst.max((total - expect).abs());
    }

    let chain = DeterministicMdp::chain(5, -0.01, 1.0);
    let mut invariant = true;
    for gamma in [0.5, 0.9, 0.95] {
        let plain = chain.greedy_policy(gamma, None);
        for c in [0.5, 1.0, 2.0, 10.0] {
            invariant &= chain.greedy_policy(gamma, Some((c, &phi))) == plain;
        }
    }
    // the one-step form agrees with the learner's target for a terminal step
    let sh = Shaping {
        scale: 2.0,
        phi_now: 0.25,
        phi_next: vec![0.0, 0.0],
    };
    let y = ctxfer_core::agents::td_target(1.0, 0.9, true, &[3.0, 4.0], Some(&sh));
    let terminal_ok = y == shaped_reward(1.0, 2.0, 0.9, 0.25, 0.0, true);

    let secs = started.elapsed().as_secs_f64();
    Ok((
        exact && worst < 1e-12 && invariant && terminal_ok && secs < 1.0,
        format!(
            "exact telescoping {exact}, max deviation on 100 random trajectories {worst:.1e}, \
             greedy policy invariant {invariant}"
        ),
    ))
}

fn same_curves(a: &[RunRecord], b: &[RunRecord]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.curve == y.curve && x.episodes == y.episodes && x.seed == y.seed)
}

fn ablation_identities(maze: &SourceLibrary, cartpole: &SourceLibrary) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut identical = true;
    for (env, lib, steps) in [(EnvId::TwoRoom, maze, 10_000), (EnvId::Cartpole, cartpole, 3_000)] {
        let mut none = ExperimentConfig::defaults(env, "none");
        let mut mapse = ExperimentConfig::defaults(env, "mapse");
        mapse.mapse_p = 0.0;
        for cfg in [&mut none, &mut mapse] {
            cfg.steps = steps;
            cfg.trials = 2;
            cfg.seed = 3;
        }
        let a: Vec<RunRecord> = (0..2).map(|k| run_trial(&none, None, k)).collect::<Result<_, _>>().map_err(err)?;
        let b: Vec<RunRecord> =
            (0..2).map(|k| run_trial(&mapse, Some(lib), k)).collect::<Result<_, _>>().map_err(err)?;
        identical &= same_curves(&a, &b);
        let (da, db) = (dir.path().join(format!("{env}-none")), dir.path().join(format!("{env}-mapse")));
        emit_outputs(&none, &a, &da).map_err(err)?;
        emit_outputs(&mapse, &b, &db).map_err(err)?;
        identical &= read(&da.join("curve.csv"))? == read(&db.join("curve.csv"))?;
    }

    let mut cfg = ExperimentConfig::defaults(EnvId::TwoRoom, "mars");
    cfg.steps = 10_000;
    cfg.snapshots.clear();
    let states: Vec<State> = MazeSpec::two_room_10().free_cells().map(State::Discrete).collect();
    let (mut checked, mut worst) = (0u64, 0.0f64);
    let mut off_simplex = false;
    run_trial_with_hook(&cfg, Some(maze), 0, &mut |_, strategy| {
        for s in &states {
            let g = strategy.gate(s).expect("mars has a gate");
            off_simplex |= g.iter().any(|x| !x.is_finite() || *x < 0.0);
            worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
        }
        checked += 1;
    })
    .map_err(err)?;
    Ok((
        identical && !off_simplex && worst < 1e-12 && checked == 10_000,
        format!(
            "mapse(p=0) identical to none on two-room and cartpole: {identical}; \
             gate on simplex after all {checked} steps (max |sum - 1| {worst:.1e})"
        ),
    ))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(err)
}

fn cartpole_smoke(lib: &SourceLibrary) -> Outcome {
    let family = EnvFamily::new(EnvId::Cartpole, None).map_err(err)?;
    let mut env = family.sources().remove(0);
    let mut rng = stream_rng(99, Stream::Eval);
    let mut source_lengths = Vec::new();
    for _ in 0..10 {
        let mut s = env.reset(&mut rng);
        let mut len = 0;
        loop {
            let a = lib.tasks[0].policy.action(&s).ok_or("source policy has no action")?;
            let out = env.step(a).map_err(err)?;
            len += 1;
            if out.done() {
                break;
            }
            s = out.s_next;
        }
        source_lengths.push(len);
    }
    let source_ok = source_lengths.iter().all(|&l| l == 500);

    let cfg = ExperimentConfig::defaults(EnvId::Cartpole, "mars");
    let mut reached = 0;
    let mut details = Vec::new();
    for k in 0..10 {
        let r = run_trial(&cfg, Some(lib), k).map_err(err)?;
        let first = r.curve.iter().find(|row| row.mean() >= 200.0).map(|row| row.steps);
        if first.is_some() {
            reached += 1;
        }
        let last = r.curve.last().map_or(0.0, |row| row.mean());
        details.push(format!("{}/{last}", first.map_or("-".into(), |s| s.to_string())));
    }
    Ok((
        source_ok && reached >= 7,
        format!(
            "force-5 source lengths {source_lengths:?}; {reached}/10 mars trials reach a 200-step mean \
             (first step/final mean: {})",
            details.join(", ")
        ),
    ))
}

/// Criteria named on the command line (`cargo test --test acceptance -- 4 7`), or all.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=8).collect()
    } else {
        picked
    }
}

fn main() -> ExitCode {
    let want = selected();
    let mut all = true;
    let mut maze = None;
    let mut cartpole = None;
    for k in want {
        let t = Instant::now();
        if matches!(k, 4 | 5 | 7) && maze.is_none() {
            maze = Some(pretrain_sources(EnvId::TwoRoom, &PretrainConfig::defaults(EnvId::TwoRoom), None).map(|x| x.0));
        }
        if matches!(k, 7 | 8) && cartpole.is_none() {
            cartpole =
                Some(pretrain_sources(EnvId::Cartpole, &PretrainConfig::defaults(EnvId::Cartpole), None).map(|x| x.0));
            println!("cartpole sources pretrained in {:.1} s", t.elapsed().as_secs_f64());
        }
        let maze = || match &maze {
            Some(Ok(lib)) => Ok(lib),
            Some(Err(e)) => Err(e.to_string()),
            None => Err("maze sources missing".to_string()),
        };
        let cartpole = || match &cartpole {
            Some(Ok(lib)) => Ok(lib),
            Some(Err(e)) => Err(e.to_string()),
            None => Err("cartpole sources missing".to_string()),
        };
        let t = Instant::now();
        all &= match k {
            1 => report(1, "mixture gradient vs finite differences", t, gradient_correctness()),
            2 => report(2, "Bayes posterior vs brute-force gate", t, bayes_equivalence()),
            3 => report(3, "value-error bound on random finite MDPs", t, value_bound()),
            4 => report(4, "gate identifies the source of each room", t, maze().and_then(identifiability)),
            5 => report(5, "mars beats no transfer on the two-room maze", t, maze().and_then(mars_beats_none)),
            6 => report(6, "shaping telescopes and preserves the greedy policy", t, shaping_soundness()),
            7 => report(
                7,
                "ablation identities and gate simplex",
                t,
                maze().and_then(|m| ablation_identities(m, cartpole()?)),
            ),
            8 => report(8, "cart-pole smoke test", t, cartpole().and_then(cartpole_smoke)),
            _ => continue,
        };
    }
    println!("N/A  criterion 9: lunar lander results are out of scope");

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
