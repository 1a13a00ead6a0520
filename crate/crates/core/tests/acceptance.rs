//! Acceptance criteria 1 to 8. Each test writes one `criterion N ... PASS|FAIL`
//! line straight to stdout so it shows up even when output capture is on.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use protocad::behavior::{build_behavior_graph, lambda_returns};
use protocad::check::{random_batch, tiny_config, Term, TermFixture};
use protocad::config::RunConfig;
use protocad::env::{sample_context, Split};
use protocad::nn::normal_noise;
use protocad::proto::{
    feature_dim, sinkhorn, sinkhorn_assign, temporal_crossover_loss, Ablation, PROTOTYPES,
};
use protocad::replay::EpisodeRecord;
use protocad::trainer::{
    eval_threads, evaluate, run_episode, Phase, Policy, Trainer, METRICS_FILE,
};
use protocad::update::{build_model_graph, world_model_update, Models};
use protocad_tensor::{Graph, ParamSet, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn report(n: u32, name: &str, outcome: Outcome) {
    let line = match &outcome {
        Ok(detail) => format!("criterion {n} {name}: PASS ({detail})"),
        Err(detail) => format!("criterion {n} {name}: FAIL ({detail})"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    if let Err(detail) = outcome {
        panic!("criterion {n} {name}: {detail}");
    }
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    RunConfig::load(&path).expect("desk config")
}

// ---------------------------------------------------------------- criterion 1

fn group(models: &mut Models, term: Term) -> Vec<&mut ParamSet> {
    match term {
        Term::Actor => vec![&mut models.agent.actor],
        Term::Critic => vec![&mut models.agent.critic],
        _ => vec![
            &mut models.world.params,
            &mut models.proto.projector,
            &mut models.proto.prototypes,
        ],
    }
}

fn central_difference_error(models: &Models, fx: &TermFixture, term: Term) -> (Real, usize) {
    const STEP: Real = 1e-5;
    let mut analytic = models.clone();
    fx.eval(&mut analytic, term, true);
    let sets = group(&mut analytic, term).len();
    let mut worst: Real = 0.0;
    let mut n = 0;
    for si in 0..sets {
        let entries: Vec<(String, Tensor)> = {
            let mut a = analytic.clone();
            let set = group(&mut a, term).swap_remove(si);
            set.iter()
                .map(|(name, p)| {
                    let grad = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                    (name.to_string(), grad)
                })
                .collect()
        };
        for (name, grad) in entries {
            for i in 0..grad.len() {
                let mut probe = models.clone();
                let mut shifted = |delta: Real| {
                    group(&mut probe, term)[si].get_mut(&name).unwrap().value.data_mut()[i] += delta;
                    let v = fx.eval(&mut probe, term, false);
                    group(&mut probe, term)[si].get_mut(&name).unwrap().value.data_mut()[i] -= delta;
                    v
                };
                let fd = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
                let a = grad.data()[i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                n += 1;
            }
        }
    }
    (worst, n)
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let outcome = (|| {
        let mut parts = Vec::new();
        for free_nats in [0.0, 0.5] {
            let mut cfg = tiny_config();
            cfg.world.free_nats = free_nats;
            let models = Models::new(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).map_err(|e| e.to_string())?;
            let fx = TermFixture::new(&models, cfg, 12);
            let terms: &[Term] = if free_nats > 0.0 { &[Term::Kl] } else { &Term::ALL };
            for &term in terms {
                let (err, n) = central_difference_error(&models, &fx, term);
                let label = format!("{}(free_nats={free_nats})", term.name());
                if !(err <= 1e-4) {
                    return Err(format!("{label}: relative error {err:.3e} over {n} entries"));
                }
                parts.push(format!("{label} {err:.1e}"));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 60.0 {
            return Err(format!("took {secs:.1}s"));
        }
        Ok(format!("{} in {secs:.1}s", parts.join(", ")))
    })();
    report(1, "gradient correctness", outcome);
}

// ---------------------------------------------------------------- criterion 2

fn n_step(r: &[Real], v: &[Real], gamma: Real, tau: usize, n: usize) -> Real {
    let h = v.len() - 1;
    let end = (tau + n).min(h);
    let mut acc = 0.0;
    for (k, rk) in r[tau..end].iter().enumerate() {
        acc += gamma.powi(k as i32) * rk;
    }
    acc + gamma.powi((end - tau) as i32) * v[end]
}

fn expanded(r: &[Real], v: &[Real], gamma: Real, lambda: Real) -> Vec<Real> {
    let h = v.len() - 1;
    (0..=h)
        .map(|tau| {
            let head: Real = (1..h)
                .map(|n| (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(r, v, gamma, tau, n))
                .sum();
            head + lambda.powi(h as i32 - 1) * n_step(r, v, gamma, tau, h)
        })
        .collect()
}

fn nested_full_return(r: &[Real], v: &[Real], gamma: Real, tau: usize) -> Real {
    let h = v.len() - 1;
    let mut acc = v[h];
    for t in (tau..h).rev() {
        acc = r[t] + gamma * acc;
    }
    acc
}

#[test]
fn criterion_2_lambda_return_oracle() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: Real = 0.0;
        for draw in 0..1000 {
            let h = 1 + draw % 5;
            let r: Vec<Real> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<Real> = (0..=h).map(|_| rng.random_range(-10.0..10.0)).collect();
            let gamma = rng.random_range(0.0..1.0);
            let lambda = rng.random_range(0.0..1.0);
            let got = lambda_returns(&r, &v, gamma, lambda).map_err(|e| e.to_string())?;
            for (a, b) in got.iter().zip(expanded(&r, &v, gamma, lambda)) {
                worst = worst.max((a - b).abs());
            }
            let zero = lambda_returns(&r, &v, gamma, 0.0).map_err(|e| e.to_string())?;
            let one = lambda_returns(&r, &v, gamma, 1.0).map_err(|e| e.to_string())?;
            for tau in 0..=h {
                let one_step = if tau < h { r[tau] + gamma * v[tau + 1] } else { v[h] };
                if zero[tau] != one_step {
                    return Err(format!("lambda=0 at tau={tau}: {} vs {one_step}", zero[tau]));
                }
                let full = nested_full_return(&r, &v, gamma, tau);
                if one[tau] != full {
                    return Err(format!("lambda=1 at tau={tau}: {} vs {full}", one[tau]));
                }
            }
        }
        if worst > 1e-10 {
            return Err(format!("max abs error {worst:.3e}"));
        }
        Ok(format!("1000 draws, max abs error {worst:.1e}, lambda 0 and 1 exact"))
    })();
    report(2, "lambda-return oracle", outcome);
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_sinkhorn_marginals() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut col_err, mut row_err, mut fast_row_err): (Real, Real, Real) = (0.0, 0.0, 0.0);
        for _ in 0..25 {
            let scores = normal_noise(&mut rng, &[64, 8]);
            let q = sinkhorn(&scores, 0.5, 50).map_err(|e| e.to_string())?;
            for c in 0..8 {
                let s: Real = (0..64).map(|r| q.row(r)[c]).sum();
                col_err = col_err.max((s - 8.0).abs());
            }
            for r in 0..64 {
                row_err = row_err.max((q.row(r).iter().sum::<Real>() - 1.0).abs());
            }
            let q = sinkhorn(&scores, 0.05, 3).map_err(|e| e.to_string())?;
            for r in 0..64 {
                fast_row_err = fast_row_err.max((q.row(r).iter().sum::<Real>() - 1.0).abs());
            }
        }
        if col_err > 1e-4 || row_err > 1e-6 || fast_row_err > 1e-6 {
            return Err(format!(
                "column {col_err:.2e}, row {row_err:.2e}, 3-iteration row {fast_row_err:.2e}"
            ));
        }
        let mut g = Graph::new();
        let u_bar = g.leaf(normal_noise(&mut rng, &[64, 6]));
        let c = g.leaf(normal_noise(&mut rng, &[8, 6]));
        let w_bar = sinkhorn_assign(&mut g, u_bar, c, 0.05, 3).map_err(|e| e.to_string())?;
        let weights = g.constant(normal_noise(&mut rng, &[64, 8]));
        let prod = g.mul(w_bar, weights).map_err(|e| e.to_string())?;
        let loss = g.sum_all(prod);
        g.backward(loss).map_err(|e| e.to_string())?;
        let zero = |v| g.grad(v).is_none_or(|t: &Tensor| t.data().iter().all(|&x| x == 0.0));
        if !zero(u_bar) || !zero(c) {
            return Err("gradient reached the target projections or prototypes".into());
        }
        Ok(format!(
            "column {col_err:.1e}, row {row_err:.1e}, 3-iteration row {fast_row_err:.1e}, gradient-free"
        ))
    })();
    report(3, "sinkhorn marginals", outcome);
}

// ---------------------------------------------------------------- criterion 4

fn crossover(w: &[[Real; 2]], w_bar: &[[Real; 2]], crossed: bool) -> Result<Real, String> {
    let mut g = Graph::new();
    let rows = |x: &[[Real; 2]], f: fn(Real) -> Real| {
        Tensor::from_rows(&x.iter().map(|r| vec![f(r[0]), f(r[1])]).collect::<Vec<_>>()).unwrap()
    };
    let log_w = g.constant(rows(w, Real::ln));
    let target = g.constant(rows(w_bar, |v| v));
    let l = temporal_crossover_loss(&mut g, log_w, target, w.len(), crossed).map_err(|e| e.to_string())?;
    Ok(g.value(l).item())
}

#[test]
fn criterion_4_crossover_oracle() {
    let outcome = (|| {
        // Hand-expanded for M = 4: crossed pairs are (0,2), (1,3), (2,0), (3,1).
        let w = [[0.8, 0.2], [0.4, 0.6], [0.3, 0.7], [0.9, 0.1]];
        let wb = [[1.0, 0.0], [0.5, 0.5], [0.2, 0.8], [0.0, 1.0]];
        let want_crossed = -(1.0 * (0.3 as Real).ln()
            + 0.5 * (0.9 as Real).ln()
            + 0.5 * (0.1 as Real).ln()
            + 0.2 * (0.8 as Real).ln()
            + 0.8 * (0.2 as Real).ln()
            + 1.0 * (0.6 as Real).ln())
            / 4.0;
        let want_plain = -(1.0 * (0.8 as Real).ln()
            + 0.5 * (0.4 as Real).ln()
            + 0.5 * (0.6 as Real).ln()
            + 0.2 * (0.3 as Real).ln()
            + 0.8 * (0.7 as Real).ln()
            + 1.0 * (0.1 as Real).ln())
            / 4.0;
        let got_crossed = crossover(&w, &wb, true)?;
        let got_plain = crossover(&w, &wb, false)?;
        if (got_crossed - want_crossed).abs() > 1e-12 || (got_plain - want_plain).abs() > 1e-12 {
            return Err(format!(
                "crossed {got_crossed} vs {want_crossed}, plain {got_plain} vs {want_plain}"
            ));
        }
        let ln2 = crossover(&[[0.5, 0.5]; 4], &[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], true)?;
        if (ln2 - std::f64::consts::LN_2 as Real).abs() > 1e-12 {
            return Err(format!("one-hot vs uniform gave {ln2}"));
        }
        let steady = [[0.35, 0.65]; 4];
        let steady_bar = [[0.9, 0.1]; 4];
        let (a, b) = (crossover(&steady, &steady_bar, true)?, crossover(&steady, &steady_bar, false)?);
        if a != b {
            return Err(format!("time-constant case: crossed {a} vs plain {b}"));
        }
        Ok(format!("expansions within 1e-12, one-hot/uniform {ln2:.4}, time-constant exact"))
    })();
    report(4, "crossover-loss oracle", outcome);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_structural_invariants() {
    let outcome = (|| {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut models = Models::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let mut worst_norm: Real = 0.0;
        for _ in 0..20 {
            let batch = random_batch(&mut rng, &cfg);
            let up = world_model_update(&mut models, &batch, &cfg, &mut rng).map_err(|e| e.to_string())?;
            let c = models.proto.prototype_matrix();
            for k in 0..cfg.proto.k {
                let norm = c.row(k).iter().map(|v| v * v).sum::<Real>().sqrt();
                worst_norm = worst_norm.max((norm - 1.0).abs());
            }

            let before = (models.world.clone(), models.proto.clone());
            protocad::behavior::behavior_update(
                &models.world,
                &models.proto,
                &mut models.agent,
                &up.h,
                &up.z,
                cfg.ablation,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            if before.0 != models.world || before.1 != models.proto {
                return Err("behavior update changed world model, projector or prototypes".into());
            }
            let bits = |p: &ParamSet| -> Vec<u64> {
                p.iter().flat_map(|(_, q)| q.value.data().iter().map(|v| (*v as f64).to_bits())).collect()
            };
            if bits(&before.0.params) != bits(&models.world.params)
                || bits(&before.1.projector) != bits(&models.proto.projector)
                || bits(&before.1.prototypes) != bits(&models.proto.prototypes)
            {
                return Err("behavior update changed parameter bits".into());
            }
        }
        if worst_norm > 1e-6 {
            return Err(format!("prototype norm off by {worst_norm:.2e}"));
        }

        let batch = random_batch(&mut rng, &cfg);
        let mut g = Graph::new();
        let mg = build_model_graph(&mut g, &models, &batch, &batch.obs, &batch.obs, cfg.ablation, None, &mut rng)
            .map_err(|e| e.to_string())?;
        g.backward(mg.rew).map_err(|e| e.to_string())?;
        for (name, v) in mg.projector.iter().chain(mg.prototypes.iter()) {
            if let Some(t) = g.grad(v) {
                if t.data().iter().any(|&x| x != 0.0) {
                    return Err(format!("reward loss has a gradient on `{name}`"));
                }
            }
        }

        let (h, z, d) = (64, 16, 32);
        let full = feature_dim(h + z, d, Ablation::Full);
        let nop = feature_dim(h + z, d, Ablation::NoProjection);
        if full != h + z + 2 * d || nop != h + z + d {
            return Err(format!("feature widths {full}/{nop}"));
        }
        let desk = desk_config();
        let m = Models::new(&desk, &mut rng).map_err(|e| e.to_string())?;
        if m.agent.feature_dim != 144 {
            return Err(format!("desk feature width {}", m.agent.feature_dim));
        }
        Ok(format!("norm error {worst_norm:.1e}, reward head isolated, dims {full}/{nop}"))
    })();
    report(5, "structural invariants", outcome);
}

// ---------------------------------------------------------------- criterion 6

fn small_run_config() -> RunConfig {
    let mut cfg = desk_config();
    cfg.collect_interval = 50;
    cfg.eval_every = 1600;
    cfg.eval_episodes = 2;
    cfg
}

fn checkpoint_bytes(t: &Trainer) -> Vec<u8> {
    let mut bytes = Vec::new();
    t.to_checkpoint().unwrap().write_to(&mut bytes).unwrap();
    bytes
}

#[test]
fn criterion_6_determinism_and_persistence() {
    let outcome = (|| {
        let e = |e: protocad::Error| e.to_string();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = small_run_config();
        let runs = [dir.path().join("a"), dir.path().join("b")];
        let mut finals = Vec::new();
        for out in &runs {
            let mut t = Trainer::new(cfg.clone(), Some(out)).map_err(e)?;
            while t.updates < 100 {
                t.run_cycle().map_err(e)?;
            }
            finals.push(checkpoint_bytes(&t));
        }
        let ma = std::fs::read(runs[0].join(METRICS_FILE)).map_err(|e| e.to_string())?;
        let mb = std::fs::read(runs[1].join(METRICS_FILE)).map_err(|e| e.to_string())?;
        if ma != mb || ma.is_empty() {
            return Err("metrics files differ between identical runs".into());
        }
        if finals[0] != finals[1] {
            return Err("final checkpoints differ between identical runs".into());
        }

        let resumed_dir = dir.path().join("c");
        let mut t = Trainer::new(cfg.clone(), Some(&resumed_dir)).map_err(e)?;
        while t.updates < 50 {
            t.run_cycle().map_err(e)?;
        }
        drop(t);
        let mut t = Trainer::resume(&resumed_dir).map_err(e)?;
        while t.updates < 100 {
            t.run_cycle().map_err(e)?;
        }
        if checkpoint_bytes(&t) != finals[0] {
            return Err("save/load/continue diverged from the uninterrupted run".into());
        }
        let mc = std::fs::read(resumed_dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
        if mc != ma {
            return Err("resumed metrics file differs".into());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ctx = sample_context(cfg.task, Split::Train, &cfg.contexts, &mut rng);
        let ep = run_episode(&t.models, &cfg, ctx, 17, Policy::Random, &mut rng, None).map_err(e)?;
        let path = dir.path().join("ep.pcad");
        ep.save(&path).map_err(e)?;
        let back = EpisodeRecord::load(&path).map_err(e)?;
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back != ep
            || bits(&back.obs) != bits(&ep.obs)
            || bits(&back.act) != bits(&ep.act)
            || bits(&back.rew) != bits(&ep.rew)
        {
            return Err("episode file round trip changed data".into());
        }
        Ok(format!(
            "{} metric lines identical, resume bitwise identical, episode of {} steps round-trips",
            ma.iter().filter(|&&b| b == b'\n').count(),
            ep.len()
        ))
    })();
    report(6, "determinism and persistence", outcome);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_end_to_end_generalization() {
    let outcome = (|| {
        let e = |e: protocad::Error| e.to_string();
        let cfg = desk_config();
        let start = Instant::now();
        let mut t = Trainer::new(cfg.clone(), None).map_err(e)?;
        t.run(|_| {}).map_err(e)?;
        let minutes = start.elapsed().as_secs_f64() / 60.0;

        let metrics = t.metrics();
        let last_eval = metrics
            .iter()
            .rev()
            .find(|m| m.phase == Phase::EvalTest)
            .ok_or("no eval_test record")?;
        let random = evaluate(&t.models, &cfg, Split::Test, 20, cfg.seed ^ 0x5eed, Policy::Random, eval_threads())
            .map_err(e)?;
        let window = |lo: usize, hi: usize| {
            let xs: Vec<f64> = metrics
                .iter()
                .filter(|m| m.phase == Phase::Train && m.env_step > lo && m.env_step <= hi)
                .map(|m| m.return_mean)
                .collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        };
        let first = window(0, 10_000);
        let last = window(cfg.total_steps - 10_000, cfg.total_steps);
        let ratio = last_eval.return_mean / random.return_mean;
        let detail = format!(
            "eval_test {:.1} vs random {:.1} ({ratio:.2}x), train window {first:.1} -> {last:.1} ({:.2}x), {minutes:.1} min",
            last_eval.return_mean,
            random.return_mean,
            last / first
        );
        if ratio < 2.5 || last < 2.0 * first || minutes > 60.0 {
            return Err(detail);
        }
        Ok(detail)
    })();
    report(7, "end-to-end generalization", outcome);
}

// ---------------------------------------------------------------- criterion 8

fn traces_by_scope(cfg: &RunConfig) -> BTreeMap<String, Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let models = Models::new(cfg, &mut rng).unwrap();
    let batch = random_batch(&mut rng, cfg);
    let n = cfg.batch_size * cfg.seq_len;
    let h = normal_noise(&mut rng, &[n, cfg.world.h_dim]);
    let z = normal_noise(&mut rng, &[n, cfg.world.z_dim]);
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut g = Graph::new();
    build_model_graph(&mut g, &models, &batch, &batch.obs, &batch.obs, cfg.ablation, None, &mut rng).unwrap();
    let mut gb = Graph::new();
    build_behavior_graph(&mut gb, &models.world, &models.proto, &models.agent, &h, &z, cfg.ablation, None, &mut rng)
        .unwrap();
    for entry in g.trace().into_iter().chain(gb.trace()) {
        out.entry(entry.scope).or_default().push(entry.op);
    }
    out
}

fn differing_scopes(a: &BTreeMap<String, Vec<String>>, b: &BTreeMap<String, Vec<String>>) -> BTreeSet<String> {
    a.keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}

#[test]
fn criterion_8_ablation_wiring() {
    let outcome = (|| {
        let e = |e: protocad::Error| e.to_string();
        let mut tiny = tiny_config();
        let full = traces_by_scope(&tiny);
        let mut parts = Vec::new();
        for (ablation, scope) in [(Ablation::NoProjection, "feature"), (Ablation::PlainSwav, "swav_loss")] {
            tiny.ablation = ablation;
            let diff = differing_scopes(&full, &traces_by_scope(&tiny));
            if diff != BTreeSet::from([scope.to_string()]) {
                return Err(format!("{ablation}: trace differs in {diff:?}, expected only `{scope}`"));
            }

            let mut cfg = desk_config();
            cfg.ablation = ablation;
            let mut t = Trainer::new(cfg, None).map_err(e)?;
            while t.updates < 1000 {
                t.run_cycle().map_err(e)?;
            }
            let finite = t.metrics().iter().all(|m| {
                [m.loss_kl, m.loss_obs, m.loss_rew, m.loss_tcswav, m.loss_actor, m.loss_critic]
                    .iter()
                    .all(|v| v.is_none_or(f64::is_finite))
            });
            let p = &t.models.proto.prototypes;
            if !finite || !p.get(PROTOTYPES).unwrap().value.all_finite() {
                return Err(format!("{ablation}: non-finite losses or parameters"));
            }
            parts.push(format!("{ablation}: 1000 updates finite, trace differs only in `{scope}`"));
        }
        Ok(parts.join("; "))
    })();
    report(8, "ablation wiring", outcome);
}
