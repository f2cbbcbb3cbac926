//! Acceptance run: one pass/fail line per criterion, non-zero exit status if
//! any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mtl_teleport::combiners::{cagrad_dual, fairgrad_residual, fairgrad_weights, min_norm_weights, pcgrad_surgery};
use mtl_teleport::conflict::{detect_dominated, many_task_trigger, ConflictReport, GradientMatrix, TriggerRule};
use mtl_teleport::diffcore::{eval_grad, eval_loss, Activation, Batch, DenseStack, LossKind, MlpLoss, ParamVector};
use mtl_teleport::harness::{cli_main, run_experiment, run_experiment_with, RunConfig, RunRecord};
use mtl_teleport::linalg::Matrix;
use mtl_teleport::metrics::{delta_m, mean_rank, Direction, MetricTable};
use mtl_teleport::models::SharedBackboneModel;
use mtl_teleport::optimizers::HtrAdamState;
use mtl_teleport::problems::{make_quadratic_pair, make_ravine_toy, RAVINE_INITS};
use mtl_teleport::rng::seeded;
use mtl_teleport::teleport::{should_teleport, TeleportConfig};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient oracle suite", gradient_oracles),
        ("combiner oracles", combiner_oracles),
        ("trigger decision tables", trigger_tables),
        ("teleport loss invariance", loss_invariance),
        ("gradient growth and conflict mitigation", growth_and_mitigation),
        ("ravine trajectories", ravine_trajectories),
        ("trajectory reuse unit suite", htr_suite),
        ("step-size decay check", decay_check),
        ("metric unit suite", metric_suite),
        ("plug-and-play no-op and toggle", plug_and_play),
        ("run determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {:>2}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    ensure(start.elapsed() <= limit, || format!("took {:.1}s, limit {}s", start.elapsed().as_secs_f64(), limit.as_secs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = l2(a) * l2(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b / rows.len() as f64;
        }
    }
    m
}

fn mean_pair_cos(rows: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            sum += cosine(&rows[i], &rows[j]);
            n += 1;
        }
    }
    sum / n as f64
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// 1 ------------------------------------------------------------------------

fn random_instance(rng: &mut impl Rng) -> (MlpLoss, ParamVector, Batch) {
    let d_in = rng.random_range(1..=5);
    let d_out = rng.random_range(1..=4);
    let hidden = rng.random_range(0..=2);
    let mut widths = vec![d_in];
    for _ in 0..hidden {
        widths.push(rng.random_range(2..=6));
    }
    widths.push(d_out);
    let act = [Activation::Tanh, Activation::Relu, Activation::Identity][rng.random_range(0..3)];
    let loss = if rng.random_bool(0.5) { LossKind::Mse } else { LossKind::SoftmaxCrossEntropy };
    let stack = DenseStack::from_widths("m", &widths, act, Activation::Identity);
    let layout = stack.layout();
    let values = (0..layout.len()).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7).collect();
    let params = ParamVector::new(layout, values).expect("layout length");
    let n = rng.random_range(1..=6);
    let x = Matrix::from_fn(n, d_in, |_, _| rng.sample(StandardNormal));
    let y = match loss {
        LossKind::Mse => Matrix::from_fn(n, d_out, |_, _| rng.sample(StandardNormal)),
        LossKind::SoftmaxCrossEntropy => {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..d_out)).collect();
            Matrix::from_fn(n, d_out, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
        }
    };
    (MlpLoss { stack, loss }, params, Batch::new(x, y, 0).expect("batch shapes"))
}

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(2024);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (prog, params, batch) = random_instance(&mut rng);
        let (_, analytic) = eval_grad(&prog, &params, &batch).map_err(e)?;
        let mut numeric = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let fp = eval_loss(&prog, &plus, &batch).map_err(e)?;
            let fm = eval_loss(&prog, &minus, &batch).map_err(e)?;
            numeric.push((fp - fm) / (2.0 * h));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = l2(&analytic).max(l2(&numeric)).max(1e-12);
        worst = worst.max(l2(&diff) / scale);
    }
    within(start, Duration::from_secs(30))?;
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("100 instances, max relative error {worst:.2e}"))
}

// 2 ------------------------------------------------------------------------

fn random_pair(rng: &mut impl Rng, dim: usize) -> Vec<Vec<f64>> {
    (0..2).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

/// `g_w · g₀ + c ‖g₀‖ ‖g_w‖` for `g_w = w g₁ + (1 − w) g₂`.
fn cagrad_value(rows: &[Vec<f64>], c: f64, w: f64) -> f64 {
    let g0 = mean_rows(rows);
    let gw: Vec<f64> = rows[0].iter().zip(&rows[1]).map(|(a, b)| w * a + (1.0 - w) * b).collect();
    dot(&gw, &g0) + c * l2(&g0) * l2(&gw)
}

/// Dense grid followed by golden-section refinement around the best cell.
fn cagrad_grid_min(rows: &[Vec<f64>], c: f64) -> f64 {
    let n = 10_000;
    let best = (0..=n)
        .min_by(|&a, &b| cagrad_value(rows, c, a as f64 / n as f64).total_cmp(&cagrad_value(rows, c, b as f64 / n as f64)))
        .unwrap();
    let (mut lo, mut hi) = (((best as f64 - 1.0) / n as f64).max(0.0), ((best as f64 + 1.0) / n as f64).min(1.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if cagrad_value(rows, c, a) <= cagrad_value(rows, c, b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    cagrad_value(rows, c, 0.5 * (lo + hi)).min(cagrad_value(rows, c, best as f64 / n as f64))
}

/// Solves `Gram ω = 1/ω` for two tasks: the second equation gives `ω₂` as
/// a function of `ω₁`, then the first equation is bisected over a log grid.
fn fairgrad_oracle(rows: &[Vec<f64>]) -> [f64; 2] {
    let m = [[dot(&rows[0], &rows[0]), dot(&rows[0], &rows[1])], [dot(&rows[1], &rows[0]), dot(&rows[1], &rows[1])]];
    fn root(f: impl Fn(f64) -> f64) -> f64 {
        // f is increasing in its argument; bracket on a log grid.
        let (mut lo, mut hi) = (-40.0f64, 40.0f64);
        for i in 0..=800 {
            let x = -40.0 + i as f64 * 0.1;
            if f(x.exp()) > 0.0 {
                hi = x;
                lo = x - 0.1;
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid.exp()) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    }
    let w2_of = |w1: f64| root(|w2| m[1][0] * w1 + m[1][1] * w2 - 1.0 / w2);
    let w1 = root(|w1| m[0][0] * w1 + m[0][1] * w2_of(w1) - 1.0 / w1);
    [w1, w2_of(w1)]
}

fn combiner_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(77);
    let mut cagrad_worst: f64 = 0.0;
    for _ in 0..50 {
        let rows = random_pair(&mut rng, 4);
        let g = GradientMatrix::from_rows(&rows).map_err(e)?;
        let sol = cagrad_dual(&g, 0.4).map_err(e)?;
        let found = cagrad_value(&rows, 0.4, sol.omega[0]);
        cagrad_worst = cagrad_worst.max((found - cagrad_grid_min(&rows, 0.4)).abs());
    }
    ensure(cagrad_worst <= 1e-6, || format!("cagrad off by {cagrad_worst:.3e}"))?;

    let (mut fair_res, mut fair_diff): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let rows = random_pair(&mut rng, 3);
        let g = GradientMatrix::from_rows(&rows).map_err(e)?;
        let w = fairgrad_weights(&g, 1.0).map_err(e)?;
        fair_res = fair_res.max(fairgrad_residual(&g, 1.0, &w));
        let o = fairgrad_oracle(&rows);
        fair_diff = fair_diff.max((w[0] - o[0]).abs()).max((w[1] - o[1]).abs());
    }
    ensure(fair_res <= 1e-8 && fair_diff <= 1e-5, || {
        format!("fairgrad residual {fair_res:.3e}, oracle distance {fair_diff:.3e}")
    })?;

    let mut mn_worst: f64 = 0.0;
    for _ in 0..50 {
        let rows = random_pair(&mut rng, 3);
        let g = GradientMatrix::from_rows(&rows).map_err(e)?;
        let w = min_norm_weights(&g).map_err(e)?;
        let found = l2(&g.combine(&w.omega));
        let d: Vec<f64> = rows[0].iter().zip(&rows[1]).map(|(a, b)| a - b).collect();
        let t = if dot(&d, &d) == 0.0 { 0.5 } else { (-dot(&rows[1], &d) / dot(&d, &d)).clamp(0.0, 1.0) };
        let closed: Vec<f64> = rows[0].iter().zip(&rows[1]).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        mn_worst = mn_worst.max((found - l2(&closed)).abs());
    }
    ensure(mn_worst <= 1e-10, || format!("min-norm off by {mn_worst:.3e}"))?;

    let g = GradientMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0]]).map_err(e)?;
    let s = pcgrad_surgery(&g, 0).map_err(e)?;
    let p = &s.adjusted[0];
    ensure((p[0] - 0.5).abs() <= 1e-12 && (p[1] - 0.5).abs() <= 1e-12, || format!("pcgrad gave {:?}", &p[..]))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "cagrad {cagrad_worst:.1e}, fairgrad residual {fair_res:.1e} / oracle {fair_diff:.1e}, min-norm {mn_worst:.1e}, pcgrad exact"
    ))
}

// 3 ------------------------------------------------------------------------

fn report(rows: &[Vec<f64>]) -> Result<ConflictReport, String> {
    detect_dominated(&GradientMatrix::from_rows(rows).map_err(e)?, 0, 0).map_err(e)
}

fn quadratic_report(s2: f64) -> Result<ConflictReport, String> {
    let suite = make_quadratic_pair([0.0, 0.0], [1.0, 0.0], (1.0, s2)).map_err(e)?;
    let model = suite.model_at(&[0.5, 0.0]).map_err(e)?;
    let grads = model.task_gradients(&suite.placeholder_batches()).map_err(e)?;
    detect_dominated(&GradientMatrix::new(grads.into_iter().map(|g| g.backbone).collect()).map_err(e)?, 0, 0).map_err(e)
}

fn trigger_tables() -> Outcome {
    let few: [(Vec<Vec<f64>>, bool); 3] = [
        (vec![vec![1.0, 0.0], vec![-100.0, 0.0]], true),
        (vec![vec![1.0, 0.0], vec![0.0, 1.0]], false),
        (vec![vec![1.0, 1.0], vec![1.0, 1.0]], false),
    ];
    for (rows, expected) in &few {
        let r = report(rows)?;
        ensure(r.dominated == *expected, || format!("{rows:?}: dominated {}", r.dominated))?;
    }
    let r = report(&few[1].0)?;
    ensure((r.mean_cos[0] - 0.5f64.sqrt()).abs() < 1e-12, || format!("cos {}", r.mean_cos[0]))?;

    // The quadratic pair at its midpoint: steep second task dominates the first;
    // with equal scales the mean gradient vanishes and nothing is flagged.
    let steep = quadratic_report(100.0)?;
    ensure(steep.dominated && steep.min_norm_task == 0 && steep.mean_cos[0] == -1.0, || format!("{steep:?}"))?;
    ensure(!quadratic_report(1.0)?.dominated, || "equal-scale midpoint flagged".into())?;

    let many: [(Vec<Vec<f64>>, bool); 2] = [
        (vec![vec![10.0, 0.0], vec![-1.0, 1.0], vec![-1.0, -1.0]], true),
        (vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![-0.5, 0.0]], false),
    ];
    for (rows, expected) in &many {
        let g = GradientMatrix::from_rows(rows).map_err(e)?;
        ensure(many_task_trigger(&g) == *expected, || format!("{rows:?}: many-task {}", !expected))?;
        let forced = TriggerRule {
            cutoff: 2,
            many_task_threshold: None,
        };
        ensure(forced.fires(&report(rows)?) == *expected, || format!("{rows:?}: rule disagrees"))?;
    }

    let dominated = report(&few[0].0)?;
    let cfg = |start: usize, cap: usize| TeleportConfig {
        delayed_start_epochs: start,
        max_teleports_per_epoch: cap,
        ..TeleportConfig::default()
    };
    ensure(!should_teleport(&dominated, &cfg(5, 5), 0, 0), || "fired before delayed start".into())?;
    ensure(!should_teleport(&dominated, &cfg(5, 3), 6, 3), || "fired past the cap".into())?;
    ensure(should_teleport(&dominated, &cfg(5, 3), 6, 0), || "did not fire".into())?;
    Ok("few-task, many-task and gating tables match".into())
}

// 4 and 5 --------------------------------------------------------------------

/// Independently re-measured facts about one accepted teleport.
struct Measured {
    lt: f64,
    tolerance: f64,
    norm_before: f64,
    norm_after: f64,
    cos_before: f64,
    cos_after: f64,
}

fn backbone_rows(model: &SharedBackboneModel, batches: &[Batch]) -> Result<Vec<Vec<f64>>, String> {
    Ok(model.task_gradients(batches).map_err(e)?.into_iter().map(|g| g.backbone.into_inner()).collect())
}

/// The first 50 accepted teleports of synthetic K=8 runs over successive seeds.
fn synthetic_teleports() -> Result<Vec<Measured>, String> {
    let mut out = Vec::new();
    for seed in 0..40u64 {
        let cfg = RunConfig::from_toml(&format!(
            r#"
seed = {seed}
[suite]
kind = "synthetic"
tasks = 8
d_in = 16
samples = 512
[teleport]
enabled = true
[optimizer]
name = "adam"
lr = 0.001
[training]
epochs = 3
steps_per_epoch = 100
batch_size = 32
"#
        ))
        .map_err(e)?;
        let mut previous: Option<SharedBackboneModel> = None;
        let mut error = None;
        let mut observed = Vec::new();
        let rec = run_experiment_with(&cfg, None, &mut |row, model, batches| {
            if let (Some(id), Some(before)) = (row.teleport_id, &previous) {
                let measure = || -> Result<(usize, Measured), String> {
                    let after_losses = model.task_losses(batches).map_err(e)?;
                    let k = after_losses.len() as f64;
                    let lt = after_losses.iter().zip(&row.losses).map(|(a, b)| (a - b).abs()).sum::<f64>() / k;
                    let tolerance = 0.01 * (1.0 + row.losses.iter().map(|l| l.abs()).sum::<f64>() / k);
                    let rb = backbone_rows(before, batches)?;
                    let ra = backbone_rows(model, batches)?;
                    Ok((
                        id,
                        Measured {
                            lt,
                            tolerance,
                            norm_before: l2(&mean_rows(&rb)),
                            norm_after: l2(&mean_rows(&ra)),
                            cos_before: mean_pair_cos(&rb),
                            cos_after: mean_pair_cos(&ra),
                        },
                    ))
                };
                match measure() {
                    Ok(m) => observed.push(m),
                    Err(err) => error = Some(err),
                }
            }
            previous = Some(model.clone());
        })
        .map_err(|f| f.error.to_string())?;
        if let Some(err) = error {
            return Err(err);
        }
        for (id, m) in observed {
            if rec.teleports[id].outcome.accepted {
                out.push(m);
            }
        }
        if out.len() >= 50 {
            out.truncate(50);
            return Ok(out);
        }
    }
    Err(format!("only {} accepted teleports found", out.len()))
}

thread_local! {
    static TELEPORTS: std::cell::OnceCell<Result<Vec<Measured>, String>> = const { std::cell::OnceCell::new() };
}

fn with_teleports<T>(f: impl FnOnce(&[Measured]) -> Result<T, String>) -> Result<T, String> {
    TELEPORTS.with(|cell| match cell.get_or_init(synthetic_teleports) {
        Ok(v) => f(v),
        Err(err) => Err(err.clone()),
    })
}

fn loss_invariance() -> Outcome {
    with_teleports(|t| {
        let ok = t.iter().filter(|m| m.lt <= m.tolerance).count();
        let worst = t.iter().map(|m| m.lt / m.tolerance).fold(0.0, f64::max);
        ensure(ok == t.len(), || format!("{ok}/{} within tolerance", t.len()))?;
        Ok(format!("{ok}/{} within tolerance, worst Lt/tolerance {worst:.2e}", t.len()))
    })
}

fn growth_and_mitigation() -> Outcome {
    with_teleports(|t| {
        let n = t.len();
        let grew = t.iter().filter(|m| m.norm_after >= m.norm_before).count();
        let aligned = t.iter().filter(|m| m.cos_after > m.cos_before).count();
        let detail = format!("gradient norm grew {grew}/{n} (need 80%), mean cosine rose {aligned}/{n} (need 70%)");
        ensure(grew * 5 >= n * 4 && aligned * 10 >= n * 7, || detail.clone())?;
        Ok(detail)
    })
}

// 6 ------------------------------------------------------------------------

fn ravine_config(init: [f64; 2], teleport: bool) -> Result<RunConfig, String> {
    RunConfig::from_toml(&format!(
        r#"
seed = 0
[suite]
kind = "ravine"
init = [{}, {}]
[teleport]
enabled = {teleport}
rank = 1
inner_steps = 20
inner_lr = 0.05
[optimizer]
name = "adam"
lr = 0.01
[training]
epochs = 20
steps_per_epoch = 100
"#,
        init[0], init[1]
    ))
    .map_err(e)
}

/// Two-task min-norm gap in closed form.
fn two_task_gap(g1: &[f64], g2: &[f64]) -> f64 {
    let d: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| a - b).collect();
    let dd = dot(&d, &d);
    let t = if dd == 0.0 { 0.5 } else { (-dot(g2, &d) / dd).clamp(0.0, 1.0) };
    let p: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
    l2(&p)
}

fn final_gap(rec: &RunRecord) -> Result<f64, String> {
    let suite = make_ravine_toy().map_err(e)?;
    let model = suite.model_at(&rec.final_backbone).map_err(e)?;
    let rows = backbone_rows(&model, &suite.placeholder_batches())?;
    Ok(two_task_gap(&rows[0], &rows[1]))
}

fn ravine_trajectories() -> Outcome {
    let start = Instant::now();
    let mut good = 0;
    let mut lines = Vec::new();
    for init in RAVINE_INITS {
        let ls = run_experiment(&ravine_config(init, false)?).map_err(|f| f.error.to_string())?;
        let tele = run_experiment(&ravine_config(init, true)?).map_err(|f| f.error.to_string())?;
        let (gl, gc) = (final_gap(&ls)?, final_gap(&tele)?);
        if gl > 0.1 && gc < 1e-2 {
            good += 1;
        }
        lines.push(format!("({}, {}): {gl:.3} vs {gc:.1e}", init[0], init[1]));
    }
    within(start, Duration::from_secs(120))?;
    let detail = format!("{good}/5 inits [{}]", lines.join("; "));
    ensure(good >= 4, || detail.clone())?;
    Ok(detail)
}

// 7 ------------------------------------------------------------------------

/// One coordinate of the modulated update, unrolled by hand.
struct Unrolled {
    v: f64,
    s: f64,
    theta: f64,
    t: i32,
}

impl Unrolled {
    fn step(&mut self, g: f64, sigma: f64) {
        let (beta1, beta2, lr, eps) = (0.9f64, 0.999f64, 0.01, 1e-8);
        let b1 = sigma * beta1;
        let b2 = sigma * beta2;
        self.t += 1;
        self.v = b1 * self.v + (1.0 - b1) * g;
        self.s = b2 * self.s + (1.0 - b2) * g * g;
        let v_hat = self.v / (1.0 - beta1.powi(self.t));
        let s_hat = self.s / (1.0 - beta2.powi(self.t));
        self.theta -= lr * v_hat / (s_hat.sqrt() + eps);
    }
}

fn htr_suite() -> Outcome {
    let grads = [0.5, -1.25, 0.75, 2.0, -0.3];
    for sigma in [0.0, 0.7, 1.0] {
        let mut st = HtrAdamState::new(1, 0.01, 0.9, 0.999, 1e-8).map_err(e)?;
        let mut p = [1.0];
        let mut oracle = Unrolled { v: 0.0, s: 0.0, theta: 1.0, t: 0 };
        for (i, &g) in grads.iter().enumerate() {
            let s = if i == 2 { sigma } else { 1.0 };
            if i == 2 {
                st.arm_htr(sigma).map_err(e)?;
            }
            st.adam_step(&mut p, &[g]).map_err(e)?;
            oracle.step(g, s);
            ensure(
                p[0].to_bits() == oracle.theta.to_bits()
                    && st.v[0].to_bits() == oracle.v.to_bits()
                    && st.s[0].to_bits() == oracle.s.to_bits(),
                || format!("sigma {sigma}, step {i}: {} vs {}", p[0], oracle.theta),
            )?;
            if i == 2 && sigma == 0.0 {
                ensure(st.v[0] == g && st.s[0] == g * g, || "history not discarded".into())?;
            }
        }
    }

    // Three teleports at steps 1, 2 and 5; only the step after each arm is modulated.
    let script = [(0.3, None), (-0.8, Some(0.0)), (1.1, Some(0.4)), (0.2, None), (-0.5, None), (0.9, Some(1.0)), (0.6, None)];
    let mut st = HtrAdamState::new(1, 0.01, 0.9, 0.999, 1e-8).map_err(e)?;
    let mut p = [0.0];
    let mut oracle = Unrolled { v: 0.0, s: 0.0, theta: 0.0, t: 0 };
    for (i, (g, arm)) in script.iter().enumerate() {
        if let Some(s) = arm {
            st.arm_htr(*s).map_err(e)?;
            ensure(st.is_pending() && st.sigma() == *s, || format!("arm at step {i} not pending"))?;
            ensure(st.arm_htr(*s).is_err(), || "double arm accepted".into())?;
        }
        st.adam_step(&mut p, &[*g]).map_err(e)?;
        oracle.step(*g, arm.unwrap_or(1.0));
        ensure(!st.is_pending() && st.sigma() == 1.0, || format!("modulation survived step {i}"))?;
        ensure(p[0].to_bits() == oracle.theta.to_bits(), || format!("trace diverged at step {i}"))?;
    }
    Ok("sigma 0, 0.7, 1 bit-identical; 3-teleport trace resets after each step".into())
}

// 8 ------------------------------------------------------------------------

const DECAY_CENTERS: [[f64; 2]; 2] = [[0.0, 0.0], [1.0, 0.0]];
const DECAY_SCALES: [f64; 2] = [1.0, 100.0];

/// `‖(1/2) Σ 2 s_i (θ − c_i)‖²` for the quadratic pair.
fn mean_grad_sq(theta: &[f64]) -> f64 {
    let mut g = [0.0; 2];
    for (c, s) in DECAY_CENTERS.iter().zip(DECAY_SCALES) {
        for d in 0..2 {
            g[d] += s * (theta[d] - c[d]);
        }
    }
    g[0] * g[0] + g[1] * g[1]
}

fn running_min_sq(seed: u64, steps: usize) -> Result<f64, String> {
    let cfg = RunConfig::from_toml(&format!(
        r#"
seed = {seed}
[suite]
kind = "quadratic"
a = [0.0, 0.0]
b = [1.0, 0.0]
scales = [1.0, 100.0]
[teleport]
enabled = true
rank = 1
delayed_start_epochs = 0
[optimizer]
name = "sgd"
smoothness = 200.0
[training]
epochs = 1
steps_per_epoch = {steps}
"#
    ))
    .map_err(e)?;
    let mut best = f64::INFINITY;
    let rec = run_experiment_with(&cfg, None, &mut |_, model, _| {
        best = best.min(mean_grad_sq(model.backbone.values()));
    })
    .map_err(|f| f.error.to_string())?;
    let first = rec.steps.first().map(|r| r.grad_norm * r.grad_norm).unwrap_or(f64::INFINITY);
    Ok(best.min(first))
}

fn decay_check() -> Outcome {
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let short = running_min_sq(seed, 256)?;
        let long = running_min_sq(seed, 4096)?;
        if long <= short / 3.0 {
            ok += 1;
        }
        worst = worst.max(if short == 0.0 { 0.0 } else { long / short });
    }
    let detail = format!("{ok}/10 seeds, largest ratio {worst:.2e}");
    ensure(ok >= 9, || detail.clone())?;
    Ok(detail)
}

// 9 ------------------------------------------------------------------------

fn metric_suite() -> Outcome {
    use Direction::*;
    let names = |n: usize| (0..n).map(|i| format!("m{i}")).collect::<Vec<_>>();
    let cases: [(Vec<f64>, Vec<f64>, Vec<Direction>, f64); 3] = [
        (vec![3.0, 0.7], vec![3.0, 0.7], vec![LowerBetter, HigherBetter], 0.0),
        (vec![9.0, 0.45], vec![10.0, 0.5], vec![LowerBetter, HigherBetter], 0.0),
        (vec![9.0], vec![10.0], vec![LowerBetter], -10.0),
    ];
    for (m, b, d, expected) in &cases {
        let v = delta_m(m, b, d, &names(m.len())).map_err(e)?;
        ensure((v - expected).abs() <= 1e-12, || format!("delta_m {v} vs {expected}"))?;
    }
    ensure(delta_m(&[1.0], &[0.0], &[LowerBetter], &names(1)).is_err(), || "zero baseline accepted".into())?;

    let table = |methods: usize, dirs: Vec<Direction>, values: Vec<Vec<f64>>| {
        MetricTable::new(names(dirs.len()), dirs, (0..methods).map(|i| format!("method{i}")).collect(), values)
    };
    let ranks: [(usize, Vec<Direction>, Vec<Vec<f64>>, Vec<f64>); 4] = [
        (2, vec![LowerBetter, HigherBetter], vec![vec![1.0, 0.9], vec![2.0, 0.5]], vec![1.0, 2.0]),
        (2, vec![LowerBetter, LowerBetter], vec![vec![1.0, 5.0], vec![2.0, 5.0]], vec![1.25, 1.75]),
        (3, vec![LowerBetter], vec![vec![3.0], vec![1.0], vec![2.0]], vec![3.0, 1.0, 2.0]),
        (3, vec![HigherBetter], vec![vec![0.5], vec![0.5], vec![0.1]], vec![1.5, 1.5, 3.0]),
    ];
    for (methods, dirs, values, expected) in ranks {
        let got = mean_rank(&table(methods, dirs, values).map_err(e)?).map_err(e)?;
        ensure(got.iter().zip(&expected).all(|(a, b)| (a - b).abs() <= 1e-12), || format!("ranks {got:?} vs {expected:?}"))?;
    }
    Ok("relative degradation and mean-rank examples exact".into())
}

// 10 -----------------------------------------------------------------------

fn plug_and_play() -> Outcome {
    for method in ["name = \"ls\"", "name = \"pcgrad\"", "name = \"cagrad\"\nc = 0.4", "name = \"fairgrad\"\nalpha = 1.0"] {
        // Far from both centers the two gradients agree, so nothing triggers.
        let cfg = |enabled: bool| {
            RunConfig::from_toml(&format!(
                r#"
seed = 3
[suite]
kind = "quadratic"
a = [0.0, 0.0]
b = [1.0, 0.0]
init = [5.0, 4.0]
[method]
{method}
[teleport]
enabled = {enabled}
delayed_start_epochs = 0
rank = 1
[optimizer]
name = "adam"
lr = 0.01
[training]
epochs = 2
steps_per_epoch = 50
"#
            ))
            .map_err(e)
        };
        let on = run_experiment(&cfg(true)?).map_err(|f| f.error.to_string())?;
        let off = run_experiment(&cfg(false)?).map_err(|f| f.error.to_string())?;
        ensure(on.teleports.is_empty() && on.steps.iter().all(|r| !r.dominated), || format!("{method}: triggered"))?;
        let same = on.steps == off.steps
            && on.final_backbone.iter().zip(&off.final_backbone).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{method}: runs differ"))?;
    }

    let base = std::fs::read_to_string(config_dir().join("synthetic_k8.toml")).map_err(e)?;
    let mut values = Vec::new();
    for enabled in [false, true] {
        let mut cfg = RunConfig::from_toml(&base).map_err(e)?;
        cfg.teleport.enabled = enabled;
        let rec = run_experiment(&cfg).map_err(|f| f.error.to_string())?;
        let baseline = rec.baseline.clone().ok_or("no baseline")?;
        let task: Vec<f64> = rec.metrics.iter().filter(|m| m.metric.starts_with("loss_")).map(|m| m.value).collect();
        let own = task.iter().zip(&baseline).map(|(m, b)| (m - b) / b).sum::<f64>() / task.len() as f64 * 100.0;
        let reported = rec.delta_m.ok_or("no delta_m")?;
        ensure((own - reported).abs() <= 1e-9 * own.abs().max(1.0), || format!("delta_m {reported} vs {own}"))?;
        values.push((reported, rec.teleports.len()));
    }
    let change = values[1].0 - values[0].0;
    record_regression(values[0].0, values[1].0, values[1].1)?;
    ensure(change != 0.0 && change.is_finite(), || "toggling teleportation left delta_m unchanged".into())?;
    Ok(format!(
        "4 combiners step-identical; synthetic K=8 delta_m {:.3}% off vs {:.3}% on ({} teleports), change {change:+.3}",
        values[0].0, values[1].0, values[1].1
    ))
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn record_regression(off: f64, on: f64, teleports: usize) -> Result<(), String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures");
    std::fs::create_dir_all(&dir).map_err(e)?;
    let mut text = String::new();
    let _ = writeln!(text, "# Written by the acceptance run from configs/synthetic_k8.toml.");
    let _ = writeln!(text, "[synthetic_k8]");
    let _ = writeln!(text, "delta_m_teleport_off = {off}");
    let _ = writeln!(text, "delta_m_teleport_on = {on}");
    let _ = writeln!(text, "delta_m_change = {}", on - off);
    let _ = writeln!(text, "teleports = {teleports}");
    std::fs::write(dir.join("regression_manifest.toml"), text).map_err(e)
}

// 11 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let mut checked = Vec::new();
    for name in ["csv_three_tasks.toml", "ravine.toml"] {
        let config = config_dir().join(name);
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{name}-{rep}"));
            let code = cli_main(["mtl-teleport".as_ref(), "run".as_ref(), config.as_os_str(), "--out".as_ref(), out.as_os_str()]);
            ensure(code == 0, || format!("{name}: exit code {code}"))?;
            let files: Vec<Vec<u8>> = ["metrics.csv", "teleports.csv"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).map_err(e))
                .collect::<Result<_, _>>()?;
            bytes.push(files);
        }
        ensure(bytes[0] == bytes[1], || format!("{name}: outputs differ between runs"))?;
        let teleport_rows = bytes[0][1].iter().filter(|&&b| b == b'\n').count().saturating_sub(1);
        checked.push(format!("{name} ({teleport_rows} teleports)"));
    }
    Ok(format!("byte-identical metrics.csv and teleports.csv for {}", checked.join(", ")))
}
