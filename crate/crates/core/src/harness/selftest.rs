//! Quick oracle and property checks runnable from the CLI.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::combiners::{cagrad_dual, cagrad_objective, fairgrad_residual, fairgrad_weights, min_norm_weights, pcgrad_surgery};
use crate::conflict::{detect_dominated, GradientMatrix, TriggerRule};
use crate::diffcore::{eval_grad, finite_diff_grad, Activation, Batch, DenseStack, LossKind, MlpLoss, ParamVector};
use crate::linalg::Matrix;
use crate::metrics::{delta_m, Direction};
use crate::optimizers::HtrAdamState;
use crate::problems::make_quadratic_pair;
use crate::rng::seeded;
use crate::teleport::{backbone_gradients, teleport, LossSnapshot, TeleportConfig};

type Check = fn() -> Result<(), String>;

const CHECKS: [(&str, Check); 8] = [
    ("reverse mode vs finite differences", gradient_check),
    ("cagrad dual vs grid search", cagrad_check),
    ("fairgrad residual", fairgrad_check),
    ("min-norm two-task closed form", min_norm_check),
    ("pcgrad hand example", pcgrad_check),
    ("dominated-conflict trigger", trigger_check),
    ("htr one-shot reset", htr_check),
    ("zero-gamma teleport is a no-op", teleport_check),
];

/// Runs every check, printing one line each. Returns whether all passed.
pub fn run(out: &mut impl Write) -> bool {
    let mut ok = true;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => {
                let _ = writeln!(out, "ok    {name}");
            }
            Err(detail) => {
                ok = false;
                let _ = writeln!(out, "FAIL  {name}: {detail}");
            }
        }
    }
    let _ = match delta_m(&[9.0, 0.45], &[10.0, 0.5], &[Direction::LowerBetter, Direction::HigherBetter], &[]) {
        Ok(v) if v.abs() < 1e-12 => writeln!(out, "ok    relative degradation example"),
        other => {
            ok = false;
            writeln!(out, "FAIL  relative degradation example: {other:?}")
        }
    };
    ok
}

fn gradient_check() -> Result<(), String> {
    let mut rng = seeded(101);
    for _ in 0..20 {
        let prog = MlpLoss {
            stack: DenseStack::from_widths("l", &[3, 4, 2], Activation::Tanh, Activation::Identity),
            loss: LossKind::Mse,
        };
        let layout = prog.stack.layout();
        let values: Vec<f64> = (0..layout.len()).map(|_| rng.sample(StandardNormal)).collect();
        let params = ParamVector::new(layout, values).map_err(|e| e.to_string())?;
        let x = Matrix::from_fn(5, 3, |_, _| rng.sample(StandardNormal));
        let y = Matrix::from_fn(5, 2, |_, _| rng.sample(StandardNormal));
        let batch = Batch::new(x, y, 0).map_err(|e| e.to_string())?;
        let (_, g) = eval_grad(&prog, &params, &batch).map_err(|e| e.to_string())?;
        let fd = finite_diff_grad(&prog, &params, &batch, 1e-5).map_err(|e| e.to_string())?;
        for (a, n) in g.iter().zip(fd.iter()) {
            if (a - n).abs() > 1e-6 * a.abs().max(1.0) {
                return Err(format!("analytic {a} vs numeric {n}"));
            }
        }
    }
    Ok(())
}

fn random_pair(rng: &mut impl Rng) -> GradientMatrix {
    let rows: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    GradientMatrix::from_rows(&rows).expect("two rows")
}

fn cagrad_check() -> Result<(), String> {
    let mut rng = seeded(102);
    for _ in 0..10 {
        let g = random_pair(&mut rng);
        let sol = cagrad_dual(&g, 0.4).map_err(|e| e.to_string())?;
        let grid = (0..=2000)
            .map(|i| {
                let w = i as f64 / 2000.0;
                cagrad_objective(&g, 0.4, &[w, 1.0 - w])
            })
            .fold(f64::INFINITY, f64::min);
        if sol.objective > grid + 1e-6 {
            return Err(format!("dual objective {} above grid minimum {grid}", sol.objective));
        }
    }
    Ok(())
}

fn fairgrad_check() -> Result<(), String> {
    let mut rng = seeded(103);
    for _ in 0..10 {
        let g = random_pair(&mut rng);
        let w = fairgrad_weights(&g, 1.0).map_err(|e| e.to_string())?;
        let r = fairgrad_residual(&g, 1.0, &w);
        if r > 1e-8 {
            return Err(format!("residual {r}"));
        }
    }
    Ok(())
}

fn min_norm_check() -> Result<(), String> {
    let mut rng = seeded(104);
    for _ in 0..20 {
        let g = random_pair(&mut rng);
        let (a, b) = (g.row(0), g.row(1));
        let diff: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        let dd: f64 = diff.iter().map(|d| d * d).sum();
        let t = if dd == 0.0 {
            0.5
        } else {
            (-(b.iter().zip(&diff).map(|(x, d)| x * d).sum::<f64>()) / dd).clamp(0.0, 1.0)
        };
        let w = min_norm_weights(&g).map_err(|e| e.to_string())?;
        let closed = g.combine(&[t, 1.0 - t]).norm();
        let found = g.combine(&w.omega).norm();
        if (closed - found).abs() > 1e-10 {
            return Err(format!("norm {found} vs closed form {closed}"));
        }
    }
    Ok(())
}

fn pcgrad_check() -> Result<(), String> {
    let g = GradientMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0]]).map_err(|e| e.to_string())?;
    let s = pcgrad_surgery(&g, 0).map_err(|e| e.to_string())?;
    let first = &s.adjusted[0];
    if (first[0] - 0.5).abs() > 1e-12 || (first[1] - 0.5).abs() > 1e-12 {
        return Err(format!("projected (1,0) to {:?}", &first[..]));
    }
    Ok(())
}

fn trigger_check() -> Result<(), String> {
    let suite = make_quadratic_pair([0.0, 0.0], [1.0, 0.0], (1.0, 100.0)).map_err(|e| e.to_string())?;
    let model = suite.model_at(&[0.5, 0.0]).map_err(|e| e.to_string())?;
    let g = backbone_gradients(&model, &suite.placeholder_batches()).map_err(|e| e.to_string())?;
    let report = detect_dominated(&g, 0, 0).map_err(|e| e.to_string())?;
    if !report.dominated || !TriggerRule::default().fires(&report) {
        return Err("s2=100 instance not flagged".into());
    }
    Ok(())
}

fn htr_check() -> Result<(), String> {
    let mut st = HtrAdamState::new(1, 0.1, 0.9, 0.999, 1e-8).map_err(|e| e.to_string())?;
    let mut p = [0.0];
    for g in [1.0, -2.0, 0.5] {
        st.adam_step(&mut p, &[g]).map_err(|e| e.to_string())?;
        st.arm_htr(0.0).map_err(|e| e.to_string())?;
        st.adam_step(&mut p, &[g]).map_err(|e| e.to_string())?;
        if st.v[0] != g || st.s[0] != g * g || st.is_pending() || st.sigma() != 1.0 {
            return Err(format!("state after reset: v={} s={}", st.v[0], st.s[0]));
        }
    }
    Ok(())
}

fn teleport_check() -> Result<(), String> {
    let suite = make_quadratic_pair([0.0, 0.0], [1.0, 0.0], (1.0, 100.0)).map_err(|e| e.to_string())?;
    let mut model = suite.model_at(&[0.5, 0.0]).map_err(|e| e.to_string())?;
    let snapshot = LossSnapshot::record(&model, suite.placeholder_batches()).map_err(|e| e.to_string())?;
    let g = backbone_gradients(&model, &snapshot.batches).map_err(|e| e.to_string())?;
    let cfg = TeleportConfig {
        gamma: 0.0,
        rank: 1,
        ..TeleportConfig::default()
    };
    let out = teleport(&mut model, &snapshot, &g, &cfg, 1).map_err(|e| e.to_string())?;
    if !out.accepted || out.delta_theta.iter().any(|&d| d != 0.0) || model.backbone.values() != [0.5, 0.0] {
        return Err(format!("moved by {:?}", out.delta_theta));
    }
    Ok(())
}
