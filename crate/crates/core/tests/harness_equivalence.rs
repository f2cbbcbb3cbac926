//! The harness against a hand-written training loop, and the no-op property
//! of enabling teleportation when nothing triggers.

use mtl_teleport::conflict::GradientMatrix;
use mtl_teleport::harness::{combiner_seed, run_experiment, RunConfig};
use mtl_teleport::problems::{make_ravine_toy, RAVINE_INITS};

const METHODS: [&str; 4] = ["name = \"ls\"", "name = \"pcgrad\"", "name = \"cagrad\"\nc = 0.4", "name = \"fairgrad\"\nalpha = 1.0"];

fn ravine_config(method: &str, steps: usize) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
seed = 11
[suite]
kind = "ravine"
init = [{}, {}]
[method]
{method}
[optimizer]
name = "adam"
lr = 0.01
[training]
epochs = 1
steps_per_epoch = {steps}
"#,
        RAVINE_INITS[1][0], RAVINE_INITS[1][1]
    ))
    .unwrap()
}

/// Adam over the full parameter vector, written out directly.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.01, 1e-8);
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.t));
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[test]
fn harness_matches_reference_loop_bit_for_bit() {
    for method in METHODS {
        let cfg = ravine_config(method, 100);
        let rec = run_experiment(&cfg).unwrap();

        let suite = make_ravine_toy().unwrap();
        let mut model = suite.model_at(&RAVINE_INITS[1]).unwrap();
        let mut adam = Adam {
            m: vec![0.0; 2],
            v: vec![0.0; 2],
            t: 0,
        };
        for (t, row) in rec.steps.iter().enumerate() {
            let grads = model.task_gradients(&suite.placeholder_batches()).unwrap();
            let losses: Vec<f64> = grads.iter().map(|g| g.loss).collect();
            assert_eq!(losses, row.losses, "{method}: losses at step {t}");
            let g = GradientMatrix::new(grads.into_iter().map(|g| g.backbone).collect()).unwrap();
            let direction = cfg.method.combine(&g, combiner_seed(cfg.seed, t)).unwrap();
            adam.step(model.backbone.values_mut(), &direction);
        }
        assert_eq!(rec.steps.len(), 100);
        let same = model.backbone.values().iter().zip(&rec.final_backbone).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{method}: {:?} vs {:?}", model.backbone.values(), rec.final_backbone);
    }
}

#[test]
fn enabling_teleport_without_triggers_changes_nothing() {
    for method in METHODS {
        let cfg = |enabled: bool| {
            RunConfig::from_toml(&format!(
                r#"
seed = 2
[suite]
kind = "synthetic"
tasks = 3
d_in = 4
samples = 64
[method]
{method}
[teleport]
enabled = {enabled}
delayed_start_epochs = 5
[optimizer]
name = "adam"
lr = 0.01
[training]
epochs = 3
steps_per_epoch = 15
batch_size = 8
"#
            ))
            .unwrap()
        };
        let on = run_experiment(&cfg(true)).unwrap();
        let off = run_experiment(&cfg(false)).unwrap();
        assert!(on.teleports.is_empty());
        assert_eq!(on.steps, off.steps, "{method}");
        assert_eq!(on.final_backbone, off.final_backbone, "{method}");
        let values = |r: &mtl_teleport::harness::RunRecord| r.metrics.iter().map(|m| m.value).collect::<Vec<_>>();
        assert_eq!(values(&on), values(&off), "{method}");
    }
}
