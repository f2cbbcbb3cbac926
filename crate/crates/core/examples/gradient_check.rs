//! Reverse-mode gradients of a small MLP against central finite differences.
//!
//! Run with `cargo run --release --example gradient_check`.

use mtl_teleport::diffcore::{eval_grad, finite_diff_grad, Activation, Batch, DenseStack, LossKind, MlpLoss, ParamVector};
use mtl_teleport::linalg::Matrix;
use mtl_teleport::rng::seeded;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> mtl_teleport::Result<()> {
    let mut rng = seeded(1);
    for (act, loss) in [
        (Activation::Tanh, LossKind::Mse),
        (Activation::Relu, LossKind::Mse),
        (Activation::Tanh, LossKind::SoftmaxCrossEntropy),
    ] {
        let prog = MlpLoss {
            stack: DenseStack::from_widths("mlp", &[4, 8, 3], act, Activation::Identity),
            loss,
        };
        let layout = prog.stack.layout();
        let values = (0..layout.len()).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let params = ParamVector::new(layout, values)?;
        let x = Matrix::from_fn(6, 4, |_, _| rng.sample(StandardNormal));
        let y = match loss {
            LossKind::Mse => Matrix::from_fn(6, 3, |_, _| rng.sample(StandardNormal)),
            LossKind::SoftmaxCrossEntropy => Matrix::from_fn(6, 3, |r, c| if r % 3 == c { 1.0 } else { 0.0 }),
        };
        let batch = Batch::new(x, y, 0)?;
        let (value, grad) = eval_grad(&prog, &params, &batch)?;
        let numeric = finite_diff_grad(&prog, &params, &batch, 1e-6)?;
        let err = grad.iter().zip(numeric.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{act:?} + {loss:?}: loss {value:.5}, {} parameters, max |analytic - numeric| {err:.2e}", params.len());
    }
    Ok(())
}
