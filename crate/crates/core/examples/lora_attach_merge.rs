//! Attach a low-rank adapter to a multi-task model, train it briefly on a
//! combined loss, merge it, and round-trip the model through a checkpoint.
//!
//! Run with `cargo run --release --example lora_attach_merge`.

use mtl_teleport::models::{attach_lora, load_checkpoint, merge_lora, save_checkpoint, AdapterTerm};
use mtl_teleport::problems::make_synthetic_multitask;
use mtl_teleport::rng::seeded;

fn main() -> mtl_teleport::Result<()> {
    let suite = make_synthetic_multitask(3, 8, 64, 5)?;
    let mut model = suite.init_model(&mut seeded(5))?;
    let batches = suite.data.clone().expect("synthetic suites carry data");
    println!("task losses before: {:?}", model.task_losses(&batches)?);

    let mut adapter = attach_lora(&model, 2, 9)?;
    println!("adapter rank {} on {} weight matrices, {} trainable values", adapter.rank, adapter.pairs.len(), adapter.num_params());
    let mut params = adapter.params();
    for _ in 0..50 {
        let (_, grad) = adapter.objective_gradient(&model, &batches, &[], |eval| {
            (0..eval.base.len()).map(|i| (AdapterTerm::Base(i), 1.0 / eval.base.len() as f64)).collect()
        })?;
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= 0.05 * g;
        }
        adapter.set_params(&params)?;
    }
    let adapted = adapter.evaluate(&model, &batches, &[])?.base;
    let delta = merge_lora(&mut model, &mut adapter)?;
    let merged = model.task_losses(&batches)?;
    println!("adapted losses:     {adapted:?}");
    println!("after merge:        {merged:?}");
    println!("|delta theta| {:.4}; merging again is refused: {}", delta.norm(), merge_lora(&mut model, &mut adapter).is_err());

    let path = std::env::temp_dir().join("lora_attach_merge.ckpt");
    save_checkpoint(&path, &model, None)?;
    let (restored, _) = load_checkpoint(&path, suite.program.clone())?;
    println!("checkpoint restores identical weights: {}", restored.backbone.values() == model.backbone.values());
    Ok(())
}
