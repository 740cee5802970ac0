//! Train the planted-answer decoder and save a checkpoint.
//!
//! cargo run --release --example train_toy -- [out.ckpt] [seed]

use std::path::PathBuf;

use attnlrp::model::checkpoint::Checkpoint;
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use serde_json::json;

fn main() -> attnlrp::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "planted.ckpt".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let task = Task::planted_answer();
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (model, report) = train_toy(task.default_model(), &task, &tc)?;
    println!(
        "{} steps, final loss {:.4}, held-out accuracy {:.3}",
        report.steps, report.final_loss, report.heldout_accuracy
    );
    let meta = json!({ "task": task.kind.name(), "seed": seed, "train": report });
    Checkpoint::new(model, meta).save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}
