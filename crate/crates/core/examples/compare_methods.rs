//! Perturbation faithfulness and plausibility of every attribution method.
//!
//! cargo run --release --example compare_methods -- [samples] [flip|insert]

use attnlrp::eval::{evaluate, Explained, Mode, Source};
use attnlrp::explain::{ExplainOptions, Method};
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};

fn main() -> attnlrp::Result<()> {
    let mut args = std::env::args().skip(1);
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let mode = Mode::parse(&args.next().unwrap_or_else(|| "flip".into()))?;

    let task = Task::planted_answer();
    let (model, _) = train_toy(task.default_model(), &task, &TrainConfig::default())?;
    let samples = task.test_set(1, n);
    let mut sources: Vec<Source> = Method::ALL
        .iter()
        .map(|&m| Source::Method(m, ExplainOptions::default()))
        .collect();
    sources.push(Source::Oracle);

    let report = evaluate(&model, &samples, &sources, mode, Explained::Prediction)?;
    println!("{:<12} {:>16} {:>8} {:>8} {:>6} {:>6}", "method", "ΔA (± SEM)", "A_MoRF", "A_LeRF", "top1", "IoU");
    for s in &report.summary {
        println!(
            "{:<12} {:>8.3} ± {:<5.3} {:>8.3} {:>8.3} {:>6.3} {:>6.3}",
            s.method, s.delta.mean, s.delta.sem, s.a_morf.mean, s.a_lerf.mean, s.top1, s.iou
        );
    }
    Ok(())
}
