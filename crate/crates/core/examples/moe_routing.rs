//! Mixture-of-experts decoder: relevance through the router against a constant-routing variant.
//!
//! cargo run --release --example moe_routing

use attnlrp::composite::Composite;
use attnlrp::eval::{evaluate, Explained, Mode, Source};
use attnlrp::explain::{ExplainOptions, Method};
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};

fn main() -> attnlrp::Result<()> {
    let task = Task::planted_answer();
    let config = task.default_model().with_moe(2, 1);
    let (model, report) = train_toy(config, &task, &TrainConfig::default())?;
    println!("held-out accuracy {:.3}", report.heldout_accuracy);

    let sample = &task.test_set(1, 1)[0];
    let (tape, _) = model.forward_taped(&sample.input)?;
    for l in 0..model.config.n_layers {
        let sel = tape.value(tape.find(&format!("blocks.{l}.moe.topk")).expect("moe layer"));
        let last = sel.row(sel.n_rows() - 1);
        println!("layer {l} routing at the answer position {last:.3?}");
    }

    let sources: Vec<Source> = [Composite::attnlrp_llm(), Composite::attnlrp_routing_cp(), Composite::cplrp()]
        .into_iter()
        .map(|c| {
            Source::Method(
                Method::AttnLrp,
                ExplainOptions {
                    composite: Some(c),
                    ..ExplainOptions::default()
                },
            )
        })
        .collect();
    let report = evaluate(&model, &task.test_set(1, 100), &sources, Mode::Flip, Explained::Prediction)?;
    for s in &report.summary {
        println!("{:<20} ΔA {:.3} ± {:.3}", s.method, s.delta.mean, s.delta.sem);
    }
    Ok(())
}
