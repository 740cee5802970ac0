//! AttnLRP heatmap for one planted-answer prompt, with the conservation ledger.
//!
//! cargo run --release --example attribute_tokens

use attnlrp::composite::Composite;
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use attnlrp::model::ModelInput;
use attnlrp::relevance::{backprop_relevance, RelevanceInit};

fn main() -> attnlrp::Result<()> {
    let task = Task::planted_answer();
    let (model, _) = train_toy(task.default_model(), &task, &TrainConfig::default())?;

    let tokens = task.parse_tokens("f0 v2 f1 KEY v5 f3 f4 f2 f6 QUERY")?;
    let (tape, logits) = model.forward_taped(&ModelInput::Tokens(tokens.clone()))?;
    let answer = model.predict(&logits);
    let target = model.target_index(&logits, answer);
    println!("prediction: {} (expected {})", task.token_name(answer), task.token_name(task.answer_for(5)));

    let init = RelevanceInit {
        node: tape.output(),
        index: target,
        value: logits.data()[target],
    };
    for composite in [Composite::attnlrp_llm(), Composite::cplrp()] {
        let store = backprop_relevance(&tape, &composite, init)?;
        println!("\n{}", composite.name);
        for (t, r) in tokens.iter().zip(store.token_relevance()) {
            println!("  {:>6} {:+.4} {}", task.token_name(*t), r, "#".repeat((r.abs() * 10.0).min(60.0) as usize));
        }
        let audit = store.conservation_audit();
        println!(
            "  logit {:.4} = tokens {:.4} + absorbed {:.4} (bias {:.4}, softmax {:.4}, stabilizer {:.2e}); defect {:.1e}",
            audit.initial,
            audit.input_total,
            audit.absorbed_total,
            audit.breakdown.bias,
            audit.breakdown.softmax,
            audit.breakdown.stabilizer,
            audit.defect
        );
    }
    Ok(())
}
