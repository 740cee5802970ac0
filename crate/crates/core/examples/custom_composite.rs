//! Build a composite, round-trip it through JSON and use it for a relevance pass.
//!
//! cargo run --release --example custom_composite -- [composite.json]

use attnlrp::composite::Composite;
use attnlrp::explain::{relevance_pass, ExplainOptions, Method};
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use attnlrp::{OpKind, Rule};

fn main() -> attnlrp::Result<()> {
    let composite = match std::env::args().nth(1) {
        Some(path) => Composite::load(path.as_ref())?,
        None => Composite::new("last-layer-zplus")
            .with("blocks.3.*", Some(OpKind::Linear), Rule::ZPlus)?
            .with("*", Some(OpKind::Softmax), Rule::SoftmaxZPlus)?
            .with("*", Some(OpKind::Linear), Rule::gamma(0.1))?
            .with("*", Some(OpKind::Add), Rule::epsilon())?
            .with("*", Some(OpKind::MatMul), Rule::MatmulBilinear { epsilon: 1e-6 })?
            .with("*", Some(OpKind::Hadamard), Rule::Uniform)?
            .with("*", Some(OpKind::Norm), Rule::NormIdentity)?
            .with("*", None, Rule::Identity)?,
    };
    let text = composite.to_json();
    println!("{text}");
    assert_eq!(Composite::from_json(&text)?, composite);

    let task = Task::planted_answer();
    let (model, _) = train_toy(task.default_model(), &task, &TrainConfig::default())?;
    let sample = &task.test_set(1, 1)[0];
    let emb = model.embed(&sample.input)?;
    let logits = model.forward(&sample.input)?;
    let target = model.target_index(&logits, model.predict(&logits));
    let opts = ExplainOptions {
        composite: Some(composite),
        ..ExplainOptions::default()
    };
    let store = relevance_pass(&model, &emb, Method::AttnLrp, target, &opts)?;
    let tokens = sample.tokens().unwrap_or_default();
    for (t, r) in tokens.iter().zip(store.token_relevance()) {
        println!("{:>6} {r:+.4}", task.token_name(*t));
    }
    println!("relative defect {:.1e}", store.conservation_audit().relative_defect);
    Ok(())
}
