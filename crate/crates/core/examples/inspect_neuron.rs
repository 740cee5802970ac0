//! Find the FFN neurons that matter for a prediction, then read them through the
//! unembedding and through their most activating inputs.
//!
//! cargo run --release --example inspect_neuron

use attnlrp::composite::Composite;
use attnlrp::explain::{relevance_pass, ExplainOptions, Method};
use attnlrp::latent::{actmax_collect, project_to_vocab, rank_latent_relevance, top_tokens};
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use attnlrp::model::ModelInput;

fn main() -> attnlrp::Result<()> {
    let task = Task::planted_answer();
    let (model, _) = train_toy(task.default_model(), &task, &TrainConfig::default())?;
    let sample = &task.test_set(1, 1)[0];
    let emb = model.embed(&sample.input)?;
    let logits = model.forward(&sample.input)?;
    let pred = model.predict(&logits);
    let store = relevance_pass(&model, &emb, Method::AttnLrp, model.target_index(&logits, pred), &ExplainOptions::default())?;
    println!("prediction {}", task.token_name(pred));

    let corpus: Vec<ModelInput> = task.test_set(2, 200).into_iter().map(|s| s.input).collect();
    for n in rank_latent_relevance(&model, &store, None, 3)? {
        let proj = project_to_vocab(&model, n.layer, n.neuron)?;
        let names: Vec<String> = top_tokens(&proj, 3, |t| task.token_name(t)).into_iter().map(|t| t.name).collect();
        println!("\nneuron {}:{} relevance {:+.4} promotes {:?}", n.layer, n.neuron, n.relevance, names);
        for r in actmax_collect(&model, &corpus, n.layer, n.neuron, 3, &Composite::attnlrp_llm())? {
            let tokens = r.tokens.unwrap_or_default();
            let text: Vec<String> = tokens
                .iter()
                .zip(&r.heatmap)
                .map(|(t, h)| format!("{}({h:+.2})", task.token_name(*t)))
                .collect();
            println!("  act {:.3} at {}: {}", r.activation, r.position, text.join(" "));
        }
    }
    Ok(())
}
