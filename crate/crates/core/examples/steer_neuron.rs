//! Knock out or amplify the most relevant neuron and watch the answer logits.
//!
//! cargo run --release --example steer_neuron

use attnlrp::explain::{relevance_pass, ExplainOptions, Method};
use attnlrp::latent::{rank_latent_relevance, steer};
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use attnlrp::model::NeuronEdit;
use attnlrp::tape::ActivationEdit;

fn main() -> attnlrp::Result<()> {
    let task = Task::planted_answer();
    let (model, _) = train_toy(task.default_model(), &task, &TrainConfig::default())?;
    let sample = &task.test_set(1, 1)[0];
    let emb = model.embed(&sample.input)?;
    let logits = model.forward(&sample.input)?;
    let pred = model.predict(&logits);
    let target = model.target_index(&logits, pred);
    let store = relevance_pass(&model, &emb, Method::AttnLrp, target, &ExplainOptions::default())?;
    let top = rank_latent_relevance(&model, &store, None, 1)?[0];
    println!("top neuron {}:{} relevance {:+.4}", top.layer, top.neuron, top.relevance);

    for edit in [ActivationEdit::Zero, ActivationEdit::Scale(5.0), ActivationEdit::Scale(-5.0)] {
        let e = NeuronEdit {
            layer: top.layer,
            neuron: top.neuron,
            edit,
        };
        let steered = steer(&model, &sample.input, &[e])?;
        println!(
            "{edit:?}: logit {} {:.3} → {:.3}, prediction {} → {}",
            task.token_name(pred),
            logits.data()[target],
            steered.data()[target],
            task.token_name(pred),
            task.token_name(model.predict(&steered))
        );
    }
    Ok(())
}
