//! Patch ViT: the published ViT composite against γ-tuned variants.
//!
//! cargo run --release --example vit_composites

use attnlrp::composite::Composite;
use attnlrp::eval::{evaluate, Explained, Mode, Source};
use attnlrp::explain::{ExplainOptions, Method};
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use attnlrp::{OpKind, Rule};

fn tuned(gamma: f64, softmax: Rule) -> attnlrp::Result<Composite> {
    let head = Composite::new(format!("γ{gamma} {}", softmax.name()))
        .with("*", Some(OpKind::Conv), Rule::gamma(gamma))?
        .with("*", Some(OpKind::Linear), Rule::gamma(gamma))?
        .with("*", Some(OpKind::Softmax), softmax)?;
    Composite::attnlrp_vit()
        .assignments()
        .iter()
        .try_fold(head, |c, a| c.with(&a.layer_tag_glob, a.op_kind, a.rule))
}

fn main() -> attnlrp::Result<()> {
    let task = Task::patch_shape();
    let (model, report) = train_toy(task.default_model(), &task, &TrainConfig::default())?;
    println!("held-out accuracy {:.3}", report.heldout_accuracy);

    let mut sources = vec![Source::Method(Method::AttnLrp, ExplainOptions::default())];
    for c in [
        tuned(0.25, Rule::SoftmaxTaylor)?,
        tuned(1.0, Rule::SoftmaxTaylor)?,
        tuned(1.0, Rule::SoftmaxZPlus)?,
    ] {
        let opts = ExplainOptions {
            composite: Some(c),
            ..ExplainOptions::default()
        };
        sources.push(Source::Method(Method::AttnLrp, opts));
    }
    for m in [Method::CpLrp, Method::Ig, Method::Random] {
        sources.push(Source::Method(m, ExplainOptions::default()));
    }
    sources.push(Source::Oracle);

    let report = evaluate(&model, &task.test_set(1, 100), &sources, Mode::Flip, Explained::Prediction)?;
    for s in &report.summary {
        println!("{:<24} ΔA {:>7.3} ± {:.3}  top1 {:.2}", s.method, s.delta.mean, s.delta.sem, s.top1);
    }
    Ok(())
}
