//! Each baseline attributor on one prompt, side by side.
//!
//! cargo run --release --example baselines_tour

use attnlrp::baselines;
use attnlrp::model::tasks::Task;
use attnlrp::model::train::{train_toy, TrainConfig};
use attnlrp::model::ModelInput;

fn main() -> attnlrp::Result<()> {
    let task = Task::planted_answer();
    let (model, _) = train_toy(task.default_model(), &task, &TrainConfig::default())?;
    let tokens = task.parse_tokens("v1 f0 f1 f2 KEY v6 f3 f4 f5 QUERY")?;
    let input = ModelInput::Tokens(tokens.clone());
    let emb = model.embed(&input)?;
    let (tape, logits) = model.forward_taped(&input)?;
    let target = model.target_index(&logits, model.predict(&logits));

    let rows: Vec<(&str, Vec<f64>)> = vec![
        ("I×G", baselines::input_x_gradient(&tape, target)?),
        ("IG (64)", baselines::integrated_gradients(&model, &emb, None, 64, target)?),
        ("SmoothGrad", baselines::smoothgrad(&model, &emb, 0.1, 32, target, 0)?),
        ("rollout", baselines::attention_rollout(&model, &tape, 1.0)?),
        ("grad×rollout", baselines::grad_attention_rollout(&model, &tape, target, 1.0)?),
        ("GradCAM", baselines::gradcam_attention(&tape, target)?),
        ("AtMan", baselines::atman(&model, &emb, 0.9, target)?.scores),
    ];
    print!("{:<13}", "");
    for t in &tokens {
        print!("{:>7}", task.token_name(*t));
    }
    println!();
    for (name, scores) in rows {
        let scale = scores.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        print!("{name:<13}");
        for s in scores {
            print!("{:>7.2}", s / scale);
        }
        println!();
    }
    Ok(())
}
