//! Reverse-mode gradients of the tape against central differences.
//!
//! cargo run --example gradient_check

use attnlrp::model::{Model, ModelConfig, ModelInput};
use attnlrp::Tensor;

fn main() -> attnlrp::Result<()> {
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 24,
        ..ModelConfig::decoder(12, 8)
    };
    let mut model = Model::init(config, 7)?;
    let input = ModelInput::Tokens(vec![3, 1, 4, 1, 5]);
    let (tape, logits) = model.forward_taped(&input)?;
    let target = model.target_index(&logits, 2);
    let mut seed = Tensor::zeros(logits.shape());
    seed.data_mut()[target] = 1.0;
    let grads = tape.backprop_gradient(&seed)?;
    let analytic: Vec<Option<Tensor>> = (0..model.params.len()).map(|p| grads.param(p).cloned()).collect();
    drop(tape);

    let h = 1e-5;
    for p in (0..model.params.len()).step_by(3) {
        let name = model.params.name(p).to_string();
        let Some(g) = analytic[p].as_ref() else { continue };
        let k = (0..g.len()).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap_or(0);
        let x = model.params.tensor(p).data()[k];
        model.params.tensor_mut(p).data_mut()[k] = x + h;
        let up = model.forward(&input)?.data()[target];
        model.params.tensor_mut(p).data_mut()[k] = x - h;
        let down = model.forward(&input)?.data()[target];
        model.params.tensor_mut(p).data_mut()[k] = x;
        let fd = (up - down) / (2.0 * h);
        let an = g.data()[k];
        println!("{name:<28} backprop {an:+.8} finite diff {fd:+.8}");
    }
    Ok(())
}
