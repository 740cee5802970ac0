//! Competing attribution methods: gradient-based, attention-based and perturbation-based.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Embedded, ForwardOptions, Model, Suppression};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

/// One-hot seed on the flat logit index `target`.
fn one_hot(shape: &[usize], target: usize) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()[target] = 1.0;
    t
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    (0..t.n_rows()).map(|r| t.row(r).iter().sum()).collect()
}

/// Gradient of the logit at flat index `target` with respect to the input leaf.
pub fn input_gradient(tape: &Tape, target: usize) -> Result<Tensor> {
    let out = tape.output();
    let grads = tape.backprop_gradient(&one_hot(tape.value(out).shape(), target))?;
    let input = tape.input_node().ok_or_else(|| Error::InvalidArgument("tape has no input leaf".into()))?;
    Ok(grads
        .node(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.value(input).shape())))
}

/// Gradient ⊙ input, summed per position.
pub fn input_x_gradient(tape: &Tape, target: usize) -> Result<Vec<f64>> {
    let g = input_gradient(tape, target)?;
    let input = tape.input_node().expect("checked by input_gradient");
    Ok(row_sums(&tensor::hadamard(&g, tape.value(input))?))
}

fn gradient_at(model: &Model, values: Tensor, tokens: Option<Vec<usize>>, target: usize) -> Result<Tensor> {
    let (tape, _) = model.forward_embedded(&Embedded { values, tokens }, &ForwardOptions::default())?;
    input_gradient(&tape, target)
}

/// Riemann sum of gradients along the straight path from `baseline` (zeros by default) to the input.
pub fn integrated_gradients(
    model: &Model,
    emb: &Embedded,
    baseline: Option<&Tensor>,
    steps: usize,
    target: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    let zeros = Tensor::zeros(emb.values.shape());
    let base = baseline.unwrap_or(&zeros);
    let diff = emb.values.zip_map(base, "integrated_gradients", |x, b| x - b)?;
    let mut total = Tensor::zeros(emb.values.shape());
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point = base.zip_map(&diff, "integrated_gradients", |b, d| b + alpha * d)?;
        total.add_assign(&gradient_at(model, point, emb.tokens.clone(), target)?)?;
    }
    Ok(row_sums(&tensor::hadamard(&total.scale(1.0 / steps as f64), &diff)?))
}

/// Mean input gradient over `samples` copies of the input with N(0, σ²) noise.
pub fn smoothgrad_gradient(
    model: &Model,
    emb: &Embedded,
    sigma: f64,
    samples: usize,
    target: usize,
    seed: u64,
) -> Result<Tensor> {
    if samples == 0 || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("smoothgrad needs samples ≥ 1 and σ ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = Tensor::zeros(emb.values.shape());
    for _ in 0..samples {
        let noisy = if sigma == 0.0 {
            emb.values.clone()
        } else {
            let noise = Normal::new(0.0, sigma).expect("finite σ");
            let data = emb.values.data().iter().map(|v| v + noise.sample(&mut rng)).collect();
            Tensor::new(emb.values.shape().to_vec(), data)?
        };
        total.add_assign(&gradient_at(model, noisy, emb.tokens.clone(), target)?)?;
    }
    Ok(total.scale(1.0 / samples as f64))
}

/// SmoothGrad mean gradient ⊙ input, summed per position.
pub fn smoothgrad(model: &Model, emb: &Embedded, sigma: f64, samples: usize, target: usize, seed: u64) -> Result<Vec<f64>> {
    let g = smoothgrad_gradient(model, emb, sigma, samples, target, seed)?;
    Ok(row_sums(&tensor::hadamard(&g, &emb.values)?))
}

/// Attention maps `[H, S, S]` of every layer, in order.
pub fn attention_maps(tape: &Tape) -> Vec<(usize, Tensor)> {
    (0..)
        .map_while(|l| tape.find(&format!("blocks.{l}.attn.softmax")).map(|id| (id, tape.value(id).clone())))
        .collect()
}

fn head_mean(a: &Tensor) -> Tensor {
    let (h, s) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[s, s]);
    for k in 0..h {
        for (o, v) in out.data_mut().iter_mut().zip(&a.data()[k * s * s..(k + 1) * s * s]) {
            *o += v / h as f64;
        }
    }
    out
}

/// Zeroes entries above the `dt` quantile; `dt ≥ 1` keeps everything.
fn discard_outliers(a: &mut Tensor, dt: f64) {
    if dt >= 1.0 {
        return;
    }
    let mut sorted = a.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() as f64 * dt).floor() as usize).min(sorted.len() - 1);
    let threshold = sorted[idx];
    a.data_mut().iter_mut().filter(|v| **v > threshold).for_each(|v| *v = 0.0);
}

/// Token relevance read off a `[S, S]` map: the explained row for decoders, the row mean for pooled classifiers.
fn read_out(model: &Model, m: &Tensor) -> Vec<f64> {
    let s = m.shape()[0];
    if model.config.arch == crate::model::Arch::Decoder {
        m.row(s - 1).to_vec()
    } else {
        (0..s).map(|j| (0..s).map(|i| m.get(&[i, j])).sum::<f64>() / s as f64).collect()
    }
}

/// Chained `rownorm(I + Ā)` over layers from the input upwards.
pub fn rollout_matrix(maps: &[Tensor], dt: f64) -> Tensor {
    let s = maps[0].shape()[1];
    let mut r = Tensor::eye(s);
    for a in maps {
        let mut m = head_mean(a);
        discard_outliers(&mut m, dt);
        let mut aug = tensor::add(&m, &Tensor::eye(s)).expect("square maps");
        for i in 0..s {
            let row = aug.row_mut(i);
            let z: f64 = row.iter().sum();
            if z != 0.0 {
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        r = tensor::matmul(&aug, &r).expect("square maps");
    }
    r
}

pub fn attention_rollout(model: &Model, tape: &Tape, dt: f64) -> Result<Vec<f64>> {
    let maps: Vec<Tensor> = attention_maps(tape).into_iter().map(|(_, a)| a).collect();
    if maps.is_empty() {
        return Err(Error::InvalidArgument("tape has no attention layers".into()));
    }
    Ok(read_out(model, &rollout_matrix(&maps, dt)))
}

fn attention_gradients(tape: &Tape, target: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let out = tape.output();
    let grads = tape.backprop_gradient(&one_hot(tape.value(out).shape(), target))?;
    Ok(attention_maps(tape)
        .into_iter()
        .map(|(id, a)| {
            let g = grads.node(id).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
            (a, g)
        })
        .collect())
}

/// Rollout of `Ā = mean_h (∇A ⊙ A)⁺` accumulated as `R ← R + Ā·R` from the identity; reported without the identity.
pub fn grad_attention_rollout(model: &Model, tape: &Tape, target: usize, dt: f64) -> Result<Vec<f64>> {
    let pairs = attention_gradients(tape, target)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("tape has no attention layers".into()));
    }
    let s = pairs[0].0.shape()[1];
    let mut r = Tensor::eye(s);
    for (a, g) in &pairs {
        let weighted = tensor::hadamard(a, g)?.map(|v| v.max(0.0));
        let mut m = head_mean(&weighted);
        discard_outliers(&mut m, dt);
        let step = tensor::matmul(&m, &r)?;
        r.add_assign(&step)?;
    }
    let r = r.zip_map(&Tensor::eye(s), "grad_rollout", |a, b| a - b)?;
    Ok(read_out(model, &r))
}

/// Last-layer `A ⊙ ∇A`, head-averaged and summed over queries.
pub fn gradcam_attention(tape: &Tape, target: usize) -> Result<Vec<f64>> {
    let pairs = attention_gradients(tape, target)?;
    let (a, g) = pairs
        .last()
        .ok_or_else(|| Error::InvalidArgument("tape has no attention layers".into()))?;
    let m = head_mean(&tensor::hadamard(a, g)?);
    let s = m.shape()[0];
    Ok((0..s).map(|j| (0..s).map(|i| m.get(&[i, j])).sum()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtmanResult {
    pub scores: Vec<f64>,
    pub forward_passes: usize,
}

/// Drop of the target logit when each position's pre-softmax attention column is scaled by `1 − p`.
pub fn atman(model: &Model, emb: &Embedded, p: f64, target: usize) -> Result<AtmanResult> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("suppression {p} outside [0, 1]")));
    }
    let (_, base) = model.forward_embedded(emb, &ForwardOptions::default())?;
    let f = base.data()[target];
    let n = emb.n_positions();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let opts = ForwardOptions {
            suppression: Some(Suppression {
                positions: vec![i],
                factor: 1.0 - p,
            }),
            ..ForwardOptions::default()
        };
        let (_, logits) = model.forward_embedded(emb, &opts)?;
        scores.push(f - logits.data()[target]);
    }
    Ok(AtmanResult {
        scores,
        forward_passes: n + 1,
    })
}

pub fn random_relevance(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelInput};
    use crate::tape::Params;

    fn tiny() -> Model {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 8,
            ..ModelConfig::decoder(10, 8)
        };
        Model::init(config, 11).unwrap()
    }

    #[test]
    fn input_x_gradient_of_linear_map() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_rows(&[vec![2.0, -1.0]])).unwrap();
        let mut t = Tape::new(&p);
        let x = t.input(Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 1.0]]), None, None, "x");
        let w = t.param_named("w").unwrap();
        let y = t.linear(x, w, None, "y").unwrap();
        t.set_output(y);
        let r = input_x_gradient(&t, 0).unwrap();
        assert_eq!(r, vec![2.0, 0.0]);
    }

    #[test]
    fn integrated_gradients_completeness_and_limits() {
        let m = tiny();
        let emb = m.embed(&ModelInput::Tokens(vec![1, 5, 2, 7])).unwrap();
        let (_, logits) = m.forward_embedded(&emb, &ForwardOptions::default()).unwrap();
        let target = m.target_index(&logits, 3);
        // half-scale baseline keeps the path away from the steep normalization regime near zero
        let half = emb.values.scale(0.5);
        let start = Embedded {
            values: half.clone(),
            tokens: emb.tokens.clone(),
        };
        let (_, base) = m.forward_embedded(&start, &ForwardOptions::default()).unwrap();
        let ig = integrated_gradients(&m, &emb, Some(&half), 2048, target).unwrap();
        let gap = logits.data()[target] - base.data()[target];
        assert!((ig.iter().sum::<f64>() - gap).abs() <= 0.02 * gap.abs().max(1e-3));
        // the baseline itself has nothing to attribute
        let zero = Embedded {
            values: Tensor::zeros(emb.values.shape()),
            tokens: emb.tokens.clone(),
        };
        let at_base = integrated_gradients(&m, &zero, None, 20, target).unwrap();
        assert!(at_base.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothgrad_without_noise_is_the_gradient() {
        let m = tiny();
        let emb = m.embed(&ModelInput::Tokens(vec![1, 5, 2])).unwrap();
        let (tape, logits) = m.forward_embedded(&emb, &ForwardOptions::default()).unwrap();
        let target = m.target_index(&logits, 4);
        let plain = input_gradient(&tape, target).unwrap();
        assert_eq!(smoothgrad_gradient(&m, &emb, 0.0, 1, target, 0).unwrap(), plain);
        let averaged = smoothgrad_gradient(&m, &emb, 0.0, 4, target, 0).unwrap();
        assert!(averaged.max_abs_diff(&plain) < 1e-12);
        assert_eq!(
            smoothgrad(&m, &emb, 0.3, 5, target, 9).unwrap(),
            smoothgrad(&m, &emb, 0.3, 5, target, 9).unwrap()
        );
    }

    #[test]
    fn rollout_hand_cases() {
        let eye = Tensor::eye(3).reshape(&[1, 3, 3]).unwrap();
        let r = rollout_matrix(&[eye], 1.0);
        assert_eq!(r, Tensor::eye(3));

        let a1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).reshape(&[1, 2, 2]).unwrap();
        let a2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.2, 0.8]]).reshape(&[1, 2, 2]).unwrap();
        let r = rollout_matrix(&[a1, a2], 1.0);
        // rownorm(I + A): [[1,0],[0.25,0.75]] then [[1,0],[0.1,0.9]]; product second · first
        let expect = [1.0, 0.0, 0.1 + 0.9 * 0.25, 0.9 * 0.75];
        for (x, y) in r.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_attention_maps() {
        let m = tiny();
        let (tape, logits) = m.forward_taped(&ModelInput::Tokens(vec![3, 1, 4, 1, 5])).unwrap();
        let t0 = m.target_index(&logits, 0);
        let t1 = m.target_index(&logits, 7);
        let a = grad_attention_rollout(&m, &tape, t0, 1.0).unwrap();
        let b = grad_attention_rollout(&m, &tape, t1, 1.0).unwrap();
        assert!(a.iter().all(|&v| v >= 0.0));
        assert_ne!(a, b);
        assert_eq!(gradcam_attention(&tape, t0).unwrap().len(), 5);

        // a seed that does not touch the output gives zero maps
        let mut p = Params::new();
        p.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut t = Tape::new(&p);
        let x = t.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), None, None, "x");
        let h = t.split_heads(x, 1, "h").unwrap();
        let s = t.matmul(h, h, true, "s").unwrap();
        let a = t.softmax(s, 1.0, None, "blocks.0.attn.softmax").unwrap();
        let w = t.param_named("w").unwrap();
        let merged = t.merge_heads(a, "m").unwrap();
        let y = t.linear(merged, w, None, "y").unwrap();
        t.set_output(y);
        let zero = grad_attention_rollout(&m, &t, 0, 1.0).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(gradcam_attention(&t, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn atman_limits() {
        let m = tiny();
        let emb = m.embed(&ModelInput::Tokens(vec![2, 6, 1, 9])).unwrap();
        let (_, logits) = m.forward_embedded(&emb, &ForwardOptions::default()).unwrap();
        let target = m.target_index(&logits, 2);
        let r = atman(&m, &emb, 0.0, target).unwrap();
        assert!(r.scores.iter().all(|&v| v == 0.0));
        assert_eq!(r.forward_passes, 5);
        let full = atman(&m, &emb, 1.0, target).unwrap();
        assert!(full.scores.iter().any(|&v| v != 0.0));
        assert!(atman(&m, &emb, 1.5, target).is_err());
    }

    #[test]
    fn full_suppression_zeroes_the_score_column() {
        let m = tiny();
        let emb = m.embed(&ModelInput::Tokens(vec![2, 6, 1])).unwrap();
        let opts = ForwardOptions {
            suppression: Some(Suppression {
                positions: vec![1],
                factor: 0.0,
            }),
            ..ForwardOptions::default()
        };
        let (tape, _) = m.forward_embedded(&emb, &opts).unwrap();
        let s = tape.value(tape.find("blocks.0.attn.suppress").unwrap());
        for r in 0..s.n_rows() {
            assert_eq!(s.row(r)[1], 0.0);
        }
    }
}
