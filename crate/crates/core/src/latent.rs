//! Latent-neuron tools: relevance ranking, activation maximization, vocabulary projection, steering.

use serde::{Deserialize, Serialize};

use crate::composite::Composite;
use crate::error::{Error, Result};
use crate::model::{Arch, Embedded, ForwardOptions, Model, ModelInput, NeuronEdit};
use crate::relevance::{backprop_relevance, RelevanceInit, RelevanceStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub layer: usize,
    pub neuron: usize,
    pub relevance: f64,
}

fn dense_ffn(model: &Model) -> Result<()> {
    if model.config.moe.is_some() {
        return Err(Error::InvalidArgument("latent tools target dense FFN layers".into()));
    }
    Ok(())
}

/// The `k` FFN neurons with the largest relevance magnitude, summed over positions (ties to the lower index).
pub fn rank_latent_relevance(
    model: &Model,
    store: &RelevanceStore,
    layers: Option<&[usize]>,
    k: usize,
) -> Result<Vec<NeuronScore>> {
    dense_ffn(model)?;
    let all: Vec<usize> = (0..model.config.n_layers).collect();
    let layers = layers.unwrap_or(&all);
    let d_ff = model.config.d_ff;
    let mut scores = Vec::new();
    for &l in layers {
        if l >= model.config.n_layers {
            return Err(Error::InvalidArgument(format!("layer {l} outside {} layers", model.config.n_layers)));
        }
        let id = store
            .find(&model.neuron_tag(l))
            .ok_or_else(|| Error::InvalidArgument(format!("no activation node for layer {l}")))?;
        let r = store.node(id);
        for n in 0..d_ff {
            let relevance = r.map_or(0.0, |r| (0..r.n_rows()).map(|p| r.row(p)[n]).sum());
            scores.push(NeuronScore { layer: l, neuron: n, relevance });
        }
    }
    scores.sort_by(|a, b| {
        b.relevance
            .abs()
            .total_cmp(&a.relevance.abs())
            .then((a.layer, a.neuron).cmp(&(b.layer, b.neuron)))
    });
    scores.truncate(k);
    Ok(scores)
}

/// A reference sample for a neuron: where it fires most, and what drives it there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub index: usize,
    pub tokens: Option<Vec<usize>>,
    pub position: usize,
    pub activation: f64,
    /// Per-position relevance of the activation at `position`.
    pub heatmap: Vec<f64>,
}

/// Top-`top_n` inputs of `corpus` by peak activation of one neuron, each with a relevance heatmap.
pub fn actmax_collect(
    model: &Model,
    corpus: &[ModelInput],
    layer: usize,
    neuron: usize,
    top_n: usize,
    composite: &Composite,
) -> Result<Vec<Reference>> {
    dense_ffn(model)?;
    check_neuron(model, layer, neuron)?;
    let tag = model.neuron_tag(layer);
    let d_ff = model.config.d_ff;
    let mut peaks = Vec::with_capacity(corpus.len());
    for (i, input) in corpus.iter().enumerate() {
        let (tape, _) = model.forward_taped(input)?;
        let act = tape.value(tape.find(&tag).expect("dense layer has an activation node"));
        let (position, activation) = (0..act.n_rows())
            .map(|p| (p, act.row(p)[neuron]))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        peaks.push((i, position, activation));
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    peaks
        .into_iter()
        .take(top_n)
        .map(|(i, position, activation)| {
            let (tape, _) = model.forward_taped(&corpus[i])?;
            let node = tape.find(&tag).expect("dense layer has an activation node");
            let init = RelevanceInit {
                node,
                index: position * d_ff + neuron,
                value: activation,
            };
            let store = backprop_relevance(&tape, composite, init)?;
            Ok(Reference {
                index: i,
                tokens: corpus[i].tokens().map(<[usize]>::to_vec),
                position,
                activation,
                heatmap: store.token_relevance(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: usize,
    pub name: String,
    pub score: f64,
}

fn check_neuron(model: &Model, layer: usize, neuron: usize) -> Result<()> {
    if layer >= model.config.n_layers || neuron >= model.config.d_ff {
        return Err(Error::InvalidArgument(format!(
            "neuron ({layer}, {neuron}) outside {} layers × {} neurons",
            model.config.n_layers, model.config.d_ff
        )));
    }
    Ok(())
}

/// The neuron's output direction in the residual stream, read through the unembedding.
pub fn project_to_vocab(model: &Model, layer: usize, neuron: usize) -> Result<Vec<f64>> {
    dense_ffn(model)?;
    check_neuron(model, layer, neuron)?;
    if model.config.arch != Arch::Decoder {
        return Err(Error::InvalidArgument("vocabulary projection needs a decoder".into()));
    }
    let down = model.params.get(&format!("blocks.{layer}.ffn.down_proj.weight"))?;
    let direction: Vec<f64> = (0..down.shape()[0]).map(|r| down.get(&[r, neuron])).collect();
    let head = model.params.get("lm_head.weight")?;
    Ok((0..head.shape()[0])
        .map(|t| head.row(t).iter().zip(&direction).map(|(a, b)| a * b).sum())
        .collect())
}

/// Highest-scoring tokens of a projection (ties to the lower id).
pub fn top_tokens(scores: &[f64], top_n: usize, name: impl Fn(usize) -> String) -> Vec<TokenScore> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(top_n)
        .map(|t| TokenScore {
            token: t,
            name: name(t),
            score: scores[t],
        })
        .collect()
}

/// Forward pass with neuron overrides; no edits reproduces the plain forward exactly.
pub fn steer(model: &Model, input: &ModelInput, edits: &[NeuronEdit]) -> Result<Tensor> {
    let emb: Embedded = model.embed(input)?;
    let opts = ForwardOptions {
        edits: edits.to_vec(),
        ..ForwardOptions::default()
    };
    Ok(model.forward_embedded(&emb, &opts)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub layer: usize,
    pub neuron: usize,
    pub top_tokens: Vec<TokenScore>,
    pub references: Vec<Reference>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tape::ActivationEdit;

    fn tiny() -> Model {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 6,
            ..ModelConfig::decoder(10, 8)
        };
        Model::init(config, 21).unwrap()
    }

    #[test]
    fn ranking_covers_every_neuron_sorted_by_magnitude() {
        let m = tiny();
        let (tape, logits) = m.forward_taped(&ModelInput::Tokens(vec![1, 2, 3])).unwrap();
        let target = m.target_index(&logits, 4);
        let init = RelevanceInit {
            node: tape.output(),
            index: target,
            value: logits.data()[target],
        };
        let store = backprop_relevance(&tape, &Composite::attnlrp_llm(), init).unwrap();
        let ranked = rank_latent_relevance(&m, &store, None, usize::MAX).unwrap();
        assert_eq!(ranked.len(), 12);
        assert!(ranked.windows(2).all(|w| w[0].relevance.abs() >= w[1].relevance.abs()));
        let id = store.find("blocks.1.ffn.act").unwrap();
        let r = store.node(id).unwrap();
        let top = ranked[0];
        let direct: f64 = (0..3).map(|p| r.row(p)[top.neuron]).sum();
        if top.layer == 1 {
            assert_eq!(direct, top.relevance);
        }
        assert_eq!(rank_latent_relevance(&m, &store, Some(&[0]), 100).unwrap().len(), 6);
        assert_eq!(rank_latent_relevance(&m, &store, None, 3).unwrap(), ranked[..3]);
        assert!(rank_latent_relevance(&m, &store, None, 0).unwrap().is_empty());
        assert!(rank_latent_relevance(&m, &store, Some(&[2]), 1).is_err());
    }

    #[test]
    fn actmax_sorted_with_heatmaps() {
        let m = tiny();
        let corpus: Vec<ModelInput> = (0..6).map(|i| ModelInput::Tokens(vec![i, (i + 3) % 10, 7])).collect();
        let refs = actmax_collect(&m, &corpus, 1, 2, 3, &Composite::attnlrp_llm()).unwrap();
        assert_eq!(refs.len(), 3);
        assert!(refs.windows(2).all(|w| w[0].activation >= w[1].activation));
        assert!(refs.iter().all(|r| r.heatmap.len() == 3));
        assert!(actmax_collect(&m, &corpus, 0, 6, 1, &Composite::attnlrp_llm()).is_err());
    }

    #[test]
    fn projection_matches_manual_product() {
        let m = tiny();
        let scores = project_to_vocab(&m, 0, 3).unwrap();
        assert_eq!(scores.len(), 10);
        let down = m.params.get("blocks.0.ffn.down_proj.weight").unwrap();
        let head = m.params.get("lm_head.weight").unwrap();
        let manual: f64 = (0..8).map(|d| head.get(&[5, d]) * down.get(&[d, 3])).sum();
        assert!((scores[5] - manual).abs() < 1e-12);
        let top = top_tokens(&scores, 3, |t| format!("t{t}"));
        assert_eq!(top.len(), 3);
        assert!(top[0].score >= top[1].score);
    }

    #[test]
    fn empty_steer_is_the_forward_pass() {
        let m = tiny();
        let input = ModelInput::Tokens(vec![4, 1, 6]);
        assert_eq!(steer(&m, &input, &[]).unwrap(), m.forward(&input).unwrap());
        let edit = NeuronEdit {
            layer: 0,
            neuron: 1,
            edit: ActivationEdit::Set(50.0),
        };
        assert_ne!(steer(&m, &input, &[edit]).unwrap(), m.forward(&input).unwrap());
    }
}
