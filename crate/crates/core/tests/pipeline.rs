mod common;

use attnlrp::baselines;
use attnlrp::composite::Composite;
use attnlrp::eval::{evaluate, Explained, Mode, Source};
use attnlrp::explain::{attribute, default_composite, relevance_pass, ExplainOptions, Method};
use attnlrp::latent::{actmax_collect, project_to_vocab, rank_latent_relevance};
use attnlrp::model::train::accuracy;
use attnlrp::model::{argmax, Embedded, ForwardOptions, ModelInput};
use attnlrp::model::tasks::TaskKind;
use attnlrp::{OpKind, Rule, Tensor};

use common::Trained;

fn target_of(t: &Trained, input: &ModelInput) -> usize {
    let logits = t.model.forward(input).unwrap();
    t.model.target_index(&logits, t.model.predict(&logits))
}

#[test]
fn integrated_gradients_is_complete_on_the_trained_decoder() {
    let t = common::decoder();
    for s in t.task.test_set(4, 10) {
        let emb = t.model.embed(&s.input).unwrap();
        let target = target_of(t, &s.input);
        let ig = baselines::integrated_gradients(&t.model, &emb, None, 256, target).unwrap();
        let zero = Embedded {
            values: Tensor::zeros(emb.values.shape()),
            tokens: emb.tokens.clone(),
        };
        let f = |e: &Embedded| t.model.forward_embedded(e, &ForwardOptions::default()).unwrap().1.data()[target];
        let gap = f(&emb) - f(&zero);
        let total: f64 = ig.iter().sum();
        assert!((total - gap).abs() <= 0.02 * gap.abs(), "sum {total} vs gap {gap}");
    }
}

#[test]
fn every_method_attributes_every_architecture() {
    for t in [common::decoder(), common::encoder(), common::vit()] {
        let s = &t.task.test_set(6, 1)[0];
        let emb = t.model.embed(&s.input).unwrap();
        let target = target_of(t, &s.input);
        let opts = ExplainOptions {
            ig_steps: 8,
            smooth_samples: 4,
            ..ExplainOptions::default()
        };
        for method in Method::ALL {
            let json = attribute(&t.model, &emb, method, target, &opts).unwrap();
            assert_eq!(json.per_token.len(), emb.n_positions(), "{}", method.name());
            assert!(json.scores().iter().all(|v| v.is_finite()), "{}", method.name());
        }
    }
}

#[test]
fn encoder_and_vit_train_and_conserve() {
    for t in [common::encoder(), common::vit()] {
        let test = t.task.test_set(7, 200);
        let acc = accuracy(&t.model, &test).unwrap();
        assert!(acc >= 0.95, "{:?} accuracy {acc}", t.task.kind);
        let composite = default_composite(Method::AttnLrp, &t.model).unwrap();
        for s in test.iter().take(20) {
            let emb = t.model.embed(&s.input).unwrap();
            let store = relevance_pass(&t.model, &emb, Method::AttnLrp, target_of(t, &s.input), &ExplainOptions::default()).unwrap();
            let audit = store.conservation_audit();
            assert!(audit.relative_defect <= 1e-6, "{} defect {}", composite.name, audit.relative_defect);
        }
    }
}

#[test]
fn vit_preset_applies_gamma_to_the_patch_embedding() {
    let t = common::vit();
    let (tape, _) = t.model.forward_taped(&t.task.test_set(8, 1)[0].input).unwrap();
    let conv = tape.nodes().iter().find(|n| n.tag == "patch_embed").unwrap();
    assert_eq!(conv.kind, OpKind::Conv);
    let rule = Composite::attnlrp_vit().rule_for(&conv.tag, conv.kind).unwrap();
    assert_eq!(rule.name(), "Gamma");
}

/// γ = 1 on every linear layer and z⁺ on the softmax, chosen by a small grid on the toy ViT.
fn vit_tuned() -> Composite {
    Composite::new("attnlrp-vit-tuned")
        .with("*", Some(OpKind::Conv), Rule::gamma(1.0))
        .and_then(|c| c.with("*", Some(OpKind::Linear), Rule::gamma(1.0)))
        .and_then(|c| c.with("*", Some(OpKind::Softmax), Rule::SoftmaxZPlus))
        .map(|c| {
            Composite::attnlrp_vit()
                .assignments()
                .iter()
                .fold(c, |acc, a| acc.with(&a.layer_tag_glob, a.op_kind, a.rule).unwrap())
        })
        .unwrap()
}

#[test]
fn relevance_methods_beat_random_on_every_task() {
    for t in [common::decoder(), common::encoder(), common::vit()] {
        let samples = t.task.test_set(9, 40);
        let composite = (t.task.kind == TaskKind::PatchShape).then(vit_tuned);
        let sources = [
            Source::Method(
                Method::AttnLrp,
                ExplainOptions {
                    composite,
                    ..ExplainOptions::default()
                },
            ),
            Source::Method(Method::Random, ExplainOptions::default()),
            Source::Oracle,
        ];
        let report = evaluate(&t.model, &samples, &sources, Mode::Flip, Explained::Prediction).unwrap();
        let delta = |i: usize| report.summary[i].delta.mean;
        assert!(delta(0) > delta(1) + 1.0, "{:?}: {} vs random {}", t.task.kind, delta(0), delta(1));
        assert!(delta(2) > delta(1) + 1.0, "{:?}: oracle {} vs random {}", t.task.kind, delta(2), delta(1));
    }
}

#[test]
fn top_neuron_projection_points_at_the_answer() {
    let t = common::decoder();
    let samples = t.task.test_set(1, 100);
    let mut hits = 0;
    for s in &samples {
        let emb = t.model.embed(&s.input).unwrap();
        let logits = t.model.forward(&s.input).unwrap();
        let pred = t.model.predict(&logits);
        let store = relevance_pass(&t.model, &emb, Method::AttnLrp, t.model.target_index(&logits, pred), &ExplainOptions::default()).unwrap();
        let top = rank_latent_relevance(&t.model, &store, None, 1).unwrap()[0];
        hits += usize::from(argmax(&project_to_vocab(&t.model, top.layer, top.neuron).unwrap()) == pred);
    }
    // Chance is 1/8 over the answer tokens.
    assert!(hits >= 25, "{hits}/100");
}

#[test]
fn actmax_references_match_the_forward_pass() {
    let t = common::decoder();
    let samples = t.task.test_set(1, 60);
    let corpus: Vec<ModelInput> = samples.iter().map(|s| s.input.clone()).collect();
    let refs = actmax_collect(&t.model, &corpus, 1, 3, 5, &Composite::attnlrp_llm()).unwrap();
    assert_eq!(refs.len(), 5);
    let peak = |input: &ModelInput| {
        let (tape, _) = t.model.forward_taped(input).unwrap();
        let act = tape.value(tape.find("blocks.1.ffn.act").unwrap());
        (0..act.n_rows()).map(|p| act.row(p)[3]).fold(f64::NEG_INFINITY, f64::max)
    };
    let best = corpus.iter().map(peak).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(refs[0].activation, best);
    for r in &refs {
        assert_eq!(r.activation, peak(&corpus[r.index]));
        assert_eq!(r.heatmap.len(), t.task.seq_len);
        assert!(r.heatmap.iter().all(|v| v.is_finite()));
    }
}
