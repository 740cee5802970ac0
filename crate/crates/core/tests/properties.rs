use attnlrp::composite::Composite;
use attnlrp::eval::{self, perturbation_counts, plausibility, ranking, Explained, Mode, Source};
use attnlrp::explain::{relevance_pass, ExplainOptions, Method};
use attnlrp::latent::steer;
use attnlrp::model::tasks::Task;
use attnlrp::model::{Model, ModelConfig, ModelInput, NeuronEdit};
use attnlrp::relevance::{backprop_relevance, RelevanceInit};
use attnlrp::rules;
use attnlrp::tape::ActivationEdit;
use attnlrp::{tensor, Tensor};
use proptest::prelude::*;

fn tensor_strategy(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn linear_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, Tensor)> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(s, i, o)| {
        (
            tensor_strategy(o, i, -1.0, 1.0),
            tensor_strategy(1, o, -0.5, 0.5),
            tensor_strategy(s, i, -2.0, 2.0),
            tensor_strategy(s, o, -1.0, 1.0),
        )
    })
}

fn softmax_case() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..4, 2usize..10).prop_flat_map(|(s, n)| (tensor_strategy(s, n, -4.0, 4.0), tensor_strategy(s, n, -1.0, 1.0)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn tiny_decoder(seed: u64) -> Model {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        ..ModelConfig::decoder(12, 8)
    };
    Model::init(config, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_rules_close_their_ledger((w, b, x, r) in linear_case(), gamma in 0.0f64..5.0) {
        let b = b.reshape(&[w.shape()[0]]).unwrap();
        let (e, ea) = rules::epsilon_linear(&w, Some(&b), &x, &r, 1e-6).unwrap();
        prop_assert!(close(e.sum() + ea, r.sum(), 1e-9));
        let (g, ga) = rules::gamma_linear(&w, Some(&b), &x, &r, gamma, 1e-6).unwrap();
        prop_assert!(close(g.sum() + ga, r.sum(), 1e-9));
        let (z, za) = rules::zplus_linear(&w, &x, &r).unwrap();
        prop_assert!(close(z.sum() + za, r.sum(), 1e-9));
    }

    #[test]
    fn bias_free_epsilon_conserves_away_from_zero((w, _b, x, r) in linear_case()) {
        let z = tensor::linear(&x, &w, None).unwrap();
        prop_assume!(z.data().iter().all(|v| v.abs() > 1e-2));
        let (e, _) = rules::epsilon_linear(&w, None, &x, &r, 1e-9).unwrap();
        prop_assert!(close(e.sum(), r.sum(), 1e-6));
    }

    #[test]
    fn gamma_rule_is_continuous_in_gamma((w, b, x, r) in linear_case(), gamma in 0.0f64..5.0) {
        let b = b.reshape(&[w.shape()[0]]).unwrap();
        let (g0, _) = rules::gamma_linear(&w, Some(&b), &x, &r, gamma, 1e-3).unwrap();
        let (g1, _) = rules::gamma_linear(&w, Some(&b), &x, &r, gamma + 1e-9, 1e-3).unwrap();
        prop_assert!(g0.max_abs_diff(&g1) < 1e-4);
    }

    #[test]
    fn softmax_rules_close_their_ledger((x, r) in softmax_case(), temperature in 0.5f64..2.0) {
        let s = tensor::softmax(&x, 1, temperature).unwrap();
        let (t, ta) = rules::softmax_taylor(&x, &s, &r, temperature).unwrap();
        prop_assert!(close(t.sum() + ta, r.sum(), 1e-9));
        let (z, za) = rules::softmax_zplus(&x, &s, &r, temperature).unwrap();
        prop_assert!(close(z.sum() + za, r.sum(), 1e-9));
    }

    #[test]
    fn softmax_taylor_is_invariant_to_row_shift((x, r) in softmax_case(), shift in -3.0f64..3.0) {
        // Shifting the logits changes x but not s; the rule's row sum follows x·(R − sΣR).
        let s = tensor::softmax(&x, 1, 1.0).unwrap();
        let shifted = x.map(|v| v + shift);
        let (a, _) = rules::softmax_taylor(&x, &s, &r, 1.0).unwrap();
        let (b, _) = rules::softmax_taylor(&shifted, &s, &r, 1.0).unwrap();
        for row in 0..x.n_rows() {
            let total: f64 = r.row(row).iter().sum();
            let extra: f64 = (0..x.last_dim()).map(|i| shift * (r.row(row)[i] - s.row(row)[i] * total)).sum();
            prop_assert!(close(b.row(row).iter().sum::<f64>(), a.row(row).iter().sum::<f64>() + extra, 1e-9));
        }
    }

    #[test]
    fn bilinear_matmul_conserves(s in 1usize..5, k in 1usize..5, p in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let a = tensor::softmax(&draw(&[s, k], -2.0, 2.0), 1, 1.0).unwrap();
        let v = draw(&[k, p], 0.1, 2.0);
        let o = tensor::matmul(&a, &v).unwrap();
        let (ra, rv, absorbed) = rules::matmul_bilinear(&a, &v, &o, &o, 1e-9).unwrap();
        prop_assert!(close(ra.sum() + rv.sum(), o.sum(), 1e-8));
        prop_assert!(close(ra.sum(), rv.sum(), 1e-8));
        prop_assert!(absorbed.abs() < 1e-6);
        let (rv_only, _) = rules::matmul_value_only(&a, &v, &o, &o, 1e-9).unwrap();
        prop_assert!(close(rv_only.sum(), o.sum(), 1e-8));
    }

    #[test]
    fn uniform_split_is_the_shapley_value(xs in prop::collection::vec(-3.0f64..3.0, 1..7)) {
        let product: f64 = xs.iter().product();
        let shares = rules::uniform_product(xs.len(), &Tensor::scalar(product));
        let phi = eval::shapley_oracle_product(&xs).unwrap();
        for (u, s) in shares.iter().zip(&phi) {
            prop_assert!((u.data()[0] - s).abs() <= 1e-12 * (1.0 + product.abs()));
        }
    }

    #[test]
    fn shapley_is_efficient_and_symmetric(values in prop::collection::vec(-5.0f64..5.0, 16)) {
        // Arbitrary 4-player game with v(∅) = 0.
        let v = |s: u32| if s == 0 { 0.0 } else { values[s as usize] };
        let phi = eval::shapley_exact(4, v).unwrap();
        prop_assert!(close(phi.iter().sum::<f64>(), v(0b1111), 1e-12));
        let sym = |s: u32| (s.count_ones() as f64).powi(2);
        let phi = eval::shapley_exact(4, sym).unwrap();
        prop_assert!(phi.iter().all(|&p| close(p, 4.0, 1e-12)));
    }

    #[test]
    fn perturbation_counts_are_monotone_and_mirrored(n in 2usize..64) {
        let c = perturbation_counts(n).unwrap();
        prop_assert_eq!(c.len(), n);
        prop_assert_eq!(c[0], 0);
        prop_assert_eq!(c[n - 1], n);
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        for k in 0..n / 2 {
            prop_assert_eq!(c[k] + c[n - 1 - k], n);
        }
    }

    #[test]
    fn ranking_commutes_with_permutation(rel in prop::collection::vec(-10.0f64..10.0, 2..20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..rel.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut distinct = rel.clone();
        distinct.sort_by(f64::total_cmp);
        prop_assume!(distinct.windows(2).all(|w| w[0] != w[1]));
        // permuted[perm[i]] = rel[i]
        let mut permuted = vec![0.0; rel.len()];
        for (i, &p) in perm.iter().enumerate() {
            permuted[p] = rel[i];
        }
        let mapped: Vec<usize> = ranking(&rel).into_iter().map(|i| perm[i]).collect();
        prop_assert_eq!(ranking(&permuted), mapped);
    }

    #[test]
    fn plausibility_is_bounded(rel in prop::collection::vec(-1.0f64..1.0, 1..16), bits in any::<u16>()) {
        let mask: Vec<bool> = (0..rel.len()).map(|i| bits >> i & 1 == 1).collect();
        let p = plausibility(&rel, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.iou));
        let perfect: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
        if mask.iter().any(|&m| m) {
            let q = plausibility(&perfect, &mask).unwrap();
            prop_assert!(q.top1);
            prop_assert_eq!(q.iou, 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attnlrp_ledger_closes_on_random_models(seed in 0u64..1000, tokens in prop::collection::vec(0usize..12, 1..8)) {
        let m = tiny_decoder(seed);
        let (tape, logits) = m.forward_taped(&ModelInput::Tokens(tokens)).unwrap();
        let target = m.target_index(&logits, m.predict(&logits));
        let init = RelevanceInit { node: tape.output(), index: target, value: logits.data()[target] };
        for composite in [Composite::attnlrp_llm(), Composite::cplrp()] {
            let audit = backprop_relevance(&tape, &composite, init).unwrap().conservation_audit();
            prop_assert!(audit.relative_defect <= 1e-9, "{} defect {}", composite.name, audit.relative_defect);
        }
    }

    #[test]
    fn causal_decoder_gives_future_tokens_no_relevance(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0usize..12, 2..8),
        pick in any::<prop::sample::Index>(),
    ) {
        let m = tiny_decoder(seed);
        let emb = m.embed(&ModelInput::Tokens(tokens.clone())).unwrap();
        let position = pick.index(tokens.len());
        let target = position * m.config.n_outputs() + 3;
        for method in [Method::AttnLrp, Method::CpLrp] {
            let rel = relevance_pass(&m, &emb, method, target, &ExplainOptions::default()).unwrap().token_relevance();
            prop_assert!(rel[position + 1..].iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn identity_edits_leave_logits_unchanged(seed in 0u64..1000, tokens in prop::collection::vec(0usize..12, 1..8), neuron in 0usize..12) {
        let m = tiny_decoder(seed);
        let input = ModelInput::Tokens(tokens);
        let plain = m.forward(&input).unwrap();
        prop_assert_eq!(&steer(&m, &input, &[]).unwrap(), &plain);
        let edit = NeuronEdit { layer: 1, neuron, edit: ActivationEdit::Scale(1.0) };
        prop_assert_eq!(&steer(&m, &input, &[edit]).unwrap(), &plain);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let task = Task::planted_answer();
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..task.default_model()
    };
    let model = Model::init(config, 3).unwrap();
    let samples = task.test_set(5, 12);
    let sources = [
        Source::Method(Method::AttnLrp, ExplainOptions::default()),
        Source::Method(Method::SmoothGrad, ExplainOptions::default()),
        Source::Method(Method::Random, ExplainOptions::default()),
        Source::Oracle,
    ];
    let a = eval::evaluate(&model, &samples, &sources, Mode::Flip, Explained::Prediction).unwrap();
    let b = eval::evaluate(&model, &samples, &sources, Mode::Flip, Explained::Prediction).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), samples.len() * sources.len());
}
