//! Rule-driven relevance propagation over a recorded tape, with an absorption ledger.

use serde::{Deserialize, Serialize};

use crate::composite::Composite;
use crate::error::{Error, Result};
use crate::rules::{self, LinearRule, Rule, SoftmaxDiagnostic};
use crate::tape::{NodeId, Op, OpKind, Tape};
use crate::tensor::Tensor;

/// Where the relevance pass starts: a single entry of a node's output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceInit {
    pub node: NodeId,
    /// Flat index into the node's output.
    pub index: usize,
    pub value: f64,
}

/// Relevance of every node after a pass, plus what each node absorbed.
#[derive(Debug, Clone)]
pub struct RelevanceStore {
    pub method: String,
    pub inits: Vec<RelevanceInit>,
    pub initial: f64,
    relevance: Vec<Option<Tensor>>,
    absorbed: Vec<f64>,
    tags: Vec<String>,
    kinds: Vec<OpKind>,
    absorb_class: Vec<AbsorbClass>,
    input: Option<NodeId>,
    tokens: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AbsorbClass {
    Bias,
    Softmax,
    Stabilizer,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSum {
    pub layer_tag: String,
    pub kind: OpKind,
    pub sum: f64,
    pub absorbed: f64,
}

/// Absorption split by where it happened.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AbsorbedBreakdown {
    /// Parameter leaves and nodes carrying an additive parameter (ε share included).
    pub bias: f64,
    /// Hidden bias of linearized softmax nodes (all of it under stop-flow).
    pub softmax: f64,
    /// Stabilizer absorption at bias-free nodes.
    pub stabilizer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub method: String,
    pub initial: f64,
    pub input_total: f64,
    pub absorbed_total: f64,
    pub defect: f64,
    pub relative_defect: f64,
    pub breakdown: AbsorbedBreakdown,
    pub per_layer: Vec<LayerSum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRelevance {
    pub position: usize,
    pub token: Option<usize>,
    pub relevance: f64,
}

/// JSON attribution record shared by relevance passes and baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionJson {
    pub method: String,
    pub init: Vec<RelevanceInit>,
    pub per_token: Vec<TokenRelevance>,
    #[serde(default)]
    pub per_layer: Vec<LayerSum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absorbed: Option<AbsorbedBreakdown>,
}

impl AttributionJson {
    pub fn from_scores(method: &str, scores: &[f64], tokens: Option<&[usize]>, init: Vec<RelevanceInit>) -> Self {
        Self {
            method: method.to_string(),
            init,
            per_token: scores
                .iter()
                .enumerate()
                .map(|(i, &r)| TokenRelevance {
                    position: i,
                    token: tokens.map(|t| t[i]),
                    relevance: r,
                })
                .collect(),
            per_layer: Vec::new(),
            absorbed: None,
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.per_token.iter().map(|t| t.relevance).collect()
    }
}

impl RelevanceStore {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.relevance[id].as_ref()
    }

    pub fn absorbed(&self, id: NodeId) -> f64 {
        self.absorbed[id]
    }

    pub fn len(&self) -> usize {
        self.relevance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevance.is_empty()
    }

    pub fn find(&self, tag: &str) -> Option<NodeId> {
        self.tags.iter().position(|t| t == tag)
    }

    /// Relevance at the input leaf, summed over the feature axis.
    pub fn token_relevance(&self) -> Vec<f64> {
        match self.input {
            Some(id) => match &self.relevance[id] {
                Some(r) => (0..r.n_rows()).map(|i| r.row(i).iter().sum()).collect(),
                None => vec![],
            },
            None => vec![],
        }
    }

    pub fn input_relevance(&self) -> Option<&Tensor> {
        self.input.and_then(|id| self.relevance[id].as_ref())
    }

    /// Adds another pass over the same graph (multi-target explanations).
    pub fn merge(&mut self, other: &RelevanceStore) -> Result<()> {
        if self.tags != other.tags {
            return Err(Error::InvalidArgument("cannot merge relevance of different graphs".into()));
        }
        for (a, b) in self.relevance.iter_mut().zip(&other.relevance) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(y)?,
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
        for (a, b) in self.absorbed.iter_mut().zip(&other.absorbed) {
            *a += b;
        }
        self.initial += other.initial;
        self.inits.extend(&other.inits);
        Ok(())
    }

    pub fn per_layer(&self) -> Vec<LayerSum> {
        (0..self.relevance.len())
            .filter_map(|id| {
                self.relevance[id].as_ref().map(|r| LayerSum {
                    layer_tag: self.tags[id].clone(),
                    kind: self.kinds[id],
                    sum: r.sum(),
                    absorbed: self.absorbed[id],
                })
            })
            .collect()
    }

    pub fn breakdown(&self) -> AbsorbedBreakdown {
        let mut b = AbsorbedBreakdown::default();
        for (&a, class) in self.absorbed.iter().zip(&self.absorb_class) {
            match class {
                AbsorbClass::Bias => b.bias += a,
                AbsorbClass::Softmax => b.softmax += a,
                AbsorbClass::Stabilizer => b.stabilizer += a,
                AbsorbClass::None => {}
            }
        }
        b
    }

    pub fn conservation_audit(&self) -> ConservationReport {
        let input_total: f64 = self.input_relevance().map_or(0.0, Tensor::sum);
        let absorbed_total: f64 = self.absorbed.iter().sum();
        let defect = self.initial - (input_total + absorbed_total);
        ConservationReport {
            method: self.method.clone(),
            initial: self.initial,
            input_total,
            absorbed_total,
            defect,
            relative_defect: defect.abs() / self.initial.abs().max(f64::MIN_POSITIVE),
            breakdown: self.breakdown(),
            per_layer: self.per_layer(),
        }
    }

    pub fn to_json(&self) -> AttributionJson {
        AttributionJson {
            absorbed: Some(self.breakdown()),
            per_layer: self.per_layer(),
            ..AttributionJson::from_scores(&self.method, &self.token_relevance(), self.tokens.as_deref(), self.inits.clone())
        }
    }
}

fn check_finite(t: &Tensor, node: NodeId, tape: &Tape) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            node,
            tag: tape.node(node).tag.clone(),
        })
    }
}

/// Runs a relevance pass from `init` back to the input leaf.
///
/// Every node that needs a rule must be covered by `composite`, whether or not
/// relevance reaches it.
pub fn backprop_relevance(tape: &Tape, composite: &Composite, init: RelevanceInit) -> Result<RelevanceStore> {
    let n = tape.len();
    if init.node >= n {
        return Err(Error::InvalidArgument(format!("init node {} outside tape of {n} nodes", init.node)));
    }
    let out_shape = tape.value(init.node).shape().to_vec();
    if init.index >= tape.value(init.node).len() {
        return Err(Error::InvalidArgument(format!(
            "init index {} outside output of shape {out_shape:?}",
            init.index
        )));
    }
    let mut rules: Vec<Option<Rule>> = vec![None; n];
    for node in tape.nodes() {
        if node.kind.needs_rule() {
            rules[node.id] = Some(composite.rule_for(&node.tag, node.kind)?);
        }
    }

    let mut relevance: Vec<Option<Tensor>> = vec![None; n];
    let mut absorbed = vec![0.0; n];
    let mut seed = Tensor::zeros(&out_shape);
    seed.data_mut()[init.index] = init.value;
    relevance[init.node] = Some(seed);

    for id in (0..=init.node).rev() {
        let Some(r_out) = relevance[id].take() else { continue };
        let node = tape.node(id);
        match &node.op {
            Op::Input { .. } => {}
            Op::Param(_) => absorbed[id] = r_out.sum(),
            _ => {
                let messages = propagate(tape, id, rules[id], &r_out)?;
                let mut passed = 0.0;
                for (&input, msg) in node.inputs.iter().zip(messages) {
                    if let Some(m) = msg {
                        check_finite(&m, id, tape)?;
                        passed += m.sum();
                        match &mut relevance[input] {
                            Some(t) => t.add_assign(&m)?,
                            slot => *slot = Some(m),
                        }
                    }
                }
                absorbed[id] = r_out.sum() - passed;
            }
        }
        relevance[id] = Some(r_out);
    }

    let absorb_class = tape
        .nodes()
        .iter()
        .map(|node| match node.op {
            Op::Input { .. } => AbsorbClass::None,
            Op::Param(_) => AbsorbClass::Bias,
            Op::Linear | Op::Affine if node.inputs.len() == 3 => AbsorbClass::Bias,
            Op::Softmax { .. } => AbsorbClass::Softmax,
            _ => AbsorbClass::Stabilizer,
        })
        .collect();
    let input = tape.input_node();
    let tokens = input.and_then(|id| match &tape.node(id).op {
        Op::Input { tokens, .. } => tokens.clone(),
        _ => None,
    });
    Ok(RelevanceStore {
        method: composite.name.clone(),
        inits: vec![init],
        initial: init.value,
        relevance,
        absorbed,
        tags: tape.nodes().iter().map(|n| n.tag.clone()).collect(),
        kinds: tape.nodes().iter().map(|n| n.kind).collect(),
        absorb_class,
        input,
        tokens,
    })
}

/// Sums one pass per init (multi-token explanations).
pub fn backprop_relevance_multi(tape: &Tape, composite: &Composite, inits: &[RelevanceInit]) -> Result<RelevanceStore> {
    let (first, rest) = inits
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("at least one relevance init is required".into()))?;
    let mut store = backprop_relevance(tape, composite, *first)?;
    for init in rest {
        store.merge(&backprop_relevance(tape, composite, *init)?)?;
    }
    Ok(store)
}

fn wrap(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), data)
}

/// Relevance messages from node `id` to each of its inputs.
fn propagate(tape: &Tape, id: NodeId, rule: Option<Rule>, r_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let node = tape.node(id);
    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| tape.value(i)).collect();
    let z = tape.value(id);
    let rule = match rule {
        Some(r) => r,
        None => return tape.vjp(id, r_out),
    };
    let linear = || {
        LinearRule::from_rule(&rule).ok_or_else(|| Error::Config(format!("{} is not a linear rule", rule.name())))
    };
    let messages = match &node.op {
        Op::Linear => {
            let (x, w) = (ins[0], ins[1]);
            let r = rules::linear_kernel(x.data(), w.data(), z.data(), r_out.data(), x.last_dim(), linear()?);
            let mut m = vec![Some(wrap(x.shape(), r)?), None];
            if ins.len() == 3 {
                m.push(None);
            }
            m
        }
        Op::CenterMean => {
            let x = ins[0];
            let d = x.last_dim();
            let w: Vec<f64> = (0..d * d)
                .map(|k| if k / d == k % d { 1.0 } else { 0.0 } - 1.0 / d as f64)
                .collect();
            let r = rules::linear_kernel(x.data(), &w, z.data(), r_out.data(), d, linear()?);
            vec![Some(wrap(x.shape(), r)?)]
        }
        Op::Affine => {
            let (x, gamma) = (ins[0], ins[1]);
            let d = gamma.len();
            let contrib: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v * gamma.data()[i % d]).collect();
            let r = rules::sum_kernel(&[&contrib], z.data(), r_out.data(), linear()?).remove(0);
            let mut m = vec![Some(wrap(x.shape(), r)?), None];
            if ins.len() == 3 {
                m.push(None);
            }
            m
        }
        Op::MeanPool => {
            let x = ins[0];
            let s = x.shape()[0] as f64;
            let rows: Vec<Vec<f64>> = (0..x.n_rows()).map(|r| x.row(r).iter().map(|v| v / s).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let parts = rules::sum_kernel(&refs, z.data(), r_out.data(), linear()?);
            vec![Some(wrap(x.shape(), parts.concat())?)]
        }
        Op::Add => {
            let parts = rules::sum_kernel(&[ins[0].data(), ins[1].data()], z.data(), r_out.data(), linear()?);
            parts
                .into_iter()
                .map(|p| wrap(z.shape(), p).map(Some))
                .collect::<Result<Vec<_>>>()?
        }
        Op::Softmax { temperature, mask } => {
            let (x, mask) = (ins[0], mask.as_deref());
            let t = *temperature;
            let (r, _) = match rule {
                Rule::SoftmaxTaylor => rules::softmax_taylor_masked(x, z, r_out, t, mask)?,
                Rule::SoftmaxZPlus => rules::softmax_zplus_masked(x, z, r_out, t, mask)?,
                Rule::SoftmaxStopFlow => {
                    rules::softmax_diagnostic_masked(x, z, r_out, t, SoftmaxDiagnostic::StopFlow, mask)?
                }
                Rule::SoftmaxIdentityDiag => {
                    rules::softmax_diagnostic_masked(x, z, r_out, t, SoftmaxDiagnostic::Identity, mask)?
                }
                Rule::SoftmaxDistributeBiasDiag => {
                    rules::softmax_diagnostic_masked(x, z, r_out, t, SoftmaxDiagnostic::DistributeBias, mask)?
                }
                _ => unreachable!("composite checked rule compatibility"),
            };
            vec![Some(r)]
        }
        Op::MatMul { transpose_rhs } => {
            let a = ins[0];
            let v = if *transpose_rhs { ins[1].transpose_last() } else { ins[1].clone() };
            let fix = |r: Tensor| if *transpose_rhs { r.transpose_last() } else { r };
            match rule {
                Rule::MatmulBilinear { epsilon } => {
                    let (ra, rv, _) = rules::matmul_bilinear(a, &v, z, r_out, epsilon)?;
                    vec![Some(ra), Some(fix(rv))]
                }
                Rule::MatmulNaiveEpsilonDiag { epsilon } => {
                    let (ra, rv, _) = rules::matmul_naive_epsilon(a, &v, z, r_out, epsilon)?;
                    vec![Some(ra), Some(fix(rv))]
                }
                Rule::MatmulValueOnly { epsilon } => {
                    let (rv, _) = rules::matmul_value_only(a, &v, z, r_out, epsilon)?;
                    vec![None, Some(fix(rv))]
                }
                _ => unreachable!("composite checked rule compatibility"),
            }
        }
        Op::Hadamard => match rule {
            Rule::Uniform => rules::uniform_product(2, r_out).into_iter().map(Some).collect(),
            Rule::HadamardGateConstant { epsilon } => {
                let (rv, _) = rules::hadamard_gate_constant(ins[0], ins[1], r_out, epsilon)?;
                vec![None, Some(rv)]
            }
            _ => unreachable!("composite checked rule compatibility"),
        },
        Op::TopK { selected, .. } => {
            let mut r = rules::identity_rule(r_out);
            for (v, &s) in r.data_mut().iter_mut().zip(selected) {
                if !s {
                    *v = 0.0;
                }
            }
            vec![Some(r)]
        }
        Op::Normalize { .. } => vec![Some(rules::norm_identity(r_out))],
        Op::Scale { .. } | Op::Override { .. } | Op::ScaleColumns { .. } | Op::Gelu | Op::Silu => {
            vec![Some(rules::identity_rule(r_out))]
        }
        Op::Input { .. }
        | Op::Param(_)
        | Op::SplitHeads { .. }
        | Op::MergeHeads
        | Op::RowSlice { .. }
        | Op::Column { .. }
        | Op::Broadcast { .. } => tape.vjp(id, r_out)?,
    };
    Ok(messages)
}
