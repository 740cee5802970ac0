//! Assignment of propagation rules to graph nodes by layer tag and op kind.

use std::path::Path;

use glob::Pattern;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rules::{Rule, DEFAULT_EPSILON};
use crate::tape::OpKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub layer_tag_glob: String,
    pub op_kind: Option<OpKind>,
    pub rule: Rule,
    pattern: Pattern,
}

impl Assignment {
    pub fn new(layer_tag_glob: &str, op_kind: Option<OpKind>, rule: Rule) -> Result<Self> {
        rule.validate()?;
        if let Some(kind) = op_kind {
            if !rule.applies_to(kind) {
                return Err(Error::Config(format!("rule {} cannot be applied to {} nodes", rule.name(), kind.name())));
            }
        }
        let pattern = Pattern::new(layer_tag_glob)
            .map_err(|e| Error::Config(format!("invalid layer tag glob {layer_tag_glob:?}: {e}")))?;
        Ok(Self {
            layer_tag_glob: layer_tag_glob.to_string(),
            op_kind,
            rule,
            pattern,
        })
    }

    fn matches(&self, tag: &str, kind: OpKind) -> bool {
        self.op_kind.is_none_or(|k| k == kind) && self.rule.applies_to(kind) && self.pattern.matches(tag)
    }
}

/// Ordered rule assignments; the first compatible match wins.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub name: String,
    assignments: Vec<Assignment>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentFile {
    layer_tag_glob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    op_kind: Option<String>,
    rule: String,
    #[serde(default)]
    params: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct CompositeFile {
    name: String,
    assignments: Vec<AssignmentFile>,
}

fn param(params: &Map<String, Value>, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::Config(format!("parameter {key} must be a number"))),
        None => default.ok_or_else(|| Error::Config(format!("missing parameter {key}"))),
    }
}

fn rule_from_parts(name: &str, params: &Map<String, Value>) -> Result<Rule> {
    let eps = || param(params, "epsilon", Some(DEFAULT_EPSILON));
    let rule = match name {
        "Epsilon" => Rule::Epsilon { epsilon: eps()? },
        "Gamma" => Rule::Gamma {
            gamma: param(params, "gamma", None)?,
            epsilon: eps()?,
        },
        "ZPlus" => Rule::ZPlus,
        "Identity" => Rule::Identity,
        "Uniform" => Rule::Uniform,
        "SoftmaxTaylor" => Rule::SoftmaxTaylor,
        "SoftmaxZPlus" => Rule::SoftmaxZPlus,
        "SoftmaxStopFlow" => Rule::SoftmaxStopFlow,
        "SoftmaxIdentityDiag" => Rule::SoftmaxIdentityDiag,
        "SoftmaxDistributeBiasDiag" => Rule::SoftmaxDistributeBiasDiag,
        "MatmulBilinear" => Rule::MatmulBilinear { epsilon: eps()? },
        "MatmulValueOnly" => Rule::MatmulValueOnly { epsilon: eps()? },
        "MatmulNaiveEpsilonDiag" => Rule::MatmulNaiveEpsilonDiag { epsilon: eps()? },
        "NormIdentity" => Rule::NormIdentity,
        "HadamardGateConstant" => Rule::HadamardGateConstant { epsilon: eps()? },
        other => return Err(Error::Config(format!("unknown rule {other}"))),
    };
    Ok(rule)
}

fn rule_params(rule: &Rule) -> Map<String, Value> {
    let mut m = Map::new();
    match *rule {
        Rule::Epsilon { epsilon }
        | Rule::MatmulBilinear { epsilon }
        | Rule::MatmulValueOnly { epsilon }
        | Rule::MatmulNaiveEpsilonDiag { epsilon }
        | Rule::HadamardGateConstant { epsilon } => {
            m.insert("epsilon".into(), epsilon.into());
        }
        Rule::Gamma { gamma, epsilon } => {
            m.insert("gamma".into(), gamma.into());
            m.insert("epsilon".into(), epsilon.into());
        }
        _ => {}
    }
    m
}

pub const PRESETS: [&str; 4] = ["attnlrp", "attnlrp-vit", "cplrp", "attnlrp-routing-cp"];

impl Composite {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            assignments: Vec::new(),
        }
    }

    /// Appends an assignment (lower priority than the existing ones).
    pub fn with(mut self, layer_tag_glob: &str, op_kind: Option<OpKind>, rule: Rule) -> Result<Self> {
        self.assignments.push(Assignment::new(layer_tag_glob, op_kind, rule)?);
        Ok(self)
    }

    /// Inserts an assignment ahead of the existing ones.
    pub fn overriding(mut self, layer_tag_glob: &str, op_kind: Option<OpKind>, rule: Rule) -> Result<Self> {
        self.assignments.insert(0, Assignment::new(layer_tag_glob, op_kind, rule)?);
        Ok(self)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn rule_for(&self, tag: &str, kind: OpKind) -> Result<Rule> {
        self.assignments
            .iter()
            .find(|a| a.matches(tag, kind))
            .map(|a| a.rule)
            .ok_or_else(|| {
                Error::Config(format!(
                    "composite {:?} has no rule for {} node {tag:?}",
                    self.name,
                    kind.name()
                ))
            })
    }

    fn defaults(self, softmax: Rule, matmul: Rule, hadamard: Rule) -> Self {
        let eps = Rule::epsilon();
        let table = [
            (OpKind::Linear, eps),
            (OpKind::Conv, eps),
            (OpKind::Add, eps),
            (OpKind::Softmax, softmax),
            (OpKind::MatMul, matmul),
            (OpKind::Hadamard, hadamard),
            (OpKind::Norm, Rule::NormIdentity),
            (OpKind::ElementwiseNonlin, Rule::Identity),
            (OpKind::Scale, Rule::Identity),
            (OpKind::TopKSelect, Rule::Identity),
        ];
        table.into_iter().fold(self, |c, (kind, rule)| {
            c.with("*", Some(kind), rule).expect("preset assignments are valid")
        })
    }

    /// ε on linear layers, Taylor softmax, bilinear matmul, uniform products, identity on normalization.
    pub fn attnlrp_llm() -> Self {
        Composite::new("attnlrp").defaults(
            Rule::SoftmaxTaylor,
            Rule::MatmulBilinear {
                epsilon: DEFAULT_EPSILON,
            },
            Rule::Uniform,
        )
    }

    /// Vision preset: γ on the patch embedding and on FFN/head linears, ε on attention projections.
    pub fn attnlrp_vit() -> Self {
        let base = Composite::new("attnlrp-vit")
            .with("patch_embed", Some(OpKind::Conv), Rule::gamma(0.25))
            .and_then(|c| c.with("*.attn.*", Some(OpKind::Linear), Rule::epsilon()))
            .and_then(|c| c.with("*.ffn.*", Some(OpKind::Linear), Rule::gamma(0.05)))
            .and_then(|c| c.with("head", Some(OpKind::Linear), Rule::gamma(0.05)))
            .expect("preset assignments are valid");
        base.defaults(
            Rule::SoftmaxTaylor,
            Rule::MatmulBilinear {
                epsilon: DEFAULT_EPSILON,
            },
            Rule::Uniform,
        )
    }

    /// Attention weights, routing weights and gates are treated as constants; relevance flows
    /// only through the value paths.
    pub fn cplrp() -> Self {
        let eps = DEFAULT_EPSILON;
        Composite::new("cplrp").defaults(
            Rule::SoftmaxStopFlow,
            Rule::MatmulValueOnly { epsilon: eps },
            Rule::HadamardGateConstant { epsilon: eps },
        )
    }

    /// AttnLRP everywhere except the expert mixing, where the routing weights are held constant.
    pub fn attnlrp_routing_cp() -> Self {
        Composite::attnlrp_llm()
            .overriding(
                "*.moe.mix*",
                Some(OpKind::Hadamard),
                Rule::HadamardGateConstant {
                    epsilon: DEFAULT_EPSILON,
                },
            )
            .expect("preset assignments are valid")
            .renamed("attnlrp-routing-cp")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "attnlrp" | "attnlrp-llm" => Ok(Composite::attnlrp_llm()),
            "attnlrp-vit" => Ok(Composite::attnlrp_vit()),
            "cplrp" | "cp-lrp" => Ok(Composite::cplrp()),
            "attnlrp-routing-cp" => Ok(Composite::attnlrp_routing_cp()),
            other => Err(Error::Config(format!(
                "unknown composite preset {other:?} (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CompositeFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid composite file: {e}")))?;
        let mut c = Composite::new(file.name);
        for a in file.assignments {
            let kind = match a.op_kind {
                Some(k) => Some(OpKind::parse(&k).ok_or_else(|| Error::Config(format!("unknown op kind {k}")))?),
                None => None,
            };
            c = c.with(&a.layer_tag_glob, kind, rule_from_parts(&a.rule, &a.params)?)?;
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        let file = CompositeFile {
            name: self.name.clone(),
            assignments: self
                .assignments
                .iter()
                .map(|a| AssignmentFile {
                    layer_tag_glob: a.layer_tag_glob.clone(),
                    op_kind: a.op_kind.map(|k| k.name().to_string()),
                    rule: a.rule.name().to_string(),
                    params: rule_params(&a.rule),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("composite serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Composite::from_json(&std::fs::read_to_string(path)?)
    }

    /// A preset name or a path to a JSON composite file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) || matches!(spec, "attnlrp-llm" | "cp-lrp") {
            Composite::preset(spec)
        } else if Path::new(spec).exists() {
            Composite::load(Path::new(spec))
        } else {
            Composite::preset(spec)
        }
    }
}
