//! One entry point for every attribution method.

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::composite::Composite;
use crate::error::{Error, Result};
use crate::model::{Arch, Embedded, ForwardOptions, Model};
use crate::relevance::{backprop_relevance, AttributionJson, RelevanceInit, RelevanceStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    AttnLrp,
    CpLrp,
    Ixg,
    Ig,
    SmoothGrad,
    Rollout,
    GradRollout,
    GradCam,
    AtMan,
    Random,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::AttnLrp,
        Method::CpLrp,
        Method::Ixg,
        Method::Ig,
        Method::SmoothGrad,
        Method::Rollout,
        Method::GradRollout,
        Method::GradCam,
        Method::AtMan,
        Method::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::AttnLrp => "attnlrp",
            Method::CpLrp => "cplrp",
            Method::Ixg => "ixg",
            Method::Ig => "ig",
            Method::SmoothGrad => "smoothgrad",
            Method::Rollout => "rollout",
            Method::GradRollout => "gradrollout",
            Method::GradCam => "gradcam",
            Method::AtMan => "atman",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s}")))
    }

    pub fn is_lrp(&self) -> bool {
        matches!(self, Method::AttnLrp | Method::CpLrp)
    }
}

/// Value placed at the target logit when a relevance pass starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Logit,
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOptions {
    /// Replaces the preset of an LRP method.
    pub composite: Option<Composite>,
    pub init: InitMode,
    pub ig_steps: usize,
    pub smooth_sigma: f64,
    pub smooth_samples: usize,
    /// Rollout outlier quantile; `1.0` keeps every entry.
    pub rollout_dt: f64,
    pub atman_p: f64,
    pub seed: u64,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            composite: None,
            init: InitMode::Logit,
            ig_steps: 20,
            smooth_sigma: 0.1,
            smooth_samples: 20,
            rollout_dt: 1.0,
            atman_p: 0.9,
            seed: 0,
        }
    }
}

/// Default composite of an LRP method for a model.
pub fn default_composite(method: Method, model: &Model) -> Result<Composite> {
    match (method, model.config.arch) {
        (Method::AttnLrp, Arch::Vit) => Ok(Composite::attnlrp_vit()),
        (Method::AttnLrp, _) => Ok(Composite::attnlrp_llm()),
        (Method::CpLrp, _) => Ok(Composite::cplrp()),
        (m, _) => Err(Error::InvalidArgument(format!("{} is not a relevance method", m.name()))),
    }
}

/// Relevance pass of an LRP method, started at the flat logit index `target`.
pub fn relevance_pass(
    model: &Model,
    emb: &Embedded,
    method: Method,
    target: usize,
    opts: &ExplainOptions,
) -> Result<RelevanceStore> {
    let composite = match &opts.composite {
        Some(c) => c.clone(),
        None => default_composite(method, model)?,
    };
    let (tape, logits) = model.forward_embedded(emb, &ForwardOptions::default())?;
    let value = match opts.init {
        InitMode::Logit => logits.data()[target],
        InitMode::One => 1.0,
    };
    let init = RelevanceInit {
        node: tape.output(),
        index: target,
        value,
    };
    backprop_relevance(&tape, &composite, init)
}

/// Per-position attribution of the logit at flat index `target`.
pub fn attribute(model: &Model, emb: &Embedded, method: Method, target: usize, opts: &ExplainOptions) -> Result<AttributionJson> {
    if method.is_lrp() {
        let store = relevance_pass(model, emb, method, target, opts)?;
        let mut json = store.to_json();
        json.method = method.name().to_string();
        return Ok(json);
    }
    let (tape, logits) = model.forward_embedded(emb, &ForwardOptions::default())?;
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!("target {target} outside {} logits", logits.len())));
    }
    let scores = match method {
        Method::Ixg => baselines::input_x_gradient(&tape, target)?,
        Method::Ig => baselines::integrated_gradients(model, emb, None, opts.ig_steps, target)?,
        Method::SmoothGrad => {
            baselines::smoothgrad(model, emb, opts.smooth_sigma, opts.smooth_samples, target, opts.seed)?
        }
        Method::Rollout => baselines::attention_rollout(model, &tape, opts.rollout_dt)?,
        Method::GradRollout => baselines::grad_attention_rollout(model, &tape, target, opts.rollout_dt)?,
        Method::GradCam => baselines::gradcam_attention(&tape, target)?,
        Method::AtMan => baselines::atman(model, emb, opts.atman_p, target)?.scores,
        Method::Random => baselines::random_relevance(emb.n_positions(), opts.seed),
        Method::AttnLrp | Method::CpLrp => unreachable!("handled above"),
    };
    let init = vec![RelevanceInit {
        node: tape.output(),
        index: target,
        value: logits.data()[target],
    }];
    Ok(AttributionJson::from_scores(method.name(), &scores, emb.tokens.as_deref(), init))
}
