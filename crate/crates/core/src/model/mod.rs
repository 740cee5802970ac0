//! Toy transformer family built from tape operations.
//!
//! Every forward pass records a [`Tape`]; the plain [`Model::forward`] is the
//! taped pass with the graph dropped, so both produce identical logits.

pub mod checkpoint;
pub mod tasks;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ActivationEdit, NodeId, Params, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Decoder,
    EncoderClassifier,
    Vit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Gelu,
    GatedSilu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Token vocabulary (decoder output size as well); unused by the ViT.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub ffn_kind: FfnKind,
    pub norm_kind: NormKind,
    pub moe: Option<MoeConfig>,
    pub max_seq: usize,
    /// Number of output classes for the classifier architectures.
    #[serde(default)]
    pub n_classes: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub image_size: usize,
    /// Additive bias terms on linear layers.
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// 4-layer gated-SiLU decoder with RMSNorm and no biases.
    pub fn decoder(vocab_size: usize, max_seq: usize) -> Self {
        Self {
            arch: Arch::Decoder,
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 64,
            ffn_kind: FfnKind::GatedSilu,
            norm_kind: NormKind::RmsNorm,
            moe: None,
            max_seq,
            n_classes: 0,
            patch_size: 0,
            image_size: 0,
            bias: false,
            norm_eps: 1e-6,
        }
    }

    pub fn encoder_classifier(vocab_size: usize, max_seq: usize, n_classes: usize) -> Self {
        Self {
            arch: Arch::EncoderClassifier,
            d_model: 32,
            n_layers: 2,
            d_ff: 64,
            ffn_kind: FfnKind::Gelu,
            norm_kind: NormKind::LayerNorm,
            n_classes,
            bias: true,
            ..Self::decoder(vocab_size, max_seq)
        }
    }

    pub fn vit(image_size: usize, patch_size: usize, n_classes: usize) -> Self {
        let n = (image_size / patch_size.max(1)).pow(2);
        Self {
            arch: Arch::Vit,
            vocab_size: 0,
            d_model: 32,
            n_layers: 2,
            d_ff: 64,
            ffn_kind: FfnKind::Gelu,
            norm_kind: NormKind::LayerNorm,
            max_seq: n,
            n_classes,
            patch_size,
            image_size,
            bias: true,
            ..Self::decoder(0, n)
        }
    }

    pub fn with_moe(mut self, n_experts: usize, top_k: usize) -> Self {
        self.moe = Some(MoeConfig { n_experts, top_k });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return fail("n_layers, d_ff and max_seq must be positive");
        }
        if let Some(m) = self.moe {
            if m.n_experts == 0 || m.top_k == 0 || m.top_k > m.n_experts {
                return fail("moe requires 1 ≤ top_k ≤ n_experts");
            }
        }
        match self.arch {
            Arch::Decoder if self.vocab_size == 0 => fail("decoder needs a vocabulary"),
            Arch::EncoderClassifier if self.vocab_size == 0 || self.n_classes == 0 => {
                fail("encoder classifier needs a vocabulary and classes")
            }
            Arch::Vit
                if self.patch_size == 0
                    || self.image_size % self.patch_size != 0
                    || self.n_classes == 0
                    || self.max_seq != (self.image_size / self.patch_size).pow(2) =>
            {
                fail("vit needs image_size divisible by patch_size, max_seq = patch count and classes")
            }
            _ if !(self.norm_eps > 0.0) => fail("norm_eps must be positive"),
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_outputs(&self) -> usize {
        match self.arch {
            Arch::Decoder => self.vocab_size,
            _ => self.n_classes,
        }
    }

    /// Width of one input row (embedding or flattened patch).
    pub fn input_width(&self) -> usize {
        match self.arch {
            Arch::Vit => self.patch_size * self.patch_size,
            _ => self.d_model,
        }
    }
}

/// Raw model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelInput {
    Tokens(Vec<usize>),
    /// Square grayscale image, `[image_size, image_size]`.
    Image(Tensor),
}

impl ModelInput {
    pub fn tokens(&self) -> Option<&[usize]> {
        match self {
            ModelInput::Tokens(t) => Some(t),
            ModelInput::Image(_) => None,
        }
    }
}

/// The input leaf of the graph: token embeddings or flattened patches, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub values: Tensor,
    pub tokens: Option<Vec<usize>>,
}

impl Embedded {
    pub fn n_positions(&self) -> usize {
        self.values.n_rows()
    }
}

/// A neuron override at the FFN activation of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronEdit {
    pub layer: usize,
    pub neuron: usize,
    pub edit: ActivationEdit,
}

/// Scales the pre-softmax attention scores of the given key positions in every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Suppression {
    pub positions: Vec<usize>,
    pub factor: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    pub edits: Vec<NeuronEdit>,
    pub suppression: Option<Suppression>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Patches of a square image in raster order, each flattened row-major.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 2 || image.shape()[0] != image.shape()[1] || patch == 0 || image.shape()[0] % patch != 0 {
        return Err(Error::Input(format!(
            "image of shape {:?} cannot be split into {patch}×{patch} patches",
            image.shape()
        )));
    }
    let side = image.shape()[0];
    let per_row = side / patch;
    let mut out = Vec::with_capacity(side * side);
    for pr in 0..per_row {
        for pc in 0..per_row {
            for r in 0..patch {
                for c in 0..patch {
                    out.push(image.get(&[pr * patch + r, pc * patch + c]));
                }
            }
        }
    }
    Tensor::new(vec![per_row * per_row, patch * patch], out)
}

impl Model {
    /// Randomly initialized model, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let c = &config;
        let d = c.d_model;
        let lin = |rng: &mut ChaCha8Rng, out: usize, inp: usize| normal(rng, &[out, inp], 1.0 / (inp as f64).sqrt());
        let resid_scale = 1.0 / (2.0 * c.n_layers as f64).sqrt();
        match c.arch {
            Arch::Vit => {
                p.insert("patch_embed.weight", lin(&mut rng, d, c.input_width()))?;
                p.insert("patch_embed.bias", Tensor::zeros(&[d]))?;
            }
            _ => {
                p.insert("tok_embed", normal(&mut rng, &[c.vocab_size, d], 1.0))?;
            }
        }
        p.insert("pos_embed", normal(&mut rng, &[c.max_seq, d], 0.1))?;
        let norm = |p: &mut Params, name: &str| -> Result<()> {
            p.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?;
            if c.norm_kind == NormKind::LayerNorm {
                p.insert(format!("{name}.beta"), Tensor::zeros(&[d]))?;
            }
            Ok(())
        };
        let linear = |p: &mut Params, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, scale: f64| -> Result<()> {
            p.insert(format!("{name}.weight"), lin(rng, out, inp).scale(scale))?;
            if c.bias {
                p.insert(format!("{name}.bias"), Tensor::zeros(&[out]))?;
            }
            Ok(())
        };
        let ffn = |p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str| -> Result<()> {
            if c.ffn_kind == FfnKind::GatedSilu {
                linear(p, rng, &format!("{prefix}.gate_proj"), c.d_ff, d, 1.0)?;
            }
            linear(p, rng, &format!("{prefix}.up_proj"), c.d_ff, d, 1.0)?;
            linear(p, rng, &format!("{prefix}.down_proj"), d, c.d_ff, resid_scale)
        };
        for l in 0..c.n_layers {
            let b = format!("blocks.{l}");
            norm(&mut p, &format!("{b}.ln1"))?;
            for proj in ["q_proj", "k_proj", "v_proj"] {
                linear(&mut p, &mut rng, &format!("{b}.attn.{proj}"), d, d, 1.0)?;
            }
            linear(&mut p, &mut rng, &format!("{b}.attn.o_proj"), d, d, resid_scale)?;
            norm(&mut p, &format!("{b}.ln2"))?;
            match c.moe {
                None => ffn(&mut p, &mut rng, &format!("{b}.ffn"))?,
                Some(m) => {
                    linear(&mut p, &mut rng, &format!("{b}.moe.router"), m.n_experts, d, 1.0)?;
                    for e in 0..m.n_experts {
                        ffn(&mut p, &mut rng, &format!("{b}.moe.expert{e}"))?;
                    }
                }
            }
        }
        norm(&mut p, "final_norm")?;
        let head = if c.arch == Arch::Decoder { "lm_head" } else { "head" };
        linear(&mut p, &mut rng, head, c.n_outputs(), d, 1.0)?;
        Ok(checkpoint::Checkpoint::quantized(Self { config, params: p }))
    }

    pub fn head_name(&self) -> &'static str {
        if self.config.arch == Arch::Decoder {
            "lm_head"
        } else {
            "head"
        }
    }

    /// Input leaf values for `input`, validating vocabulary, length and image shape.
    pub fn embed(&self, input: &ModelInput) -> Result<Embedded> {
        let c = &self.config;
        match (c.arch, input) {
            (Arch::Vit, ModelInput::Image(img)) => {
                if img.shape() != [c.image_size, c.image_size] {
                    return Err(Error::Input(format!(
                        "expected a {0}×{0} image, got {1:?}",
                        c.image_size,
                        img.shape()
                    )));
                }
                Ok(Embedded {
                    values: patchify(img, c.patch_size)?,
                    tokens: None,
                })
            }
            (Arch::Vit, _) => Err(Error::Input("vit models take image input".into())),
            (_, ModelInput::Tokens(tokens)) => {
                if tokens.is_empty() {
                    return Err(Error::Input("empty context".into()));
                }
                if tokens.len() > c.max_seq {
                    return Err(Error::Input(format!("sequence of {} exceeds max_seq {}", tokens.len(), c.max_seq)));
                }
                if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
                    return Err(Error::Input(format!("token {t} outside vocabulary of {}", c.vocab_size)));
                }
                let table = self.params.get("tok_embed")?;
                let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| table.row(t).to_vec()).collect();
                Ok(Embedded {
                    values: Tensor::from_rows(&rows),
                    tokens: Some(tokens.clone()),
                })
            }
            (_, ModelInput::Image(_)) => Err(Error::Input("token models take token input".into())),
        }
    }

    pub fn forward(&self, input: &ModelInput) -> Result<Tensor> {
        Ok(self.forward_taped(input)?.1)
    }

    pub fn forward_taped(&self, input: &ModelInput) -> Result<(Tape<'_>, Tensor)> {
        let emb = self.embed(input)?;
        self.forward_embedded(&emb, &ForwardOptions::default())
    }

    /// Forward pass from input-leaf values; the single code path behind every forward variant.
    pub fn forward_embedded(&self, emb: &Embedded, opts: &ForwardOptions) -> Result<(Tape<'_>, Tensor)> {
        let tape = self.record(emb, opts)?;
        let logits = tape.value(tape.output()).clone();
        Ok((tape, logits))
    }

    fn norm(&self, t: &mut Tape, x: NodeId, name: &str) -> Result<NodeId> {
        let c = &self.config;
        let x = if c.norm_kind == NormKind::LayerNorm {
            t.center_mean(x, &format!("{name}.center"))?
        } else {
            x
        };
        let n = t.normalize(x, c.norm_eps, &format!("{name}.norm"))?;
        let g = t.param_named(&format!("{name}.gamma"))?;
        let b = match c.norm_kind {
            NormKind::LayerNorm => Some(t.param_named(&format!("{name}.beta"))?),
            NormKind::RmsNorm => None,
        };
        t.affine(n, g, b, &format!("{name}.affine"))
    }

    fn linear(&self, t: &mut Tape, x: NodeId, name: &str) -> Result<NodeId> {
        let w = t.param_named(&format!("{name}.weight"))?;
        let b = if self.config.bias {
            Some(t.param_named(&format!("{name}.bias"))?)
        } else {
            None
        };
        t.linear(x, w, b, name)
    }

    fn attention(&self, t: &mut Tape, x: NodeId, prefix: &str, opts: &ForwardOptions) -> Result<NodeId> {
        let c = &self.config;
        let q = self.linear(t, x, &format!("{prefix}.q_proj"))?;
        let k = self.linear(t, x, &format!("{prefix}.k_proj"))?;
        let v = self.linear(t, x, &format!("{prefix}.v_proj"))?;
        let qh = t.split_heads(q, c.n_heads, &format!("{prefix}.q_heads"))?;
        let kh = t.split_heads(k, c.n_heads, &format!("{prefix}.k_heads"))?;
        let vh = t.split_heads(v, c.n_heads, &format!("{prefix}.v_heads"))?;
        let scores = t.matmul(qh, kh, true, &format!("{prefix}.qk"))?;
        let mut scaled = t.scale(scores, 1.0 / (c.head_dim() as f64).sqrt(), &format!("{prefix}.scale"));
        if let Some(s) = &opts.suppression {
            scaled = t.scale_columns(scaled, s.positions.clone(), s.factor, &format!("{prefix}.suppress"))?;
        }
        let s = t.value(scaled).shape()[1];
        let mask = (c.arch == Arch::Decoder)
            .then(|| (0..c.n_heads * s * s).map(|i| i % s <= (i / s) % s).collect::<Vec<bool>>());
        let a = t.softmax(scaled, 1.0, mask, &format!("{prefix}.softmax"))?;
        let o = t.matmul(a, vh, false, &format!("{prefix}.av"))?;
        let m = t.merge_heads(o, &format!("{prefix}.merge"))?;
        self.linear(t, m, &format!("{prefix}.o_proj"))
    }

    fn ffn(&self, t: &mut Tape, x: NodeId, prefix: &str, edits: &[(usize, ActivationEdit)]) -> Result<NodeId> {
        let mut act = match self.config.ffn_kind {
            FfnKind::Gelu => {
                let up = self.linear(t, x, &format!("{prefix}.up_proj"))?;
                t.gelu(up, &format!("{prefix}.act"))
            }
            FfnKind::GatedSilu => {
                let gate = self.linear(t, x, &format!("{prefix}.gate_proj"))?;
                let s = t.silu(gate, &format!("{prefix}.silu"));
                let up = self.linear(t, x, &format!("{prefix}.up_proj"))?;
                t.hadamard(s, up, &format!("{prefix}.act"))?
            }
        };
        if !edits.is_empty() {
            act = t.override_columns(act, edits.to_vec(), &format!("{prefix}.act_edit"))?;
        }
        self.linear(t, act, &format!("{prefix}.down_proj"))
    }

    fn moe(&self, t: &mut Tape, x: NodeId, prefix: &str, moe: MoeConfig) -> Result<NodeId> {
        let router = self.linear(t, x, &format!("{prefix}.router"))?;
        let probs = t.softmax(router, 1.0, None, &format!("{prefix}.router_softmax"))?;
        let sel = t.top_k(probs, moe.top_k, &format!("{prefix}.topk"))?;
        let mut total: Option<NodeId> = None;
        for e in 0..moe.n_experts {
            let out = self.ffn(t, x, &format!("{prefix}.expert{e}"), &[])?;
            let w = t.column(sel, e, &format!("{prefix}.weight{e}"))?;
            let wb = t.broadcast(w, self.config.d_model, &format!("{prefix}.weight{e}.broadcast"))?;
            let mixed = t.hadamard(wb, out, &format!("{prefix}.mix{e}"))?;
            total = Some(match total {
                None => mixed,
                Some(acc) => t.add(acc, mixed, &format!("{prefix}.sum{e}"))?,
            });
        }
        Ok(total.expect("at least one expert"))
    }

    fn record(&self, emb: &Embedded, opts: &ForwardOptions) -> Result<Tape<'_>> {
        let c = &self.config;
        let s = emb.n_positions();
        if s == 0 {
            return Err(Error::Input("empty context".into()));
        }
        if s > c.max_seq {
            return Err(Error::Input(format!("sequence of {s} exceeds max_seq {}", c.max_seq)));
        }
        if emb.values.rank() != 2 || emb.values.last_dim() != c.input_width() {
            return Err(Error::Input(format!(
                "input rows must have width {}, got shape {:?}",
                c.input_width(),
                emb.values.shape()
            )));
        }
        for e in &opts.edits {
            if e.layer >= c.n_layers || e.neuron >= c.d_ff {
                return Err(Error::InvalidArgument(format!(
                    "neuron edit ({}, {}) outside {} layers × {} neurons",
                    e.layer, e.neuron, c.n_layers, c.d_ff
                )));
            }
            if c.moe.is_some() {
                return Err(Error::InvalidArgument("neuron edits target dense FFN layers".into()));
            }
        }
        if let Some(sup) = &opts.suppression {
            if let Some(&p) = sup.positions.iter().find(|&&p| p >= s) {
                return Err(Error::InvalidArgument(format!("suppressed position {p} outside sequence of {s}")));
            }
        }

        let mut t = Tape::new(&self.params);
        let table = (c.arch != Arch::Vit).then(|| self.params.id("tok_embed")).transpose()?;
        let x = t.input(emb.values.clone(), emb.tokens.clone(), table, "input");
        let x = if c.arch == Arch::Vit {
            let w = t.param_named("patch_embed.weight")?;
            let b = if c.bias { Some(t.param_named("patch_embed.bias")?) } else { None };
            t.patch_conv(x, w, b, "patch_embed")?
        } else {
            x
        };
        let pos = t.param_named("pos_embed")?;
        let pos = t.row_slice(pos, 0, s, "pos_embed.slice")?;
        let mut h = t.add(x, pos, "embed")?;
        for l in 0..c.n_layers {
            let b = format!("blocks.{l}");
            let a = self.norm(&mut t, h, &format!("{b}.ln1"))?;
            let attn = self.attention(&mut t, a, &format!("{b}.attn"), opts)?;
            h = t.add(h, attn, &format!("{b}.attn.residual"))?;
            let f = self.norm(&mut t, h, &format!("{b}.ln2"))?;
            let out = match c.moe {
                None => {
                    let edits: Vec<(usize, ActivationEdit)> =
                        opts.edits.iter().filter(|e| e.layer == l).map(|e| (e.neuron, e.edit)).collect();
                    self.ffn(&mut t, f, &format!("{b}.ffn"), &edits)?
                }
                Some(m) => self.moe(&mut t, f, &format!("{b}.moe"), m)?,
            };
            h = t.add(h, out, &format!("{b}.ffn.residual"))?;
        }
        let logits = match c.arch {
            Arch::Decoder => {
                let hf = self.norm(&mut t, h, "final_norm")?;
                self.linear(&mut t, hf, "lm_head")?
            }
            _ => {
                let hf = self.norm(&mut t, h, "final_norm")?;
                let pooled = t.mean_pool(hf, "pool")?;
                self.linear(&mut t, pooled, "head")?
            }
        };
        t.set_output(logits);
        Ok(t)
    }

    /// Flat logit index of `class` at the explained position (the last row).
    pub fn target_index(&self, logits: &Tensor, class: usize) -> usize {
        (logits.n_rows() - 1) * logits.last_dim() + class
    }

    /// Arg-max class of the last logit row (ties to the lower index).
    pub fn predict(&self, logits: &Tensor) -> usize {
        argmax(logits.row(logits.n_rows() - 1))
    }

    /// Tag of the FFN activation node of a dense layer.
    pub fn neuron_tag(&self, layer: usize) -> String {
        format!("blocks.{layer}.ffn.act")
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;

    fn tiny_decoder() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            ..ModelConfig::decoder(10, 8)
        }
    }

    #[test]
    fn forward_is_finite_and_matches_tape() {
        for config in [
            tiny_decoder(),
            ModelConfig {
                bias: true,
                norm_kind: NormKind::LayerNorm,
                ffn_kind: FfnKind::Gelu,
                ..tiny_decoder()
            },
            tiny_decoder().with_moe(2, 1),
        ] {
            let m = Model::init(config, 3).unwrap();
            let input = ModelInput::Tokens(vec![1, 4, 2, 9]);
            let logits = m.forward(&input).unwrap();
            assert_eq!(logits.shape(), &[4, 10]);
            assert!(logits.all_finite());
            let (tape, taped) = m.forward_taped(&input).unwrap();
            assert_eq!(logits, taped);
            assert_eq!(tape.value(tape.output()), &logits);
        }
    }

    #[test]
    fn input_validation() {
        let m = Model::init(tiny_decoder(), 0).unwrap();
        assert!(matches!(m.forward(&ModelInput::Tokens(vec![])), Err(Error::Input(_))));
        assert!(matches!(m.forward(&ModelInput::Tokens(vec![10])), Err(Error::Input(_))));
        assert!(matches!(m.forward(&ModelInput::Tokens(vec![0; 9])), Err(Error::Input(_))));
        let bad = ModelConfig { n_heads: 3, ..tiny_decoder() };
        assert!(Model::init(bad, 0).is_err());
        assert!(Model::init(tiny_decoder().with_moe(1, 2), 0).is_err());
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let m = Model::init(tiny_decoder(), 1).unwrap();
        let a = m.forward(&ModelInput::Tokens(vec![1, 2, 3, 4, 5])).unwrap();
        let b = m.forward(&ModelInput::Tokens(vec![1, 2, 3, 7, 0])).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn node_count_matches_block_diagram() {
        let m = Model::init(tiny_decoder(), 0).unwrap();
        let (tape, _) = m.forward_taped(&ModelInput::Tokens(vec![1, 2, 3])).unwrap();
        // input, pos param, slice, add
        let embed = 4;
        // rms norm: normalize, gamma, affine
        let norm = 3;
        // q/k/v/o: weight + linear each; 3 splits, qk, scale, softmax, av, merge
        let attn = 4 * 2 + 3 + 5;
        // gate, up, down: weight + linear; silu, hadamard
        let ffn = 3 * 2 + 2;
        let block = norm + attn + 1 + norm + ffn + 1;
        let head = norm + 2;
        assert_eq!(tape.len(), embed + 2 * block + head);
    }

    #[test]
    fn single_head_attention_matches_hand_computation() {
        let config = ModelConfig {
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            d_ff: 1,
            ..ModelConfig::decoder(2, 2)
        };
        let mut m = Model::init(config, 0).unwrap();
        let set = |m: &mut Model, name: &str, t: Tensor| {
            let id = m.params.id(name).unwrap();
            *m.params.tensor_mut(id) = t;
        };
        let eye = Tensor::eye(2);
        set(&mut m, "tok_embed", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]));
        set(&mut m, "pos_embed", Tensor::zeros(&[2, 2]));
        for name in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            set(&mut m, &format!("blocks.0.attn.{name}.weight"), eye.clone());
        }
        for name in ["gate_proj", "up_proj"] {
            set(&mut m, &format!("blocks.0.ffn.{name}.weight"), Tensor::zeros(&[1, 2]));
        }
        set(&mut m, "lm_head.weight", eye.clone());
        let (tape, _) = m.forward_taped(&ModelInput::Tokens(vec![0, 1])).unwrap();
        let attn_out = tape.value(tape.find("blocks.0.attn.o_proj").unwrap());

        let rms = |v: [f64; 2]| {
            let r = ((v[0] * v[0] + v[1] * v[1]) / 2.0 + 1e-6).sqrt();
            [v[0] / r, v[1] / r]
        };
        let (a, b) = (rms([1.0, 0.0]), rms([0.5, 2.0]));
        // the first query only sees itself; the second mixes both keys
        let s01 = (b[0] * a[0] + b[1] * a[1]) / 2f64.sqrt();
        let s11 = (b[0] * b[0] + b[1] * b[1]) / 2f64.sqrt();
        let w0 = 1.0 / (1.0 + (s11 - s01).exp());
        let expect = [a[0], a[1], w0 * a[0] + (1.0 - w0) * b[0], w0 * a[1] + (1.0 - w0) * b[1]];
        for (x, y) in attn_out.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn single_expert_moe_equals_dense_ffn() {
        let dense = Model::init(tiny_decoder(), 4).unwrap();
        let mut moe = Model::init(tiny_decoder().with_moe(1, 1), 4).unwrap();
        for (name, t) in dense.params.iter() {
            let target = name.replace(".ffn.", ".moe.expert0.");
            let id = moe.params.id(&target).unwrap();
            *moe.params.tensor_mut(id) = t.clone();
        }
        let input = ModelInput::Tokens(vec![3, 1, 4, 1, 5]);
        let a = dense.forward(&input).unwrap();
        let b = moe.forward(&input).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn patchify_matches_per_patch_oracle() {
        let config = ModelConfig::vit(8, 4, 3);
        let m = Model::init(config, 2).unwrap();
        let img = Tensor::new(vec![8, 8], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (tape, logits) = m.forward_taped(&ModelInput::Image(img.clone())).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
        let node = tape.find("patch_embed").unwrap();
        assert_eq!(tape.node(node).kind, crate::tape::OpKind::Conv);
        let embedded = tape.value(node);
        let w = m.params.get("patch_embed.weight").unwrap();
        let b = m.params.get("patch_embed.bias").unwrap();
        for pr in 0..2 {
            for pc in 0..2 {
                let patch: Vec<f64> =
                    (0..16).map(|k| img.get(&[pr * 4 + k / 4, pc * 4 + k % 4])).collect();
                let col = Tensor::new(vec![16, 1], patch).unwrap();
                let direct = tensor::matmul(w, &col).unwrap();
                let row = embedded.row(pr * 2 + pc);
                for j in 0..w.shape()[0] {
                    assert!((direct.data()[j] + b.data()[j] - row[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_edit_set_is_bit_identical() {
        let m = Model::init(tiny_decoder(), 5).unwrap();
        let input = ModelInput::Tokens(vec![2, 7, 1]);
        let emb = m.embed(&input).unwrap();
        let (_, edited) = m.forward_embedded(&emb, &ForwardOptions::default()).unwrap();
        assert_eq!(edited, m.forward(&input).unwrap());
    }
}
