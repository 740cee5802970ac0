//! Relevance propagation rules.
//!
//! Every kernel returns the relevance handed to its inputs together with the
//! amount absorbed by bias terms and stabilizers, so that
//! `Σ R_in + absorbed == Σ R_out` holds as a ledger identity for every rule,
//! including the diagnostic ones that are known to misbehave.
//!
//! Linear-kind rules take weights stored `[out, in]` and act on the last axis.
//! Softmax rules act on the last axis and accept an optional participation mask
//! (causal attention, top-k routing).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::OpKind;
use crate::tensor::{self, same_shape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign(z: f64) -> f64 {
    if z < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[inline]
fn stabilize(z: f64, eps: f64) -> f64 {
    z + eps * sign(z)
}

fn ledger(r_out: &Tensor, r_in: &[&Tensor]) -> f64 {
    r_out.sum() - r_in.iter().map(|t| t.sum()).sum::<f64>()
}

/// A relevance propagation rule together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "params")]
pub enum Rule {
    Epsilon { epsilon: f64 },
    Gamma { gamma: f64, epsilon: f64 },
    ZPlus,
    Identity,
    /// Equal split across the factors of an elementwise product.
    Uniform,
    SoftmaxTaylor,
    SoftmaxZPlus,
    /// Stops relevance at the softmax (everything is absorbed).
    SoftmaxStopFlow,
    /// Diagnostic: identity through the softmax; numerically unstable downstream.
    SoftmaxIdentityDiag,
    /// Diagnostic: linearization bias spread uniformly over the inputs.
    SoftmaxDistributeBiasDiag,
    MatmulBilinear { epsilon: f64 },
    /// The left operand (attention weights) is treated as a constant.
    MatmulValueOnly { epsilon: f64 },
    /// Diagnostic: ε-rule on both operands without the uniform split; doubles the layer sum.
    MatmulNaiveEpsilonDiag { epsilon: f64 },
    NormIdentity,
    /// Gated product with the first operand (the non-linearity branch) held constant.
    HadamardGateConstant { epsilon: f64 },
}

impl Rule {
    pub fn epsilon() -> Self {
        Rule::Epsilon {
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn gamma(gamma: f64) -> Self {
        Rule::Gamma {
            gamma,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Epsilon { .. } => "Epsilon",
            Rule::Gamma { .. } => "Gamma",
            Rule::ZPlus => "ZPlus",
            Rule::Identity => "Identity",
            Rule::Uniform => "Uniform",
            Rule::SoftmaxTaylor => "SoftmaxTaylor",
            Rule::SoftmaxZPlus => "SoftmaxZPlus",
            Rule::SoftmaxStopFlow => "SoftmaxStopFlow",
            Rule::SoftmaxIdentityDiag => "SoftmaxIdentityDiag",
            Rule::SoftmaxDistributeBiasDiag => "SoftmaxDistributeBiasDiag",
            Rule::MatmulBilinear { .. } => "MatmulBilinear",
            Rule::MatmulValueOnly { .. } => "MatmulValueOnly",
            Rule::MatmulNaiveEpsilonDiag { .. } => "MatmulNaiveEpsilonDiag",
            Rule::NormIdentity => "NormIdentity",
            Rule::HadamardGateConstant { .. } => "HadamardGateConstant",
        }
    }

    /// True for rules kept only to reproduce known failure modes.
    pub fn is_diagnostic(&self) -> bool {
        matches!(
            self,
            Rule::SoftmaxIdentityDiag | Rule::SoftmaxDistributeBiasDiag | Rule::MatmulNaiveEpsilonDiag { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let eps_ok = |e: f64| e > 0.0 && e.is_finite();
        let ok = match *self {
            Rule::Epsilon { epsilon }
            | Rule::MatmulBilinear { epsilon }
            | Rule::MatmulValueOnly { epsilon }
            | Rule::MatmulNaiveEpsilonDiag { epsilon }
            | Rule::HadamardGateConstant { epsilon } => eps_ok(epsilon),
            Rule::Gamma { gamma, epsilon } => eps_ok(epsilon) && gamma >= 0.0 && !gamma.is_nan(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid parameters for rule {self:?}: need ε > 0 and γ ≥ 0")))
        }
    }

    /// Whether the rule can be applied to nodes of `kind`.
    pub fn applies_to(&self, kind: OpKind) -> bool {
        use OpKind::*;
        match self {
            Rule::Epsilon { .. } | Rule::Gamma { .. } | Rule::ZPlus => matches!(kind, Linear | Conv | Add),
            Rule::Identity => matches!(kind, ElementwiseNonlin | Scale | TopKSelect | Norm),
            Rule::Uniform | Rule::HadamardGateConstant { .. } => kind == Hadamard,
            Rule::SoftmaxTaylor
            | Rule::SoftmaxZPlus
            | Rule::SoftmaxStopFlow
            | Rule::SoftmaxIdentityDiag
            | Rule::SoftmaxDistributeBiasDiag => kind == Softmax,
            Rule::MatmulBilinear { .. } | Rule::MatmulValueOnly { .. } | Rule::MatmulNaiveEpsilonDiag { .. } => {
                kind == MatMul
            }
            Rule::NormIdentity => kind == Norm,
        }
    }
}

/// Parameters of the linear-kind rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LinearRule {
    Epsilon(f64),
    Gamma(f64, f64),
    ZPlus,
}

impl LinearRule {
    pub(crate) fn from_rule(rule: &Rule) -> Option<Self> {
        match *rule {
            Rule::Epsilon { epsilon } => Some(LinearRule::Epsilon(epsilon)),
            Rule::Gamma { gamma, epsilon } => Some(LinearRule::Gamma(gamma, epsilon)),
            Rule::ZPlus => Some(LinearRule::ZPlus),
            _ => None,
        }
    }
}

/// Linear-kind kernel over rows: `x [rows, in]`, `w [out, in]`, saved output `z [rows, out]`.
pub(crate) fn linear_kernel(x: &[f64], w: &[f64], z: &[f64], r_out: &[f64], in_dim: usize, rule: LinearRule) -> Vec<f64> {
    let out_dim = if in_dim == 0 { 0 } else { w.len() / in_dim };
    let rows = if in_dim == 0 { 0 } else { x.len() / in_dim };
    let mut r_in = vec![0.0; x.len()];
    let mut coef = vec![0.0; out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let zr = &z[r * out_dim..(r + 1) * out_dim];
        let rr = &r_out[r * out_dim..(r + 1) * out_dim];
        let ri = &mut r_in[r * in_dim..(r + 1) * in_dim];
        match rule {
            LinearRule::Epsilon(eps) => {
                for j in 0..out_dim {
                    coef[j] = rr[j] / stabilize(zr[j], eps);
                }
                // R_in[i] = x_i Σ_j W_ji c_j
                let mut acc = vec![0.0; in_dim];
                for (j, &c) in coef.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for (a, &wv) in acc.iter_mut().zip(&w[j * in_dim..(j + 1) * in_dim]) {
                        *a += wv * c;
                    }
                }
                for ((o, a), xv) in ri.iter_mut().zip(&acc).zip(xr) {
                    *o += a * xv;
                }
            }
            LinearRule::Gamma(gamma, eps) => {
                for j in 0..out_dim {
                    if rr[j] == 0.0 {
                        continue;
                    }
                    let wr = &w[j * in_dim..(j + 1) * in_dim];
                    let positive = zr[j] > 0.0;
                    let part = |c: f64| if positive { c.max(0.0) } else { c.min(0.0) };
                    let mut p = 0.0;
                    for (wv, xv) in wr.iter().zip(xr) {
                        p += part(wv * xv);
                    }
                    let c = rr[j] / stabilize(zr[j] + gamma * p, eps);
                    for ((o, wv), xv) in ri.iter_mut().zip(wr).zip(xr) {
                        let zij = wv * xv;
                        *o += (zij + gamma * part(zij)) * c;
                    }
                }
            }
            LinearRule::ZPlus => {
                for j in 0..out_dim {
                    if rr[j] == 0.0 {
                        continue;
                    }
                    let wr = &w[j * in_dim..(j + 1) * in_dim];
                    let p: f64 = wr.iter().zip(xr).map(|(wv, xv)| (wv * xv).max(0.0)).sum();
                    if p == 0.0 {
                        continue;
                    }
                    let c = rr[j] / p;
                    for ((o, wv), xv) in ri.iter_mut().zip(wr).zip(xr) {
                        *o += (wv * xv).max(0.0) * c;
                    }
                }
            }
        }
    }
    r_in
}

/// Linear-kind rule for sum nodes whose output element `e` is `Σ_k contribs[k][e] + bias[e]`.
///
/// Returns one relevance tensor per contribution; whatever the bias (and ε) takes is absorbed.
pub(crate) fn sum_kernel(contribs: &[&[f64]], z: &[f64], r_out: &[f64], rule: LinearRule) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = contribs.iter().map(|c| vec![0.0; c.len()]).collect();
    for e in 0..z.len() {
        let r = r_out[e];
        if r == 0.0 {
            continue;
        }
        match rule {
            LinearRule::Epsilon(eps) => {
                let c = r / stabilize(z[e], eps);
                for (k, cs) in contribs.iter().enumerate() {
                    out[k][e] = cs[e] * c;
                }
            }
            LinearRule::Gamma(gamma, eps) => {
                let positive = z[e] > 0.0;
                let part = |c: f64| if positive { c.max(0.0) } else { c.min(0.0) };
                let p: f64 = contribs.iter().map(|cs| part(cs[e])).sum();
                let c = r / stabilize(z[e] + gamma * p, eps);
                for (k, cs) in contribs.iter().enumerate() {
                    out[k][e] = (cs[e] + gamma * part(cs[e])) * c;
                }
            }
            LinearRule::ZPlus => {
                let p: f64 = contribs.iter().map(|cs| cs[e].max(0.0)).sum();
                if p > 0.0 {
                    for (k, cs) in contribs.iter().enumerate() {
                        out[k][e] = cs[e].max(0.0) * r / p;
                    }
                }
            }
        }
    }
    out
}

fn linear_rule(w: &Tensor, b: Option<&Tensor>, x: &Tensor, r_out: &Tensor, rule: LinearRule) -> Result<(Tensor, f64)> {
    let z = tensor::linear(x, w, b)?;
    same_shape("linear relevance", &z, r_out)?;
    let r_in = linear_kernel(x.data(), w.data(), z.data(), r_out.data(), x.last_dim(), rule);
    let r_in = Tensor::new(x.shape().to_vec(), r_in)?;
    let absorbed = ledger(r_out, &[&r_in]);
    Ok((r_in, absorbed))
}

/// ε-rule for `z = x·Wᵀ + b`: `R_in[i] = Σ_j W_ji x_i R_j / (z_j + ε·sign(z_j))`.
pub fn epsilon_linear(w: &Tensor, b: Option<&Tensor>, x: &Tensor, r_out: &Tensor, eps: f64) -> Result<(Tensor, f64)> {
    Rule::Epsilon { epsilon: eps }.validate()?;
    linear_rule(w, b, x, r_out, LinearRule::Epsilon(eps))
}

/// Generalized γ-rule: counteracting contributions are damped relative to the
/// ones sharing the sign of `z_j`. `γ = 0` is the ε-rule.
pub fn gamma_linear(
    w: &Tensor,
    b: Option<&Tensor>,
    x: &Tensor,
    r_out: &Tensor,
    gamma: f64,
    eps: f64,
) -> Result<(Tensor, f64)> {
    Rule::Gamma { gamma, epsilon: eps }.validate()?;
    linear_rule(w, b, x, r_out, LinearRule::Gamma(gamma, eps))
}

/// z⁺-rule; relevance of outputs without any positive contribution is absorbed.
pub fn zplus_linear(w: &Tensor, x: &Tensor, r_out: &Tensor) -> Result<(Tensor, f64)> {
    linear_rule(w, None, x, r_out, LinearRule::ZPlus)
}

pub fn identity_rule(r_out: &Tensor) -> Tensor {
    r_out.clone()
}

pub fn norm_identity(r_out: &Tensor) -> Tensor {
    r_out.clone()
}

fn check_softmax(x: &Tensor, s: &Tensor, r_out: &Tensor, mask: Option<&[bool]>) -> Result<()> {
    same_shape("softmax relevance", x, s)?;
    same_shape("softmax relevance", x, r_out)?;
    if mask.is_some_and(|m| m.len() != x.len()) {
        return Err(Error::InvalidArgument("softmax mask length mismatch".into()));
    }
    Ok(())
}

/// Taylor rule at the input: `R_in[i] = (x_i/T)·(R_i − s_i Σ_j R_j)`.
/// The linearization's hidden bias absorbs the rest.
pub fn softmax_taylor(x: &Tensor, s: &Tensor, r_out: &Tensor, temperature: f64) -> Result<(Tensor, f64)> {
    softmax_taylor_masked(x, s, r_out, temperature, None)
}

pub(crate) fn softmax_taylor_masked(
    x: &Tensor,
    s: &Tensor,
    r_out: &Tensor,
    temperature: f64,
    mask: Option<&[bool]>,
) -> Result<(Tensor, f64)> {
    check_softmax(x, s, r_out, mask)?;
    let d = x.last_dim();
    let mut r_in = Tensor::zeros(x.shape());
    for r in 0..x.n_rows() {
        let keep = |k: usize| mask.map_or(true, |m| m[r * d + k]);
        let (xr, sr, rr) = (x.row(r), s.row(r), r_out.row(r));
        let total: f64 = (0..d).filter(|&k| keep(k)).map(|k| rr[k]).sum();
        let out = r_in.row_mut(r);
        for i in 0..d {
            if keep(i) {
                out[i] = xr[i] / temperature * (rr[i] - sr[i] * total);
            }
        }
    }
    let absorbed = ledger(r_out, &[&r_in]);
    Ok((r_in, absorbed))
}

/// z⁺-rule applied to the softmax linearization, including the positive part of its bias.
pub fn softmax_zplus(x: &Tensor, s: &Tensor, r_out: &Tensor, temperature: f64) -> Result<(Tensor, f64)> {
    softmax_zplus_masked(x, s, r_out, temperature, None)
}

pub(crate) fn softmax_zplus_masked(
    x: &Tensor,
    s: &Tensor,
    r_out: &Tensor,
    temperature: f64,
    mask: Option<&[bool]>,
) -> Result<(Tensor, f64)> {
    check_softmax(x, s, r_out, mask)?;
    let d = x.last_dim();
    let mut r_in = Tensor::zeros(x.shape());
    let mut contrib = vec![0.0; d];
    for r in 0..x.n_rows() {
        let keep = |k: usize| mask.map_or(true, |m| m[r * d + k]);
        let (xr, sr, rr) = (x.row(r), s.row(r), r_out.row(r));
        let out = r_in.row_mut(r);
        for j in 0..d {
            if !keep(j) || rr[j] == 0.0 {
                continue;
            }
            // J_jk x_k with J_jk = s_j (δ_jk − s_k) / T
            let mut linear = 0.0;
            let mut positive = 0.0;
            for k in 0..d {
                contrib[k] = if keep(k) {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    sr[j] * (delta - sr[k]) / temperature * xr[k]
                } else {
                    0.0
                };
                linear += contrib[k];
                positive += contrib[k].max(0.0);
            }
            let bias = sr[j] - linear;
            let denom = positive + bias.max(0.0);
            if denom == 0.0 {
                continue;
            }
            for k in 0..d {
                out[k] += contrib[k].max(0.0) * rr[j] / denom;
            }
        }
    }
    let absorbed = ledger(r_out, &[&r_in]);
    Ok((r_in, absorbed))
}

/// Bias-handling variants kept for reproducing their failure modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftmaxDiagnostic {
    Identity,
    DistributeBias,
    StopFlow,
}

pub fn softmax_diagnostic(
    x: &Tensor,
    s: &Tensor,
    r_out: &Tensor,
    temperature: f64,
    mode: SoftmaxDiagnostic,
) -> Result<(Tensor, f64)> {
    softmax_diagnostic_masked(x, s, r_out, temperature, mode, None)
}

pub(crate) fn softmax_diagnostic_masked(
    x: &Tensor,
    s: &Tensor,
    r_out: &Tensor,
    temperature: f64,
    mode: SoftmaxDiagnostic,
    mask: Option<&[bool]>,
) -> Result<(Tensor, f64)> {
    check_softmax(x, s, r_out, mask)?;
    let d = x.last_dim();
    let r_in = match mode {
        SoftmaxDiagnostic::StopFlow => Tensor::zeros(x.shape()),
        SoftmaxDiagnostic::Identity => {
            let mut t = r_out.clone();
            if let Some(m) = mask {
                for (v, &k) in t.data_mut().iter_mut().zip(m) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
            t
        }
        SoftmaxDiagnostic::DistributeBias => {
            let mut t = Tensor::zeros(x.shape());
            for r in 0..x.n_rows() {
                let keep = |k: usize| mask.map_or(true, |m| m[r * d + k]);
                let n_kept = (0..d).filter(|&k| keep(k)).count() as f64;
                let (xr, sr, rr) = (x.row(r), s.row(r), r_out.row(r));
                let weighted: f64 = (0..d).filter(|&k| keep(k)).map(|k| sr[k] * xr[k]).sum();
                let out = t.row_mut(r);
                for j in 0..d {
                    if !keep(j) || rr[j] == 0.0 || sr[j] == 0.0 {
                        continue;
                    }
                    // Σ_k J_jk x_k = s_j (x_j − Σ_k s_k x_k) / T
                    let linear = sr[j] * (xr[j] - weighted) / temperature;
                    let share = (sr[j] - linear) / n_kept;
                    let c = rr[j] / sr[j];
                    for i in 0..d {
                        if keep(i) {
                            let delta = if i == j { 1.0 } else { 0.0 };
                            let jx = sr[j] * (delta - sr[i]) / temperature * xr[i];
                            out[i] += (jx + share) * c;
                        }
                    }
                }
            }
            t
        }
    };
    let absorbed = ledger(r_out, &[&r_in]);
    Ok((r_in, absorbed))
}

/// Equal split of the output relevance across `n_factors` multiplicative inputs.
pub fn uniform_product(n_factors: usize, r_out: &Tensor) -> Vec<Tensor> {
    let share = 1.0 / n_factors as f64;
    (0..n_factors).map(|_| r_out.scale(share)).collect()
}

fn check_matmul(a: &Tensor, v: &Tensor, o: &Tensor, r_out: &Tensor) -> Result<()> {
    let expect = tensor::matmul(a, v)?;
    if expect.shape() != o.shape() || a.shape()[..a.rank() - 2] != v.shape()[..v.rank() - 2] {
        return Err(Error::Shape {
            op: "matmul relevance",
            lhs: a.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    same_shape("matmul relevance", o, r_out)
}

/// `R_A[j,i] = A_ji Σ_p V_ip c_jp` and `R_V[i,p] = V_ip Σ_j A_ji c_jp` for a given `c`.
fn matmul_shares(a: &Tensor, v: &Tensor, c: &Tensor, want_a: bool) -> Result<(Option<Tensor>, Tensor)> {
    let r_a = if want_a {
        let cv = tensor::matmul(c, &v.transpose_last())?;
        Some(tensor::hadamard(a, &cv)?)
    } else {
        None
    };
    let ac = tensor::matmul(&a.transpose_last(), c)?;
    let r_v = tensor::hadamard(v, &ac)?;
    Ok((r_a, r_v))
}

fn matmul_coef(o: &Tensor, r_out: &Tensor, factor: f64, eps: f64) -> Result<Tensor> {
    o.zip_map(r_out, "matmul relevance", |ov, rv| rv / stabilize(factor * ov, eps))
}

/// Bilinear rule for `O = A·V`: ε-rule over the summands followed by the uniform split.
pub fn matmul_bilinear(a: &Tensor, v: &Tensor, o: &Tensor, r_out: &Tensor, eps: f64) -> Result<(Tensor, Tensor, f64)> {
    Rule::MatmulBilinear { epsilon: eps }.validate()?;
    check_matmul(a, v, o, r_out)?;
    let c = matmul_coef(o, r_out, 2.0, eps)?;
    let (r_a, r_v) = matmul_shares(a, v, &c, true)?;
    let r_a = r_a.expect("requested");
    let absorbed = ledger(r_out, &[&r_a, &r_v]);
    Ok((r_a, r_v, absorbed))
}

/// ε-rule applied to each operand with the other held constant, without the uniform split.
pub fn matmul_naive_epsilon(a: &Tensor, v: &Tensor, o: &Tensor, r_out: &Tensor, eps: f64) -> Result<(Tensor, Tensor, f64)> {
    Rule::MatmulNaiveEpsilonDiag { epsilon: eps }.validate()?;
    check_matmul(a, v, o, r_out)?;
    let c = matmul_coef(o, r_out, 1.0, eps)?;
    let (r_a, r_v) = matmul_shares(a, v, &c, true)?;
    let r_a = r_a.expect("requested");
    let absorbed = ledger(r_out, &[&r_a, &r_v]);
    Ok((r_a, r_v, absorbed))
}

/// ε-rule with `A` as constant weights; all relevance goes to `V`.
pub fn matmul_value_only(a: &Tensor, v: &Tensor, o: &Tensor, r_out: &Tensor, eps: f64) -> Result<(Tensor, f64)> {
    Rule::MatmulValueOnly { epsilon: eps }.validate()?;
    check_matmul(a, v, o, r_out)?;
    let c = matmul_coef(o, r_out, 1.0, eps)?;
    let (_, r_v) = matmul_shares(a, v, &c, false)?;
    let absorbed = ledger(r_out, &[&r_v]);
    Ok((r_v, absorbed))
}

/// Gated product `gate ⊙ value` with the gate treated as a constant weight.
pub fn hadamard_gate_constant(gate: &Tensor, value: &Tensor, r_out: &Tensor, eps: f64) -> Result<(Tensor, f64)> {
    let z = tensor::hadamard(gate, value)?;
    same_shape("hadamard relevance", &z, r_out)?;
    let r_v = Tensor::new(
        z.shape().to_vec(),
        sum_kernel(&[z.data()], z.data(), r_out.data(), LinearRule::Epsilon(eps)).remove(0),
    )?;
    let absorbed = ledger(r_out, &[&r_v]);
    Ok((r_v, absorbed))
}
