//! Perturbation faithfulness, plausibility, and exact oracles.
//!
//! A perturbation run over `N` positions records `N` states. State `k` has
//! `c_k` positions "moved", with `c_0 = 0`, `c_{N-1} = N`, and the count
//! sequence symmetric (`c_{N-1-k} = N - c_k`, up to the middle state of odd
//! `N`). Which positions are present
//! at each state:
//!
//! | order / mode | flip                    | insert                  |
//! |--------------|-------------------------|-------------------------|
//! | MoRF         | top `c_k` at baseline   | only top `c_k` present  |
//! | LeRF         | only top `c_k` present  | top `c_k` at baseline   |
//!
//! so LeRF flipping and MoRF insertion visit the same states, as do MoRF
//! flipping and LeRF insertion.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{self, ExplainOptions, Method};
use crate::model::tasks::Sample;
use crate::model::{argmax, Embedded, ForwardOptions, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    #[serde(rename = "MoRF")]
    MoRF,
    #[serde(rename = "LeRF")]
    LeRF,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Flip,
    Insert,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(Mode::Flip),
            "insert" => Ok(Mode::Insert),
            other => Err(Error::InvalidArgument(format!("unknown perturbation mode {other}"))),
        }
    }
}

/// Number of moved positions at each of the `n` states; symmetric except for the middle state of odd `n`.
pub fn perturbation_counts(n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("perturbation needs at least 2 positions, got {n}")));
    }
    let mut c: Vec<usize> = (0..n).map(|k| ((k * n) as f64 / (n - 1) as f64).round() as usize).collect();
    for k in 0..n / 2 {
        c[n - 1 - k] = n - c[k];
    }
    Ok(c)
}

/// Positions by descending relevance; ties go to the lower index.
pub fn ranking(relevance: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    idx.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]).then(a.cmp(&b)));
    idx
}

/// Rows flagged `false` are replaced by the baseline row.
pub fn perturbed(emb: &Embedded, baseline: &Tensor, present: &[bool]) -> Embedded {
    let mut values = emb.values.clone();
    for (i, &keep) in present.iter().enumerate() {
        if !keep {
            values.row_mut(i).copy_from_slice(baseline.row(i));
        }
    }
    Embedded {
        values,
        tokens: emb.tokens.clone(),
    }
}

fn top_present(order: Order, mode: Mode) -> bool {
    matches!((order, mode), (Order::LeRF, Mode::Flip) | (Order::MoRF, Mode::Insert))
}

/// Target logit at every state of one perturbation run; `baseline` defaults to zeros.
pub fn perturbation_curve(
    model: &Model,
    emb: &Embedded,
    relevance: &[f64],
    target: usize,
    order: Order,
    mode: Mode,
    baseline: Option<&Tensor>,
) -> Result<Vec<f64>> {
    let n = emb.n_positions();
    if relevance.len() != n {
        return Err(Error::Shape {
            op: "perturbation_curve",
            lhs: vec![relevance.len()],
            rhs: vec![n],
        });
    }
    let zeros = Tensor::zeros(emb.values.shape());
    let base = baseline.unwrap_or(&zeros);
    let counts = perturbation_counts(n)?;
    let rank = ranking(relevance);
    let top = top_present(order, mode);
    counts
        .iter()
        .map(|&c| {
            let mut present = vec![!top; n];
            for &p in &rank[..c] {
                present[p] = top;
            }
            let (_, logits) = model.forward_embedded(&perturbed(emb, base, &present), &ForwardOptions::default())?;
            Ok(logits.data()[target])
        })
        .collect()
}

pub fn area(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len().max(1) as f64
}

pub fn delta_area(morf: &[f64], lerf: &[f64], mode: Mode) -> f64 {
    match mode {
        Mode::Flip => area(lerf) - area(morf),
        Mode::Insert => area(morf) - area(lerf),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessResult {
    pub method: String,
    pub mode: Mode,
    pub curve_morf: Vec<f64>,
    pub curve_lerf: Vec<f64>,
    pub a_morf: f64,
    pub a_lerf: f64,
    pub delta: f64,
}

pub fn faithfulness(
    model: &Model,
    emb: &Embedded,
    method: &str,
    relevance: &[f64],
    target: usize,
    mode: Mode,
) -> Result<FaithfulnessResult> {
    let curve_morf = perturbation_curve(model, emb, relevance, target, Order::MoRF, mode, None)?;
    let curve_lerf = perturbation_curve(model, emb, relevance, target, Order::LeRF, mode, None)?;
    Ok(FaithfulnessResult {
        method: method.to_string(),
        mode,
        a_morf: area(&curve_morf),
        a_lerf: area(&curve_lerf),
        delta: delta_area(&curve_morf, &curve_lerf, mode),
        curve_morf,
        curve_lerf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plausibility {
    pub top1: bool,
    pub iou: f64,
}

/// Top-1 hit of the arg-max position and IoU of the positive positions with the mask.
pub fn plausibility(relevance: &[f64], mask: &[bool]) -> Result<Plausibility> {
    if relevance.len() != mask.len() || relevance.is_empty() {
        return Err(Error::Shape {
            op: "plausibility",
            lhs: vec![relevance.len()],
            rhs: vec![mask.len()],
        });
    }
    let top1 = mask[argmax(relevance)];
    let positive = relevance.iter().map(|&r| r > 0.0);
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, &m) in positive.zip(mask) {
        inter += (p && m) as usize;
        union += (p || m) as usize;
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    Ok(Plausibility { top1, iou })
}

/// Exact Shapley values of an `n`-player game given by its coalition function on bitmasks.
pub fn shapley_exact(n: usize, value: impl Fn(u32) -> f64) -> Result<Vec<f64>> {
    if n == 0 || n > 12 {
        return Err(Error::InvalidArgument(format!("exact enumeration supports 1..=12 players, got {n}")));
    }
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let v: Vec<f64> = (0..1u32 << n).map(&value).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0..1u32 << n {
            if s & (1 << i) != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = fact[size] * fact[n - size - 1] / fact[n];
            *p += w * (v[(s | 1 << i) as usize] - v[s as usize]);
        }
    }
    Ok(phi)
}

/// Shapley values of `Π x_i` with absent factors set to zero.
pub fn shapley_oracle_product(xs: &[f64]) -> Result<Vec<f64>> {
    shapley_exact(xs.len(), |s| {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| if s & (1 << i) != 0 { x } else { 0.0 })
            .product()
    })
}

/// Central-difference Jacobian, one row per output.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let mut cols = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        cols.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    let m = cols.first().map_or(0, Vec::len);
    (0..m).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub sample: usize,
    pub delta: f64,
    pub a_morf: f64,
    pub a_lerf: f64,
    pub top1: bool,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
}

impl MeanSem {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, sem: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let sem = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        Self { mean, sem }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub delta: MeanSem,
    pub a_morf: MeanSem,
    pub a_lerf: MeanSem,
    pub top1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MethodSummary>,
}

/// What the evaluated methods explain at each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Explained {
    #[default]
    Prediction,
    Label,
}

/// A named attribution source: a built-in method or the ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Method(Method, ExplainOptions),
    Oracle,
}

impl Source {
    pub fn name(&self) -> String {
        match self {
            Source::Method(m, opts) => match &opts.composite {
                Some(c) if m.is_lrp() => c.name.clone(),
                _ => m.name().to_string(),
            },
            Source::Oracle => "oracle".into(),
        }
    }
}

fn evaluate_sample(model: &Model, sample: &Sample, sources: &[Source], mode: Mode, explained: Explained) -> Result<Vec<EvalRow>> {
    let emb = model.embed(&sample.input)?;
    let (_, logits) = model.forward_embedded(&emb, &ForwardOptions::default())?;
    let class = match explained {
        Explained::Prediction => model.predict(&logits),
        Explained::Label => sample.label,
    };
    let target = model.target_index(&logits, class);
    sources
        .iter()
        .map(|src| {
            let scores = match src {
                Source::Method(m, opts) => {
                    let opts = ExplainOptions {
                        seed: opts.seed ^ sample.id as u64,
                        ..opts.clone()
                    };
                    explain::attribute(model, &emb, *m, target, &opts)?.scores()
                }
                Source::Oracle => sample.mask.iter().map(|&m| m as u8 as f64).collect(),
            };
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite {
                    node: 0,
                    tag: format!("{} input relevance on sample {}", src.name(), sample.id),
                });
            }
            let f = faithfulness(model, &emb, &src.name(), &scores, target, mode)?;
            let p = plausibility(&scores, &sample.mask)?;
            Ok(EvalRow {
                method: f.method,
                sample: sample.id,
                delta: f.delta,
                a_morf: f.a_morf,
                a_lerf: f.a_lerf,
                top1: p.top1,
                iou: p.iou,
            })
        })
        .collect()
}

/// Runs every source on every sample in parallel; rows come back sorted by sample id.
pub fn evaluate(model: &Model, samples: &[Sample], sources: &[Source], mode: Mode, explained: Explained) -> Result<EvalReport> {
    let per_sample: Vec<Result<Vec<EvalRow>>> = samples
        .par_iter()
        .map(|s| evaluate_sample(model, s, sources, mode, explained))
        .collect();
    let failures: Vec<&Error> = per_sample.iter().filter_map(|r| r.as_ref().err()).collect();
    if let Some(first) = failures.first() {
        let count = format!("{} of {} samples failed", failures.len(), samples.len());
        return Err(match failures.iter().find(|e| matches!(e, Error::NonFinite { .. })) {
            Some(Error::NonFinite { node, tag }) => Error::NonFinite {
                node: *node,
                tag: format!("{tag}; {count}"),
            },
            _ => Error::InvalidArgument(format!("{count}; first: {first}")),
        });
    }
    let mut rows: Vec<EvalRow> = per_sample.into_iter().flat_map(|r| r.expect("checked")).collect();
    rows.sort_by_key(|r| r.sample);
    let summary = sources
        .iter()
        .map(|src| {
            let name = src.name();
            let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.method == name).collect();
            let col = |f: fn(&EvalRow) -> f64| MeanSem::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                n: mine.len(),
                delta: col(|r| r.delta),
                a_morf: col(|r| r.a_morf),
                a_lerf: col(|r| r.a_lerf),
                top1: col(|r| r.top1 as u8 as f64).mean,
                iou: col(|r| r.iou).mean,
                method: name,
            }
        })
        .collect();
    Ok(EvalReport { mode, rows, summary })
}

impl EvalReport {
    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "method,sample,delta,a_morf,a_lerf,top1,iou")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method, r.sample, r.delta, r.a_morf, r.a_lerf, r.top1 as u8, r.iou
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelInput};
    use crate::tensor;

    fn tiny() -> Model {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            ..ModelConfig::decoder(10, 10)
        };
        Model::init(config, 5).unwrap()
    }

    #[test]
    fn counts_are_symmetric_and_cover_the_ends() {
        for n in 2..40 {
            let c = perturbation_counts(n).unwrap();
            assert_eq!(c.len(), n);
            assert_eq!((c[0], c[n - 1]), (0, n));
            for k in (0..n).filter(|&k| 2 * k + 1 != n) {
                assert_eq!(c[n - 1 - k], n - c[k]);
            }
            assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!(perturbation_counts(1).is_err());
    }

    #[test]
    fn ranking_breaks_ties_to_the_lower_index() {
        assert_eq!(ranking(&[0.5, 1.0, 0.5, -1.0, 1.0]), vec![1, 4, 0, 2, 3]);
    }

    #[test]
    fn curve_endpoints_and_identities() {
        let m = tiny();
        let emb = m.embed(&ModelInput::Tokens(vec![1, 4, 2, 8, 5, 7])).unwrap();
        let (_, logits) = m.forward_embedded(&emb, &ForwardOptions::default()).unwrap();
        let target = m.target_index(&logits, 3);
        let rel = [0.3, -0.1, 0.9, 0.0, 0.3, 0.2];
        let morf = perturbation_curve(&m, &emb, &rel, target, Order::MoRF, Mode::Flip, None).unwrap();
        assert_eq!(morf.len(), 6);
        assert_eq!(morf[0], logits.data()[target]);
        let blank = Embedded {
            values: Tensor::zeros(emb.values.shape()),
            tokens: emb.tokens.clone(),
        };
        let (_, at_base) = m.forward_embedded(&blank, &ForwardOptions::default()).unwrap();
        assert_eq!(morf[5], at_base.data()[target]);

        let lerf_flip = perturbation_curve(&m, &emb, &rel, target, Order::LeRF, Mode::Flip, None).unwrap();
        let morf_insert = perturbation_curve(&m, &emb, &rel, target, Order::MoRF, Mode::Insert, None).unwrap();
        assert_eq!(lerf_flip, morf_insert);
        let lerf_insert = perturbation_curve(&m, &emb, &rel, target, Order::LeRF, Mode::Insert, None).unwrap();
        assert_eq!(lerf_insert, morf);

        let flip = faithfulness(&m, &emb, "x", &rel, target, Mode::Flip).unwrap();
        let insert = faithfulness(&m, &emb, "x", &rel, target, Mode::Insert).unwrap();
        assert_eq!(flip.delta, insert.delta);
        assert_eq!(flip.delta, flip.a_lerf - flip.a_morf);
        assert_eq!(delta_area(&morf, &morf, Mode::Flip), 0.0);
    }

    #[test]
    fn plausibility_hand_cases() {
        let p = plausibility(&[1.0, 2.0, -1.0], &[true, true, false]).unwrap();
        assert!(p.top1);
        assert_eq!(p.iou, 1.0);
        let p = plausibility(&[1.0, -2.0, -1.0], &[false, true, true]).unwrap();
        assert!(!p.top1);
        assert_eq!(p.iou, 0.0);
        // positive {0,1,2}, mask {1,2,3}
        let p = plausibility(&[1.0, 1.0, 1.0, -1.0], &[false, true, true, true]).unwrap();
        assert_eq!(p.iou, 0.5);
        assert!(plausibility(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn shapley_product_oracle() {
        assert_eq!(shapley_oracle_product(&[2.0, 3.0]).unwrap(), vec![3.0, 3.0]);
        let phi = shapley_oracle_product(&[1.5, -2.0, 0.5, 4.0]).unwrap();
        let total = 1.5 * -2.0 * 0.5 * 4.0;
        assert!((phi.iter().sum::<f64>() - total).abs() < 1e-12);
        assert!(phi.iter().all(|p| (p - total / 4.0).abs() < 1e-12));
        // additive game: each player gets its own term
        let w = [1.0, 2.0, -3.0];
        let phi = shapley_exact(3, |s| (0..3).filter(|i| s & (1 << i) != 0).map(|i| w[i]).sum()).unwrap();
        for (p, x) in phi.iter().zip(w) {
            assert!((p - x).abs() < 1e-12);
        }
        assert!(shapley_exact(13, |_| 0.0).is_err());
    }

    #[test]
    fn fd_softmax_jacobian() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let s = tensor::softmax(&Tensor::from_vec(x.to_vec()), 0, 1.0).unwrap();
        let jac = fd_jacobian(
            |v| tensor::softmax(&Tensor::from_vec(v.to_vec()), 0, 1.0).unwrap().into_data(),
            &x,
            1e-5,
        );
        for i in 0..4 {
            for j in 0..4 {
                let si = s.data()[i];
                let exact = si * (if i == j { 1.0 } else { 0.0 } - s.data()[j]);
                assert!((jac[i][j] - exact).abs() < 1e-4 * exact.abs().max(1e-6) + 1e-10);
            }
        }
    }

    #[test]
    fn mean_sem() {
        let m = MeanSem::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.sem - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic_and_exports() {
        let task = crate::model::tasks::Task::planted_answer();
        let m = Model::init(task.default_model(), 1).unwrap();
        let samples = task.test_set(0, 4);
        let sources = [
            Source::Method(Method::Random, ExplainOptions::default()),
            Source::Oracle,
        ];
        let a = evaluate(&m, &samples, &sources, Mode::Flip, Explained::Prediction).unwrap();
        let b = evaluate(&m, &samples, &sources, Mode::Flip, Explained::Prediction).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 8);
        assert!(a.rows.windows(2).all(|w| w[0].sample <= w[1].sample));
        let oracle = a.summary_for("oracle").unwrap();
        assert_eq!(oracle.top1, 1.0);
        assert_eq!(oracle.iou, 1.0);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);
        assert!(a.to_json().unwrap().contains("\"summary\""));
    }
}
