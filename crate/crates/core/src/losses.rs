//! Ranked-range aggregation of per-sample losses.
//!
//! The average of ranked range (AoRR) keeps the losses ranked `m+1..=k` in
//! descending order, dropping the `m` largest (suspected outliers) and the
//! `n-k` smallest. The ranking can be traded for two scalar variables
//! `lambda` and `lambda_hat` through the variational identities
//!
//! ```text
//! sum_{i<=k} s_[i]       = min_lambda   { k*lambda + sum_i [s_i - lambda]_+ }
//! sum_{i>m}  s_[i]       = max_lambda^  { (n-m)*lambda^ - sum_i [lambda^ - s_i]_+ }
//! ```
//!
//! which turn the ranked objective into a min-max problem whose per-sample
//! term is
//!
//! ```text
//! (k-m)/n * lambda + (n-m)/n * lambda^ - [lambda^ - [loss_i - lambda]_+]_+
//! ```
//!
//! The solvers here restrict `lambda`, `lambda^` to finite candidate sets
//! (the loss values and zero) that always contain an optimum. On flat optima
//! the largest optimal candidate is returned, which recovers the canonical
//! minimisers `s_[k]` and `s_[m]`.

use crate::error::{Error, Result};

/// `[a]_+`.
#[inline]
pub fn hinge(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

/// Per-sample losses: non-empty, finite, non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("loss vector must be non-empty".into()));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Contract(format!(
                "loss {i} is {v}; losses must be finite and non-negative"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Values in descending order; ties keep their original index order.
    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&i, &j| self.0[j].total_cmp(&self.0[i]).then(i.cmp(&j)));
        idx.into_iter().map(|i| self.0[i]).collect()
    }
}

impl TryFrom<Vec<f64>> for LossVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Ranked range `m+1..=k` over `n` losses, `0 <= m < k <= n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RankRange {
    k: usize,
    m: usize,
    n: usize,
}

impl RankRange {
    pub fn new(k: usize, m: usize, n: usize) -> Result<Self> {
        if !(m < k && k <= n) {
            return Err(Error::Config(format!(
                "rank range needs 0 <= m < k <= n, got k={k}, m={m}, n={n}"
            )));
        }
        Ok(Self { k, m, n })
    }

    /// The range that keeps every loss: plain averaging.
    pub fn full(n: usize) -> Result<Self> {
        Self::new(n, 0, n)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.k - self.m
    }

    fn check(&self, losses: &LossVector) -> Result<()> {
        if losses.len() != self.n {
            return Err(Error::Contract(format!(
                "rank range is for n={} but {} losses were given",
                self.n,
                losses.len()
            )));
        }
        Ok(())
    }
}

/// The auxiliary scalars replacing the ranking. Unconstrained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualVars {
    pub lambda: f64,
    pub lambda_hat: f64,
}

impl DualVars {
    pub fn new(lambda: f64, lambda_hat: f64) -> Self {
        Self { lambda, lambda_hat }
    }
}

/// Sum of the `k` largest losses, by sorting.
pub fn topk_sum_sorted(losses: &LossVector, k: usize) -> Result<f64> {
    if k == 0 || k > losses.len() {
        return Err(Error::Index {
            what: "top-k",
            index: k,
            bound: losses.len(),
        });
    }
    Ok(losses.sorted_desc()[..k].iter().sum())
}

fn near_optimal(value: f64, best: f64) -> bool {
    (value - best).abs() <= 1e-12 * best.abs().max(1.0)
}

/// Pick the optimum of `objective` over `candidates`, preferring the largest
/// candidate among (numerically) tied optima.
fn scan<F: Fn(f64) -> f64>(candidates: &[f64], objective: F, maximize: bool) -> (f64, f64) {
    let values: Vec<f64> = candidates.iter().map(|&c| objective(c)).collect();
    let best = if maximize {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let mut chosen: Option<(f64, f64)> = None;
    for (&c, &v) in candidates.iter().zip(&values) {
        if near_optimal(v, best) && chosen.map_or(true, |(cc, _)| c > cc) {
            chosen = Some((c, v));
        }
    }
    let (arg, value) = chosen.expect("candidate set is non-empty");
    (value, arg)
}

fn candidates_with_zero(values: &[f64]) -> Vec<f64> {
    let mut c = values.to_vec();
    c.push(0.0);
    c
}

/// `min_lambda { k*lambda + sum_i [s_i - lambda]_+ }` by candidate scan; `k = 0` allowed.
fn min_topk_objective(values: &[f64], k: usize) -> (f64, f64) {
    let kf = k as f64;
    scan(
        &candidates_with_zero(values),
        |lambda| kf * lambda + values.iter().map(|&s| hinge(s - lambda)).sum::<f64>(),
        false,
    )
}

/// Top-k sum through its variational form. Returns `(value, lambda*)`.
pub fn topk_sum_variational(losses: &LossVector, k: usize) -> Result<(f64, f64)> {
    if k == 0 || k > losses.len() {
        return Err(Error::Index {
            what: "top-k",
            index: k,
            bound: losses.len(),
        });
    }
    Ok(min_topk_objective(losses.values(), k))
}

/// Sum of the `n-m` smallest losses through its variational form.
/// Returns `(value, lambda_hat*)`.
pub fn bottom_sum_variational(losses: &LossVector, m: usize) -> Result<(f64, f64)> {
    let n = losses.len();
    if m >= n {
        return Err(Error::Index {
            what: "bottom-(n-m) m",
            index: m,
            bound: n,
        });
    }
    let values = losses.values();
    let keep = (n - m) as f64;
    Ok(scan(
        values,
        |lh| keep * lh - values.iter().map(|&s| hinge(lh - s)).sum::<f64>(),
        true,
    ))
}

/// Average of the losses ranked `m+1..=k` in descending order.
pub fn aorr(losses: &LossVector, range: RankRange) -> Result<f64> {
    range.check(losses)?;
    let sorted = losses.sorted_desc();
    Ok(sorted[range.m..range.k].iter().sum::<f64>() / range.width() as f64)
}

/// One summand of the min-max objective.
#[inline]
pub fn orat_sample_objective(loss: f64, duals: DualVars, range: RankRange) -> f64 {
    let n = range.n as f64;
    let DualVars { lambda, lambda_hat } = duals;
    range.width() as f64 / n * lambda + (range.n - range.m) as f64 / n * lambda_hat
        - hinge(lambda_hat - hinge(loss - lambda))
}

/// Sum over samples of the min-max objective at fixed duals (no `1/(k-m)` factor).
pub fn orat_inner_objective(losses: &LossVector, range: RankRange, duals: DualVars) -> Result<f64> {
    range.check(losses)?;
    Ok(losses
        .values()
        .iter()
        .map(|&l| orat_sample_objective(l, duals, range))
        .sum())
}

/// Solves `min_lambda max_lambda_hat` of [`orat_inner_objective`] exhaustively.
///
/// `value / (k - m)` equals [`aorr`]. The returned duals are the largest
/// optimal candidates.
pub fn orat_saddle_value(losses: &LossVector, range: RankRange) -> Result<(f64, DualVars)> {
    range.check(losses)?;
    let values = losses.values();
    let inner = |lambda: f64| -> (f64, f64) {
        let shifted: Vec<f64> = values.iter().map(|&l| hinge(l - lambda)).collect();
        scan(
            &candidates_with_zero(&shifted),
            |lh| {
                values
                    .iter()
                    .map(|&l| orat_sample_objective(l, DualVars::new(lambda, lh), range))
                    .sum()
            },
            true,
        )
    };
    let (value, lambda) = scan(&candidates_with_zero(values), |lambda| inner(lambda).0, false);
    let (_, lambda_hat) = inner(lambda);
    Ok((value, DualVars::new(lambda, lambda_hat)))
}

/// Subgradients of one summand of the min-max objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Subgradient {
    /// Multiplier on `d loss / d theta`; either 0 or 1.
    pub coef_theta: f64,
    pub g_lambda: f64,
    pub g_lambda_hat: f64,
}

/// Explicit subgradients with strict-inequality indicators.
pub fn orat_subgradients(loss: f64, duals: DualVars, range: RankRange) -> Subgradient {
    let n = range.n as f64;
    let DualVars { lambda, lambda_hat } = duals;
    let outer_active = if lambda_hat > hinge(loss - lambda) {
        1.0
    } else {
        0.0
    };
    let inner_active = if loss > lambda { 1.0 } else { 0.0 };
    let both = outer_active * inner_active;
    Subgradient {
        coef_theta: both,
        g_lambda: range.width() as f64 / n - both,
        g_lambda_hat: (range.n - range.m) as f64 / n - outer_active,
    }
}

/// Non-increasing margin losses `l(t)` with `t = y f(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MarginLoss {
    /// `max(0, 1 - t)`
    Hinge,
    /// `log2(1 + e^{-t})`
    Logistic,
    /// `-ln sigmoid(t)`, binary cross-entropy with labels in {-1, +1}.
    BinaryCrossEntropy,
}

impl MarginLoss {
    pub const ALL: [MarginLoss; 3] = [
        MarginLoss::Hinge,
        MarginLoss::Logistic,
        MarginLoss::BinaryCrossEntropy,
    ];

    pub fn value(self, t: f64) -> f64 {
        match self {
            MarginLoss::Hinge => hinge(1.0 - t),
            MarginLoss::Logistic => {
                let x = -t;
                (hinge(x) + (-x.abs()).exp().ln_1p()) / std::f64::consts::LN_2
            }
            MarginLoss::BinaryCrossEntropy => {
                if t >= 0.0 {
                    -(1.0 / (1.0 + (-t).exp())).ln()
                } else {
                    t.exp().ln_1p() - t
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginLoss::Hinge => "hinge",
            MarginLoss::Logistic => "logistic",
            MarginLoss::BinaryCrossEntropy => "bce",
        }
    }
}

/// Population-level thresholds of the clamped surrogate, `0 <= lambda* < lambda_hat*`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiParams {
    lambda_star: f64,
    lambda_hat_star: f64,
    base: MarginLoss,
}

impl PhiParams {
    pub fn new(lambda_star: f64, lambda_hat_star: f64, base: MarginLoss) -> Result<Self> {
        if !(lambda_star.is_finite() && lambda_hat_star.is_finite())
            || !(0.0 <= lambda_star && lambda_star < lambda_hat_star)
        {
            return Err(Error::Config(format!(
                "need 0 <= lambda* < lambda_hat*, got {lambda_star}, {lambda_hat_star}"
            )));
        }
        Ok(Self {
            lambda_star,
            lambda_hat_star,
            base,
        })
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda_star
    }

    pub fn lambda_hat_star(&self) -> f64 {
        self.lambda_hat_star
    }

    pub fn base(&self) -> MarginLoss {
        self.base
    }
}

/// Nested-hinge surrogate `lambda_hat* - [lambda_hat* - [l(t) - lambda*]_+]_+`.
pub fn phi_orat(t: f64, params: &PhiParams) -> f64 {
    phi_from_loss(params.base.value(t), params)
}

/// [`phi_orat`] for an already evaluated base loss value.
pub fn phi_from_loss(loss: f64, params: &PhiParams) -> f64 {
    let lh = params.lambda_hat_star;
    lh - hinge(lh - hinge(loss - params.lambda_star))
}

/// Ranked-range risk as a difference of two minimisations, divided by `k - m`.
pub fn risk_difference_form(losses: &LossVector, range: RankRange) -> Result<f64> {
    range.check(losses)?;
    let (top_k, _) = min_topk_objective(losses.values(), range.k);
    let (top_m, _) = min_topk_objective(losses.values(), range.m);
    Ok((top_k - top_m) / range.width() as f64)
}
