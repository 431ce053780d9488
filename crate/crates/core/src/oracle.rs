//! Brute-force verifiers for the ranking identities, the min-max
//! reformulation, the explicit subgradients and the clamped surrogate.
//!
//! Reference values are computed here with their own sorting, hinge and
//! candidate-scan code; the production routines in [`crate::losses`] are
//! only ever called as the subject under test.

use std::fmt::Write as _;

use rand::Rng;

use crate::autograd::{Tape, Tensor};
use crate::error::Result;
use crate::losses::{
    aorr, bottom_sum_variational, orat_inner_objective, orat_saddle_value, orat_subgradients, phi_orat,
    risk_difference_form, topk_sum_sorted, topk_sum_variational, DualVars, LossVector, MarginLoss, PhiParams,
    RankRange,
};
use crate::models::Mlp;
use crate::rng::{substream, OratRng};

/// Outcome of one verifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub checks: usize,
    pub failures: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// The instance with the largest deviation, for regression capture.
    pub worst_case: String,
    /// Observations that are reported but not asserted.
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            checks: 0,
            failures: 0,
            max_deviation: 0.0,
            tolerance,
            worst_case: String::new(),
            notes: Vec::new(),
        }
    }

    fn record(&mut self, deviation: f64, instance: impl FnOnce() -> String) {
        self.checks += 1;
        let dev = if deviation.is_nan() {
            f64::INFINITY
        } else {
            deviation
        };
        if dev > self.tolerance {
            self.failures += 1;
        }
        if dev > self.max_deviation || self.worst_case.is_empty() {
            self.max_deviation = self.max_deviation.max(dev);
            self.worst_case = instance();
        }
    }

    fn record_bool(&mut self, ok: bool, instance: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
            if self.worst_case.is_empty() || self.failures == 1 {
                self.worst_case = instance();
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }
}

/// A batch of verifier outcomes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub const CSV_HEADER: &'static str =
        "check,status,trials,checks,failures,max_deviation,tolerance,worst_case";

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:e},{:e},\"{}\"",
                c.name,
                if c.passed() { "pass" } else { "FAIL" },
                c.trials,
                c.checks,
                c.failures,
                c.max_deviation,
                c.tolerance,
                c.worst_case.replace('"', "'"),
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "[{}] {:<22} {} checks over {} trials, {} failures, max deviation {:.3e} (tol {:.0e})",
                if c.passed() { "pass" } else { "FAIL" },
                c.name,
                c.checks,
                c.trials,
                c.failures,
                c.max_deviation,
                c.tolerance,
            );
            for note in &c.notes {
                let _ = writeln!(out, "       {note}");
            }
            if !c.passed() {
                let _ = writeln!(out, "       worst case: {}", c.worst_case);
            }
        }
        out
    }
}

// Reference arithmetic, written independently of the production code.

fn relu(a: f64) -> f64 {
    a.max(0.0)
}

/// Descending insertion sort.
fn sort_desc(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        let pos = out.iter().position(|&o| v > o).unwrap_or(out.len());
        out.insert(pos, v);
    }
    out
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(" "))
}

/// `k*t + sum_i [s_i - t]_+`.
fn topk_objective(values: &[f64], k: usize, t: f64) -> f64 {
    let mut acc = k as f64 * t;
    for &s in values {
        acc += relu(s - t);
    }
    acc
}

/// `(n-m)*t - sum_i [t - s_i]_+`.
fn bottom_objective(values: &[f64], m: usize, t: f64) -> f64 {
    let mut acc = (values.len() - m) as f64 * t;
    for &s in values {
        acc -= relu(t - s);
    }
    acc
}

/// Random loss vector of length `1..=n_max`. Every fourth trial is a tie stress
/// case: alternately constant, and drawn from a small set of repeated values.
fn sample_losses(rng: &mut OratRng, n_max: usize, trial: usize) -> Vec<f64> {
    let n = rng.gen_range(1..=n_max.max(1));
    match trial % 4 {
        1 => vec![rng.gen_range(0.0..3.0); n],
        3 => {
            let pool = [0.0, 0.25, 0.5, 1.0, 2.0];
            (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        }
        _ => (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
    }
}

/// Checks, on random vectors, that the top-k sum equals its variational
/// minimum and that `lambda = s_[k]` attains it, and likewise that the sum of
/// the `n-m` smallest values equals its variational maximum, attained at
/// `lambda_hat = s_[m+1]`.
pub fn verify_topk_identity(n_trials: usize, n_max: usize, seed: u64) -> Result<(CheckReport, CheckReport)> {
    let mut top = CheckReport::new("topk_identity", 1e-9);
    let mut bottom = CheckReport::new("bottom_identity", 1e-9);
    for trial in 0..n_trials {
        let mut rng = substream(seed, "oracle-topk", trial as u64);
        let values = sample_losses(&mut rng, n_max, trial);
        let n = values.len();
        let sorted = sort_desc(&values);
        let lv = LossVector::new(values.clone())?;
        top.trials += 1;
        bottom.trials += 1;

        let k = rng.gen_range(1..=n);
        let reference: f64 = sorted[..k].iter().sum();
        let sorted_sum = topk_sum_sorted(&lv, k)?;
        let (var_value, var_lambda) = topk_sum_variational(&lv, k)?;
        let at_kth = topk_objective(&values, k, sorted[k - 1]);
        let at_returned = topk_objective(&values, k, var_lambda);
        let brute_min = values
            .iter()
            .chain(std::iter::once(&0.0))
            .map(|&t| topk_objective(&values, k, t))
            .fold(f64::INFINITY, f64::min);
        let instance = || format!("values={} k={k}", fmt_vec(&values));
        top.record((sorted_sum - reference).abs(), instance);
        top.record((var_value - reference).abs(), instance);
        top.record((brute_min - reference).abs(), instance);
        top.record((at_kth - reference).abs(), instance);
        top.record((at_returned - reference).abs(), instance);

        let m = rng.gen_range(0..n);
        let reference: f64 = sorted[m..].iter().sum();
        let (var_value, var_lambda_hat) = bottom_sum_variational(&lv, m)?;
        let at_next = bottom_objective(&values, m, sorted[m]);
        let at_returned = bottom_objective(&values, m, var_lambda_hat);
        let instance = || format!("values={} m={m}", fmt_vec(&values));
        bottom.record((var_value - reference).abs(), instance);
        bottom.record((at_next - reference).abs(), instance);
        bottom.record((at_returned - reference).abs(), instance);
    }
    Ok((top, bottom))
}

fn reference_aorr(sorted: &[f64], k: usize, m: usize) -> f64 {
    sorted[m..k].iter().sum::<f64>() / (k - m) as f64
}

/// For every valid `(k, m)` of random vectors, the min-max saddle value over
/// `k - m` and the difference-of-minimisations form both equal the
/// sort-based ranked-range average. Whether `lambda_hat* > lambda*` held is
/// counted but not asserted.
pub fn verify_theorem1(n_trials: usize, n_max: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("theorem1_equivalence", 1e-9);
    let (mut strict, mut pairs) = (0usize, 0usize);
    for trial in 0..n_trials {
        let mut rng = substream(seed, "oracle-theorem1", trial as u64);
        let values = sample_losses(&mut rng, n_max, trial);
        let n = values.len();
        let sorted = sort_desc(&values);
        let lv = LossVector::new(values.clone())?;
        report.trials += 1;
        for k in 1..=n {
            for m in 0..k {
                let range = RankRange::new(k, m, n)?;
                let reference = reference_aorr(&sorted, k, m);
                let (saddle, duals) = orat_saddle_value(&lv, range)?;
                let instance = || format!("values={} k={k} m={m}", fmt_vec(&values));
                report.record((saddle / (k - m) as f64 - reference).abs(), instance);
                report.record((risk_difference_form(&lv, range)? - reference).abs(), instance);
                report.record((aorr(&lv, range)? - reference).abs(), instance);
                pairs += 1;
                if duals.lambda_hat > duals.lambda {
                    strict += 1;
                }
            }
        }
        if n == 1 || trial == 0 {
            // The (n, 0) row is the plain mean.
            let mean = values.iter().sum::<f64>() / n as f64;
            let full = aorr(&lv, RankRange::full(n)?)?;
            report.record((full - mean).abs(), || {
                format!("mean row, values={}", fmt_vec(&values))
            });
        }
    }

    // Hand-checkable instance.
    let hand = LossVector::new(vec![0.9, 0.1, 0.5, 0.3])?;
    let range = RankRange::new(3, 1, 4)?;
    let (saddle, _) = orat_saddle_value(&hand, range)?;
    report.record((aorr(&hand, range)? - 0.4).abs(), || "hand instance aorr".into());
    report.record((risk_difference_form(&hand, range)? - 0.4).abs(), || {
        "hand instance difference form".into()
    });
    report.record((saddle - 0.8).abs(), || "hand instance saddle value".into());
    report.notes.push(format!(
        "lambda_hat* > lambda* held in {strict} of {pairs} (k, m) instances"
    ));
    Ok(report)
}

/// Max over coordinates of `|analytic - fd| / max(|analytic|, |fd|, floor)`
/// with central differences of step `h`.
pub fn fd_audit<F: Fn(&[f64]) -> f64>(f: F, analytic: &[f64], point: &[f64], h: f64, floor: f64) -> f64 {
    assert_eq!(analytic.len(), point.len(), "gradient and point lengths differ");
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(floor);
        let err = (analytic[i] - fd).abs() / denom;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    worst
}

/// Default relative-error floor of [`fd_audit`].
pub const FD_FLOOR: f64 = 1e-8;

/// Relative-error floor for the MLP audit. Central differences at `h = 1e-5`
/// on O(1) losses carry about 1e-10 of absolute round-off, which would swamp
/// exactly-zero gradients (dead units, zero-weight samples) under `FD_FLOOR`.
pub const MLP_FD_FLOOR: f64 = 1e-5;

/// Distance kept from every kink of the per-sample objective.
pub const KINK_MARGIN: f64 = 1e-3;

/// Compares the analytic `(lambda, lambda_hat)` subgradients, summed over a
/// random loss vector, with central differences of the inner objective at
/// `n_points` points whose hinge arguments all stay `KINK_MARGIN` away from 0.
///
/// The objective is piecewise linear with integer slopes, so slopes are
/// either 0 or at least 1 in magnitude; the relative-error floor is raised to
/// `KINK_MARGIN` to keep roundoff on exactly flat directions from dominating.
pub fn audit_dual_subgradients(n_points: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("dual_subgradients", 1e-6);
    let h = 1e-4;
    let mut rng = substream(seed, "oracle-dual-fd", 0);
    let mut rejected = 0usize;
    while report.trials < n_points {
        let n = rng.gen_range(1..=20usize);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let k = rng.gen_range(1..=n);
        let m = rng.gen_range(0..k);
        let lambda = rng.gen_range(-0.5..2.0);
        let lambda_hat = rng.gen_range(-0.5..2.5);
        let interior = values.iter().all(|&l| {
            (l - lambda).abs() > KINK_MARGIN && (lambda_hat - relu(l - lambda)).abs() > KINK_MARGIN
        });
        if !interior {
            rejected += 1;
            continue;
        }
        report.trials += 1;
        let lv = LossVector::new(values.clone())?;
        let range = RankRange::new(k, m, n)?;
        let duals = DualVars::new(lambda, lambda_hat);
        let (mut g_l, mut g_lh) = (0.0, 0.0);
        for &l in &values {
            let s = orat_subgradients(l, duals, range);
            g_l += s.g_lambda;
            g_lh += s.g_lambda_hat;
        }
        let f =
            |p: &[f64]| orat_inner_objective(&lv, range, DualVars::new(p[0], p[1])).expect("validated range");
        let err = fd_audit(f, &[g_l, g_lh], &[lambda, lambda_hat], h, KINK_MARGIN);
        report.record(err, || {
            format!(
                "values={} k={k} m={m} lambda={lambda} lambda_hat={lambda_hat}",
                fmt_vec(&values)
            )
        });
    }
    report.notes.push(format!(
        "{rejected} sampled points rejected as too close to a kink"
    ));
    Ok(report)
}

/// Reference forward pass: weighted sum of per-sample cross-entropies.
/// Returns `None` if a hidden pre-activation lies within `margin` of the ReLU kink.
fn reference_weighted_ce(
    sizes: &[usize],
    flat: &[f64],
    x: &[f64],
    labels: &[usize],
    weights: &[f64],
    margin: f64,
) -> Option<f64> {
    let batch = labels.len();
    let mut total = 0.0;
    for b in 0..batch {
        let mut act: Vec<f64> = x[b * sizes[0]..(b + 1) * sizes[0]].to_vec();
        let mut offset = 0;
        for l in 0..sizes.len() - 1 {
            let (din, dout) = (sizes[l], sizes[l + 1]);
            let w = &flat[offset..offset + din * dout];
            let bias = &flat[offset + din * dout..offset + din * dout + dout];
            offset += din * dout + dout;
            let mut next = vec![0.0; dout];
            for (j, slot) in next.iter_mut().enumerate() {
                let mut z = bias[j];
                for i in 0..din {
                    z += act[i] * w[i * dout + j];
                }
                *slot = z;
            }
            if l + 2 < sizes.len() {
                if next.iter().any(|z| z.abs() < margin) {
                    return None;
                }
                next.iter_mut().for_each(|z| *z = relu(*z));
            }
            act = next;
        }
        let top = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + act.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
        total += weights[b] * (lse - act[labels[b]]);
    }
    Some(total)
}

/// Tape gradients of a weighted cross-entropy of random MLPs against central
/// differences of an independent forward pass.
pub fn audit_mlp_gradients(n_trials: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("mlp_gradients", 1e-4);
    let h = 1e-5;
    let mut trial = 0u64;
    while report.trials < n_trials {
        let mut rng = substream(seed, "oracle-mlp-fd", trial);
        trial += 1;
        let sizes = [
            rng.gen_range(2..6usize),
            rng.gen_range(2..7usize),
            rng.gen_range(2..6usize),
            rng.gen_range(2..5usize),
        ];
        let model = Mlp::init(&sizes, &mut rng)?;
        let batch = rng.gen_range(1..6usize);
        let x: Vec<f64> = (0..batch * sizes[0]).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..sizes[3])).collect();
        let weights: Vec<f64> = (0..batch)
            .map(|_| f64::from(u8::from(rng.gen_bool(0.8))))
            .collect();
        let flat = model.flat_params();
        // Kinks within one step of the point would break central differences.
        if reference_weighted_ce(&sizes, &flat, &x, &labels, &weights, 10.0 * h).is_none() {
            continue;
        }
        report.trials += 1;

        let tape = Tape::new();
        let vars = model.on_tape(&tape, true);
        let xt = tape.constant(Tensor::matrix(batch, sizes[0], x.clone())?);
        let losses = vars.forward(xt)?.cross_entropy(&labels)?;
        let root = losses.weighted_sum(&weights)?;
        let tape_value = root.value().data()[0];
        let grads = vars.gradients(&tape.backward(root)?);
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

        let reference = reference_weighted_ce(&sizes, &flat, &x, &labels, &weights, 0.0).expect("margin 0");
        let instance = || format!("sizes={sizes:?} batch={batch} trial={}", trial - 1);
        report.record(
            (tape_value - reference).abs() / reference.abs().max(1.0),
            instance,
        );
        let f = |p: &[f64]| reference_weighted_ce(&sizes, p, &x, &labels, &weights, 0.0).expect("margin 0");
        report.record(fd_audit(f, &analytic, &flat, h, MLP_FD_FLOOR), instance);
    }
    Ok(report)
}

/// Evenly spaced grid of `points` values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Audits the nested-hinge surrogate on a grid of margins: equality with
/// `clamp(l(t) - lambda*, 0, lambda_hat*)`, non-increase in `t`, range
/// `[0, lambda_hat*]`, and the two tails.
///
/// `lambda_hat - (lambda_hat - a)` need not round back to `a`, so equality
/// is checked to `2 * EPSILON * lambda_hat*`; exact matches are counted.
pub fn verify_phi_clamp(grid: &[f64], params: &PhiParams) -> CheckReport {
    let lh = params.lambda_hat_star();
    let ls = params.lambda_star();
    let mut report = CheckReport::new(
        &format!("phi_clamp_{}", params.base().name()),
        2.0 * f64::EPSILON * lh,
    );
    report.trials = grid.len();
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut exact = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    for &t in &sorted {
        let loss = params.base().value(t);
        let phi = phi_orat(t, params);
        let clamp = (loss - ls).max(0.0).min(lh);
        if phi == clamp {
            exact += 1;
        }
        report.record((phi - clamp).abs(), || format!("t={t} phi={phi} clamp={clamp}"));
        let in_range = (0.0..=lh).contains(&phi);
        let monotone = prev.map_or(true, |(_, p)| phi <= p);
        let prev_t = prev.map_or(t, |(pt, _)| pt);
        report.record_bool(in_range && monotone, || {
            format!("t={t} phi={phi} previous t={prev_t}: range or monotonicity violated")
        });
        prev = Some((t, phi));
    }
    let far_right = phi_orat(1e3, params);
    let far_left = phi_orat(-1e3, params);
    report.record(far_right.abs(), || format!("right tail phi={far_right}"));
    report.record((far_left - lh).abs(), || format!("left tail phi={far_left}"));
    report.notes.push(format!(
        "{exact} of {} grid points match the clamp bit for bit",
        sorted.len()
    ));
    report
}

/// Sizes of a full verification run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub trials: usize,
    /// Largest vector length for the top-k identities.
    pub n_max: usize,
    /// Largest vector length for the saddle-point equivalence (cubic cost per pair).
    pub theorem_n_max: usize,
    pub subgradient_points: usize,
    pub mlp_trials: usize,
    pub phi_points: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            n_max: 20,
            theorem_n_max: 12,
            subgradient_points: 10_000,
            mlp_trials: 50,
            phi_points: 10_001,
            seed: 0,
        }
    }
}

/// Every verifier, in a fixed order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let (top, bottom) = verify_topk_identity(cfg.trials, cfg.n_max, cfg.seed)?;
    let mut checks = vec![
        top,
        bottom,
        verify_theorem1(cfg.trials, cfg.theorem_n_max, cfg.seed)?,
        audit_dual_subgradients(cfg.subgradient_points, cfg.seed)?,
        audit_mlp_gradients(cfg.mlp_trials, cfg.seed)?,
    ];
    let grid = linspace(-2.0, 2.0, cfg.phi_points);
    for base in MarginLoss::ALL {
        checks.push(verify_phi_clamp(&grid, &PhiParams::new(0.3, 0.6, base)?));
    }
    Ok(SuiteReport { checks })
}
