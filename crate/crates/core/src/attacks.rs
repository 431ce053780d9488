//! l-infinity attacks against an [`Mlp`]: projection, FGSM and PGD.
//!
//! Every attack maximises the per-sample cross-entropy. Samples in a batch
//! do not interact, so one backward pass through the summed loss yields
//! every sample's input gradient at once.

use rand::Rng;

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::Mlp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::Config(format!(
                "unknown attack `{other}` (valid: none, fgsm, pgd)"
            ))),
        }
    }
}

/// Box constraint on inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self { low: 0.0, high: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub bounds: Bounds,
}

impl AttackConfig {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            epsilon: 0.0,
            alpha: 0.0,
            steps: 1,
            random_start: false,
            bounds: Bounds::default(),
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            bounds: Bounds::default(),
        }
    }

    /// PGD with step size `epsilon / 4` and a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            alpha: epsilon / 4.0,
            steps,
            random_start: true,
            bounds: Bounds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.kind != AttackKind::None && self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        // alpha = 0 only makes sense for the identity attack at epsilon = 0.
        if self.kind != AttackKind::None && !(self.alpha > 0.0 || (self.alpha == 0.0 && self.epsilon == 0.0))
        {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.bounds.low.is_nan() || self.bounds.high.is_nan() || self.bounds.low > self.bounds.high {
            return Err(Error::Config("attack bounds are inverted".into()));
        }
        Ok(())
    }

    /// Short tag such as `pgd20` or `fgsm` for reports.
    pub fn tag(&self) -> String {
        match self.kind {
            AttackKind::None => "natural".into(),
            AttackKind::Fgsm => "fgsm".into(),
            AttackKind::Pgd => format!("pgd{}", self.steps),
        }
    }
}

/// Clamp into the `epsilon` ball around `x_orig`, then into the box.
pub fn project_linf(x_adv: &Tensor, x_orig: &Tensor, epsilon: f64, bounds: Bounds) -> Result<Tensor> {
    if x_adv.shape() != x_orig.shape() {
        return Err(Error::Shape {
            op: "project_linf",
            left: x_adv.shape().to_vec(),
            right: x_orig.shape().to_vec(),
        });
    }
    let data = x_adv
        .data()
        .iter()
        .zip(x_orig.data())
        .map(|(&a, &o)| a.clamp(o - epsilon, o + epsilon).clamp(bounds.low, bounds.high))
        .collect();
    Tensor::new(x_adv.shape().to_vec(), data)
}

/// `d sum_i loss_i / d x` and the per-sample losses.
pub fn input_gradient(model: &Mlp, x: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let tape = Tape::new();
    let vars = model.on_tape(&tape, false);
    let xv = tape.leaf(x.clone());
    let losses = vars.forward(xv)?.cross_entropy(labels)?;
    let per_sample = losses.value().data().to_vec();
    let mut grads = tape.backward(losses.sum())?;
    let g = grads
        .take(xv)
        .ok_or_else(|| Error::Contract("input gradient was not produced".into()))?;
    Ok((g, per_sample))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn ascent_step(
    model: &Mlp,
    x_orig: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    alpha: f64,
    epsilon: f64,
    bounds: Bounds,
    step: usize,
) -> Result<Tensor> {
    let (g, _) = input_gradient(model, x_adv, labels).map_err(|e| Error::Attack {
        step,
        detail: e.to_string(),
    })?;
    if !g.is_finite() {
        return Err(Error::Attack {
            step,
            detail: "non-finite input gradient".into(),
        });
    }
    let moved = x_adv
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &gi)| a + alpha * sign(gi))
        .collect();
    project_linf(
        &Tensor::new(x_adv.shape().to_vec(), moved)?,
        x_orig,
        epsilon,
        bounds,
    )
}

/// Largest l-infinity distance to `x_orig`, and whether every coordinate is in the box.
pub fn feasibility(x_adv: &Tensor, x_orig: &Tensor, bounds: Bounds) -> (f64, bool) {
    let dist = x_adv
        .data()
        .iter()
        .zip(x_orig.data())
        .map(|(a, o)| (a - o).abs())
        .fold(0.0, f64::max);
    let inside = x_adv
        .data()
        .iter()
        .all(|v| (bounds.low..=bounds.high).contains(v));
    (dist, inside)
}

fn check_feasible(x_adv: &Tensor, x_orig: &Tensor, epsilon: f64, bounds: Bounds) -> Result<()> {
    let (dist, inside) = feasibility(x_adv, x_orig, bounds);
    if dist > epsilon + 1e-12 || !inside {
        return Err(Error::Contract(format!(
            "infeasible adversarial batch: distance {dist} (epsilon {epsilon}), inside box: {inside}"
        )));
    }
    Ok(())
}

/// Single signed-gradient step of size `epsilon`.
pub fn fgsm(model: &Mlp, x: &Tensor, labels: &[usize], epsilon: f64, bounds: Bounds) -> Result<Tensor> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let out = ascent_step(model, x, x, labels, epsilon, epsilon, bounds, 0)?;
    check_feasible(&out, x, epsilon, bounds)?;
    Ok(out)
}

/// `steps` rounds of signed-gradient ascent with projection, optionally from
/// a uniform random point of the ball.
pub fn pgd<R: Rng + ?Sized>(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut x_adv = if cfg.random_start {
        let noisy = x
            .data()
            .iter()
            .map(|&v| v + (2.0 * rng.gen::<f64>() - 1.0) * eps)
            .collect();
        project_linf(&Tensor::new(x.shape().to_vec(), noisy)?, x, eps, cfg.bounds)?
    } else {
        x.clone()
    };
    for step in 0..cfg.steps {
        x_adv = ascent_step(model, x, &x_adv, labels, cfg.alpha, eps, cfg.bounds, step)?;
    }
    check_feasible(&x_adv, x, eps, cfg.bounds)?;
    Ok(x_adv)
}

/// Dispatches on `cfg.kind`; `None` returns the clean input.
pub fn perturb<R: Rng + ?Sized>(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::None => Ok(x.clone()),
        AttackKind::Fgsm => fgsm(model, x, labels, cfg.epsilon, cfg.bounds),
        AttackKind::Pgd => pgd(model, x, labels, cfg, rng),
    }
}
