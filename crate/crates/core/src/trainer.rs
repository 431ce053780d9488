//! Mini-batch training of `(theta, lambda, lambda_hat)` with an inner attack.
//!
//! Per batch: attack every sample with the current parameters, evaluate the
//! per-sample losses on the attacked inputs, then take one step on each
//! variable using the explicit subgradients from [`crate::losses`]:
//!
//! * `theta` descends along the batch mean of `coef_theta * d loss / d theta`
//!   (with momentum and weight decay),
//! * `lambda` descends along the batch mean of `g_lambda`,
//! * `lambda_hat` ascends along the batch mean of `g_lambda_hat`.
//!
//! All three share the learning rate `eta * schedule(epoch)`. Adversarial
//! training (AT) is the special case `k = n, m = 0` with every sample
//! weighted; standard training (ST) additionally skips the attack.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::attacks::{perturb, AttackConfig, AttackKind};
use crate::autograd::{Tape, Tensor};
use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy, robust_accuracy};
use crate::losses::{orat_sample_objective, orat_subgradients, DualVars, RankRange};
use crate::models::{Mlp, Sgd};
use crate::rng::{substream, OratRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Standard training: no attack, every sample weighted.
    St,
    /// Adversarial training: attack, every sample weighted.
    At,
    /// Ranked-range adversarial training with dual variables.
    Orat,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::St => "st",
            Mode::At => "at",
            Mode::Orat => "orat",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(Mode::St),
            "at" => Ok(Mode::At),
            "orat" => Ok(Mode::Orat),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (valid: st, at, orat)"
            ))),
        }
    }
}

/// Epoch to learning-rate multiplier table. The multiplier of epoch `e`
/// (1-based) is that of the last entry starting at or before `e`, else 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrSchedule(Vec<(usize, f64)>);

impl LrSchedule {
    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(e, _)| e);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("learning-rate schedule repeats an epoch".into()));
        }
        if let Some(&(_, f)) = entries.iter().find(|(_, f)| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config(format!("learning-rate multiplier {f} must be > 0")));
        }
        Ok(Self(entries))
    }

    pub fn multiplier(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .rev()
            .find(|&&(start, _)| start <= epoch)
            .map_or(1.0, |&(_, f)| f)
    }

    /// Parses `"20:0.1,40:0.01"`; `none` or empty means constant.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(Self::default());
        }
        let entries = text
            .split(',')
            .map(|entry| {
                let (e, f) = entry.split_once(':').ok_or_else(|| {
                    Error::Config(format!("schedule entry `{entry}` is not `epoch:multiplier`"))
                })?;
                Ok((
                    parse_value::<usize>("lr_schedule", e)?,
                    parse_value::<f64>("lr_schedule", f)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    fn render(&self) -> String {
        if self.0.is_empty() {
            return "none".into();
        }
        self.0
            .iter()
            .map(|(e, f)| format!("{e}:{f}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{}` for key `{key}`", text.trim())))
}

fn parse_bool(key: &str, text: &str) -> Result<bool> {
    match text.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "invalid boolean `{other}` for key `{key}`"
        ))),
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct OratConfig {
    pub mode: Mode,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub attack: AttackConfig,
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub lambda_init: f64,
    pub lambda_hat_init: f64,
    /// Keep `lambda`, `lambda_hat` at their initial values.
    pub freeze_duals: bool,
    /// Clamp both duals into `[0, bound]` after every step.
    pub dual_clamp: Option<f64>,
    /// Record PGD accuracy on the training set after every epoch.
    pub track_robust_acc: bool,
}

/// Keys accepted in config files, in rendering order.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "k",
    "m",
    "attack",
    "epsilon",
    "alpha",
    "pgd_steps",
    "random_start",
    "eta",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "lr_schedule",
    "seed",
    "hidden",
    "lambda_init",
    "lambda_hat_init",
    "freeze_duals",
    "dual_clamp",
    "track_robust_acc",
];

impl Default for OratConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Orat,
            k: None,
            m: None,
            attack: AttackConfig::pgd(0.1, 10),
            eta: 0.03,
            momentum: 0.9,
            weight_decay: 2e-4,
            epochs: 30,
            batch_size: 128,
            lr_schedule: LrSchedule::default(),
            seed: 0,
            hidden: vec![128],
            lambda_init: 0.0,
            lambda_hat_init: 1.0,
            freeze_duals: false,
            dual_clamp: None,
            track_robust_acc: false,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

impl OratConfig {
    /// Builds a config from key-value pairs. Unknown keys are errors; `k`,
    /// `m` and `epsilon` are required in `orat` mode and `epsilon` in `at`
    /// mode. `alpha` defaults to `epsilon / 4`.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(unknown) = map.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key `{unknown}`")));
        }
        let get = |key: &str| map.get(key).map(String::as_str);
        let mode: Mode = get("mode").map_or(Ok(Mode::Orat), str::parse)?;
        let required: &[&str] = match mode {
            Mode::Orat => &["k", "m", "epsilon"],
            Mode::At => &["epsilon"],
            Mode::St => &[],
        };
        if let Some(missing) = required.iter().find(|k| !map.contains_key(**k)) {
            return Err(Error::Config(format!(
                "missing config key `{missing}` (required in {} mode)",
                mode.name()
            )));
        }

        let mut cfg = OratConfig {
            mode,
            ..OratConfig::default()
        };
        if let Some(v) = get("k") {
            cfg.k = Some(parse_value("k", v)?);
        }
        if let Some(v) = get("m") {
            cfg.m = Some(parse_value("m", v)?);
        }
        let kind: AttackKind = get("attack").map_or(Ok(AttackKind::Pgd), str::parse)?;
        let epsilon = get("epsilon").map_or(Ok(0.0), |v| parse_value("epsilon", v))?;
        cfg.attack = AttackConfig {
            kind,
            epsilon,
            alpha: get("alpha").map_or(Ok(epsilon / 4.0), |v| parse_value("alpha", v))?,
            steps: get("pgd_steps").map_or(Ok(10), |v| parse_value("pgd_steps", v))?,
            random_start: get("random_start").map_or(Ok(true), |v| parse_bool("random_start", v))?,
            ..AttackConfig::pgd(epsilon, 10)
        };
        if kind == AttackKind::Fgsm && get("alpha").is_none() {
            cfg.attack.alpha = epsilon;
        }
        if let Some(v) = get("eta") {
            cfg.eta = parse_value("eta", v)?;
        }
        if let Some(v) = get("momentum") {
            cfg.momentum = parse_value("momentum", v)?;
        }
        if let Some(v) = get("weight_decay") {
            cfg.weight_decay = parse_value("weight_decay", v)?;
        }
        if let Some(v) = get("epochs") {
            cfg.epochs = parse_value("epochs", v)?;
        }
        if let Some(v) = get("batch_size") {
            cfg.batch_size = parse_value("batch_size", v)?;
        }
        if let Some(v) = get("lr_schedule") {
            cfg.lr_schedule = LrSchedule::parse(v)?;
        }
        if let Some(v) = get("seed") {
            cfg.seed = parse_value("seed", v)?;
        }
        if let Some(v) = get("hidden") {
            cfg.hidden = if v.trim() == "none" || v.trim().is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|h| parse_value("hidden", h))
                    .collect::<Result<_>>()?
            };
        }
        if let Some(v) = get("lambda_init") {
            cfg.lambda_init = parse_value("lambda_init", v)?;
        }
        if let Some(v) = get("lambda_hat_init") {
            cfg.lambda_hat_init = parse_value("lambda_hat_init", v)?;
        }
        if let Some(v) = get("freeze_duals") {
            cfg.freeze_duals = parse_bool("freeze_duals", v)?;
        }
        if let Some(v) = get("dual_clamp") {
            cfg.dual_clamp = match v.trim() {
                "none" => None,
                other => Some(parse_value("dual_clamp", other)?),
            };
        }
        if let Some(v) = get("track_robust_acc") {
            cfg.track_robust_acc = parse_bool("track_robust_acc", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Key-value pairs that reproduce this config through [`OratConfig::from_map`].
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |x| x.to_string());
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("mode", self.mode.name().into());
        put("k", opt(self.k));
        put("m", opt(self.m));
        put("attack", self.attack.kind.name().into());
        put("epsilon", self.attack.epsilon.to_string());
        put("alpha", self.attack.alpha.to_string());
        put("pgd_steps", self.attack.steps.to_string());
        put("random_start", self.attack.random_start.to_string());
        put("eta", self.eta.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_schedule", self.lr_schedule.render());
        put("seed", self.seed.to_string());
        put(
            "hidden",
            if self.hidden.is_empty() {
                "none".into()
            } else {
                self.hidden
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            },
        );
        put("lambda_init", self.lambda_init.to_string());
        put("lambda_hat_init", self.lambda_hat_init.to_string());
        put("freeze_duals", self.freeze_duals.to_string());
        put(
            "dual_clamp",
            self.dual_clamp.map_or("none".into(), |v| v.to_string()),
        );
        put("track_robust_acc", self.track_robust_acc.to_string());
        if self.k.is_none() {
            map.remove("k");
        }
        if self.m.is_none() {
            map.remove("m");
        }
        map
    }

    /// The config file text, one `key = value` per line in canonical order.
    pub fn render(&self) -> String {
        let map = self.to_map();
        let mut out = String::new();
        for key in CONFIG_KEYS {
            if let Some(v) = map.get(*key) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != Mode::St {
            self.attack.validate()?;
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.lambda_init.is_finite() && self.lambda_hat_init.is_finite()) {
            return Err(Error::Config("dual initial values must be finite".into()));
        }
        if let Some(b) = self.dual_clamp {
            if b.is_nan() || b < 0.0 {
                return Err(Error::Config("dual_clamp must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Resolves the rank range and attack for a dataset of `n` samples.
    /// Mode rules override `k`, `m` and the attack; overrides are reported
    /// as warnings.
    pub fn resolve(&self, n: usize) -> Result<Resolved> {
        self.validate()?;
        let mut warnings = Vec::new();
        let range = match self.mode {
            Mode::Orat => {
                let k = self
                    .k
                    .ok_or_else(|| Error::Config("missing config key `k`".into()))?;
                let m = self
                    .m
                    .ok_or_else(|| Error::Config("missing config key `m`".into()))?;
                RankRange::new(k, m, n)?
            }
            Mode::At | Mode::St => {
                if self.k.is_some_and(|k| k != n) || self.m.is_some_and(|m| m != 0) {
                    warnings.push(format!(
                        "{} mode overrides k, m to (n, 0) = ({n}, 0)",
                        self.mode.name()
                    ));
                }
                RankRange::full(n)?
            }
        };
        let attack = if self.mode == Mode::St {
            if self.attack.kind != AttackKind::None && self.attack.epsilon > 0.0 {
                warnings.push("st mode disables the training attack".into());
            }
            AttackConfig::none()
        } else {
            self.attack
        };
        Ok(Resolved {
            range,
            attack,
            warnings,
        })
    }

    /// Layer sizes of the model trained on `ds`.
    pub fn layer_sizes(&self, ds: &Dataset) -> Vec<usize> {
        let mut sizes = vec![ds.dim()];
        sizes.extend(&self.hidden);
        sizes.push(ds.num_classes());
        sizes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub range: RankRange,
    pub attack: AttackConfig,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's samples of the per-sample min-max objective,
    /// evaluated at the duals in force for each batch. For AT and ST this is
    /// the mean cross-entropy.
    pub objective: f64,
    pub lambda: f64,
    pub lambda_hat: f64,
    pub train_acc: f64,
    pub robust_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,objective,lambda,lambda_hat,train_acc,robust_acc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let robust = r.robust_acc.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.objective, r.lambda, r.lambda_hat, r.train_acc, robust, r.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::CsvFormat("unexpected history header".into()));
        }
        let epochs = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(Error::CsvFormat(format!("bad history row `{line}`")));
                }
                let num = |i: usize| {
                    f[i].parse::<f64>()
                        .map_err(|_| Error::CsvFormat(format!("bad number `{}`", f[i])))
                };
                Ok(EpochRecord {
                    epoch: f[0]
                        .parse()
                        .map_err(|_| Error::CsvFormat(format!("bad epoch `{}`", f[0])))?,
                    objective: num(1)?,
                    lambda: num(2)?,
                    lambda_hat: num(3)?,
                    train_acc: num(4)?,
                    robust_acc: if f[5].is_empty() { None } else { Some(num(5)?) },
                    lr: num(6)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { epochs })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Mlp,
    pub duals: DualVars,
    pub history: TrainHistory,
    pub warnings: Vec<String>,
}

/// State visible to an observer after each parameter update.
#[derive(Debug)]
pub struct StepView<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub model: &'a Mlp,
    pub duals: DualVars,
}

/// Diagnostics of a single batch update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    /// Sum over the batch of the per-sample min-max objective (before the
    /// update); plain losses under uniform weighting.
    pub objective_sum: f64,
    pub losses: Vec<f64>,
    pub g_lambda_sum: f64,
    pub g_lambda_hat_sum: f64,
}

/// How samples are weighted in the `theta` step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Every sample counts (AT / ST).
    Uniform,
    /// Samples weighted by the subgradient indicator, duals updated.
    RankedRange,
}

/// Everything a single update needs besides the model.
#[derive(Clone, Copy, Debug)]
pub struct StepSettings {
    pub range: RankRange,
    pub weighting: Weighting,
    pub lr: f64,
    pub freeze_duals: bool,
    pub dual_clamp: Option<f64>,
}

/// One update of `(theta, lambda, lambda_hat)` on an already attacked batch.
pub fn batch_update(
    model: &mut Mlp,
    opt: &mut Sgd,
    duals: &mut DualVars,
    x_adv: &Tensor,
    labels: &[usize],
    settings: &StepSettings,
) -> Result<BatchStats> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch as f64;
    let tape = Tape::new();
    let vars = model.on_tape(&tape, true);
    let losses_var = vars
        .forward(tape.constant(x_adv.clone()))?
        .cross_entropy(labels)?;
    let losses = losses_var.value().data().to_vec();
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("batch loss {bad}")));
    }

    let (mut objective_sum, mut g_lambda_sum, mut g_lambda_hat_sum) = (0.0, 0.0, 0.0);
    let mut weights = Vec::with_capacity(batch);
    for &loss in &losses {
        match settings.weighting {
            Weighting::Uniform => {
                objective_sum += loss;
                weights.push(scale);
            }
            Weighting::RankedRange => {
                objective_sum += orat_sample_objective(loss, *duals, settings.range);
                let s = orat_subgradients(loss, *duals, settings.range);
                weights.push(s.coef_theta * scale);
                g_lambda_sum += s.g_lambda;
                g_lambda_hat_sum += s.g_lambda_hat;
            }
        }
    }

    let root = losses_var.weighted_sum(&weights)?;
    let grads = vars.gradients(&tape.backward(root)?);
    drop(vars);
    opt.lr = settings.lr;
    opt.step(model, &grads)?;

    if settings.weighting == Weighting::RankedRange && !settings.freeze_duals {
        duals.lambda -= settings.lr * scale * g_lambda_sum;
        duals.lambda_hat += settings.lr * scale * g_lambda_hat_sum;
        if let Some(bound) = settings.dual_clamp {
            duals.lambda = duals.lambda.clamp(0.0, bound);
            duals.lambda_hat = duals.lambda_hat.clamp(0.0, bound);
        }
    }
    Ok(BatchStats {
        objective_sum,
        losses,
        g_lambda_sum,
        g_lambda_hat_sum,
    })
}

pub fn train(config: &OratConfig, ds: &Dataset) -> Result<TrainOutput> {
    train_with_observer(config, ds, |_| {})
}

/// [`train`] with a callback after every batch update.
pub fn train_with_observer<F>(config: &OratConfig, ds: &Dataset, mut observer: F) -> Result<TrainOutput>
where
    F: FnMut(&StepView<'_>),
{
    let resolved = config.resolve(ds.len())?;
    let mut model = Mlp::init(&config.layer_sizes(ds), &mut substream(config.seed, "init", 0))?;
    let mut opt = Sgd::new(&model, config.eta, config.momentum, config.weight_decay);
    let mut duals = DualVars::new(config.lambda_init, config.lambda_hat_init);
    let mut attack_rng: OratRng = substream(config.seed, "train-attack", 0);
    let weighting = match config.mode {
        Mode::Orat => Weighting::RankedRange,
        Mode::At | Mode::St => Weighting::Uniform,
    };
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let lr = config.eta * config.lr_schedule.multiplier(epoch);
        let settings = StepSettings {
            range: resolved.range,
            weighting,
            lr,
            freeze_duals: config.freeze_duals,
            dual_clamp: config.dual_clamp,
        };
        let mut objective = 0.0;
        for (batch, indices) in minibatches(ds.len(), config.batch_size, config.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let wrap = |e: Error| Error::Training {
                epoch,
                batch,
                detail: e.to_string(),
            };
            let (x, y) = ds.batch(&indices);
            let x_adv = perturb(&model, &x, &y, &resolved.attack, &mut attack_rng).map_err(wrap)?;
            let stats =
                batch_update(&mut model, &mut opt, &mut duals, &x_adv, &y, &settings).map_err(wrap)?;
            if !(duals.lambda.is_finite() && duals.lambda_hat.is_finite()) {
                return Err(wrap(Error::NonFinite("dual variables".into())));
            }
            objective += stats.objective_sum;
            observer(&StepView {
                epoch,
                batch,
                model: &model,
                duals,
            });
        }

        let train_acc = accuracy(&model, ds)?;
        let robust_acc = if config.track_robust_acc && resolved.attack.kind != AttackKind::None {
            let mut rng = substream(config.seed, "train-robust-acc", epoch as u64);
            Some(robust_accuracy(&model, ds, &resolved.attack, &mut rng)?)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            objective: objective / ds.len() as f64,
            lambda: duals.lambda,
            lambda_hat: duals.lambda_hat,
            train_acc,
            robust_acc,
            lr,
        });
    }

    Ok(TrainOutput {
        model,
        duals,
        history,
        warnings: resolved.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_2d, GaussianSpec};
    use crate::rng::seeded;

    fn orat_text() -> &'static str {
        "# comment line\nmode = orat\nk = 20\nm = 2  # trailing comment\nepsilon = 0.01\n"
    }

    #[test]
    fn config_parses_and_defaults_alpha() {
        let cfg = OratConfig::parse(orat_text()).unwrap();
        assert_eq!(cfg.mode, Mode::Orat);
        assert_eq!((cfg.k, cfg.m), (Some(20), Some(2)));
        assert_eq!(cfg.attack.alpha, 0.01 / 4.0);
        assert_eq!(cfg.attack.steps, 10);
        assert!(cfg.attack.random_start);
    }

    #[test]
    fn config_render_round_trips() {
        let mut cfg = OratConfig::parse(orat_text()).unwrap();
        cfg.lr_schedule = LrSchedule::parse("20:0.1,40:0.01").unwrap();
        cfg.dual_clamp = Some(5.0);
        cfg.hidden = vec![3, 4];
        assert_eq!(OratConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        let missing = OratConfig::parse("mode = orat\nk = 3\nm = 1\n").unwrap_err();
        assert!(missing.to_string().contains("`epsilon`"), "{missing}");
        let unknown = OratConfig::parse("mode = st\nbogus = 1\n").unwrap_err();
        assert!(unknown.to_string().contains("`bogus`"));
        assert!(OratConfig::parse("mode = st\nmode = at\n").is_err());
        assert!(OratConfig::parse("mode = st\nepochs\n").is_err());
        assert!(OratConfig::parse("mode = xx\n").is_err());
        assert!(OratConfig::parse("mode = st\neta = -1\n").is_err());
        assert!(OratConfig::parse("mode = st\n").is_ok());
    }

    #[test]
    fn mode_rules_override_range_and_attack() {
        let mut cfg = OratConfig::parse(orat_text()).unwrap();
        cfg.mode = Mode::At;
        let r = cfg.resolve(100).unwrap();
        assert_eq!(r.range, RankRange::full(100).unwrap());
        assert_eq!(r.warnings.len(), 1);
        cfg.mode = Mode::St;
        let r = cfg.resolve(100).unwrap();
        assert_eq!(r.attack.kind, AttackKind::None);
        cfg.mode = Mode::Orat;
        assert!(cfg.resolve(10).is_err());
    }

    #[test]
    fn schedule_multipliers() {
        let s = LrSchedule::parse("20:0.1, 40:0.01").unwrap();
        assert_eq!(s.multiplier(1), 1.0);
        assert_eq!(s.multiplier(19), 1.0);
        assert_eq!(s.multiplier(20), 0.1);
        assert_eq!(s.multiplier(45), 0.01);
        assert!(LrSchedule::parse("5:0").is_err());
        assert!(LrSchedule::parse("5:0.1,5:0.2").is_err());
        assert_eq!(LrSchedule::parse("none").unwrap(), LrSchedule::default());
    }

    #[test]
    fn dual_step_matches_subgradient_sums() {
        // Losses well inside both hinges: every indicator is strictly interior.
        let mut model = Mlp::init(&[2, 3, 2], &mut seeded(1)).unwrap();
        let mut opt = Sgd::new(&model, 0.1, 0.0, 0.0);
        let x = Tensor::matrix(4, 2, vec![0.1, 0.2, 0.8, 0.3, 0.4, 0.9, 0.5, 0.5]).unwrap();
        let y = vec![0, 1, 0, 1];
        let range = RankRange::new(30, 5, 40).unwrap();
        let start = DualVars::new(0.01, 50.0);
        let mut duals = start;
        let settings = StepSettings {
            range,
            weighting: Weighting::RankedRange,
            lr: 0.1,
            freeze_duals: false,
            dual_clamp: None,
        };
        let frozen = model.clone();
        let stats = batch_update(&mut model, &mut opt, &mut duals, &x, &y, &settings).unwrap();
        let losses = frozen.losses(&x, &y).unwrap();
        let (mut gl, mut glh) = (0.0, 0.0);
        for &l in &losses {
            assert!(l > start.lambda + 1e-6 && start.lambda_hat > l - start.lambda + 1e-6);
            let s = orat_subgradients(l, start, range);
            gl += s.g_lambda;
            glh += s.g_lambda_hat;
        }
        assert_eq!(stats.g_lambda_sum, gl);
        assert_eq!(duals.lambda, start.lambda - 0.1 / 4.0 * gl);
        assert_eq!(duals.lambda_hat, start.lambda_hat + 0.1 / 4.0 * glh);
        // Interior case: each sample has g_lambda = 25/40 - 1, g_lambda_hat = 35/40 - 1.
        assert!((gl - 4.0 * (25.0 / 40.0 - 1.0)).abs() < 1e-15);
        assert!((glh - 4.0 * (35.0 / 40.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_duals_stay_put() {
        let mut model = Mlp::init(&[2, 2], &mut seeded(1)).unwrap();
        let mut opt = Sgd::new(&model, 0.1, 0.0, 0.0);
        let mut duals = DualVars::new(0.0, 1e6);
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.8, 0.3]).unwrap();
        let settings = StepSettings {
            range: RankRange::new(10, 0, 10).unwrap(),
            weighting: Weighting::RankedRange,
            lr: 0.1,
            freeze_duals: true,
            dual_clamp: None,
        };
        batch_update(&mut model, &mut opt, &mut duals, &x, &[0, 1], &settings).unwrap();
        assert_eq!(duals, DualVars::new(0.0, 1e6));
    }

    #[test]
    fn standard_training_separates_separable_data() {
        let ds = gen_gaussian_2d(&GaussianSpec::separable(), &mut seeded(4)).unwrap();
        let cfg = OratConfig {
            mode: Mode::St,
            epochs: 500,
            batch_size: 100,
            eta: 0.1,
            hidden: vec![8],
            ..OratConfig::default()
        };
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.history.epochs.last().unwrap().train_acc, 1.0);
        assert_eq!(out.history.epochs.len(), 500);
    }

    #[test]
    fn zero_epsilon_orat_is_aorr_training_and_deterministic() {
        let ds = gen_gaussian_2d(&GaussianSpec::figure1_balanced(), &mut seeded(2)).unwrap();
        let mut cfg = OratConfig::parse(
            "mode = orat\nk = 150\nm = 5\nepsilon = 0\nepochs = 3\nbatch_size = 50\nhidden = 4\n",
        )
        .unwrap();
        cfg.attack.alpha = 0.01;
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        // With epsilon = 0 the attack leaves inputs untouched, so the run
        // coincides with the same config without any attack.
        let mut none = cfg.clone();
        none.attack = AttackConfig::none();
        let c = train(&none, &ds).unwrap();
        assert_eq!(a.model, c.model);
        assert_eq!(a.duals, c.duals);
    }

    #[test]
    fn history_csv_round_trip() {
        let h = TrainHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    objective: 0.8123,
                    lambda: -0.1,
                    lambda_hat: 1.25,
                    train_acc: 0.5,
                    robust_acc: None,
                    lr: 0.03,
                },
                EpochRecord {
                    epoch: 2,
                    objective: 0.5,
                    lambda: 0.0,
                    lambda_hat: 1.0,
                    train_acc: 0.75,
                    robust_acc: Some(0.25),
                    lr: 0.003,
                },
            ],
        };
        let text = h.to_csv();
        assert!(text.starts_with("epoch,objective,lambda,lambda_hat,train_acc,robust_acc,lr\n"));
        assert_eq!(TrainHistory::from_csv(&text).unwrap(), h);
    }
}
