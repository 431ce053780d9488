//! Natural and robust accuracy, `(k, m)` grid search and CSV reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::attacks::{feasibility, perturb, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Mlp;
use crate::rng::{substream, OratRng};
use crate::trainer::{train, Mode, OratConfig};

/// Rows per forward pass when scoring a dataset.
const CHUNK: usize = 500;

fn check_dims(model: &Mlp, ds: &Dataset) -> Result<()> {
    if model.input_dim() != ds.dim() || model.num_classes() < ds.num_classes() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![model.input_dim(), model.num_classes()],
            right: vec![ds.dim(), ds.num_classes()],
        });
    }
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    Ok(())
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(move |s| (s..(s + CHUNK).min(n)).collect())
}

/// Fraction of samples whose arg-max logit (lowest index on ties) equals the label.
pub fn accuracy(model: &Mlp, ds: &Dataset) -> Result<f64> {
    check_dims(model, ds)?;
    let mut correct = 0usize;
    for idx in chunks(ds.len()) {
        let (x, y) = ds.batch(&idx);
        correct += model.predict(&x)?.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy on inputs attacked against `model` itself. Every attacked batch
/// is checked against the ball and box constraints.
pub fn robust_accuracy(model: &Mlp, ds: &Dataset, attack: &AttackConfig, rng: &mut OratRng) -> Result<f64> {
    attack.validate()?;
    check_dims(model, ds)?;
    let mut correct = 0usize;
    for idx in chunks(ds.len()) {
        let (x, y) = ds.batch(&idx);
        let x_adv = perturb(model, &x, &y, attack, rng)?;
        let (dist, inside) = feasibility(&x_adv, &x, attack.bounds);
        if attack.kind != AttackKind::None && (dist > attack.epsilon + 1e-12 || !inside) {
            return Err(Error::Contract(format!(
                "attacked input at distance {dist} (epsilon {}), inside box: {inside}",
                attack.epsilon
            )));
        }
        correct += model
            .predict(&x_adv)?
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Evaluation PGD: 20 steps of `epsilon / 4` from a random start.
pub fn eval_pgd(epsilon: f64) -> AttackConfig {
    AttackConfig::pgd(epsilon, 20)
}

/// The natural / FGSM / PGD-20 attack set at one radius.
pub fn standard_attacks(epsilon: f64) -> Vec<AttackConfig> {
    vec![
        AttackConfig::none(),
        AttackConfig::fgsm(epsilon),
        eval_pgd(epsilon),
    ]
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub defense: String,
    pub noise_kind: String,
    pub gamma: f64,
    pub epsilon: f64,
    /// `natural`, `fgsm` or `pgd<steps>`.
    pub attack: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 6] =
        ["defense", "noise_kind", "gamma", "epsilon", "attack", "accuracy"];

    pub fn push(&mut self, row: EvalRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::Contract(format!(
                "accuracy {} outside [0, 1]",
                row.accuracy
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.defense.clone(),
                r.noise_kind.clone(),
                r.gamma.to_string(),
                r.epsilon.to_string(),
                r.attack.clone(),
                r.accuracy.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::CsvFormat(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::CsvFormat(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        if r.headers()?.iter().ne(Self::CSV_HEADER) {
            return Err(Error::CsvFormat("unexpected report header".into()));
        }
        let mut report = Self::default();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::CsvFormat(format!("bad number `{}` in report", &rec[i])))
            };
            report.push(EvalRow {
                defense: rec[0].to_string(),
                noise_kind: rec[1].to_string(),
                gamma: num(2)?,
                epsilon: num(3)?,
                attack: rec[4].to_string(),
                accuracy: num(5)?,
            })?;
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// One line per defense: `defense  natural=..  fgsm=..  pgd20=..` in percent.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut seen: Vec<(&str, &str, String, String)> = Vec::new();
        for r in &self.rows {
            let key = (
                r.defense.as_str(),
                r.noise_kind.as_str(),
                r.gamma.to_string(),
                r.epsilon.to_string(),
            );
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        for (defense, noise, gamma, eps) in seen {
            let _ = write!(out, "{defense:<8} noise={noise}:{gamma} eps={eps}");
            for r in self.rows.iter().filter(|r| {
                r.defense == defense
                    && r.noise_kind == noise
                    && r.gamma.to_string() == gamma
                    && r.epsilon.to_string() == eps
            }) {
                let _ = write!(out, "  {}={:.2}", r.attack, 100.0 * r.accuracy);
            }
            out.push('\n');
        }
        out
    }
}

/// Describes the model being evaluated, for report rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RowLabel {
    pub defense: String,
    pub noise_kind: String,
    pub gamma: f64,
}

/// Evaluates `model` under each attack. Attack `i` draws from its own
/// stream derived from `(seed, tag)`, so adding attacks never changes others.
pub fn evaluate(
    model: &Mlp,
    ds: &Dataset,
    label: &RowLabel,
    attacks: &[AttackConfig],
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for attack in attacks {
        let tag = attack.tag();
        let mut rng = substream(seed, &format!("eval-{tag}"), 0);
        report.push(EvalRow {
            defense: label.defense.clone(),
            noise_kind: label.noise_kind.clone(),
            gamma: label.gamma,
            epsilon: attack.epsilon,
            attack: tag,
            accuracy: robust_accuracy(model, ds, attack, &mut rng)?,
        })?;
    }
    Ok(report)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cartesian product of the two grids, `k` major.
pub fn km_grid(k_grid: &[usize], m_grid: &[usize]) -> Vec<(usize, usize)> {
    k_grid
        .iter()
        .flat_map(|&k| m_grid.iter().map(move |&m| (k, m)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub k: usize,
    pub m: usize,
    pub val_accuracy: f64,
    pub val_robust_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridResult {
    /// Sorted by validation robust accuracy, descending; ties keep grid order.
    pub rows: Vec<GridRow>,
    pub warnings: Vec<String>,
}

impl GridResult {
    pub const CSV_HEADER: &'static str = "rank,k,m,val_accuracy,val_robust_accuracy";

    pub fn best(&self) -> Option<&GridRow> {
        self.rows.first()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                r.k,
                r.m,
                r.val_accuracy,
                r.val_robust_accuracy
            );
        }
        out
    }
}

/// Trains one model per `(k, m)` on `train_ds` and ranks them by robust
/// accuracy on `val_ds` under `val_attack`.
///
/// Duplicates are dropped (first occurrence kept) and invalid pairs are
/// skipped with a warning. The pair `(n, 0)` is trained in AT mode. Every
/// cell shares `base.seed`, so cells differ only in `(k, m)`, and all cells
/// face the same validation attack stream.
pub fn grid_search_km(
    base: &OratConfig,
    grid: &[(usize, usize)],
    train_ds: &Dataset,
    val_ds: &Dataset,
    val_attack: &AttackConfig,
) -> Result<GridResult> {
    let n = train_ds.len();
    let mut result = GridResult::default();
    let mut seen = BTreeSet::new();
    for &(k, m) in grid {
        if !seen.insert((k, m)) {
            continue;
        }
        if !(m < k && k <= n) {
            result.warnings.push(format!(
                "skipping invalid grid entry (k, m) = ({k}, {m}); need 0 <= m < k <= {n}"
            ));
            continue;
        }
        let mut cfg = base.clone();
        if (k, m) == (n, 0) {
            cfg.mode = Mode::At;
            cfg.k = None;
            cfg.m = None;
        } else {
            cfg.mode = Mode::Orat;
            cfg.k = Some(k);
            cfg.m = Some(m);
        }
        let out = train(&cfg, train_ds)?;
        let mut rng = substream(base.seed, "grid-validation", 0);
        result.rows.push(GridRow {
            k,
            m,
            val_accuracy: accuracy(&out.model, val_ds)?,
            val_robust_accuracy: robust_accuracy(&out.model, val_ds, val_attack, &mut rng)?,
        });
    }
    if result.rows.is_empty() {
        return Err(Error::Config("grid contains no valid (k, m) pair".into()));
    }
    result
        .rows
        .sort_by(|a, b| b.val_robust_accuracy.total_cmp(&a.val_robust_accuracy));
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::data::{gen_gaussian_2d, GaussianSpec};
    use crate::models::{argmax_rows, Layer};
    use crate::rng::seeded;
    use rand::Rng;

    fn constant_model(dim: usize, classes: usize) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::vector(vec![0.5; classes]),
        }])
        .unwrap()
    }

    fn random_ds(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
        let mut rng = seeded(seed);
        let x = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen::<f64>()).collect()).unwrap();
        Dataset::new(x, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn constant_logits_predict_class_zero() {
        let ds = random_ds(1, 1001, 3, 2);
        let acc = accuracy(&constant_model(3, 2), &ds).unwrap();
        assert_eq!(acc, 501.0 / 1001.0);
    }

    #[test]
    fn accuracy_matches_per_sample_loop() {
        let ds = random_ds(2, 1234, 4, 3);
        let model = Mlp::init(&[4, 6, 3], &mut seeded(3)).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = Tensor::matrix(1, 4, ds.features().row(i).to_vec()).unwrap();
            if argmax_rows(&model.logits(&x).unwrap())[0] == ds.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&model, &ds).unwrap(), correct as f64 / ds.len() as f64);
    }

    #[test]
    fn memorising_model_scores_one() {
        // Labels follow the sign of the first feature minus one half.
        let mut rng = seeded(4);
        let n = 300;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen::<f64>()).collect();
        let y = (0..n).map(|i| usize::from(x[2 * i] > 0.5)).collect();
        let ds = Dataset::new(Tensor::matrix(n, 2, x).unwrap(), y, 2).unwrap();
        let model = Mlp::from_layers(vec![Layer {
            weight: Tensor::matrix(2, 2, vec![-1.0, 1.0, 0.0, 0.0]).unwrap(),
            bias: Tensor::vector(vec![0.5, -0.5]),
        }])
        .unwrap();
        assert_eq!(accuracy(&model, &ds).unwrap(), 1.0);
    }

    #[test]
    fn zero_epsilon_robust_accuracy_equals_accuracy() {
        let ds = random_ds(5, 700, 4, 3);
        let model = Mlp::init(&[4, 6, 3], &mut seeded(6)).unwrap();
        let natural = accuracy(&model, &ds).unwrap();
        for attack in [AttackConfig::fgsm(0.0), eval_pgd(0.0), AttackConfig::none()] {
            assert_eq!(
                robust_accuracy(&model, &ds, &attack, &mut seeded(0)).unwrap(),
                natural
            );
        }
    }

    #[test]
    fn untrained_model_under_large_attack_is_near_chance() {
        let ds = random_ds(7, 600, 5, 3);
        let model = Mlp::init(&[5, 16, 3], &mut seeded(8)).unwrap();
        let acc = robust_accuracy(&model, &ds, &eval_pgd(0.5), &mut seeded(9)).unwrap();
        assert!(acc <= 1.0 / 3.0 + 0.1, "{acc}");
    }

    #[test]
    fn report_csv_round_trips() {
        let mut report = EvalReport::default();
        for (attack, acc) in [("natural", 0.9731), ("fgsm", 1.0 / 3.0), ("pgd20", 0.0)] {
            report
                .push(EvalRow {
                    defense: "orat".into(),
                    noise_kind: "symmetric".into(),
                    gamma: 0.2,
                    epsilon: 0.1,
                    attack: attack.into(),
                    accuracy: acc,
                })
                .unwrap();
        }
        let text = report.to_csv().unwrap();
        assert!(text.starts_with("defense,noise_kind,gamma,epsilon,attack,accuracy\n"));
        assert_eq!(EvalReport::from_csv(&text).unwrap(), report);
        assert!(report.summary().contains("pgd20=0.00"));
    }

    #[test]
    fn report_rejects_out_of_range_accuracy() {
        let row = EvalRow {
            defense: "at".into(),
            noise_kind: "none".into(),
            gamma: 0.0,
            epsilon: 0.1,
            attack: "natural".into(),
            accuracy: 1.5,
        };
        assert!(EvalReport::default().push(row).is_err());
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    fn small_base() -> OratConfig {
        OratConfig::parse(
            "mode = orat\nk = 1\nm = 0\nepsilon = 0.02\npgd_steps = 3\nepochs = 4\nbatch_size = 50\nhidden = 4\neta = 0.05\n",
        )
        .unwrap()
    }

    #[test]
    fn grid_of_n_zero_reproduces_at() {
        let ds = gen_gaussian_2d(&GaussianSpec::figure1_balanced(), &mut seeded(3)).unwrap();
        let (train_ds, val_ds) = ds.split(0.1, 3).unwrap();
        let n = train_ds.len();
        let base = small_base();
        let attack = AttackConfig::pgd(0.02, 3);
        let grid = grid_search_km(&base, &[(n, 0), (n, 0)], &train_ds, &val_ds, &attack).unwrap();
        assert_eq!(grid.rows.len(), 1);

        let at = OratConfig {
            mode: Mode::At,
            ..base.clone()
        };
        let model = train(&at, &train_ds).unwrap().model;
        let mut rng = substream(base.seed, "grid-validation", 0);
        assert_eq!(
            grid.rows[0].val_robust_accuracy,
            robust_accuracy(&model, &val_ds, &attack, &mut rng).unwrap()
        );
    }

    #[test]
    fn grid_skips_invalid_and_sorts() {
        let ds = gen_gaussian_2d(&GaussianSpec::figure1_balanced(), &mut seeded(4)).unwrap();
        let (train_ds, val_ds) = ds.split(0.1, 4).unwrap();
        let n = train_ds.len();
        let grid = [(n, 0), (n + 1, 0), (n, 2), (5, 5), (n - 10, 2)];
        let res = grid_search_km(
            &small_base(),
            &grid,
            &train_ds,
            &val_ds,
            &AttackConfig::pgd(0.02, 3),
        )
        .unwrap();
        assert_eq!(res.rows.len(), 3);
        assert_eq!(res.warnings.len(), 2);
        assert!(res
            .rows
            .windows(2)
            .all(|w| w[0].val_robust_accuracy >= w[1].val_robust_accuracy));
        assert!(res
            .to_csv()
            .starts_with("rank,k,m,val_accuracy,val_robust_accuracy\n"));
    }

    #[test]
    fn km_grid_is_k_major() {
        assert_eq!(km_grid(&[10, 8], &[0, 1]), vec![(10, 0), (10, 1), (8, 0), (8, 1)]);
    }
}
