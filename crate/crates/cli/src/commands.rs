use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use orat_core::data::{gen_gaussian_2d, load_csv, load_idx_dir, save_csv};
use orat_core::eval::{evaluate, grid_search_km, km_grid, standard_attacks, RowLabel};
use orat_core::oracle::run_suite;
use orat_core::rng::substream;
use orat_core::trainer::{parse_kv, train};
use orat_core::{
    AttackConfig, Dataset, Error, FlipMap, GaussianSpec, Mlp, NoiseSpec, OratConfig, SuiteConfig,
};

use crate::args::{
    AttackChoice, ConfigArgs, EvalArgs, GenDataArgs, GridArgs, NoiseArgs, NoiseKind, Preset, TrainArgs,
    VerifyArgs,
};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if e.is_config() => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

fn usage(msg: impl Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow::anyhow!("{msg}"),
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Prints `# key = value` lines so every run documents its inputs.
fn print_resolved(command: &str, pairs: &[(&str, String)]) {
    println!("# orat {command}");
    for (k, v) in pairs {
        println!("# {k} = {v}");
    }
}

fn show_path(p: &Path) -> String {
    p.display().to_string()
}

/// A CSV file, or a directory holding `images-idx3-ubyte` and `labels-idx1-ubyte`.
pub fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let ds = if path.is_dir() {
        load_idx_dir(path)
    } else {
        load_csv(path, None)
    }
    .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ds)
}

fn noise_spec(args: &NoiseArgs) -> Result<Option<NoiseSpec>, Failure> {
    let spec = match args.noise {
        NoiseKind::None => {
            if args.gamma != 0.0 {
                return Err(usage("--gamma requires --noise symmetric or asymmetric"));
            }
            None
        }
        NoiseKind::Symmetric => Some(NoiseSpec::Symmetric { gamma: args.gamma }),
        NoiseKind::Asymmetric => Some(NoiseSpec::Asymmetric {
            gamma: args.gamma,
            flip_map: FlipMap::parse(&args.flip_map)?,
        }),
    };
    Ok(spec)
}

fn noise_pairs(args: &NoiseArgs) -> Vec<(&'static str, String)> {
    let mut pairs = vec![
        ("noise", format!("{:?}", args.noise).to_lowercase()),
        ("gamma", args.gamma.to_string()),
    ];
    if args.noise == NoiseKind::Asymmetric {
        pairs.push(("flip_map", args.flip_map.clone()));
    }
    pairs
}

/// Noise draws from its own stream so it never shifts other randomness.
fn apply_noise(ds: Dataset, spec: Option<&NoiseSpec>, seed: u64) -> anyhow::Result<Dataset> {
    match spec {
        None => Ok(ds),
        Some(spec) => Ok(spec.apply(&ds, &mut substream(seed, "noise", 0))?),
    }
}

fn corruption_line(ds: &Dataset) -> String {
    let flipped = match ds.clean_labels() {
        Some(clean) => clean.iter().zip(ds.labels()).filter(|(a, b)| a != b).count(),
        None => 0,
    };
    format!(
        "corruption rate: {:.4} ({flipped}/{} labels differ from ground truth)",
        ds.corruption_rate(),
        ds.len()
    )
}

pub fn gen_data(args: &GenDataArgs) -> CmdResult {
    let spec = noise_spec(&args.noise)?;
    let out = match (&args.out, args.preset) {
        (Some(p), _) => p.clone(),
        (None, Some(preset)) => PathBuf::from(format!("{}.csv", preset_name(preset))),
        (None, None) => return Err(usage("--out is required with --input")),
    };
    let source = match (args.preset, &args.input) {
        (Some(p), _) => format!("preset {}", preset_name(p)),
        (None, Some(path)) => show_path(path),
        (None, None) => unreachable!("clap requires --preset or --input"),
    };
    let mut pairs = vec![("source", source), ("seed", args.seed.to_string())];
    pairs.extend(noise_pairs(&args.noise));
    pairs.push(("out", show_path(&out)));
    print_resolved("gen-data", &pairs);

    let ds = match (args.preset, &args.input) {
        (Some(preset), _) => {
            let spec = match preset {
                Preset::Figure1Balanced => GaussianSpec::figure1_balanced(),
                Preset::Figure1Imbalanced => GaussianSpec::figure1_imbalanced(),
                Preset::Separable => GaussianSpec::separable(),
            };
            gen_gaussian_2d(&spec, &mut substream(args.seed, "gen-data", 0))?
        }
        (None, Some(path)) => load_dataset(path)?,
        (None, None) => unreachable!(),
    };
    let ds = apply_noise(ds, spec.as_ref(), args.seed)?;
    save_csv(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
    let outliers = ds.is_outlier().map_or(0, |m| m.iter().filter(|&&o| o).count());
    println!(
        "wrote {} samples ({outliers} flagged outliers) to {}",
        ds.len(),
        out.display()
    );
    println!("{}", corruption_line(&ds));
    Ok(())
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Figure1Balanced => "figure1-balanced",
        Preset::Figure1Imbalanced => "figure1-imbalanced",
        Preset::Separable => "separable",
    }
}

/// Merges defaults, the config file, `--set` pairs and the dedicated flags.
pub fn build_config(args: &ConfigArgs) -> Result<OratConfig, Failure> {
    let mut map = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(|error| Failure {
                    code: EXIT_USAGE,
                    error,
                })?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut put = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    put("mode", args.mode.clone());
    put("k", args.k.map(|v| v.to_string()));
    put("m", args.m.map(|v| v.to_string()));
    put("attack", args.attack.clone());
    put("epsilon", args.epsilon.map(|v| v.to_string()));
    put("pgd_steps", args.pgd_steps.map(|v| v.to_string()));
    put("eta", args.eta.map(|v| v.to_string()));
    put("epochs", args.epochs.map(|v| v.to_string()));
    put("batch_size", args.batch_size.map(|v| v.to_string()));
    put("hidden", args.hidden.clone());
    put("seed", args.seed.map(|v| v.to_string()));
    Ok(OratConfig::from_map(&map)?)
}

fn config_pairs(cfg: &OratConfig) -> Vec<(String, String)> {
    cfg.render()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn print_config(command: &str, cfg: &OratConfig, extra: Vec<(&str, String)>) {
    let owned = config_pairs(cfg);
    let mut pairs: Vec<(&str, String)> = owned.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    pairs.extend(extra);
    print_resolved(command, &pairs);
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn train_cmd(args: &TrainArgs) -> CmdResult {
    let cfg = build_config(&args.config)?;
    let noise = noise_spec(&args.noise)?;
    let ds = load_dataset(&args.data)?;
    let ds = apply_noise(ds, noise.as_ref(), cfg.seed)?;
    let resolved = cfg.resolve(ds.len())?;

    let mut extra = vec![("data", show_path(&args.data)), ("n", ds.len().to_string())];
    extra.extend(noise_pairs(&args.noise));
    extra.push(("resolved_k", resolved.range.k().to_string()));
    extra.push(("resolved_m", resolved.range.m().to_string()));
    extra.push(("resolved_attack", resolved.attack.tag()));
    extra.push(("out_dir", show_path(&args.out_dir)));
    print_config("train", &cfg, extra);
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }
    if noise.is_some() {
        println!("{}", corruption_line(&ds));
    }

    let out = train(&cfg, &ds)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    out.model.save(args.out_dir.join("model.ckpt"))?;
    write_file(&args.out_dir.join("history.csv"), &out.history.to_csv())?;
    write_file(&args.out_dir.join("config.txt"), &cfg.render())?;
    if let (Some(first), Some(last)) = (out.history.epochs.first(), out.history.epochs.last()) {
        println!(
            "epoch 1 objective {:.6}, epoch {} objective {:.6}, train accuracy {:.4}, lambda {:.4}, lambda_hat {:.4}",
            first.objective, last.epoch, last.objective, last.train_acc, last.lambda, last.lambda_hat
        );
    }
    println!(
        "wrote model.ckpt, history.csv and config.txt to {}",
        args.out_dir.display()
    );
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> CmdResult {
    let pgd = AttackConfig::pgd(args.epsilon, args.pgd_steps);
    let attacks = match args.attack {
        AttackChoice::None => vec![AttackConfig::none()],
        AttackChoice::Fgsm => vec![AttackConfig::fgsm(args.epsilon)],
        AttackChoice::Pgd => vec![pgd],
        AttackChoice::All => {
            let mut all = standard_attacks(args.epsilon);
            all.pop();
            all.push(pgd);
            all
        }
    };
    for a in &attacks {
        a.validate()?;
    }
    print_resolved(
        "eval",
        &[
            ("checkpoint", show_path(&args.checkpoint)),
            ("data", show_path(&args.data)),
            (
                "attacks",
                attacks
                    .iter()
                    .map(AttackConfig::tag)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("epsilon", args.epsilon.to_string()),
            ("pgd_steps", args.pgd_steps.to_string()),
            ("seed", args.seed.to_string()),
            ("defense", args.defense.clone()),
            ("noise_kind", args.noise_kind.clone()),
            ("gamma", args.gamma.to_string()),
            ("out", args.out.as_deref().map_or("stdout".into(), show_path)),
        ],
    );
    let model = Mlp::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let ds = load_dataset(&args.data)?;
    let label = RowLabel {
        defense: args.defense.clone(),
        noise_kind: args.noise_kind.clone(),
        gamma: args.gamma,
    };
    let report = evaluate(&model, &ds, &label, &attacks, args.seed)?;
    let csv = report.to_csv()?;
    match &args.out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    print!("# {}", report.summary());
    Ok(())
}

fn parse_grid(flag: &str, text: &str) -> Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("{flag}: `{s}` is not a non-negative integer")))
        })
        .collect()
}

pub fn grid_cmd(args: &GridArgs) -> CmdResult {
    let mut base_args = args.config.clone();
    // The grid supplies k and m; a placeholder satisfies the orat-mode check.
    if base_args.k.is_none() {
        base_args.k = Some(1);
    }
    if base_args.m.is_none() {
        base_args.m = Some(0);
    }
    let base = build_config(&base_args)?;
    let k_grid = parse_grid("--k-grid", &args.k_grid)?;
    let m_grid = parse_grid("--m-grid", &args.m_grid)?;
    let noise = noise_spec(&args.noise)?;
    let ds = load_dataset(&args.data)?;
    let ds = apply_noise(ds, noise.as_ref(), base.seed)?;
    let (train_ds, val_ds) = ds.split(args.val_fraction, base.seed)?;
    let val_attack = orat_core::eval::eval_pgd(base.attack.epsilon);

    let mut extra = vec![("data", show_path(&args.data))];
    extra.extend(noise_pairs(&args.noise));
    extra.extend([
        ("k_grid", args.k_grid.clone()),
        ("m_grid", args.m_grid.clone()),
        ("val_fraction", args.val_fraction.to_string()),
        ("n_train", train_ds.len().to_string()),
        ("n_val", val_ds.len().to_string()),
        ("val_attack", val_attack.tag()),
        ("out", show_path(&args.out)),
    ]);
    print_config("grid-search", &base, extra);

    let result = grid_search_km(&base, &km_grid(&k_grid, &m_grid), &train_ds, &val_ds, &val_attack)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    write_file(&args.out, &result.to_csv())?;
    match result.best() {
        Some(best) => println!(
            "best (k, m) = ({}, {}): validation robust accuracy {:.4}, accuracy {:.4}",
            best.k, best.m, best.val_robust_accuracy, best.val_accuracy
        ),
        None => return Err(usage("no valid (k, m) pair in the grid")),
    }
    Ok(())
}

pub fn verify_cmd(args: &VerifyArgs) -> CmdResult {
    let cfg = SuiteConfig {
        trials: args.trials,
        n_max: args.nmax,
        theorem_n_max: args.nmax.min(SuiteConfig::default().theorem_n_max),
        subgradient_points: args.points,
        mlp_trials: args.mlp_trials,
        phi_points: args.phi_points,
        seed: args.seed,
    };
    print_resolved(
        "verify",
        &[
            ("trials", cfg.trials.to_string()),
            ("nmax", cfg.n_max.to_string()),
            ("theorem_nmax", cfg.theorem_n_max.to_string()),
            ("points", cfg.subgradient_points.to_string()),
            ("mlp_trials", cfg.mlp_trials.to_string()),
            ("phi_points", cfg.phi_points.to_string()),
            ("seed", cfg.seed.to_string()),
            ("out", args.out.as_deref().map_or("none".into(), show_path)),
        ],
    );
    let report = run_suite(&cfg)?;
    print!("{}", report.summary());
    if let Some(path) = &args.out {
        write_file(path, &report.to_csv())?;
    }
    if report.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure {
            code: EXIT_VERIFY,
            error: anyhow::anyhow!("verification failed: {}", failed.join(", ")),
        })
    }
}
