use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flatgrad_core::attack::{fgsm, fgsm_direction, AttackSpec};
use flatgrad_core::config::{ExperimentConfig, RawConfig};
use flatgrad_core::data::{fetch_mnist, Dataset, FetchStatus, DEFAULT_MIRROR};
use flatgrad_core::experiment::{run_trials_with_models, Mnist};
use flatgrad_core::report::{
    emit_report, parse_lock, run_cells, table_configs, ResultRow, ResultTable, Scale, TableId,
};
use flatgrad_core::train::evaluate;
use flatgrad_core::{checkpoint, gradcheck};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "flatgrad",
    version,
    about = "L1 input-gradient penalty and FGSM adversarial training on MNIST"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)] // parsed once
enum Command {
    /// Install the four canonical MNIST files, verifying their checksums.
    FetchData {
        #[arg(long, default_value = "data/mnist")]
        dir: PathBuf,
        /// Base URL or local directory holding the files (optionally .gz).
        #[arg(long, default_value = DEFAULT_MIRROR)]
        source: String,
    },
    /// Train a configuration (or grid) and write a report with checkpoints.
    Train(ConfigArgs),
    /// FGSM-attack a checkpoint on the test set and check the attack invariants.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        epsilon: f64,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Attack only the first n test images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
    },
    /// Clean and FGSM accuracy of a checkpoint on the test set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        epsilon: f64,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
    },
    /// Run one of the predefined experiment grids, or rerun a config.lock.
    Repro {
        /// table2, table3 or table4 (omit with --lock).
        table: Option<String>,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Rerun every cell of this config.lock instead of a table grid.
        #[arg(long)]
        lock: Option<PathBuf>,
    },
    /// Check reverse-mode gradients against finite differences on random toy models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
}

/// Flags mirroring the configuration keys; they override the file.
#[derive(Args)]
struct ConfigArgs {
    /// A `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    penalty: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    stop_rule: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    base_seed: Option<String>,
    #[arg(long)]
    repetitions: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    train_subset: Option<String>,
    #[arg(long)]
    smoothing: Option<String>,
    #[arg(long)]
    exclude_failed: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Vec<ExperimentConfig>> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        let mut flags = RawConfig::default();
        let pairs = [
            ("arch", &self.arch),
            ("mode", &self.mode),
            ("lambda", &self.lambda),
            ("epsilon", &self.epsilon),
            ("penalty", &self.penalty),
            ("epochs", &self.epochs),
            ("stop_rule", &self.stop_rule),
            ("batch_size", &self.batch_size),
            ("precision", &self.precision),
            ("base_seed", &self.base_seed),
            ("repetitions", &self.repetitions),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("train_subset", &self.train_subset),
            ("smoothing", &self.smoothing),
            ("exclude_failed", &self.exclude_failed),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                flags.set(k, v)?;
            }
        }
        raw.merge(&flags);
        Ok(raw.expand()?)
    }
}

/// Accuracies must be finite fractions and every trial must be accounted for.
fn check_table(table: &ResultTable) -> Result<()> {
    for (k, row) in table.rows.iter().enumerate() {
        let r = &row.report;
        for o in &r.outcomes {
            for v in [o.clean, o.adv] {
                if !(0.0..=1.0).contains(&v) {
                    bail!("cell {}: seed {} reported accuracy {v}", k + 1, o.seed);
                }
            }
            if o.history.len() != o.epochs_run {
                bail!("cell {}: seed {} history is incomplete", k + 1, o.seed);
            }
        }
        if r.outcomes.len() + r.failures.len() != row.config.repetitions {
            bail!("cell {}: trials missing from the report", k + 1);
        }
    }
    Ok(())
}

fn print_summary(table: &ResultTable, dir: &Path) {
    for (k, row) in table.rows.iter().enumerate() {
        let c = &row.config;
        println!(
            "cell {}: {} {} λ={} ε={} {}  clean {:.2} ± {:.2}  adv {:.2} ± {:.2}",
            k + 1,
            c.arch,
            c.mode,
            c.lambda,
            c.epsilon,
            c.penalty,
            100.0 * row.report.clean.mean,
            100.0 * row.report.clean.std,
            100.0 * row.report.adv.mean,
            100.0 * row.report.adv.std
        );
    }
    println!("report written to {}", dir.display());
}

fn train(args: &ConfigArgs) -> Result<()> {
    let cells = args.resolve()?;
    let out = cells[0].out_dir.clone();
    if cells
        .iter()
        .any(|c| c.out_dir != out || c.data_dir != cells[0].data_dir)
    {
        bail!("all grid cells must share data_dir and out_dir");
    }
    let data = Mnist::load(&cells[0].data_dir)
        .context("loading MNIST (run `flatgrad fetch-data` first)")?;
    let models_dir = out.join("models");
    std::fs::create_dir_all(&models_dir)
        .with_context(|| format!("creating {}", models_dir.display()))?;
    let mut rows = Vec::new();
    for (k, c) in cells.iter().enumerate() {
        let (report, models) =
            run_trials_with_models(&c.trial_spec()?, &data, &c.seeds(), c.exclude_failed)?;
        for (seed, m) in &models {
            checkpoint::save(
                m,
                &models_dir.join(format!("cell{}_seed{seed}.ckpt", k + 1)),
            )?;
        }
        rows.push(ResultRow {
            config: c.clone(),
            report,
        });
    }
    let table = ResultTable {
        table: TableId::Run,
        scale: None,
        rows,
    };
    emit_report(&table, &out)?;
    print_summary(&table, &out);
    check_table(&table)
}

fn repro(
    table: Option<&str>,
    scale: &str,
    data_dir: &Path,
    out_dir: Option<&Path>,
    base_seed: u64,
    lock: Option<&Path>,
) -> Result<()> {
    let (id, scale, cells) = match (table, lock) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let lock = parse_lock(&text)?;
            // data location is not part of a cell's fingerprint
            let cells = lock
                .cells
                .into_iter()
                .map(|c| ExperimentConfig {
                    data_dir: data_dir.to_path_buf(),
                    ..c
                })
                .collect();
            (lock.table, lock.scale, cells)
        }
        (Some(t), None) => {
            let id: TableId = t.parse()?;
            let scale: Scale = scale.parse()?;
            (
                id,
                Some(scale),
                table_configs(id, scale, data_dir, base_seed)?,
            )
        }
        (None, None) => bail!("name a table (table2, table3, table4) or pass --lock"),
    };
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{id}-{}",
            scale.map_or("custom".to_string(), |s| s.to_string())
        ))
    });
    let data = Mnist::load(data_dir).context("loading MNIST (run `flatgrad fetch-data` first)")?;
    let table = run_cells(id, scale, &cells, &data)?;
    emit_report(&table, &out)?;
    print_summary(&table, &out);
    check_table(&table)
}

fn attack(
    model: &Path,
    epsilon: f64,
    data_dir: &Path,
    limit: Option<usize>,
    smoothing: f64,
) -> Result<()> {
    let m = checkpoint::load(model)?;
    let mut test = Dataset::load_mnist(data_dir, false)?;
    if let Some(n) = limit {
        test = test.head(n);
    }
    let spec = AttackSpec::new(epsilon)?;
    let x = test.images();
    let v = fgsm_direction(&m, x, test.labels(), smoothing)?;
    let adv = fgsm(&m, x, test.labels(), spec, smoothing)?;
    let mut violations = 0usize;
    for ((&a, &b), &s) in adv.data().iter().zip(x.data()).zip(v.data()) {
        let ok =
            (a - b).abs() <= epsilon && (0.0..=1.0).contains(&a) && [-1.0, 0.0, 1.0].contains(&s);
        violations += usize::from(!ok);
    }
    let correct = m
        .decide(&adv)?
        .iter()
        .zip(test.labels())
        .filter(|(p, l)| p == l)
        .count();
    let clean = m
        .decide(x)?
        .iter()
        .zip(test.labels())
        .filter(|(p, l)| p == l)
        .count();
    println!(
        "{} images, ε={epsilon}: clean {:.2}%, adversarial {:.2}%, invariant violations {violations}",
        test.len(),
        100.0 * clean as f64 / test.len() as f64,
        100.0 * correct as f64 / test.len() as f64
    );
    if violations > 0 {
        bail!("{violations} pixels violate the FGSM budget or domain");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::FetchData { dir, source } => {
            for (name, status) in fetch_mnist(&dir, &source)? {
                let what = match status {
                    FetchStatus::AlreadyPresent => "present, checksum ok",
                    FetchStatus::Installed => "installed, checksum ok",
                };
                println!("{name}: {what}");
            }
            Ok(())
        }
        Command::Train(args) => train(&args),
        Command::Attack {
            model,
            epsilon,
            data_dir,
            limit,
            smoothing,
        } => attack(&model, epsilon, &data_dir, limit, smoothing),
        Command::Eval {
            model,
            epsilon,
            data_dir,
            smoothing,
        } => {
            let m = checkpoint::load(&model)?;
            let test = Dataset::load_mnist(&data_dir, false)?;
            let (clean, adv) = evaluate(&m, &test, epsilon, smoothing)?;
            println!(
                "clean {:.2}%  adversarial (ε={epsilon}) {:.2}%",
                100.0 * clean,
                100.0 * adv
            );
            Ok(())
        }
        Command::Repro {
            table,
            scale,
            data_dir,
            out_dir,
            base_seed,
            lock,
        } => repro(
            table.as_deref(),
            &scale,
            &data_dir,
            out_dir.as_deref(),
            base_seed,
            lock.as_deref(),
        ),
        Command::Gradcheck {
            models,
            seed,
            lambda,
        } => {
            let r = gradcheck::run_suite(models, seed, lambda)?;
            for (name, c) in [
                ("cross-entropy", &r.cross_entropy),
                ("λ·‖J‖₁,₁", &r.exact_l11),
                ("λ·Σ|colsum J|", &r.colsum_abs),
            ] {
                println!(
                    "{name:<16} {} entries, max abs err {:.2e}, worst rel err {:.2e}: {}",
                    c.entries,
                    c.max_abs_err,
                    c.worst_rel_err,
                    if c.passed() { "pass" } else { "FAIL" }
                );
            }
            println!(
                "{} models for cross-entropy; {} for the penalties ({} drawn without a kink-free input)",
                r.models, r.penalty_models, r.skipped
            );
            if !r.passed() {
                bail!("gradient check failed");
            }
            Ok(())
        }
    }
}
