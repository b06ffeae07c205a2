//! Table reproduction grids and report emission.
//!
//! A report directory holds `results.csv` (one row per trial plus one
//! aggregate row per cell, no timing so reruns compare byte for byte),
//! `table.txt` (aligned `m ± s` cells, with wall time), `config.lock` (every
//! resolved cell with its seeds and fingerprint) and
//! `diagnostics/cell<k>_seed<s>.csv` per trial.

use crate::config::{ExperimentConfig, RawConfig, CODE_VERSION};
use crate::error::{Error, IoContext, Result};
use crate::experiment::{run_trials, Mnist, TrialReport};
use crate::loss::PenaltyKind;
use crate::nn::ArchId;
use crate::train::{ModeKind, HISTORY_HEADER};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableId {
    Table2,
    Table3,
    Table4,
    /// A user-configured run or grid.
    Run,
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableId::Table2 => "table2",
            TableId::Table3 => "table3",
            TableId::Table4 => "table4",
            TableId::Run => "run",
        })
    }
}

impl FromStr for TableId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(TableId::Table2),
            "table3" => Ok(TableId::Table3),
            "table4" => Ok(TableId::Table4),
            "run" => Ok(TableId::Run),
            other => Err(Error::InvalidArgument(format!("unknown table {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown scale {other:?} (desk, full)"
            ))),
        }
    }
}

pub const TABLE2_LAMBDAS: [f64; 5] = [50.0, 25.0, 10.0, 1.0, 0.1];
pub const TABLE3_EPSILONS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];
pub const TABLE3_DESK_EPSILONS: [f64; 2] = [0.05, 0.3];
pub const TABLE3_LAMBDA: f64 = 10.0;
pub const TABLE4_LAMBDAS: [f64; 6] = [0.0, 10.0, 50.0, 100.0, 200.0, 1000.0];
pub const DESK_SUBSET: usize = 5000;
pub const DESK_EPOCHS: usize = 15;

fn cell(
    arch: ArchId,
    mode: ModeKind,
    lambda: f64,
    epsilon: f64,
    penalty: PenaltyKind,
) -> ExperimentConfig {
    ExperimentConfig {
        arch,
        mode,
        lambda,
        epsilon,
        penalty,
        ..ExperimentConfig::default()
    }
}

/// The cells of a predefined experiment grid at the given scale.
pub fn table_configs(
    table: TableId,
    scale: Scale,
    data_dir: &Path,
    base_seed: u64,
) -> Result<Vec<ExperimentConfig>> {
    let desk = scale == Scale::Desk;
    let archs: &[ArchId] = if desk {
        &[ArchId::C]
    } else {
        &[ArchId::A, ArchId::B, ArchId::C]
    };
    let mut cells = Vec::new();
    match table {
        TableId::Table2 => {
            for &arch in archs {
                for lambda in TABLE2_LAMBDAS {
                    cells.push(cell(
                        arch,
                        ModeKind::GpOnly,
                        lambda,
                        0.3,
                        PenaltyKind::ExactL11,
                    ));
                }
            }
        }
        TableId::Table3 => {
            let eps: &[f64] = if desk {
                &TABLE3_DESK_EPSILONS
            } else {
                &TABLE3_EPSILONS
            };
            for &arch in archs {
                for (mode, lambda) in [
                    (ModeKind::AdvTrain, 0.0),
                    (ModeKind::AdvTrainGp, TABLE3_LAMBDA),
                ] {
                    for &e in eps {
                        cells.push(cell(arch, mode, lambda, e, PenaltyKind::ColsumAbs));
                    }
                }
            }
        }
        TableId::Table4 => {
            for lambda in TABLE4_LAMBDAS {
                let mode = if lambda == 0.0 {
                    ModeKind::AdvTrain
                } else {
                    ModeKind::AdvTrainGp
                };
                cells.push(cell(ArchId::C, mode, lambda, 0.3, PenaltyKind::ColsumAbs));
            }
        }
        TableId::Run => {
            return Err(Error::InvalidArgument(
                "'run' is not a predefined grid".into(),
            ))
        }
    }
    for c in &mut cells {
        c.data_dir = data_dir.to_path_buf();
        c.base_seed = base_seed;
        // the adversarial-training tables train to the cap
        c.stop_rule = table == TableId::Table2;
        (c.epochs, c.repetitions, c.train_subset) = match (table, scale) {
            (TableId::Table4, Scale::Full) => (150, 10, None),
            (TableId::Table4, Scale::Desk) => (DESK_EPOCHS, 3, Some(DESK_SUBSET)),
            (_, Scale::Full) => (100, 10, None),
            (_, Scale::Desk) => (DESK_EPOCHS, 5, Some(DESK_SUBSET)),
        };
        c.validate()?;
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct ResultRow {
    pub config: ExperimentConfig,
    pub report: TrialReport,
}

#[derive(Clone, Debug)]
pub struct ResultTable {
    pub table: TableId,
    pub scale: Option<Scale>,
    pub rows: Vec<ResultRow>,
}

/// Runs every cell in order.
pub fn run_cells(
    table: TableId,
    scale: Option<Scale>,
    cells: &[ExperimentConfig],
    data: &Mnist,
) -> Result<ResultTable> {
    let mut rows = Vec::with_capacity(cells.len());
    for c in cells {
        c.validate()?;
        let report = run_trials(&c.trial_spec()?, data, &c.seeds(), c.exclude_failed)?;
        rows.push(ResultRow {
            config: c.clone(),
            report,
        });
    }
    Ok(ResultTable { table, scale, rows })
}

/// `m ± s` in percent with two decimals.
pub fn pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

pub const RESULTS_HEADER: [&str; 17] = [
    "table",
    "cell",
    "row",
    "arch",
    "mode",
    "lambda",
    "epsilon",
    "penalty",
    "seed",
    "clean",
    "adv",
    "epochs_run",
    "clean_std",
    "adv_std",
    "epochs_std",
    "n",
    "fingerprint",
];

pub fn results_csv(table: &ResultTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for (k, row) in table.rows.iter().enumerate() {
        let c = &row.config;
        let fp = c.fingerprint();
        let key = [
            table.table.to_string(),
            (k + 1).to_string(),
            String::new(),
            c.arch.to_string(),
            c.mode.to_string(),
            c.lambda.to_string(),
            c.epsilon.to_string(),
            c.penalty.to_string(),
        ];
        for o in &row.report.outcomes {
            let mut rec = key.clone().to_vec();
            rec[2] = "trial".into();
            rec.extend([
                o.seed.to_string(),
                o.clean.to_string(),
                o.adv.to_string(),
                o.epochs_run.to_string(),
                String::new(),
                String::new(),
                String::new(),
                "1".into(),
                fp.clone(),
            ]);
            w.write_record(&rec)?;
        }
        let r = &row.report;
        let mut rec = key.to_vec();
        rec[2] = "aggregate".into();
        rec.extend([
            String::new(),
            r.clean.mean.to_string(),
            r.adv.mean.to_string(),
            r.epochs.mean.to_string(),
            r.clean.std.to_string(),
            r.adv.std.to_string(),
            r.epochs.std.to_string(),
            r.clean.n.to_string(),
            fp,
        ]);
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|i| {
            rows.iter()
                .filter_map(|r| r.get(i))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Pivoted text table: one column per λ (or per ε when λ is fixed
/// within a row group), a clean and an adversarial line per group, then a
/// per-cell list with epochs and wall time.
pub fn table_text(table: &ResultTable) -> String {
    let by_eps = table.table == TableId::Table3;
    let col_of = |c: &ExperimentConfig| if by_eps { c.epsilon } else { c.lambda };
    let mut columns: Vec<f64> = Vec::new();
    let mut groups: Vec<(String, Vec<&ResultRow>)> = Vec::new();
    for row in &table.rows {
        let c = &row.config;
        if !columns.contains(&col_of(c)) {
            columns.push(col_of(c));
        }
        let label = if by_eps {
            format!(
                "{} {} {}",
                c.arch,
                c.mode,
                if c.mode.is_penalised() {
                    format!("λ={}", c.lambda)
                } else {
                    String::new()
                }
            )
        } else if table.table == TableId::Table4 {
            format!("{} ε={}", c.arch, c.epsilon)
        } else {
            format!("{} {} ε={}", c.arch, c.mode, c.epsilon)
        };
        let label = label.trim().to_string();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(row),
            None => groups.push((label, vec![row])),
        }
    }
    let axis = if by_eps { "ε" } else { "λ" };
    let mut grid = vec![std::iter::once(format!("{axis} →"))
        .chain(std::iter::once(String::new()))
        .chain(columns.iter().map(|v| v.to_string()))
        .collect::<Vec<_>>()];
    for (label, rows) in &groups {
        for (name, pick) in [("clean", 0), ("adv", 1)] {
            let mut line = vec![label.clone(), name.to_string()];
            for col in &columns {
                line.push(
                    rows.iter()
                        .find(|r| col_of(&r.config) == *col)
                        .map(|r| {
                            let s = if pick == 0 {
                                r.report.clean
                            } else {
                                r.report.adv
                            };
                            pm(s.mean, s.std)
                        })
                        .unwrap_or_else(|| "-".into()),
                );
            }
            grid.push(line);
        }
    }
    let mut out = format!(
        "{} ({}), accuracy in % on the test set, FGSM adversarial column\n\n",
        table.table,
        table.scale.map_or("custom".to_string(), |s| s.to_string())
    );
    out.push_str(&align(&grid));
    out.push('\n');
    let mut cells = vec![vec![
        "cell".into(),
        "arch".into(),
        "mode".into(),
        "λ".into(),
        "ε".into(),
        "penalty".into(),
        "n".into(),
        "epochs".into(),
        "wall s".into(),
        "note".into(),
    ]];
    for (k, row) in table.rows.iter().enumerate() {
        let c = &row.config;
        let r = &row.report;
        let mut note = Vec::new();
        if r.clean.caveat() {
            note.push("single trial: std reported as 0".to_string());
        }
        if !r.failures.is_empty() {
            note.push(format!("{} failed trial(s) excluded", r.failures.len()));
        }
        cells.push(vec![
            (k + 1).to_string(),
            c.arch.to_string(),
            c.mode.to_string(),
            c.lambda.to_string(),
            c.epsilon.to_string(),
            c.penalty.to_string(),
            r.clean.n.to_string(),
            format!("{:.1} ± {:.1}", r.epochs.mean, r.epochs.std),
            format!("{:.1}", r.wall_secs()),
            note.join("; "),
        ]);
    }
    out.push_str(&align(&cells));
    out
}

pub fn lock_text(table: &ResultTable) -> String {
    let mut out = format!(
        "# flatgrad config.lock\nversion = {CODE_VERSION}\ntable = {}\nscale = {}\ncells = {}\n",
        table.table,
        table.scale.map_or("custom".to_string(), |s| s.to_string()),
        table.rows.len()
    );
    for (k, row) in table.rows.iter().enumerate() {
        let c = &row.config;
        out.push_str(&format!("\n[cell {}]\n", k + 1));
        for (key, v) in c.entries() {
            out.push_str(&format!("{key} = {v}\n"));
        }
        let seeds: Vec<String> = c.seeds().iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "seeds = {}\nfingerprint = {}\n",
            seeds.join(","),
            c.fingerprint()
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lock {
    pub version: String,
    pub table: TableId,
    pub scale: Option<Scale>,
    pub cells: Vec<ExperimentConfig>,
}

/// Reads a `config.lock`, checking every cell's seeds and fingerprint.
pub fn parse_lock(text: &str) -> Result<Lock> {
    let mut sections: Vec<Vec<&str>> = vec![Vec::new()];
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with("[cell ") {
            sections.push(Vec::new());
        } else if !t.is_empty() && !t.starts_with('#') {
            sections.last_mut().expect("non-empty").push(t);
        }
    }
    let kv = |line: &str| -> Result<(String, String)> {
        line.split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| Error::Config(format!("lock: malformed line {line:?}")))
    };
    let header: Vec<(String, String)> = sections[0].iter().map(|l| kv(l)).collect::<Result<_>>()?;
    let field = |name: &str| {
        header
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Config(format!("lock: missing {name}")))
    };
    let version = field("version")?;
    if version != CODE_VERSION {
        return Err(Error::Config(format!(
            "lock written by version {version}, this is {CODE_VERSION}"
        )));
    }
    let table: TableId = field("table")?.parse()?;
    let scale = match field("scale")?.as_str() {
        "custom" => None,
        s => Some(s.parse()?),
    };
    let count: usize = field("cells")?
        .parse()
        .map_err(|_| Error::Config("lock: bad cell count".into()))?;
    if count != sections.len() - 1 {
        return Err(Error::Config(format!(
            "lock declares {count} cells, holds {}",
            sections.len() - 1
        )));
    }
    let mut cells = Vec::new();
    for (k, sec) in sections[1..].iter().enumerate() {
        let mut raw = RawConfig::default();
        let (mut seeds, mut fp) = (None, None);
        for line in sec {
            let (key, v) = kv(line)?;
            match key.as_str() {
                "seeds" => seeds = Some(v),
                "fingerprint" => fp = Some(v),
                _ => raw.set(&key, &v)?,
            }
        }
        let mut expanded = raw.expand()?;
        if expanded.len() != 1 {
            return Err(Error::Config(format!("lock cell {} is a grid", k + 1)));
        }
        let c = expanded.remove(0);
        let want: Vec<String> = c.seeds().iter().map(u64::to_string).collect();
        if seeds.as_deref() != Some(want.join(",").as_str()) {
            return Err(Error::Config(format!(
                "lock cell {}: seeds do not match base_seed/repetitions",
                k + 1
            )));
        }
        if fp.as_deref() != Some(c.fingerprint().as_str()) {
            return Err(Error::Config(format!(
                "lock cell {}: fingerprint mismatch",
                k + 1
            )));
        }
        cells.push(c);
    }
    Ok(Lock {
        version,
        table,
        scale,
        cells,
    })
}

pub fn diagnostics_csv(row: &ResultRow, trial: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for rec in &row.report.outcomes[trial].history {
        w.write_record(rec.csv_fields())?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes the report files into `dir` and returns their paths.
pub fn emit_report(table: &ResultTable, dir: &Path) -> Result<Vec<PathBuf>> {
    let diag = dir.join("diagnostics");
    std::fs::create_dir_all(&diag).context(|| format!("creating {}", diag.display()))?;
    let mut files = vec![
        (dir.join("results.csv"), results_csv(table)?),
        (dir.join("table.txt"), table_text(table)),
        (dir.join("config.lock"), lock_text(table)),
    ];
    for (k, row) in table.rows.iter().enumerate() {
        for (t, o) in row.report.outcomes.iter().enumerate() {
            files.push((
                diag.join(format!("cell{}_seed{}.csv", k + 1, o.seed)),
                diagnostics_csv(row, t)?,
            ));
        }
    }
    let mut written = Vec::new();
    for (path, text) in files {
        std::fs::write(&path, text).context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::TrialOutcome;
    use crate::train::EpochRecord;

    #[test]
    fn predefined_grids() {
        let d = Path::new("data");
        let t2 = table_configs(TableId::Table2, Scale::Desk, d, 0).unwrap();
        assert_eq!(
            t2.iter().map(|c| c.lambda).collect::<Vec<_>>(),
            vec![50.0, 25.0, 10.0, 1.0, 0.1]
        );
        assert!(t2
            .iter()
            .all(|c| c.arch == ArchId::C && c.train_subset == Some(5000) && c.repetitions == 5));
        assert_eq!(
            table_configs(TableId::Table2, Scale::Full, d, 0)
                .unwrap()
                .len(),
            15
        );
        let t3 = table_configs(TableId::Table3, Scale::Full, d, 0).unwrap();
        assert_eq!(t3.len(), 3 * 2 * 4);
        assert!(t3
            .iter()
            .all(|c| c.penalty == PenaltyKind::ColsumAbs && !c.stop_rule));
        assert!(t3
            .iter()
            .filter(|c| c.mode == ModeKind::AdvTrainGp)
            .all(|c| c.lambda == 10.0));
        assert_eq!(
            table_configs(TableId::Table3, Scale::Desk, d, 0)
                .unwrap()
                .len(),
            4
        );
        let t4 = table_configs(TableId::Table4, Scale::Full, d, 0).unwrap();
        assert_eq!(
            t4.iter().map(|c| c.lambda).collect::<Vec<_>>(),
            vec![0.0, 10.0, 50.0, 100.0, 200.0, 1000.0]
        );
        assert_eq!(t4[0].mode, ModeKind::AdvTrain);
        assert!(t4.iter().all(|c| c.epochs == 150));
    }

    fn fake_table() -> ResultTable {
        let cells = table_configs(TableId::Table2, Scale::Desk, Path::new("data"), 0).unwrap();
        let rows = cells[..2]
            .iter()
            .map(|c| {
                let outcomes = c
                    .seeds()
                    .iter()
                    .map(|&s| TrialOutcome {
                        seed: s,
                        clean: 0.9 + s as f64 * 0.01,
                        adv: 0.2,
                        epochs_run: 15,
                        stopped_early: false,
                        wall_secs: 2.0,
                        history: vec![EpochRecord {
                            epoch: 1,
                            train_loss: 0.5,
                            val_acc: 0.9,
                            penalty_mean: None,
                            probe_delta_mean: 1.0,
                            probe_gradnorm_clean: 2.0,
                            probe_gradnorm_adv: 3.0,
                        }],
                    })
                    .collect();
                ResultRow {
                    config: c.clone(),
                    report: TrialReport::from_outcomes(outcomes, vec![]),
                }
            })
            .collect();
        ResultTable {
            table: TableId::Table2,
            scale: Some(Scale::Desk),
            rows,
        }
    }

    #[test]
    fn csv_has_a_row_per_trial_and_per_aggregate() {
        let t = fake_table();
        let csv = results_csv(&t).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 5 + 2);
        assert!(!csv.contains("wall"));
    }

    #[test]
    fn cells_use_the_mean_std_format() {
        assert_eq!(pm(0.9937, 0.0004), "99.37 ± 0.04");
        let text = table_text(&fake_table());
        assert!(text.contains("92.00 ± 1.58"), "{text}");
        assert!(text.contains("20.00 ± 0.00"));
    }

    #[test]
    fn lock_round_trips_and_detects_tampering() {
        let t = fake_table();
        let text = lock_text(&t);
        let lock = parse_lock(&text).unwrap();
        assert_eq!(lock.table, TableId::Table2);
        assert_eq!(
            lock.cells,
            t.rows.iter().map(|r| r.config.clone()).collect::<Vec<_>>()
        );
        assert!(parse_lock(&text.replacen("lambda = 50", "lambda = 49", 1)).is_err());
        assert!(parse_lock(&text.replacen("seeds = 0,1,2,3,4", "seeds = 0,1", 1)).is_err());
    }

    #[test]
    fn emit_writes_all_files() {
        let dir = std::env::temp_dir().join(format!("flatgrad-report-{}", std::process::id()));
        let files = emit_report(&fake_table(), &dir).unwrap();
        assert_eq!(files.len(), 3 + 10);
        let diag = std::fs::read_to_string(dir.join("diagnostics/cell1_seed0.csv")).unwrap();
        assert_eq!(
            diag,
            "epoch,train_loss,val_acc,penalty_mean,probe_delta_mean,probe_gradnorm_clean,probe_gradnorm_adv\n1,0.5,0.9,,1,2,3\n"
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
