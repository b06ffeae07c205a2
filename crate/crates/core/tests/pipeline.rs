mod common;

use flatgrad_core::checkpoint;
use flatgrad_core::config::RawConfig;
use flatgrad_core::experiment::{run_trials_with_models, Mnist};
use flatgrad_core::report::{emit_report, parse_lock, run_cells, ResultTable, TableId};
use std::path::Path;

const SMALL: &str = "
arch = C
mode = adv_train_gp
lambda = 1
epsilon = 0.3
penalty = colsum_abs
epochs = 2
stop_rule = off
batch_size = 64
train_subset = 256
repetitions = 2
base_seed = 11
";

fn small_cells(dir: &Path) -> Vec<flatgrad_core::config::ExperimentConfig> {
    let mut raw = RawConfig::parse(SMALL).unwrap();
    raw.set("data_dir", dir.to_str().unwrap()).unwrap();
    raw.expand().unwrap()
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("diagnostics")] {
        for e in std::fs::read_dir(sub).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() && p.extension().is_some_and(|x| x == "csv") {
                out.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn lock_rerun_reproduces_every_csv() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    let data = Mnist::load(&dir).unwrap();
    let cells = small_cells(&dir);
    let first = run_cells(TableId::Run, None, &cells, &data).unwrap();
    let out1 = tempfile::tempdir().unwrap();
    emit_report(&first, out1.path()).unwrap();

    let lock =
        parse_lock(&std::fs::read_to_string(out1.path().join("config.lock")).unwrap()).unwrap();
    assert_eq!(lock.cells, cells);
    let again = run_cells(lock.table, lock.scale, &lock.cells, &data).unwrap();
    let out2 = tempfile::tempdir().unwrap();
    emit_report(&again, out2.path()).unwrap();

    let (a, b) = (read_all(out1.path()), read_all(out2.path()));
    assert_eq!(a.len(), 3); // results + one history per seed
    assert_eq!(a, b);
    let history = String::from_utf8(a[1].1.clone()).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn checkpoints_restore_the_trained_model_exactly() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    let data = Mnist::load(&dir).unwrap();
    let mut cells = small_cells(&dir);
    cells[0].repetitions = 1;
    cells[0].epochs = 1;
    let (report, models) = run_trials_with_models(
        &cells[0].trial_spec().unwrap(),
        &data,
        &cells[0].seeds(),
        false,
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    checkpoint::save(&models[0].1, &path).unwrap();
    let restored = checkpoint::load(&path).unwrap();
    let x = data.test.head(64);
    assert_eq!(
        models[0].1.logits(x.images()).unwrap(),
        restored.logits(x.images()).unwrap()
    );
    let (clean, adv) = flatgrad_core::train::evaluate(&restored, &data.test, 0.3, 0.1).unwrap();
    assert_eq!(
        (clean, adv),
        (report.outcomes[0].clean, report.outcomes[0].adv)
    );
}

#[test]
fn results_table_lists_trials_then_the_aggregate() {
    let Some(dir) = common::mnist_dir() else {
        return;
    };
    let data = Mnist::load(&dir).unwrap();
    let mut cells = small_cells(&dir);
    cells[0].epochs = 1;
    cells[0].train_subset = Some(128);
    let table: ResultTable = run_cells(TableId::Run, None, &cells, &data).unwrap();
    let csv = flatgrad_core::report::results_csv(&table).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 2 + 1);
    let text = flatgrad_core::report::table_text(&table);
    assert!(text.contains("±"), "{text}");
}
