use std::path::PathBuf;

use structcov::experiment::{run_experiment, Estimator, ExperimentConfig};
use structcov::Error;

const SMALL: &str = r#"
[experiment]
name = "small"
kind = "snr_sweep"
trials = 4
seed = 9

[geometry]
ula = 4

[scene]
u = [-0.4, 0.3]
snr_db = [10.0]
snapshots = 50

[sweep]
axis = "snr_db"
values = [0.0, 10.0]

[estimators]
list = ["structcov", "fb", "sbl"]

[solver]
iters = 5

[sbl]
grid = 40
iters = 50

[output]
trace = true
"#;

fn key_of(err: Error) -> String {
    match err {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("structcov-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn bundled_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn validation_names_the_key() {
    let empty = SMALL.replace("values = [0.0, 10.0]", "values = []");
    assert_eq!(key_of(ExperimentConfig::from_toml_str(&empty).unwrap_err()), "sweep.values");
    let unknown = SMALL.replace("seed = 9", "seed = 9\nsede = 3");
    assert_eq!(key_of(ExperimentConfig::from_toml_str(&unknown).unwrap_err()), "<document>");
    let none = SMALL.replace(r#"list = ["structcov", "fb", "sbl"]"#, "list = []");
    assert_eq!(key_of(ExperimentConfig::from_toml_str(&none).unwrap_err()), "estimators.list");
    let both = SMALL.replace("ula = 4", "ula = 4\npositions = [0.0, 1.0]");
    assert!(key_of(ExperimentConfig::from_toml_str(&both).unwrap_err()).starts_with("geometry"));
    let trials = SMALL.replace("trials = 4", "trials = 0");
    assert_eq!(key_of(ExperimentConfig::from_toml_str(&trials).unwrap_err()), "experiment.trials");
}

#[test]
fn results_do_not_depend_on_jobs() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let a = run_experiment(&cfg, Some(1)).unwrap();
    let b = run_experiment(&cfg, Some(3)).unwrap();
    assert_eq!(a.records.len(), 2 * 4 * 3);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!((x.axis, x.estimator, x.trial), (y.axis, y.estimator, y.trial));
        assert_eq!(x.outcome, y.outcome);
        assert_eq!(x.trace, y.trace);
    }
    let (da, db) = (scratch("jobs-a"), scratch("jobs-b"));
    let pa = a.write(&da, false).unwrap();
    let pb = b.write(&db, false).unwrap();
    for (x, y) in pa.iter().zip(&pb) {
        if x.extension().is_some_and(|e| e == "csv") {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
    }
    let _ = std::fs::remove_dir_all(da);
    let _ = std::fs::remove_dir_all(db);
}

#[test]
fn summary_covers_every_point_and_estimator() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let out = run_experiment(&cfg, None).unwrap();
    assert_eq!(out.summary.len(), 2 * 3);
    let rows = out.summary_for(Estimator::Structcov);
    assert_eq!(rows.iter().map(|r| r.axis).collect::<Vec<_>>(), vec![0.0, 10.0]);
    assert!(rows[1].rmse < rows[0].rmse);
    assert!(rows.iter().all(|r| r.crb > 0.0 && r.failures == 0 && r.trials == 4));
}
