use std::path::Path;
use std::process::Command;

use fvdual_cli::config::{Task, EXPERIMENT_KINDS};
use fvdual_cli::{parse_config, parse_config_str, ConfigError, Overrides};

const MINIMAL: &str = r#"
[model]
fitness = [0.0, 1.0]
mutation_matrix = [[0.5, 0.5], [0.5, 0.5]]
mutation_rate = 0.5
selection = 0.3
resampling = 1.0

[[experiment]]
id = "pairs"
kind = "cross-dual"
times = [1.0]
replicas = 200
initial = [0.4, 0.6]
moment = [[0, "10"], [0, "10"]]
duals = ["gplus", "set-valued"]
"#;

fn problems(text: &str) -> Vec<String> {
    match parse_config_str(text) {
        Err(ConfigError::Invalid(p)) => p,
        Err(e) => panic!("expected validation errors, got {e}"),
        Ok(_) => panic!("expected validation errors"),
    }
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn minimal_two_type_config_parses() {
    let c = parse_config_str(MINIMAL).unwrap();
    assert_eq!(c.experiments.len(), 1);
    assert_eq!(c.experiments[0].model.types, 2);
    assert_eq!(c.run.threshold, 4.0);
    assert!(c.output.csv && c.output.json);
    assert!(matches!(c.experiments[0].task, Task::CrossDual { .. }));
}

#[test]
fn fitness_maximum_must_be_one() {
    let p = problems(&MINIMAL.replace("fitness = [0.0, 1.0]", "fitness = [0.0, 0.8]"));
    assert!(p.iter().any(|e| e.starts_with("model: fitness: maximum is 0.8, must be 1")), "{p:?}");
}

#[test]
fn dominance_violation_cites_condition() {
    let text = MINIMAL.replace("mutation_rate = 0.5", "mutation_rate = 0.5\nstar_rate = 0.8\nbase_measure = [0.5, 0.5]");
    let p = problems(&text);
    assert!(p.iter().any(|e| e.contains("m*M >= mbar*rho") && e.contains("(0,0)")), "{p:?}");
}

#[test]
fn every_problem_is_reported_with_its_path() {
    let text = r#"
[model]
types = 3
fitness = [0.0, 1.0]
mutation_matrix = [[0.5, 0.5], [0.5, 0.4]]
selection = -1.0
resampling = 1.0

[[experiment]]
id = "a"
kind = "cross-dual"
times = [1.0]
replicas = 1
initial = [0.4, 0.6]
moment = [[0, "10"]]
duals = ["gplus", "nonsense"]

[[experiment]]
kind = "teleport"
"#;
    let p = problems(text);
    for expected in [
        "model.mutation_rate: missing field",
        "model.selection: -1 must be finite and >= 0",
        "model.types: K = 3 but fitness lists 2 types",
        "experiment[1].id: missing field",
    ] {
        assert!(p.contains(&expected.to_string()), "missing {expected:?} in {p:?}");
    }
    let text = MINIMAL.replace("replicas = 200", "replicas = 1").replace("\"set-valued\"", "\"nonsense\"")
        + "\n[[experiment]]\nkind = \"teleport\"\nid = \"b\"\n";
    let p = problems(&text);
    assert!(p.iter().any(|e| e.starts_with("experiment[0].replicas")), "{p:?}");
    assert!(p.iter().any(|e| e.starts_with("experiment[0].duals[1]: unknown dual")), "{p:?}");
    assert!(p.iter().any(|e| e.starts_with("experiment[1].kind: unknown kind")), "{p:?}");
}

#[test]
fn kind_specific_checks() {
    let p = problems(&MINIMAL.replace("times = [1.0]", "times = [3.0]").replace("\"gplus\"", "\"fk\""));
    assert!(p.iter().any(|e| e.contains("Feynman-Kac window")), "{p:?}");
    let p = problems(&MINIMAL.replace("initial = [0.4, 0.6]", "initial = [0.4, 0.7]\nx = 0.3"));
    assert!(p.iter().any(|e| e.starts_with("experiment[0].initial")), "{p:?}");
    assert!(p.iter().any(|e| e == "experiment[0].x: not used by kind \"cross-dual\""), "{p:?}");
    let p = problems(&MINIMAL.replace("\"10\"]]", "\"100\"]]"));
    assert!(p.iter().any(|e| e.contains("one 0/1 digit per type")), "{p:?}");
    let p = problems(&MINIMAL.replace("kind = \"cross-dual\"", "kind = \"ode-oracle\""));
    assert!(p.iter().any(|e| e.contains("exact oracle needs selection = 0")), "{p:?}");
}

#[test]
fn ergodic_requires_positive_mutation() {
    let text = r#"
[model]
fitness = [0.0, 1.0]
mutation_matrix = [[1.0, 0.0], [0.5, 0.5]]
mutation_rate = 0.5
selection = 0.3
resampling = 1.0

[[experiment]]
id = "mix"
kind = "ergodic"
times = [1.0]
replicas = 10
pop_size = 10
initials = [[0.9, 0.1], [0.1, 0.9]]
moments = [[[0, "10"]]]
trap_horizon = 1.0
trap_replicas = 10
trap_threshold = 0.5
"#;
    let p = problems(text);
    assert!(p.iter().any(|e| e.starts_with("model.mutation_matrix: the ergodic theorem needs")), "{p:?}");
}

#[test]
fn syntax_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "[model\n").unwrap();
    let err = parse_config(&path).unwrap_err();
    assert!(matches!(err, ConfigError::Syntax { .. }));
    assert!(err.to_string().contains("broken.toml"));
    assert!(matches!(parse_config(&dir.path().join("absent.toml")), Err(ConfigError::Io { .. })));
}

#[test]
fn shipped_configs_parse() {
    let battery = parse_config(&configs().join("battery.toml")).unwrap();
    assert_eq!(battery.experiments.len(), 12);
    let quick = parse_config(&configs().join("quick.toml")).unwrap();
    let mut kinds: Vec<&str> = quick.experiments.iter().map(|e| e.task.kind()).collect();
    kinds.sort_unstable();
    let mut all: Vec<&str> = EXPERIMENT_KINDS.iter().map(|k| k.0).collect();
    all.sort_unstable();
    assert_eq!(kinds, all);
}

#[test]
fn overrides_filter_and_reseed() {
    let mut c = parse_config(&configs().join("quick.toml")).unwrap();
    Overrides { seed: Some(99), workers: Some(1), outdir: None, filter: Some("markov-chain".into()) }.apply(&mut c).unwrap();
    assert_eq!(c.run.master_seed, 99);
    assert_eq!(c.run.workers, 1);
    assert_eq!(c.experiments.len(), 1);
    let mut c = parse_config(&configs().join("quick.toml")).unwrap();
    assert!(Overrides { filter: Some("no-such".into()), ..Overrides::default() }.apply(&mut c).is_err());
}

#[test]
fn one_record_per_check_with_fixed_header() {
    let mut c = parse_config_str(MINIMAL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.output.dir = dir.path().into();
    let outcomes = fvdual_cli::run(&c).unwrap();
    fvdual_cli::write_reports(&c, &outcomes).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment,kind,check,lhs_label,lhs_mean,lhs_std_error,lhs_replicas,lhs_aborts,rhs_label,rhs_mean,rhs_std_error,rhs_replicas,rhs_aborts,seed,statistic,threshold,verdict"
    );
    assert_eq!(lines.count(), 1);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(json["summary"]["checks"], 1);
    assert_eq!(json["config"]["experiments"][0]["task"]["kind"], "cross-dual");
}

#[test]
fn binary_lists_kinds_and_signals_failure() {
    let exe = env!("CARGO_BIN_EXE_fvdual");
    let out = Command::new(exe).arg("--list-experiments").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for (kind, _) in EXPERIMENT_KINDS {
        assert!(text.contains(kind), "{kind} missing from listing");
    }

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("strict.toml");
    let strict = r#"
[model]
fitness = [0.0, 1.0]
mutation_matrix = [[1.0, 0.0], [0.0, 1.0]]
mutation_rate = 0.0
selection = 0.0
resampling = 1.0

[[experiment]]
id = "too-strict"
kind = "neutral-moment"
x = 0.5
pop_size = 20
times = [1.0]
replicas = 50
tolerance = 0.0
"#;
    std::fs::write(&config, strict).unwrap();
    let out = Command::new(exe).arg(&config).arg("--outdir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("report.csv").exists());

    std::fs::write(&config, "[model]\n").unwrap();
    let out = Command::new(exe).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.fitness: missing field"));
}
