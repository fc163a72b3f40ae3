use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgtune::kg::KnowledgeTriple;
use kgtune::SyntheticFixture;
use tempfile::TempDir;

fn kgtune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgtune"))
        .args(args)
        .current_dir(dir)
        .env_remove("KGTUNE_CONFIG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/counterfact_sample.json")
}

/// Synthetic cases, their fixture and seed graph in a fresh directory.
fn pipeline(n: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    let n = n.to_string();
    ok(kgtune(dir.path(), &["fixture", "cases", "--n", &n, "--seed", "7", "--out", "cases.json"]));
    ok(kgtune(
        dir.path(),
        &["fixture", "generate", "--dataset", "cases.json", "--out", "fx.json", "--graph-out", "seed.tsv"],
    ));
    dir
}

const EVAL: &[&str] = &[
    "eval", "--dataset", "cases.json", "--fixture", "fx.json", "--graph", "seed.tsv", "--epsilon", "0.5",
];

#[test]
fn synthetic_pipeline_reaches_full_efficacy() {
    let dir = pipeline(50);
    let mut args = EVAL.to_vec();
    args.extend(["--output", "report.json"]);
    let out = ok(kgtune(dir.path(), &args));
    assert!(out.contains("efficacy       1.000"), "{out}");
    assert!(out.contains("paraphrase     1.000"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["efficacy"], 1.0);
    assert_eq!(report["evaluated_cases"], 50);
}

#[test]
fn no_tune_reports_baseline() {
    let dir = pipeline(20);
    let mut args = EVAL.to_vec();
    args.push("--no-tune");
    let out = ok(kgtune(dir.path(), &args));
    assert!(out.contains("efficacy       0.000"), "{out}");
}

#[test]
fn config_file_supplies_settings() {
    let dir = pipeline(10);
    std::fs::write(
        dir.path().join("kgtune.toml"),
        "dataset = \"cases.json\"\nfixture = \"fx.json\"\ngraph = \"seed.tsv\"\nepsilon = 0.5\n",
    )
    .unwrap();
    let out = ok(kgtune(dir.path(), &["--config", "kgtune.toml", "eval"]));
    assert!(out.contains("efficacy       1.000"), "{out}");
    // flags override the file
    let out = ok(kgtune(dir.path(), &["--config", "kgtune.toml", "eval", "--epsilon", "1000"]));
    assert!(out.contains("efficacy       0.000"), "{out}");
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = pipeline(5);
    let o = kgtune(dir.path(), &["eval", "--dataset", "absent.json", "--fixture", "fx.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.json"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_is_rejected() {
    let dir = pipeline(5);
    let o = kgtune(dir.path(), &["eval", "--dataset", "cases.json", "--fixture", "fx.json", "--k", "0"]);
    assert!(!o.status.success());
    let o = kgtune(dir.path(), &["eval", "--loss-mode", "sideways"]);
    assert!(!o.status.success());
}

/// Graph with (s, r1, o_true) and scores giving a two-step trace at K=1, ε=0.5.
fn worked_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    let zp = KnowledgeTriple::new("s", "p1", "o_new").unwrap();
    let zr = KnowledgeTriple::new("s", "r1", "o_true").unwrap();
    let mut f = SyntheticFixture::new(0.01);
    f.relation("q", "p1", 0.4)
        .relation("q", "r1", 0.4)
        .reasoning("q", &zp, "a", 0.9)
        .reasoning("q", &zr, "a", 0.1);
    f.save(&dir.path().join("fx.json")).unwrap();
    std::fs::write(dir.path().join("g.tsv"), "s\tr1\to_true\n").unwrap();
    dir
}

const TUNE: &[&str] = &[
    "tune", "--graph", "g.tsv", "--fixture", "fx.json", "--k", "1", "--query", "q", "--answer", "a", "--subject",
    "s", "--object", "o_new", "--relation", "p1", "--interaction", "i1",
];

#[test]
fn tune_prints_trace_and_persists_graph() {
    let dir = worked_dir();
    let mut args = TUNE.to_vec();
    args.extend(["--epsilon", "0.5"]);
    let out = ok(kgtune(dir.path(), &args));
    assert!(out.starts_with("2 edits, 1 iterations, threshold met"), "{out}");
    assert!(out.contains("+ (s, p1, o_new)"), "{out}");
    assert!(out.contains("- (s, r1, o_true)"), "{out}");
    assert!(out.contains("0.7985077"), "{out}");
    assert!(out.contains("0.1053605"), "{out}");
    assert_eq!(std::fs::read_to_string(dir.path().join("g.tsv")).unwrap(), "s\tp1\to_new\n");

    let diff = ok(kgtune(dir.path(), &["kg", "diff", "--graph", "g.tsv"]));
    assert!(diff.contains("+ (s, p1, o_new)\t#1 feedback:i1"), "{diff}");
    assert!(diff.contains("- (s, r1, o_true)\t#2 feedback:i1"), "{diff}");
    let first = ok(kgtune(dir.path(), &["kg", "diff", "--graph", "g.tsv", "--to", "1"]));
    assert_eq!(first.lines().count(), 1);

    let inspect = ok(kgtune(dir.path(), &["kg", "inspect", "--graph", "g.tsv", "--subject", "s"]));
    assert!(inspect.contains("triples   1"), "{inspect}");
    assert!(inspect.contains("(s, p1, o_new)"), "{inspect}");
}

#[test]
fn tune_below_threshold_makes_no_edits() {
    let dir = worked_dir();
    let mut args = TUNE.to_vec();
    args.extend(["--epsilon", "30"]);
    let out = ok(kgtune(dir.path(), &args));
    assert!(out.starts_with("0 edits"), "{out}");
    assert_eq!(std::fs::read_to_string(dir.path().join("g.tsv")).unwrap(), "s\tr1\to_true\n");
}

#[test]
fn tune_json_output_parses() {
    let dir = worked_dir();
    let mut args = TUNE.to_vec();
    args.extend(["--epsilon", "0.5", "--json"]);
    let report: serde_json::Value = serde_json::from_str(&ok(kgtune(dir.path(), &args))).unwrap();
    assert_eq!(report["termination"], "threshold_met");
    assert_eq!(report["added"].as_array().unwrap().len(), 1);
}

#[cfg(unix)]
#[test]
fn unwritable_graph_fails() {
    use std::os::unix::fs::PermissionsExt;
    let dir = worked_dir();
    let sub = dir.path().join("ro");
    std::fs::create_dir(&sub).unwrap();
    std::fs::copy(dir.path().join("g.tsv"), sub.join("g.tsv")).unwrap();
    std::fs::set_permissions(&sub, std::fs::Permissions::from_mode(0o555)).unwrap();
    let probe = sub.join("probe");
    if std::fs::write(&probe, "").is_ok() {
        // running with privileges that ignore permissions
        let _ = std::fs::remove_file(probe);
        return;
    }
    let mut args = TUNE.to_vec();
    args.extend(["--epsilon", "0.5"]);
    args[2] = "ro/g.tsv";
    let o = kgtune(dir.path(), &args);
    std::fs::set_permissions(&sub, std::fs::Permissions::from_mode(0o755)).unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn missing_graph_file_fails() {
    let dir = worked_dir();
    let mut args = TUNE.to_vec();
    args[2] = "nowhere/g.tsv";
    let o = kgtune(dir.path(), &args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn fixture_from_sample_case_scores_target_new() {
    let dir = TempDir::new().unwrap();
    let sample = sample();
    ok(kgtune(
        dir.path(),
        &["fixture", "generate", "--dataset", sample.to_str().unwrap(), "--out", "fx.json", "--graph-out", "seed.tsv"],
    ));
    let fx = std::fs::read_to_string(dir.path().join("fx.json")).unwrap();
    assert!(fx.contains("Alan Turing"));
    assert!(fx.contains("mechanical engineering"));
    let seed = std::fs::read_to_string(dir.path().join("seed.tsv")).unwrap();
    assert!(seed.contains("Alan Turing\tfield of work\tlogic"), "{seed}");

    let out = ok(kgtune(
        dir.path(),
        &["eval", "--dataset", sample.to_str().unwrap(), "--fixture", "fx.json", "--graph", "seed.tsv", "--epsilon", "0.5"],
    ));
    assert!(out.contains("efficacy       1.000"), "{out}");
}

#[test]
fn serve_with_bad_remote_url_fails() {
    let dir = TempDir::new().unwrap();
    let o = kgtune(dir.path(), &["serve", "--backend", "remote", "--remote-url", "not a url", "--bind", "127.0.0.1:0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn serve_with_bad_bind_address_fails() {
    let dir = pipeline(2);
    let o = kgtune(dir.path(), &["serve", "--fixture", "fx.json", "--bind", "not-an-address"]);
    assert!(!o.status.success());
}
