use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdcw::cli::LOCK_FILE;
use sdcw::report::{load_reports, RunReport};

const BASE: &str = "\
preset = desk
n_sentences = 100
corpus_lines = 100
epochs = 1
seeds = 1
reps = 3
train = data/train.conll
test = data/test.conll
";

fn sdcw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdcw"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.cfg"), format!("{BASE}{extra}")).unwrap();
    let o = sdcw(dir.path(), &["synth-data", "-c", "exp.cfg", "-o", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn out_of_range_sparsity_is_a_config_error() {
    let dir = setup("");
    fs::write(
        dir.path().join("bad.cfg"),
        format!("{BASE}sparsity = 1.5\n"),
    )
    .unwrap();
    let o = sdcw(dir.path(), &["prune", "-c", "bad.cfg", "-o", "runs"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("sparsity") && msg.contains("line 9"), "{msg}");
    assert!(!dir.path().join("runs").join(LOCK_FILE).exists());
}

#[test]
fn unknown_keys_and_bad_flags_exit_2() {
    let dir = setup("");
    let o = sdcw(
        dir.path(),
        &["finetune", "-c", "exp.cfg", "--set", "learning_rte=1"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rte"));
    assert_eq!(
        sdcw(dir.path(), &["finetune", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(sdcw(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = setup("");
    let o = sdcw(
        dir.path(),
        &["eval", "-c", "exp.cfg", "--set", "model=missing.sdcw"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.sdcw"));
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = sdcw(dir.path(), &["report", "-i", "empty", "-o", "tables"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn a_held_lock_blocks_a_second_experiment() {
    let dir = setup("");
    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    fs::write(runs.join(LOCK_FILE), "1").unwrap();
    let o = sdcw(dir.path(), &["finetune", "-c", "exp.cfg", "-o", "runs"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
    fs::remove_file(runs.join(LOCK_FILE)).unwrap();
    let o = sdcw(dir.path(), &["finetune", "-c", "exp.cfg", "-o", "runs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!runs.join(LOCK_FILE).exists());
}

#[test]
fn report_regenerates_the_pruning_table() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (lang, seed) in [("hau", 1), ("yor", 2)] {
        fs::write(
            root.join(format!("{lang}.cfg")),
            format!("{BASE}seeds = 1, 3\ndata_seed = {seed}\nsparsity = 0.5, 0.9\n")
                .replace("seeds = 1\n", "")
                .replace("data/", &format!("{lang}/")),
        )
        .unwrap();
        let cfg = format!("{lang}.cfg");
        assert!(sdcw(root, &["synth-data", "-c", &cfg, "-o", lang])
            .status
            .success());
        let o = sdcw(root, &["prune", "-c", &cfg, "-o", "runs"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let reports = load_reports(&root.join("runs")).unwrap();
    assert_eq!(reports.len(), 8);
    assert!(root
        .join("runs/prune-desk-yor-p0.9-before-aggregate.json")
        .exists());

    let o = sdcw(root, &["report", "-i", "runs", "-o", "tables"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(root.join("tables/pruning.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "prune_rate,lang,loss,precision,recall,f1,inference_time,pruned_params"
    );
    let keys: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    assert_eq!(
        keys,
        [
            ("0.5", "hau"),
            ("0.5", "yor"),
            ("0.9", "hau"),
            ("0.9", "yor")
        ]
    );
    let runs = fs::read_to_string(root.join("tables/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 9);
}

#[test]
fn transfer_to_a_new_tag_set_resets_the_head() {
    let dir = setup("");
    let root = dir.path();
    let o = sdcw(root, &["finetune", "-c", "exp.cfg", "-o", "runs"]);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(
        root.join("new.cfg"),
        format!("{BASE}entity_types = PER, LOC\ndata_seed = 9\nmodel = runs/finetune-desk-data-scratch-seed1.sdcw\n")
            .replace("data/", "new/"),
    )
    .unwrap();
    assert!(sdcw(root, &["synth-data", "-c", "new.cfg", "-o", "new"])
        .status
        .success());
    let o = sdcw(root, &["transfer", "-c", "new.cfg", "-o", "runs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(
        root.join("runs/transfer-desk-new-finetune-desk-data-scratch-seed1-seed1.json"),
    )
    .unwrap();
    let r: RunReport = serde_json::from_str(&text).unwrap();
    assert!(r.baseline.is_none());
    assert!(r.warnings.iter().any(|w| w.contains("re-initialized")));
    assert_eq!(r.dataset, "new");
    let tags = fs::read_to_string(
        root.join("runs/transfer-desk-new-finetune-desk-data-scratch-seed1-seed1.tags"),
    )
    .unwrap();
    assert_eq!(tags.lines().count(), 5);
}

#[test]
fn oneshot_pruning_reports_the_unpruned_baseline() {
    let dir = setup("");
    let root = dir.path();
    assert!(sdcw(root, &["finetune", "-c", "exp.cfg", "-o", "runs"])
        .status
        .success());
    let o = sdcw(
        root,
        &[
            "prune",
            "-c",
            "exp.cfg",
            "-o",
            "runs",
            "--set",
            "schedule=oneshot",
            "--set",
            "sparsity=0.6",
            "--set",
            "model=runs/finetune-desk-data-scratch-seed{seed}.sdcw",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text =
        fs::read_to_string(root.join("runs/prune-desk-data-p0.6-oneshot-seed1.json")).unwrap();
    let r: RunReport = serde_json::from_str(&text).unwrap();
    let (b, e) = (r.baseline.unwrap(), r.eval.unwrap());
    assert_eq!(b.pruned_params, 0);
    assert!((e.sparsity - 0.6).abs() < 1e-4);
    assert_eq!(
        e.nonzero_params + (e.total_params - e.nonzero_params),
        e.total_params
    );
    assert!(r.comparison.unwrap().size_reduction_pct > 0.0);
    assert!(r.train_losses.is_empty());

    let o = sdcw(
        root,
        &[
            "prune",
            "-c",
            "exp.cfg",
            "-o",
            "runs",
            "--set",
            "schedule=oneshot",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}
