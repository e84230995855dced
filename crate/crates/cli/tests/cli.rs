use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
id = "tiny"
epochs = 4
batch_size = 16
phases = ["prune", "finetune"]

[lr]
initial = 0.05
final = 0.005
schedule = "linear_decay"

[prune]
method = "oberts_global"
start_epoch = 1.0
end_epoch = 3.0
initial_sparsity = 0.5
target_sparsity = 0.8
frequency = { every_epochs = 1.0 }

[kd]
hardness = 0.5
temperature = 2.0

[fisher]
block_size = 10
num_grads = 16
dampening = 1e-4

[data]
kind = "gaussian_mixture"
seed = 3
n_train = 256
n_test = 64
features = 6
classes = 3
spread = 1.0

[model]
inputs = 6
hidden = [10, 10]
classes = 3
activation = "relu"

[teacher]
epochs = 3
lr_initial = 0.05
lr_final = 0.005
"#;

fn surgeon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surgeon")).args(args).env_remove("SURGEON_THREADS").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_recipes_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/recipes");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = surgeon(&["validate-recipe", "--recipe", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", path.display(), stderr(&out));
        assert!(stdout(&out).contains(": ok"));
        n += 1;
    }
    assert!(n >= 7);
}

#[test]
fn thirty_epoch_recipe_compiles_to_seven_events() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/recipes/downstream-30ep-90pct.toml");
    let out = surgeon(&["validate-recipe", "--recipe", path.to_str().unwrap()]);
    assert!(stdout(&out).contains("7 prune events"), "{}", stdout(&out));
}

#[test]
fn invalid_recipe_exits_one_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", &TINY.replace("end_epoch = 3.0", "end_epoch = 9.0"));
    let out = surgeon(&["validate-recipe", "--recipe", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("prune.end_epoch"), "{}", stderr(&out));

    let unknown = write(tmp.path(), "unknown.toml", &TINY.replace("[kd]", "[kd]\nsoftness = 1.0"));
    let out = surgeon(&["run", "--recipe", unknown.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("softness"), "{}", stderr(&out));
}

#[test]
fn run_report_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write(tmp.path(), "tiny.toml", TINY);
    let gmp = write(tmp.path(), "gmp.toml", &TINY.replace("oberts_global", "gmp_uniform").replace("id = \"tiny\"", "id = \"tiny-gmp\""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (r, o) in [(&recipe, &a), (&gmp, &b)] {
        let out = surgeon(&["run", "--recipe", r.to_str().unwrap(), "--seed", "4", "--out", o.to_str().unwrap(), "--threads", "1"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for f in ["report.json", "prune_log.csv", "timeline.csv", "saliency_last.csv", "model.bin", "mask.json", "fisher.bin"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let out = surgeon(&["report", a.to_str().unwrap(), "--compare", b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("predicted") && text.contains("measured"), "{text}");
    assert!(text.contains("tiny-gmp") && text.contains("held-out loss"), "{text}");
    assert!(!text.contains("warning"), "{text}");
    let csv = std::fs::read_to_string(a.join("sparsity_vs_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn same_seed_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write(tmp.path(), "tiny.toml", TINY);
    let strip = |dir: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("phase_seconds");
        v
    };
    let dirs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("r{i}"))).collect();
    for d in &dirs {
        assert!(surgeon(&["run", "--recipe", recipe.to_str().unwrap(), "--seed", "9", "--out", d.to_str().unwrap()]).status.success());
    }
    assert_eq!(strip(&dirs[0]), strip(&dirs[1]));
    assert_eq!(std::fs::read(dirs[0].join("model.bin")).unwrap(), std::fs::read(dirs[1].join("model.bin")).unwrap());
}

#[test]
fn aborted_run_exits_two_and_keeps_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write(tmp.path(), "boom.toml", &TINY.replace("initial = 0.05\nfinal", "initial = 1e6\nfinal"));
    let out_dir = tmp.path().join("out");
    let out = surgeon(&["run", "--recipe", recipe.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("prune"), "{}", stderr(&out));
    let report = surgeon(&["report", out_dir.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("warning: run did not complete"), "{}", stdout(&report));
}

#[test]
fn missing_run_directory_is_a_runtime_error() {
    let out = surgeon(&["report", "/nonexistent/surgeon-run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_check_prints_one_line_per_oracle() {
    let out = surgeon(&["oracle-check", "--fisher-cases", "0", "--group-cases", "25"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2, "{text}");
}
