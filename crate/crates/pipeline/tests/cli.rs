use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const PHANTOM: &str = r#"
shape = { z = 16, y = 48, x = 64 }
centerline_amplitude = 2.0
lumen_radius = [2.0, 3.0]
wall_thickness = [1.0, 1.5]
plaque_boost = 1.0
plaque_span = [3, 6]
annotated_fraction = 0.3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cosmosseg"));
    c.env_remove("COSMOSSEG_WORKDIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn phantom_dataset(dir: &Path, n: usize) -> PathBuf {
    let cfg = dir.join("phantom.toml");
    fs::write(&cfg, PHANTOM).unwrap();
    let out = dir.join("data");
    let o = run(&["phantom", "--n", &n.to_string(), "--seed", "7", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 3
profile = "desk"
[paths]
catalog = "data/catalog.csv"
[overrides.unet]
num_downsamplings = 2
base_channels = 2
max_channels = 4
[overrides.training]
epochs = 1
iterations_per_epoch = 1
batch_size = 1
patch_size = {{ z = 16, y = 32, x = 32 }}
{extra}
"#
    );
    let p = dir.join("pipeline.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run_dir(stdout: &[u8]) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(stdout).trim())
}

#[test]
fn phantom_is_deterministic_and_balanced() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = phantom_dataset(a.path(), 8);
    let db = phantom_dataset(b.path(), 8);
    let catalog = fs::read_to_string(da.join("catalog.csv")).unwrap();
    assert_eq!(catalog, fs::read_to_string(db.join("catalog.csv")).unwrap());
    for f in 0..4 {
        assert_eq!(catalog.lines().skip(1).filter(|l| l.ends_with(&format!(",{f}"))).count(), 2);
    }
    for sub in ["images/phantom_003.nii.gz", "truth/phantom_003.nii.gz", "annotations/phantom_003.json"] {
        assert_eq!(fs::read(da.join(sub)).unwrap(), fs::read(db.join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn too_few_cases_exit_code_two() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["phantom", "--n", "2", "--seed", "7", "--out", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot fill 4 folds"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "profile = \"huge\"\n[paths]\ncatalog = \"x.csv\"\n").unwrap();
    assert_eq!(code(&run(&["run", "--config", bad.to_str().unwrap(), "--work", d.path().to_str().unwrap()])), 2);
    let cfg = tiny_config(d.path(), "");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--stages", "interpolate,dance", "--work", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stage_isolation_prerequisites_and_lock() {
    let d = tempfile::tempdir().unwrap();
    phantom_dataset(d.path(), 4);
    let cfg = tiny_config(d.path(), "");
    let work = d.path().join("work");
    let cfg_s = cfg.to_str().unwrap();

    let o = run(&["run", "--config", cfg_s, "--stages", "propagate", "--work", work.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["run", "--config", cfg_s, "--stages", "interpolate", "--work", work.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o.stdout);
    assert_eq!(fs::read_dir(dir.join("interpolated")).unwrap().count(), 4);
    for absent in ["fold-0", "predictions", "scores.csv"] {
        assert!(!dir.join(absent).exists(), "{absent}");
    }
    let first = fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(first.contains("\"interpolate\""));

    // the env var is the fallback work root
    let o = bin().args(["run", "--config", cfg_s, "--stages", "interpolate", "--quiet"]).env("COSMOSSEG_WORKDIR", &work).output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(run_dir(&o.stdout), dir);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"]["interpolate"]["reproduced"], serde_json::Value::Bool(true));

    fs::write(dir.join(".lock"), "").unwrap();
    let o = run(&["run", "--config", cfg_s, "--stages", "interpolate", "--work", work.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn tiny_full_run_and_evaluate_command() {
    let d = tempfile::tempdir().unwrap();
    let data = phantom_dataset(d.path(), 4);
    let cfg = tiny_config(d.path(), "[crossval]\nfolds = [1]\n");
    let work = d.path().join("work");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--work", work.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o.stdout);

    let scores = fs::read_to_string(dir.join("scores.csv")).unwrap();
    let mut lines = scores.lines();
    assert_eq!(lines.next(), Some("case_id,model,dsc_lumen,dsc_normal_wall,dsc_diseased_wall,dsc_average"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().any(|r| r.contains(",Seg-Model-A,")) && rows.iter().any(|r| r.contains(",Seg-Model-B,")));
    let table = fs::read_to_string(dir.join("table.txt")).unwrap();
    assert!(table.starts_with("Methods") && table.contains("Diseased Vessel Wall"));
    let diagnosis = fs::read_to_string(dir.join("diagnosis.csv")).unwrap();
    assert!(diagnosis.starts_with("case_id,side,slice_index,status,diseased_voxels,wall_voxels\n"));
    assert_eq!(diagnosis.lines().count(), 1 + 2 * 16);

    let out = d.path().join("eval.csv");
    let o = run(&[
        "evaluate",
        "--pred",
        dir.join("predictions/seg-model-b").to_str().unwrap(),
        "--truth",
        data.join("truth").to_str().unwrap(),
        "--scope",
        "full",
        "--model",
        "Seg-Model-B",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated = fs::read_to_string(&out).unwrap();
    let b_row = rows.iter().find(|r| r.contains("Seg-Model-B")).unwrap();
    assert!(evaluated.contains(b_row), "{evaluated}\nvs\n{b_row}");

    let o = run(&[
        "evaluate",
        "--pred",
        dir.join("predictions/seg-model-b").to_str().unwrap(),
        "--truth",
        data.join("annotations").to_str().unwrap(),
        "--scope",
        "annotated",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("prediction"));
}

#[test]
fn regenerated_data_gets_a_new_run_directory() {
    let d = tempfile::tempdir().unwrap();
    let data = phantom_dataset(d.path(), 4);
    let catalog = fs::read(data.join("catalog.csv")).unwrap();
    let cfg = tiny_config(d.path(), "");
    let work = d.path().join("work");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--stages", "interpolate", "--work", work.to_str().unwrap(), "--quiet"];
    let first = run_dir(&run(&args).stdout);

    // same catalog bytes, different images
    let o = run(&[
        "phantom", "--n", "4", "--seed", "7", "--out", data.to_str().unwrap(),
        "--config", d.path().join("phantom.toml").to_str().unwrap(), "--shape", "16,48,72",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(data.join("catalog.csv")).unwrap(), catalog);
    let second = run_dir(&run(&args).stdout);
    assert!(first.is_dir() && second.is_dir());
    assert_ne!(first, second);
}
