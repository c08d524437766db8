use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[data]
min_degree = 1

[data.synthetic]
n_users = 60
n_items = 200
min_history = 6
max_history = 10

[model]
d = 16
k_item = 2
k_user = 2
layers = 1
heads = 2
reader_layers = 1

[numeric.train]
steps = 20

[pretrain]
epochs = 1
max_steps = 3
warmup_steps = 1
lr = 1e-3

[finetune]
epochs = 1
max_steps = 3
warmup_steps = 1
lr = 1e-3
"#;

fn unirec(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unirec"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn oracle_scorer_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "o.toml", &format!("{TINY}\n[eval]\nscorer = \"oracle\"\n"));
    let o = unirec("evaluate", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(dir.path().join("metrics.txt"));
    let row = table.lines().find(|l| l.starts_with("oracle")).unwrap();
    let values: Vec<&str> = row.split_whitespace().skip(2).collect();
    assert_eq!(values, ["1.0000"; 3]);
    assert!(table.starts_with("# config "));
}

#[test]
fn pipeline_from_files_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = config(d, "gen.toml", TINY);
    let o = unirec("synth-data", &gen, &d.join("data"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let synthetic = TINY.find("[data.synthetic]").unwrap();
    let model = TINY.find("[model]").unwrap();
    let files = "[data]\nmin_degree = 1\npath = \"data/data.jsonl\"\nregistry = \"data/registry.toml\"\nsidecar = \"data/sidecar.jsonl\"\n";
    let text = format!("seed = 4\n{files}\n{}", &TINY[model..]);
    assert!(!text.contains("synthetic") && synthetic < model);
    let run = config(d, "run.toml", &text);

    let o = unirec("preprocess", &run, &d.join("a"), &["--strict"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read(d.join("a/splits.jsonl")).lines().any(|l| l.contains("\"split\":\"test\"")));

    for out in ["a", "b"] {
        for cmd in ["pretrain", "finetune", "evaluate"] {
            let o = unirec(cmd, &run, &d.join(out), &["--threads", "2"]);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
    }
    for f in ["pretrain.ckpt", "finetune.ckpt", "metrics.txt", "finetune.log.jsonl"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let log = read(d.join("a/pretrain.log.jsonl"));
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.contains("\"recon\"")));
    assert!(stderr(&unirec("finetune", &run, &d.join("a"), &[])).contains("starting from"));
}

#[test]
fn checkpoint_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let wide = config(d, "wide.toml", &TINY.replace("d = 16", "d = 64"));
    let o = unirec("pretrain", &wide, d, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::rename(d.join("pretrain.ckpt"), d.join("finetune.ckpt")).unwrap();

    let narrow = config(d, "narrow.toml", TINY);
    let o = unirec("evaluate", &narrow, d, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("`d`"), "{}", stderr(&o));

    let bytes = std::fs::read(d.join("finetune.ckpt")).unwrap();
    std::fs::write(d.join("finetune.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let o = unirec("evaluate", &wide, d, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(unirec("preprocess", &d.join("missing.toml"), d, &[]).status.code(), Some(1));
    let bad = config(d, "bad.toml", &TINY.replace("heads = 2", "heads = 3"));
    assert_eq!(unirec("preprocess", &bad, d, &[]).status.code(), Some(1));
    let no_data = config(d, "nodata.toml", "[data]\npath = \"x.jsonl\"\nregistry = \"r.toml\"\n");
    assert_eq!(unirec("preprocess", &no_data, d, &[]).status.code(), Some(2));
    let blowup = config(d, "blowup.toml", &TINY.replace("steps = 20", "steps = 20\nlr = 1e30"));
    let o = unirec("pretrain", &blowup, d, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_unirec")).arg("evaluate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_flag_changes_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "c.toml", &format!("{TINY}\n[eval]\nscorer = \"random\"\n"));
    let header = |seed: &str| {
        let o = unirec("evaluate", &cfg, d, &["--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        read(d.join("metrics.txt")).lines().next().unwrap().to_string()
    };
    assert_eq!(header("1"), header("1"));
    assert_ne!(header("1"), header("2"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "g.toml", TINY);
    let o = unirec("gradcheck", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read(dir.path().join("gradcheck.txt"));
    assert!(report.contains("whole_model") && !report.contains("FAIL"));
}
