use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use neuropatch::bench::Grammar;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuropatch"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// A directory with a small corpus and a briefly trained model.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        for args in [
            &["gen-corpus", "--size", "600"][..],
            &["train", "--steps", "8"][..],
            &["find-failures", "--max-pairs", "3"][..],
        ] {
            let o = run(&dir, args);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
        dir
    })
}

fn copy_dir(from: &Path) -> tempfile::TempDir {
    let to = tempfile::tempdir().unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.path().join(e.file_name())).unwrap();
    }
    to
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = banana\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path()).arg("gen-corpus").output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    assert_eq!(code(&run(dir.path(), &["repair", "--method", "kn", "--variant", "est-plain"])), 2);
    assert_eq!(code(&run(dir.path(), &["repair", "--isolation", "sideways"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["train"])), 3);
    assert_eq!(code(&run(dir.path(), &["find-failures"])), 3);
    assert_eq!(code(&run(dir.path(), &["report"])), 3);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = copy_dir(trained());
    let before = fs::read(dir.path().join("corpus_train.jsonl")).unwrap();
    let o = run(dir.path(), &["gen-corpus", "--size", "600"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = run(dir.path(), &["--force", "gen-corpus", "--size", "600"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.path().join("corpus_train.jsonl")).unwrap(), before);
}

#[test]
fn kn_without_parallel_data_skips_everything() {
    let dir = copy_dir(trained());
    fs::write(dir.path().join("corpus_train.jsonl"), "").unwrap();
    let o = run(dir.path(), &["repair", "--method", "kn"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("repair_kn_fresh.jsonl")).unwrap();
    let mut cases = 0;
    for line in log.lines() {
        let rep: serde_json::Value = serde_json::from_str(line).unwrap();
        for o in rep["outcomes"].as_array().unwrap() {
            cases += 1;
            assert_eq!(o["status"], "skipped");
            assert_eq!(o["note"], "no parallel data");
        }
    }
    assert!(cases > 0);
    assert_eq!(fs::read_to_string(dir.path().join("patches_kn_fresh.jsonl")).unwrap(), "");
}

#[test]
fn inspection_commands_write_csv() {
    let dir = copy_dir(trained());
    assert_eq!(code(&run(dir.path(), &["dump-bases"])), 0);
    let bases = fs::read_to_string(dir.path().join("bases_output.csv")).unwrap();
    assert!(bases.starts_with("token_id,token_text,side,d0,"));
    assert_eq!(bases.lines().count(), 102);

    let g = Grammar::reference();
    let sample: serde_json::Value =
        serde_json::from_str(fs::read_to_string(dir.path().join("corpus_heldout.jsonl")).unwrap().lines().next().unwrap())
            .unwrap();
    let prompt: Vec<String> = sample["tokens"].as_array().unwrap()[..8]
        .iter()
        .map(|t| g.surface(t.as_u64().unwrap() as usize).to_string())
        .collect();
    let dest = dir.path().join("attr.csv");
    let o = bin()
        .arg("--out")
        .arg(dir.path())
        .args(["attribute", "--prompt", &prompt.join(" "), "--method", "actv", "--dump-attribution"])
        .arg(&dest)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&dest).unwrap();
    assert!(csv.starts_with("layer,unit,method,score,rank\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 256);

    let o = run(dir.path(), &["attribute", "--prompt", "no-such-token"]);
    assert_eq!(code(&o), 3);
}
