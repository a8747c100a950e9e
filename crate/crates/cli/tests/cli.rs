use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const MPT: &str = env!("CARGO_BIN_EXE_mpt");

const TINY: &str = r#"{
  "data": {"n_languages": 3, "train_pool": 90, "test_per_lang": 24, "parallel_pool": 40,
           "parallel_size": 20, "pretrain_per_lang": 30, "pretrain_source": 60},
  "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16},
  "pretrain": {"steps": 20, "batch_size": 8},
  "prompt": {"length": 2},
  "train": {"k": 4, "epochs": 2, "batch_size": 6, "parallel_batch_size": 4, "seeds": [1, 2, 3, 4, 5]}
}"#;

fn mpt(args: &[&str]) -> Output {
    Command::new(MPT).args(args).env("MPT_THREADS", "1").output().expect("spawn mpt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config, data directory and pretrained backbone shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    backbone: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        let backbone = root.join("bb");
        ok(&mpt(&["gen-data", "--config", s(&config), "--out", s(&data)]));
        ok(&mpt(&["pretrain", "--config", s(&config), "--data", s(&data), "--out", s(&backbone)]));
        Fixture {
            _dir: dir,
            root,
            config,
            data,
            backbone,
        }
    })
}

fn scratch(name: &str) -> PathBuf {
    let p = fixture().root.join(name);
    let _ = fs::remove_dir_all(&p);
    p
}

fn train(method: &str, out: &Path, extra: &[&str]) -> Output {
    let f = fixture();
    let mut args = vec!["train", "--method", method, "--config", s(&f.config), "--backbone", s(&f.backbone), "--out", s(out)];
    args.extend_from_slice(extra);
    mpt(&args)
}

#[test]
fn gen_data_writes_echo_inputs_and_hashes() {
    let f = fixture();
    for name in ["languages.json", "train_pool.jsonl", "test.jsonl", "parallel.jsonl", "pretrain.jsonl", "config.json", "inputs.json"] {
        assert!(f.data.join(name).is_file(), "{name}");
    }
    let echo = fs::read_to_string(f.data.join("config.json")).unwrap();
    assert!(echo.contains("\"near_shared\""), "echo is fully resolved");
    assert!(!f.data.join(".lock").exists());
    let inputs = fs::read_to_string(f.backbone.join("inputs.json")).unwrap();
    assert!(inputs.contains("test.jsonl"));
    assert!(inputs.contains("config_hash"));
}

#[test]
fn mpt_with_five_seeds_writes_prompts_translators_and_results() {
    let out = scratch("run-mpt");
    let report = ok(&train("mpt", &out, &[]));
    for seed in 1..=5 {
        let d = out.join(format!("seed-{seed}"));
        for f in ["prompt.json", "prompt.bin", "translator.json", "translator.bin", "losses.csv"] {
            assert!(d.join(f).is_file(), "seed {seed}: {f}");
        }
        assert!(!d.join("backbone.json").exists());
        let losses = fs::read_to_string(d.join("losses.csv")).unwrap();
        assert!(losses.starts_with("step,epoch,l_ce,l_kld,l_total\n"));
    }
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("run_id,method,seed,k,lang,accuracy,n_test\n"));
    assert_eq!(results.lines().count(), 1 + 5 * 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 5);
    assert_eq!(summary["reporting"], "final-epoch");
    assert!(summary["param_counts"]["translator"].as_u64().unwrap() > 0);
    let header = report.lines().next().unwrap();
    assert_eq!(header.split_whitespace().count(), 1 + 3 + 1);
}

#[test]
fn sp_notes_that_the_translator_is_ignored() {
    let out = scratch("run-sp");
    let o = train("sp", &out, &["--seeds", "1"]);
    ok(&o);
    assert!(stderr(&o).contains("translator"));
    assert!(!out.join("seed-1/translator.json").exists());
    assert!(out.join("seed-1/prompt.json").exists());
}

#[test]
fn ft_saves_a_backbone_per_seed() {
    let out = scratch("run-ft");
    ok(&train("ft", &out, &["--seeds", "2"]));
    assert!(out.join("seed-2/backbone.json").is_file());
    assert!(!out.join("seed-2/prompt.json").exists());
}

#[test]
fn eval_is_idempotent_and_tables_agree() {
    let a = scratch("eval-mpt");
    let b = scratch("eval-sp");
    ok(&train("mpt", &a, &["--seeds", "1,2"]));
    ok(&train("sp", &b, &["--seeds", "1,2"]));
    let rep = scratch("report");
    let first = ok(&mpt(&["eval", "--run", s(&a), "--run", s(&b), "--out", s(&rep)]));
    let csv1 = fs::read(rep.join("report.csv")).unwrap();
    let second = ok(&mpt(&["eval", "--run", s(&a), "--run", s(&b), "--out", s(&rep)]));
    assert_eq!(first, second);
    assert_eq!(csv1, fs::read(rep.join("report.csv")).unwrap());
    let csv = String::from_utf8(csv1).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next().unwrap(), "method,L0,L1,L2,avg");
    let txt = fs::read_to_string(rep.join("report.txt")).unwrap();
    assert_eq!(txt, first);
    let nums = |t: &str| -> Vec<String> { t.lines().skip(1).flat_map(|l| l.split([',', ' ']).filter(|x| !x.is_empty()).skip(1).map(String::from).collect::<Vec<_>>()).collect() };
    assert_eq!(nums(&csv), nums(&txt));
}

#[test]
fn bad_config_exits_2_with_a_path() {
    let f = fixture();
    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"train": {"alpha": 0.5, "alhpa": 1}}"#).unwrap();
    let o = mpt(&["gen-data", "--config", s(&bad), "--out", s(&scratch("bad-data"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let range = f.root.join("range.json");
    fs::write(&range, r#"{"train": {"alpha": 2.0}}"#).unwrap();
    let o = mpt(&["gen-data", "--config", s(&range), "--out", s(&scratch("bad-data2"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_mismatch_exits_3() {
    let f = fixture();
    let other = f.root.join("other.json");
    fs::write(&other, TINY.replace("\"n_languages\": 3", "\"n_languages\": 4")).unwrap();
    let o = mpt(&["train", "--method", "sp", "--config", s(&other), "--backbone", s(&f.backbone), "--data", s(&f.data), "--out", s(&scratch("mismatch"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_backbone_exits_4() {
    let f = fixture();
    let o = mpt(&["train", "--method", "mpt", "--config", s(&f.config), "--backbone", s(&f.root.join("nowhere")), "--data", s(&f.data), "--out", s(&scratch("nobb"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn infeasible_few_shot_exits_5() {
    let o = train("mpt", &scratch("toomany"), &["--k", "200"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn missing_artifacts_exit_6() {
    let o = mpt(&["eval", "--run", s(&fixture().root.join("absent")), "--out", s(&scratch("noeval"))]);
    assert_eq!(o.status.code(), Some(6));
    let o = mpt(&["pretrain", "--data", s(&fixture().root.join("absent")), "--out", s(&scratch("nodata"))]);
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn a_locked_output_directory_is_refused() {
    let out = scratch("locked");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let o = train("sp", &out, &["--seeds", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"));
    assert!(!out.join("results.csv").exists());
}

#[test]
fn single_language_testbeds_refuse_transfer() {
    let f = fixture();
    let mono = f.root.join("mono.json");
    fs::write(&mono, TINY.replace("\"n_languages\": 3", "\"n_languages\": 1")).unwrap();
    let data = scratch("mono-data");
    let bb = scratch("mono-bb");
    ok(&mpt(&["gen-data", "--config", s(&mono), "--out", s(&data)]));
    ok(&mpt(&["pretrain", "--config", s(&mono), "--data", s(&data), "--out", s(&bb)]));
    let o = mpt(&["train", "--method", "mpt", "--config", s(&mono), "--backbone", s(&bb), "--out", s(&scratch("mono-run"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("target"));
    let o = mpt(&["ablate", "--sweep", "alpha", "--config", s(&mono), "--backbone", s(&bb), "--out", s(&scratch("mono-ab"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn resume_continues_the_step_counter() {
    let f = fixture();
    let bb = scratch("resume-bb");
    ok(&mpt(&["pretrain", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&bb)]));
    let out = ok(&mpt(&["pretrain", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&bb), "--resume"]));
    assert!(out.starts_with("steps 40\n"), "{out}");
    let log = fs::read_to_string(bb.join("pretrain_log_from_20.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().split(',').next().unwrap().parse::<u64>().unwrap() > 20);
}

#[test]
fn corpus_size_sweep_notes_the_empty_corpus_and_hashes_rows() {
    let f = fixture();
    let out = scratch("sweep");
    let o = mpt(&["ablate", "--sweep", "corpus_size", "--values", "0,10", "--seeds", "1", "--config", s(&f.config), "--backbone", s(&f.backbone), "--out", s(&out)]);
    ok(&o);
    assert!(stderr(&o).contains("alpha = 1"));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "sweep,value,config_hash,run_id,method,seed,k,lang,accuracy,n_test");
    let hashes: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(hashes.len(), 2);
    assert!(hashes.iter().all(|h| h.len() == 64));
}

#[test]
fn unknown_sweep_and_method_are_config_errors() {
    let f = fixture();
    let o = mpt(&["ablate", "--sweep", "depth", "--config", s(&f.config), "--backbone", s(&f.backbone), "--out", s(&scratch("nosweep"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = train("adapter", &scratch("nomethod"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_results() {
    let a = scratch("threads-1");
    let b = scratch("threads-3");
    ok(&train("mpt", &a, &["--seeds", "1,2,3"]));
    let f = fixture();
    let o = Command::new(MPT)
        .args(["train", "--method", "mpt", "--config", s(&f.config), "--backbone", s(&f.backbone), "--out", s(&b), "--seeds", "1,2,3"])
        .env("MPT_THREADS", "3")
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}
