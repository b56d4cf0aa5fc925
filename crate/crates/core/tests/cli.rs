use std::process::{Command, Output};

const TINY: &str = "grid_side = 4\nnum_objects = 2\nvocab_size = 32\ninstr_len = 4\nchunk_len = 2\nratio = 4\n\
tower_blocks = 1\nhook_depths = 0\ninstr_blocks = 1\ndecoder_layers = 1\nsteps = 2\nbatch_size = 2\n\
eval_interval = 1\neval_count = 4\ndata_count = 6\nbench_reps = 5\nbench_warmup = 0\n";

fn svla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svla")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&svla(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&svla(&["no-such-command"])), 1);
    let o = svla(&["gen-data", "--set", "no_such_key=1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert_eq!(code(&svla(&["gen-data", "--set", "batch_size=0"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.svt");
    let o = svla(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let junk = dir.path().join("junk.svt");
    std::fs::write(&junk, b"not a tensor file").unwrap();
    assert_eq!(code(&svla(&["eval", "--checkpoint", junk.to_str().unwrap()])), 2);
}

#[test]
fn gen_train_eval_dump_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    std::fs::write(p("tiny.cfg"), TINY).unwrap();

    let o = svla(&["gen-data", "--config", &p("tiny.cfg"), "--out", &p("data.svt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("type,episodes\n"));

    let o = svla(&[
        "train",
        "--config",
        &p("tiny.cfg"),
        "--data",
        &p("data.svt"),
        "--out",
        &p("run"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,batch_loss,train_mse,eval_mse,recall,success,tokens,flops\n"));

    let ckpt = p("run/checkpoint.svt");
    let o = svla(&["eval", "--checkpoint", &ckpt, "--out", &p("eval.csv")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p("eval.csv")).unwrap();
    assert_eq!(csv, String::from_utf8_lossy(&o.stdout));
    assert!(csv.starts_with("episodes,eval_mse,recall,success\n4,"));

    let o = svla(&["dump-attn", "--checkpoint", &ckpt, "--out-dir", &p("attn")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("attn/anchors.csv").exists());
    assert!(dir.path().join("attn/S.svt").exists());
}
