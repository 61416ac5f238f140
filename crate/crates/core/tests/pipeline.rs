//! End-to-end generate → train → eval → infer through the CLI layer.

use std::path::{Path, PathBuf};
use std::process::Command;

use eaten::cli::{self, Common, EvalArgs, GenerateArgs, InferArgs, SplitArg, TrainArgs};
use eaten::io;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn common(cfg: &Path) -> Common {
    Common {
        config: Some(cfg.to_path_buf()),
        seed: None,
        jobs: 1,
    }
}

fn generate(cfg: &Path, out: &Path) {
    cli::cmd_generate(&GenerateArgs {
        common: common(cfg),
        out: out.to_path_buf(),
    })
    .unwrap();
}

fn train_args(cfg: &Path, data: &Path, out: &Path, epochs: usize, resume: bool) -> TrainArgs {
    TrainArgs {
        common: common(cfg),
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        epochs: Some(epochs),
        ablate_state_transition: false,
        attention_norm: None,
        resume,
    }
}

#[test]
fn generate_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke.toml");
    generate(&cfg, &dir.path().join("a"));
    generate(&cfg, &dir.path().join("b"));
    let (ma, da) = io::read_dataset(&dir.path().join("a")).unwrap();
    let (mb, _) = io::read_dataset(&dir.path().join("b")).unwrap();
    assert_eq!(ma.hash, mb.hash);
    assert_eq!((ma.n_train, ma.n_test), (50, 10));

    let run = eaten::config::RunConfig::load(&cfg).unwrap();
    let exec = eaten::parallel::Executor::sequential();
    let fresh = eaten::synthgen::generate_dataset(&run.scenario, &run.transform, 50, 10, run.seed, &exec).unwrap();
    assert_eq!(fresh.train, da.train, "reloaded samples differ from generated ones");
}

#[test]
fn tampered_dataset_fails_the_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    generate(&config("smoke.toml"), dir.path());
    let img = dir.path().join("images/train-000000.pgm");
    let mut bytes = std::fs::read(&img).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&img, bytes).unwrap();
    assert!(io::read_dataset(dir.path()).is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke.toml");
    let data = dir.path().join("data");
    generate(&cfg, &data);

    let full = dir.path().join("full");
    cli::cmd_train(&train_args(&cfg, &data, &full, 4, false)).unwrap();

    let split = dir.path().join("split");
    cli::cmd_train(&train_args(&cfg, &data, &split, 2, false)).unwrap();
    cli::cmd_train(&train_args(&cfg, &data, &split, 4, true)).unwrap();

    let a = std::fs::read(full.join("last.ckpt")).unwrap();
    let b = std::fs::read(split.join("last.ckpt")).unwrap();
    assert!(a == b, "final checkpoints differ");
    let la = std::fs::read_to_string(full.join("log.ndjson")).unwrap();
    let lb = std::fs::read_to_string(split.join("log.ndjson")).unwrap();
    let strip = |s: &str| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("seconds");
                v
            })
            .collect()
    };
    assert_eq!(strip(&la), strip(&lb));
    assert_eq!(strip(&la).len(), 4);
}

#[test]
fn eval_is_deterministic_and_infer_keys_match_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke.toml");
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    generate(&cfg, &data);
    cli::cmd_train(&train_args(&cfg, &data, &run, 1, false)).unwrap();

    let eval = |jobs| {
        cli::cmd_eval(&EvalArgs {
            common: Common {
                config: None,
                seed: None,
                jobs,
            },
            checkpoint: run.join("best.ckpt"),
            data: data.clone(),
            split: SplitArg::Test,
            out: None,
        })
        .unwrap()
    };
    assert_eq!(eval(1), eval(1));
    assert_eq!(eval(1), eval(3));

    let out = cli::cmd_infer(&InferArgs {
        common: common(&cfg),
        checkpoint: run.join("best.ckpt"),
        image: data.join("images/test-000000.pgm"),
    })
    .unwrap();
    let keys: Vec<&str> = out.keys().map(String::as_str).collect();
    assert_eq!(keys, ["CODE", "NAME", "TAG"]);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eaten"))
}

#[test]
fn missing_schema_entity_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap();
    let broken = text.replace("entities = [\"NAME\", \"TAG\"]", "entities = [\"NAME\"]");
    let cfg = dir.path().join("broken.toml");
    std::fs::write(&cfg, broken).unwrap();
    let out = binary()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("TAG"), "stderr does not name the entity: {err}");
}

#[test]
fn unknown_config_key_and_bad_flags_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap();
    let cfg = dir.path().join("extra.toml");
    std::fs::write(&cfg, text.replace("[data]", "[data]\nsurprise = 1")).unwrap();
    let out = binary().args(["generate", "--config"]).arg(&cfg).args(["--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = binary().args(["train", "--attention-norm", "cosine"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shape_mismatch_on_load_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke.toml");
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    generate(&cfg, &data);
    cli::cmd_train(&train_args(&cfg, &data, &run, 1, false)).unwrap();

    let text = std::fs::read_to_string(&cfg).unwrap();
    let wider = dir.path().join("wider.toml");
    std::fs::write(&wider, text.replace("hidden = 32", "hidden = 24")).unwrap();
    let out = binary()
        .args(["eval", "--config"])
        .arg(&wider)
        .arg("--checkpoint")
        .arg(run.join("best.ckpt"))
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("decoder0."), "stderr does not name a parameter: {err}");
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = binary()
        .args(["train", "--config"])
        .arg(config("smoke.toml"))
        .arg("--data")
        .arg(dir.path().join("nothing"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
