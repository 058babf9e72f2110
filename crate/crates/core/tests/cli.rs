//! End-to-end recipe through the `dasr` binary on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

use decoupled_asr::model::checkpoint::{META_A2P_DIGEST, META_STAGE};
use decoupled_asr::model::Checkpoint;

const DATA_CFG: &str = "n_cs_train = 6\nn_alpha_train = 4\nn_dev = 3\nn_test = 3\nn_text = 6\nmin_units = 2\nmax_units = 3\n";
const RUN_CFG: &str = "d_model = 16\nheads = 2\nffn_dim = 24\nn_enc_baseline = 1\nn_dec = 1\nn_acoustic_enc = 1\n\
n_phoneme_enc = 1\nconv_channels = 2\nctc_beam = 3\nn_candidates = 2\nbatch_size = 4\nwarmup_steps = 10\navg_last = 2\n";

fn dasr(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dasr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = dasr(args);
    assert!(
        out.status.success(),
        "dasr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn mer_of(json: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    v["mer"].as_f64().unwrap()
}

#[test]
fn full_recipe_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, run_cfg, data_cfg) = (root.join("data"), root.join("run.toml"), root.join("data.toml"));
    std::fs::write(&data_cfg, DATA_CFG).unwrap();
    std::fs::write(&run_cfg, RUN_CFG).unwrap();

    ok(&["gen-data", "--config", p(&data_cfg), "--out", p(&data)]);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "text.jsonl", "lexicon.txt", "corpus.toml", "resolved.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let common = ["--config", p(&run_cfg), "--data", p(&data), "--epochs", "2"];
    let a2p = root.join("a2p");
    ok(&[&["train-a2p"], &common[..], &["--out", p(&a2p)]].concat());
    let p2t = root.join("p2t");
    ok(&[&["train-p2t"], &common[..], &["--out", p(&p2t), "--init", p(&a2p.join("a2p.ckpt"))]].concat());
    let joint = root.join("joint");
    ok(&[&["train-joint"], &common[..], &["--out", p(&joint), "--init", p(&p2t.join("p2t.ckpt"))]].concat());

    let a2p_ckpt = Checkpoint::load(&a2p.join("a2p.ckpt")).unwrap();
    let joint_ckpt = Checkpoint::load(&joint.join("joint.ckpt")).unwrap();
    assert_eq!(a2p_ckpt.meta(META_STAGE), Some("a2p_pretrain"));
    assert_eq!(joint_ckpt.meta(META_STAGE), Some("joint"));
    assert_eq!(a2p_ckpt.meta(META_A2P_DIGEST), joint_ckpt.meta(META_A2P_DIGEST));
    assert_eq!(joint_ckpt.config().unwrap().target_vocab, a2p_ckpt.config().unwrap().target_vocab);

    // The snapshot is a valid config for the next run.
    let resolved = std::fs::read_to_string(joint.join("resolved.toml")).unwrap();
    assert!(resolved.starts_with("# dasr train-joint"));
    assert!(resolved.contains("d_model = 16") && resolved.contains("lr_scale"));
    assert!(joint.join("steps.csv").exists() && joint.join("epochs.csv").exists());

    let hyp = root.join("hyp.jsonl");
    ok(&["decode", "--data", p(&data), "--ckpt", p(&joint.join("joint.ckpt")), "--beam", "2", "--out", p(&hyp)]);
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), 3);
    let report = root.join("report.json");
    let text = ok(&["eval", "--data", p(&data), "--ref", p(&data.join("test.jsonl")), "--hyp", p(&hyp), "--json", p(&report)]);
    assert!(text.contains("PER"), "{text}");
    assert!(mer_of(&report).is_finite());

    // Averaging a single checkpoint reproduces it exactly.
    let avg = root.join("avg.ckpt");
    ok(&["avg-ckpt", "--last", "1", "--out", p(&avg), p(&a2p.join("a2p.ckpt")), p(&joint.join("joint.ckpt"))]);
    let back = Checkpoint::load(&avg).unwrap();
    assert_eq!(back.params, joint_ckpt.params);
    assert_eq!(back.params.digest(), joint_ckpt.params.digest());
}

#[test]
fn joint_training_needs_a_pretrained_a2p() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, run_cfg, data_cfg) = (root.join("data"), root.join("run.toml"), root.join("data.toml"));
    std::fs::write(&data_cfg, DATA_CFG).unwrap();
    std::fs::write(&run_cfg, RUN_CFG).unwrap();
    ok(&["gen-data", "--config", p(&data_cfg), "--out", p(&data)]);
    let common = ["--config", p(&run_cfg), "--data", p(&data), "--epochs", "1", "--no-dev"];
    let p2t = root.join("p2t");
    ok(&[&["train-p2t"], &common[..], &["--out", p(&p2t)]].concat());
    let out = dasr(&[&["train-joint"], &common[..], &["--out", p(&root.join("j")), "--init", p(&p2t.join("p2t.ckpt"))]].concat());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrained A2P"));
}

#[test]
fn identical_manifests_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, data_cfg) = (root.join("data"), root.join("data.toml"));
    std::fs::write(&data_cfg, DATA_CFG).unwrap();
    ok(&["gen-data", "--config", p(&data_cfg), "--out", p(&data)]);
    let test = data.join("test.jsonl");
    let report = root.join("r.json");
    let text = ok(&["eval", "--data", p(&data), "--ref", p(&test), "--hyp", p(&test), "--per-no-wb", "--json", p(&report)]);
    assert!(text.contains("0.00%"), "{text}");
    assert!(text.contains("PER 0.00%"), "{text}");
    assert_eq!(mer_of(&report), 0.0);
}

#[test]
fn bad_invocations_exit_nonzero() {
    assert!(!dasr(&["--no-such-flag"]).status.success());
    assert!(!dasr(&["decode", "--bogus"]).status.success());
    assert!(!dasr(&["eval", "--data", "/nonexistent", "--ref", "a", "--hyp", "b"]).status.success());
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "not_a_key = 1\n").unwrap();
    let out = dasr(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}
