use std::path::Path;
use std::process::Command;

use hfpim::cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, SNAPSHOT};
use hfpim::synthdata::load_dataset;

fn hfpim(args: &[&str]) -> i32 {
    run(std::iter::once("hfpim").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_NET: &str = "network.texture_channels = 4
network.base_width = 4
network.depth = 3
network.codeword_dim = 8
ardl.codewords = 4
batch_size = 4
pretrain.epochs = 2
";

/// Small dataset with a held-out split plus a config file pointing at it.
fn small_setup(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let code = hfpim(&[
        "gen-data", "--num-identities", "4", "--test-identities", "2", "--image-size", "32", "--out", p(&data),
    ]);
    assert_eq!(code, EXIT_OK);
    let cfg = dir.join("cfg.txt");
    std::fs::write(&cfg, format!("dataset = {}\n{SMALL_NET}", p(&data.join("train")))).unwrap();
    cfg
}

#[test]
fn gen_data_writes_seventy_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let code = hfpim(&[
        "gen-data", "--seed", "0", "--num-identities", "10", "--yaws", "0,±30,±60,±90", "--image-size", "64", "--out",
        p(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(load_dataset(&out).unwrap().samples.len(), 70);
    assert!(out.join(SNAPSHOT).exists());
}

#[test]
fn held_out_split_written_next_to_full_set() {
    let dir = tempfile::tempdir().unwrap();
    small_setup(dir.path());
    let train = load_dataset(&dir.path().join("data/train")).unwrap();
    let test = load_dataset(&dir.path().join("data/test")).unwrap();
    assert_eq!((train.num_identities, test.num_identities), (2, 2));
    assert_eq!(train.samples.len() + test.samples.len(), 28);
}

#[test]
fn train_frontalize_eval_report_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_setup(dir.path());
    let run_dir = dir.path().join("run");
    assert_eq!(hfpim(&["train", "--config", p(&cfg), "--max-iter", "0", "--out", p(&run_dir)]), EXIT_OK);
    let ckpt = run_dir.join("ckpt_0");
    assert!(ckpt.join("manifest.json").exists());
    assert!(run_dir.join(SNAPSHOT).exists());

    let input = dir.path().join("data/preview/id0_yaw60.bin");
    let output = dir.path().join("front/out.bin");
    assert_eq!(
        hfpim(&["frontalize", "--checkpoint", p(&ckpt), "--input", p(&input), "--output", p(&output)]),
        EXIT_OK
    );
    assert_eq!(std::fs::metadata(&output).unwrap().len(), 3 * 32 * 32 * 4);
    assert!(output.with_extension("png").exists());

    let eval_dir = dir.path().join("eval");
    assert_eq!(hfpim(&["eval", "--checkpoint", p(&ckpt), "--out", p(&eval_dir)]), EXIT_OK);
    let report_dir = dir.path().join("report");
    let eval_json = eval_dir.join("eval.json");
    assert_eq!(
        hfpim(&["report", "--eval", p(&eval_json), "--ablation", p(&eval_json), "--out", p(&report_dir)]),
        EXIT_OK
    );
    for f in ["report.json", "report.md", "rank1_vs_yaw.png", "roc.png", SNAPSHOT] {
        assert!(report_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hfpim"))
        .args(["eval", "--checkpoint", p(&dir.path().join("missing")), "--out", p(&dir.path().join("e"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint"), "{stderr}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hfpim(&["no-such-command"]), EXIT_VALIDATION);
    assert_eq!(hfpim(&["gen-data", "--no-such-flag"]), EXIT_VALIDATION);
    assert_eq!(hfpim(&["--help"]), EXIT_OK);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_setup(dir.path());
    let code = hfpim(&["train", "--config", p(&cfg), "--set", "no.such.key=1", "--out", p(&dir.path().join("r"))]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn diverging_training_is_a_runtime_abort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_setup(dir.path());
    let code = hfpim(&[
        "train", "--config", p(&cfg), "--max-iter", "20", "--set", "learning_rate=1e30", "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(code, EXIT_RUNTIME);
}
