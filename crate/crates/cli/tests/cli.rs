use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetaug_cli::ExperimentConfig;
use hetaug_core::corpus::load_dataset;

const BIN: &str = env!("CARGO_BIN_EXE_hetaug");

fn hetaug(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_paths(o: &Output) -> Vec<PathBuf> {
    String::from_utf8_lossy(&o.stdout).lines().map(PathBuf::from).collect()
}

/// Tiny config: 100-instance corpus, small generators and router, only
/// seq2seq and oversampling variants.
const TINY: &str = r#"
seed = 3
output_dir = "out"

[schema.synthetic]
intents_per_domain = 3

[corpus]
train_size = 100
test_size = 40
tail_threshold = 8
tail_test_size = 20

[generators]
enabled = ["seq2seq"]

[generators.seq2seq]
encoder_layers = 1
decoder_layers = 1
model_dim = 16
heads = 2
epochs = 1

[router]
word_embedding_dim = 8
categorical_embedding_dim = 4
text_encoder_hidden = 8
hypothesis_sequence_hidden = 8
mlp_hidden = 8
epochs = 1

[extrinsic]
thresholds = [4, 8]

[[extrinsic.variants]]
augmenter = "oversample"
ratio = 2

[[extrinsic.variants]]
augmenter = "seq2seq"
ratio = 1
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_corpus_writes_loadable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = hetaug(&["gen-corpus", "-c", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let paths = stdout_paths(&o);
    let train = dir.path().join("out/corpus/train.jsonl");
    assert!(paths.contains(&train));
    assert!(paths.iter().all(|p| p.exists()));
    let d = load_dataset(&train).unwrap();
    assert_eq!(d.len(), 100);
    assert!(!load_dataset(dir.path().join("out/corpus/tail_test.jsonl")).unwrap().is_empty());
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = hetaug(&["gen-corpus", "-c", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/exp.toml"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(hetaug(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hetaug(&["gen-corpus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    assert_eq!(hetaug(&["train-augmenter", "-c", c, "--generator", "oversample"]).status.code(), Some(2));
    assert!(hetaug(&["--help"]).status.success());
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        (TINY.replace("seed = 3", ""), "seed"),
        (format!("{TINY}\nbogus = 1\n"), "bogus"),
        (TINY.replace("ratio = 2", "ratio = 0"), "ratio"),
        (TINY.replace("enabled = [\"seq2seq\"]", "enabled = []"), "not enabled"),
    ] {
        let cfg = write_config(dir.path(), &text);
        let o = hetaug(&["gen-corpus", "-c", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{needle}");
        assert!(stderr(&o).contains(needle), "{needle}: {}", stderr(&o));
        assert!(stderr(&o).contains("exp.toml"));
    }
    let cfg = write_config(dir.path(), TINY);
    let o = hetaug(&["gen-corpus", "-c", cfg.to_str().unwrap(), "--set", "corpus.train_size=zero"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    for cmd in ["train-augmenter", "augment", "eval-extrinsic", "report"] {
        let o = hetaug(&[cmd, "-c", c]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
        assert!(stderr(&o).contains("error:"), "{cmd}");
    }
}

#[test]
fn overrides_and_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = ExperimentConfig::load(&cfg, &["router.epochs=4".into(), "output_dir=elsewhere".into()]).unwrap();
    assert_eq!(c.router.epochs, 4);
    assert_eq!(c.output_dir, dir.path().join("elsewhere"));
    assert_eq!(c.seed, 3);
}

#[test]
fn pipeline_subcommands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    let before = std::fs::read(&cfg).unwrap();
    for cmd in ["gen-corpus", "train-augmenter", "augment", "train-router", "eval-intrinsic", "eval-extrinsic"] {
        let o = hetaug(&[cmd, "-c", c]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert!(stdout_paths(&o).iter().all(|p| p.exists()), "{cmd}");
    }
    let out = dir.path().join("out");
    assert!(out.join("augment/oversample-x2.jsonl").exists());
    assert!(out.join("intrinsic/intrinsic.tsv").exists());
    let o = hetaug(&["train-router", "-c", c, "--augmented", "oversample-x2"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let report = out.join("report");
    let names = ["report.table", "fig2_improvement.svg", "fig3_98pct.svg", "fig4_sorted_delta.svg", "fig5_field_dist.svg"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(report.join(n)).unwrap()).collect();
    std::fs::remove_dir_all(&report).unwrap();
    let o = hetaug(&["report", "-c", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(report.join(n)).unwrap()).collect();
    assert_eq!(first, again);
    assert_eq!(std::fs::read(&cfg).unwrap(), before);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            ExperimentConfig::load(&p, &[]).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}
