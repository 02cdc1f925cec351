#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn sdlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlm")).args(args).output().expect("binary runs")
}

/// Runs and panics with stderr on failure.
pub fn ok(args: &[&str]) -> Output {
    let out = sdlm(args);
    assert!(
        out.status.success(),
        "sdlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> String {
    format!("{:?}", path.to_str().unwrap())
}

pub fn set(key: &str, path: &Path) -> String {
    format!("{key}={}", p(path))
}

/// A small model and attribute corpus config at `dir/run.toml`.
pub fn tiny_config(dir: &Path, seed: u64) -> PathBuf {
    let cfg = format!(
        "seed = {seed}\n\
         seq_len = 16\n\
         block_len = 4\n\
         diffusion_steps = 20\n\
         vocab_size = 40\n\
         d_model = 16\n\
         n_layers = 1\n\
         n_heads = 2\n\
         d_ff = 32\n\
         batch_size = 4\n\
         total_steps = 10\n\
         samples = 2\n\
         iterations = 2\n\
         decode_steps = 5\n\
         lambdas = [0.0, 100.0, 500.0, 2000.0]\n\
         synth_sequences = 24\n\
         aux_steps = 15\n\
         aux_d_model = 16\n\
         aux_n_layers = 1\n\
         aux_n_heads = 2\n\
         aux_d_ff = 32\n\
         aux_max_len = 32\n"
    );
    let path = dir.join("run.toml");
    fs::write(&path, cfg).unwrap();
    path
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
    pub train: PathBuf,
    pub classifier: PathBuf,
    pub reference: PathBuf,
}

impl Fixture {
    pub fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    pub fn vocab(&self) -> String {
        set("vocab", &self.data.join("vocab.txt"))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Synthetic data, a trained denoiser, classifier and reference model.
pub fn fixture(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), seed);
    let c = config.to_str().unwrap();
    let data = dir.path().join("data");
    let train = dir.path().join("train");
    let cls = dir.path().join("cls");
    let reference = dir.path().join("ref");
    ok(&["synth", "attribute", "-c", c, "-o", data.to_str().unwrap()]);
    let vocab = set("vocab", &data.join("vocab.txt"));
    let corpus = set("corpus", &data.join("corpus.txt"));
    ok(&["train", "-c", c, "-o", train.to_str().unwrap(), "--set", &corpus, "--set", &vocab]);
    ok(&[
        "train-classifier", "-c", c, "-o", cls.to_str().unwrap(), "--set", &vocab,
        "--set", &set("labeled_corpus", &data.join("labeled.tsv")),
    ]);
    ok(&["train-reference", "-c", c, "-o", reference.to_str().unwrap(), "--set", &vocab, "--set", &corpus]);
    Fixture {
        config: config.clone(),
        data,
        train,
        classifier: cls.join("classifier.ckpt"),
        reference: reference.join("reference.ckpt"),
        dir,
    }
}

/// Every file in `dir` with its bytes, sorted by name.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}
