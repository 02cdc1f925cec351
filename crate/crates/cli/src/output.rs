//! Output directory handling, provenance headers and input readers.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use sdlm_core::checkpoint::write_atomic;
use sdlm_core::corpus::{TokenizerMode, Vocabulary};

use crate::config::RunConfig;
use crate::CliError;

/// A prepared output directory tagged with the effective config's hash.
pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    pub seed: u64,
}

impl RunDir {
    /// Creates the directory and echoes the effective config into it.
    pub fn prepare(cfg: &RunConfig) -> Result<Self, CliError> {
        let seed = cfg.seed()?;
        let dir = cfg.output_dir()?.to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        let run = RunDir {
            dir,
            hash: cfg.hash(),
            seed,
        };
        let text = format!("{}{}", run.comment_header(), cfg.to_toml());
        run.write("effective_config.toml", text.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `# config_hash=… seed=…` line for CSV and TOML outputs.
    pub fn comment_header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.seed)
    }

    /// First line of every JSONL output.
    pub fn jsonl_header(&self, kind: &str) -> String {
        let mut s = json!({ "config_hash": self.hash, "seed": self.seed, "kind": kind }).to_string();
        s.push('\n');
        s
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        Ok(p)
    }
}

pub fn read_text(field: &str, path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("`{field}`: cannot read {}: {e}", path.display())))
}

pub fn load_vocab(path: &Path, mode: TokenizerMode) -> Result<Vocabulary, CliError> {
    let text = read_text("vocab", path)?;
    Vocabulary::from_file_string(mode, &text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// One prompt per line; a blank line is an empty prompt.
pub fn read_prompts(path: Option<&Path>) -> Result<Vec<String>, CliError> {
    match path {
        Some(p) => Ok(read_text("prompts", p)?.lines().map(str::to_string).collect()),
        None => Ok(vec![String::new()]),
    }
}

/// Lines of a CSV or JSONL file, skipping `#` comments and header objects.
pub fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_writes_header_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(None, &["seed=4".into(), format!("output_dir={:?}", dir.path().join("o"))]).unwrap();
        let run = RunDir::prepare(&cfg).unwrap();
        let text = fs::read_to_string(run.path("effective_config.toml")).unwrap();
        assert!(text.starts_with(&format!("# config_hash={} seed=4\n", cfg.hash())));
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.output_dir, None);
        assert_eq!(back.hash(), cfg.hash());
        assert!(run.jsonl_header("x").contains("\"seed\":4"));
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let cfg = RunConfig::load(None, &["output_dir=\"/tmp/x\"".into()]).unwrap();
        let e = RunDir::prepare(&cfg).err().unwrap();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("seed"));
    }
}
