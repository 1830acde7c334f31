use std::ffi::OsString;
use std::path::{Path, PathBuf};

use mahaguard::embedding::write_atomic;
use mahaguard::{read_csv, read_emb, EmbeddingSet, Error, Result};

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads `.csv` files as text and everything else as EMB1.
pub fn load_embeddings(path: &Path, labels_included: bool) -> Result<EmbeddingSet> {
    if is_csv(path) {
        read_csv(path, labels_included)
    } else {
        read_emb(path)
    }
}

/// `dir/x.emb` → `dir/x.logits.emb`.
pub fn logits_companion(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default();
    let mut name = OsString::from(stem);
    name.push(".logits");
    if let Some(ext) = path.extension() {
        name.push(".");
        name.push(ext);
    }
    path.with_file_name(name)
}

/// Logits that go with `path`; never labeled-CSV.
pub fn load_logits(path: &Path) -> Result<EmbeddingSet> {
    let companion = logits_companion(path);
    if !companion.exists() {
        return Err(Error::InvalidParams(format!(
            "logit scorers need {}",
            companion.display()
        )));
    }
    load_embeddings(&companion, false)
}

pub fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Short label for an input path, used in report entry names.
pub fn set_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
