//! On-disk dataset directory: `manifest.json`, `train.jsonl`, `test.jsonl`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cyclenoise::numeric::digest_bytes;
use cyclenoise::synth::{read_jsonl, write_jsonl, Dataset, DatasetManifest};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN: &str = "train.jsonl";
pub const TEST: &str = "test.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataMeta {
    pub manifest: DatasetManifest,
    pub train_n_ids: usize,
    pub test_n_ids: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub noisy_sequences: usize,
    /// Digest of the manifest JSON, hex.
    pub manifest_hash: String,
}

pub struct DataDir {
    pub meta: DataMeta,
    pub train: Dataset,
    pub test: Dataset,
}

/// Refuses to reuse a directory holding `marker` unless `force` is set.
pub fn prepare_output(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        bail!("{} already holds output; pass --force to overwrite", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn manifest_hash(manifest: &DatasetManifest) -> Result<String> {
    let bytes = serde_json::to_vec(manifest)?;
    Ok(format!("{:016x}", digest_bytes(&bytes)))
}

pub fn write(dir: &Path, manifest: &DatasetManifest, train: &Dataset, test: &Dataset) -> Result<DataMeta> {
    let meta = DataMeta {
        manifest: manifest.clone(),
        train_n_ids: train.n_ids,
        test_n_ids: test.n_ids,
        train_sequences: train.len(),
        test_sequences: test.len(),
        noisy_sequences: train.noisy_count(),
        manifest_hash: manifest_hash(manifest)?,
    };
    for (name, data) in [(TRAIN, train), (TEST, test)] {
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        write_jsonl(&mut out, data).with_context(|| format!("writing {}", path.display()))?;
        out.flush()?;
    }
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(meta)
}

pub fn load(dir: &Path) -> Result<DataDir> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let meta: DataMeta = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let read = |name: &str, n_ids: usize| -> Result<Dataset> {
        let path = dir.join(name);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        read_jsonl(BufReader::new(file), Some(n_ids)).with_context(|| format!("reading {}", path.display()))
    };
    let train = read(TRAIN, meta.train_n_ids)?;
    let test = read(TEST, meta.test_n_ids)?;
    Ok(DataDir { meta, train, test })
}
