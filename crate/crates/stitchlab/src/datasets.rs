//! Dataset ingestion: CIFAR binaries from a local cache (downloaded and
//! checksum-verified on first use) or procedurally generated images.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};
use stitchlab_core::data::{Dataset, SyntheticSpec};
use stitchlab_core::Tensor;

use crate::config::{hex, DataConfig, DataSource};
use crate::error::{CliError, CliResult};

/// Environment variable naming the dataset cache directory.
pub const CACHE_ENV: &str = "STITCHLAB_CACHE";

const DEFAULT_SYNTHETIC_TRAIN: usize = 5000;
const DEFAULT_SYNTHETIC_TEST: usize = 1000;
const CIFAR_RES: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_RES * CIFAR_RES;

struct Archive {
    file: &'static str,
    url: &'static str,
    md5: &'static str,
}

const CIFAR10: Archive = Archive {
    file: "cifar-10-binary.tar.gz",
    url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    md5: "c32a1d4ab5d03f1284b67883e8d87530",
};

const CIFAR100: Archive = Archive {
    file: "cifar-100-binary.tar.gz",
    url: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
    md5: "03b5dce01913d631647c71ecb7b0ecb8",
};

/// Fine classes used for the CIFAR-100 split when none are configured:
/// one class from each of ten different superclasses.
pub const DEFAULT_CIFAR100_CLASSES: [usize; 10] = [4, 1, 54, 9, 0, 22, 3, 6, 5, 12];

pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("stitchlab")
}

/// Role of a dataset within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    /// A second task over the same input space.
    CrossTask,
}

/// Loads `(train, test)` for `cfg`, applying size limits and resolution.
pub fn load(cfg: &DataConfig, role: Role) -> CliResult<(Dataset, Dataset)> {
    let (train, test) = match cfg.source {
        DataSource::Synthetic => {
            let mut spec = SyntheticSpec::new(
                10,
                cfg.resolution,
                cfg.train_size.unwrap_or(DEFAULT_SYNTHETIC_TRAIN),
                cfg.test_size.unwrap_or(DEFAULT_SYNTHETIC_TEST),
                cfg.seed,
            );
            spec.amplitude = cfg.synthetic.amplitude;
            spec.noise = cfg.synthetic.noise;
            if role == Role::CrossTask {
                spec.task = 1;
            }
            return Ok(spec.generate()?);
        }
        DataSource::Cifar10 => {
            let bytes = fetch(&CIFAR10)?;
            let mut train_parts = Vec::new();
            let mut test = None;
            for (name, data) in tar_members(&bytes, |n| n.ends_with(".bin"))? {
                let file = name.rsplit('/').next().unwrap_or(&name).to_string();
                if file.starts_with("data_batch_") {
                    train_parts.push((file, data));
                } else if file == "test_batch.bin" {
                    test = Some(data);
                }
            }
            train_parts.sort_by(|a, b| a.0.cmp(&b.0));
            if train_parts.len() != 5 {
                return Err(CliError::Dataset(format!("expected 5 CIFAR-10 training batches, found {}", train_parts.len())));
            }
            let train_raw: Vec<u8> = train_parts.into_iter().flat_map(|(_, d)| d).collect();
            let test_raw = test.ok_or_else(|| CliError::Dataset("CIFAR-10 test batch missing".into()))?;
            (
                parse_records("cifar10", &train_raw, 0, 1, None)?,
                parse_records("cifar10", &test_raw, 0, 1, None)?,
            )
        }
        DataSource::Cifar100Split => {
            let classes = cfg.cifar100_classes.clone().unwrap_or_else(|| DEFAULT_CIFAR100_CLASSES.to_vec());
            if classes.is_empty() || classes.iter().any(|&c| c >= 100) {
                return Err(CliError::Schema {
                    path: "data.cifar100_classes".into(),
                    message: "fine labels must lie in 0..100".into(),
                });
            }
            let bytes = fetch(&CIFAR100)?;
            let mut train = None;
            let mut test = None;
            for (name, data) in tar_members(&bytes, |n| n.ends_with(".bin"))? {
                if name.ends_with("train.bin") {
                    train = Some(data);
                } else if name.ends_with("test.bin") {
                    test = Some(data);
                }
            }
            let missing = || CliError::Dataset("CIFAR-100 archive is incomplete".into());
            (
                parse_records("cifar100-split", &train.ok_or_else(missing)?, 1, 2, Some(&classes))?,
                parse_records("cifar100-split", &test.ok_or_else(missing)?, 1, 2, Some(&classes))?,
            )
        }
    };
    let limit = |d: Dataset, n: Option<usize>| n.map_or(d.clone(), |n| d.take(n));
    let (mut train, mut test) = (limit(train, cfg.train_size), limit(test, cfg.test_size));
    if cfg.resolution != CIFAR_RES {
        train = train.resized(cfg.resolution);
        test = test.resized(cfg.resolution);
    }
    Ok((train, test))
}

/// Parses fixed-size CIFAR records. `label_at` is the byte offset of the
/// label inside each `header`-byte prefix; with `keep`, only those labels
/// survive and are renumbered by their position in `keep`.
fn parse_records(name: &str, raw: &[u8], label_at: usize, header: usize, keep: Option<&[usize]>) -> CliResult<Dataset> {
    let rec = header + CIFAR_PIXELS;
    if !raw.len().is_multiple_of(rec) {
        return Err(CliError::Dataset(format!("{name}: truncated record file")));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for r in raw.chunks_exact(rec) {
        let label = r[label_at] as usize;
        let label = match keep {
            Some(k) => match k.iter().position(|&c| c == label) {
                Some(p) => p,
                None => continue,
            },
            None => label,
        };
        labels.push(label);
        pixels.extend(r[header..].iter().map(|&b| b as f32 / 255.0));
    }
    let n = labels.len();
    let classes = keep.map_or(10, <[usize]>::len);
    let images = Tensor::from_vec([n, 3, CIFAR_RES, CIFAR_RES], pixels)?;
    Ok(Dataset::new(name, images, labels, classes)?)
}

fn md5_hex(bytes: &[u8]) -> String {
    hex(&Md5::digest(bytes))
}

/// Returns the verified archive bytes, downloading into the cache if needed.
fn fetch(archive: &Archive) -> CliResult<Vec<u8>> {
    let dir = cache_dir();
    let path = dir.join(archive.file);
    if path.exists() {
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if md5_hex(&bytes) == archive.md5 {
            return Ok(bytes);
        }
        log::warn!("{} fails its checksum; downloading again", path.display());
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    log::info!("downloading {}", archive.url);
    let bytes = download(archive.url)?;
    if md5_hex(&bytes) != archive.md5 {
        return Err(CliError::Dataset(format!("{} failed checksum verification", archive.url)));
    }
    write_atomic(&path, &bytes)?;
    Ok(bytes)
}

fn download(url: &str) -> CliResult<Vec<u8>> {
    let resp = ureq::get(url)
        .call()
        .map_err(|e| CliError::Dataset(format!("download of {url} failed: {e}; run with --synthetic when offline")))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::Dataset(format!("download of {url} failed: {e}")))?;
    Ok(bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Reads the members of a gzipped tarball whose names pass `want`.
fn tar_members(bytes: &[u8], want: impl Fn(&str) -> bool) -> CliResult<Vec<(String, Vec<u8>)>> {
    let bad = |e: std::io::Error| CliError::Dataset(format!("corrupt archive: {e}"));
    let mut ar = tar::Archive::new(flate2::read::GzDecoder::new(bytes));
    let mut out = Vec::new();
    for entry in ar.entries().map_err(bad)? {
        let mut entry = entry.map_err(bad)?;
        let name = entry.path().map_err(bad)?.to_string_lossy().into_owned();
        if want(&name) {
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(bad)?;
            out.push((name, data));
        }
    }
    Ok(out)
}
