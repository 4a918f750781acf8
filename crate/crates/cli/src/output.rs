// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use latsteer::tensor_store::sha256_file;

pub const RUN_META_FILE: &str = "run_meta.json";

/// Problem with the user's inputs rather than with the computation.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// 2 for input errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|cause| {
        cause.is::<InputError>()
            || cause
                .downcast_ref::<latsteer::Error>()
                .is_some_and(latsteer::Error::is_input_error)
    });
    if input {
        2
    } else {
        1
    }
}

/// Output directory and the SHA-256 of every input file a command read.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub out: PathBuf,
    pub inputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn hash_file(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Hashes every regular file directly inside `dir`.
    pub fn hash_dir(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_file() && path.file_name().is_some_and(|n| n != RUN_META_FILE) {
                files.push(path);
            }
        }
        files.sort();
        for f in files {
            self.hash_file(&f)?;
        }
        Ok(())
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write(name, bytes)
    }
}

#[derive(Serialize)]
struct RunMeta<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    config: &'a C,
    inputs: &'a BTreeMap<String, String>,
    timestamp: String,
}

pub fn write_run_meta<C: Serialize>(config: &C, run: RunRecord) -> Result<()> {
    let meta = RunMeta {
        tool: env!("CARGO_BIN_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config,
        inputs: &run.inputs,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    run.write_json(RUN_META_FILE, &meta)?;
    Ok(())
}
