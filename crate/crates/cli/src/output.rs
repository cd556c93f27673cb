use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use fracks_core::solver::{DiagnosticsRow, DIAGNOSTICS_HEADER};
use fracks_core::DensityField;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    input_sha256: &'a str,
    config: &'a ExperimentConfig,
    results: &'a T,
}

/// SHA-256 over the resolved config and the bytes of every input file.
pub fn input_hash(cfg: &ExperimentConfig, inputs: &[&Path]) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    for path in inputs {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn file(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut out = self.file(name)?;
        serde_json::to_writer_pretty(&mut out, value)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn report<T: Serialize>(
        &self,
        command: &str,
        cfg: &ExperimentConfig,
        hash: &str,
        results: &T,
    ) -> anyhow::Result<()> {
        self.json(
            "report.json",
            &Report {
                command,
                version: env!("CARGO_PKG_VERSION"),
                input_sha256: hash,
                config: cfg,
                results,
            },
        )
    }

    pub fn diagnostics(&self, tag: &str, rows: &[DiagnosticsRow]) -> anyhow::Result<()> {
        let mut out = self.file(&format!("diagnostics_{tag}.csv"))?;
        writeln!(out, "{DIAGNOSTICS_HEADER}")?;
        for row in rows {
            writeln!(out, "{}", row.csv_line())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn profile(&self, tag: &str, u: &DensityField) -> anyhow::Result<()> {
        let mut out = self.file(&format!("profile_{tag}.csv"))?;
        u.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }
}
