//! Run manifests: every resolved setting plus input and output digests.
//!
//! The file is itself a valid `--config` file: settings are `key=value`
//! lines and everything else is a `#` comment.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use arcot::features::read_manifest;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_NAME: &str = "run.manifest";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub settings: Vec<(String, String)>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
}

impl RunManifest {
    pub fn new(command: &str, settings: Vec<(String, String)>) -> Self {
        Self {
            command: command.to_string(),
            settings,
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    /// A feature or WAV manifest and every file it lists.
    pub fn input_listing(&mut self, manifest: &Path) -> Result<()> {
        self.input(manifest)?;
        for (_, p) in read_manifest(manifest)? {
            if p.exists() {
                self.input(&p)?;
            }
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.outputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# arcot {} {}", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.settings {
            let _ = writeln!(s, "{k}={v}");
        }
        for (p, d) in &self.inputs {
            let _ = writeln!(s, "# input sha256:{d} {}", p.display());
        }
        for (p, d) in &self.outputs {
            let _ = writeln!(s, "# output sha256:{d} {}", p.display());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST_NAME);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
