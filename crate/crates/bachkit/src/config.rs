//! Service configuration, read from TOML.
//!
//! ```toml
//! bank = "bank/manifest.json"
//! taxonomy = "bank/taxonomy.json"
//! m = 3
//! workers = 4
//! listen = "127.0.0.1:8077"
//! params = "params"
//!
//! [palette]
//! void = [0, 0, 0]
//! accent = [255, 0, 255]
//! alpha = 0.5
//! outlines = true
//! colors = { "7" = [128, 64, 128], "26" = [0, 0, 142] }
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preview::PaletteSpec;

pub const DEFAULT_M: usize = 3;
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8077";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("m must be at least 1")]
    ZeroM,
    #[error("worker count must be at least 1")]
    ZeroWorkers,
    #[error("{field} path {path} does not exist")]
    Missing { field: &'static str, path: PathBuf },
    #[error("no memory bank configured (set `bank` or pass --bank)")]
    NoBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Bank manifest.
    #[serde(default)]
    pub bank: Option<PathBuf>,
    /// Taxonomy file; must agree with the bank's when both are given.
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Parameter fixture directory.
    #[serde(default)]
    pub params: Option<PathBuf>,
    #[serde(default)]
    pub palette: Option<PaletteSpec>,
}

fn default_m() -> usize {
    DEFAULT_M
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn default_listen() -> SocketAddr {
    DEFAULT_LISTEN.parse().expect("valid default address")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bank: None,
            taxonomy: None,
            m: DEFAULT_M,
            workers: default_workers(),
            listen: default_listen(),
            params: None,
            palette: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            message: e.to_string(),
        })?;
        for p in [&mut c.bank, &mut c.taxonomy, &mut c.params].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    /// Reads and validates `path`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let c = Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m == 0 {
            return Err(ConfigError::ZeroM);
        }
        if self.workers == 0 {
            return Err(ConfigError::ZeroWorkers);
        }
        let paths = [("bank", &self.bank), ("taxonomy", &self.taxonomy), ("params", &self.params)];
        for (field, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::Missing { field, path: p.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn bank_path(&self) -> Result<&Path, ConfigError> {
        self.bank.as_deref().ok_or(ConfigError::NoBank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let c = ServiceConfig::from_toml("bank = \"b/manifest.json\"\nm = 5", Path::new("/srv/cfg")).unwrap();
        assert_eq!(c.bank.as_deref(), Some(Path::new("/srv/cfg/b/manifest.json")));
        assert_eq!(c.m, 5);
        assert_eq!(c.listen, DEFAULT_LISTEN.parse().unwrap());
        assert!(c.workers >= 1);
        assert!(c.palette.is_none());
    }

    #[test]
    fn rejects_bad_values() {
        let base = Path::new(".");
        let c = ServiceConfig::from_toml("m = 0", base).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::ZeroM)));
        let c = ServiceConfig::from_toml("workers = 0", base).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::ZeroWorkers)));
        let c = ServiceConfig::from_toml("params = \"/nonexistent/params\"", base).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Missing { field: "params", .. })));
        assert!(matches!(
            ServiceConfig::from_toml("banks = 1", base),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(ServiceConfig::default().bank_path(), Err(ConfigError::NoBank)));
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("params")).unwrap();
        let path = dir.path().join("bachkit.toml");
        std::fs::write(
            &path,
            "params = \"params\"\nworkers = 2\nlisten = \"0.0.0.0:9000\"\n[palette]\nvoid = [1, 2, 3]\n",
        )
        .unwrap();
        let c = ServiceConfig::load(&path).unwrap();
        assert_eq!(c.params.as_deref(), Some(dir.path().join("params").as_path()));
        assert_eq!(c.workers, 2);
        assert_eq!(c.palette.unwrap().void, Some([1, 2, 3]));
        std::fs::write(&path, "bank = \"missing.json\"").unwrap();
        assert!(matches!(
            ServiceConfig::load(&path),
            Err(ConfigError::Missing { field: "bank", .. })
        ));
    }
}
