//! One timestamped directory per invocation, holding the frozen effective
//! config and seed. Files are made read-only once the run completes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::Result;

pub const RUNS_DIR_ENV: &str = "MLVGM_RUNS_DIR";

/// `$MLVGM_RUNS_DIR`, or `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Create `<root>/<timestamp>-<command>`, adding a suffix on collision.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root)?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
        let base = format!("{stamp}-{command}");
        let mut k = 0;
        loop {
            let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    /// Write `config.toml` (the full effective config) and `seed`.
    pub fn freeze(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.join("config.toml"), cfg.to_toml()?)?;
        fs::write(self.join("seed"), format!("{}\n", cfg.seed))?;
        Ok(())
    }

    /// Mark every file under the run read-only.
    pub fn seal(&self) -> Result<()> {
        seal_tree(&self.path)
    }
}

fn seal_tree(dir: &Path) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            seal_tree(&p)?;
        } else {
            let mut perm = fs::metadata(&p)?.permissions();
            perm.set_readonly(true);
            fs::set_permissions(&p, perm)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_config_replays_and_files_are_sealed() -> Result<()> {
        let root = tempfile::tempdir()?;
        let a = RunDir::create(root.path(), "probe")?;
        let b = RunDir::create(root.path(), "probe")?;
        assert_ne!(a.path, b.path);
        let cfg = RunConfig::load("", &["seed=17".into(), "mc.samples=500".into()])?;
        a.freeze(&cfg)?;
        a.seal()?;
        let text = fs::read_to_string(a.join("config.toml"))?;
        assert_eq!(RunConfig::load(&text, &[])?, cfg);
        assert_eq!(fs::read_to_string(a.join("seed"))?.trim(), "17");
        assert!(fs::metadata(a.join("config.toml"))?.permissions().readonly());
        Ok(())
    }
}
