//! Run manifests: a TOML file written into the output directory before any
//! long computation starts, holding everything needed to reproduce the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest serialization: {0}")]
    Ser(#[from] toml::ser::Error),
    #[error("manifest parse: {0}")]
    De(#[from] toml::de::Error),
}

/// What a command resolved to after merging config file and flags. The typed
/// `params` table (one per command) is enough to re-execute the run exactly;
/// `argv` and the timestamp are informational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name (`train`, `experiment`, ...).
    pub command: String,
    /// Original process arguments, verbatim.
    pub argv: Vec<String>,
    /// Primary RNG seed of the run.
    pub seed: u64,
    /// Unix timestamp (seconds) when the manifest was written.
    pub created_unix: u64,
    /// Directory the run writes into.
    pub output_dir: String,
    /// Paths (relative to `output_dir`) the run intends to produce.
    pub outputs: Vec<String>,
    /// Fully resolved command parameters.
    pub params: toml::Value,
}

impl RunManifest {
    /// Build a manifest from any serializable parameter struct.
    pub fn new<P: Serialize>(
        command: &str,
        argv: Vec<String>,
        seed: u64,
        output_dir: &Path,
        outputs: Vec<String>,
        params: &P,
    ) -> Result<Self, ManifestError> {
        Ok(Self {
            command: command.to_string(),
            argv,
            seed,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            output_dir: output_dir.display().to_string(),
            outputs,
            params: toml::Value::try_from(params)?,
        })
    }

    /// Deserialize the params table back into a command's options struct.
    pub fn params_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, ManifestError> {
        Ok(self.params.clone().try_into()?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct DemoParams {
        task: String,
        steps: u64,
        lr: f64,
        base: Option<String>,
    }

    #[test]
    fn roundtrips_through_toml() {
        let params = DemoParams {
            task: "subst".into(),
            steps: 2000,
            lr: 3e-4,
            base: Some("ckpt/base.ckpt".into()),
        };
        let manifest = RunManifest::new(
            "experiment",
            vec!["encbridge".into(), "experiment".into(), "--id".into(), "1".into()],
            42,
            Path::new("run/demo"),
            vec!["loss.csv".into(), "ckpt/model.ckpt".into()],
            &params,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest");
        manifest.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.command, "experiment");
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.outputs, manifest.outputs);
        assert_eq!(loaded.params_as::<DemoParams>().unwrap(), params);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            RunManifest::load(Path::new("/nope/manifest")),
            Err(ManifestError::Io { .. })
        ));
    }

    #[test]
    fn unparseable_manifest_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest");
        std::fs::write(&path, "not [valid toml").unwrap();
        assert!(matches!(
            RunManifest::load(&path),
            Err(ManifestError::De(_))
        ));
    }
}
