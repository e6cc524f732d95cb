use std::path::{Path, PathBuf};

use artireg::cloud::{load_pcd, PointCloud};
use artireg::engine::EngineParams;
use artireg::model::{load_model_description, ObjectModel};
use serde::Deserialize;

use crate::ServiceError;

/// Service configuration file. Relative paths resolve against the file's
/// directory.
///
/// ```toml
/// port = 8080
/// scene = "scene.pcd"
/// models = "models"          # directory of model description files
///
/// [engine.fit]
/// restarts = 25
/// ```
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub scene: PathBuf,
    pub models: PathBuf,
    #[serde(default)]
    pub engine: EngineParams,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::BadConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.scene = dir.join(&cfg.scene);
        cfg.models = dir.join(&cfg.models);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        cfg.engine
            .validate()
            .map_err(|e| ServiceError::BadConfig(format!("engine: {e}")))?;
        Ok(cfg)
    }

    /// Loads the scene and every model description in the model directory,
    /// sorted by file name.
    pub fn load_inputs(&self) -> Result<(PointCloud, Vec<ObjectModel>), ServiceError> {
        let scene = load_pcd(&self.scene)
            .map_err(|e| ServiceError::BadConfig(format!("scene {}: {e}", self.scene.display())))?
            .cloud;
        if scene.is_empty() {
            return Err(ServiceError::BadConfig(format!("scene {} has no points", self.scene.display())));
        }
        let bad_dir = |e: std::io::Error| {
            ServiceError::BadConfig(format!("model directory {}: {e}", self.models.display()))
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(&self.models)
            .map_err(bad_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(bad_dir)?;
        files.retain(|p| p.extension().is_some_and(|x| x == "toml"));
        files.sort();
        let models = files
            .iter()
            .map(|p| {
                load_model_description(p)
                    .map_err(|e| ServiceError::BadConfig(format!("model {}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if models.is_empty() {
            return Err(ServiceError::BadConfig(format!(
                "model directory {} holds no model descriptions",
                self.models.display()
            )));
        }
        Ok((scene, models))
    }
}
