use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const ENV_PORT: &str = "GUIDECOT_PORT";
pub const ENV_GOAL_CKPT: &str = "GUIDECOT_GOAL_CKPT";
pub const ENV_LLM_CKPT: &str = "GUIDECOT_LLM_CKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Dataset manifest; when absent the synthetic benchmark is generated.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synth_seed: u64,
    #[serde(default)]
    pub goal_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub llm_checkpoint: Option<PathBuf>,
    /// Append-only run log directory; runs are not persisted when absent.
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub default_k: usize,
    #[serde(default = "default_max_k")]
    pub max_k: usize,
    /// Largest side of probability maps in responses.
    #[serde(default = "default_map_side")]
    pub map_side: usize,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_k() -> usize {
    20
}

fn default_max_k() -> usize {
    64
}

fn default_map_side() -> usize {
    64
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: default_host(),
            port: default_port(),
            manifest: None,
            synth_seed: 0,
            goal_checkpoint: None,
            llm_checkpoint: None,
            run_dir: None,
            default_k: default_k(),
            max_k: default_max_k(),
            map_side: default_map_side(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            ServiceError::Config {
                field,
                msg: e.message().to_string(),
            }
        })
    }

    /// Applies the port and checkpoint environment overrides from `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        if let Some(p) = get(ENV_PORT) {
            self.port = p
                .parse()
                .map_err(|_| ServiceError::config("port", format!("{ENV_PORT}={p} is not a port number")))?;
        }
        if let Some(p) = get(ENV_GOAL_CKPT) {
            self.goal_checkpoint = Some(p.into());
        }
        if let Some(p) = get(ENV_LLM_CKPT) {
            self.llm_checkpoint = Some(p.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.default_k == 0 {
            return Err(ServiceError::config("default_k", "must be at least 1"));
        }
        if self.max_k < self.default_k {
            return Err(ServiceError::config("max_k", "must be at least default_k"));
        }
        if self.map_side == 0 {
            return Err(ServiceError::config("map_side", "must be at least 1"));
        }
        for (field, p) in [
            ("manifest", &self.manifest),
            ("goal_checkpoint", &self.goal_checkpoint),
            ("llm_checkpoint", &self.llm_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ServiceError::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_is_named() {
        match ServiceConfig::from_toml("prot = 3") {
            Err(ServiceError::Config { field, .. }) => assert_eq!(field, "prot"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn env_overrides() {
        let mut c = ServiceConfig::from_toml("port = 9000").unwrap();
        c.apply_env(|k| match k {
            ENV_PORT => Some("9100".into()),
            ENV_LLM_CKPT => Some("/x/llm.safetensors".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.port, 9100);
        assert_eq!(c.llm_checkpoint, Some(PathBuf::from("/x/llm.safetensors")));
        let err = c.apply_env(|k| (k == ENV_PORT).then(|| "abc".to_string())).unwrap_err();
        assert!(matches!(err, ServiceError::Config { field, .. } if field == "port"));
    }

    #[test]
    fn missing_checkpoint_fails_validation_with_field() {
        let c = ServiceConfig {
            goal_checkpoint: Some("/nonexistent/goal.safetensors".into()),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(ServiceError::Config { field, .. }) if field == "goal_checkpoint"));
    }
}
