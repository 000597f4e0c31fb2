//! Run configuration file (TOML).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use lfd_core::corpus::DEFAULT_FRACTIONS;
use lfd_core::gateway::{Role, RoleConfig};
use lfd_core::selection::{Roles, RunConfig};
use lfd_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleEntry {
    pub provider_id: String,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_retries: Option<u32>,
}

impl RoleEntry {
    fn to_config(&self, role: Role) -> RoleConfig {
        let mut cfg = RoleConfig::new(role, &self.provider_id, &self.model_id);
        cfg.temperature = self.temperature;
        if let Some(r) = self.max_retries {
            cfg.max_retries = r;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesSection {
    pub proposer: Option<RoleEntry>,
    pub labeler: Option<RoleEntry>,
    pub examiner: Option<RoleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderEntry {
    pub base_url: String,
    /// Requests per second; unlimited when absent.
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub burst: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub label_question: Option<String>,
    /// Balanced subsample size; the full dataset when absent.
    #[serde(default)]
    pub balance_n: Option<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    DEFAULT_FRACTIONS
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            name: None,
            label_question: None,
            balance_n: None,
            split: DEFAULT_FRACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub run: RunConfig,
    pub roles: Option<RolesSection>,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderEntry>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

/// A loaded config with relative paths resolved against the file's directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: FileConfig,
    pub raw: String,
    pub cache_root: PathBuf,
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FileConfig =
        toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cache_root = if file.cache_dir.is_absolute() {
        file.cache_dir.clone()
    } else {
        base.join(&file.cache_dir)
    };
    if let Some(roles) = &file.roles {
        for entry in [&roles.proposer, &roles.labeler, &roles.examiner].into_iter().flatten() {
            if entry.provider_id.is_empty() {
                return Err(Error::Config("role entries need a provider_id".into()));
            }
        }
    }
    Ok(LoadedConfig {
        file,
        raw,
        cache_root,
    })
}

impl LoadedConfig {
    fn role(&self, role: Role) -> Result<RoleConfig> {
        let roles = self
            .file
            .roles
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [roles] section".into()))?;
        let entry = match role {
            Role::Proposer => &roles.proposer,
            Role::Labeler => &roles.labeler,
            Role::Examiner => &roles.examiner,
        };
        entry
            .as_ref()
            .map(|e| e.to_config(role))
            .ok_or_else(|| Error::Config(format!("config has no [roles.{role}] entry")))
    }

    pub fn labeler(&self) -> Result<RoleConfig> {
        self.role(Role::Labeler)
    }

    pub fn examiner(&self) -> Result<RoleConfig> {
        self.role(Role::Examiner)
    }

    pub fn roles(&self) -> Result<Roles> {
        let roles = Roles {
            proposer: self.role(Role::Proposer)?,
            labeler: self.role(Role::Labeler)?,
            examiner: self.role(Role::Examiner)?,
        };
        roles.validate()?;
        Ok(roles)
    }

    /// Provider id to base URL, restricted to the providers in use.
    pub fn provider_urls(&self, used: &[&str]) -> Result<HashMap<String, String>> {
        let mut out = HashMap::new();
        for id in used {
            let entry = self
                .file
                .providers
                .get(*id)
                .ok_or_else(|| Error::Config(format!("no [providers.{id}] entry with a base_url")))?;
            out.insert(id.to_string(), entry.base_url.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.run, RunConfig::default());
        assert_eq!(cfg.dataset.split, DEFAULT_FRACTIONS);
        assert_eq!(cfg.cache_dir, PathBuf::from("cache"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[run]\nkappa = 0.7\n").is_err());
    }

    #[test]
    fn roles_parse() {
        let text = r#"
[run]
seed = 3
tau = 0.6

[roles.proposer]
provider_id = "a"
model_id = "p"
[roles.labeler]
provider_id = "b"
model_id = "l"
[roles.examiner]
provider_id = "c"
model_id = "e"

[providers.a]
base_url = "https://a.example/v1"
"#;
        let file: FileConfig = toml::from_str(text).unwrap();
        let loaded = LoadedConfig {
            file,
            raw: text.into(),
            cache_root: PathBuf::from("cache"),
        };
        let roles = loaded.roles().unwrap();
        assert_eq!(roles.examiner.provider_id, "c");
        assert_eq!(loaded.file.run.seed, 3);
        assert!(loaded.provider_urls(&["a"]).is_ok());
        assert!(loaded.provider_urls(&["b"]).is_err());
    }
}
