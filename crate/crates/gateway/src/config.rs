use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pdp_core::consent::{PurposePolicy, PurposeRegistry, RetentionAction};
use pdp_core::hygiene::DenylistPattern;
use pdp_core::plane::{PlaneConfig, DEFAULT_MAX_CONSENT_AGE_DAYS, EEA_REGIONS};
use pdp_core::request::DEFAULT_SLA_DAYS;
use pdp_core::vault::RegionPolicy;
use pdp_core::{Actor, Pseudonym, RegionCode, Role};
use serde::{Deserialize, Serialize};

use crate::GatewayError;

/// Env var that takes precedence over `--config`.
pub const CONFIG_ENV: &str = "PDP_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposeEntry {
    pub id: String,
    #[serde(default)]
    pub retention: RetentionAction,
    /// Standardized icon reference; display metadata only.
    #[serde(default)]
    pub icon: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub role: Role,
    /// Label recorded as `decided_by`; must be a plain token.
    pub id: String,
    /// Required for `user` tokens: the subject the caller acts as.
    #[serde(default)]
    pub pseudonym: Option<Pseudonym>,
}

/// Operator configuration. Every field has a default, so an empty file is valid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sla_days: i64,
    pub max_consent_age_days: i64,
    pub allowed_regions: Vec<String>,
    pub default_region: String,
    pub auto_approve_access: bool,
    pub denylist_patterns: Vec<DenylistPattern>,
    pub storage_dir: PathBuf,
    pub listen_address: String,
    pub purposes: Vec<PurposeEntry>,
    pub disclosure_actions: Vec<String>,
    pub key_field: String,
    pub min_identifier_len: usize,
    /// Static admin console assets served under /console.
    pub console_dir: Option<PathBuf>,
    pub tokens: BTreeMap<String, TokenEntry>,
}

impl Default for Config {
    fn default() -> Self {
        let plane = PlaneConfig::default();
        Self {
            sla_days: DEFAULT_SLA_DAYS,
            max_consent_age_days: DEFAULT_MAX_CONSENT_AGE_DAYS,
            allowed_regions: EEA_REGIONS.iter().map(|r| r.to_string()).collect(),
            default_region: "FI".into(),
            auto_approve_access: false,
            denylist_patterns: DenylistPattern::defaults(),
            storage_dir: PathBuf::from("pdp-data"),
            listen_address: "127.0.0.1:8080".into(),
            purposes: ["billing", "newsletter", "analytics", "ads"]
                .into_iter()
                .map(|id| PurposeEntry {
                    id: id.into(),
                    retention: RetentionAction::default(),
                    icon: None,
                })
                .collect(),
            disclosure_actions: plane.disclosure_actions,
            key_field: plane.key_field,
            min_identifier_len: plane.min_identifier_len,
            console_dir: None,
            tokens: BTreeMap::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        let config: Config =
            toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// `PDP_CONFIG` wins over the flag; with neither, defaults apply.
    pub fn resolve(flag: Option<&Path>) -> Result<Self, GatewayError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(Path::new(&p)),
            None => match flag {
                Some(p) => Self::load(p),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.sla_days <= 0 {
            return bad("sla_days must be positive".into());
        }
        if self.max_consent_age_days <= 0 {
            return bad("max_consent_age_days must be positive".into());
        }
        for (token, entry) in &self.tokens {
            if token.is_empty() {
                return bad("empty bearer token".into());
            }
            if entry.role == Role::User && entry.pseudonym.is_none() {
                return bad(format!("user token `{}` has no pseudonym", entry.id));
            }
        }
        self.plane_config().map(|_| ())
    }

    pub fn plane_config(&self) -> Result<PlaneConfig, GatewayError> {
        let region =
            |r: &str| RegionCode::parse(r).map_err(|e| GatewayError::Config(e.to_string()));
        let allowed = self
            .allowed_regions
            .iter()
            .map(|r| region(r))
            .collect::<Result<Vec<_>, _>>()?;
        let regions = RegionPolicy::new(allowed, region(&self.default_region)?)
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let mut purposes = PurposeRegistry::new(self.purposes.iter().map(|p| p.id.as_str()));
        for p in &self.purposes {
            purposes = purposes.with_policy(
                p.id.as_str(),
                PurposePolicy {
                    retention: p.retention,
                    icon: p.icon.clone(),
                },
            );
        }
        Ok(PlaneConfig {
            sla_days: self.sla_days,
            max_consent_age_days: self.max_consent_age_days,
            regions,
            purposes,
            auto_approve_access: self.auto_approve_access,
            denylist: self.denylist_patterns.clone(),
            disclosure_actions: self.disclosure_actions.clone(),
            key_field: self.key_field.clone(),
            min_identifier_len: self.min_identifier_len,
        })
    }

    pub fn actor(&self, token: &str) -> Option<Actor> {
        self.tokens.get(token).map(|e| Actor {
            role: e.role,
            id: e.id.clone(),
            pseudonym: e.pseudonym.clone(),
        })
    }
}
