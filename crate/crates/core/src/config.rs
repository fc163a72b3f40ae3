//! Layered configuration: defaults, then a TOML file, then `KGTUNE_*`
//! environment variables, then command-line flags. Every layer uses the same
//! flat key set, so `epsilon = 0.5` in the file, `KGTUNE_EPSILON=0.5` and
//! `--epsilon 0.5` all set the same thing.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EfficacyReading, EvalOptions};
use crate::optimizer::{LossModeKind, TuningConfig};
use crate::scoring::{ScoringBackend, SyntheticBackend};

pub const ENV_PREFIX: &str = "KGTUNE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Remote,
}

macro_rules! settings {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        /// One configuration layer; unset keys fall through to the layer below.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $($(#[$doc])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl Settings {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Keys set in `over` replace those in `self`.
            pub fn merge(self, over: Settings) -> Settings {
                Settings { $($field: over.$field.or(self.$field),)* }
            }
        }
    };
}

settings! {
    backend: BackendKind,
    /// Synthetic backend score tables (JSON).
    fixture: PathBuf,
    remote_url: String,
    remote_model: String,
    remote_timeout_ms: u64,
    remote_retries: u32,
    remote_backoff_ms: u64,
    remote_api_key: String,
    length_normalized: bool,
    k: usize,
    epsilon: f64,
    floor: f64,
    loss_mode: LossModeKind,
    protect_prior_feedback: bool,
    efficacy_reading: EfficacyReading,
    /// Seed for case-order shuffling; unset keeps dataset order.
    seed: u64,
    dataset: PathBuf,
    graph: PathBuf,
    output: PathBuf,
    bind: String,
    storage_dir: PathBuf,
    /// How long a feedback request waits for its tuning run before handing
    /// back a poll token.
    feedback_deadline_ms: u64,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Collect `KGTUNE_<KEY>` variables. Values are read as TOML scalars
    /// when they parse as one and as plain strings otherwise.
    pub fn from_vars<K: AsRef<str>, V: AsRef<str>>(vars: impl IntoIterator<Item = (K, V)>) -> Result<Self> {
        let mut table = toml::Table::new();
        for (key, value) in vars {
            let Some(name) = key.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let name = name.to_ascii_lowercase();
            if name == "config" || !Self::KEYS.contains(&name.as_str()) {
                continue;
            }
            let raw = value.as_ref();
            let parsed = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .filter(|v| !v.is_table() && !v.is_array())
                .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
            table.insert(name, parsed);
        }
        Settings::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(format!("environment: {e}")))
    }

    pub fn from_env() -> Result<Self> {
        Self::from_vars(std::env::vars())
    }

    /// Merge file, environment and flags over the defaults. The file comes
    /// from `file`, or `KGTUNE_CONFIG` when no path is given.
    pub fn layered(file: Option<&Path>, flags: Settings) -> Result<Self> {
        let env_file = std::env::var_os("KGTUNE_CONFIG").map(PathBuf::from);
        let file_layer = match file.map(Path::to_path_buf).or(env_file) {
            Some(path) => Self::from_file(&path)?,
            None => Settings::default(),
        };
        Ok(Settings::default().merge(file_layer).merge(Self::from_env()?).merge(flags))
    }

    pub fn tuning(&self) -> Result<TuningConfig> {
        let d = TuningConfig::default();
        let cfg = TuningConfig {
            k: self.k.unwrap_or(d.k),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            floor: self.floor.unwrap_or(d.floor),
            loss_mode: self.loss_mode.unwrap_or(d.loss_mode),
            protect_prior_feedback: self.protect_prior_feedback.unwrap_or(d.protect_prior_feedback),
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval_options(&self, tuning_enabled: bool) -> EvalOptions {
        EvalOptions {
            tuning_enabled,
            efficacy_reading: self.efficacy_reading.unwrap_or_default(),
            shuffle_seed: self.seed,
        }
    }

    #[cfg(feature = "remote")]
    pub fn remote(&self) -> crate::scoring::RemoteConfig {
        let d = crate::scoring::RemoteConfig::default();
        crate::scoring::RemoteConfig {
            base_url: self.remote_url.clone().unwrap_or(d.base_url),
            model: self.remote_model.clone().unwrap_or(d.model),
            timeout_ms: self.remote_timeout_ms.unwrap_or(d.timeout_ms),
            retries: self.remote_retries.unwrap_or(d.retries),
            backoff_ms: self.remote_backoff_ms.unwrap_or(d.backoff_ms),
            length_normalized: self.length_normalized.unwrap_or(d.length_normalized),
            api_key: self.remote_api_key.clone().or(d.api_key),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ScoringBackend>> {
        match self.backend.unwrap_or_default() {
            BackendKind::Synthetic => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| Error::Config("synthetic backend needs a fixture path (`fixture`)".into()))?;
                Ok(Arc::new(SyntheticBackend::from_path(path)?))
            }
            #[cfg(feature = "remote")]
            BackendKind::Remote => Ok(Arc::new(crate::scoring::RemoteBackend::new(self.remote())?)),
            #[cfg(not(feature = "remote"))]
            BackendKind::Remote => Err(Error::Config("built without remote backend support".into())),
        }
    }
}
