//! Flat key=value run configuration with section prefixes.
//!
//! Example file:
//!
//! ```text
//! model.task=classification
//! model.d_tab=10
//! federation.rounds=20
//! federation.lr=0.0005
//! transport.endpoint=127.0.0.1:7878
//! data.manifest=out/client_0.manifest
//! output.dir=runs/fed
//! ```
//!
//! Command-line `--set key=value` pairs override file values. Unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedaq_core::federation::FederationConfig;
use fedaq_core::model::{ModelConfig, Task, AQI_CLASSES};
use fedaq_core::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model_d_tab: Option<usize>,
    pub model_d_img: usize,
    pub task: Task,
    pub dropout_p: f32,
    pub use_skip: bool,
    pub use_film_fusion: bool,
    pub federation: FederationConfig,
    pub endpoint: String,
    pub root_cert: Option<PathBuf>,
    pub cert: Option<PathBuf>,
    pub key: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_d_tab: None,
            model_d_img: 1280,
            task: Task::Classification {
                num_classes: AQI_CLASSES,
            },
            dropout_p: 0.2,
            use_skip: true,
            use_film_fusion: true,
            federation: FederationConfig::default(),
            endpoint: "127.0.0.1:7878".into(),
            root_cert: None,
            cert: None,
            key: None,
            manifest: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("bad boolean for {key}: '{other}'"))),
    }
}

impl RunConfig {
    /// Load from an optional file, then apply `--set` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{} is not key=value",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                if pairs.insert(k.trim().to_string(), v.trim().to_string()).is_none() {
                    order.push(k.trim().to_string());
                }
            }
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{item}' is not key=value")))?;
            if pairs.insert(k.trim().to_string(), v.trim().to_string()).is_none() {
                order.push(k.trim().to_string());
            }
        }

        let mut cfg = RunConfig::default();
        for key in order {
            let value = &pairs[&key];
            match key.as_str() {
                "model.d_tab" => cfg.model_d_tab = Some(parse(&key, value)?),
                "model.d_img" => cfg.model_d_img = parse(&key, value)?,
                "model.task" => {
                    cfg.task = match value.as_str() {
                        "classification" => Task::Classification {
                            num_classes: AQI_CLASSES,
                        },
                        "regression" => Task::Regression,
                        other => {
                            return Err(Error::Config(format!(
                                "model.task must be classification or regression, got '{other}'"
                            )));
                        }
                    }
                }
                "model.dropout_p" => cfg.dropout_p = parse(&key, value)?,
                "model.use_skip" => cfg.use_skip = parse_bool(&key, value)?,
                "model.use_film_fusion" => cfg.use_film_fusion = parse_bool(&key, value)?,
                "federation.rounds" => cfg.federation.rounds = parse(&key, value)?,
                "federation.local_epochs" => cfg.federation.local_epochs = parse(&key, value)?,
                "federation.lr" => cfg.federation.lr = parse(&key, value)?,
                "federation.batch_size" => cfg.federation.batch_size = parse(&key, value)?,
                "federation.expected_clients" => {
                    cfg.federation.expected_clients = parse(&key, value)?
                }
                "federation.timeout_s" => cfg.federation.timeout_s = parse(&key, value)?,
                "federation.seed" => cfg.federation.seed = parse(&key, value)?,
                "federation.val_fraction" => cfg.federation.val_fraction = parse(&key, value)?,
                "transport.endpoint" => cfg.endpoint = value.clone(),
                "transport.root_cert" => cfg.root_cert = Some(PathBuf::from(value)),
                "transport.cert" => cfg.cert = Some(PathBuf::from(value)),
                "transport.key" => cfg.key = Some(PathBuf::from(value)),
                "data.manifest" => cfg.manifest = Some(PathBuf::from(value)),
                "output.dir" => cfg.output_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Config(format!("unknown config key '{other}'")));
                }
            }
        }
        cfg.federation.validate()?;
        Ok(cfg)
    }

    /// Model config for a given tabular width (from config or manifest).
    pub fn model_config(&self, d_tab: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_img_in: self.model_d_img,
            d_tab_in: d_tab,
            task: self.task,
            dropout_p: self.dropout_p,
            use_skip: self.use_skip,
            use_film_fusion: self.use_film_fusion,
            ..match self.task {
                Task::Regression => ModelConfig::regression(d_tab),
                Task::Classification { .. } => ModelConfig::classification(d_tab),
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trust(&self) -> Result<fedaq_core::transport::TrustConfig> {
        let missing = |what: &str| {
            Error::Config(format!(
                "transport.{what} is required (set it in the config file or via --set)"
            ))
        };
        Ok(fedaq_core::transport::TrustConfig {
            root_cert: self.root_cert.clone().ok_or_else(|| missing("root_cert"))?,
            cert: self.cert.clone().ok_or_else(|| missing("cert"))?,
            key: self.key.clone().ok_or_else(|| missing("key"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_federated_protocol_settings() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.federation.rounds, 50);
        assert_eq!(cfg.federation.local_epochs, 5);
        assert!((cfg.federation.lr - 5e-4).abs() < 1e-12);
        assert_eq!(cfg.federation.batch_size, 32);
        assert_eq!(cfg.dropout_p, 0.2);
        assert!(cfg.use_skip && cfg.use_film_fusion);
    }

    #[test]
    fn file_and_overrides_compose() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "model.task=regression\nfederation.rounds=7\n# comment\noutput.dir=runs/x\n",
        )
        .unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &["federation.rounds=9".into(), "model.use_skip=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.task, Task::Regression);
        assert_eq!(cfg.federation.rounds, 9);
        assert!(!cfg.use_skip);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::load(None, &["model.width=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("model.width"));
    }

    #[test]
    fn ablation_sweep_is_pure_config() {
        for (skip, film) in [(false, false), (false, true), (true, false), (true, true)] {
            let cfg = RunConfig::load(
                None,
                &[
                    format!("model.use_skip={skip}"),
                    format!("model.use_film_fusion={film}"),
                ],
            )
            .unwrap();
            let model = cfg.model_config(10).unwrap();
            assert_eq!(model.use_skip, skip);
            assert_eq!(model.use_film_fusion, film);
        }
    }
}
