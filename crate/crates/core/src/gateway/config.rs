use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::BackendConfig;
use crate::error::{Error, Result};
use crate::routing::next_up;

pub const ENV_LISTEN_ADDRESS: &str = "CONFROUTE_LISTEN_ADDRESS";
pub const ENV_THRESHOLD: &str = "CONFROUTE_THRESHOLD";

/// Routing threshold: a value in `[0, 1]`, or `above-max`, which exceeds
/// every possible confidence and so routes every query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    AboveMax,
}

impl Threshold {
    pub const ABOVE_MAX_LABEL: &'static str = "above-max";

    /// The number compared against `c`.
    pub fn value(self) -> f64 {
        match self {
            Threshold::Value(t) => t,
            Threshold::AboveMax => next_up(1.0),
        }
    }

    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Threshold::Value(t))
        } else {
            Err(Error::Config(format!(
                "threshold {t} must lie in [0, 1] (use \"{}\" to route everything)",
                Self::ABOVE_MAX_LABEL
            )))
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == Self::ABOVE_MAX_LABEL {
            return Ok(Threshold::AboveMax);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("bad threshold {s:?}")))?;
        Threshold::new(t)
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(t) => s.serialize_f64(*t),
            Threshold::AboveMax => s.serialize_str(Self::ABOVE_MAX_LABEL),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(t) => Threshold::new(t),
            Raw::Str(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradedMode {
    FallbackToLocal,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub threshold: Threshold,
    pub local: BackendConfig,
    pub remote: BackendConfig,
    pub listen_address: String,
    pub degraded_mode: DegradedMode,
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        self.remote.validate()?;
        let norm = |u: &str| u.trim_end_matches('/').to_ascii_lowercase();
        if norm(&self.local.base_url) == norm(&self.remote.base_url) {
            return Err(Error::Config(
                "local and remote backends share a URL".into(),
            ));
        }
        if self.listen_address.parse::<std::net::SocketAddr>().is_err() {
            return Err(Error::Config(format!(
                "listen_address {:?} is not host:port",
                self.listen_address
            )));
        }
        Ok(())
    }

    /// Read a JSON config file, apply environment overrides, and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: GatewayConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_overrides(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(addr) = var(ENV_LISTEN_ADDRESS) {
            self.listen_address = addr;
        }
        if let Some(t) = var(ENV_THRESHOLD) {
            self.threshold = t.parse()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(name: &str, port: u16) -> BackendConfig {
        BackendConfig {
            name: name.into(),
            base_url: format!("http://127.0.0.1:{port}"),
            timeout_ms: 1000,
            max_retries: 0,
        }
    }

    fn config() -> GatewayConfig {
        GatewayConfig {
            threshold: Threshold::Value(0.5),
            local: backend("local", 9001),
            remote: backend("remote", 9002),
            listen_address: "127.0.0.1:0".into(),
            degraded_mode: DegradedMode::FallbackToLocal,
        }
    }

    #[test]
    fn threshold_forms() {
        assert_eq!("0.25".parse::<Threshold>().unwrap(), Threshold::Value(0.25));
        assert_eq!(
            "above-max".parse::<Threshold>().unwrap(),
            Threshold::AboveMax
        );
        assert!("1.5".parse::<Threshold>().is_err());
        assert!(Threshold::AboveMax.value() > 1.0);
        let t: Threshold = serde_json::from_str("\"above-max\"").unwrap();
        assert_eq!(t, Threshold::AboveMax);
        assert_eq!(
            serde_json::to_string(&Threshold::Value(0.0)).unwrap(),
            "0.0"
        );
        assert!(serde_json::from_str::<Threshold>("-0.1").is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = serde_json::to_string(&config()).unwrap();
        assert!(text.contains("\"fallback-to-local\""));
        assert_eq!(
            serde_json::from_str::<GatewayConfig>(&text).unwrap(),
            config()
        );
    }

    #[test]
    fn validation() {
        config().validate().unwrap();
        let mut same = config();
        same.remote.base_url = "http://127.0.0.1:9001/".into();
        assert!(same.validate().is_err());
        let mut bad = config();
        bad.listen_address = "localhost".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = config();
        c.apply_overrides(|k| match k {
            ENV_THRESHOLD => Some("above-max".into()),
            ENV_LISTEN_ADDRESS => Some("0.0.0.0:8080".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.threshold, Threshold::AboveMax);
        assert_eq!(c.listen_address, "0.0.0.0:8080");
        assert!(config().apply_overrides(|_| Some("x".into())).is_err());
    }
}
