//! Flat `key = value` training config. Keys mirror [`TrainConfig`] fields;
//! `#` starts a comment. Later entries override earlier ones, so command
//! line flags can simply be appended.
//!
//! ```text
//! network = desk          # desk | tiny | full
//! layout = standard       # standard | azimuth_only
//! steps = 3000
//! ratio = 1:1:1:10
//! seed = 7
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layout::LatentLayout;
use crate::network::NetworkConfig;
use crate::trainer::TrainConfig;

/// Recognized keys, in the order they are applied.
pub const KEYS: &[&str] = &[
    "network",
    "layout",
    "init_scale",
    "seed",
    "network_seed",
    "steps",
    "batch_size",
    "mode",
    "ratio",
    "invariance_scale",
    "learning_rate",
    "sq_decay",
    "weight_decay",
    "epsilon",
    "likelihood",
    "object",
    "checkpoint_every",
];

/// Splits config text into `(key, value)` pairs, rejecting unknown keys.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn json_enum<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::config(format!("{key}: unknown value {v:?}")))
}

/// Applies `entries` to `config`. The last value of each key wins, and keys
/// are applied in [`KEYS`] order so that presets never clobber finer settings.
pub fn apply_config(config: &mut TrainConfig, entries: &[(String, String)]) -> Result<()> {
    let mut last: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in entries {
        let key = KEYS
            .iter()
            .find(|known| **known == k.as_str())
            .ok_or_else(|| Error::config(format!("unknown key {k:?}")))?;
        last.insert(key, v);
    }
    for &key in KEYS {
        let Some(&v) = last.get(key) else { continue };
        match key {
            "network" => {
                let seed = config.network.seed;
                config.network = match v {
                    "desk" => NetworkConfig::desk_scale(),
                    "tiny" => NetworkConfig::tiny(8),
                    "full" => NetworkConfig::full_scale(),
                    _ => return Err(Error::config(format!("network: unknown preset {v:?}"))),
                }
                .with_seed(seed);
            }
            "layout" => {
                let d = config.network.layout.total_dim();
                config.network.layout = match v {
                    "standard" => LatentLayout::standard(d)?,
                    "azimuth_only" => LatentLayout::azimuth_only(d)?,
                    _ => return Err(Error::config(format!("layout: unknown layout {v:?}"))),
                };
            }
            "init_scale" => config.network.init.scale = parse(key, v)?,
            "seed" => {
                config.seed = parse(key, v)?;
                config.network.seed = config.seed;
            }
            "network_seed" => config.network.seed = parse(key, v)?,
            "steps" => config.steps = parse(key, v)?,
            "batch_size" => config.batch_size = parse(key, v)?,
            "mode" => config.mode = parse(key, v)?,
            "ratio" => config.ratio = parse(key, v)?,
            "invariance_scale" => config.invariance_scale = parse(key, v)?,
            "learning_rate" => config.optim.learning_rate = parse(key, v)?,
            "sq_decay" => config.optim.sq_decay = parse(key, v)?,
            "weight_decay" => config.optim.weight_decay = parse(key, v)?,
            "epsilon" => config.optim.epsilon = parse(key, v)?,
            "likelihood" => config.likelihood = json_enum(key, v)?,
            "object" => config.object = json_enum(key, v)?,
            "checkpoint_every" => config.checkpoint_every = parse(key, v)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    config.validate()
}
