//! Run-directory plumbing: key=value config files, metric histories as
//! line-delimited text, and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use super::HarnessError;
use crate::adapters::LayerSelection;
use crate::train::{Method, MetricRecord, TrainConfig};

/// Parses a `key=value` config file ('#' starts a comment). Unknown keys
/// are errors so typos surface instead of silently using defaults.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    const KNOWN: &[&str] = &[
        "method",
        "lr0",
        "decay",
        "lr_min",
        "epochs",
        "batch",
        "seed",
        "weight_decay",
        "temperature",
        "extra_tokens",
        "proxy_tokens",
        "proxy_layers",
        "lora_rank",
        "eval_every",
    ];
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Config(format!(
                "config line {}: expected key=value, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim();
        if !KNOWN.contains(&key) {
            return Err(HarnessError::Config(format!(
                "config line {}: unknown key {key:?}",
                lineno + 1
            )));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn parse_method(s: &str) -> Option<Method> {
    match s {
        "zs" => Some(Method::Zs),
        "lp" => Some(Method::Lp),
        "dga" => Some(Method::Dga),
        "lga" => Some(Method::Lga),
        "lora" => Some(Method::Lora),
        "ft" => Some(Method::Ft),
        _ => s
            .strip_prefix("llft")
            .and_then(|n| n.parse().ok())
            .map(Method::Llft),
    }
}

/// Applies config-file overrides onto a base config.
pub fn apply_overrides(
    config: &mut TrainConfig,
    overrides: &BTreeMap<String, String>,
) -> Result<(), HarnessError> {
    let bad = |key: &str, value: &str| {
        HarnessError::Config(format!("config value {key}={value} did not parse"))
    };
    for (key, value) in overrides {
        match key.as_str() {
            "method" => {
                config.method =
                    parse_method(value).ok_or_else(|| bad(key, value))?;
            }
            "lr0" => config.lr0 = value.parse().map_err(|_| bad(key, value))?,
            "decay" => config.decay = value.parse().map_err(|_| bad(key, value))?,
            "lr_min" => config.lr_min = value.parse().map_err(|_| bad(key, value))?,
            "epochs" => config.epochs = value.parse().map_err(|_| bad(key, value))?,
            "batch" => config.batch = value.parse().map_err(|_| bad(key, value))?,
            "seed" => config.seed = value.parse().map_err(|_| bad(key, value))?,
            "weight_decay" => {
                config.weight_decay = value.parse().map_err(|_| bad(key, value))?
            }
            "temperature" => {
                config.temperature = value.parse().map_err(|_| bad(key, value))?
            }
            "extra_tokens" => {
                config.adapters.extra_tokens = value.parse().map_err(|_| bad(key, value))?
            }
            "proxy_tokens" => {
                config.adapters.proxy_tokens = value.parse().map_err(|_| bad(key, value))?
            }
            "proxy_layers" => {
                config.adapters.proxy_layers = match value.as_str() {
                    "first-half" => LayerSelection::FirstHalf,
                    "second-half" => LayerSelection::SecondHalf,
                    "all" => LayerSelection::All,
                    _ => return Err(bad(key, value)),
                }
            }
            "lora_rank" => {
                config.lora_rank = Some(value.parse().map_err(|_| bad(key, value))?)
            }
            "eval_every" => config.eval_every = value.parse().map_err(|_| bad(key, value))?,
            _ => unreachable!("filtered by parse_config_file"),
        }
    }
    Ok(())
}

pub fn write_history(path: &Path, history: &[MetricRecord]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for r in history {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<MetricRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(MetricRecord::parse_line)
        .collect())
}

/// Writes the run manifest: sorted key=value lines, byte-stable across
/// reruns of the same configuration.
pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<(), HarnessError> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_files_parse_and_apply() {
        let text = "# desk run\nmethod=lga\nlr0=0.001\nepochs=3\nproxy_tokens=2\n";
        let overrides = parse_config_file(text).unwrap();
        let mut config = TrainConfig::new(Method::Dga, 1);
        apply_overrides(&mut config, &overrides).unwrap();
        assert_eq!(config.method, Method::Lga);
        assert_eq!(config.lr0, 0.001);
        assert_eq!(config.epochs, 3);
        assert_eq!(config.adapters.proxy_tokens, 2);

        assert!(parse_config_file("bogus_key=1").is_err());
        assert!(parse_config_file("epochs").is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Zs,
            Method::Lp,
            Method::Dga,
            Method::Lga,
            Method::Lora,
            Method::Llft(2),
            Method::Ft,
        ] {
            assert_eq!(parse_method(&m.name()), Some(m));
        }
    }

    #[test]
    fn history_files_round_trip() {
        let dir = std::env::temp_dir().join("gbx-history-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.txt");
        let history = vec![
            MetricRecord {
                epoch: 1,
                split: "train".into(),
                metric: "loss".into(),
                value: 2.5,
            },
            MetricRecord {
                epoch: 1,
                split: "test".into(),
                metric: "r@1".into(),
                value: 0.40625,
            },
        ];
        write_history(&path, &history).unwrap();
        assert_eq!(read_history(&path).unwrap(), history);
    }
}
