//! `key = value` configuration files.

use std::collections::HashSet;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::LossToggles;
use crate::nn::SdcMode;
use crate::train::{sdc_name, TrainConfig};

pub const KEYS: [&str; 11] =
    ["epochs", "batch", "lr0", "seed", "image_size", "dataset_count", "eval_count", "losses", "sdc", "drn", "out_dir"];

fn bad(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::format("config", format!("line {line}: {detail}"))
}

fn number<V: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| bad(line, format!("{key} = {v:?} is not a valid number")))
}

fn on_off(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(bad(line, format!("{key} must be on or off, got {v:?}"))),
    }
}

/// Apply one setting on top of `cfg`.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str, line: usize) -> Result<()> {
    match key {
        "epochs" => cfg.epochs = number(line, key, value)?,
        "batch" => cfg.batch = number(line, key, value)?,
        "lr0" => cfg.lr0 = number(line, key, value)?,
        "seed" => cfg.seed = number(line, key, value)?,
        "image_size" => cfg.image_size = number(line, key, value)?,
        "dataset_count" => cfg.dataset_count = number(line, key, value)?,
        "eval_count" => cfg.eval_count = number(line, key, value)?,
        "losses" => cfg.toggles = LossToggles::parse(value).map_err(|e| bad(line, e))?,
        "sdc" => {
            cfg.net.sdc = match value {
                "on" => SdcMode::Learned,
                "frozen" => SdcMode::Frozen,
                "off" => SdcMode::Off,
                _ => return Err(bad(line, format!("sdc must be on, off or frozen, got {value:?}"))),
            }
        }
        "drn" => cfg.net.drn = on_off(line, key, value)?,
        "out_dir" => {
            if value.is_empty() {
                return Err(bad(line, "out_dir is empty"));
            }
            cfg.out_dir = PathBuf::from(value)
        }
        _ => return Err(bad(line, format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Parse config text over the defaults. Later duplicates are rejected rather than
/// silently winning.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(bad(line, format!("expected key = value, got {content:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) && KEYS.contains(&key) {
            return Err(bad(line, format!("duplicate key {key:?}")));
        }
        apply(&mut cfg, key, value, line)?;
    }
    Ok(cfg)
}

pub fn render(cfg: &TrainConfig, with_out_dir: bool) -> String {
    let mut s = format!(
        "epochs = {}\nbatch = {}\nlr0 = {:?}\nseed = {}\nimage_size = {}\ndataset_count = {}\neval_count = {}\nlosses = {}\nsdc = {}\ndrn = {}\n",
        cfg.epochs,
        cfg.batch,
        cfg.lr0,
        cfg.seed,
        cfg.image_size,
        cfg.dataset_count,
        cfg.eval_count,
        cfg.toggles,
        sdc_name(cfg.net.sdc),
        if cfg.net.drn { "on" } else { "off" },
    );
    if with_out_dir {
        s.push_str(&format!("out_dir = {}\n", cfg.out_dir.display()));
    }
    s
}
