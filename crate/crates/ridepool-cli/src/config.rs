//! Flat key-value experiment configuration with CLI-flag overrides.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ridepool::model::RewardWeights;
use ridepool::solver::{SolverBudget, SolverParams};
use ridepool::{SimConfig64, ZoneMap64};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            bail!("config line {}: expected `key = value`, got `{line}`", lineno + 1);
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| anyhow!("config key `{key}`: cannot parse `{raw}`")),
    }
}

/// Builds the simulation configuration from an optional config file. Every
/// key is optional; defaults are the engine defaults documented in --help.
pub fn sim_config(config_path: Option<&Path>, deterministic_budget: bool) -> Result<SimConfig64> {
    let kv = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    let budget = if deterministic_budget || get(&kv, "deterministic_budget", false)? {
        SolverBudget::Deterministic {
            gen_iters: get(&kv, "gen_iters", 128u64)?,
            pack_nodes: get(&kv, "pack_nodes", 200_000u64)?,
        }
    } else {
        SolverBudget::WallClock {
            millis: get(&kv, "budget_ms", 100u64)?,
        }
    };
    let solver = SolverParams {
        budget,
        d_rate: get(&kv, "d_rate", 0.85)?,
        l_size: get(&kv, "l_size", 3usize)?,
        capacity: get(&kv, "capacity", 5usize)?,
        workers: get(&kv, "workers", 1usize)?,
        gen_share: get(&kv, "gen_share", 0.5)?,
        seed: 0,
    };
    let weights = RewardWeights {
        co2: get(&kv, "weight_co2", 1.0)?,
        noise: get(&kv, "weight_noise", 1.0)?,
        traffic: get(&kv, "weight_traffic", 1.0)?,
        qos: get(&kv, "weight_qos", 1.0)?,
    };
    Ok(SimConfig64 {
        forecast_horizon: get(&kv, "forecast_horizon", 0u32)?,
        capacity: solver.capacity,
        solver,
        weights,
        default_max_wait: get(&kv, "max_wait", 5u32)?,
        lookahead: get(&kv, "lookahead", true)?,
        margin: get(&kv, "margin", 0.0)?,
        driver_prob: get(&kv, "driver_prob", 0.5)?,
        record_predictions: false,
        record_candidates: false,
        seed: 0,
    })
}

/// Zone topology argument: `grid:RxC` or a path to an edge file with lines
/// `zone_a zone_b steps km`.
pub fn load_zones(spec: &str) -> Result<ZoneMap64> {
    if let Some(dims) = spec.strip_prefix("grid:") {
        let (r, c) = dims
            .split_once('x')
            .ok_or_else(|| anyhow!("grid spec must look like grid:5x5, got `{spec}`"))?;
        let rows: usize = r.parse().context("grid rows")?;
        let cols: usize = c.parse().context("grid cols")?;
        if rows == 0 || cols == 0 {
            bail!("grid dimensions must be positive");
        }
        return Ok(ZoneMap64::grid(rows, cols));
    }
    let file = fs::File::open(spec).with_context(|| format!("opening zone file {spec}"))?;
    Ok(ZoneMap64::from_edge_text(BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_kv_with_comments() {
        let kv = parse_kv("# comment\ncapacity = 4\n\nd_rate=0.9 # inline\n").unwrap();
        assert_eq!(kv["capacity"], "4");
        assert_eq!(kv["d_rate"], "0.9");
        assert!(parse_kv("garbage line\n").is_err());
    }

    #[test]
    fn grid_spec_parses() {
        let z = load_zones("grid:2x3").unwrap();
        assert_eq!(z.zones(), 6);
        assert!(load_zones("grid:2y3").is_err());
    }
}
