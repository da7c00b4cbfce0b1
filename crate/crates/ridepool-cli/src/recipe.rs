//! Turns the compact synth flags into per-cell demand rates: a few hot
//! origin-destination corridors firing in short periodic bursts, which
//! gives the pooling optimiser genuine cross-step choices.

use std::collections::BTreeSet;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ridepool::ingest::{Noise, RateEntry, SynthConfig};
use ridepool::rng::mix_seed;

use crate::{NoiseArg, SynthArgs};

fn grid_dims(spec: &str) -> Result<(usize, usize)> {
    let Some(dims) = spec.strip_prefix("grid:") else {
        bail!("synth needs a grid zone spec (hotspot selection uses grid coordinates), got `{spec}`");
    };
    let Some((r, c)) = dims.split_once('x') else {
        bail!("grid spec must look like grid:5x5, got `{spec}`");
    };
    Ok((r.parse()?, c.parse()?))
}

/// Picks distinct long-haul hotspot cells and lays bursts over the day so
/// the requested daily volume is met in expectation.
pub fn synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let (rows, cols) = grid_dims(&args.zones)?;
    let zones = rows * cols;
    if zones < 2 {
        bail!("need at least two zones");
    }
    if args.hotspots == 0 || args.burst_len == 0 || args.burst_every < args.burst_len {
        bail!("hotspots and burst_len must be positive, burst_every >= burst_len");
    }
    if args.requests_per_day <= 0.0 {
        bail!("requests_per_day must be positive");
    }

    // Long corridors pool better; require at least half the grid diameter.
    let min_dist = (rows + cols).div_ceil(2).max(1);
    let manhattan = |a: usize, b: usize| {
        let (ar, ac) = (a / cols, a % cols);
        let (br, bc) = (b / cols, b % cols);
        ar.abs_diff(br) + ac.abs_diff(bc)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(args.seed, 0x5707));
    let mut hotspots: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut attempts = 0;
    while hotspots.len() < args.hotspots {
        attempts += 1;
        if attempts > 10_000 {
            bail!("cannot place {} hotspots at distance >= {min_dist} on {rows}x{cols}", args.hotspots);
        }
        let o = rng.random_range(0..zones);
        let d = rng.random_range(0..zones);
        if o != d && manhattan(o, d) >= min_dist {
            hotspots.insert((o, d));
        }
    }

    let windows_per_day = args.steps_per_day / args.burst_every;
    if windows_per_day == 0 {
        bail!("burst_every {} exceeds steps_per_day {}", args.burst_every, args.steps_per_day);
    }
    let per_cell_step_rate = args.requests_per_day
        / (args.hotspots as f64 * windows_per_day as f64 * args.burst_len as f64);

    let hotspot_list: Vec<(usize, usize)> = hotspots.into_iter().collect();
    let mut rates = Vec::new();
    for window in 0..windows_per_day {
        let start = window * args.burst_every + 1;
        let end = (start + args.burst_len - 1).min(args.steps_per_day);
        if args.rotate_hotspots {
            // one corridor per window, round-robin: demand persists exactly
            // one burst, so foresight beyond the burst length buys nothing
            let (origin, dest) = hotspot_list[(window as usize) % hotspot_list.len()];
            rates.push(RateEntry {
                from_step: start,
                to_step: end,
                origin,
                dest,
                rate: per_cell_step_rate * hotspot_list.len() as f64,
            });
        } else {
            for &(origin, dest) in &hotspot_list {
                rates.push(RateEntry {
                    from_step: start,
                    to_step: end,
                    origin,
                    dest,
                    rate: per_cell_step_rate,
                });
            }
        }
    }

    Ok(SynthConfig {
        zones,
        days: args.days,
        steps_per_day: args.steps_per_day,
        rates,
        noise: match args.noise {
            NoiseArg::Poisson => Noise::Poisson,
            NoiseArg::Exact => Noise::Exact,
        },
        weekend_scale: args.weekend_scale,
        driver_prob: args.driver_prob,
        max_wait: args.max_wait,
        seed: args.seed,
        label: args.label.clone().unwrap_or_else(|| format!("synth-s{}", args.seed)),
        ..SynthConfig::default()
    })
}
