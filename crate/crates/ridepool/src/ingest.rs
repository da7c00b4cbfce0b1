//! Request stream construction from NYC TLC trip records or from a
//! synthetic periodic generator.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::model::{Request, TimeStep};

#[derive(Debug)]
pub enum IngestError {
    /// A required CSV column is absent from the header.
    MissingColumn(&'static str),
    /// Configuration inconsistent with itself or with the zone count.
    Config(String),
    /// Malformed canonical stream or lookup file.
    BadFile(String),
    Io(std::io::Error),
}

impl fmt::Display for IngestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestError::MissingColumn(c) => write!(f, "input is missing required column {c}"),
            IngestError::Config(msg) => write!(f, "bad configuration: {msg}"),
            IngestError::BadFile(msg) => write!(f, "bad file: {msg}"),
            IngestError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for IngestError {}

impl From<std::io::Error> for IngestError {
    fn from(e: std::io::Error) -> Self {
        IngestError::Io(e)
    }
}

/// Maps TLC location ids onto zero-based zone indices.
#[derive(Debug, Clone, Default)]
pub struct ZoneLookup {
    map: HashMap<u32, usize>,
}

impl ZoneLookup {
    pub fn new(pairs: impl IntoIterator<Item = (u32, usize)>) -> ZoneLookup {
        ZoneLookup {
            map: pairs.into_iter().collect(),
        }
    }

    /// Parses the lookup format: one line per mapping
    /// `tlc_location_id zone_index`, `#` comments allowed.
    pub fn from_text<R: BufRead>(reader: R) -> Result<ZoneLookup, IngestError> {
        let mut map = HashMap::new();
        for line in reader.lines() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut fields = body.split_whitespace();
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(IngestError::BadFile(format!("lookup line `{line}`")));
            };
            let tlc: u32 = a
                .parse()
                .map_err(|_| IngestError::BadFile(format!("lookup line `{line}`")))?;
            let zone: usize = b
                .parse()
                .map_err(|_| IngestError::BadFile(format!("lookup line `{line}`")))?;
            map.insert(tlc, zone);
        }
        Ok(ZoneLookup { map })
    }

    pub fn zone(&self, tlc: u32) -> Option<usize> {
        self.map.get(&tlc).copied()
    }

    pub fn max_zone(&self) -> Option<usize> {
        self.map.values().copied().max()
    }
}

/// One taxi trip row surviving the day/zone filters.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub pickup_datetime: NaiveDateTime,
    pub pu_location: u32,
    pub do_location: u32,
}

/// Row-level accounting of one parse pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub kept: usize,
    pub malformed: usize,
    pub unmapped: usize,
    pub other_day: usize,
    pub same_zone: usize,
}

impl ParseReport {
    pub fn skipped(&self) -> usize {
        self.malformed + self.unmapped + self.same_zone
    }
}

/// Parses TLC yellow-taxi CSV rows, keeping trips of the given day whose
/// pickup and dropoff locations both map to (distinct) zones.
pub fn parse_trip_records<R: Read>(
    source: R,
    day: NaiveDate,
    lookup: &ZoneLookup,
) -> Result<(Vec<TripRecord>, ParseReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::BadFile(e.to_string()))?
        .clone();
    let col = |name: &'static str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(IngestError::MissingColumn(name))
    };
    let c_time = col("tpep_pickup_datetime")?;
    let c_pu = col("PULocationID")?;
    let c_do = col("DOLocationID")?;

    let mut out = Vec::new();
    let mut report = ParseReport::default();
    for row in reader.records() {
        let Ok(row) = row else {
            report.malformed += 1;
            continue;
        };
        let parsed = (|| {
            let ts = row.get(c_time)?;
            let pu: u32 = row.get(c_pu)?.trim().parse().ok()?;
            let dol: u32 = row.get(c_do)?.trim().parse().ok()?;
            let dt = NaiveDateTime::parse_from_str(ts.trim(), "%Y-%m-%d %H:%M:%S").ok()?;
            Some((dt, pu, dol))
        })();
        let Some((dt, pu, dol)) = parsed else {
            report.malformed += 1;
            continue;
        };
        if dt.date() != day {
            report.other_day += 1;
            continue;
        }
        let (Some(zo), Some(zd)) = (lookup.zone(pu), lookup.zone(dol)) else {
            report.unmapped += 1;
            continue;
        };
        if zo == zd {
            report.same_zone += 1;
            continue;
        }
        report.kept += 1;
        out.push(TripRecord {
            pickup_datetime: dt,
            pu_location: pu,
            do_location: dol,
        });
    }
    Ok((out, report))
}

/// Request-generation policy applied when turning trip records into a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamPolicy {
    /// Probability that a request owns a car.
    pub driver_prob: f64,
    /// Maximum assignment wait in steps.
    pub max_wait: u32,
    /// Wall-clock seconds per simulation step.
    pub step_seconds: u32,
    pub seed: u64,
}

impl Default for StreamPolicy {
    fn default() -> Self {
        StreamPolicy {
            driver_prob: 0.5,
            max_wait: 5,
            step_seconds: 60,
            seed: 0,
        }
    }
}

/// The per-step request input of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestStream {
    pub zones: usize,
    /// Steps in the stream; arrivals lie in `[1, horizon]`.
    pub horizon: u32,
    pub steps_per_day: u32,
    pub day_label: String,
    pub driver_prob: f64,
    per_step: Vec<Vec<Request>>,
}

impl RequestStream {
    pub fn new(
        zones: usize,
        horizon: u32,
        steps_per_day: u32,
        day_label: impl Into<String>,
        driver_prob: f64,
        requests: Vec<Request>,
    ) -> Result<RequestStream, IngestError> {
        let mut per_step: Vec<Vec<Request>> = vec![Vec::new(); horizon as usize];
        let mut last_id = None;
        for r in requests {
            let step = r.arrival.get();
            if step < 1 || step > horizon {
                return Err(IngestError::Config(format!(
                    "request {} arrival {} outside [1, {horizon}]",
                    r.id, step
                )));
            }
            if r.origin.index() >= zones || r.dest.index() >= zones {
                return Err(IngestError::Config(format!("request {} zone out of range", r.id)));
            }
            if let Some(prev) = last_id {
                if r.id.value() <= prev {
                    return Err(IngestError::Config("request ids must be strictly increasing".into()));
                }
            }
            last_id = Some(r.id.value());
            per_step[(step - 1) as usize].push(r);
        }
        Ok(RequestStream {
            zones,
            horizon,
            steps_per_day,
            day_label: day_label.into(),
            driver_prob,
            per_step,
        })
    }

    /// Arrivals at `step` (1-based); empty past the horizon.
    pub fn arrivals(&self, step: TimeStep) -> &[Request] {
        let i = step.get() as usize;
        if i >= 1 && i <= self.per_step.len() {
            &self.per_step[i - 1]
        } else {
            &[]
        }
    }

    pub fn total_requests(&self) -> usize {
        self.per_step.iter().map(Vec::len).sum()
    }

    pub fn days(&self) -> u32 {
        self.horizon.div_ceil(self.steps_per_day)
    }

    /// Extracts day `d` (1-based) with arrivals renumbered to `[1, steps_per_day]`.
    /// Request ids are preserved.
    pub fn day_slice(&self, d: u32) -> Result<RequestStream, IngestError> {
        if d < 1 || d > self.days() {
            return Err(IngestError::Config(format!("day {d} outside stream of {} days", self.days())));
        }
        let offset = (d - 1) * self.steps_per_day;
        let mut requests = Vec::new();
        for step in offset + 1..=(offset + self.steps_per_day).min(self.horizon) {
            for r in self.arrivals(TimeStep(step)) {
                let mut r = r.clone();
                r.arrival = TimeStep(step - offset);
                requests.push(r);
            }
        }
        RequestStream::new(
            self.zones,
            self.steps_per_day,
            self.steps_per_day,
            format!("{}-day{}", self.day_label, d),
            self.driver_prob,
            requests,
        )
    }

    /// Writes the canonical stream file: a metadata comment followed by one
    /// line per request, `step id origin dest is_driver max_wait`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IngestError> {
        writeln!(
            w,
            "# ridepool-stream v1 zones={} horizon={} steps_per_day={} driver_prob={} label={}",
            self.zones, self.horizon, self.steps_per_day, self.driver_prob, self.day_label
        )?;
        for step_requests in &self.per_step {
            for r in step_requests {
                writeln!(
                    w,
                    "{} {} {} {} {} {}",
                    r.arrival.get(),
                    r.id.value(),
                    r.origin.index(),
                    r.dest.index(),
                    u8::from(r.is_driver),
                    r.max_wait
                )?;
            }
        }
        Ok(())
    }

    /// Reads a canonical stream file. Files without the metadata line are
    /// accepted; zone count and horizon are then inferred from the data.
    pub fn read_from<R: BufRead>(reader: R) -> Result<RequestStream, IngestError> {
        let mut meta: Option<(usize, u32, u32, f64, String)> = None;
        let mut requests = Vec::new();
        let mut max_step = 0u32;
        let mut max_zone = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if meta.is_none() && rest.trim_start().starts_with("ridepool-stream") {
                    meta = Some(parse_stream_meta(rest)?);
                }
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(IngestError::BadFile(format!("stream line {}: `{line}`", lineno + 1)));
            }
            let bad = || IngestError::BadFile(format!("stream line {}: `{line}`", lineno + 1));
            let step: u32 = fields[0].parse().map_err(|_| bad())?;
            let id: u64 = fields[1].parse().map_err(|_| bad())?;
            let origin: usize = fields[2].parse().map_err(|_| bad())?;
            let dest: usize = fields[3].parse().map_err(|_| bad())?;
            let is_driver = match fields[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let max_wait: u32 = fields[5].parse().map_err(|_| bad())?;
            if origin == dest || max_wait == 0 || step == 0 {
                return Err(bad());
            }
            max_step = max_step.max(step);
            max_zone = max_zone.max(origin).max(dest);
            requests.push(Request::new(id, origin, dest, is_driver, max_wait, step));
        }
        let (zones, horizon, steps_per_day, driver_prob, label) = meta.unwrap_or((
            max_zone + 1,
            max_step.max(1),
            max_step.max(1),
            0.5,
            "unlabelled".to_string(),
        ));
        RequestStream::new(zones, horizon, steps_per_day, label, driver_prob, requests)
    }
}

fn parse_stream_meta(rest: &str) -> Result<(usize, u32, u32, f64, String), IngestError> {
    let mut zones = None;
    let mut horizon = None;
    let mut spd = None;
    let mut driver_prob = 0.5;
    let mut label = String::from("unlabelled");
    for token in rest.split_whitespace() {
        if let Some((k, v)) = token.split_once('=') {
            match k {
                "zones" => zones = v.parse().ok(),
                "horizon" => horizon = v.parse().ok(),
                "steps_per_day" => spd = v.parse().ok(),
                "driver_prob" => driver_prob = v.parse().unwrap_or(0.5),
                "label" => label = v.to_string(),
                _ => {}
            }
        }
    }
    match (zones, horizon, spd) {
        (Some(z), Some(h), Some(s)) => Ok((z, h, s, driver_prob, label)),
        _ => Err(IngestError::BadFile("incomplete stream metadata line".into())),
    }
}

/// Bins trip records into steps and samples driver flags, producing the
/// stream `R_1..R_h` for one day.
pub fn build_stream(
    records: &[TripRecord],
    policy: &StreamPolicy,
    lookup: &ZoneLookup,
    day_label: impl Into<String>,
) -> Result<RequestStream, IngestError> {
    if policy.step_seconds == 0 || policy.max_wait == 0 {
        return Err(IngestError::Config("step_seconds and max_wait must be positive".into()));
    }
    if !(0.0..=1.0).contains(&policy.driver_prob) {
        return Err(IngestError::Config("driver_prob outside [0, 1]".into()));
    }
    let zones = lookup
        .max_zone()
        .ok_or_else(|| IngestError::Config("zone lookup is empty".into()))?
        + 1;
    let horizon = 86_400u32.div_ceil(policy.step_seconds);

    let mut sorted: Vec<&TripRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.pickup_datetime);

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut requests = Vec::with_capacity(sorted.len());
    for (id, rec) in sorted.iter().enumerate() {
        let origin = lookup
            .zone(rec.pu_location)
            .ok_or_else(|| IngestError::Config(format!("unmapped location {}", rec.pu_location)))?;
        let dest = lookup
            .zone(rec.do_location)
            .ok_or_else(|| IngestError::Config(format!("unmapped location {}", rec.do_location)))?;
        let secs = rec.pickup_datetime.num_seconds_from_midnight();
        let step = secs / policy.step_seconds + 1;
        let is_driver = rng.random_bool(policy.driver_prob);
        requests.push(Request::new(
            id as u64,
            origin,
            dest,
            is_driver,
            policy.max_wait,
            step,
        ));
    }
    RequestStream::new(zones, horizon, horizon, day_label, policy.driver_prob, requests)
}

/// Per-cell demand rate active on a range of steps within each day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEntry {
    /// First step of day the rate applies to (1-based, inclusive).
    pub from_step: u32,
    /// Last step of day the rate applies to (inclusive).
    pub to_step: u32,
    pub origin: usize,
    pub dest: usize,
    /// Expected requests per step for this cell.
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// Counts drawn from a Poisson distribution with the cell rate as mean.
    Poisson,
    /// Counts equal to the rounded rate, identical every matching day.
    Exact,
}

/// Synthetic multi-day demand description.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub zones: usize,
    pub days: u32,
    pub steps_per_day: u32,
    pub rates: Vec<RateEntry>,
    pub noise: Noise,
    /// Rate multiplier applied on weekend days.
    pub weekend_scale: f64,
    /// Day-of-week indices `(day - 1) % 7` treated as weekend.
    pub weekend_days: BTreeSet<u32>,
    pub driver_prob: f64,
    pub max_wait: u32,
    pub seed: u64,
    pub label: String,
}

impl SynthConfig {
    pub fn weekend(&self, day: u32) -> bool {
        self.weekend_days.contains(&((day - 1) % 7))
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            zones: 25,
            days: 7,
            steps_per_day: 1440,
            rates: Vec::new(),
            noise: Noise::Poisson,
            weekend_scale: 1.0,
            weekend_days: BTreeSet::from([5, 6]),
            driver_prob: 0.5,
            max_wait: 5,
            seed: 0,
            label: "synth".into(),
        }
    }
}

/// Draws a multi-day stream from per-cell rates, optionally Poisson-noised,
/// with weekend scaling. Deterministic for a fixed seed.
pub fn synth_stream(cfg: &SynthConfig) -> Result<RequestStream, IngestError> {
    if cfg.zones == 0 || cfg.days == 0 || cfg.steps_per_day == 0 {
        return Err(IngestError::Config("zones, days and steps_per_day must be positive".into()));
    }
    for e in &cfg.rates {
        if e.origin >= cfg.zones || e.dest >= cfg.zones {
            return Err(IngestError::Config(format!(
                "rate entry zone ({}, {}) outside 0..{}",
                e.origin, e.dest, cfg.zones
            )));
        }
        if e.origin == e.dest {
            return Err(IngestError::Config("rate entry on the diagonal".into()));
        }
        if e.from_step < 1 || e.to_step > cfg.steps_per_day || e.from_step > e.to_step {
            return Err(IngestError::Config(format!(
                "rate entry steps [{}, {}] outside [1, {}]",
                e.from_step, e.to_step, cfg.steps_per_day
            )));
        }
        if !(e.rate.is_finite() && e.rate >= 0.0) {
            return Err(IngestError::Config("rate entries must be finite and nonnegative".into()));
        }
    }

    // Dense per-(step-of-day, cell) rates; cells iterated in (i, j) order so
    // the draw sequence is reproducible.
    let mut per_step_cells: Vec<Vec<(usize, usize, f64)>> =
        vec![Vec::new(); cfg.steps_per_day as usize];
    let mut cell_rates: BTreeSet<(u32, usize, usize)> = BTreeSet::new();
    for e in &cfg.rates {
        for s in e.from_step..=e.to_step {
            cell_rates.insert((s, e.origin, e.dest));
        }
    }
    for &(s, i, j) in &cell_rates {
        let rate: f64 = cfg
            .rates
            .iter()
            .filter(|e| e.origin == i && e.dest == j && e.from_step <= s && s <= e.to_step)
            .map(|e| e.rate)
            .sum();
        per_step_cells[(s - 1) as usize].push((i, j, rate));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut requests = Vec::new();
    let mut next_id = 0u64;
    for day in 1..=cfg.days {
        let scale = if cfg.weekend(day) { cfg.weekend_scale } else { 1.0 };
        for step_of_day in 1..=cfg.steps_per_day {
            let global_step = (day - 1) * cfg.steps_per_day + step_of_day;
            for &(i, j, rate) in &per_step_cells[(step_of_day - 1) as usize] {
                let lambda = rate * scale;
                let count = match cfg.noise {
                    Noise::Exact => lambda.round() as u64,
                    Noise::Poisson => {
                        if lambda > 0.0 {
                            Poisson::new(lambda)
                                .map_err(|e| IngestError::Config(format!("poisson({lambda}): {e}")))?
                                .sample(&mut rng) as u64
                        } else {
                            0
                        }
                    }
                };
                for _ in 0..count {
                    let is_driver = rng.random_bool(cfg.driver_prob);
                    requests.push(Request::new(next_id, i, j, is_driver, cfg.max_wait, global_step));
                    next_id += 1;
                }
            }
        }
    }
    RequestStream::new(
        cfg.zones,
        cfg.days * cfg.steps_per_day,
        cfg.steps_per_day,
        cfg.label.clone(),
        cfg.driver_prob,
        requests,
    )
}
