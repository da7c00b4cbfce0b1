//! The online loop: pool maintenance, prediction injection, per-step
//! solving, reservations, expiry and metric accumulation over the horizon.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ingest::RequestStream;
use crate::model::{Car, Request, RequestId, RewardWeights, TimeStep, ZoneId};
use crate::predictor::{
    materialize, CountsGrid, Predictor, PredictorError, ProvisionalIds, SmapeAccumulator,
};
use crate::rng::mix_seed;
use crate::scalar::{cast, Scalar};
use crate::solver::{
    generate_candidates, lookahead_filter, solve_packing, Candidate, PackBudget, SolverBudget,
    SolverParams,
};
use crate::city::ZoneMap;

const SEED_DOMAIN_SOLVER: u64 = 1;
const SEED_DOMAIN_MATERIALIZE: u64 = 2;

#[derive(Debug)]
pub enum EngineError {
    /// An internal invariant broke; carries the offending step.
    Invariant { step: u32, message: String },
    Config(String),
    /// Reports over different streams cannot be compared.
    StreamMismatch { left: String, right: String },
    Predictor(PredictorError),
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::Invariant { step, message } => {
                write!(f, "invariant violated at step {step}: {message}")
            }
            EngineError::Config(msg) => write!(f, "bad simulation config: {msg}"),
            EngineError::StreamMismatch { left, right } => {
                write!(f, "cannot compare runs over different streams ({left} vs {right})")
            }
            EngineError::Predictor(e) => write!(f, "predictor failed: {e}"),
        }
    }
}

impl std::error::Error for EngineError {}

impl From<PredictorError> for EngineError {
    fn from(e: PredictorError) -> Self {
        EngineError::Predictor(e)
    }
}

/// Full configuration of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig<T> {
    /// Forecast horizon f; zero disables prediction.
    pub forecast_horizon: u32,
    pub solver: SolverParams,
    pub weights: RewardWeights<T>,
    pub capacity: usize,
    /// Maximum assignment wait given to provisional requests.
    pub default_max_wait: u32,
    /// Enables deferral of real cars in favour of predicted better ones.
    pub lookahead: bool,
    /// Minimum value advantage a predicted extension needs to defer a car.
    pub margin: T,
    /// Driver probability used when materialising provisional requests.
    pub driver_prob: f64,
    /// Keep per-step (predicted, realised) grids in the report; accuracy is
    /// always scored either way. Off by default to keep long runs small.
    pub record_predictions: bool,
    /// Keep a digest of every generated candidate in the step reports.
    pub record_candidates: bool,
    pub seed: u64,
}

impl<T: Scalar> Default for SimConfig<T> {
    fn default() -> Self {
        SimConfig {
            forecast_horizon: 0,
            solver: SolverParams::default(),
            weights: RewardWeights::unit(),
            capacity: 5,
            default_max_wait: 5,
            lookahead: true,
            margin: T::zero(),
            driver_prob: 0.5,
            record_predictions: false,
            record_candidates: false,
            seed: 0,
        }
    }
}

impl<T: Scalar> SimConfig<T> {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.forecast_horizon > self.default_max_wait {
            return Err(EngineError::Config(format!(
                "forecast horizon {} exceeds the wait budget {}; such predictions are never usable",
                self.forecast_horizon, self.default_max_wait
            )));
        }
        if self.capacity == 0 || self.default_max_wait == 0 {
            return Err(EngineError::Config("capacity and default_max_wait must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.driver_prob) {
            return Err(EngineError::Config("driver_prob outside [0, 1]".into()));
        }
        self.weights
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))
    }
}

/// One awaited provisional member of a reservation: matched by the first
/// real arrival with the same origin, destination and step.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub origin: ZoneId,
    pub dest: ZoneId,
    pub step: TimeStep,
    pub matched: Option<Request>,
}

/// A deferred car awaiting the realisation of its provisional members.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservation<T> {
    /// Real members locked out of the pool while the reservation is open.
    pub members: Vec<Request>,
    pub slots: Vec<Slot>,
    pub created: TimeStep,
    pub value_estimate: T,
}

/// Active real and provisional requests plus open reservations.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState<T> {
    pub active_real: BTreeMap<RequestId, Request>,
    pub provisional: Vec<Request>,
    pub reservations: Vec<Reservation<T>>,
    pub now: TimeStep,
}

impl<T: Scalar> PoolState<T> {
    pub fn new() -> PoolState<T> {
        PoolState {
            active_real: BTreeMap::new(),
            provisional: Vec::new(),
            reservations: Vec::new(),
            now: TimeStep::FIRST,
        }
    }

    /// Real requests currently held inside reservations (members plus
    /// already-matched arrivals).
    pub fn reserved_count(&self) -> usize {
        self.reservations
            .iter()
            .map(|r| r.members.len() + r.slots.iter().filter(|s| s.matched.is_some()).count())
            .sum()
    }
}

impl<T: Scalar> Default for PoolState<T> {
    fn default() -> Self {
        PoolState::new()
    }
}

/// One generated candidate, as recorded for debug dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDigest<T> {
    pub members: Vec<RequestId>,
    pub value: T,
    pub provisional: bool,
}

/// Everything that happened in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<T> {
    pub step: u32,
    pub committed: Vec<Car<T>>,
    /// Weighted reward sums of the cars committed this step.
    pub reward_total: T,
    pub reward_qos: T,
    pub reward_env: T,
    /// Pool sizes as seen by the solver this step.
    pub pool_real: usize,
    pub pool_provisional: usize,
    pub expired_unserved: usize,
    pub expired_singletons: usize,
    /// One-step-ahead forecast for this step paired with the realised counts.
    pub prediction: Option<(CountsGrid, CountsGrid)>,
    /// Candidate digest, populated when the config asks for it.
    pub candidates: Vec<CandidateDigest<T>>,
}

/// Per-step reports and aggregate metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport<T> {
    pub label: String,
    pub horizon: u32,
    pub predictor: String,
    pub forecast_horizon: u32,
    pub seed: u64,
    pub steps: Vec<StepReport<T>>,
    pub total_reward: T,
    pub arrivals: usize,
    pub served_requests: usize,
    pub committed_cars: usize,
    pub expired_unserved: usize,
    /// Requests still active or reserved when the drain phase ended.
    pub residual: usize,
    /// Mean pool size (real + provisional) over the stream horizon.
    pub avg_pool_size: f64,
    pub smape_cell: Option<f64>,
    pub smape_step_total: Option<f64>,
}

impl<T: Scalar> RunReport<T> {
    pub fn served_fraction(&self) -> f64 {
        if self.arrivals == 0 {
            return 1.0;
        }
        self.served_requests as f64 / self.arrivals as f64
    }

    /// The exact count identity every run must satisfy.
    pub fn conservation_holds(&self) -> bool {
        self.arrivals == self.served_requests + self.expired_unserved + self.residual
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            label: self.label.clone(),
            predictor: self.predictor.clone(),
            forecast_horizon: self.forecast_horizon,
            seed: self.seed,
            horizon: self.horizon,
            total_reward: self.total_reward.to_f64().unwrap_or(f64::NAN),
            arrivals: self.arrivals,
            served_requests: self.served_requests,
            committed_cars: self.committed_cars,
            expired_unserved: self.expired_unserved,
            residual: self.residual,
            served_fraction: self.served_fraction(),
            avg_pool_size: self.avg_pool_size,
            smape_cell: self.smape_cell,
            smape_step_total: self.smape_step_total,
        }
    }

    /// Per-step CSV:
    /// `t,committed,reward_total,reward_qos,reward_env,pool_real,pool_provisional,expired`.
    pub fn write_steps_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "t,committed,reward_total,reward_qos,reward_env,pool_real,pool_provisional,expired"
        )?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                s.step,
                s.committed.len(),
                s.reward_total,
                s.reward_qos,
                s.reward_env,
                s.pool_real,
                s.pool_provisional,
                s.expired_unserved
            )?;
        }
        Ok(())
    }
}

/// Flat aggregate view written as the JSON summary file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub predictor: String,
    pub forecast_horizon: u32,
    pub seed: u64,
    pub horizon: u32,
    pub total_reward: f64,
    pub arrivals: usize,
    pub served_requests: usize,
    pub committed_cars: usize,
    pub expired_unserved: usize,
    pub residual: usize,
    pub served_fraction: f64,
    pub avg_pool_size: f64,
    pub smape_cell: Option<f64>,
    pub smape_step_total: Option<f64>,
}

/// Reward-improvement of a treatment run over a baseline, in percent.
/// `None` marks the undefined case of a zero baseline reward.
pub fn compare_runs<T: Scalar>(
    baseline: &RunReport<T>,
    treatment: &RunReport<T>,
) -> Result<Option<T>, EngineError> {
    if baseline.label != treatment.label || baseline.horizon != treatment.horizon {
        return Err(EngineError::StreamMismatch {
            left: format!("{}/{}", baseline.label, baseline.horizon),
            right: format!("{}/{}", treatment.label, treatment.horizon),
        });
    }
    if baseline.total_reward == T::zero() {
        return Ok(None);
    }
    Ok(Some(
        cast::<T>(100.0) * (treatment.total_reward - baseline.total_reward)
            / baseline.total_reward.abs(),
    ))
}

/// One in-progress simulation over a request stream.
pub struct Simulation<'z, T: Scalar, P> {
    cfg: SimConfig<T>,
    zones: &'z ZoneMap<T>,
    predictor: P,
    pool: PoolState<T>,
    ids: ProvisionalIds,
    committed_ids: HashSet<RequestId>,
    /// Forecasts for a step emitted one step earlier, for accuracy scoring.
    pending_one_step: BTreeMap<u32, CountsGrid>,
    smape: SmapeAccumulator,
    /// Last step with arrivals; no forecasts are requested past it.
    horizon: u32,
    zone_count: usize,
}

impl<'z, T: Scalar, P: Predictor<T>> Simulation<'z, T, P> {
    pub fn new(
        cfg: SimConfig<T>,
        zones: &'z ZoneMap<T>,
        zone_count: usize,
        horizon: u32,
        predictor: P,
    ) -> Result<Simulation<'z, T, P>, EngineError> {
        cfg.validate()?;
        if zones.zones() < zone_count {
            return Err(EngineError::Config(format!(
                "zone map covers {} zones but the stream uses {}",
                zones.zones(),
                zone_count
            )));
        }
        Ok(Simulation {
            cfg,
            zones,
            predictor,
            pool: PoolState::new(),
            ids: ProvisionalIds::new(),
            committed_ids: HashSet::new(),
            pending_one_step: BTreeMap::new(),
            smape: SmapeAccumulator::new(),
            horizon,
            zone_count,
        })
    }

    pub fn pool(&self) -> &PoolState<T> {
        &self.pool
    }

    fn invariant(&self, step: TimeStep, message: impl Into<String>) -> EngineError {
        EngineError::Invariant {
            step: step.get(),
            message: message.into(),
        }
    }

    fn commit_car(
        &mut self,
        car: Car<T>,
        t: TimeStep,
        out: &mut Vec<Car<T>>,
    ) -> Result<(), EngineError> {
        let qos_floor = cast::<T>(-2.0 * car.members.len() as f64);
        if car.reward.qos > T::zero() || car.reward.qos < qos_floor {
            return Err(self.invariant(t, format!("car QoS {} outside [{}, 0]", car.reward.qos, qos_floor)));
        }
        for m in &car.members {
            if m.request.provisional {
                return Err(self.invariant(t, format!("provisional request {} in a committed car", m.request.id)));
            }
            if t.since(m.request.arrival) > m.request.max_wait {
                return Err(self.invariant(t, format!("request {} committed past its wait budget", m.request.id)));
            }
            if !self.committed_ids.insert(m.request.id) {
                return Err(self.invariant(t, format!("request {} committed twice", m.request.id)));
            }
        }
        out.push(car);
        Ok(())
    }

    /// Advances the simulation by one step. `t` must be the pool's current
    /// step; pass empty arrivals during the drain phase.
    pub fn step(&mut self, t: TimeStep, arrivals: &[Request]) -> Result<StepReport<T>, EngineError> {
        if t != self.pool.now {
            return Err(self.invariant(t, format!("step {} does not match pool clock {}", t, self.pool.now)));
        }
        let mut committed: Vec<Car<T>> = Vec::new();
        let mut expired_unserved = 0usize;
        let mut expired_singletons = 0usize;

        // (1) match arrivals against reservation slots, FIFO by creation.
        let mut unmatched: Vec<Request> = Vec::new();
        for r in arrivals {
            if r.provisional {
                return Err(self.invariant(t, "stream delivered a provisional request"));
            }
            let mut bound = false;
            'outer: for res in &mut self.pool.reservations {
                let last_slot = res.slots.iter().map(|s| s.step).max().unwrap_or(t);
                if r.expiry() < last_slot {
                    continue; // arrival cannot wait for the reservation to complete
                }
                for slot in &mut res.slots {
                    if slot.matched.is_none()
                        && slot.origin == r.origin
                        && slot.dest == r.dest
                        && slot.step == t
                    {
                        slot.matched = Some(r.clone());
                        bound = true;
                        break 'outer;
                    }
                }
            }
            if !bound {
                unmatched.push(r.clone());
            }
        }

        // fully matched reservations commit at this step
        let mut rest = Vec::with_capacity(self.pool.reservations.len());
        for res in std::mem::take(&mut self.pool.reservations) {
            if res.slots.iter().all(|s| s.matched.is_some()) {
                let mut members = res.members.clone();
                members.extend(res.slots.iter().filter_map(|s| s.matched.clone()));
                match crate::solver::evaluate_car(
                    &members,
                    t,
                    self.zones,
                    &self.cfg.weights,
                    self.cfg.capacity,
                ) {
                    Some(cand) => self.commit_car(cand.car, t, &mut committed)?,
                    None => {
                        // realisation broke feasibility (e.g. the predicted
                        // driver arrived as a rider): dissolve instead
                        for m in members {
                            self.pool.active_real.insert(m.id, m);
                        }
                    }
                }
            } else {
                rest.push(res);
            }
        }
        self.pool.reservations = rest;

        // (2) unmatched arrivals join the pool
        for r in unmatched {
            self.pool.active_real.insert(r.id, r);
        }

        // (3) dissolve reservations whose awaited step passed unmatched
        let mut open = Vec::with_capacity(self.pool.reservations.len());
        for res in std::mem::take(&mut self.pool.reservations) {
            let dead = res.slots.iter().any(|s| s.matched.is_none() && s.step <= t);
            if dead {
                for m in res.members {
                    self.pool.active_real.insert(m.id, m);
                }
                for s in res.slots {
                    if let Some(r) = s.matched {
                        self.pool.active_real.insert(r.id, r);
                    }
                }
            } else {
                open.push(res);
            }
        }
        self.pool.reservations = open;

        // (4) provisional requests are regenerated from scratch every step
        self.pool.provisional.clear();

        // (5) observe realised counts, then forecast and materialise
        let realized = CountsGrid::from_requests(arrivals.iter(), self.zone_count);
        let mut prediction = None;
        if let Some(predicted) = self.pending_one_step.remove(&t.get()) {
            self.smape.record(&predicted, &realized);
            if self.cfg.record_predictions {
                prediction = Some((predicted, realized.clone()));
            }
        }
        if t.get() <= self.horizon {
            self.predictor.observe(t, &realized);
            if self.cfg.forecast_horizon > 0 {
                let forecasts = self.predictor.forecast(
                    t,
                    self.cfg.forecast_horizon,
                    TimeStep(self.horizon),
                )?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    mix_seed(self.cfg.seed, SEED_DOMAIN_MATERIALIZE),
                    t.get() as u64,
                ));
                for fc in &forecasts {
                    if fc.horizon_used == 1 {
                        self.pending_one_step.insert(fc.for_step.get(), fc.grid.clone());
                    }
                    self.pool.provisional.extend(materialize(
                        fc,
                        &mut self.ids,
                        self.cfg.driver_prob,
                        self.cfg.default_max_wait,
                        &mut rng,
                    ));
                }
            }
        }

        let pool_real = self.pool.active_real.len();
        let pool_provisional = self.pool.provisional.len();
        let mut candidate_digest = Vec::new();

        // (6) per-step offline optimisation over the visible pool
        if pool_real + pool_provisional > 0 {
            let mut pool_requests: Vec<Request> = self.pool.active_real.values().cloned().collect();
            pool_requests.extend(self.pool.provisional.iter().cloned());
            let mut params = self.cfg.solver;
            params.seed = mix_seed(mix_seed(self.cfg.seed, SEED_DOMAIN_SOLVER), t.get() as u64);
            let gen_started = Instant::now();
            let candidates =
                generate_candidates(&pool_requests, t, self.zones, &self.cfg.weights, &params);
            let pack_budget = match params.budget {
                SolverBudget::Deterministic { pack_nodes, .. } => PackBudget::Nodes(pack_nodes),
                SolverBudget::WallClock { millis } => PackBudget::Deadline(
                    gen_started + Duration::from_millis(millis.max(1)),
                ),
            };
            if self.cfg.record_candidates {
                candidate_digest = candidates
                    .iter()
                    .map(|c| CandidateDigest {
                        members: c.members.iter().copied().collect(),
                        value: c.value,
                        provisional: c.contains_provisional,
                    })
                    .collect();
            }
            let outcome = solve_packing(&candidates, pack_budget);
            let solution: Vec<Candidate<T>> =
                outcome.chosen.iter().map(|&i| candidates[i].clone()).collect();
            let provisional_candidates: Vec<Candidate<T>> = candidates
                .iter()
                .filter(|c| c.contains_provisional)
                .cloned()
                .collect();
            let margin = self.cfg.lookahead.then_some(self.cfg.margin);
            let (commit_now, defer) =
                lookahead_filter(solution, t, &provisional_candidates, margin, self.cfg.capacity);

            // (7) commit real-only winners; reserve deferred predicted cars
            for cand in commit_now {
                for id in &cand.members {
                    if self.pool.active_real.remove(id).is_none() {
                        return Err(self.invariant(t, format!("committed request {id} was not active")));
                    }
                }
                self.commit_car(cand.car, t, &mut committed)?;
            }
            for cand in defer {
                if !cand.contains_provisional {
                    continue; // deferred real car stays in the pool for later steps
                }
                if cand.car.members.iter().all(|m| m.request.provisional) {
                    // A car with no real member books nothing: committing it
                    // early would bind future arrivals with less information
                    // than their own step will have. Drop it; the forecast is
                    // regenerated next step anyway.
                    continue;
                }
                let mut members = Vec::new();
                let mut slots = Vec::new();
                for m in &cand.car.members {
                    if m.request.provisional {
                        slots.push(Slot {
                            origin: m.request.origin,
                            dest: m.request.dest,
                            step: m.request.arrival,
                            matched: None,
                        });
                    } else {
                        let r = self.pool.active_real.remove(&m.request.id).ok_or_else(|| {
                            self.invariant(t, format!("reserved request {} was not active", m.request.id))
                        })?;
                        members.push(r);
                    }
                }
                self.pool.reservations.push(Reservation {
                    members,
                    slots,
                    created: t,
                    value_estimate: cand.value,
                });
            }
        }

        // (8) expiry: last-chance singleton commits for drivers, unserved
        // riders leave the pool
        let expiring: Vec<Request> = self
            .pool
            .active_real
            .values()
            .filter(|r| r.slack_at(t) <= 0)
            .cloned()
            .collect();
        for r in expiring {
            self.pool.active_real.remove(&r.id);
            if r.is_driver {
                let cand = crate::solver::evaluate_car(
                    std::slice::from_ref(&r),
                    t,
                    self.zones,
                    &self.cfg.weights,
                    self.cfg.capacity,
                )
                .ok_or_else(|| self.invariant(t, format!("expiring driver {} not evaluable", r.id)))?;
                self.commit_car(cand.car, t, &mut committed)?;
                expired_singletons += 1;
            } else {
                expired_unserved += 1;
            }
        }

        // (9) report
        let mut reward_total = T::zero();
        let mut reward_qos = T::zero();
        for car in &committed {
            reward_total += car.reward.total;
            reward_qos += self.cfg.weights.qos * car.reward.qos;
        }
        let reward_env = reward_total - reward_qos;
        self.pool.now = t.plus(1);
        Ok(StepReport {
            step: t.get(),
            committed,
            reward_total,
            reward_qos,
            reward_env,
            pool_real,
            pool_provisional,
            expired_unserved,
            expired_singletons,
            prediction,
            candidates: candidate_digest,
        })
    }
}

/// Runs a full simulation over the stream plus a drain phase of
/// `default_max_wait` empty steps so in-flight requests resolve.
pub fn run<T: Scalar, P: Predictor<T>>(
    stream: &RequestStream,
    cfg: SimConfig<T>,
    zones: &ZoneMap<T>,
    predictor: P,
) -> Result<RunReport<T>, EngineError> {
    let forecast_horizon = cfg.forecast_horizon;
    let seed = cfg.seed;
    let drain = cfg.default_max_wait;
    let mut sim = Simulation::new(cfg, zones, stream.zones, stream.horizon, predictor)?;
    let predictor_name = sim.predictor.name().to_string();

    let mut steps = Vec::with_capacity((stream.horizon + drain) as usize);
    let mut arrivals = 0usize;
    for s in 1..=stream.horizon {
        let t = TimeStep(s);
        arrivals += stream.arrivals(t).len();
        steps.push(sim.step(t, stream.arrivals(t))?);
    }
    for s in stream.horizon + 1..=stream.horizon + drain {
        steps.push(sim.step(TimeStep(s), &[])?);
    }

    let mut total_reward = T::zero();
    let mut served = 0usize;
    let mut cars = 0usize;
    let mut expired_unserved = 0usize;
    let mut pool_sum = 0usize;
    for s in &steps {
        total_reward += s.reward_total;
        served += s.committed.iter().map(|c| c.members.len()).sum::<usize>();
        cars += s.committed.len();
        expired_unserved += s.expired_unserved;
        if s.step <= stream.horizon {
            pool_sum += s.pool_real + s.pool_provisional;
        }
    }
    let acc = &sim.smape;
    let residual = sim.pool.active_real.len() + sim.pool.reserved_count();
    let report = RunReport {
        label: stream.day_label.clone(),
        horizon: stream.horizon,
        predictor: predictor_name,
        forecast_horizon,
        seed,
        steps,
        total_reward,
        arrivals,
        served_requests: served,
        committed_cars: cars,
        expired_unserved,
        residual,
        avg_pool_size: pool_sum as f64 / f64::from(stream.horizon.max(1)),
        smape_cell: acc.finish().map(|(c, _)| c),
        smape_step_total: acc.finish().map(|(_, s)| s),
    };
    if !report.conservation_holds() {
        return Err(EngineError::Invariant {
            step: stream.horizon + drain,
            message: format!(
                "conservation broken: {} arrivals vs {} served + {} expired + {} residual",
                report.arrivals, report.served_requests, report.expired_unserved, report.residual
            ),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_stream, Noise, RateEntry, SynthConfig};
    use crate::predictor::{NonePredictor, PerfectPredictor};
    use crate::solver::evaluate_car;

    fn grid() -> ZoneMap<f64> {
        ZoneMap::grid(3, 3)
    }

    fn stream_of(requests: Vec<Request>, horizon: u32) -> RequestStream {
        RequestStream::new(9, horizon, horizon, "test", 0.5, requests).unwrap()
    }

    fn base_cfg(seed: u64) -> SimConfig<f64> {
        SimConfig {
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_stream_scores_zero() {
        let z = grid();
        let stream = stream_of(Vec::new(), 10);
        let report = run(&stream, base_cfg(1), &z, NonePredictor).unwrap();
        assert_eq!(report.total_reward, 0.0);
        assert_eq!(report.arrivals, 0);
        assert!(report.conservation_holds());
        assert!(report.steps.iter().all(|s| s.pool_real == 0 && s.pool_provisional == 0));
    }

    #[test]
    fn lone_driver_commits_as_singleton_at_expiry() {
        let z = grid();
        let stream = stream_of(vec![Request::new(0, 0, 8, true, 5, 1)], 10);
        let report = run(&stream, base_cfg(1), &z, NonePredictor).unwrap();
        // committed at step 6 (slack zero), full TBA delay, no detour
        let commit_step: Vec<&StepReport<f64>> =
            report.steps.iter().filter(|s| !s.committed.is_empty()).collect();
        assert_eq!(commit_step.len(), 1);
        assert_eq!(commit_step[0].step, 6);
        let car = &commit_step[0].committed[0];
        assert_eq!(car.members.len(), 1);
        assert_eq!(car.reward.qos, -1.0);
        assert_eq!(car.reward.total, -1.0);
        assert_eq!(report.served_requests, 1);
        assert!(report.conservation_holds());
    }

    #[test]
    fn pairable_driver_and_rider_commit_together() {
        let z = grid();
        let driver = Request::new(0, 0, 8, true, 5, 1);
        let rider = Request::new(1, 0, 8, false, 5, 1);
        let stream = stream_of(vec![driver.clone(), rider.clone()], 10);
        let report = run(&stream, base_cfg(1), &z, NonePredictor).unwrap();
        assert_eq!(report.committed_cars, 1);
        let car = &report.steps[0].committed[0];
        assert_eq!(car.members.len(), 2);
        assert_eq!(car.commit_step, TimeStep(1));
        let expect = evaluate_car(
            &[driver, rider],
            TimeStep(1),
            &z,
            &RewardWeights::unit(),
            5,
        )
        .unwrap();
        assert_eq!(report.total_reward, expect.value);
        assert!(report.total_reward > 0.0);
        assert!(report.conservation_holds());
    }

    #[test]
    fn perfect_prediction_reserves_and_commits_next_step() {
        let z = grid();
        // driver arrives at t=1; a same-route rider arrives at t=2
        let driver = Request::new(0, 0, 8, true, 5, 1);
        let rider = Request::new(1, 0, 8, false, 5, 2);
        let stream = stream_of(vec![driver, rider], 10);
        let mut cfg = base_cfg(3);
        cfg.forecast_horizon = 1;
        let predictor = PerfectPredictor::new(&stream);
        let report = run(&stream, cfg, &z, predictor).unwrap();

        assert_eq!(report.committed_cars, 1);
        let step2 = &report.steps[1];
        assert_eq!(step2.step, 2);
        assert_eq!(step2.committed.len(), 1);
        let car = &step2.committed[0];
        assert_eq!(car.members.len(), 2);
        assert_eq!(car.commit_step, TimeStep(2));
        // driver waited one step: TBA summand 1/5
        assert!((car.reward.qos - (-0.2)).abs() < 1e-12);
        // provisional request inflated the pool at step 1
        assert_eq!(report.steps[0].pool_provisional, 1);
        assert!(report.smape_cell.is_some());
        assert_eq!(report.smape_cell.unwrap(), 0.0);
        assert!(report.conservation_holds());
    }

    #[test]
    fn unrealized_prediction_dissolves_and_driver_still_commits() {
        let z = grid();
        // the predictor is fed a fake stream promising a rider at t=2 that
        // never arrives in the simulated stream
        let driver = Request::new(0, 0, 8, true, 5, 1);
        let phantom_rider = Request::new(1, 0, 8, false, 5, 2);
        let oracle = stream_of(vec![driver.clone(), phantom_rider], 10);
        let actual = stream_of(vec![driver], 10);
        let mut cfg = base_cfg(3);
        cfg.forecast_horizon = 1;
        let predictor = PerfectPredictor::new(&oracle);
        let report = run(&actual, cfg, &z, predictor).unwrap();
        // reservation dissolves at t=2; driver expires as a singleton at t=6
        assert_eq!(report.committed_cars, 1);
        let car_steps: Vec<u32> = report
            .steps
            .iter()
            .filter(|s| !s.committed.is_empty())
            .map(|s| s.step)
            .collect();
        assert_eq!(car_steps, vec![6]);
        assert!(report.conservation_holds());
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let z = ZoneMap::grid(5, 5);
        let stream = synth_stream(&SynthConfig {
            zones: 25,
            days: 1,
            steps_per_day: 60,
            rates: vec![
                RateEntry { from_step: 1, to_step: 50, origin: 0, dest: 24, rate: 0.4 },
                RateEntry { from_step: 1, to_step: 50, origin: 3, dest: 20, rate: 0.3 },
            ],
            noise: Noise::Poisson,
            seed: 11,
            label: "det".into(),
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = base_cfg(5);
        cfg.forecast_horizon = 2;
        let a = run(&stream, cfg.clone(), &z, PerfectPredictor::new(&stream)).unwrap();
        let b = run(&stream, cfg, &z, PerfectPredictor::new(&stream)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_prediction_means_no_provisional_pool() {
        let z = grid();
        let stream = stream_of(
            vec![
                Request::new(0, 0, 8, true, 5, 1),
                Request::new(1, 2, 6, false, 5, 2),
                Request::new(2, 1, 7, true, 5, 4),
            ],
            10,
        );
        let report = run(&stream, base_cfg(2), &z, NonePredictor).unwrap();
        assert!(report.steps.iter().all(|s| s.pool_provisional == 0));
        assert!(report.smape_cell.is_none());
        assert!(report.conservation_holds());
    }

    #[test]
    fn compare_runs_cases() {
        let z = grid();
        let stream = stream_of(vec![Request::new(0, 0, 8, true, 5, 1)], 10);
        let a = run(&stream, base_cfg(1), &z, NonePredictor).unwrap();
        let b = a.clone();
        assert_eq!(compare_runs(&a, &b).unwrap(), Some(0.0));

        let mut treat = a.clone();
        treat.total_reward = a.total_reward + 0.0527 * a.total_reward.abs();
        let imp = compare_runs(&a, &treat).unwrap().unwrap();
        assert!((imp - 5.27).abs() < 1e-9, "improvement {imp}");

        let mut zero_base = a.clone();
        zero_base.total_reward = 0.0;
        assert_eq!(compare_runs(&zero_base, &treat).unwrap(), None);

        let other = RunReport {
            label: "different".into(),
            ..a.clone()
        };
        assert!(matches!(
            compare_runs(&a, &other),
            Err(EngineError::StreamMismatch { .. })
        ));
    }

    #[test]
    fn commit_respects_wait_bounds_across_a_noisy_run() {
        let z = ZoneMap::grid(4, 4);
        let stream = synth_stream(&SynthConfig {
            zones: 16,
            days: 1,
            steps_per_day: 120,
            rates: vec![
                RateEntry { from_step: 1, to_step: 110, origin: 0, dest: 15, rate: 0.5 },
                RateEntry { from_step: 1, to_step: 110, origin: 5, dest: 10, rate: 0.4 },
                RateEntry { from_step: 20, to_step: 40, origin: 2, dest: 13, rate: 0.8 },
            ],
            noise: Noise::Poisson,
            seed: 21,
            label: "qos".into(),
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = base_cfg(9);
        cfg.forecast_horizon = 3;
        let report = run(&stream, cfg, &z, PerfectPredictor::new(&stream)).unwrap();
        assert!(report.arrivals > 30);
        for s in &report.steps {
            for car in &s.committed {
                let qos_bound = -2.0 * car.members.len() as f64;
                assert!(car.reward.qos <= 0.0 && car.reward.qos >= qos_bound);
                for m in &car.members {
                    assert!(car.commit_step.since(m.request.arrival) <= m.request.max_wait);
                    assert!(m.ride_time >= m.solo_time);
                }
            }
        }
        assert!(report.conservation_holds());
    }
}
