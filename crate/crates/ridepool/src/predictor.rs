//! Predictor contract, the perfect / previous-day / LSTM predictors,
//! materialisation of forecasts into provisional requests, and SMAPE
//! accuracy scoring.

use std::fmt;

use rand::Rng;

use crate::ingest::RequestStream;
use crate::lstm::{self, LstmParams, LstmState};
use crate::model::{Request, RequestId, TimeStep, ZoneId};
use crate::scalar::{cast, count, Scalar};

#[derive(Debug)]
pub enum PredictorError {
    /// The perfect predictor needs the realised stream as its oracle.
    MissingOracle,
    LengthMismatch { predicted: usize, truth: usize },
    InvalidInput(&'static str),
    Lstm(lstm::LstmError),
}

impl fmt::Display for PredictorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorError::MissingOracle => {
                write!(f, "perfect predictor configured without an oracle stream")
            }
            PredictorError::LengthMismatch { predicted, truth } => {
                write!(f, "sequence length mismatch: {predicted} predictions vs {truth} truths")
            }
            PredictorError::InvalidInput(what) => write!(f, "invalid input: {what}"),
            PredictorError::Lstm(e) => write!(f, "lstm predictor: {e}"),
        }
    }
}

impl std::error::Error for PredictorError {}

impl From<lstm::LstmError> for PredictorError {
    fn from(e: lstm::LstmError) -> Self {
        PredictorError::Lstm(e)
    }
}

/// Nonnegative request counts per origin-destination pair for one step.
/// The diagonal is structurally zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountsGrid {
    zones: usize,
    counts: Vec<u32>,
}

impl CountsGrid {
    pub fn zeros(zones: usize) -> CountsGrid {
        CountsGrid {
            zones,
            counts: vec![0; zones * zones],
        }
    }

    pub fn from_requests<'a>(requests: impl IntoIterator<Item = &'a Request>, zones: usize) -> CountsGrid {
        let mut grid = CountsGrid::zeros(zones);
        for r in requests {
            grid.bump(r.origin.index(), r.dest.index());
        }
        grid
    }

    #[inline]
    pub fn zones(&self) -> usize {
        self.zones
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.zones + j]
    }

    pub fn set(&mut self, i: usize, j: usize, c: u32) {
        assert!(i != j || c == 0, "diagonal cells must stay zero");
        self.counts[i * self.zones + j] = c;
    }

    pub fn bump(&mut self, i: usize, j: usize) {
        assert_ne!(i, j, "diagonal cells must stay zero");
        self.counts[i * self.zones + j] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Off-diagonal cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.zones).flat_map(move |i| {
            (0..self.zones)
                .filter(move |&j| j != i)
                .map(move |j| (i, j, self.get(i, j)))
        })
    }

    /// Flattened counts divided by `norm`, the LSTM input encoding.
    pub fn to_scaled_vec<T: Scalar>(&self, norm: T) -> Vec<T> {
        self.counts.iter().map(|&c| cast::<T>(f64::from(c)) / norm).collect()
    }
}

/// Predicted counts for one future step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forecast {
    pub for_step: TimeStep,
    pub grid: CountsGrid,
    /// Steps ahead of the emission step this forecast targets.
    pub horizon_used: u32,
}

/// A demand predictor driven step by step by the engine.
///
/// `observe` feeds the realised counts of each step in order; `forecast`
/// asks for the grids expected at `now + 1 ..= now + f`, capped at
/// `last_step` (no arrivals exist past the stream horizon).
pub trait Predictor<T: Scalar> {
    fn name(&self) -> &'static str;

    fn observe(&mut self, step: TimeStep, realized: &CountsGrid);

    fn forecast(
        &self,
        now: TimeStep,
        f: u32,
        last_step: TimeStep,
    ) -> Result<Vec<Forecast>, PredictorError>;
}

/// Placeholder for runs without prediction (`f = 0`).
#[derive(Debug, Clone, Copy, Default)]
pub struct NonePredictor;

impl<T: Scalar> Predictor<T> for NonePredictor {
    fn name(&self) -> &'static str {
        "none"
    }

    fn observe(&mut self, _step: TimeStep, _realized: &CountsGrid) {}

    fn forecast(&self, _now: TimeStep, _f: u32, _last: TimeStep) -> Result<Vec<Forecast>, PredictorError> {
        Ok(Vec::new())
    }
}

/// Returns the realised counts of the oracle stream, i.e. 100% accuracy.
#[derive(Debug, Clone)]
pub struct PerfectPredictor {
    per_step: Vec<CountsGrid>,
}

impl PerfectPredictor {
    pub fn new(oracle: &RequestStream) -> PerfectPredictor {
        let per_step = (1..=oracle.horizon)
            .map(|s| CountsGrid::from_requests(oracle.arrivals(TimeStep(s)), oracle.zones))
            .collect();
        PerfectPredictor { per_step }
    }

    fn grid_at(&self, step: TimeStep) -> CountsGrid {
        let i = step.get() as usize;
        if i >= 1 && i <= self.per_step.len() {
            self.per_step[i - 1].clone()
        } else {
            CountsGrid::zeros(self.per_step.first().map_or(0, CountsGrid::zones))
        }
    }
}

impl<T: Scalar> Predictor<T> for PerfectPredictor {
    fn name(&self) -> &'static str {
        "perfect"
    }

    fn observe(&mut self, _step: TimeStep, _realized: &CountsGrid) {}

    fn forecast(&self, now: TimeStep, f: u32, last: TimeStep) -> Result<Vec<Forecast>, PredictorError> {
        Ok((1..=f)
            .map(|k| now.plus(k))
            .filter(|s| *s <= last)
            .map(|s| Forecast {
                for_step: s,
                grid: self.grid_at(s),
                horizon_used: s.since(now),
            })
            .collect())
    }
}

/// Replays the counts observed exactly one day earlier; zero before any
/// history exists.
#[derive(Debug, Clone)]
pub struct YesterdayPredictor {
    zones: usize,
    steps_per_day: u32,
    /// Ring buffer over step-of-day slots; a slot holds the last observed
    /// grid for that slot, i.e. the previous day's counts until the current
    /// day overwrites it at exactly that step.
    slots: Vec<Option<CountsGrid>>,
}

impl YesterdayPredictor {
    pub fn new(zones: usize, steps_per_day: u32) -> YesterdayPredictor {
        YesterdayPredictor {
            zones,
            steps_per_day,
            slots: vec![None; steps_per_day as usize],
        }
    }

    /// Pre-fills the ring with full days of history, e.g. the day before
    /// the simulated one.
    pub fn warm(&mut self, history: &RequestStream) {
        for s in 1..=history.horizon {
            <Self as Predictor<f64>>::observe(
                self,
                TimeStep(s),
                &CountsGrid::from_requests(history.arrivals(TimeStep(s)), history.zones),
            );
        }
    }

    fn slot(&self, step: TimeStep) -> usize {
        ((step.get() - 1) % self.steps_per_day) as usize
    }
}

impl<T: Scalar> Predictor<T> for YesterdayPredictor {
    fn name(&self) -> &'static str {
        "yesterday"
    }

    fn observe(&mut self, step: TimeStep, realized: &CountsGrid) {
        let slot = self.slot(step);
        self.slots[slot] = Some(realized.clone());
    }

    fn forecast(&self, now: TimeStep, f: u32, last: TimeStep) -> Result<Vec<Forecast>, PredictorError> {
        Ok((1..=f)
            .map(|k| now.plus(k))
            .filter(|s| *s <= last)
            .map(|s| Forecast {
                for_step: s,
                grid: self.slots[self.slot(s)]
                    .clone()
                    .unwrap_or_else(|| CountsGrid::zeros(self.zones)),
                horizon_used: s.since(now),
            })
            .collect())
    }
}

/// Wraps trained LSTM parameters; one recurrence step per simulation step,
/// multi-step forecasts by recursive rollout on the unrounded outputs.
#[derive(Debug, Clone)]
pub struct LstmPredictor<T> {
    params: LstmParams<T>,
    zones: usize,
    state: LstmState<T>,
    last_output: Option<Vec<T>>,
}

impl<T: Scalar> LstmPredictor<T> {
    pub fn new(params: LstmParams<T>, zones: usize) -> Result<LstmPredictor<T>, PredictorError> {
        if params.dims().input != zones * zones {
            return Err(PredictorError::InvalidInput("parameter dimensions do not match zone count"));
        }
        let hidden = params.dims().hidden;
        Ok(LstmPredictor {
            params,
            zones,
            state: LstmState::zeros(hidden),
            last_output: None,
        })
    }

    /// Feeds full history through the recurrence, e.g. the days preceding
    /// the simulated one.
    pub fn warm(&mut self, history: &RequestStream) -> Result<(), PredictorError> {
        for s in 1..=history.horizon {
            let grid = CountsGrid::from_requests(history.arrivals(TimeStep(s)), history.zones);
            self.advance(&grid)?;
        }
        Ok(())
    }

    fn advance(&mut self, realized: &CountsGrid) -> Result<(), PredictorError> {
        let x = realized.to_scaled_vec(self.params.norm);
        let (state, y) = lstm::forward(&self.params, &self.state, &x)?;
        self.state = state;
        self.last_output = Some(y);
        Ok(())
    }
}

impl<T: Scalar> Predictor<T> for LstmPredictor<T> {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn observe(&mut self, _step: TimeStep, realized: &CountsGrid) {
        // Forward recurrence cannot fail on finite counts; a failure here
        // means the parameters themselves are bad, surfaced at forecast time.
        if self.advance(realized).is_err() {
            self.last_output = None;
        }
    }

    fn forecast(&self, now: TimeStep, f: u32, last: TimeStep) -> Result<Vec<Forecast>, PredictorError> {
        let Some(first) = &self.last_output else {
            return Ok((1..=f)
                .map(|k| now.plus(k))
                .filter(|s| *s <= last)
                .map(|s| Forecast {
                    for_step: s,
                    grid: CountsGrid::zeros(self.zones),
                    horizon_used: s.since(now),
                })
                .collect());
        };
        let mut out = Vec::new();
        let mut state = self.state.clone();
        let mut y = first.clone();
        for k in 1..=f {
            let step = now.plus(k);
            if step <= last {
                out.push(Forecast {
                    for_step: step,
                    grid: lstm::output_to_grid(&y, self.params.norm, self.zones),
                    horizon_used: k,
                });
            }
            if k < f {
                let (next, next_y) = lstm::forward(&self.params, &state, &y)?;
                state = next;
                y = next_y;
            }
        }
        Ok(out)
    }
}

/// Allocates ids for provisional requests in a range disjoint from any
/// realistic stream id.
#[derive(Debug, Clone)]
pub struct ProvisionalIds {
    next: u64,
}

impl ProvisionalIds {
    pub const BASE: u64 = 1 << 40;

    pub fn new() -> ProvisionalIds {
        ProvisionalIds { next: Self::BASE }
    }

    pub fn next_id(&mut self) -> RequestId {
        let id = RequestId(self.next);
        self.next += 1;
        id
    }
}

impl Default for ProvisionalIds {
    fn default() -> Self {
        ProvisionalIds::new()
    }
}

/// Expands a forecast grid into provisional requests, one per predicted
/// count, with driver flags sampled at the stream's driver probability.
pub fn materialize<R: Rng>(
    forecast: &Forecast,
    ids: &mut ProvisionalIds,
    driver_prob: f64,
    max_wait: u32,
    rng: &mut R,
) -> Vec<Request> {
    let mut out = Vec::new();
    for (i, j, c) in forecast.grid.cells() {
        for _ in 0..c {
            out.push(Request {
                id: ids.next_id(),
                origin: ZoneId(i),
                dest: ZoneId(j),
                is_driver: rng.random_bool(driver_prob),
                max_wait,
                arrival: forecast.for_step,
                provisional: true,
            });
        }
    }
    out
}

/// Symmetric mean absolute percentage error, in percent.
///
/// Terms where prediction and truth are both zero contribute zero.
pub fn smape<T: Scalar>(predicted: &[T], truth: &[T]) -> Result<T, PredictorError> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(PredictorError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut sum = T::zero();
    for (&p, &g) in predicted.iter().zip(truth) {
        if !(p.is_finite() && g.is_finite()) || p < T::zero() || g < T::zero() {
            return Err(PredictorError::InvalidInput("smape entries must be finite and nonnegative"));
        }
        if p == T::zero() && g == T::zero() {
            continue;
        }
        sum += (p - g).abs() / ((p + g) / cast::<T>(2.0));
    }
    Ok(sum / count::<T>(predicted.len()) * cast::<T>(100.0))
}

/// Streaming accumulator over (prediction, truth) grid pairs, reporting the
/// per-cell SMAPE and the per-step-total variant.
#[derive(Debug, Clone, Default)]
pub struct SmapeAccumulator {
    cell_term_sum: f64,
    cell_terms: u64,
    step_totals: Vec<(f64, f64)>,
}

impl SmapeAccumulator {
    pub fn new() -> SmapeAccumulator {
        SmapeAccumulator::default()
    }

    pub fn record(&mut self, predicted: &CountsGrid, truth: &CountsGrid) {
        debug_assert_eq!(predicted.zones(), truth.zones());
        for (i, j, p) in predicted.cells() {
            let g = truth.get(i, j);
            self.cell_terms += 1;
            if p == 0 && g == 0 {
                continue;
            }
            let (p, g) = (f64::from(p), f64::from(g));
            self.cell_term_sum += (p - g).abs() / ((p + g) / 2.0);
        }
        self.step_totals.push((predicted.total() as f64, truth.total() as f64));
    }

    pub fn pairs(&self) -> usize {
        self.step_totals.len()
    }

    /// (per-cell SMAPE, per-step-total SMAPE), both in percent; `None`
    /// when nothing was recorded.
    pub fn finish(&self) -> Option<(f64, f64)> {
        if self.cell_terms == 0 {
            return None;
        }
        let cell = self.cell_term_sum / self.cell_terms as f64 * 100.0;
        let preds: Vec<f64> = self.step_totals.iter().map(|&(p, _)| p).collect();
        let truths: Vec<f64> = self.step_totals.iter().map(|&(_, g)| g).collect();
        let step = smape(&preds, &truths).expect("accumulated totals are valid smape input");
        Some((cell, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_stream, Noise, RateEntry, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn periodic_stream(days: u32) -> RequestStream {
        synth_stream(&SynthConfig {
            zones: 3,
            days,
            steps_per_day: 8,
            rates: vec![
                RateEntry { from_step: 2, to_step: 3, origin: 0, dest: 2, rate: 2.0 },
                RateEntry { from_step: 6, to_step: 6, origin: 1, dest: 0, rate: 1.0 },
            ],
            noise: Noise::Exact,
            seed: 4,
            label: "periodic".into(),
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn realized(stream: &RequestStream, step: u32) -> CountsGrid {
        CountsGrid::from_requests(stream.arrivals(TimeStep(step)), stream.zones)
    }

    #[test]
    fn perfect_predictor_returns_realized_counts() {
        let stream = periodic_stream(1);
        let p = PerfectPredictor::new(&stream);
        for t in 1..stream.horizon {
            let fs = <PerfectPredictor as Predictor<f64>>::forecast(
                &p,
                TimeStep(t),
                1,
                TimeStep(stream.horizon),
            )
            .unwrap();
            assert_eq!(fs.len(), 1);
            assert_eq!(fs[0].for_step, TimeStep(t + 1));
            assert_eq!(fs[0].horizon_used, 1);
            assert_eq!(fs[0].grid, realized(&stream, t + 1));
        }
        // beyond the horizon nothing is forecast
        let fs = <PerfectPredictor as Predictor<f64>>::forecast(
            &p,
            TimeStep(stream.horizon),
            3,
            TimeStep(stream.horizon),
        )
        .unwrap();
        assert!(fs.is_empty());
    }

    #[test]
    fn yesterday_is_exact_on_a_periodic_stream_from_day_two() {
        let stream = periodic_stream(2);
        let mut p = YesterdayPredictor::new(stream.zones, stream.steps_per_day);
        for t in 1..=stream.horizon {
            if t > stream.steps_per_day {
                let fs = <YesterdayPredictor as Predictor<f64>>::forecast(
                    &p,
                    TimeStep(t - 1),
                    1,
                    TimeStep(stream.horizon),
                )
                .unwrap();
                assert_eq!(fs[0].grid, realized(&stream, t), "step {t}");
            }
            <YesterdayPredictor as Predictor<f64>>::observe(&mut p, TimeStep(t), &realized(&stream, t));
        }
    }

    #[test]
    fn yesterday_forecasts_zero_during_day_one() {
        let stream = periodic_stream(1);
        let p = YesterdayPredictor::new(stream.zones, stream.steps_per_day);
        let fs = <YesterdayPredictor as Predictor<f64>>::forecast(
            &p,
            TimeStep(1),
            2,
            TimeStep(stream.horizon),
        )
        .unwrap();
        assert!(fs.iter().all(|f| f.grid.total() == 0));
    }

    #[test]
    fn materialize_emits_exactly_the_grid_counts() {
        let mut grid = CountsGrid::zeros(8);
        grid.set(2, 7, 3);
        grid.set(0, 1, 1);
        let forecast = Forecast {
            for_step: TimeStep(42),
            grid,
            horizon_used: 1,
        };
        let mut ids = ProvisionalIds::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = materialize(&forecast, &mut ids, 0.5, 5, &mut rng);
        assert_eq!(out.len(), 4);
        assert_eq!(
            out.iter().filter(|r| r.origin == ZoneId(2) && r.dest == ZoneId(7)).count(),
            3
        );
        for r in &out {
            assert!(r.provisional);
            assert_eq!(r.arrival, TimeStep(42));
            assert_eq!(r.max_wait, 5);
            assert!(r.id.value() >= ProvisionalIds::BASE);
        }

        // zero grid -> nothing
        let empty = Forecast {
            for_step: TimeStep(1),
            grid: CountsGrid::zeros(4),
            horizon_used: 1,
        };
        assert!(materialize(&empty, &mut ids, 0.5, 5, &mut rng).is_empty());

        // fixed seed -> identical driver flags
        let redo = |seed: u64| {
            let mut ids = ProvisionalIds::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            materialize(&forecast, &mut ids, 0.5, 5, &mut rng)
                .iter()
                .map(|r| r.is_driver)
                .collect::<Vec<_>>()
        };
        assert_eq!(redo(5), redo(5));
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&[3.0, 1.0], &[3.0, 1.0]).unwrap(), 0.0);
        // n=1, P=3, G=1: |2| / 2 = 1 -> 100%
        assert_eq!(smape(&[3.0], &[1.0]).unwrap(), 100.0);
        // zero-zero convention plus exact match
        assert_eq!(smape(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(smape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(smape::<f64>(&[], &[]).is_err());
        assert!(smape(&[-1.0], &[1.0]).is_err());
    }

    proptest::proptest! {
        /// SMAPE is bounded by [0, 200] for any nonnegative input.
        #[test]
        fn smape_bounds(pairs in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..40)) {
            let p: Vec<f64> = pairs.iter().map(|&(a, _)| a).collect();
            let g: Vec<f64> = pairs.iter().map(|&(_, b)| b).collect();
            let s = smape(&p, &g).unwrap();
            proptest::prop_assert!((0.0..=200.0).contains(&s));
        }
    }

    #[test]
    fn perfect_predictor_scores_zero_smape() {
        let stream = periodic_stream(2);
        let p = PerfectPredictor::new(&stream);
        let mut acc = SmapeAccumulator::new();
        for t in 1..stream.horizon {
            let fs = <PerfectPredictor as Predictor<f64>>::forecast(
                &p,
                TimeStep(t),
                1,
                TimeStep(stream.horizon),
            )
            .unwrap();
            acc.record(&fs[0].grid, &realized(&stream, t + 1));
        }
        let (cell, step) = acc.finish().unwrap();
        assert_eq!(cell, 0.0);
        assert_eq!(step, 0.0);
    }

    #[test]
    fn lstm_predictor_rolls_out_multi_step() {
        let zones = 2;
        let params: LstmParams<f64> = LstmParams::seeded(crate::lstm::LstmDims { input: 4, hidden: 3 }, 9);
        let mut p = LstmPredictor::new(params, zones).unwrap();
        // before any observation: zero grids
        let fs = <LstmPredictor<f64> as Predictor<f64>>::forecast(&p, TimeStep(1), 2, TimeStep(100)).unwrap();
        assert_eq!(fs.len(), 2);
        assert!(fs.iter().all(|f| f.grid.total() == 0));

        let mut grid = CountsGrid::zeros(zones);
        grid.set(0, 1, 2);
        <LstmPredictor<f64> as Predictor<f64>>::observe(&mut p, TimeStep(1), &grid);
        let fs = <LstmPredictor<f64> as Predictor<f64>>::forecast(&p, TimeStep(1), 3, TimeStep(100)).unwrap();
        assert_eq!(fs.len(), 3);
        for (k, f) in fs.iter().enumerate() {
            assert_eq!(f.horizon_used, k as u32 + 1);
            assert_eq!(f.for_step, TimeStep(2 + k as u32));
        }
        // dimensions must match the zone count
        let bad: LstmParams<f64> = LstmParams::seeded(crate::lstm::LstmDims { input: 9, hidden: 2 }, 1);
        assert!(LstmPredictor::new(bad, zones).is_err());
    }
}
