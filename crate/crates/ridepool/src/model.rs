//! Core domain types and the reward / quality-of-service mathematics.

use std::collections::HashSet;
use std::fmt;

use crate::scalar::{cast, Scalar};

/// Zero-based zone index into the active [`ZoneMap`](crate::city::ZoneMap).
#[repr(transparent)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ZoneId(pub usize);

impl ZoneId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "z{}", self.0)
    }
}

/// One-based discrete simulation step.
#[repr(transparent)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep(pub u32);

impl TimeStep {
    pub const FIRST: TimeStep = TimeStep(1);

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    /// The step `k` steps later.
    #[inline]
    pub fn plus(self, k: u32) -> TimeStep {
        TimeStep(self.0 + k)
    }

    /// Whole steps elapsed since `earlier`; zero if `earlier` is in the future.
    #[inline]
    pub fn since(self, earlier: TimeStep) -> u32 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for TimeStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Unique request identifier within one run.
#[repr(transparent)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl RequestId {
    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// One commuter trip demand.
///
/// `provisional` marks requests materialised from a forecast; those are
/// placeholders that must be matched by a real arrival before any car
/// containing them commits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub origin: ZoneId,
    pub dest: ZoneId,
    pub is_driver: bool,
    /// Maximum steps the commuter waits to be assigned to a car.
    pub max_wait: u32,
    pub arrival: TimeStep,
    pub provisional: bool,
}

impl Request {
    pub fn new(
        id: u64,
        origin: usize,
        dest: usize,
        is_driver: bool,
        max_wait: u32,
        arrival: u32,
    ) -> Request {
        debug_assert_ne!(origin, dest, "request origin must differ from destination");
        debug_assert!(max_wait >= 1);
        Request {
            id: RequestId(id),
            origin: ZoneId(origin),
            dest: ZoneId(dest),
            is_driver,
            max_wait,
            arrival: TimeStep(arrival),
            provisional: false,
        }
    }

    /// Last step at which this request may still be committed.
    #[inline]
    pub fn expiry(&self) -> TimeStep {
        self.arrival.plus(self.max_wait)
    }

    /// Remaining wait budget at `now`; negative once expired. Requests with a
    /// future arrival (forecast materialisations) have slack above `max_wait`.
    #[inline]
    pub fn slack_at(&self, now: TimeStep) -> i64 {
        self.max_wait as i64 - (now.get() as i64 - self.arrival.get() as i64)
    }
}

/// Scale factors for the four reward components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights<T> {
    pub co2: T,
    pub noise: T,
    pub traffic: T,
    pub qos: T,
}

impl<T: Scalar> RewardWeights<T> {
    pub fn unit() -> RewardWeights<T> {
        RewardWeights {
            co2: T::one(),
            noise: T::one(),
            traffic: T::one(),
            qos: T::one(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("co2", self.co2),
            ("noise", self.noise),
            ("traffic", self.traffic),
            ("qos", self.qos),
        ] {
            if !v.is_finite() || v < T::zero() {
                return Err(ModelError::InvalidInput(name));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for RewardWeights<T> {
    fn default() -> Self {
        RewardWeights::unit()
    }
}

/// Reward of one car, split into its raw components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown<T> {
    pub co2: T,
    pub noise: T,
    pub traffic: T,
    pub qos: T,
    pub total: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    pub fn zero() -> RewardBreakdown<T> {
        RewardBreakdown {
            co2: T::zero(),
            noise: T::zero(),
            traffic: T::zero(),
            qos: T::zero(),
            total: T::zero(),
        }
    }
}

/// One request inside a committed (or evaluated) car, with its shared-ride
/// travel time and the solo optimum it is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct CarMember {
    pub request: Request,
    /// Travel time in steps along the shared route.
    pub ride_time: u32,
    /// Optimal (shortest-path) solo travel time in steps.
    pub solo_time: u32,
}

/// A set of requests served by one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Car<T> {
    pub members: Vec<CarMember>,
    pub driver: RequestId,
    pub commit_step: TimeStep,
    pub reward: RewardBreakdown<T>,
}

impl<T> Car<T> {
    pub fn member_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.members.iter().map(|m| m.request.id)
    }
}

/// Errors from the model operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    /// A car violated a structural precondition (times, waits, driver).
    InvalidCar(&'static str),
    /// A numeric input was non-finite or out of its stated range.
    InvalidInput(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidCar(what) => write!(f, "invalid car: {what}"),
            ModelError::InvalidInput(what) => write!(f, "invalid input: {what}"),
        }
    }
}

impl std::error::Error for ModelError {}

/// Quality of service of a car committed at `commit_step`.
///
/// Sums, over all members, the normalised shared-ride delay
/// `(t - t*) / t` and the normalised to-be-assigned delay
/// `(commit - arrival) / max_wait`. Both summands lie in `[0, 1]`, so the
/// result lies in `[-2 * |S|, 0]`. The assignment time is the commitment
/// step, which equals the latest member arrival when commitment is
/// immediate and may exceed it when commitment was deferred.
pub fn quality_of_service<T: Scalar>(
    members: &[CarMember],
    commit_step: TimeStep,
) -> Result<T, ModelError> {
    if members.is_empty() {
        return Err(ModelError::InvalidCar("empty member set"));
    }
    let mut q = T::zero();
    for m in members {
        if m.solo_time < 1 {
            return Err(ModelError::InvalidCar("solo time below one step"));
        }
        if m.ride_time < m.solo_time {
            return Err(ModelError::InvalidCar("ride time below solo time"));
        }
        if commit_step < m.request.arrival {
            return Err(ModelError::InvalidCar("commit step before member arrival"));
        }
        let waited = commit_step.since(m.request.arrival);
        if waited > m.request.max_wait {
            return Err(ModelError::InvalidCar("commit step past member wait budget"));
        }
        let detour: T = cast::<T>((m.ride_time - m.solo_time) as f64) / cast((m.ride_time) as f64);
        let tba: T = cast::<T>(waited as f64) / cast(m.request.max_wait as f64);
        q = q - detour - tba;
    }
    Ok(q)
}

/// Weighted total reward of one car from its environmental components and
/// quality of service.
pub fn car_reward<T: Scalar>(
    env: (T, T, T),
    qos: T,
    weights: &RewardWeights<T>,
) -> Result<RewardBreakdown<T>, ModelError> {
    let (co2, noise, traffic) = env;
    for (name, v) in [("e_co2", co2), ("e_noise", noise), ("e_traffic", traffic)] {
        if !v.is_finite() || v < T::zero() {
            return Err(ModelError::InvalidInput(name));
        }
    }
    if !qos.is_finite() || qos > T::zero() {
        return Err(ModelError::InvalidInput("qos"));
    }
    weights.validate()?;
    let total = weights.co2 * co2 + weights.noise * noise + weights.traffic * traffic + weights.qos * qos;
    Ok(RewardBreakdown {
        co2,
        noise,
        traffic,
        qos,
        total,
    })
}

/// Whether `members` can ride together in one car at `now`: at least one
/// driver, within capacity, nobody past their wait budget, no duplicate ids.
pub fn is_feasible_car(members: &[Request], capacity: usize, now: TimeStep) -> bool {
    if members.is_empty() || members.len() > capacity {
        return false;
    }
    if !members.iter().any(|r| r.is_driver) {
        return false;
    }
    let mut seen = HashSet::with_capacity(members.len());
    for r in members {
        if now.since(r.arrival) > r.max_wait {
            return false;
        }
        if !seen.insert(r.id) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn member(id: u64, ride: u32, solo: u32, arrival: u32, max_wait: u32) -> CarMember {
        CarMember {
            request: Request::new(id, 0, 1, id == 0, max_wait, arrival),
            ride_time: ride,
            solo_time: solo,
        }
    }

    /// Independent re-implementation of the QoS formula used as the oracle
    /// for the derived examples: literal term-by-term evaluation.
    fn qos_oracle(entries: &[(f64, f64, f64, f64, f64)]) -> f64 {
        // (ride, solo, arrival, max_wait, commit)
        entries
            .iter()
            .map(|&(t, ts, arr, mw, commit)| -((t - ts) / t) - ((commit - arr) / mw))
            .sum()
    }

    #[test]
    fn qos_singleton_immediate_is_zero() {
        let q: f64 = quality_of_service(&[member(0, 10, 10, 100, 5)], TimeStep(100)).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn qos_two_member_example_matches_oracle() {
        let members = [member(0, 12, 10, 100, 5), member(1, 8, 8, 102, 5)];
        let q: f64 = quality_of_service(&members, TimeStep(102)).unwrap();
        let expect = qos_oracle(&[
            (12.0, 10.0, 100.0, 5.0, 102.0),
            (8.0, 8.0, 102.0, 5.0, 102.0),
        ]);
        assert_relative_eq!(q, expect, max_relative = 1e-12);
        // -(2/12) - (2/5) = -0.5666...
        assert_relative_eq!(q, -(2.0 / 12.0) - (2.0 / 5.0), max_relative = 1e-12);
        assert_relative_eq!(q, -0.5666666666666667, max_relative = 1e-12);
    }

    #[test]
    fn qos_tba_boundary_summand_is_one() {
        // Commit exactly at arrival + max_wait: the TBA summand is 1.
        let q: f64 = quality_of_service(&[member(0, 10, 10, 100, 5)], TimeStep(105)).unwrap();
        assert_eq!(q, -1.0);
    }

    #[test]
    fn qos_rejects_violated_preconditions() {
        // ride below solo
        assert!(quality_of_service::<f64>(&[member(0, 5, 10, 100, 5)], TimeStep(100)).is_err());
        // commit before arrival
        assert!(quality_of_service::<f64>(&[member(0, 10, 10, 100, 5)], TimeStep(99)).is_err());
        // commit past wait budget
        assert!(quality_of_service::<f64>(&[member(0, 10, 10, 100, 5)], TimeStep(106)).is_err());
        // zero solo time
        assert!(quality_of_service::<f64>(&[member(0, 10, 0, 100, 5)], TimeStep(100)).is_err());
    }

    #[test]
    fn qos_bounds_hold_for_valid_cars() {
        // Sweep a small grid of valid inputs and check the stated bounds.
        for ride_extra in 0..4u32 {
            for waited in 0..=5u32 {
                let members = [
                    member(0, 10 + ride_extra, 10, 100, 5),
                    member(1, 6 + ride_extra, 6, 100 + waited.min(2), 5),
                ];
                let commit = TimeStep(100 + waited.max(2));
                let q: f64 = quality_of_service(&members, commit).unwrap();
                assert!(q <= 0.0 && q >= -2.0 * members.len() as f64, "q={q}");
            }
        }
    }

    #[test]
    fn reward_qos_only() {
        let w = RewardWeights {
            co2: 0.0,
            noise: 0.0,
            traffic: 0.0,
            qos: 1.0,
        };
        let r = car_reward((0.0, 0.0, 0.0), -0.5, &w).unwrap();
        assert_eq!(r.total, -0.5);
        assert_eq!(r.qos, -0.5);
    }

    #[test]
    fn reward_unit_weights() {
        let r = car_reward((2.0, 1.0, 1.0), 0.0, &RewardWeights::unit()).unwrap();
        assert_eq!(r.total, 4.0);
    }

    #[test]
    fn reward_weighted_example() {
        let w = RewardWeights {
            co2: 2.0,
            noise: 0.0,
            traffic: 0.0,
            qos: 4.0,
        };
        let r = car_reward((3.0, 0.0, 0.0), -1.0, &w).unwrap();
        // direct evaluation: 2*3 + 4*(-1) = 2
        assert_eq!(r.total, 2.0);
        assert_eq!((r.co2, r.noise, r.traffic, r.qos), (3.0, 0.0, 0.0, -1.0));
    }

    #[test]
    fn reward_rejects_non_finite_and_out_of_range() {
        let w = RewardWeights::unit();
        assert!(car_reward((f64::NAN, 0.0, 0.0), 0.0, &w).is_err());
        assert!(car_reward((0.0, 0.0, 0.0), f64::INFINITY, &w).is_err());
        assert!(car_reward((0.0, 0.0, 0.0), 0.5, &w).is_err()); // positive qos
        assert!(car_reward((-1.0, 0.0, 0.0), 0.0, &w).is_err()); // negative env
    }

    #[test]
    fn feasibility_basic_cases() {
        let driver = Request::new(0, 0, 1, true, 5, 10);
        let rider = |id: u64| Request::new(id, 0, 1, false, 5, 10);

        assert!(is_feasible_car(std::slice::from_ref(&driver), 5, TimeStep(12)));
        // riders only: no vehicle available
        assert!(!is_feasible_car(&[rider(1), rider(2)], 5, TimeStep(12)));
        // six members incl. driver, capacity five
        let six: Vec<Request> = std::iter::once(driver.clone())
            .chain((1..6).map(rider))
            .collect();
        assert!(!is_feasible_car(&six, 5, TimeStep(12)));
        // wait budget exceeded
        assert!(!is_feasible_car(std::slice::from_ref(&driver), 5, TimeStep(16)));
        // duplicate id
        assert!(!is_feasible_car(&[driver.clone(), driver], 5, TimeStep(12)));
    }

    #[test]
    fn feasibility_monotone_under_member_removal() {
        // Removing a member never violates capacity or wait bounds; removing
        // the last driver flips the driver condition.
        let driver = Request::new(0, 0, 1, true, 5, 10);
        let riders: Vec<Request> = (1..5).map(|id| Request::new(id, 0, 2, false, 5, 10)).collect();
        let mut all = vec![driver];
        all.extend(riders);
        let now = TimeStep(13);
        assert!(is_feasible_car(&all, 5, now));
        for drop in 1..all.len() {
            let reduced: Vec<Request> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != drop)
                .map(|(_, r)| r.clone())
                .collect();
            assert!(is_feasible_car(&reduced, 5, now));
        }
        let no_driver: Vec<Request> = all[1..].to_vec();
        assert!(!is_feasible_car(&no_driver, 5, now));
    }

    proptest::proptest! {
        /// Reward is linear in the weights: scaling all weights by a
        /// nonnegative factor scales the total by the same factor.
        #[test]
        fn reward_linear_in_weights(
            co2 in 0.0..50.0f64,
            noise in 0.0..50.0f64,
            traffic in 0.0..50.0f64,
            qos in -10.0..0.0f64,
            wa in 0.0..4.0f64,
            wb in 0.0..4.0f64,
            wc in 0.0..4.0f64,
            wd in 0.0..4.0f64,
            alpha in 0.0..8.0f64,
        ) {
            let w = RewardWeights { co2: wa, noise: wb, traffic: wc, qos: wd };
            let scaled = RewardWeights {
                co2: wa * alpha,
                noise: wb * alpha,
                traffic: wc * alpha,
                qos: wd * alpha,
            };
            let base = car_reward((co2, noise, traffic), qos, &w).unwrap().total;
            let big = car_reward((co2, noise, traffic), qos, &scaled).unwrap().total;
            proptest::prop_assert!((big - alpha * base).abs() <= 1e-9 * (1.0 + big.abs() + base.abs()));
        }

        /// Every valid car's QoS lies in [-2|S|, 0].
        #[test]
        fn qos_in_bounds(
            rides in proptest::collection::vec((1u32..40, 0u32..20, 0u32..5), 1..6),
            commit_extra in 0u32..5,
        ) {
            let arrival = 50u32;
            let members: Vec<CarMember> = rides
                .iter()
                .enumerate()
                .map(|(i, &(solo, extra, wait_off))| CarMember {
                    request: Request::new(i as u64, 0, 1, i == 0, 5 + wait_off, arrival),
                    ride_time: solo + extra,
                    solo_time: solo,
                })
                .collect();
            let commit = TimeStep(arrival + commit_extra.min(5));
            let q: f64 = quality_of_service(&members, commit).unwrap();
            proptest::prop_assert!(q <= 0.0);
            proptest::prop_assert!(q >= -2.0 * members.len() as f64);
        }
    }
}
