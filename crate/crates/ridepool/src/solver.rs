//! Per-step offline optimisation: probabilistic greedy candidate
//! generation, exact weighted set packing with an anytime budget, the
//! brute-force packing oracle, and the look-ahead commitment filter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::city::{env_benefits, plan_shared_route, RoutePlan, ZoneMap};
use crate::model::{
    car_reward, is_feasible_car, quality_of_service, Car, CarMember, Request, RequestId,
    RewardWeights, TimeStep,
};
use crate::rng::mix_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolverError {
    /// The exhaustive oracle refuses instances it cannot enumerate.
    OracleTooLarge { candidates: usize },
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverError::OracleTooLarge { candidates } => {
                write!(f, "brute-force oracle limited to 20 candidates, got {candidates}")
            }
        }
    }
}

impl std::error::Error for SolverError {}

/// Computation budget of one solver invocation.
///
/// Wall-clock budgets match the experimental setting; deterministic budgets
/// count work units instead of time so runs reproduce bit-exactly. Both are
/// fixed totals: a larger pool gets the same budget, not more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverBudget {
    WallClock { millis: u64 },
    Deterministic { gen_iters: u64, pack_nodes: u64 },
}

/// Knobs of the per-step optimisation: budget, determinism rate, restricted
/// candidate list size, seed and car capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub budget: SolverBudget,
    /// Probability of taking the greedy-best addition instead of sampling
    /// the restricted candidate list.
    pub d_rate: f64,
    /// Restricted candidate list size.
    pub l_size: usize,
    pub capacity: usize,
    /// Independent generation workers; outputs merge deterministically.
    pub workers: usize,
    /// Fraction of a wall-clock budget spent on generation, rest on packing.
    pub gen_share: f64,
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            budget: SolverBudget::Deterministic {
                gen_iters: 128,
                pack_nodes: 200_000,
            },
            d_rate: 0.85,
            l_size: 3,
            capacity: 5,
            workers: 1,
            gen_share: 0.5,
            seed: 0,
        }
    }
}

/// A feasible car considered for the packing step.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub members: BTreeSet<RequestId>,
    pub value: T,
    pub car: Car<T>,
    pub plan: RoutePlan<T>,
    pub contains_provisional: bool,
}

/// Evaluates a member set as one car at the step it would commit.
///
/// The commitment step is `now` or the latest member arrival, whichever is
/// later, so cars built around forecast requests already pay the
/// to-be-assigned delay their real members would incur. Among members that
/// own a car, the designated driver is the one maximising total reward,
/// ties to the lowest request id. Returns `None` for infeasible sets.
pub fn evaluate_car<T: Scalar>(
    members: &[Request],
    now: TimeStep,
    zones: &ZoneMap<T>,
    weights: &RewardWeights<T>,
    capacity: usize,
) -> Option<Candidate<T>> {
    let commit = members
        .iter()
        .map(|r| r.arrival)
        .max()
        .map_or(now, |latest| latest.max(now));
    if !is_feasible_car(members, capacity, commit) {
        return None;
    }
    let mut drivers: Vec<&Request> = members.iter().filter(|r| r.is_driver).collect();
    drivers.sort_by_key(|r| r.id);

    let mut best: Option<Candidate<T>> = None;
    for driver in drivers {
        let plan = plan_shared_route(members, driver.id, zones, capacity)
            .expect("feasible car must be plannable");
        let car_members: Vec<CarMember> = members
            .iter()
            .map(|r| CarMember {
                request: r.clone(),
                ride_time: plan.per_member_time[&r.id],
                solo_time: zones.travel(r.origin, r.dest),
            })
            .collect();
        let qos = quality_of_service(&car_members, commit)
            .expect("feasible car satisfies the QoS preconditions");
        let env = env_benefits(&plan, members, zones);
        let reward = car_reward(env, qos, weights).expect("reward inputs are in range");
        if best.as_ref().is_none_or(|b| reward.total > b.value) {
            best = Some(Candidate {
                members: members.iter().map(|r| r.id).collect(),
                value: reward.total,
                contains_provisional: members.iter().any(|r| r.provisional),
                car: Car {
                    members: car_members,
                    driver: driver.id,
                    commit_step: commit,
                    reward,
                },
                plan,
            });
        }
    }
    best
}

type EvalCache<T> = HashMap<Vec<RequestId>, Option<Candidate<T>>>;

fn eval_cached<'a, T: Scalar>(
    cache: &'a mut EvalCache<T>,
    members: &[Request],
    now: TimeStep,
    zones: &ZoneMap<T>,
    weights: &RewardWeights<T>,
    capacity: usize,
) -> &'a Option<Candidate<T>> {
    let key: Vec<RequestId> = members.iter().map(|r| r.id).collect();
    cache
        .entry(key)
        .or_insert_with(|| evaluate_car(members, now, zones, weights, capacity))
}

/// Grows one car from a seed request: rank all feasible single additions by
/// marginal value, keep the top `l_size` as the restricted candidate list,
/// take the best with probability `d_rate`, otherwise draw uniformly.
#[allow(clippy::too_many_arguments)]
fn grow_car<T: Scalar>(
    seed: &Request,
    pool: &[Request],
    now: TimeStep,
    zones: &ZoneMap<T>,
    weights: &RewardWeights<T>,
    params: &SolverParams,
    rng: &mut ChaCha8Rng,
    cache: &mut EvalCache<T>,
) -> Option<Candidate<T>> {
    let mut members: Vec<Request> = vec![seed.clone()];
    let mut current = eval_cached(cache, &members, now, zones, weights, params.capacity).clone();
    // A set without a driver cannot drive at all: its value baseline is zero.
    let mut current_value = current.as_ref().map_or(T::zero(), |c| c.value);

    while members.len() < params.capacity {
        let mut options: Vec<(T, &Request, Candidate<T>)> = Vec::new();
        for r in pool {
            if members.iter().any(|m| m.id == r.id) {
                continue;
            }
            let mut trial = members.clone();
            let at = trial.partition_point(|m| m.id < r.id);
            trial.insert(at, r.clone());
            if let Some(cand) =
                eval_cached(cache, &trial, now, zones, weights, params.capacity).clone()
            {
                let delta = cand.value - current_value;
                if delta > T::zero() {
                    options.push((delta, r, cand));
                }
            }
        }
        if options.is_empty() {
            break;
        }
        options.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite values")
                .then(a.1.id.cmp(&b.1.id))
        });
        options.truncate(params.l_size.max(1));
        let pick = if rng.random_bool(params.d_rate.clamp(0.0, 1.0)) {
            0
        } else {
            rng.random_range(0..options.len())
        };
        let (_, chosen, cand) = options.swap_remove(pick);
        let at = members.partition_point(|m| m.id < chosen.id);
        members.insert(at, chosen.clone());
        current_value = cand.value;
        current = Some(cand);
    }

    current.filter(|c| c.value > T::zero())
}

/// Generates positive-value feasible cars from the pool within the
/// generation share of the budget.
///
/// Seeds rotate round-robin over the pool (sorted by id); iterations are
/// dealt to `workers` independently seeded workers whose outputs merge as a
/// sorted deduplication, so the result does not depend on scheduling.
pub fn generate_candidates<T: Scalar>(
    pool: &[Request],
    now: TimeStep,
    zones: &ZoneMap<T>,
    weights: &RewardWeights<T>,
    params: &SolverParams,
) -> Vec<Candidate<T>> {
    if pool.is_empty() {
        return Vec::new();
    }
    let mut pool: Vec<Request> = pool.to_vec();
    pool.sort_by_key(|r| r.id);
    let workers = params.workers.max(1);

    let (total_iters, deadline) = match params.budget {
        SolverBudget::Deterministic { gen_iters, .. } => (gen_iters, None),
        SolverBudget::WallClock { millis } => {
            let share = (millis as f64 * params.gen_share.clamp(0.0, 1.0)) as u64;
            (u64::MAX, Some(Instant::now() + std::time::Duration::from_millis(share.max(1))))
        }
    };

    // Rotate the round-robin origin per invocation so a budget smaller than
    // the pool still spreads seed attention across steps.
    let offset = mix_seed(params.seed, 0x5eed) % pool.len() as u64;
    let shards: Vec<BTreeMap<BTreeSet<RequestId>, Candidate<T>>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, w as u64));
            let mut cache: EvalCache<T> = HashMap::new();
            let mut found: BTreeMap<BTreeSet<RequestId>, Candidate<T>> = BTreeMap::new();
            let mut iter = w as u64;
            while iter < total_iters {
                let seed_req = &pool[((offset + iter) % pool.len() as u64) as usize];
                if let Some(cand) =
                    grow_car(seed_req, &pool, now, zones, weights, params, &mut rng, &mut cache)
                {
                    found.entry(cand.members.clone()).or_insert(cand);
                }
                iter += workers as u64;
                if let Some(d) = deadline {
                    if Instant::now() >= d {
                        break;
                    }
                }
            }
            found
        })
        .collect();

    let mut merged: BTreeMap<BTreeSet<RequestId>, Candidate<T>> = BTreeMap::new();
    for shard in shards {
        for (key, cand) in shard {
            merged.entry(key).or_insert(cand);
        }
    }
    merged.into_values().collect()
}

/// Packing-phase budget, split off the solver budget by the caller.
#[derive(Debug, Clone, Copy)]
pub enum PackBudget {
    Unlimited,
    Nodes(u64),
    Deadline(Instant),
}

/// Result of one packing run over a candidate slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PackingOutcome<T> {
    /// Indices into the candidate slice, pairwise disjoint.
    pub chosen: Vec<usize>,
    pub total: T,
    /// False when the budget expired and the incumbent was returned.
    pub exact: bool,
    pub nodes: u64,
    /// Incumbent totals in improvement order; never decreasing.
    pub incumbent_trace: Vec<T>,
}

struct PackSearch<'a, T> {
    values: &'a [T],
    masks: &'a [Vec<u64>],
    budget: PackBudget,
    nodes: u64,
    stopped: bool,
    best_value: T,
    best_set: Vec<usize>,
    trace: Vec<T>,
}

impl<T: Scalar> PackSearch<'_, T> {
    fn out_of_budget(&mut self) -> bool {
        match self.budget {
            PackBudget::Unlimited => false,
            PackBudget::Nodes(limit) => self.nodes >= limit,
            PackBudget::Deadline(d) => self.nodes.is_multiple_of(256) && Instant::now() >= d,
        }
    }

    fn dfs(&mut self, k: usize, used: &mut Vec<u64>, current: &mut Vec<usize>, value: T) {
        if self.stopped || k == self.values.len() {
            return;
        }
        self.nodes += 1;
        if self.out_of_budget() {
            self.stopped = true;
            return;
        }
        // Optimistic bound: everything ahead that does not conflict with the
        // current selection could still be taken. The slack keeps summation
        // round-off from pruning solutions within an ulp of the incumbent.
        let mut bound = value;
        for j in k..self.values.len() {
            if !masks_conflict(&self.masks[j], used) {
                bound += self.values[j];
            }
        }
        let slack = crate::scalar::cast::<T>(1e-9) * (T::one() + self.best_value.abs());
        if bound <= self.best_value - slack {
            return;
        }
        if !masks_conflict(&self.masks[k], used) {
            mask_or(used, &self.masks[k]);
            current.push(k);
            let v = value + self.values[k];
            if v > self.best_value {
                self.best_value = v;
                self.best_set = current.clone();
                self.trace.push(v);
            }
            self.dfs(k + 1, used, current, v);
            current.pop();
            mask_andnot(used, &self.masks[k]);
        }
        self.dfs(k + 1, used, current, value);
    }
}

fn masks_conflict(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).any(|(x, y)| x & y != 0)
}

fn mask_or(acc: &mut [u64], m: &[u64]) {
    for (a, b) in acc.iter_mut().zip(m) {
        *a |= b;
    }
}

fn mask_andnot(acc: &mut [u64], m: &[u64]) {
    for (a, b) in acc.iter_mut().zip(m) {
        *a &= !b;
    }
}

fn request_masks(member_sets: &[&BTreeSet<RequestId>]) -> Vec<Vec<u64>> {
    let ids: BTreeSet<RequestId> = member_sets.iter().flat_map(|m| m.iter().copied()).collect();
    let index: HashMap<RequestId, usize> =
        ids.into_iter().enumerate().map(|(k, id)| (id, k)).collect();
    let blocks = index.len().div_ceil(64).max(1);
    member_sets
        .iter()
        .map(|members| {
            let mut mask = vec![0u64; blocks];
            for id in members.iter() {
                let bit = index[id];
                mask[bit / 64] |= 1 << (bit % 64);
            }
            mask
        })
        .collect()
}

/// Exact branch-and-bound weighted set packing over the candidates,
/// maximising total value over pairwise-disjoint subsets. Anytime: if the
/// budget expires the incumbent is returned flagged approximate.
pub fn solve_packing<T: Scalar>(candidates: &[Candidate<T>], budget: PackBudget) -> PackingOutcome<T> {
    // Branch in value-density order; ties resolved by value then member set
    // for reproducibility.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let density = |i: usize| {
        let c = &candidates[i];
        c.value / crate::scalar::count::<T>(c.members.len().max(1))
    };
    order.sort_by(|&a, &b| {
        density(b)
            .partial_cmp(&density(a))
            .expect("finite values")
            .then(
                candidates[b]
                    .value
                    .partial_cmp(&candidates[a].value)
                    .expect("finite values"),
            )
            .then_with(|| candidates[a].members.cmp(&candidates[b].members))
    });
    let values: Vec<T> = order.iter().map(|&i| candidates[i].value).collect();
    let member_sets: Vec<&BTreeSet<RequestId>> =
        order.iter().map(|&i| &candidates[i].members).collect();
    let masks = request_masks(&member_sets);

    let blocks = masks.first().map_or(1, Vec::len);
    let mut search = PackSearch {
        values: &values,
        masks: &masks,
        budget,
        nodes: 0,
        stopped: false,
        best_value: T::zero(),
        best_set: Vec::new(),
        trace: Vec::new(),
    };
    let mut used = vec![0u64; blocks];
    let mut current = Vec::new();
    search.dfs(0, &mut used, &mut current, T::zero());

    let mut chosen: Vec<usize> = search.best_set.iter().map(|&k| order[k]).collect();
    chosen.sort_unstable();
    // Recompute the total in ascending input order: the canonical summation
    // the brute-force oracle uses, so equal selections give equal bits.
    let total = chosen.iter().map(|&i| candidates[i].value).fold(T::zero(), |a, v| a + v);
    PackingOutcome {
        chosen,
        total,
        exact: !search.stopped,
        nodes: search.nodes,
        incumbent_trace: search.trace,
    }
}

/// Exhaustive packing oracle over all subsets; refuses more than 20
/// candidates. Ties broken by the lexicographically smallest index set.
pub fn brute_force_packing<T: Scalar>(
    candidates: &[Candidate<T>],
) -> Result<(Vec<usize>, T), SolverError> {
    if candidates.len() > 20 {
        return Err(SolverError::OracleTooLarge {
            candidates: candidates.len(),
        });
    }
    let m = candidates.len();
    let mut best_total = T::zero();
    let mut best_set: Vec<usize> = Vec::new();
    for subset in 0u32..(1 << m) {
        let mut seen: BTreeSet<RequestId> = BTreeSet::new();
        let mut total = T::zero();
        let mut indices = Vec::new();
        let mut disjoint = true;
        for (i, c) in candidates.iter().enumerate() {
            if subset & (1 << i) == 0 {
                continue;
            }
            if c.members.iter().any(|id| seen.contains(id)) {
                disjoint = false;
                break;
            }
            seen.extend(c.members.iter().copied());
            total += c.value;
            indices.push(i);
        }
        if !disjoint {
            continue;
        }
        if total > best_total || (total == best_total && !indices.is_empty() && indices < best_set) {
            best_total = total;
            best_set = indices;
        }
    }
    Ok((best_set, best_total))
}

/// Splits a packing solution into cars to commit now and cars to defer.
///
/// Cars containing provisional members always defer (they become
/// reservations); a real-only car defers only when every member still has
/// slack, the car is below capacity, and some provisional-containing
/// candidate strictly extends it by more than `margin`. A `None` margin
/// disables deferral of real cars entirely.
pub fn lookahead_filter<T: Scalar>(
    solution: Vec<Candidate<T>>,
    now: TimeStep,
    provisional_candidates: &[Candidate<T>],
    margin: Option<T>,
    capacity: usize,
) -> (Vec<Candidate<T>>, Vec<Candidate<T>>) {
    let mut commit = Vec::new();
    let mut defer = Vec::new();
    for cand in solution {
        if cand.contains_provisional {
            defer.push(cand);
            continue;
        }
        let Some(margin) = margin else {
            commit.push(cand);
            continue;
        };
        let any_expiring = cand
            .car
            .members
            .iter()
            .any(|m| m.request.slack_at(now) <= 0);
        if any_expiring || cand.members.len() >= capacity {
            commit.push(cand);
            continue;
        }
        let better_superset = provisional_candidates.iter().any(|bigger| {
            bigger.members.is_superset(&cand.members) && bigger.value > cand.value + margin
        });
        if better_superset {
            defer.push(cand);
        } else {
            commit.push(cand);
        }
    }
    (commit, defer)
}
