//! Zone topology, travel times, shared-route planning and the surrogate
//! environmental-benefit model.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use crate::model::{Request, RequestId, ZoneId};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub enum CityError {
    /// No path between two zones in the input graph.
    Disconnected { from: usize, to: usize },
    /// Car has more members than seats.
    CapacityExceeded { members: usize, capacity: usize },
    /// The designated driver is not among the members.
    DriverNotMember,
    /// Malformed zone definition input.
    BadEdge(String),
}

impl fmt::Display for CityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CityError::Disconnected { from, to } => {
                write!(f, "zone {from} cannot reach zone {to}")
            }
            CityError::CapacityExceeded { members, capacity } => {
                write!(f, "{members} members exceed capacity {capacity}")
            }
            CityError::DriverNotMember => write!(f, "designated driver is not a member"),
            CityError::BadEdge(line) => write!(f, "bad zone edge line: {line}"),
        }
    }
}

impl std::error::Error for CityError {}

/// A weighted zone adjacency: undirected edges with a step cost and a
/// kilometre length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub steps: f64,
    pub km: f64,
}

/// All-pairs travel times (whole steps) and distances (km) between zones,
/// derived from shortest paths so both matrices satisfy the triangle
/// inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMap<T> {
    n: usize,
    travel: Vec<u32>,
    dist: Vec<T>,
}

impl<T: Scalar> ZoneMap<T> {
    /// Rectangular grid with unit-step, one-kilometre edges between
    /// orthogonal neighbours.
    pub fn grid(rows: usize, cols: usize) -> ZoneMap<T> {
        assert!(rows >= 1 && cols >= 1);
        let idx = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push(Edge { a: idx(r, c), b: idx(r, c + 1), steps: 1.0, km: 1.0 });
                }
                if r + 1 < rows {
                    edges.push(Edge { a: idx(r, c), b: idx(r + 1, c), steps: 1.0, km: 1.0 });
                }
            }
        }
        ZoneMap::from_edges(rows * cols, &edges).expect("grid is connected")
    }

    /// Builds the all-pairs matrices from an undirected weighted graph.
    ///
    /// Travel times are shortest-path step sums rounded up to whole steps
    /// with a minimum of one step between distinct zones; distances are
    /// shortest-path kilometre sums.
    pub fn from_edges(n: usize, edges: &[Edge]) -> Result<ZoneMap<T>, CityError> {
        assert!(n >= 1);
        let mut adj: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
        for e in edges {
            if e.a >= n || e.b >= n || e.a == e.b || e.steps < 0.0 || e.km < 0.0 {
                return Err(CityError::BadEdge(format!("{} {} {} {}", e.a, e.b, e.steps, e.km)));
            }
            adj[e.a].push((e.b, e.steps, e.km));
            adj[e.b].push((e.a, e.steps, e.km));
        }
        let mut travel = vec![0u32; n * n];
        let mut dist = vec![T::zero(); n * n];
        for src in 0..n {
            let by_steps = dijkstra(&adj, src, |w| w.0);
            let by_km = dijkstra(&adj, src, |w| w.1);
            for to in 0..n {
                if by_steps[to].is_infinite() {
                    return Err(CityError::Disconnected { from: src, to });
                }
                if to != src {
                    travel[src * n + to] = (by_steps[to].ceil() as u32).max(1);
                    dist[src * n + to] = cast(by_km[to]);
                }
            }
        }
        Ok(ZoneMap { n, travel, dist })
    }

    /// Parses the zone definition format: one line per edge
    /// `zone_a zone_b steps km`, with `#` comments and blank lines allowed.
    pub fn from_edge_text<R: BufRead>(reader: R) -> Result<ZoneMap<T>, CityError> {
        let mut edges = Vec::new();
        let mut max_zone = 0usize;
        for line in reader.lines() {
            let line = line.map_err(|e| CityError::BadEdge(e.to_string()))?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(CityError::BadEdge(line.clone()));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| CityError::BadEdge(line.clone()));
            let a = fields[0]
                .parse::<usize>()
                .map_err(|_| CityError::BadEdge(line.clone()))?;
            let b = fields[1]
                .parse::<usize>()
                .map_err(|_| CityError::BadEdge(line.clone()))?;
            let steps = parse(fields[2])?;
            let km = parse(fields[3])?;
            max_zone = max_zone.max(a).max(b);
            edges.push(Edge { a, b, steps, km });
        }
        if edges.is_empty() {
            return Err(CityError::BadEdge("no edges in input".into()));
        }
        ZoneMap::from_edges(max_zone + 1, &edges)
    }

    #[inline]
    pub fn zones(&self) -> usize {
        self.n
    }

    /// Shortest travel time in whole steps from `i` to `j`.
    #[inline]
    pub fn travel(&self, i: ZoneId, j: ZoneId) -> u32 {
        self.travel[i.index() * self.n + j.index()]
    }

    /// Shortest distance in kilometres from `i` to `j`.
    #[inline]
    pub fn dist(&self, i: ZoneId, j: ZoneId) -> T {
        self.dist[i.index() * self.n + j.index()]
    }
}

/// O(n^2) Dijkstra; zone counts stay small enough that a heap buys nothing.
fn dijkstra(adj: &[Vec<(usize, f64, f64)>], src: usize, weight: impl Fn(&(f64, f64)) -> f64) -> Vec<f64> {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[src] = 0.0;
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for v in 0..n {
            if !done[v] && dist[v] < best_d {
                best = v;
                best_d = dist[v];
            }
        }
        if best == usize::MAX {
            break;
        }
        done[best] = true;
        for &(to, s, k) in &adj[best] {
            let w = weight(&(s, k));
            if dist[best] + w < dist[to] {
                dist[to] = dist[best] + w;
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StopEvent {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stop {
    pub zone: ZoneId,
    pub event: StopEvent,
    pub request: RequestId,
}

/// Ordered pickup/dropoff schedule of one shared car.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutePlan<T> {
    pub stops: Vec<Stop>,
    pub total_km: T,
    pub per_member_time: BTreeMap<RequestId, u32>,
}

/// Finds the kilometre-minimal stop order serving all members.
///
/// The designated driver's origin is the first stop and their destination
/// the last; every other member is picked up before being dropped off.
/// All valid interleavings are enumerated (cars are small), ties broken by
/// the lexicographically smallest stop sequence by request id.
pub fn plan_shared_route<T: Scalar>(
    members: &[Request],
    driver: RequestId,
    zones: &ZoneMap<T>,
    capacity: usize,
) -> Result<RoutePlan<T>, CityError> {
    if members.len() > capacity {
        return Err(CityError::CapacityExceeded {
            members: members.len(),
            capacity,
        });
    }
    let driver_req = members
        .iter()
        .find(|r| r.id == driver)
        .ok_or(CityError::DriverNotMember)?;

    // Interior events: pickup and dropoff of every non-driver member,
    // ordered by request id so enumeration order is lexicographic.
    let mut others: Vec<&Request> = members.iter().filter(|r| r.id != driver).collect();
    others.sort_by_key(|r| r.id);

    // Same-corridor car: the optimal and lexicographically smallest order
    // is all pickups (id order) then all dropoffs (id order), at the direct
    // path length. This is the hot case under bursty demand.
    if members
        .iter()
        .all(|r| r.origin == driver_req.origin && r.dest == driver_req.dest)
    {
        let mut stops = vec![Stop {
            zone: driver_req.origin,
            event: StopEvent::Pickup,
            request: driver,
        }];
        stops.extend(others.iter().map(|r| Stop {
            zone: r.origin,
            event: StopEvent::Pickup,
            request: r.id,
        }));
        stops.extend(others.iter().map(|r| Stop {
            zone: r.dest,
            event: StopEvent::Dropoff,
            request: r.id,
        }));
        stops.push(Stop {
            zone: driver_req.dest,
            event: StopEvent::Dropoff,
            request: driver,
        });
        let time = zones.travel(driver_req.origin, driver_req.dest);
        return Ok(RoutePlan {
            stops,
            total_km: zones.dist(driver_req.origin, driver_req.dest),
            per_member_time: members.iter().map(|r| (r.id, time)).collect(),
        });
    }

    let mut best: Option<(T, Vec<Stop>)> = None;
    let mut seq: Vec<Stop> = Vec::with_capacity(members.len() * 2);
    seq.push(Stop {
        zone: driver_req.origin,
        event: StopEvent::Pickup,
        request: driver,
    });
    let mut picked = vec![false; others.len()];
    let mut dropped = vec![false; others.len()];
    enumerate_orders(
        &others,
        driver_req,
        driver,
        zones,
        &mut seq,
        &mut picked,
        &mut dropped,
        T::zero(),
        &mut best,
    );

    let (total_km, stops) = best.expect("at least the driver-only order exists");
    let mut per_member_time = BTreeMap::new();
    let mut elapsed = 0u32;
    let mut pickup_at: BTreeMap<RequestId, u32> = BTreeMap::new();
    for (k, stop) in stops.iter().enumerate() {
        if k > 0 {
            elapsed += zones.travel(stops[k - 1].zone, stop.zone);
        }
        match stop.event {
            StopEvent::Pickup => {
                pickup_at.insert(stop.request, elapsed);
            }
            StopEvent::Dropoff => {
                let start = pickup_at[&stop.request];
                per_member_time.insert(stop.request, elapsed - start);
            }
        }
    }
    Ok(RoutePlan {
        stops,
        total_km,
        per_member_time,
    })
}

#[allow(clippy::too_many_arguments)]
fn enumerate_orders<T: Scalar>(
    others: &[&Request],
    driver_req: &Request,
    driver: RequestId,
    zones: &ZoneMap<T>,
    seq: &mut Vec<Stop>,
    picked: &mut [bool],
    dropped: &mut [bool],
    km_so_far: T,
    best: &mut Option<(T, Vec<Stop>)>,
) {
    // Legs only add length: once a partial order is strictly worse than the
    // incumbent, no completion can win. Equal partials stay explored, so
    // lexicographic generation order still decides km ties.
    if let Some((bk, _)) = best {
        if km_so_far > *bk {
            return;
        }
    }
    if dropped.iter().all(|&d| d) {
        let km = km_so_far + zones.dist(seq.last().expect("driver pickup").zone, driver_req.dest);
        if best.as_ref().is_none_or(|(bk, _)| km < *bk) {
            let mut full = seq.clone();
            full.push(Stop {
                zone: driver_req.dest,
                event: StopEvent::Dropoff,
                request: driver,
            });
            *best = Some((km, full));
        }
        return;
    }
    for i in 0..others.len() {
        let (event, zone) = if !picked[i] {
            (StopEvent::Pickup, others[i].origin)
        } else if !dropped[i] {
            (StopEvent::Dropoff, others[i].dest)
        } else {
            continue;
        };
        match event {
            StopEvent::Pickup => picked[i] = true,
            StopEvent::Dropoff => dropped[i] = true,
        }
        let leg = zones.dist(seq.last().expect("driver pickup").zone, zone);
        seq.push(Stop {
            zone,
            event,
            request: others[i].id,
        });
        enumerate_orders(
            others,
            driver_req,
            driver,
            zones,
            seq,
            picked,
            dropped,
            km_so_far + leg,
            best,
        );
        seq.pop();
        match event {
            StopEvent::Pickup => picked[i] = false,
            StopEvent::Dropoff => dropped[i] = false,
        }
    }
}

/// Surrogate environmental benefits of a shared ride: kilometres saved
/// against everyone driving solo (CO2 and noise proxies) and cars removed
/// from the road (traffic proxy).
pub fn env_benefits<T: Scalar>(
    plan: &RoutePlan<T>,
    members: &[Request],
    zones: &ZoneMap<T>,
) -> (T, T, T) {
    let solo_km: T = members.iter().map(|r| zones.dist(r.origin, r.dest)).sum();
    let km_saved = (solo_km - plan.total_km).max(T::zero());
    let traffic = cast::<T>((members.len() - 1) as f64);
    (km_saved, km_saved, traffic)
}
