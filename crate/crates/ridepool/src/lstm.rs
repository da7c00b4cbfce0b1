//! Minimal from-scratch LSTM with one recurrent layer, a fully connected
//! output layer and a ReLU, trained by backpropagation through time.
//!
//! Parameters live in one flat vector with named slice accessors, which
//! keeps the optimiser and the finite-difference gradient check trivial.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::predictor::CountsGrid;
use crate::scalar::{cast, count, Scalar};

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CELL: usize = 3;

#[derive(Debug)]
pub enum LstmError {
    DimensionMismatch { expected: usize, got: usize },
    /// Activations left the finite range at the given sequence step.
    NumericOverflow { step: usize },
    InsufficientHistory { steps: usize, needed: usize },
    BadConfig(String),
    BadFile(String),
    Io(std::io::Error),
}

impl fmt::Display for LstmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LstmError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            LstmError::NumericOverflow { step } => {
                write!(f, "non-finite activation at sequence step {step}")
            }
            LstmError::InsufficientHistory { steps, needed } => {
                write!(f, "insufficient history: {steps} steps, need at least {needed}")
            }
            LstmError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
            LstmError::BadFile(msg) => write!(f, "bad parameter file: {msg}"),
            LstmError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for LstmError {}

impl From<std::io::Error> for LstmError {
    fn from(e: std::io::Error) -> Self {
        LstmError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmDims {
    /// Flattened grid size; also the output size.
    pub input: usize,
    pub hidden: usize,
}

impl LstmDims {
    pub fn param_count(&self) -> usize {
        let (i, h) = (self.input, self.hidden);
        4 * h * i + 4 * h * h + 4 * h + i * h + i
    }

    fn w_off(&self, gate: usize) -> usize {
        gate * self.hidden * self.input
    }

    fn u_off(&self, gate: usize) -> usize {
        4 * self.hidden * self.input + gate * self.hidden * self.hidden
    }

    fn b_off(&self, gate: usize) -> usize {
        4 * self.hidden * self.input + 4 * self.hidden * self.hidden + gate * self.hidden
    }

    fn f_off(&self) -> usize {
        4 * self.hidden * self.input + 4 * self.hidden * self.hidden + 4 * self.hidden
    }

    fn c_off(&self) -> usize {
        self.f_off() + self.input * self.hidden
    }
}

/// All weights of the network plus the count-normalisation constant the
/// training data was scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    dims: LstmDims,
    pub norm: T,
    theta: Vec<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(dims: LstmDims) -> LstmParams<T> {
        LstmParams {
            dims,
            norm: T::one(),
            theta: vec![T::zero(); dims.param_count()],
        }
    }

    /// Uniform(-k, k) initialisation with k = 1/sqrt(hidden); the forget
    /// gate bias starts at one.
    pub fn seeded(dims: LstmDims, seed: u64) -> LstmParams<T> {
        let k = 1.0 / (dims.hidden as f64).sqrt();
        let mut params = LstmParams::seeded_uniform(dims, seed, -k, k);
        let fb = dims.b_off(GATE_FORGET);
        for v in &mut params.theta[fb..fb + dims.hidden] {
            *v = T::one();
        }
        params
    }

    /// All weights drawn uniformly from `(lo, hi)`. Strictly positive
    /// ranges give gradient-check instances whose per-coordinate gradients
    /// are sums of same-signed terms, keeping them clear of the
    /// finite-difference noise floor.
    pub fn seeded_uniform(dims: LstmDims, seed: u64, lo: f64, hi: f64) -> LstmParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(dims.param_count());
        for _ in 0..dims.param_count() {
            theta.push(cast::<T>(rng.random_range(lo..hi)));
        }
        LstmParams {
            dims,
            norm: T::one(),
            theta,
        }
    }

    pub fn dims(&self) -> LstmDims {
        self.dims
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn gate_w(&self, gate: usize) -> &[T] {
        let o = self.dims.w_off(gate);
        &self.theta[o..o + self.dims.hidden * self.dims.input]
    }

    pub fn gate_u(&self, gate: usize) -> &[T] {
        let o = self.dims.u_off(gate);
        &self.theta[o..o + self.dims.hidden * self.dims.hidden]
    }

    pub fn gate_b(&self, gate: usize) -> &[T] {
        let o = self.dims.b_off(gate);
        &self.theta[o..o + self.dims.hidden]
    }

    pub fn out_w(&self) -> &[T] {
        let o = self.dims.f_off();
        &self.theta[o..o + self.dims.input * self.dims.hidden]
    }

    pub fn out_b(&self) -> &[T] {
        let o = self.dims.c_off();
        &self.theta[o..o + self.dims.input]
    }

    /// Text dump: version header with explicit dimensions, then one value
    /// per line in shortest round-trip decimal form.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), LstmError> {
        writeln!(
            w,
            "lstm-params v1 input={} hidden={} norm={}",
            self.dims.input, self.dims.hidden, self.norm
        )?;
        for v in &self.theta {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(reader: R) -> Result<LstmParams<T>, LstmError> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| LstmError::BadFile("empty parameter file".into()))??;
        let mut input = None;
        let mut hidden = None;
        let mut norm = None;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("lstm-params") || fields.next() != Some("v1") {
            return Err(LstmError::BadFile("missing lstm-params v1 header".into()));
        }
        for token in fields {
            if let Some((k, v)) = token.split_once('=') {
                match k {
                    "input" => input = v.parse::<usize>().ok(),
                    "hidden" => hidden = v.parse::<usize>().ok(),
                    "norm" => norm = v.parse::<T>().ok(),
                    _ => {}
                }
            }
        }
        let (Some(input), Some(hidden), Some(norm)) = (input, hidden, norm) else {
            return Err(LstmError::BadFile("incomplete header".into()));
        };
        let dims = LstmDims { input, hidden };
        let mut theta = Vec::with_capacity(dims.param_count());
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            theta.push(
                t.parse::<T>()
                    .map_err(|_| LstmError::BadFile(format!("bad value `{t}`")))?,
            );
        }
        if theta.len() != dims.param_count() {
            return Err(LstmError::DimensionMismatch {
                expected: dims.param_count(),
                got: theta.len(),
            });
        }
        Ok(LstmParams { dims, norm, theta })
    }
}

/// Hidden and cell state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub cell: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> LstmState<T> {
        LstmState {
            h: vec![T::zero(); hidden],
            cell: vec![T::zero(); hidden],
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// out = m (rows x cols, row-major) * v
fn matvec<T: Scalar>(m: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for c in 0..cols {
            acc += row[c] * v[c];
        }
        out[r] = acc;
    }
}

/// out += m^T (m is rows x cols) * v
fn matvec_transpose_add<T: Scalar>(m: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * v[r];
        }
    }
}

/// acc (rows x cols) += a (rows) outer b (cols)
fn outer_add<T: Scalar>(acc: &mut [T], a: &[T], b: &[T]) {
    for (r, &av) in a.iter().enumerate() {
        let row = &mut acc[r * b.len()..(r + 1) * b.len()];
        for (c, &bv) in b.iter().enumerate() {
            row[c] += av * bv;
        }
    }
}

/// Per-step activations retained for backpropagation.
struct StepCache<T> {
    x: Vec<T>,
    gi: Vec<T>,
    gf: Vec<T>,
    go: Vec<T>,
    gg: Vec<T>,
    c_prev: Vec<T>,
    c_new: Vec<T>,
    tanh_c: Vec<T>,
    h_prev: Vec<T>,
    h_new: Vec<T>,
    z: Vec<T>,
    y: Vec<T>,
}

fn forward_step<T: Scalar>(
    params: &LstmParams<T>,
    state: &LstmState<T>,
    x: &[T],
) -> Result<StepCache<T>, LstmError> {
    let d = params.dims();
    if x.len() != d.input {
        return Err(LstmError::DimensionMismatch {
            expected: d.input,
            got: x.len(),
        });
    }
    let h = d.hidden;
    let mut gates: [Vec<T>; 4] = [
        vec![T::zero(); h],
        vec![T::zero(); h],
        vec![T::zero(); h],
        vec![T::zero(); h],
    ];
    let mut tmp = vec![T::zero(); h];
    for (gate, out) in gates.iter_mut().enumerate() {
        matvec(params.gate_w(gate), h, d.input, x, out);
        matvec(params.gate_u(gate), h, h, &state.h, &mut tmp);
        let b = params.gate_b(gate);
        for k in 0..h {
            let a = out[k] + tmp[k] + b[k];
            out[k] = if gate == GATE_CELL { a.tanh() } else { sigmoid(a) };
        }
    }
    let [gi, gf, go, gg] = gates;

    let mut c_new = vec![T::zero(); h];
    let mut tanh_c = vec![T::zero(); h];
    let mut h_new = vec![T::zero(); h];
    for k in 0..h {
        c_new[k] = gf[k] * state.cell[k] + gi[k] * gg[k];
        tanh_c[k] = c_new[k].tanh();
        h_new[k] = go[k] * tanh_c[k];
    }

    let mut z = vec![T::zero(); d.input];
    matvec(params.out_w(), d.input, h, &h_new, &mut z);
    let out_b = params.out_b();
    let mut y = vec![T::zero(); d.input];
    for k in 0..d.input {
        z[k] += out_b[k];
        y[k] = z[k].max(T::zero());
    }

    Ok(StepCache {
        x: x.to_vec(),
        gi,
        gf,
        go,
        gg,
        c_prev: state.cell.clone(),
        c_new,
        tanh_c,
        h_prev: state.h.clone(),
        h_new,
        z,
        y,
    })
}

/// One recurrence step: gates, cell/hidden update, then `y = relu(F h + c)`.
pub fn forward<T: Scalar>(
    params: &LstmParams<T>,
    state: &LstmState<T>,
    x: &[T],
) -> Result<(LstmState<T>, Vec<T>), LstmError> {
    let cache = forward_step(params, state, x)?;
    Ok((
        LstmState {
            h: cache.h_new,
            cell: cache.c_new,
        },
        cache.y,
    ))
}

fn check_finite<T: Scalar>(cache: &StepCache<T>, step: usize) -> Result<(), LstmError> {
    let ok = cache.h_new.iter().chain(&cache.c_new).chain(&cache.y).all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(LstmError::NumericOverflow { step })
    }
}

/// Mean squared error over a sequence plus the full BPTT gradient, flat in
/// the parameter layout.
pub fn loss_and_grad<T: Scalar>(
    params: &LstmParams<T>,
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
) -> Result<(T, Vec<T>), LstmError> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(LstmError::DimensionMismatch {
            expected: inputs.len().max(1),
            got: targets.len(),
        });
    }
    let d = params.dims();
    let h = d.hidden;
    let mut state = LstmState::zeros(h);
    let mut caches = Vec::with_capacity(inputs.len());
    for (step, x) in inputs.iter().enumerate() {
        let cache = forward_step(params, &state, x)?;
        check_finite(&cache, step)?;
        state = LstmState {
            h: cache.h_new.clone(),
            cell: cache.c_new.clone(),
        };
        caches.push(cache);
    }

    let denom: T = count::<T>(inputs.len()) * count::<T>(d.input);
    let mut loss = T::zero();
    for (cache, target) in caches.iter().zip(targets) {
        if target.len() != d.input {
            return Err(LstmError::DimensionMismatch {
                expected: d.input,
                got: target.len(),
            });
        }
        for k in 0..d.input {
            let e = cache.y[k] - target[k];
            loss += e * e;
        }
    }
    loss /= denom;

    let mut grads = vec![T::zero(); d.param_count()];
    let two = cast::<T>(2.0);
    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    for (t, cache) in caches.iter().enumerate().rev() {
        // output layer
        let mut dz = vec![T::zero(); d.input];
        for k in 0..d.input {
            let dy = two * (cache.y[k] - targets[t][k]) / denom;
            dz[k] = if cache.z[k] > T::zero() { dy } else { T::zero() };
        }
        {
            let fo = d.f_off();
            outer_add(&mut grads[fo..fo + d.input * h], &dz, &cache.h_new);
            let co = d.c_off();
            for k in 0..d.input {
                grads[co + k] += dz[k];
            }
        }
        let mut dh = dh_next.clone();
        matvec_transpose_add(params.out_w(), d.input, h, &dz, &mut dh);

        let mut da = [
            vec![T::zero(); h],
            vec![T::zero(); h],
            vec![T::zero(); h],
            vec![T::zero(); h],
        ];
        let mut dc = vec![T::zero(); h];
        for k in 0..h {
            let d_o = dh[k] * cache.tanh_c[k];
            let d_tanh = dh[k] * cache.go[k];
            dc[k] = d_tanh * (T::one() - cache.tanh_c[k] * cache.tanh_c[k]) + dc_next[k];
            let d_i = dc[k] * cache.gg[k];
            let d_f = dc[k] * cache.c_prev[k];
            let d_g = dc[k] * cache.gi[k];
            da[GATE_INPUT][k] = d_i * cache.gi[k] * (T::one() - cache.gi[k]);
            da[GATE_FORGET][k] = d_f * cache.gf[k] * (T::one() - cache.gf[k]);
            da[GATE_OUTPUT][k] = d_o * cache.go[k] * (T::one() - cache.go[k]);
            da[GATE_CELL][k] = d_g * (T::one() - cache.gg[k] * cache.gg[k]);
        }

        let mut dh_prev = vec![T::zero(); h];
        for gate in 0..4 {
            let wo = d.w_off(gate);
            outer_add(&mut grads[wo..wo + h * d.input], &da[gate], &cache.x);
            let uo = d.u_off(gate);
            outer_add(&mut grads[uo..uo + h * h], &da[gate], &cache.h_prev);
            let bo = d.b_off(gate);
            for k in 0..h {
                grads[bo + k] += da[gate][k];
            }
            matvec_transpose_add(params.gate_u(gate), h, h, &da[gate], &mut dh_prev);
        }
        for k in 0..h {
            dc_next[k] = dc[k] * cache.gf[k];
        }
        dh_next = dh_prev;
    }
    Ok((loss, grads))
}

fn loss_only<T: Scalar>(
    params: &LstmParams<T>,
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
) -> Result<T, LstmError> {
    let d = params.dims();
    let mut state = LstmState::zeros(d.hidden);
    let mut loss = T::zero();
    for (step, (x, target)) in inputs.iter().zip(targets).enumerate() {
        let cache = forward_step(params, &state, x)?;
        check_finite(&cache, step)?;
        for k in 0..d.input {
            let e = cache.y[k] - target[k];
            loss += e * e;
        }
        state = LstmState {
            h: cache.h_new,
            cell: cache.c_new,
        };
    }
    Ok(loss / (count::<T>(inputs.len()) * count::<T>(d.input)))
}

/// Per-coordinate relative errors `|a - n| / max(|a|, |n|, 1e-12)` between
/// the analytic gradient and central finite differences
/// `(L(theta + eps) - L(theta - eps)) / 2 eps`, on a seeded random
/// input/target sequence. Inputs are drawn from `(0, 1)`; targets from
/// `(1.5, 2.5)`, above any reachable output, so the loss pulls every active
/// coordinate in a consistent direction.
pub fn gradient_check_errors<T: Scalar>(
    params: &LstmParams<T>,
    window: usize,
    epsilon: T,
    seed: u64,
) -> Result<Vec<T>, LstmError> {
    let d = params.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| -> Vec<T> {
        (0..d.input).map(|_| cast::<T>(rng.random_range(lo..hi))).collect()
    };
    let inputs: Vec<Vec<T>> = (0..window).map(|_| draw(0.0, 1.0)).collect();
    let targets: Vec<Vec<T>> = (0..window).map(|_| draw(1.5, 2.5)).collect();

    let (_, analytic) = loss_and_grad(params, &inputs, &targets)?;
    let mut probe = params.clone();
    let mut errors = Vec::with_capacity(analytic.len());
    let floor = cast::<T>(1e-12);
    for k in 0..probe.theta().len() {
        let orig = probe.theta()[k];
        probe.theta_mut()[k] = orig + epsilon;
        let up = loss_only(&probe, &inputs, &targets)?;
        probe.theta_mut()[k] = orig - epsilon;
        let down = loss_only(&probe, &inputs, &targets)?;
        probe.theta_mut()[k] = orig;
        let numeric = (up - down) / (cast::<T>(2.0) * epsilon);
        let denom = analytic[k].abs().max(numeric.abs()).max(floor);
        errors.push((analytic[k] - numeric).abs() / denom);
    }
    Ok(errors)
}

/// Maximum relative error of [`gradient_check_errors`] over all coordinates.
pub fn gradient_check<T: Scalar>(
    params: &LstmParams<T>,
    window: usize,
    epsilon: T,
    seed: u64,
) -> Result<T, LstmError> {
    Ok(gradient_check_errors(params, window, epsilon, seed)?
        .into_iter()
        .fold(T::zero(), T::max))
}

/// Training hyperparameters; the optimiser is Adam with the usual
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// BPTT window length in steps.
    pub window: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Windows per optimiser step.
    pub batch: usize,
    pub steps_per_day: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 16,
            learning_rate: 0.02,
            epochs: 40,
            batch: 8,
            steps_per_day: 1440,
            seed: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains next-step count prediction on a per-step grid history with Adam
/// over sliding windows. Inputs and targets are the history scaled by its
/// maximum count, which is stored in the returned parameters.
pub fn train<T: Scalar>(
    init: LstmParams<T>,
    history: &[CountsGrid],
    cfg: &TrainConfig,
) -> Result<(LstmParams<T>, Vec<(usize, T)>), LstmError> {
    if cfg.window < 1 || cfg.batch < 1 || cfg.learning_rate <= 0.0 {
        return Err(LstmError::BadConfig("window, batch and learning_rate must be positive".into()));
    }
    let needed = (2 * cfg.steps_per_day) as usize;
    if history.len() < needed.max(cfg.window + 1) {
        return Err(LstmError::InsufficientHistory {
            steps: history.len(),
            needed: needed.max(cfg.window + 1),
        });
    }
    let d = init.dims();
    let n2 = history[0].zones() * history[0].zones();
    if n2 != d.input {
        return Err(LstmError::DimensionMismatch {
            expected: d.input,
            got: n2,
        });
    }

    let max_count = history.iter().map(CountsGrid::max_count).max().unwrap_or(0);
    let norm = cast::<T>(f64::from(max_count.max(1)));
    let scaled: Vec<Vec<T>> = history.iter().map(|g| g.to_scaled_vec(norm)).collect();

    let mut params = init;
    params.norm = norm;
    let mut m = vec![T::zero(); d.param_count()];
    let mut v = vec![T::zero(); d.param_count()];
    let mut adam_t = 0u32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cast::<T>(cfg.learning_rate);
    let b1 = cast::<T>(ADAM_BETA1);
    let b2 = cast::<T>(ADAM_BETA2);
    let eps = cast::<T>(ADAM_EPS);

    let mut starts: Vec<usize> = (0..scaled.len() - cfg.window).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Fisher-Yates over window starts, seeded, so runs are reproducible.
        for i in (1..starts.len()).rev() {
            let j = rng.random_range(0..=i);
            starts.swap(i, j);
        }
        let mut epoch_loss = T::zero();
        let mut windows = 0usize;
        for chunk in starts.chunks(cfg.batch) {
            let results: Vec<(T, Vec<T>)> = chunk
                .par_iter()
                .map(|&s| {
                    let inputs = scaled[s..s + cfg.window].to_vec();
                    let targets = scaled[s + 1..s + cfg.window + 1].to_vec();
                    loss_and_grad(&params, &inputs, &targets)
                })
                .collect::<Result<_, _>>()?;
            let scale = cast::<T>(1.0 / chunk.len() as f64);
            let mut grad = vec![T::zero(); d.param_count()];
            for (loss, g) in &results {
                epoch_loss += *loss;
                windows += 1;
                for (acc, &gv) in grad.iter_mut().zip(g) {
                    *acc += gv * scale;
                }
            }
            adam_t += 1;
            let bc1 = T::one() - b1.powi(adam_t as i32);
            let bc2 = T::one() - b2.powi(adam_t as i32);
            let theta = params.theta_mut();
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * grad[k];
                v[k] = b2 * v[k] + (T::one() - b2) * grad[k] * grad[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        curve.push((epoch, epoch_loss / count::<T>(windows.max(1))));
    }
    Ok((params, curve))
}

/// Rounds a raw network output back into counts: half-up rounding after
/// rescaling, clamped at zero, diagonal forced to zero.
pub fn output_to_grid<T: Scalar>(y: &[T], norm: T, zones: usize) -> CountsGrid {
    let mut grid = CountsGrid::zeros(zones);
    for i in 0..zones {
        for j in 0..zones {
            if i == j {
                continue;
            }
            let raw = (y[i * zones + j] * norm).max(T::zero());
            let rounded = (raw + cast::<T>(0.5)).floor();
            grid.set(i, j, rounded.to_u32().unwrap_or(0));
        }
    }
    grid
}
