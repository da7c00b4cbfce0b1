//! Experiment driver: ingest real trip data or synthesise demand, train the
//! LSTM predictor, and run or sweep simulations, emitting plot-ready CSVs.

mod config;
mod recipe;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ridepool::engine::{self, compare_runs, RunReport};
use ridepool::ingest::{
    build_stream, parse_trip_records, synth_stream, RequestStream, StreamPolicy, ZoneLookup,
};
use ridepool::lstm::{self, LstmDims, TrainConfig};
use ridepool::model::TimeStep;
use ridepool::predictor::{
    CountsGrid, LstmPredictor, NonePredictor, PerfectPredictor, Predictor, SmapeAccumulator,
    YesterdayPredictor,
};
use ridepool::rng::mix_seed;
use ridepool::LstmParams64;

#[derive(Parser)]
#[command(
    name = "ridepool",
    about = "Online ridesharing optimisation with pluggable request predictors",
    long_about = "Per-step candidate generation, weighted set packing and look-ahead \
commitment over a request stream. Set RIDEPOOL_LOG=info (or debug) for verbosity."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a TLC yellow-taxi CSV into a canonical stream file
    Ingest(IngestArgs),
    /// Generate a synthetic multi-day stream with bursty hotspot demand
    Synth(SynthArgs),
    /// Train the LSTM predictor on a stream and write a parameter file
    Train(TrainArgs),
    /// Run one configuration over a stream, one run per seed
    Simulate(SimulateArgs),
    /// Run baseline and treatments per day and emit comparison tables
    Sweep(SweepArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// TLC CSV with tpep_pickup_datetime, PULocationID, DOLocationID columns
    #[arg(long)]
    input: PathBuf,
    /// Day to keep, e.g. 2019-06-03
    #[arg(long)]
    day: NaiveDate,
    /// Lookup file with lines `tlc_location_id zone_index`
    #[arg(long)]
    zone_lookup: PathBuf,
    /// Output canonical stream file
    #[arg(long)]
    out: PathBuf,
    /// Probability that a request owns a car [default: 0.5]
    #[arg(long, default_value_t = 0.5)]
    driver_prob: f64,
    /// Maximum assignment wait in steps [default: 5]
    #[arg(long, default_value_t = 5)]
    max_wait: u32,
    /// Seconds per simulation step [default: 60]
    #[arg(long, default_value_t = 60)]
    step_seconds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Zone grid, e.g. grid:5x5 (hotspots need grid coordinates)
    #[arg(long, default_value = "grid:5x5")]
    zones: String,
    #[arg(long, default_value_t = 7)]
    days: u32,
    #[arg(long, default_value_t = 1440)]
    steps_per_day: u32,
    /// Approximate total requests per day
    #[arg(long, default_value_t = 200.0)]
    requests_per_day: f64,
    /// Number of hot origin-destination cells
    #[arg(long, default_value_t = 4)]
    hotspots: usize,
    /// Steps between demand bursts
    #[arg(long, default_value_t = 12)]
    burst_every: u32,
    /// Length of each burst in steps
    #[arg(long, default_value_t = 3)]
    burst_len: u32,
    /// Activate one corridor per burst window round-robin instead of all
    #[arg(long, default_value_t = false)]
    rotate_hotspots: bool,
    /// poisson or exact counts
    #[arg(long, value_enum, default_value_t = NoiseArg::Poisson)]
    noise: NoiseArg,
    /// Rate multiplier on weekend days (day 6 and 7 of each week)
    #[arg(long, default_value_t = 1.0)]
    weekend_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    driver_prob: f64,
    #[arg(long, default_value_t = 5)]
    max_wait: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stream label written into the file [default: synth-s<seed>]
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Poisson,
    /// Counts equal the rounded rates, identical on matching days
    #[value(alias = "none")]
    Exact,
}

#[derive(Args)]
struct TrainArgs {
    /// Canonical stream file with at least two days of history
    #[arg(long)]
    stream: PathBuf,
    /// Output parameter file
    #[arg(long)]
    out: PathBuf,
    /// Hidden size; 0 means zones^2 as in the reference architecture
    #[arg(long, default_value_t = 0)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional `epoch,loss` CSV
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    stream: PathBuf,
    /// grid:RxC or an edge file `zone_a zone_b steps km`
    #[arg(long)]
    zones: String,
    /// Optional key=value config file (see README for keys)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorArg::None)]
    predictor: PredictorArg,
    /// Forecast horizon f; 0 disables prediction
    #[arg(long, default_value_t = 0)]
    horizon: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated seed list overriding --seed
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// LSTM parameter file (required for --predictor lstm)
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output directory for per-step CSVs and summaries
    #[arg(long)]
    out: PathBuf,
    /// Count solver work deterministically instead of wall-clock time
    #[arg(long, default_value_t = false)]
    deterministic_budget: bool,
    /// Also run the no-prediction baseline and report the improvement
    #[arg(long, default_value_t = false)]
    compare_baseline: bool,
    /// Dump `step,i,j,predicted,actual` rows for accuracy audits
    #[arg(long, default_value_t = false)]
    dump_forecasts: bool,
    /// Dump `step,members,value,provisional` rows of every candidate
    #[arg(long, default_value_t = false)]
    dump_candidates: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Multi-day canonical stream file
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    zones: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Predictors to sweep, e.g. perfect,yesterday
    #[arg(long, value_delimiter = ',', default_value = "perfect")]
    predictors: Vec<PredictorArg>,
    /// Forecast horizons to sweep, e.g. 1,2,5
    #[arg(long, value_delimiter = ',', default_value = "1")]
    horizons: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for independent runs; 0 uses all cores
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value_t = false)]
    deterministic_budget: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PredictorArg {
    None,
    Perfect,
    Yesterday,
    Lstm,
}

impl PredictorArg {
    fn name(self) -> &'static str {
        match self {
            PredictorArg::None => "none",
            PredictorArg::Perfect => "perfect",
            PredictorArg::Yesterday => "yesterday",
            PredictorArg::Lstm => "lstm",
        }
    }
}

/// Runtime-selected predictor behind the engine's predictor contract.
enum AnyPredictor {
    None(NonePredictor),
    Perfect(PerfectPredictor),
    Yesterday(YesterdayPredictor),
    Lstm(Box<LstmPredictor<f64>>),
}

impl Predictor<f64> for AnyPredictor {
    fn name(&self) -> &'static str {
        match self {
            AnyPredictor::None(p) => Predictor::<f64>::name(p),
            AnyPredictor::Perfect(p) => Predictor::<f64>::name(p),
            AnyPredictor::Yesterday(p) => Predictor::<f64>::name(p),
            AnyPredictor::Lstm(p) => p.name(),
        }
    }

    fn observe(&mut self, step: TimeStep, realized: &CountsGrid) {
        match self {
            AnyPredictor::None(p) => Predictor::<f64>::observe(p, step, realized),
            AnyPredictor::Perfect(p) => Predictor::<f64>::observe(p, step, realized),
            AnyPredictor::Yesterday(p) => Predictor::<f64>::observe(p, step, realized),
            AnyPredictor::Lstm(p) => p.observe(step, realized),
        }
    }

    fn forecast(
        &self,
        now: TimeStep,
        f: u32,
        last: TimeStep,
    ) -> std::result::Result<Vec<ridepool::predictor::Forecast>, ridepool::predictor::PredictorError>
    {
        match self {
            AnyPredictor::None(p) => Predictor::<f64>::forecast(p, now, f, last),
            AnyPredictor::Perfect(p) => Predictor::<f64>::forecast(p, now, f, last),
            AnyPredictor::Yesterday(p) => Predictor::<f64>::forecast(p, now, f, last),
            AnyPredictor::Lstm(p) => p.forecast(now, f, last),
        }
    }
}

fn load_lstm_params(path: Option<&Path>) -> Result<LstmParams64> {
    let path = path.ok_or_else(|| anyhow!("--predictor lstm requires --params <file>"))?;
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(LstmParams64::load(BufReader::new(file))?)
}

/// Builds a predictor for one run. `history` carries the days preceding the
/// simulated stream (empty for cold starts); `target` is the stream the run
/// will execute, which only the perfect predictor may see.
fn build_predictor(
    kind: PredictorArg,
    target: &RequestStream,
    history: &[RequestStream],
    params: Option<&LstmParams64>,
) -> Result<AnyPredictor> {
    Ok(match kind {
        PredictorArg::None => AnyPredictor::None(NonePredictor),
        PredictorArg::Perfect => AnyPredictor::Perfect(PerfectPredictor::new(target)),
        PredictorArg::Yesterday => {
            let mut p = YesterdayPredictor::new(target.zones, target.steps_per_day);
            for day in history {
                p.warm(day);
            }
            AnyPredictor::Yesterday(p)
        }
        PredictorArg::Lstm => {
            let params = params.ok_or_else(|| anyhow!("lstm predictor needs trained parameters"))?;
            let mut p = LstmPredictor::new(params.clone(), target.zones)?;
            for day in history {
                p.warm(day)?;
            }
            AnyPredictor::Lstm(Box::new(p))
        }
    })
}

fn read_stream(path: &Path) -> Result<RequestStream> {
    let file = fs::File::open(path).with_context(|| format!("opening stream {}", path.display()))?;
    Ok(RequestStream::read_from(BufReader::new(file))?)
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let lookup_file = fs::File::open(&args.zone_lookup)
        .with_context(|| format!("opening zone lookup {}", args.zone_lookup.display()))?;
    let lookup = ZoneLookup::from_text(BufReader::new(lookup_file))?;
    let input = fs::File::open(&args.input)
        .with_context(|| format!("opening input {}", args.input.display()))?;
    let (records, report) = parse_trip_records(input, args.day, &lookup)?;
    let policy = StreamPolicy {
        driver_prob: args.driver_prob,
        max_wait: args.max_wait,
        step_seconds: args.step_seconds,
        seed: args.seed,
    };
    let stream = build_stream(&records, &policy, &lookup, args.day.to_string())?;
    write_file(&args.out, |w| Ok(stream.write_to(w)?))?;
    println!(
        "kept {} records; skipped {} (malformed {}, unmapped {}, same zone {}); other days {}",
        report.kept,
        report.skipped(),
        report.malformed,
        report.unmapped,
        report.same_zone,
        report.other_day
    );
    println!("wrote {} requests to {}", stream.total_requests(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = recipe::synth_config(&args)?;
    let stream = synth_stream(&cfg)?;
    write_file(&args.out, |w| Ok(stream.write_to(w)?))?;
    println!(
        "wrote {} requests over {} days ({} zones) to {}",
        stream.total_requests(),
        args.days,
        stream.zones,
        args.out.display()
    );
    Ok(())
}

fn stream_step_grids(stream: &RequestStream, upto: u32) -> Vec<CountsGrid> {
    (1..=upto)
        .map(|s| CountsGrid::from_requests(stream.arrivals(TimeStep(s)), stream.zones))
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let stream = read_stream(&args.stream)?;
    let days = stream.days();
    if days < 2 {
        bail!("training needs at least 2 days of history, stream has {days}");
    }
    let train_days = if days >= 3 { days - 1 } else { days };
    let holdout_day = days;
    let train_steps = train_days * stream.steps_per_day;
    let history = stream_step_grids(&stream, train_steps);

    let n2 = stream.zones * stream.zones;
    let hidden = if args.hidden == 0 { n2 } else { args.hidden };
    let dims = LstmDims { input: n2, hidden };
    let cfg = TrainConfig {
        window: args.window,
        learning_rate: args.lr,
        epochs: args.epochs,
        batch: args.batch,
        steps_per_day: stream.steps_per_day,
        seed: args.seed,
    };
    info!("training {}x{} lstm on {} steps", dims.input, dims.hidden, history.len());
    let init = LstmParams64::seeded(dims, args.seed);
    let (params, curve) = lstm::train(init, &history, &cfg)?;
    write_file(&args.out, |w| Ok(params.save(w)?))?;
    if let Some(path) = &args.loss_curve {
        write_file(path, |w| {
            writeln!(w, "epoch,loss")?;
            for (epoch, loss) in &curve {
                writeln!(w, "{epoch},{loss}")?;
            }
            Ok(())
        })?;
    }
    let final_loss = curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN);

    // Hold-out accuracy: warm on the training days, then score one-step
    // forecasts across the last day.
    let mut predictor = LstmPredictor::new(params, stream.zones)?;
    for d in 1..holdout_day.min(train_days + 1) {
        predictor.warm(&stream.day_slice(d)?)?;
    }
    let holdout = stream.day_slice(holdout_day)?;
    let mut acc = SmapeAccumulator::new();
    for s in 1..=holdout.horizon {
        let realized = CountsGrid::from_requests(holdout.arrivals(TimeStep(s)), holdout.zones);
        if s > 1 {
            let fs = predictor.forecast(TimeStep(s - 1), 1, TimeStep(holdout.horizon))?;
            if let Some(f) = fs.first() {
                acc.record(&f.grid, &realized);
            }
        }
        predictor.observe(TimeStep(s), &realized);
    }
    match acc.finish() {
        Some((cell, step_total)) => println!(
            "final training loss {final_loss}; held-out day {holdout_day} SMAPE: cell {cell:.2}%, step-total {step_total:.2}%"
        ),
        None => println!("final training loss {final_loss}; held-out day empty"),
    }
    println!("wrote parameters to {}", args.out.display());
    Ok(())
}

fn dump_forecast_csv(report: &RunReport<f64>, path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "step,i,j,predicted,actual")?;
        for s in &report.steps {
            if let Some((pred, truth)) = &s.prediction {
                for (i, j, p) in pred.cells() {
                    let g = truth.get(i, j);
                    if p > 0 || g > 0 {
                        writeln!(w, "{},{},{},{},{}", s.step, i, j, p, g)?;
                    }
                }
            }
        }
        Ok(())
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let stream = read_stream(&args.stream)?;
    let zones = config::load_zones(&args.zones)?;
    let mut base_cfg = config::sim_config(args.config.as_deref(), args.deterministic_budget)?;
    base_cfg.forecast_horizon = args.horizon;
    base_cfg.driver_prob = stream.driver_prob;
    if args.predictor == PredictorArg::None && args.horizon > 0 {
        bail!("--horizon {} needs a predictor; pick perfect, yesterday or lstm", args.horizon);
    }
    let lstm_params = if args.predictor == PredictorArg::Lstm {
        Some(load_lstm_params(args.params.as_deref())?)
    } else {
        None
    };
    let seeds = if args.seeds.is_empty() { vec![args.seed] } else { args.seeds.clone() };

    fs::create_dir_all(&args.out)?;
    let mut improvements = Vec::new();
    for &seed in &seeds {
        let mut cfg = base_cfg.clone();
        cfg.seed = seed;
        cfg.record_predictions = args.dump_forecasts;
        cfg.record_candidates = args.dump_candidates;
        let predictor = build_predictor(args.predictor, &stream, &[], lstm_params.as_ref())?;
        let report = engine::run(&stream, cfg.clone(), &zones, predictor)?;
        write_file(&args.out.join(format!("steps_seed{seed}.csv")), |w| {
            Ok(report.write_steps_csv(w)?)
        })?;
        write_file(&args.out.join(format!("summary_seed{seed}.json")), |w| {
            serde_json::to_writer_pretty(&mut *w, &report.summary())?;
            writeln!(w)?;
            Ok(())
        })?;
        if args.dump_forecasts {
            dump_forecast_csv(&report, &args.out.join(format!("forecasts_seed{seed}.csv")))?;
        }
        if args.dump_candidates {
            write_file(&args.out.join(format!("candidates_seed{seed}.csv")), |w| {
                writeln!(w, "step,members,value,provisional")?;
                for s in &report.steps {
                    for c in &s.candidates {
                        let members: Vec<String> =
                            c.members.iter().map(|m| m.value().to_string()).collect();
                        writeln!(w, "{},{},{},{}", s.step, members.join("+"), c.value, u8::from(c.provisional))?;
                    }
                }
                Ok(())
            })?;
        }
        println!(
            "seed {seed}: total reward {:.4}, served {}/{} requests, avg pool {:.2}",
            report.total_reward, report.served_requests, report.arrivals, report.avg_pool_size
        );
        if args.compare_baseline {
            let mut bcfg = base_cfg.clone();
            bcfg.seed = seed;
            bcfg.forecast_horizon = 0;
            let baseline = engine::run(&stream, bcfg, &zones, NonePredictor)?;
            match compare_runs(&baseline, &report)? {
                Some(imp) => {
                    println!(
                        "seed {seed}: improvement over no-prediction baseline {imp:+.3}% ({:.4} -> {:.4})",
                        baseline.total_reward, report.total_reward
                    );
                    improvements.push((seed, baseline.total_reward, report.total_reward, Some(imp)));
                }
                None => {
                    println!("seed {seed}: baseline reward is zero, improvement undefined");
                    improvements.push((seed, baseline.total_reward, report.total_reward, None));
                }
            }
        }
    }
    if args.compare_baseline {
        write_file(&args.out.join("compare.csv"), |w| {
            writeln!(w, "seed,baseline_reward,treatment_reward,improvement_pct")?;
            for (seed, base, treat, imp) in &improvements {
                match imp {
                    Some(v) => writeln!(w, "{seed},{base},{treat},{v}")?,
                    None => writeln!(w, "{seed},{base},{treat},NA")?,
                }
            }
            Ok(())
        })?;
        let defined: Vec<f64> = improvements.iter().filter_map(|&(_, _, _, i)| i).collect();
        if !defined.is_empty() {
            println!(
                "mean improvement over {} seeds: {:+.3}%",
                defined.len(),
                defined.iter().sum::<f64>() / defined.len() as f64
            );
        }
    }
    Ok(())
}

const WEEKDAY_LABELS: [&str; 7] = ["M", "T", "W", "T2", "F", "S", "S2"];

fn weekday(day: u32) -> (&'static str, bool) {
    let idx = ((day - 1) % 7) as usize;
    (WEEKDAY_LABELS[idx], idx >= 5)
}

struct SweepRun {
    day: u32,
    column: String,
    report: RunReport<f64>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let stream = read_stream(&args.stream)?;
    let zones = config::load_zones(&args.zones)?;
    let base_cfg = config::sim_config(args.config.as_deref(), args.deterministic_budget)?;
    let days = stream.days();
    if days < 1 {
        bail!("stream has no days to sweep");
    }
    let lstm_params = if args.predictors.contains(&PredictorArg::Lstm) {
        Some(load_lstm_params(args.params.as_deref())?)
    } else {
        None
    };
    for &kind in &args.predictors {
        if kind == PredictorArg::None {
            bail!("the baseline is implicit; sweep predictors must be perfect, yesterday or lstm");
        }
    }
    for &f in &args.horizons {
        if f == 0 || f > base_cfg.default_max_wait {
            bail!("forecast horizons must lie in [1, max_wait={}]", base_cfg.default_max_wait);
        }
    }
    if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global()
            .ok();
    }

    // (day, predictor, horizon) grid; 0 encodes the per-day baseline.
    let mut plan: Vec<(u32, Option<(PredictorArg, u32)>)> = Vec::new();
    for day in 1..=days {
        plan.push((day, None));
        for &kind in &args.predictors {
            for &f in &args.horizons {
                plan.push((day, Some((kind, f))));
            }
        }
    }

    use rayon::prelude::*;
    let runs: Vec<Result<SweepRun>> = plan
        .par_iter()
        .map(|&(day, treatment)| {
            let day_stream = stream.day_slice(day)?;
            let mut cfg = base_cfg.clone();
            cfg.seed = mix_seed(args.seed, u64::from(day));
            cfg.driver_prob = stream.driver_prob;
            let (column, predictor) = match treatment {
                None => {
                    cfg.forecast_horizon = 0;
                    ("baseline".to_string(), AnyPredictor::None(NonePredictor))
                }
                Some((kind, f)) => {
                    cfg.forecast_horizon = f;
                    let history: Vec<RequestStream> = match kind {
                        PredictorArg::Perfect | PredictorArg::None => Vec::new(),
                        PredictorArg::Yesterday => {
                            if day >= 2 {
                                vec![stream.day_slice(day - 1)?]
                            } else {
                                Vec::new()
                            }
                        }
                        PredictorArg::Lstm => (1..day)
                            .map(|d| stream.day_slice(d))
                            .collect::<std::result::Result<_, _>>()?,
                    };
                    (
                        format!("{}_f{}", kind.name(), f),
                        build_predictor(kind, &day_stream, &history, lstm_params.as_ref())?,
                    )
                }
            };
            let report = engine::run(&day_stream, cfg, &zones, predictor)
                .with_context(|| format!("day {day}, configuration {column}"))?;
            Ok(SweepRun { day, column, report })
        })
        .collect();

    let mut failures = Vec::new();
    let mut ok_runs = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        match r {
            Ok(run) => ok_runs.push(run),
            Err(e) => failures.push(format!("day {} {:?}: {e:#}", plan[i].0, plan[i].1)),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        bail!("{} of {} sweep runs failed", failures.len(), plan.len());
    }

    let columns: Vec<String> = args
        .predictors
        .iter()
        .flat_map(|k| args.horizons.iter().map(move |f| format!("{}_f{}", k.name(), f)))
        .collect();
    let find = |day: u32, column: &str| -> &RunReport<f64> {
        &ok_runs
            .iter()
            .find(|r| r.day == day && r.column == column)
            .expect("complete plan")
            .report
    };

    fs::create_dir_all(&args.out)?;
    write_file(&args.out.join("improvement.csv"), |w| {
        writeln!(w, "day,weekday,is_weekend,{}", columns.join(","))?;
        for day in 1..=days {
            let (label, weekend) = weekday(day);
            let baseline = find(day, "baseline");
            let cells: Vec<String> = columns
                .iter()
                .map(|c| match compare_runs(baseline, find(day, c)) {
                    Ok(Some(v)) => v.to_string(),
                    Ok(None) => "NA".to_string(),
                    Err(e) => panic!("comparing {c}: {e}"),
                })
                .collect();
            writeln!(w, "{day},{label},{},{}", u8::from(weekend), cells.join(","))?;
        }
        Ok(())
    })?;

    write_file(&args.out.join("pool_size.csv"), |w| {
        writeln!(w, "day,weekday,is_weekend,baseline,{}", columns.join(","))?;
        for day in 1..=days {
            let (label, weekend) = weekday(day);
            let mut cells = vec![find(day, "baseline").avg_pool_size.to_string()];
            cells.extend(columns.iter().map(|c| find(day, c).avg_pool_size.to_string()));
            writeln!(w, "{day},{label},{},{}", u8::from(weekend), cells.join(","))?;
        }
        Ok(())
    })?;

    write_file(&args.out.join("smape.csv"), |w| {
        writeln!(w, "day,weekday,is_weekend,{}", columns.join(","))?;
        for day in 1..=days {
            let (label, weekend) = weekday(day);
            let cells: Vec<String> = columns
                .iter()
                .map(|c| {
                    find(day, c)
                        .smape_cell
                        .map_or("NA".to_string(), |v| v.to_string())
                })
                .collect();
            writeln!(w, "{day},{label},{},{}", u8::from(weekend), cells.join(","))?;
        }
        Ok(())
    })?;

    write_file(&args.out.join("runs.json"), |w| {
        let summaries: Vec<_> = ok_runs.iter().map(|r| r.report.summary()).collect();
        serde_json::to_writer_pretty(&mut *w, &summaries)?;
        writeln!(w)?;
        Ok(())
    })?;

    for column in &columns {
        let imps: Vec<f64> = (1..=days)
            .filter_map(|d| compare_runs(find(d, "baseline"), find(d, column)).ok().flatten())
            .collect();
        if imps.is_empty() {
            println!("{column}: no defined improvements");
        } else {
            println!(
                "{column}: mean improvement {:+.3}% over {} days",
                imps.iter().sum::<f64>() / imps.len() as f64,
                imps.len()
            );
        }
    }
    println!("wrote improvement.csv, pool_size.csv, smape.csv, runs.json to {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RIDEPOOL_LOG")).init();
    match Cli::parse().command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}
