//! `heteroplan`: plan, simulate and check heterogeneous pipeline-parallel training.
//!
//! Exit status: 0 on success, 1 when no feasible plan exists (or `validate`
//! finds a disagreement), 2 on input errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use heteroplan_core::comm::CommConfig;
use heteroplan_core::cost::{check_plan_feasibility, estimate_iteration_time, CostBreakdown};
use heteroplan_core::instances::random_instance;
use heteroplan_core::io::{self, load_cluster, load_comm, load_plan, load_profile, load_workload};
use heteroplan_core::metrics::{hetero_speedup_ratio, mean_relative_error, parse_series, series_values};
use heteroplan_core::oracle::{brute_force_oracle, OracleLimits};
use heteroplan_core::plan::ParallelPlan;
use heteroplan_core::presets;
use heteroplan_core::profile::{synthesize_profile, ProfileTable, SyntheticProfileParams};
use heteroplan_core::search::{
    search_plan_with, two_stage_search, SearchError, SearchOptions, SearchStage, DEFAULT_GROUP_SIZE,
};
use heteroplan_core::sim::{simulate_iteration, trace_metrics};
use heteroplan_core::trace::export_trace;
use heteroplan_core::{ClusterSpec, WorkloadSpec};

const AFTER_HELP: &str = "All input and output files are JSON objects with \"schema\": 1.";

#[derive(Parser)]
#[command(name = "heteroplan", version, about, after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search the best plan for a cluster, profile and workload.
    Plan(PlanArgs),
    /// Simulate one 1F1B iteration of a plan.
    Simulate(SimulateArgs),
    /// Compare the search against exhaustive enumeration on a small instance.
    Validate(ValidateArgs),
    /// Throughput and alignment metrics over delimited text files.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Write a synthetic profile (and optionally its cluster).
    ProfileGen(ProfileGenArgs),
    /// Write a seeded random instance: cluster.json, profile.json, workload.json.
    InstanceGen(InstanceGenArgs),
}

#[derive(Args)]
struct InputFiles {
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    workload: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    input: InputFiles,
    /// Refine the plan by splitting chip types into groups.
    #[arg(long)]
    two_stage: bool,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    /// Bubble coefficient; overrides the workload file. 1 for 1F1B.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Plan output file.
    #[arg(long, default_value = "plan.json")]
    out: PathBuf,
    /// Cost breakdown output file.
    #[arg(long)]
    cost_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    cluster: PathBuf,
    /// Transfer settings; transfers are free when omitted.
    #[arg(long)]
    comm: Option<PathBuf>,
    /// Overrides the overlap fraction of the comm file.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Metrics output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Generate the instance from this seed instead of reading files.
    #[arg(long, conflicts_with_all = ["cluster", "profile", "workload"])]
    seed: Option<u64>,
    #[arg(long, requires_all = ["profile", "workload"])]
    cluster: Option<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Heterogeneous throughput over the summed homogeneous baselines.
    SpeedupRatio {
        /// Tokens per chip per second on the heterogeneous cluster.
        #[arg(long)]
        hetero_tgs: f64,
        /// Rows of `chips, tgs`, one per chip type.
        #[arg(long)]
        baselines: PathBuf,
        /// Defaults to the sum of baseline chip counts.
        #[arg(long)]
        total_chips: Option<usize>,
    },
    /// Mean relative error between two `iteration, value` series.
    Mre {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Report whether the error is below this fraction.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Args)]
struct ProfileGenArgs {
    /// Synthetic profile parameters (JSON).
    #[arg(long, requires = "chip", conflicts_with = "preset")]
    params: Option<PathBuf>,
    /// Chip name for --params.
    #[arg(long)]
    chip: Option<String>,
    /// Calibrated chip as LETTER:COUNT, e.g. A:256. Repeatable.
    #[arg(long, value_parser = parse_preset)]
    preset: Vec<(char, usize)>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the cluster of the presets.
    #[arg(long, requires = "preset")]
    cluster_out: Option<PathBuf>,
}

#[derive(Args)]
struct InstanceGenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_preset(s: &str) -> Result<(char, usize), String> {
    let (l, n) = s.split_once(':').ok_or("expected LETTER:COUNT")?;
    let mut chars = l.chars();
    let letter = match (chars.next(), chars.next()) {
        (Some(c @ 'A'..='D'), None) => c,
        _ => return Err(format!("unknown chip `{l}`; expected one of A, B, C, D")),
    };
    let count = n.parse().map_err(|_| format!("bad count `{n}`"))?;
    if count == 0 {
        return Err("count must be positive".into());
    }
    Ok((letter, count))
}

enum Failure {
    NoPlan(String),
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<io::FileError> for Failure {
    fn from(e: io::FileError) -> Self {
        Failure::Input(e.into())
    }
}

fn search_failure(e: SearchError) -> Failure {
    match e {
        SearchError::NoFeasiblePlan => Failure::NoPlan(e.to_string()),
        other => Failure::Input(other.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate(a),
        Command::Validate(a) => validate(a),
        Command::Metrics(m) => metrics(m),
        Command::ProfileGen(a) => profile_gen(a),
        Command::InstanceGen(a) => instance_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NoPlan(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_inputs(f: &InputFiles) -> Result<(ClusterSpec, ProfileTable, WorkloadSpec), Failure> {
    let cluster = load_cluster(&f.cluster)?;
    let profile = load_profile(&f.profile, Some(&cluster))?;
    let workload = load_workload(&f.workload)?;
    Ok((cluster, profile, workload))
}

fn print_plan(plan: &ParallelPlan, cost: &CostBreakdown) {
    println!(
        "dp={} microbatches={} stages={} iteration_time={:.6}s",
        plan.dp,
        plan.microbatches,
        plan.num_stages(),
        cost.total
    );
    for a in &plan.assignments {
        println!(
            "  {:<16} pp={:<3} tp={} recompute={} layers={} ({} per stage)",
            a.chip,
            a.pp,
            a.tp,
            u8::from(a.recompute),
            a.layers,
            a.layers_per_stage()
        );
    }
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let (cluster, profile, mut workload) = load_inputs(&a.input)?;
    if let Some(alpha) = a.alpha {
        workload = workload
            .with_alpha(alpha)
            .validate()
            .map_err(|e| anyhow!("--alpha: {e}"))?;
    }
    if a.workers == 0 {
        return Err(anyhow!("--workers must be at least 1").into());
    }
    let (result, grouped) = if a.two_stage {
        if a.group_size == 0 {
            return Err(anyhow!("--group-size must be at least 1").into());
        }
        let r = two_stage_search(&cluster, &profile, &workload, a.group_size, a.workers)
            .map_err(search_failure)?;
        if let Some(Err(e)) = &r.stage2 {
            println!("stage 2: {e}; keeping the stage-1 plan");
        }
        let grouped = (r.chosen == SearchStage::Second)
            .then(|| (r.grouped.cluster.clone(), r.grouped.profile.clone()));
        (r.best().clone(), grouped)
    } else {
        let options = SearchOptions::with_workers(a.workers);
        let r = search_plan_with(&cluster, &profile, &workload, &options).map_err(search_failure)?;
        (r, None)
    };

    io::save(&a.out, &result.plan)?;
    if let Some(path) = &a.cost_out {
        io::save(path, &result.cost)?;
    }
    if let Some((gc, gp)) = &grouped {
        let cpath = a.out.with_extension("grouped-cluster.json");
        let ppath = a.out.with_extension("grouped-profile.json");
        io::save(&cpath, gc)?;
        io::save(&ppath, gp)?;
        println!(
            "grouped plan; cluster and profile written to {} and {}",
            cpath.display(),
            ppath.display()
        );
    }
    print_plan(&result.plan, &result.cost);
    println!("plan written to {}", a.out.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let cluster = load_cluster(&a.cluster)?;
    let profile = load_profile(&a.profile, Some(&cluster))?;
    let plan = load_plan(&a.plan)?;
    let mut comm = match &a.comm {
        Some(p) => load_comm(p)?,
        None => CommConfig::zero(),
    };
    if let Some(o) = a.overlap {
        comm.overlap_fraction = o;
    }
    let workload = WorkloadSpec::new(plan.total_layers(), plan.dp * plan.microbatches);
    if let Some(v) = check_plan_feasibility(&plan, &cluster, &profile, &workload).violation {
        return Err(anyhow!("{}: infeasible plan: {v}", a.plan.display()).into());
    }
    let trace = simulate_iteration(&plan, &profile, &cluster, &comm).map_err(|e| anyhow!(e))?;
    let m = trace_metrics(&trace);
    let model = estimate_iteration_time(&plan, &profile, &workload).map_err(|e| anyhow!(e))?;
    println!("iteration_time={:.6}s model={:.6}s", m.iteration_time, model.total);
    for (s, (b, w)) in m.bubble_fraction.iter().zip(&m.peak_in_flight).enumerate() {
        println!("  stage {:<3} bubble={:.4} peak_in_flight={}", s + 1, b, w);
    }
    if let Some(path) = &a.trace_out {
        export_trace(&trace, path).with_context(|| format!("{}", path.display()))?;
        println!("trace written to {}", path.display());
    }
    if let Some(path) = &a.out {
        io::save(path, &m)?;
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<(), Failure> {
    let (cluster, profile, workload) = match (a.seed, &a.cluster, &a.profile, &a.workload) {
        (Some(seed), ..) => {
            let i = random_instance(seed);
            (i.cluster, i.profile, i.workload)
        }
        (None, Some(c), Some(p), Some(w)) => load_inputs(&InputFiles {
            cluster: c.clone(),
            profile: p.clone(),
            workload: w.clone(),
        })?,
        _ => return Err(anyhow!("give --seed or --cluster, --profile and --workload").into()),
    };
    let options = SearchOptions::with_workers(a.workers.max(1));
    let search = search_plan_with(&cluster, &profile, &workload, &options);
    let oracle = match brute_force_oracle(&cluster, &profile, &workload, &OracleLimits::default()) {
        Err(e @ SearchError::LimitsExceeded(_)) => return Err(anyhow!(e).into()),
        r => r,
    };
    let show = |r: &Result<heteroplan_core::SearchResult, SearchError>| match r {
        Ok(r) => format!("{:.9}s", r.cost.total),
        Err(e) => e.to_string(),
    };
    println!("search: {}", show(&search));
    println!("oracle: {}", show(&oracle));
    let agree = match (&search, &oracle) {
        (Ok(s), Ok(o)) => s.cost.total == o.cost.total,
        (Err(SearchError::NoFeasiblePlan), Err(SearchError::NoFeasiblePlan)) => true,
        _ => false,
    };
    if agree {
        println!("AGREE");
        Ok(())
    } else {
        println!("DISAGREE");
        Err(Failure::NoPlan("search and oracle disagree".into()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("{}", path.display()))
}

fn metrics(m: MetricsCommand) -> Result<(), Failure> {
    match m {
        MetricsCommand::SpeedupRatio {
            hetero_tgs,
            baselines,
            total_chips,
        } => {
            let rows = parse_series(&read_text(&baselines)?)
                .with_context(|| format!("{}", baselines.display()))?;
            let mut base = Vec::with_capacity(rows.len());
            for (i, &(n, tgs)) in rows.iter().enumerate() {
                if n < 1.0 || n.fract() != 0.0 {
                    return Err(anyhow!("{}: row {}: chip count must be a positive integer", baselines.display(), i + 1).into());
                }
                base.push((n as usize, tgs));
            }
            let total = total_chips.unwrap_or_else(|| base.iter().map(|b| b.0).sum());
            let r = hetero_speedup_ratio(hetero_tgs, total, &base).map_err(|e| anyhow!(e))?;
            println!("{r:.6}");
        }
        MetricsCommand::Mre {
            reference,
            candidate,
            threshold,
        } => {
            let load = |p: &Path| -> Result<Vec<f64>> {
                let rows = parse_series(&read_text(p)?).with_context(|| format!("{}", p.display()))?;
                Ok(series_values(&rows))
            };
            let e = mean_relative_error(&load(&reference)?, &load(&candidate)?).map_err(|e| anyhow!(e))?;
            match threshold {
                Some(t) => println!("{e:.6} {}", if e < t { "below" } else { "above" }),
                None => println!("{e:.6}"),
            }
        }
    }
    Ok(())
}

fn profile_gen(a: ProfileGenArgs) -> Result<(), Failure> {
    let mut profile = ProfileTable::new();
    if let Some(path) = &a.params {
        let params: SyntheticProfileParams = io::load(path)?;
        let chip = synthesize_profile(&params).with_context(|| format!("{}", path.display()))?;
        profile.insert_chip(a.chip.clone().expect("required by clap"), chip);
    } else if !a.preset.is_empty() {
        let (cluster, p) = presets::calibrated_instance(&a.preset);
        profile = p;
        if let Some(path) = &a.cluster_out {
            io::save(path, &cluster)?;
        }
    } else {
        return Err(anyhow!("give --params with --chip, or at least one --preset").into());
    }
    io::save(&a.out, &profile)?;
    println!("profile written to {}", a.out.display());
    Ok(())
}

fn instance_gen(a: InstanceGenArgs) -> Result<(), Failure> {
    let i = random_instance(a.seed);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("{}", a.out_dir.display()))?;
    io::save(&a.out_dir.join("cluster.json"), &i.cluster)?;
    io::save(&a.out_dir.join("profile.json"), &i.profile)?;
    io::save(&a.out_dir.join("workload.json"), &i.workload)?;
    println!("instance {} written to {}", a.seed, a.out_dir.display());
    Ok(())
}
