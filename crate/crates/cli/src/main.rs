use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use edgeflow::dist::{plan_distribution, ClusterDescriptor, SyncMethod};
use edgeflow::graph::{load_graph, ComputationGraph, HardwareDescriptor};
use edgeflow::pipeline::optimize;
use edgeflow::sim::{
    compare_plans, execute_plan_numeric, execute_reference, max_abs_diff, random_inputs, simulate_plan, Comparison,
    ExecutionPlan, PassFlags, ProfileReport, SimError, TOLERANCE,
};

#[derive(Parser)]
#[command(name = "edgeflow", version, about = "Dataflow optimizer and simulator for multi-unit edge devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization passes and write the plan and pass report.
    Optimize(OptimizeArgs),
    /// Execute a plan, check it against the reference and profile it.
    Run(RunArgs),
    /// Time two equivalent plans and report the speedup.
    Compare(CompareArgs),
    /// Choose per-operator partition dimensions for a device cluster.
    Distplan(DistArgs),
    /// Render a saved profile report as a table and CSV.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Ablation {
    #[arg(long)]
    no_fuse: bool,
    #[arg(long)]
    no_link: bool,
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    no_partition: bool,
    #[arg(long)]
    no_layout: bool,
}

impl Ablation {
    fn flags(&self) -> PassFlags {
        PassFlags {
            fuse: !self.no_fuse,
            link: !self.no_link,
            split: !self.no_split,
            partition: !self.no_partition,
            layout: !self.no_layout,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    graph: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    hw: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    ablation: Ablation,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    ablation: Ablation,
    /// Existing plan to run instead of optimizing the graph.
    #[arg(long, value_name = "PATH")]
    plan: Option<PathBuf>,
    /// Number of random inputs checked for equivalence.
    #[arg(long, default_value_t = 1)]
    repeat: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    ablation: Ablation,
    /// Two plan files to compare; otherwise vanilla against the selected passes.
    #[arg(long, value_name = "PATH")]
    plan: Vec<PathBuf>,
    /// Further graphs, one speedup row each.
    #[arg(long = "also", value_name = "PATH")]
    also: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    repeat: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sync {
    Ring,
    Ps,
}

#[derive(Args)]
struct DistArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    cluster: Option<PathBuf>,
    #[arg(long, value_enum)]
    sync: Option<Sync>,
}

#[derive(Args)]
struct ReportArgs {
    /// Profile report JSON written by `run`.
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, error: anyhow::anyhow!(msg.into()) }
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: error.into() }
}

fn io(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::EquivalenceFailure { .. } => Failure { code: 4, error: e.into() },
        other => invalid(other),
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(io)
}

fn write(dir: &Path, name: &str, text: &str) -> Outcome {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(io)?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display())).map_err(io)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Run metadata kept apart from the deterministic artifacts.
fn write_meta(dir: &Path, command: &str, wall: f64) -> Outcome {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({ "command": command, "wall_seconds": wall, "finished_unix": now });
    write(dir, "meta.json", &serde_json::to_string_pretty(&meta).expect("json"))
}

fn load_graph_arg(path: &Option<PathBuf>) -> Result<ComputationGraph, Failure> {
    let path = path.as_ref().ok_or_else(|| usage("--graph is required"))?;
    load_graph(&read(path)?).with_context(|| format!("graph {}", path.display())).map_err(invalid)
}

fn load_hw(path: &Option<PathBuf>) -> Result<HardwareDescriptor, Failure> {
    let path = path.as_ref().ok_or_else(|| usage("--hw is required"))?;
    HardwareDescriptor::from_json(&read(path)?).with_context(|| format!("hardware {}", path.display())).map_err(invalid)
}

fn load_plan(path: &Path) -> Result<(ExecutionPlan, ComputationGraph), Failure> {
    let plan = ExecutionPlan::from_json(&read(path)?).map_err(invalid)?;
    let graph = plan.build_graph().map_err(invalid)?;
    Ok((plan, graph))
}

fn cmd_optimize(a: OptimizeArgs) -> Outcome {
    let graph = load_graph_arg(&a.common.graph)?;
    let hw = load_hw(&a.common.hw)?;
    let start = Instant::now();
    let o = optimize(&graph, &hw, a.ablation.flags(), a.common.seed).map_err(invalid)?;
    let wall = start.elapsed().as_secs_f64();
    write(&a.common.out, "plan.json", &o.plan.to_json())?;
    write(&a.common.out, "passes.json", &o.report.to_json())?;
    write_meta(&a.common.out, "optimize", wall)?;
    let r = &o.report;
    println!("graph        {}", graph.name);
    println!("passes       {}", r.flags.label());
    println!("fused groups {}", r.fuse_link.fused_groups.len());
    println!("compounds    {}", r.fuse_link.compounds.len());
    println!("splits       {}", r.splits.len());
    println!("partitioned  {}", r.partitioned.len());
    println!("layouts      {}", r.layouts.len());
    println!("layers       {}", o.plan.layers.len());
    println!("optimization time {:.3} ms", wall * 1e3);
    Ok(())
}

fn check_equivalence(plan: &ExecutionPlan, graph: &ComputationGraph, source: &ComputationGraph, seed: u64, repeat: u64) -> Result<f32, Failure> {
    let mut worst = 0f32;
    for i in 0..repeat.max(1) {
        let inputs = random_inputs(source, seed.wrapping_add(i));
        let want = execute_reference(source, &inputs, plan.seed).map_err(invalid)?;
        let got = execute_plan_numeric(plan, graph, &inputs).map_err(sim_failure)?;
        let d = max_abs_diff(&want, &got);
        if !(d <= TOLERANCE) {
            return Err(sim_failure(SimError::EquivalenceFailure { max_abs_diff: d }));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

fn print_report(r: &ProfileReport) {
    println!("{:<28} {:>12} {:>12} {:>12} {:>10} {:>10}", "layer", "cycles", "compute", "stall", "hits", "misses");
    for l in &r.layers {
        println!(
            "{:<28} {:>12} {:>12} {:>12} {:>10} {:>10}",
            l.layer, l.cycles, l.compute_cycles, l.stall_cycles, l.hits, l.misses
        );
    }
    let t = &r.totals;
    println!(
        "{:<28} {:>12} {:>12} {:>12} {:>10} {:>10}",
        "total", t.simulated_cycles, t.compute_cycles, t.stall_cycles, t.hits, t.misses
    );
    let m = &r.memory;
    println!(
        "peak shared {} B, peak l2 {} B, peak ddr {} B, pool reuse {} / fresh {}",
        m.peak_shared_bytes, m.peak_l2_bytes, m.peak_ddr_bytes, m.pool.reuse_hits, m.pool.fresh_allocations
    );
}

fn cmd_run(a: RunArgs) -> Outcome {
    let (plan, graph, source) = match &a.plan {
        Some(p) => {
            let (plan, graph) = load_plan(p)?;
            let source = match &a.common.graph {
                Some(_) => load_graph_arg(&a.common.graph)?,
                None => graph.clone(),
            };
            (plan, graph, source)
        }
        None => {
            let source = load_graph_arg(&a.common.graph)?;
            let hw = load_hw(&a.common.hw)?;
            let o = optimize(&source, &hw, a.ablation.flags(), a.common.seed).map_err(invalid)?;
            (o.plan, o.graph, source)
        }
    };
    let start = Instant::now();
    let diff = check_equivalence(&plan, &graph, &source, a.common.seed, a.repeat)?;
    let report = simulate_plan(&plan, &graph).map_err(sim_failure)?;
    let wall = start.elapsed().as_secs_f64();
    write(&a.common.out, "plan.json", &plan.to_json())?;
    write(&a.common.out, "report.json", &report.to_json())?;
    write(&a.common.out, "report.csv", &report.to_csv())?;
    write_meta(&a.common.out, "run", wall)?;
    print_report(&report);
    println!("max abs diff {diff:e} over {} input(s)", a.repeat.max(1));
    Ok(())
}

fn comparison_csv(rows: &[Comparison]) -> String {
    let mut s = String::from("graph,base,opt,base_cycles,opt_cycles,speedup,max_abs_diff\n");
    for c in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:e}\n",
            c.graph_ref, c.base, c.opt, c.base_cycles, c.opt_cycles, c.speedup, c.max_abs_diff
        ));
    }
    s
}

fn compare_inputs(base: &ExecutionPlan, opt: &ExecutionPlan, source: &ComputationGraph, seed: u64, repeat: u64) -> Result<Comparison, Failure> {
    let mut result: Option<Comparison> = None;
    for i in 0..repeat.max(1) {
        let inputs = random_inputs(source, seed.wrapping_add(i));
        let c = compare_plans(base, opt, &inputs).map_err(sim_failure)?;
        result = Some(match result {
            Some(r) if r.max_abs_diff >= c.max_abs_diff => r,
            _ => c,
        });
    }
    Ok(result.expect("at least one repetition"))
}

fn cmd_compare(a: CompareArgs) -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    if !a.plan.is_empty() {
        if a.plan.len() != 2 {
            return Err(usage("compare takes exactly two --plan files"));
        }
        let (base, bg) = load_plan(&a.plan[0])?;
        let (opt, _) = load_plan(&a.plan[1])?;
        if base.graph_ref != opt.graph_ref {
            return Err(usage(format!("plans come from different graphs: {} and {}", base.graph_ref, opt.graph_ref)));
        }
        let source = match &a.common.graph {
            Some(_) => load_graph_arg(&a.common.graph)?,
            None => bg,
        };
        rows.push(compare_inputs(&base, &opt, &source, a.common.seed, a.repeat)?);
    } else {
        let hw = load_hw(&a.common.hw)?;
        let first = a.common.graph.clone().ok_or_else(|| usage("--graph or two --plan files are required"))?;
        for path in std::iter::once(first).chain(a.also.iter().cloned()) {
            let g = load_graph_arg(&Some(path))?;
            let base = optimize(&g, &hw, PassFlags::VANILLA, a.common.seed).map_err(invalid)?;
            let opt = optimize(&g, &hw, a.ablation.flags(), a.common.seed).map_err(invalid)?;
            rows.push(compare_inputs(&base.plan, &opt.plan, &g, a.common.seed, a.repeat)?);
        }
    }
    let wall = start.elapsed().as_secs_f64();
    write(&a.common.out, "compare.csv", &comparison_csv(&rows))?;
    write_meta(&a.common.out, "compare", wall)?;
    println!("{:<20} {:>14} {:>14} {:>9}", "graph", "base cycles", "opt cycles", "speedup");
    for c in &rows {
        println!("{:<20} {:>14} {:>14} {:>9.3}", c.graph_ref, c.base_cycles, c.opt_cycles, c.speedup);
    }
    Ok(())
}

fn cmd_distplan(a: DistArgs) -> Outcome {
    let graph = load_graph_arg(&a.common.graph)?;
    let path = a.cluster.as_ref().ok_or_else(|| usage("--cluster is required"))?;
    let mut cluster = ClusterDescriptor::from_json(&read(path)?)
        .with_context(|| format!("cluster {}", path.display()))
        .map_err(invalid)?;
    if let Some(hw) = &a.common.hw {
        cluster.device = load_hw(&Some(hw.clone()))?;
    }
    if let Some(s) = a.sync {
        cluster = cluster.with_sync(match s {
            Sync::Ring => SyncMethod::RingAllReduce,
            Sync::Ps => SyncMethod::ParameterServer,
        });
    }
    let start = Instant::now();
    let plan = plan_distribution(&graph, &cluster).map_err(invalid)?;
    let wall = start.elapsed().as_secs_f64();
    write(&a.common.out, "distplan.json", &plan.to_json())?;
    write(&a.common.out, "distplan.csv", &plan.to_csv())?;
    write_meta(&a.common.out, "distplan", wall)?;
    println!("{:<16} {:>5} {:>14} {:>14} {:>14}", "scheme", "sync", "compute", "comm", "total");
    for r in &plan.schemes {
        println!(
            "{:<16} {:>5} {:>14} {:>14} {:>14}",
            r.scheme,
            r.sync.name(),
            r.cost.compute_cycles,
            r.cost.comm_cycles,
            r.cost.total_cycles
        );
    }
    println!("selected {} ({}), {} cycles on {} device(s)", plan.selected_from, plan.sync.name(), plan.totals.total_cycles, plan.device_count);
    for (node, dim) in &plan.selected.per_operator {
        println!("  {node:<24} {dim}");
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Outcome {
    let report: ProfileReport = serde_json::from_str(&read(&a.report)?)
        .with_context(|| format!("report {}", a.report.display()))
        .map_err(invalid)?;
    write(&a.out, "report.csv", &report.to_csv())?;
    print_report(&report);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDGEFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Optimize(a) => cmd_optimize(a),
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Distplan(a) => cmd_distplan(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
