use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use certfg::graph::{odometry_initialization_with_landmarks, random_initialization, ProblemClass};
use certfg::io::{
    generate_synthetic, parse_dataset, write_g2o, write_report, InitMethod, NoiseSpec, Provenance,
    ReportDocument, SyntheticConfig, Topology,
};
use certfg::objective::assemble_q;
use certfg::staircase::{run_staircase, SolveReport, SolveStatus, StaircaseConfig};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_UNCERTIFIED: u8 = 2;

#[derive(Parser)]
#[command(name = "certfg", version, about = "Certifiably correct factor-graph estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a dataset and write a JSON report.
    Solve(SolveArgs),
    /// Write a synthetic problem in the g2o dialect.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    G2o,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Pgo,
    Landmark,
    RangeAided,
}

impl From<ClassArg> for ProblemClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Pgo => ProblemClass::Pgo,
            ClassArg::Landmark => ProblemClass::Landmark,
            ClassArg::RangeAided => ProblemClass::RangeAided,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Odometry,
    Random,
}

#[derive(Args)]
struct SolveArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value = "g2o")]
    format: Format,
    /// Optimizer preset; inferred from the graph when omitted.
    #[arg(long, value_enum)]
    problem_class: Option<ClassArg>,
    #[arg(long, value_enum, default_value = "odometry")]
    init: InitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial rank; defaults to the problem dimension.
    #[arg(long)]
    p0: Option<usize>,
    #[arg(long)]
    pmax: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    abs_tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    eigen_tol: Option<f64>,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write the data matrix as symmetric coordinate triplets.
    #[arg(long)]
    export_q: Option<PathBuf>,
    /// Write the final rank-d estimate as g2o.
    #[arg(long)]
    estimate_out: Option<PathBuf>,
    /// Force local refinement after rounding on or off.
    #[arg(long)]
    refine: Option<bool>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Chain,
    Grid2d,
    Grid3d,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "chain")]
    topology: TopologyArg,
    /// Poses in a chain, side length of a grid.
    #[arg(long, default_value_t = 10)]
    size: usize,
    /// Dimension of a chain.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0.0)]
    translation_sigma: f64,
    /// Rotational noise as a Langevin concentration.
    #[arg(long, conflicts_with = "rotation_sigma")]
    rotation_kappa: Option<f64>,
    /// Rotational noise as an angular standard deviation in radians.
    #[arg(long)]
    rotation_sigma: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    range_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    loop_closure_probability: f64,
    #[arg(long, default_value_t = 0)]
    landmarks: usize,
    #[arg(long, default_value_t = 2)]
    observations_per_landmark: usize,
    #[arg(long, default_value_t = 0)]
    ranges: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    certfg::par::init_threads_from_env();
    let code = match cli.command {
        Command::Solve(args) => solve(args),
        Command::Generate(args) => generate(args),
    };
    ExitCode::from(code)
}

fn fail(msg: impl std::fmt::Display) -> u8 {
    eprintln!("certfg: {msg}");
    EXIT_USAGE
}

fn create(path: &Path) -> std::io::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new)
}

fn solve(args: SolveArgs) -> u8 {
    let Format::G2o = args.format;
    let dataset = match parse_dataset(&args.input) {
        Ok(ds) => ds,
        Err(e) => return fail(format_args!("{}: {e}", args.input.display())),
    };
    let graph = &dataset.graph;
    let class = args.problem_class.map(ProblemClass::from).unwrap_or_else(|| graph.problem_class());
    let mut config = StaircaseConfig::for_class(class);
    config.p_max = args.pmax;
    config.refine = args.refine;
    if let Some(v) = args.rel_tol {
        config.optimizer.relative_error = v;
    }
    if let Some(v) = args.abs_tol {
        config.optimizer.absolute_error = v;
    }
    if let Some(v) = args.max_iters {
        config.optimizer.max_iteration = v;
    }
    if let Some(v) = args.eigen_tol {
        config.eigen.tol = v;
    }
    if let Err(e) = config.optimizer.validate() {
        return fail(e);
    }
    let d = graph.d();
    let p0 = args.p0.unwrap_or(d);
    if p0 < d || args.pmax.is_some_and(|pm| pm < p0) {
        return fail(format_args!("need {d} ≤ p0 ≤ pmax"));
    }

    if let Some(path) = &args.export_q {
        let written = create(path)
            .map_err(certfg::Error::from)
            .and_then(|mut w| assemble_q(graph).write_triplets(&mut w).and_then(|_| Ok(w.flush()?)));
        if let Err(e) = written {
            return fail(format_args!("{}: {e}", path.display()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (init_method, init) = match args.init {
        InitArg::Random => (InitMethod::Random, random_initialization(graph, p0, &mut rng)),
        InitArg::Odometry => {
            let guesses: HashMap<_, _> =
                dataset.landmark_guesses.iter().map(|(k, v)| (*k, v.clone())).collect();
            (
                InitMethod::Odometry,
                odometry_initialization_with_landmarks(graph, p0, &guesses, &mut rng),
            )
        }
    };
    let init = match init {
        Ok(a) => a,
        Err(e) => return fail(e),
    };

    let provenance = Provenance {
        dataset: args.input.display().to_string(),
        problem_class: class,
        init: init_method,
        seed: args.seed,
        p0,
        config: config.clone(),
    };
    let (report, estimate) = match run_staircase(graph, &config, init) {
        Ok(result) => {
            let est = result.refined.unwrap_or(result.rounded).assignment;
            (result.report, Some(est))
        }
        Err(e) => {
            eprintln!("certfg: solve failed: {e}");
            let empty = SolveReport {
                status: SolveStatus::StalledUncertified,
                levels: vec![],
                sdp_value: None,
                rounded_value: None,
                refined_value: None,
                term_rank: p0,
                certified: false,
                opt_time_s: 0.0,
                total_time_s: 0.0,
            };
            (empty, None)
        }
    };

    if !args.quiet {
        for l in &report.levels {
            eprintln!(
                "rank {:>2}  f = {:.6e}  |grad| = {:.2e}  λmin = {:.3e}  η = {:.1e}  iters = {}",
                l.rank, l.objective, l.gradient_norm, l.lambda_min, l.eta, l.iterations
            );
        }
        eprintln!("status: {:?}  rank {}  {:.3} s", report.status, report.term_rank, report.total_time_s);
    }

    let doc = ReportDocument::new(&report, provenance);
    let written = match &args.output {
        Some(path) => write_report(&doc, path),
        None => doc.to_json().map(|s| println!("{s}")),
    };
    if let Err(e) = written {
        return fail(format_args!("writing report: {e}"));
    }
    if let (Some(path), Some(est)) = (&args.estimate_out, &estimate) {
        let written = create(path)
            .map_err(certfg::Error::from)
            .and_then(|mut w| write_g2o(graph, Some(est), &mut w).and_then(|_| Ok(w.flush()?)));
        if let Err(e) = written {
            return fail(format_args!("{}: {e}", path.display()));
        }
    }

    if report.certified {
        EXIT_OK
    } else {
        EXIT_UNCERTIFIED
    }
}

fn generate(args: GenerateArgs) -> u8 {
    let mut noise = NoiseSpec {
        translation_sigma: args.translation_sigma,
        rotation_kappa: args.rotation_kappa.unwrap_or(0.0),
        range_sigma: args.range_sigma,
    };
    if let Some(s) = args.rotation_sigma {
        noise = noise.with_angular_sigma(s);
    }
    let cfg = SyntheticConfig {
        topology: match args.topology {
            TopologyArg::Chain => Topology::Chain,
            TopologyArg::Grid2d => Topology::Grid2d,
            TopologyArg::Grid3d => Topology::Grid3d,
        },
        chain_dim: args.dim,
        size: args.size,
        noise,
        loop_closure_probability: args.loop_closure_probability,
        landmarks: args.landmarks,
        observations_per_landmark: args.observations_per_landmark,
        ranges: args.ranges,
        seed: args.seed,
    };
    let problem = match generate_synthetic(&cfg) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let written = match &args.output {
        Some(path) => create(path)
            .map_err(certfg::Error::from)
            .and_then(|mut w| write_g2o(&problem.graph, Some(&problem.ground_truth), &mut w).and_then(|_| Ok(w.flush()?))),
        None => write_g2o(&problem.graph, Some(&problem.ground_truth), std::io::stdout().lock()),
    };
    match written {
        Ok(()) => EXIT_OK,
        Err(e) => fail(e),
    }
}
