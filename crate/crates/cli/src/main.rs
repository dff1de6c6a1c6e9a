//! `infsa`: command-line front-end for infsa-core.

mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use infsa_core::bench::{self, BenchVariant};
use infsa_core::format::{load_tensor, store_tensor, Tensor};
use infsa_core::layers::{pure_stack_forward, multihead_block_forward, Init, MultiHeadConfig, Variant};
use infsa_core::validation::{
    alignment_batch, eigenvector_alignment, gradcheck_layer, random_nonnegative_queries, LayerOp,
};
use infsa_core::{
    assert_contractive, build_absorbing_chain, build_affinity_with, centrality_report, closed_form_kernel,
    fig3_fixture, fundamental_matrix, one_hop_vs_multihop_ranking, simulate_walks, truncated_neumann,
    walk_centralities, Activation, AffinityMatrix, DecayFactor, Error, Matrix, TokenFeatures,
};
use render::{Format, Report};

const THREADS_ENV: &str = "INFSA_THREADS";
const GRADCHECK_TOLERANCE: f64 = 1e-5;
const REFERENCE_COSINE: f64 = 0.985;

#[derive(Parser)]
#[command(name = "infsa", version, about = "Infinite self-attention toolkit")]
struct Cli {
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = infsa_core::DEFAULT_EPSILON)]
    eps: f64,
    #[arg(long, global = true, default_value_t = 0.7)]
    gamma: f64,
    /// Worker threads; INFSA_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build Â = φ(QKᵀ)/(‖φ(QKᵀ)‖_F + ε) from query (and key) files.
    Affinity(AffinityArgs),
    /// Discounted path kernel Č, closed form or truncated.
    Kernel(KernelArgs),
    /// Token centralities (row sums of Č).
    Centrality(CentralityArgs),
    /// Absorbing-chain view: fundamental matrix and walk centralities.
    Markov(MarkovArgs),
    /// Monte-Carlo estimate of expected visits from one start token.
    Simulate(SimulateArgs),
    /// One-hop versus multi-hop ranking on the built-in five-token fixture.
    Fig3Demo,
    /// Forward pass of pre-LN InfSA blocks with seeded random weights.
    Forward(ForwardArgs),
    /// Alignment between linear weights and the Perron eigenvector of Â.
    Align(AlignArgs),
    /// Finite-difference checks of every layer backward pass.
    Gradcheck(GradcheckArgs),
    /// Latency scaling benchmark with log-log slope fit.
    Bench(BenchArgs),
}

#[derive(Args)]
struct OperatorInput {
    /// Operator file (.inft matrix).
    #[arg(long)]
    input: PathBuf,
    /// Treat the input as raw weights and apply ReLU plus Frobenius normalization.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct AffinityArgs {
    #[arg(long)]
    q: PathBuf,
    /// Key file; defaults to the queries.
    #[arg(long)]
    k: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Gelu,
    Abs,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Gelu => Activation::Gelu,
            ActivationArg::Abs => Activation::Abs,
        }
    }
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Sum only walks of length 1..=DEPTH.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CentralityArgs {
    #[arg(long)]
    input: PathBuf,
    /// Also print the depth scores Aᵗ𝟏 for t = 1..=T.
    #[arg(long)]
    per_depth: Option<usize>,
}

#[derive(Args)]
struct MarkovArgs {
    #[command(flatten)]
    op: OperatorInput,
    /// Also run the Monte-Carlo estimate.
    #[arg(long)]
    simulate: bool,
    #[arg(long, default_value_t = 100_000)]
    walks: u64,
    #[arg(long, default_value_t = 0)]
    start: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    op: OperatorInput,
    #[arg(long, default_value_t = 100_000)]
    walks: u64,
    #[arg(long, default_value_t = 0)]
    start: usize,
}

#[derive(Args)]
struct ForwardArgs {
    /// Token features (.inft matrix, N × d_model).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Head width; defaults to d_model / heads.
    #[arg(long)]
    d_h: Option<usize>,
    /// MLP hidden width; defaults to 4 · d_model.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Pure,
    Linear,
}

#[derive(Args)]
struct AlignArgs {
    /// Query matrix; without it a random nonnegative batch is generated.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 12)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    t_pow: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Restrict to one operation (e.g. linear_head); all by default.
    #[arg(long)]
    op: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// pure, linear or softmax-baseline; comma-separated for several.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["linear".to_string(), "pure".to_string()])]
    variant: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1024, 2048, 4096, 8192, 16384])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CmdResult = std::result::Result<Outcome, Failure>;

struct Outcome {
    report: Report,
    /// Nonzero when the command ran but its checks failed.
    failed: bool,
}

impl From<Report> for Outcome {
    fn from(report: Report) -> Self {
        Outcome { report, failed: false }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads(cli.threads) {
        Cli::command().error(ErrorKind::ValueValidation, msg).exit();
    }
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.report.render(cli.format));
            if outcome.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(Failure::Usage(msg)) => Cli::command().error(ErrorKind::ValueValidation, msg).exit(),
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> std::result::Result<(), String> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("{THREADS_ENV} must be a thread count, got {v:?}"))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err("thread count must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    if !(cli.eps > 0.0 && cli.eps.is_finite()) {
        return Err(Failure::Usage(format!("--eps must be positive, got {}", cli.eps)));
    }
    match &cli.command {
        Command::Affinity(a) => affinity(cli, a),
        Command::Kernel(a) => kernel(cli, a),
        Command::Centrality(a) => centrality(cli, a),
        Command::Markov(a) => markov(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Fig3Demo => fig3_demo(cli),
        Command::Forward(a) => forward(cli, a),
        Command::Align(a) => align(cli, a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => run_bench(cli, a),
    }
}

fn load_matrix(path: &Path) -> infsa_core::Result<Matrix> {
    Ok(load_tensor(path)?.into_matrix())
}

fn load_operator(cli: &Cli, op: &OperatorInput) -> infsa_core::Result<AffinityMatrix> {
    let m = load_matrix(&op.input)?;
    if op.normalize {
        AffinityMatrix::from_weights(&m, cli.eps)
    } else {
        AffinityMatrix::from_normalized(m, cli.eps)
    }
}

fn maybe_store(path: &Option<PathBuf>, m: &Matrix) -> infsa_core::Result<()> {
    if let Some(p) = path {
        store_tensor(p, &Tensor::Matrix(m.clone()))?;
    }
    Ok(())
}

/// Refuses γ with γρ(A) ≥ 1 before any series is formed.
fn contractive_decay(a: &Matrix, gamma: f64) -> infsa_core::Result<DecayFactor> {
    let c = assert_contractive(a, gamma)?;
    if !c.ok {
        return Err(Error::DivergentSeries {
            gamma,
            rho: c.rho_estimate,
            product: gamma * c.rho_estimate,
        });
    }
    DecayFactor::new(gamma)
}

fn affinity(cli: &Cli, a: &AffinityArgs) -> CmdResult {
    let q = TokenFeatures::new(load_matrix(&a.q)?);
    let k = match &a.k {
        Some(p) => TokenFeatures::new(load_matrix(p)?),
        None => q.clone(),
    };
    let a_hat = build_affinity_with(&q, &k, cli.eps, a.activation.into())?;
    maybe_store(&a.output, a_hat.matrix())?;
    Ok(Report::new().matrix("affinity", a_hat.into_matrix()).into())
}

fn kernel(cli: &Cli, a: &KernelArgs) -> CmdResult {
    let m = load_matrix(&a.input)?;
    let gamma = contractive_decay(&m, cli.gamma)?;
    let k = match a.depth {
        Some(d) => truncated_neumann(&m, gamma, d)?,
        None => closed_form_kernel(&m, gamma)?,
    };
    maybe_store(&a.output, &k)?;
    Ok(Report::new().matrix("kernel", k).into())
}

fn centrality(cli: &Cli, a: &CentralityArgs) -> CmdResult {
    let m = load_matrix(&a.input)?;
    let gamma = contractive_decay(&m, cli.gamma)?;
    let r = centrality_report(&m, gamma, a.per_depth)?;
    let mut report = Report::new().vector("centrality", r.scores);
    if let Some(depths) = r.per_depth {
        let rows = depths
            .iter()
            .enumerate()
            .flat_map(|(t, v)| {
                v.iter()
                    .enumerate()
                    .map(move |(i, x)| vec![json!(t + 1), json!(i), json!(x)])
                    .collect::<Vec<_>>()
            })
            .collect();
        report = report.rows("depth_scores", &["depth", "token", "score"], rows);
    }
    Ok(report.into())
}

fn markov(cli: &Cli, a: &MarkovArgs) -> CmdResult {
    let a_hat = load_operator(cli, &a.op)?;
    let chain = build_absorbing_chain(&a_hat, cli.gamma)?;
    let n = fundamental_matrix(&chain)?;
    let c = walk_centralities(&n);
    let mut report = Report::new()
        .matrix("fundamental", n.matrix().clone())
        .vector("c_out", c.c_out)
        .vector("c_in", c.c_in);
    if a.simulate {
        report = visit_rows(report, &chain, a.start, a.walks, cli.seed)?;
    }
    Ok(report.into())
}

fn visit_rows(
    report: Report,
    chain: &infsa_core::AbsorbingChain,
    start: usize,
    walks: u64,
    seed: u64,
) -> infsa_core::Result<Report> {
    let est = simulate_walks(chain, start, walks, seed)?;
    let se = est.standard_error();
    let rows = (0..est.mean.len())
        .map(|j| vec![json!(j), json!(est.mean[j]), json!(se[j])])
        .collect();
    Ok(report
        .fields(
            "simulation",
            vec![("start", json!(start)), ("walks", json!(walks)), ("seed", json!(seed))],
        )
        .rows("visits", &["token", "mean", "std_error"], rows))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> CmdResult {
    let a_hat = load_operator(cli, &a.op)?;
    let chain = build_absorbing_chain(&a_hat, cli.gamma)?;
    Ok(visit_rows(Report::new(), &chain, a.start, a.walks, cli.seed)?.into())
}

fn fig3_demo(cli: &Cli) -> CmdResult {
    let (a_hat, gamma) = fig3_fixture(cli.eps)?;
    let r = one_hop_vs_multihop_ranking(&a_hat, gamma)?;
    let rows = (0..a_hat.n_tokens())
        .map(|i| vec![json!(i), json!(r.one_hop_scores[i]), json!(r.c_in[i])])
        .collect();
    Ok(Report::new()
        .matrix("affinity", a_hat.matrix().clone())
        .rows("scores", &["token", "one_hop", "c_in"], rows)
        .fields(
            "argmax",
            vec![
                ("gamma", json!(gamma)),
                ("one_hop", json!(r.one_hop[0])),
                ("multi_hop", json!(r.katz[0])),
            ],
        )
        .into())
}

fn forward(cli: &Cli, a: &ForwardArgs) -> CmdResult {
    let x = load_matrix(&a.input)?;
    let d_model = x.cols();
    if a.heads == 0 || a.layers == 0 {
        return Err(Failure::Usage("--heads and --layers must be at least 1".into()));
    }
    let d_h = a.d_h.unwrap_or(d_model / a.heads);
    let cfg = MultiHeadConfig::new(a.heads, d_h, d_model)?;
    let hidden = a.hidden.unwrap_or(4 * d_model);
    let variant = match a.variant {
        VariantArg::Pure => Variant::Pure,
        VariantArg::Linear => Variant::Linear,
    };
    let gamma = DecayFactor::new(cli.gamma)?;
    let blocks: Vec<_> = (0..a.layers as u64)
        .map(|l| Init::new(cli.seed.wrapping_add(l)).block(&cfg, variant, hidden, gamma.value()))
        .collect();
    let features = TokenFeatures::new(x);
    let mut report = Report::new();
    let out = match variant {
        Variant::Pure => {
            let s = pure_stack_forward(&features, &cfg, &blocks, gamma)?;
            let norm = s.accumulated.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            report = report.fields(
                "stack",
                vec![("layers", json!(a.layers)), ("accumulated_frobenius", json!(norm))],
            );
            s.output
        }
        Variant::Linear => {
            let mut h = features;
            for b in &blocks {
                h = multihead_block_forward(&h, &cfg, b, variant)?;
            }
            h.into_matrix()
        }
    };
    maybe_store(&a.output, &out)?;
    Ok(report.matrix("output", out).into())
}

fn align(cli: &Cli, a: &AlignArgs) -> CmdResult {
    if a.t_pow == 0 {
        return Err(Failure::Usage("--t-pow must be at least 1".into()));
    }
    if let Some(path) = &a.input {
        let q = TokenFeatures::new(load_matrix(path)?);
        let s = eigenvector_alignment(&q, cli.eps, a.t_pow)?;
        return Ok(Report::new()
            .fields(
                "alignment",
                vec![("cosine", json!(s.cosine)), ("spearman", json!(s.spearman))],
            )
            .vector("eigenvector", s.eigenvector)
            .vector("weights", s.weights)
            .into());
    }
    if a.samples == 0 || a.tokens == 0 || a.dim == 0 {
        return Err(Failure::Usage("--samples, --tokens and --dim must be positive".into()));
    }
    let batch = random_nonnegative_queries(a.tokens, a.dim, a.samples, cli.seed);
    let r = alignment_batch(&batch, cli.eps, a.t_pow)?;
    Ok(Report::new()
        .fields(
            "alignment",
            vec![
                ("mean_cosine", json!(r.cosine)),
                ("min_cosine", json!(r.min_cosine)),
                ("mean_spearman", json!(r.spearman)),
                ("n_samples", json!(r.n_samples)),
                ("n_degenerate", json!(r.n_degenerate)),
                ("n_spearman_undefined", json!(r.n_spearman_undefined)),
                ("reference_cosine", json!(REFERENCE_COSINE)),
            ],
        )
        .into())
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let ops: Vec<LayerOp> = match &a.op {
        None => LayerOp::ALL.to_vec(),
        Some(name) => match LayerOp::ALL.iter().find(|op| op.name() == name) {
            Some(op) => vec![*op],
            None => {
                let known: Vec<_> = LayerOp::ALL.iter().map(|o| o.name()).collect();
                return Err(Failure::Usage(format!("unknown op {name:?}; expected one of {}", known.join(", "))));
            }
        },
    };
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut failed = false;
    let mut rows = Vec::new();
    for op in ops {
        let mut worst = (0.0f64, 0u64);
        for seed in 0..a.seeds {
            let r = gradcheck_layer(op, seed)?;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, seed);
            }
        }
        let pass = worst.0 <= GRADCHECK_TOLERANCE;
        failed |= !pass;
        rows.push(vec![
            json!(op.name()),
            json!(a.seeds),
            json!(worst.0),
            json!(worst.1),
            json!(if pass { "pass" } else { "FAIL" }),
        ]);
    }
    Ok(Outcome {
        report: Report::new().rows("gradcheck", &["op", "seeds", "max_rel_error", "worst_seed", "status"], rows),
        failed,
    })
}

fn run_bench(cli: &Cli, a: &BenchArgs) -> CmdResult {
    bench::validate_plan(&a.sizes, a.repeats).map_err(|e| Failure::Usage(e.to_string()))?;
    let variants = a
        .variant
        .iter()
        .map(|v| v.parse::<BenchVariant>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut records = Vec::new();
    let mut slopes = Vec::new();
    for v in variants {
        let r = bench::bench_scaling(v, &a.sizes, a.repeats, cli.seed)?;
        slopes.push((v, r.slope));
        records.extend(r.records);
    }
    let rows = records
        .iter()
        .map(|r| {
            let t = r.median_s.map_or(json!("OOM"), |t| json!(t));
            vec![json!(r.variant.name()), json!(r.n_tokens), t, json!(r.repeats)]
        })
        .collect();
    let header: Vec<&str> = bench::CSV_HEADER.split(',').collect();
    let mut report = Report::new().rows("records", &header, rows);
    if cli.format == Format::Csv {
        for (v, s) in &slopes {
            eprintln!("slope {v} {s:.4}");
        }
    } else {
        let slope_rows = slopes.iter().map(|(v, s)| vec![json!(v.name()), json!(s)]).collect();
        report = report.rows("slopes", &["variant", "slope"], slope_rows);
    }
    Ok(report.into())
}
