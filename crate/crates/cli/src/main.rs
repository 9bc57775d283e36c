use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use winoshare::graphopt::PassConfig;
use winoshare::netsim::CostModel;
use winoshare::network::{preset, BuildMode, CodebookKind, NetworkDesc};
use winoshare::report::{megabytes, PlanSummary, ReportDocument};
use winoshare::scenario::{self, BenchConv, RunOptions, PLAN_CHOICES};
use winoshare::Error;

/// Two-party quantized Winograd inference simulator with communication accounting.
#[derive(Parser)]
#[command(name = "winoshare", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one convolution layer and report its communication.
    BenchConv(BenchArgs),
    /// Run a network description through the optimizer and the simulator.
    RunNetwork(RunArgs),
    /// Choose per-layer weight widths under a communication budget.
    PlanBits(PlanArgs),
    /// Re-serialize a report as CSV or JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct CostArgs {
    /// Security parameter in bits.
    #[arg(long, default_value_t = 128)]
    lambda: u64,
    #[arg(long, default_value_t = 1)]
    ot_payload_factor: u64,
    #[arg(long, default_value_t = 1)]
    relu_coeff: u64,
}

impl CostArgs {
    fn model(&self) -> CostModel {
        CostModel {
            lambda: self.lambda,
            relu_unit_coeff: self.relu_coeff,
            ot_payload_factor: self.ot_payload_factor,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Layer dimensions H,W,C,K.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    /// Quantization as WxAy, e.g. W2A4.
    #[arg(long, default_value = "W2A4")]
    quant: String,
    /// Winograd output tile size.
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long)]
    no_winograd: bool,
    #[arg(long)]
    no_fuse: bool,
    #[arg(long)]
    no_msb: bool,
    #[arg(long, value_enum, default_value_t = Cb::Standard)]
    codebook: Cb,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report the formula prediction without executing.
    #[arg(long)]
    predict_only: bool,
    #[command(flatten)]
    cost: CostArgs,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cb {
    Standard,
    Reweighted,
}

#[derive(Args)]
struct NetSource {
    /// Network description (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    desc: Option<PathBuf>,
    /// Built-in description: resnet32-block or minionn-toy.
    #[arg(long)]
    preset: Option<String>,
}

impl NetSource {
    fn load(&self) -> anyhow::Result<NetworkDesc> {
        Ok(match (&self.desc, &self.preset) {
            (Some(p), _) => NetworkDesc::from_toml(&read(p)?)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => unreachable!("clap requires one source"),
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: NetSource,
    #[arg(long)]
    no_decompose: bool,
    #[arg(long)]
    no_fuse_ext_ext: bool,
    #[arg(long)]
    no_fuse_trunc_ext: bool,
    #[arg(long)]
    no_simplify_residual: bool,
    #[arg(long)]
    no_msb: bool,
    /// Apply a plan written by plan-bits.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Seed of the random input.
    #[arg(long, default_value_t = 0)]
    input_seed: u64,
    /// Also report the cumulative optimization steps.
    #[arg(long)]
    waterfall: bool,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    source: NetSource,
    /// JSON array of {name, hessian_trace}.
    #[arg(long)]
    sensitivity: PathBuf,
    /// Communication budget in bits.
    #[arg(long)]
    budget: u64,
    /// Candidate weight widths.
    #[arg(long, value_delimiter = ',', default_values_t = PLAN_CHOICES)]
    choices: Vec<u32>,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn read(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_quant(s: &str) -> anyhow::Result<(u32, u32)> {
    let u = s.to_ascii_uppercase();
    let (w, a) = u
        .strip_prefix('W')
        .and_then(|r| r.split_once('A'))
        .ok_or_else(|| Error::InvalidConfig(format!("quantization {s:?} is not of the form W2A4")))?;
    let num = |t: &str| t.parse::<u32>().map_err(|_| Error::InvalidConfig(format!("bad width in {s:?}")));
    Ok((num(w)?, num(a)?))
}

fn summary(doc: &ReportDocument) {
    eprintln!(
        "{}: {} bits ({:.3} MB), offline {} online {}, {} rounds",
        doc.name,
        doc.totals.total_bits,
        megabytes(doc.totals.total_bits),
        doc.totals.offline_bits,
        doc.totals.online_bits,
        doc.totals.rounds
    );
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let (l_w, l_a) = parse_quant(&a.quant)?;
    let [h, w, c, k] = a.dims[..] else {
        return Err(Error::InvalidConfig("--dims needs H,W,C,K".into()).into());
    };
    let cfg = BenchConv {
        h,
        w,
        c,
        k,
        l_w,
        l_a,
        m: a.m,
        winograd: !a.no_winograd,
        fuse: !a.no_fuse,
        msb: !a.no_msb,
        codebook: match a.codebook {
            Cb::Standard => CodebookKind::Standard,
            Cb::Reweighted => CodebookKind::Reweighted,
        },
        seed: a.seed,
        predict_only: a.predict_only,
    };
    let doc = scenario::bench_conv(&cfg, a.cost.model())?;
    summary(&doc);
    emit(&a.out, &(doc.to_json()? + "\n"))
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let desc = a.source.load()?;
    let plan: Option<PlanSummary> = match &a.plan {
        Some(p) => Some(serde_json::from_str(&read(p)?).map_err(|e| Error::Parse(format!("plan file: {e}")))?),
        None => None,
    };
    let mode = plan.as_ref().map_or(BuildMode::AsDescribed, scenario::plan_build_mode);
    let opts = RunOptions {
        passes: PassConfig {
            decompose: !a.no_decompose,
            fuse_ext_ext: !a.no_fuse_ext_ext,
            fuse_trunc_ext: !a.no_fuse_trunc_ext,
            simplify_residual: !a.no_simplify_residual,
            msb: !a.no_msb,
        },
        mode,
        input_seed: a.input_seed,
        waterfall: a.waterfall,
        execute_steps: false,
    };
    let (mut doc, _) = scenario::run_network(&desc, &opts, a.cost.model())?;
    doc.plan = plan;
    summary(&doc);
    for s in &doc.steps {
        eprintln!("  {:<16} {:>14} bits", s.step, s.predicted_bits);
    }
    if let Some(sum) = &doc.output_checksum {
        eprintln!("output checksum {sum}");
    }
    emit(&a.out, &(doc.to_json()? + "\n"))
}

fn plan(a: PlanArgs) -> anyhow::Result<()> {
    let desc = a.source.load()?;
    let sens = scenario::parse_sensitivities(&read(&a.sensitivity)?)?;
    let plan = scenario::plan_bits(&desc, &sens, a.budget, &a.choices, a.cost.model())?;
    eprintln!("plan cost {} of budget {} bits, objective {:.6e}", plan.cost_bits, plan.budget, plan.objective);
    let text = serde_json::to_string_pretty(&plan).map_err(|e| Error::Parse(e.to_string()))?;
    emit(&a.out, &(text + "\n"))
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let doc = ReportDocument::from_json(&read(&a.report)?)?;
    let text = match a.format {
        Format::Csv => doc.to_csv(),
        Format::Json => doc.to_json()? + "\n",
    };
    emit(&a.out, &text)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Infeasible { .. }) => 3,
        Some(Error::Invariant(_)) | Some(Error::NegativeCharge(_)) | Some(Error::SessionClosed) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::BenchConv(a) => bench(a),
        Cmd::RunNetwork(a) => run(a),
        Cmd::PlanBits(a) => plan(a),
        Cmd::Report(a) => report(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
