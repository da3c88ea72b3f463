//! File formats and commands behind the `falcon` binary.
//!
//! Exit codes: 0 success, 1 verification failed, 2 input or format error,
//! 3 computation error.

pub mod config;
pub mod format;
pub mod ftk;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{self, ConvType, LayerSpec};
use crate::error::Error;
use crate::falcon::{dpconv_forward, falcon_rank_k_forward};
use crate::fit::{self, Factors, FitConfig, Init, Method, Orientation};
use crate::gep::{DpconvFactors, FalconFactors, FalconPair};
use crate::tensor::{frobenius_norm, ConvDims, Tensor};

pub use config::{parse_config, ConfigError};
pub use format::sig6;
pub use ftk::{decode, encode, read_ftk, write_ftk, Dtype, FtkError, FtkFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_COMPUTE: i32 = 3;

/// A failure carrying the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Compute(_) => EXIT_COMPUTE,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Compute(m) => m,
        }
    }
}

impl From<FtkError> for CliError {
    fn from(e: FtkError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

fn input(e: Error) -> CliError {
    CliError::Input(e.to_string())
}

fn compute(e: Error) -> CliError {
    CliError::Compute(e.to_string())
}

type CliResult = Result<i32, CliError>;

#[derive(Debug, Parser)]
#[command(name = "falcon", version, about = "Factorize convolution kernels into pointwise and depthwise parts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit factors to the kernel "K" of a tensor file.
    Compress(CompressArgs),
    /// Rebuild the kernel from a factor file.
    Reconstruct(ReconstructArgs),
    /// Compare factors against a kernel.
    Verify(VerifyArgs),
    /// Run a convolution with a kernel or factor file.
    Forward(ForwardArgs),
    /// Print counts and rates for one layer.
    Rates(RatesArgs),
    /// Count parameters and FLOPs of an architecture config.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Svd,
    Iterative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrientationArg {
    Falcon,
    Dpconv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    WarmSvd,
    Random,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    #[arg(long, value_enum, default_value = "svd")]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "falcon")]
    pub orientation: OrientationArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "warm-svd")]
    pub init: InitArg,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub factors: PathBuf,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub kernel: PathBuf,
    pub factors: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// File holding "K", or a factor set.
    pub weights: PathBuf,
    /// File holding the feature map "I".
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub pad: usize,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RatesArgs {
    #[arg(long = "D")]
    pub d: usize,
    #[arg(long = "M")]
    pub m: usize,
    #[arg(long = "N")]
    pub n: usize,
    #[arg(long = "H", default_value_t = 1)]
    pub h: usize,
    #[arg(long = "W", default_value_t = 1)]
    pub w: usize,
    #[arg(long = "s", default_value_t = 1)]
    pub s: usize,
    #[arg(long = "p", default_value_t = 0)]
    pub p: usize,
    #[arg(long = "k", default_value_t = 1)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub config: PathBuf,
    /// Replace every layer's type, e.g. `falcon`.
    #[arg(long)]
    pub conv: Option<String>,
    /// Expansion ratio for `--conv pdpconv`.
    #[arg(long)]
    pub t: Option<f64>,
    /// Group count for `--conv gdgconv`.
    #[arg(long)]
    pub g: Option<usize>,
    /// Replace every layer's rank.
    #[arg(long)]
    pub k: Option<usize>,
    /// Also write per-layer counts as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Runs a parsed command, writing reports to `out`. Errors carry their exit
/// code; the caller prints the message.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Compress(a) => compress(&a, out),
        Command::Reconstruct(a) => reconstruct(&a, out),
        Command::Verify(a) => verify(&a, out),
        Command::Forward(a) => forward(&a, out),
        Command::Rates(a) => rates(&a, out),
        Command::Analyze(a) => analyze(&a, out),
    }
}

/// Reads the 4-way kernel "K".
fn load_kernel(file: &FtkFile) -> Result<Tensor, CliError> {
    let k = file.require("K")?;
    if k.ndim() != 4 {
        return Err(CliError::Input(format!(
            "tensor \"K\" must be 4-way D×D×M×N, got shape {:?}",
            k.shape()
        )));
    }
    Ok(k.clone())
}

/// Writes factors under the reserved names.
pub fn factors_to_file(factors: &Factors) -> FtkFile {
    let mut file = FtkFile::new(Dtype::F64);
    match factors {
        Factors::Falcon(f) => {
            for (r, pair) in f.pairs().iter().enumerate() {
                file = file.with(format!("P.{r}"), pair.pointwise.clone());
            }
            for (r, pair) in f.pairs().iter().enumerate() {
                file = file.with(format!("D.{r}"), pair.depthwise.clone());
            }
        }
        Factors::Dpconv(f) => {
            file = file
                .with("D", f.depthwise().clone())
                .with("P", f.pointwise().clone());
        }
    }
    file
}

/// Interprets a file as a factor set: `P.r`/`D.r` for pointwise-depthwise,
/// `D`/`P` for depthwise-pointwise.
pub fn factors_from_file(file: &FtkFile) -> Result<Factors, CliError> {
    let malformed = |msg: String| CliError::Input(format!("malformed factor set: {msg}"));
    if file.get("D").is_some() || file.get("P").is_some() {
        if file.tensors.len() != 2 {
            return Err(malformed(format!(
                "a depthwise-pointwise set holds exactly \"D\" and \"P\", found {:?}",
                file.names().collect::<Vec<_>>()
            )));
        }
        let d = file.require("D").map_err(|e| malformed(e.to_string()))?;
        let p = file.require("P").map_err(|e| malformed(e.to_string()))?;
        return DpconvFactors::new(d.clone(), p.clone())
            .map(Factors::Dpconv)
            .map_err(|e| malformed(e.to_string()));
    }
    let rank = file.names().filter(|n| n.starts_with("P.")).count();
    if rank == 0 || file.tensors.len() != 2 * rank {
        return Err(malformed(format!(
            "expected P.0..P.{{k-1}} and D.0..D.{{k-1}}, found {:?}",
            file.names().collect::<Vec<_>>()
        )));
    }
    let pairs = (0..rank)
        .map(|r| {
            let p = file.require(&format!("P.{r}")).map_err(|e| malformed(e.to_string()))?;
            let d = file.require(&format!("D.{r}")).map_err(|e| malformed(e.to_string()))?;
            Ok(FalconPair {
                pointwise: p.clone(),
                depthwise: d.clone(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    FalconFactors::new(pairs)
        .map(Factors::Falcon)
        .map_err(|e| malformed(e.to_string()))
}

fn relative(residual: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        residual / norm
    } else if residual == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn compress(a: &CompressArgs, out: &mut dyn Write) -> CliResult {
    let kernel = load_kernel(&read_ftk(&a.input)?)?;
    let cfg = FitConfig {
        method: match a.method {
            MethodArg::Svd => Method::Svd,
            MethodArg::Iterative => Method::Iterative,
        },
        rank: a.rank,
        orientation: match a.orientation {
            OrientationArg::Falcon => Orientation::Falcon,
            OrientationArg::Dpconv => Orientation::Dpconv,
        },
        learning_rate: a.lr,
        max_iters: a.iters,
        tolerance: a.tol,
        seed: a.seed,
        init: match a.init {
            InitArg::WarmSvd => Init::WarmSvd,
            InitArg::Random => Init::Random,
        },
    };
    let (factors, iterations) = match cfg.method {
        Method::Svd => (fit::fit(&kernel, &cfg).map_err(compute)?, None),
        Method::Iterative => {
            let r = fit::fit_iterative(&kernel, &cfg).map_err(compute)?;
            (r.factors, Some(r.iterations))
        }
    };
    let res = fit::residual(&kernel, &factors).map_err(compute)?;
    write_ftk(&a.output, &factors_to_file(&factors))?;
    if let Some(it) = iterations {
        writeln!(out, "iterations {it}")?;
    }
    writeln!(out, "residual {}", sig6(res))?;
    writeln!(out, "relative_residual {}", sig6(relative(res, frobenius_norm(&kernel))))?;
    Ok(EXIT_OK)
}

fn reconstruct(a: &ReconstructArgs, out: &mut dyn Write) -> CliResult {
    let factors = factors_from_file(&read_ftk(&a.factors)?)?;
    let k = factors.reconstruct().map_err(input)?;
    writeln!(out, "kernel {:?}", k.shape())?;
    write_ftk(&a.output, &FtkFile::new(Dtype::F64).with("K", k))?;
    Ok(EXIT_OK)
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult {
    let kernel = load_kernel(&read_ftk(&a.kernel)?)?;
    let factors = factors_from_file(&read_ftk(&a.factors)?)?;
    let rebuilt = factors.reconstruct().map_err(input)?;
    if rebuilt.shape() != kernel.shape() {
        return Err(CliError::Input(format!(
            "factors reconstruct a {:?} kernel but \"K\" is {:?}",
            rebuilt.shape(),
            kernel.shape()
        )));
    }
    let res = fit::residual(&kernel, &factors).map_err(compute)?;
    let rel = relative(res, frobenius_norm(&kernel));
    writeln!(out, "residual {}", sig6(res))?;
    writeln!(out, "relative_residual {}", sig6(rel))?;
    writeln!(out, "channel residual")?;
    let n = kernel.shape()[3];
    let mut per_channel = vec![0.0; n];
    for (i, (x, y)) in kernel.data().iter().zip(rebuilt.data()).enumerate() {
        per_channel[i % n] += (x - y) * (x - y);
    }
    for (c, sq) in per_channel.iter().enumerate() {
        writeln!(out, "{c} {}", sig6(sq.sqrt()))?;
    }
    Ok(if rel <= a.tol { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn forward(a: &ForwardArgs, out: &mut dyn Write) -> CliResult {
    let weights = read_ftk(&a.weights)?;
    let feature = read_ftk(&a.input)?;
    let input_map = feature.require("I")?;
    if input_map.ndim() != 3 {
        return Err(CliError::Input(format!(
            "tensor \"I\" must be 3-way H×W×M, got shape {:?}",
            input_map.shape()
        )));
    }
    let result = if weights.get("K").is_some() {
        let k = load_kernel(&weights)?;
        crate::conv::conv2d_standard(input_map, &k, a.stride, a.pad)
    } else {
        match factors_from_file(&weights)? {
            Factors::Falcon(f) => falcon_rank_k_forward(input_map, &f, a.stride, a.pad),
            Factors::Dpconv(f) => dpconv_forward(input_map, &f, a.stride, a.pad),
        }
    };
    let o = result.map_err(|e| {
        CliError::Input(format!(
            "{e} (input {:?}, stride {}, padding {})",
            input_map.shape(),
            a.stride,
            a.pad
        ))
    })?;
    writeln!(out, "output {:?}", o.shape())?;
    write_ftk(&a.output, &FtkFile::new(Dtype::F64).with("O", o))?;
    Ok(EXIT_OK)
}

fn rates(a: &RatesArgs, out: &mut dyn Write) -> CliResult {
    let dims = ConvDims::new(a.d, a.m, a.n, a.h, a.w, a.s, a.p).map_err(input)?;
    if a.k == 0 {
        return Err(CliError::Input("k must be at least 1".into()));
    }
    let st_p = analysis::count_params(ConvType::StConv, &dims, 1).map_err(compute)?;
    let fa_p = analysis::count_params(ConvType::Falcon, &dims, a.k).map_err(compute)?;
    let st_f = analysis::count_flops(ConvType::StConv, &dims, 1).map_err(compute)?;
    let fa_f = analysis::count_flops(ConvType::Falcon, &dims, a.k).map_err(compute)?;
    let cr = analysis::compression_rate(&dims, a.k).map_err(compute)?;
    let crr = analysis::computation_reduction_rate(&dims, a.k).map_err(compute)?;
    writeln!(out, "params_stconv {st_p}")?;
    writeln!(out, "params_falcon {fa_p}")?;
    writeln!(out, "flops_stconv {st_f}")?;
    writeln!(out, "flops_falcon {fa_f}")?;
    writeln!(out, "CR {}", sig6(cr))?;
    writeln!(out, "CRR {}", sig6(crr))?;
    Ok(EXIT_OK)
}

fn analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let path = &a.config;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut layers: Vec<LayerSpec> =
        parse_config(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(tag) = &a.conv {
        let conv = ConvType::from_tag(tag, a.t, a.g).map_err(input)?;
        layers.iter_mut().for_each(|l| l.conv = conv);
    } else if a.t.is_some() || a.g.is_some() {
        return Err(CliError::Input("--t and --g only apply together with --conv".into()));
    }
    if let Some(k) = a.k {
        if k == 0 {
            return Err(CliError::Input("k must be at least 1".into()));
        }
        layers.iter_mut().for_each(|l| l.rank = k);
    }
    let report = analysis::analyze_architecture(&layers).map_err(compute)?;

    writeln!(out, "# convolution layers only; normalization, activation and pooling layers are not counted")?;
    writeln!(out, "layer type k params flops stconv_params stconv_flops")?;
    for l in &report.layers {
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            l.name, l.conv, l.rank, l.params, l.flops, l.stconv_params, l.stconv_flops
        )?;
    }
    writeln!(out, "total_params {}", report.total_params)?;
    writeln!(out, "total_flops {}", report.total_flops)?;
    writeln!(out, "stconv_params {}", report.stconv_params)?;
    writeln!(out, "stconv_flops {}", report.stconv_flops)?;
    writeln!(out, "CR {}", sig6(report.compression_rate()))?;
    writeln!(out, "CRR {}", sig6(report.computation_reduction_rate()))?;

    if let Some(csv_path) = &a.csv {
        let mut w = csv::Writer::from_path(csv_path)
            .map_err(|e| CliError::Input(format!("{}: {e}", csv_path.display())))?;
        let csv_err = |e: csv::Error| CliError::Input(format!("{}: {e}", csv_path.display()));
        w.write_record(["layer", "type", "params", "flops"]).map_err(csv_err)?;
        for l in &report.layers {
            w.write_record([l.name.clone(), l.conv.to_string(), l.params.to_string(), l.flops.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(EXIT_OK)
}
