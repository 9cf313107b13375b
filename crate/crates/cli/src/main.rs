//! `nsg`: generate, transform, analyse and train on multimodal graphs.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed run), 2 usage
//! error (unknown or invalid flags).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nsg", version, about = "Node splitting graphs for multimodal graph learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    GenSynth(GenSynthArgs),
    /// Build an NSG from a dataset and export it.
    Transform(TransformArgs),
    /// Spectral analysis of the two-modality block Laplacian.
    Spectrum(SpectrumArgs),
    /// Train NSG-MoE.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Aligned,
    Anti,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    nodes: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    modalities: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,
    /// Feature width of every modality.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Aligned)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.05)]
    p_intra: f64,
    #[arg(long, default_value_t = 0.01)]
    p_inter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    #[value(name = "self")]
    SelfType,
    #[value(name = "cross")]
    CrossType,
    Hybrid,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SparsifyArg {
    Exact,
    Approx,
}

#[derive(Args, Debug)]
struct TransformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long, value_enum)]
    sparsify: Option<SparsifyArg>,
    /// Anchor count of the approximate tree.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    c0: u64,
    /// Batch size of the approximate tree.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    c1: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CrossBlockArg {
    /// `B = I`: only intra-node edges cross modalities.
    Identity,
    /// `B = I + A`: intra-node plus cross-type edges.
    IdentityPlusA,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = CrossBlockArg::Identity)]
    b: CrossBlockArg,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Nc,
    Lp,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Self-type and cross-type expert counts, `n1,n2`.
    #[arg(long, default_value = "2,2", value_parser = parse_experts)]
    experts: (usize, usize),
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    topk: u64,
    #[arg(long, default_value_t = 1e4)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    /// Early-stopping patience in epochs; 0 disables.
    #[arg(long, default_value_t = 30)]
    patience: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    hidden: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    layers: u64,
    /// Disable gate noise during training.
    #[arg(long)]
    no_noise: bool,
    /// Hidden ReLU layer in the merge head.
    #[arg(long)]
    two_layer_merge: bool,
    /// Let the balancing losses reach the gate input.
    #[arg(long)]
    aux_grad_to_input: bool,
    /// Sparsify intra-node cliques when the modality count exceeds this.
    #[arg(long, default_value_t = 3)]
    sparsify_above: u64,
    /// Spanning-tree mode used when sparsifying.
    #[arg(long, value_enum, default_value_t = SparsifyArg::Exact)]
    mst: SparsifyArg,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    c0: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    c1: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
}

fn parse_experts(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `n1,n2`, got `{s}`"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("bad expert count `{x}`: {e}"));
    let (a, b) = (parse(a)?, parse(b)?);
    if a + b == 0 {
        return Err("at least one expert is required".into());
    }
    Ok((a, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Transform(a) => commands::transform(a),
        Command::Spectrum(a) => commands::spectrum(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
