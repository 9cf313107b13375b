use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use nsg_core::graphdata::{generate_synthetic, load_dataset, save_dataset, SignalMode, SyntheticSpec};
use nsg_core::hgnn::{Activation, Aggregation, HgnnConfig};
use nsg_core::nsg::{build_nsg, build_sparse_nsg, EdgeVariant};
use nsg_core::numerics::Tensor2;
use nsg_core::sparsifier::{build_trees, stack_raw_features, write_trees, MstConfig, MstMode};
use nsg_core::spectral::{analyze, build_block_laplacian, write_report, Normalization, SpectralConfig};
use nsg_core::trainkit::{self, evaluate_checkpoint, write_run, ArchConfig, Task, TaskConfig};

use crate::{
    CrossBlockArg, EvalArgs, GenSynthArgs, ModeArg, SpectrumArgs, SparsifyArg, TaskArg, TrainArgs, TransformArgs,
    VariantArg,
};

/// Prints the resolved configuration as one JSON line on stderr and returns
/// it for embedding in outputs.
fn echo<T: Serialize>(command: &str, cfg: &T) -> Result<serde_json::Value> {
    let value = json!({ "command": command, "config": cfg });
    eprintln!("{}", serde_json::to_string(&value)?);
    Ok(value)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.nodes as usize, a.modalities as usize, a.classes as usize, a.dim as usize, a.seed);
    spec.signal_mode = match a.mode {
        ModeArg::Aligned => SignalMode::Aligned,
        ModeArg::Anti => SignalMode::AntiCorrelated,
    };
    spec.noise_std = a.noise;
    spec.intra_class_edge_prob = a.p_intra;
    spec.inter_class_edge_prob = a.p_inter;
    let cfg = echo("gen-synth", &spec)?;
    let g = generate_synthetic(&spec)?;
    save_dataset(&g, &a.out)?;
    write_json(&a.out.join("generator.json"), &cfg)?;
    println!(
        "wrote {} nodes, {} edges, {} modalities to {}",
        g.num_nodes,
        g.edges.len(),
        g.num_modalities(),
        a.out.display()
    );
    Ok(())
}

pub fn transform(a: TransformArgs) -> Result<()> {
    let variant = match a.variant {
        VariantArg::SelfType => EdgeVariant::SelfType,
        VariantArg::CrossType => EdgeVariant::CrossType,
        VariantArg::Hybrid => EdgeVariant::Hybrid,
    };
    let mst = a.sparsify.map(|s| MstConfig {
        c0: a.c0 as usize,
        c1: a.c1 as usize,
        seed: a.seed,
        mode: match s {
            SparsifyArg::Exact => MstMode::Exact,
            SparsifyArg::Approx => MstMode::Approximate,
        },
    });
    let cfg = echo(
        "transform",
        &json!({
            "input": a.input,
            "variant": variant.to_string(),
            "sparsify": mst,
            "similarity_source": mst.map(|_| "raw"),
            "out": a.out,
        }),
    )?;
    let g = load_dataset(&a.input)?;
    let m = g.num_modalities();
    let nsg = match mst {
        None => build_nsg(&g, variant),
        Some(mst) => {
            if m < 2 {
                bail!("sparsification needs at least 2 modalities (dataset has {m})");
            }
            let stacked = stack_raw_features(&g.features)?;
            let trees = build_trees(&stacked, m, &mst)?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            write_trees(&a.out.join("trees.json"), &mst, "raw", &trees)?;
            build_sparse_nsg(g.num_nodes, m, &g.edges, variant, &trees)?
        }
    };
    nsg.export(&a.out)?;
    write_json(&a.out.join("transform.json"), &cfg)?;
    println!(
        "{} NSG: {} sub-nodes, {} edges -> {}",
        variant,
        nsg.num_subnodes(),
        nsg.edges.len(),
        a.out.display()
    );
    Ok(())
}

pub fn spectrum(a: SpectrumArgs) -> Result<()> {
    let cfg = SpectralConfig {
        alpha: a.alpha,
        beta: a.beta,
        normalization: Normalization::SymmetricDegree,
    };
    let b_kind = match a.b {
        CrossBlockArg::Identity => "identity",
        CrossBlockArg::IdentityPlusA => "identity-plus-a",
    };
    let resolved = echo(
        "spectrum",
        &json!({ "input": a.input, "b": b_kind, "spectral": cfg, "out": a.out }),
    )?;
    let g = load_dataset(&a.input)?;
    if g.num_modalities() != 2 {
        bail!(
            "spectral analysis needs exactly two modalities (dataset has {})",
            g.num_modalities()
        );
    }
    let n = g.num_nodes;
    let mut adj = Tensor2::zeros(n, n);
    for &(u, v) in &g.edges {
        adj[(u, v)] = 1.0;
        adj[(v, u)] = 1.0;
    }
    let b = match a.b {
        CrossBlockArg::Identity => Tensor2::identity(n),
        CrossBlockArg::IdentityPlusA => Tensor2::identity(n).add(&adj)?,
    };
    let bl = build_block_laplacian(&adj, &b, &cfg)?;
    let report = analyze(&bl, &cfg)?;
    write_report(&a.out, &report, json!({ "resolved": resolved }))?;
    println!(
        "n={n}: max residual {:.3e}, spectrum match {:.3e}, filter residual {:.3e} -> {}",
        report.max_residual,
        report.spectrum_max_diff,
        report.filter_residual,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let task = TaskConfig {
        task: match a.task {
            TaskArg::Nc => Task::NodeClassification,
            TaskArg::Lp => Task::LinkPrediction,
        },
        lr: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs as usize,
        lambda: a.lambda,
        seed: a.seed,
        patience: a.patience as usize,
    };
    let arch = ArchConfig {
        hgnn: HgnnConfig {
            hidden: a.hidden as usize,
            layers: a.layers as usize,
            residual: true,
            graph_norm: true,
            activation: Activation::Relu,
            aggregation: Aggregation::Mean,
        },
        n_self: a.experts.0,
        n_cross: a.experts.1,
        k: a.topk as usize,
        noise: !a.no_noise,
        two_layer_merge: a.two_layer_merge,
        aux_grad_to_input: a.aux_grad_to_input,
        sparsify_above: a.sparsify_above as usize,
        mst: MstConfig {
            c0: a.c0 as usize,
            c1: a.c1 as usize,
            seed: a.seed,
            mode: match a.mst {
                SparsifyArg::Exact => MstMode::Exact,
                SparsifyArg::Approx => MstMode::Approximate,
            },
        },
    };
    echo("train", &json!({ "input": a.input, "task": task, "arch": arch, "out": a.out }))?;
    task.validate()?;
    arch.validate()?;
    let g = load_dataset(&a.input)?;
    let (runner, report) = trainkit::train(&g, &task, &arch)?;
    let manifest = write_run(&a.out, &g, &task, &runner, &report)?;
    println!(
        "{}",
        serde_json::to_string(&json!({
            "epochs_run": manifest.epochs_run,
            "best_epoch": manifest.best_epoch,
            "val": manifest.best_val,
            "test": manifest.test,
        }))?
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    echo("eval", &json!({ "model": a.model, "input": a.input }))?;
    let g = load_dataset(&a.input)?;
    let out = evaluate_checkpoint(&a.model, &g)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}
