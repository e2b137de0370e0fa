use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use soft_core::background::ReferenceBank;
use soft_core::binding::{self, BoundSlots, ReferenceSlots};
use soft_core::config::PipelineConfig;
use soft_core::policy::{self, BcDataset};
use soft_core::slots::SlotSet;
use soft_core::trace::{read_demonstration, Demonstration, TraceBundle};
use soft_core::{atomic, pipeline, seed, Error};

use crate::segment::{load_traces, resolve_bank};
use crate::{expand_glob, thread_pool, GlobalArgs};

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Glob of SOFT1 trace files.
    #[arg(long)]
    pub traces: String,
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BindArgs {
    /// Demonstration directory to bind.
    #[arg(long)]
    pub demo: PathBuf,
    /// Reference slots JSON.
    #[arg(long, conflicts_with = "reference_demo", required_unless_present = "reference_demo")]
    pub reference: Option<PathBuf>,
    /// Build the reference from this demonstration instead.
    #[arg(long)]
    pub reference_demo: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Glob of demonstration directories.
    #[arg(long)]
    pub demos: String,
    /// Reference slots JSON.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

fn demo_id(dir: &Path) -> String {
    dir.file_name().and_then(|s| s.to_str()).unwrap_or("demo").to_string()
}

/// Slots of every frame of one demonstration, in frame order.
fn demo_slots(
    frames: &[TraceBundle],
    bank: Option<&ReferenceBank>,
    config: &PipelineConfig,
    id: &str,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<Vec<SlotSet>> {
    let base = seed::item_id(id);
    pool.install(|| {
        frames
            .par_iter()
            .enumerate()
            .map(|(i, f)| pipeline::embed(f, bank, config, seed::derive(base, "frame", i as u64)))
            .collect::<soft_core::Result<Vec<_>>>()
    })
    .with_context(|| format!("embedding demonstration {id}"))
}

fn load_demo(dir: &Path) -> anyhow::Result<Demonstration> {
    read_demonstration(dir).with_context(|| format!("reading demonstration {}", dir.display()))
}

fn jsonl<T: Serialize>(items: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut out = vec![];
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn run_embed(args: &EmbedArgs, global: &GlobalArgs, config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = expand_glob(&args.traces)?;
    let out = global.out_dir()?;
    fs::create_dir_all(out)?;
    let mut failed = vec![];
    let inputs = load_traces(&paths, &mut failed);
    if let Some((id, e)) = failed.into_iter().next() {
        return Err(e.context(format!("cannot embed {id}")));
    }
    let frames: Vec<TraceBundle> = inputs.iter().map(|(_, b)| b.clone()).collect();
    let bank = resolve_bank(args.bank.as_deref(), &frames, config)?;
    let pool = thread_pool(global.jobs)?;
    let sets = pool.install(|| {
        inputs
            .par_iter()
            .map(|(id, b)| pipeline::embed(b, bank.as_ref(), config, seed::item_id(id)))
            .collect::<soft_core::Result<Vec<_>>>()
    })?;
    let mut lines = String::new();
    for set in &sets {
        lines.push_str(&set.to_json_line()?);
        lines.push('\n');
    }
    atomic::write_atomic(&out.join("slots.jsonl"), lines.as_bytes())?;
    let ids: Vec<&str> = inputs.iter().map(|(id, _)| id.as_str()).collect();
    atomic::write_atomic(&out.join("frames.txt"), format!("{}\n", ids.join("\n")).as_bytes())?;
    println!("embedded {} frames into {}", sets.len(), out.join("slots.jsonl").display());
    Ok(())
}

pub fn run_bind(args: &BindArgs, global: &GlobalArgs, config: &PipelineConfig) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    fs::create_dir_all(out)?;
    let demo = load_demo(&args.demo)?;
    let ref_demo = args.reference_demo.as_deref().map(load_demo).transpose()?;
    let mut frames = demo.frames.clone();
    if let Some(r) = &ref_demo {
        frames.extend(r.frames.iter().cloned());
    }
    let bank = resolve_bank(args.bank.as_deref(), &frames, config)?;
    let pool = thread_pool(global.jobs)?;

    let reference = match (&args.reference, &ref_demo, &args.reference_demo) {
        (Some(path), _, _) => ReferenceSlots::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(r), Some(dir)) => {
            let id = demo_id(dir);
            let sets = demo_slots(&r.frames, bank.as_ref(), config, &id, &pool)?;
            let reference = binding::build_reference_slots(&sets, &id)?;
            reference.save(&out.join("reference.json"))?;
            reference
        }
        _ => return Err(Error::InvalidArgument("--reference or --reference-demo is required".into()).into()),
    };

    let sets = demo_slots(&demo.frames, bank.as_ref(), config, &demo_id(&args.demo), &pool)?;
    let bound = binding::bind_sequence(&sets, &reference, config.bind_gate)?;
    atomic::write_atomic(&out.join("bound.jsonl"), &jsonl(&bound)?)?;
    let matched: usize = bound.iter().map(|b| b.matched.iter().filter(|&&m| m).count()).sum();
    println!(
        "bound {} frames to k* = {} ({matched} of {} positions matched)",
        bound.len(),
        reference.k_star(),
        bound.len() * reference.k_star()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    demos: usize,
    examples: usize,
    input_dim: usize,
    action_dim: usize,
    epochs: usize,
    final_loss: f64,
    least_squares_residual: f64,
    ratio_to_least_squares: f64,
}

pub fn run_train(args: &TrainArgs, global: &GlobalArgs, config: &PipelineConfig) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    fs::create_dir_all(out)?;
    let dirs = expand_glob(&args.demos)?;
    let demos: Vec<(String, Demonstration)> =
        dirs.iter().map(|d| Ok((demo_id(d), load_demo(d)?))).collect::<anyhow::Result<_>>()?;
    let reference =
        ReferenceSlots::load(&args.reference).with_context(|| format!("reading {}", args.reference.display()))?;
    let all_frames: Vec<TraceBundle> = demos.iter().flat_map(|(_, d)| d.frames.iter().cloned()).collect();
    let bank = resolve_bank(args.bank.as_deref(), &all_frames, config)?;
    let pool = thread_pool(global.jobs)?;

    let mut inputs = vec![];
    let mut targets = vec![];
    for (id, demo) in &demos {
        let sets = demo_slots(&demo.frames, bank.as_ref(), config, id, &pool)?;
        let bound: Vec<BoundSlots> = binding::bind_sequence(&sets, &reference, config.bind_gate)?;
        inputs.extend(bound.iter().map(BoundSlots::flatten));
        targets.extend(demo.actions.iter().cloned());
    }
    let data = BcDataset::from_rows(&inputs, &targets)?;
    let outcome = policy::train(&data, &config.policy)?;
    let residual = policy::least_squares_residual(&data)?;
    outcome.policy.save(&out.join("policy.bin"))?;
    atomic::write_atomic(&out.join("loss.csv"), policy::loss_curve_csv(&outcome.losses).as_bytes())?;
    let summary = TrainSummary {
        demos: demos.len(),
        examples: data.len(),
        input_dim: data.inputs.ncols(),
        action_dim: data.targets.ncols(),
        epochs: config.policy.epochs,
        final_loss: outcome.final_loss,
        least_squares_residual: residual,
        ratio_to_least_squares: outcome.final_loss / residual,
    };
    atomic::write_atomic(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    println!(
        "trained on {} examples: final loss {:.6e}, least-squares residual {:.6e}",
        data.len(),
        outcome.final_loss,
        residual
    );
    Ok(())
}
