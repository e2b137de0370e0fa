use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use soft_core::background::ReferenceBank;
use soft_core::config::PipelineConfig;
use soft_core::pipeline::{self, ImageRecord};
use soft_core::trace::{load_trace, TraceBundle};
use soft_core::{atomic, pnm, seed};

use crate::{expand_glob, file_stem, thread_pool, GlobalArgs};

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Glob of SOFT1 trace files.
    #[arg(long)]
    pub traces: String,
    /// Reference bank JSON; built from the inputs when omitted.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Glob of traces to build the reference bank from instead of the inputs.
    #[arg(long)]
    pub bank_from: Option<String>,
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    id: &'a str,
    #[serde(flatten)]
    record: &'a ImageRecord,
}

#[derive(Serialize)]
struct Failure {
    id: String,
    error: String,
}

#[derive(Serialize)]
struct Summary<'a> {
    images: Vec<SummaryEntry<'a>>,
    failed: Vec<Failure>,
}

/// Loads traces in order, logging and dropping unreadable ones.
pub(crate) fn load_traces(paths: &[PathBuf], failed: &mut Vec<(String, anyhow::Error)>) -> Vec<(String, TraceBundle)> {
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        match load_trace(path).with_context(|| format!("reading {}", path.display())) {
            Ok(bundle) => out.push((file_stem(path), bundle)),
            Err(e) => {
                log::warn!("{e:#}");
                failed.push((file_stem(path), e));
            }
        }
    }
    out
}

/// Loads `--bank`, or builds one from `frames` when background removal is on.
pub(crate) fn resolve_bank(
    bank: Option<&Path>,
    frames: &[TraceBundle],
    config: &PipelineConfig,
) -> anyhow::Result<Option<ReferenceBank>> {
    if !config.bg_removal {
        return Ok(None);
    }
    match bank {
        Some(path) => Ok(Some(ReferenceBank::load(path).with_context(|| format!("reading bank {}", path.display()))?)),
        None => Ok(Some(pipeline::build_bank(frames, config).context("building reference bank")?)),
    }
}

pub fn run(args: &SegmentArgs, global: &GlobalArgs, config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = expand_glob(&args.traces)?;
    let out = global.out_dir()?;
    fs::create_dir_all(out)?;

    let mut failed = vec![];
    let inputs = load_traces(&paths, &mut failed);
    if inputs.is_empty() {
        let (id, e) = failed.into_iter().next().expect("at least one input");
        return Err(e.context(format!("no readable traces; first failure: {id}")));
    }
    let bank = if let (Some(pattern), None, true) = (&args.bank_from, &args.bank, config.bg_removal) {
        let mut ignored = vec![];
        let refs: Vec<TraceBundle> =
            load_traces(&expand_glob(pattern)?, &mut ignored).into_iter().map(|(_, b)| b).collect();
        resolve_bank(None, &refs, config)?
    } else {
        let frames: Vec<TraceBundle> = inputs.iter().map(|(_, b)| b.clone()).collect();
        resolve_bank(args.bank.as_deref(), &frames, config)?
    };
    if let Some(bank) = &bank {
        bank.save(&out.join("bank.json"))?;
    }

    let pool = thread_pool(global.jobs)?;
    let results: Vec<_> = pool.install(|| {
        inputs
            .par_iter()
            .map(|(id, bundle)| pipeline::segment(bundle, bank.as_ref(), config, seed::item_id(id)))
            .collect()
    });

    let mut records = vec![];
    for ((id, bundle), result) in inputs.iter().zip(results) {
        match result {
            Ok(seg) => {
                let (w, h) = (seg.mask.width as u32, seg.mask.height as u32);
                pnm::save_label_pgm(&seg.mask.labels, w, h, &out.join(format!("{id}.pgm")))?;
                pnm::save_ppm(&pnm::overlay(&bundle.rgb, &seg.mask.labels)?, &out.join(format!("{id}.ppm")))?;
                let record = ImageRecord::from(&seg.tokens.clusters);
                atomic::write_atomic(&out.join(format!("{id}.json")), &serde_json::to_vec_pretty(&record)?)?;
                records.push((id.as_str(), record));
            }
            Err(e) => {
                log::warn!("{id}: {e}");
                failed.push((id.clone(), e.into()));
            }
        }
    }

    let summary = Summary {
        images: records.iter().map(|(id, record)| SummaryEntry { id, record }).collect(),
        failed: failed.iter().map(|(id, e)| Failure { id: id.clone(), error: format!("{e:#}") }).collect(),
    };
    atomic::write_atomic(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    println!("segmented {} of {} images into {}", records.len(), paths.len(), out.display());
    if records.is_empty() {
        let (id, e) = failed.into_iter().next().expect("at least one input");
        return Err(e.context(format!("every image failed; first failure: {id}")));
    }
    Ok(())
}
