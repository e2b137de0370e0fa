use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use soft_core::metrics::{self, MetricOptions};
use soft_core::trace::load_trace;
use soft_core::{atomic, pnm, Error};

use crate::{file_stem, GlobalArgs};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted PGM masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth PGM masks; every truth mask needs a prediction.
    #[arg(long)]
    pub truth: PathBuf,
    /// Average MSC over truth segments instead of weighting by size.
    #[arg(long)]
    pub msc_unweighted: bool,
    /// Score the truth background as a segment in MSC and keep it in ARI.
    #[arg(long)]
    pub include_background: bool,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
}

pub fn run_eval(args: &EvalArgs, global: &GlobalArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let out = if out.extension().is_some_and(|e| e == "csv") {
        out.to_path_buf()
    } else {
        fs::create_dir_all(out)?;
        out.join("eval.csv")
    };
    let opts = MetricOptions {
        ari_ignore_background: !args.include_background,
        msc_include_background: args.include_background,
        msc_weighted: !args.msc_unweighted,
        ..MetricOptions::default()
    };
    let pattern = args.truth.join("*.pgm");
    let truths = crate::expand_glob(&pattern.to_string_lossy())?;
    let mut csv = String::from("image_id,ari,msc\n");
    let (mut ari_sum, mut msc_sum) = (0.0, 0.0);
    for truth_path in &truths {
        let id = file_stem(truth_path);
        let pred_path = args.pred.join(format!("{id}.pgm"));
        let (truth, tw, th) =
            pnm::load_label_pgm(truth_path).with_context(|| format!("reading {}", truth_path.display()))?;
        let (pred, pw, ph) =
            pnm::load_label_pgm(&pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
        if (tw, th) != (pw, ph) {
            return Err(Error::Invalid(format!("{id}: prediction is {pw}x{ph}, truth is {tw}x{th}")).into());
        }
        let s = metrics::score(&pred, &truth, &opts).with_context(|| format!("scoring {id}"))?;
        csv.push_str(&format!("{id},{},{}\n", s.ari, s.msc));
        ari_sum += s.ari;
        msc_sum += s.msc;
    }
    atomic::write_atomic(&out, csv.as_bytes())?;
    let n = truths.len() as f64;
    println!("{} images: mean ari {:.4}, mean msc {:.4}", truths.len(), ari_sum / n, msc_sum / n);
    Ok(())
}

pub fn run_viz(args: &VizArgs, global: &GlobalArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let bundle = load_trace(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let (labels, w, h) = pnm::load_label_pgm(&args.mask).with_context(|| format!("reading {}", args.mask.display()))?;
    if (w, h) != bundle.rgb.dimensions() {
        return Err(Error::Invalid(format!(
            "mask is {w}x{h} but the frame is {}x{}",
            bundle.rgb.width(),
            bundle.rgb.height()
        ))
        .into());
    }
    let labels: Vec<i32> = labels.into_iter().map(|l| l as i32).collect();
    pnm::save_ppm(&pnm::overlay(&bundle.rgb, &labels)?, out)?;
    Ok(())
}
