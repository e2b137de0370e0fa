use std::fs;

use clap::Args;
use serde::Serialize;
use soft_core::fixtures::{linear_action_map, linear_bc_demonstration, planted_objects, PlantedParams};
use soft_core::trace::{save_trace, write_demonstration};
use soft_core::{atomic, pnm, seed, Error};

use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct FixtureArgs {
    /// `planted-objects` or `linear-bc`.
    #[arg(long)]
    pub kind: String,
    /// Scenes (planted-objects) or demonstrations (linear-bc).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Planted objects per scene; defaults to 3, or 2 for linear-bc.
    #[arg(long)]
    pub objects: Option<usize>,
    /// Frames per demonstration.
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Action dimension for linear-bc.
    #[arg(long, default_value_t = 4)]
    pub actions: usize,
    /// Standard deviation of Gaussian noise added to linear-bc actions.
    #[arg(long, default_value_t = 0.0)]
    pub action_noise: f64,
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    objects: usize,
    rows: usize,
    cols: usize,
    /// Per patch token: object index or -1.
    token_truth: &'a [i64],
    object_classes: &'a [usize],
}

#[derive(Serialize)]
struct ActionMap {
    actions: usize,
    input: usize,
    w: Vec<Vec<f64>>,
}

pub fn run(args: &FixtureArgs, global: &GlobalArgs, config: &soft_core::config::PipelineConfig) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    if args.count == 0 {
        return Err(Error::InvalidArgument("--count must be positive".into()).into());
    }
    match args.kind.as_str() {
        "planted-objects" => planted(args, out, config.seed),
        "linear-bc" => linear_bc(args, out, config.seed),
        other => Err(Error::UnknownFixture(other.to_string()).into()),
    }
}

fn params(objects: usize) -> anyhow::Result<PlantedParams> {
    if objects == 0 || objects > 4 {
        return Err(Error::InvalidArgument(format!("--objects must be in 1..=4, got {objects}")).into());
    }
    Ok(PlantedParams { objects, shared_class: objects >= 2, ..PlantedParams::default() })
}

fn planted(args: &FixtureArgs, out: &std::path::Path, base: u64) -> anyhow::Result<()> {
    let p = params(args.objects.unwrap_or(3))?;
    fs::create_dir_all(out.join("truth"))?;
    for i in 0..args.count {
        let scene = planted_objects(&p, seed::derive(base, "fixture-scene", i as u64));
        let name = format!("scene_{i:03}");
        save_trace(&scene.bundle, &out.join(format!("{name}.soft")))?;
        let truth: Vec<i32> = scene.pixel_truth.iter().map(|&t| t as i32).collect();
        let (w, h) = (scene.bundle.rgb.width(), scene.bundle.rgb.height());
        pnm::save_label_pgm(&truth, w, h, &out.join("truth").join(format!("{name}.pgm")))?;
        let sidecar = TruthSidecar {
            objects: p.objects,
            rows: p.rows,
            cols: p.cols,
            token_truth: &scene.token_truth,
            object_classes: &scene.object_classes,
        };
        atomic::write_atomic(&out.join("truth").join(format!("{name}.json")), &serde_json::to_vec(&sidecar)?)?;
    }
    println!("wrote {} planted-object traces to {}", args.count, out.display());
    Ok(())
}

fn linear_bc(args: &FixtureArgs, out: &std::path::Path, base: u64) -> anyhow::Result<()> {
    let p = params(args.objects.unwrap_or(2))?;
    if args.frames == 0 || args.actions == 0 {
        return Err(Error::InvalidArgument("--frames and --actions must be positive".into()).into());
    }
    if !(args.action_noise.is_finite() && args.action_noise >= 0.0) {
        return Err(Error::InvalidArgument("--action-noise must be finite and non-negative".into()).into());
    }
    let input = p.objects * p.feat_dim;
    let w = linear_action_map(args.actions, input, seed::derive(base, "fixture-w", 0));
    fs::create_dir_all(out)?;
    for d in 0..args.count {
        let demo_seed = seed::derive(base, "fixture-demo", d as u64);
        let (mut demo, _) = linear_bc_demonstration(&p, args.frames, &w, demo_seed)?;
        if args.action_noise > 0.0 {
            use rand_distr::{Distribution, Normal};
            let dist = Normal::new(0.0, args.action_noise).expect("validated sigma");
            let mut rng = seed::rng(demo_seed, "fixture-action-noise", 0);
            for a in demo.actions.iter_mut().flatten() {
                *a += dist.sample(&mut rng);
            }
        }
        write_demonstration(&demo, &out.join(format!("demo_{d:03}")))?;
    }
    let map = ActionMap { actions: args.actions, input, w: w.rows().into_iter().map(|r| r.to_vec()).collect() };
    atomic::write_atomic(&out.join("W.json"), &serde_json::to_vec_pretty(&map)?)?;
    println!("wrote {} linear-bc demonstrations to {}", args.count, out.display());
    Ok(())
}
