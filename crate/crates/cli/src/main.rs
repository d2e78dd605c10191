use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lift_core::bench::bench_losses;
use lift_core::clustering::CentroidCache;
use lift_core::image::Image;
use lift_core::io::{self, Dataset};
use lift_core::pipeline::{
    build_cache, evaluate, render_labels, render_rgb, render_view, synthesize, train_data_from_dataset,
    Supervision,
};
use lift_core::scenegen::{NoiseOpts, SceneConfig, BACKGROUND_CLASS};
use lift_core::tracking::{track_iou, track_pointcloud, track_warp, TrackConfig};
use lift_core::training::{train, TrainConfig, Variant};

mod config;
mod files;

use config::RunConfig;
use files::Outputs;

#[derive(Parser)]
#[command(name = "lift", version, about = "Lift noisy 2D instance labels into a 3D field")]
struct Cli {
    /// Worker threads; 0 uses every available core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene with exact and corrupted labels.
    GenScene(GenScene),
    /// Train the fields on a dataset and write a checkpoint.
    Train(Train),
    /// Cluster rendered embeddings into a centroid cache.
    Cluster(Cluster),
    /// Render instance and semantic labels for every dataset view.
    RenderLabels(RenderLabels),
    /// Score predicted labels against ground truth.
    Eval(Eval),
    /// Run a tracking baseline over per-view labels.
    Track(Track),
    /// Time the slow-fast loss against the linear-assignment baseline.
    BenchLoss(BenchLoss),
    /// Write rendered per-pixel embeddings to CSV.
    DumpEmbeddings(DumpEmbeddings),
}

#[derive(Args)]
struct GenScene {
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fixed number of views [default: square-root law in the object count].
    #[arg(long)]
    views: Option<usize>,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Probability of splitting each segment in two.
    #[arg(long, default_value_t = 0.1)]
    p_split: f64,
    /// Probability of flipping a boundary pixel to a neighbouring segment.
    #[arg(long, default_value_t = 0.05)]
    p_flip: f64,
    /// Keep instance IDs consistent across views [default: off].
    #[arg(long)]
    no_permute: bool,
    /// Seed of the label noise [default: --seed].
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON config; keys not given keep their defaults [default: none].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Instance loss [default: config value, sf+conc].
    #[arg(long)]
    variant: Option<Variant>,
    /// Embedding dimension [default: config value, 3].
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Total iterations [default: config value, 5000].
    #[arg(long)]
    iterations: Option<usize>,
    /// [default: config value, 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug)]
enum MinSize {
    Auto,
    Fixed(usize),
}

fn parse_min_size(s: &str) -> Result<MinSize, String> {
    match s {
        "auto" => Ok(MinSize::Auto),
        _ => match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(MinSize::Fixed(k)),
            _ => Err(format!("expected `auto` or a positive integer, got `{s}`")),
        },
    }
}

#[derive(Args)]
struct Cluster {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config; only the labelling keys matter here [default: none].
    #[arg(long)]
    config: Option<PathBuf>,
    /// `auto` sweeps the config's candidates on a tenth of the views.
    #[arg(long, default_value = "auto", value_parser = parse_min_size)]
    min_cluster_size: MinSize,
    /// [default: config value, 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderLabels {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    /// Label directory; reads `instance/`, or `instance_gt/` in a dataset.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory with `instance_gt/`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackMethod {
    Iou,
    Warp,
    Pcl,
}

#[derive(Args)]
struct Track {
    #[arg(long, value_enum)]
    method: TrackMethod,
    /// Label directory; reads `instance/`, or `instance_noisy/` in a dataset.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset with cameras and depth maps.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum IoU for the iou and warp trackers to link two segments.
    #[arg(long, default_value_t = 0.1)]
    min_iou: f64,
    /// Minimum point overlap for the pcl tracker.
    #[arg(long, default_value_t = 0.1)]
    min_overlap: f64,
    /// Matching radius of the pcl tracker, in world units.
    #[arg(long, default_value_t = 0.085)]
    radius: f64,
}

#[derive(Args)]
struct BenchLoss {
    /// Comma-separated label counts K.
    #[arg(long, value_delimiter = ',', default_value = "5,25,100,500")]
    labels: Vec<usize>,
    #[arg(long, default_value_t = 2048)]
    batch: usize,
    /// Timed repeats per K; the fastest is reported.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpEmbeddings {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep every n-th pixel along each axis.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_run(ckpt: &Path) -> Result<(lift_core::fields::Fields, lift_core::fields::ParamStore, TrainConfig)> {
    let (fields, store) = io::load_checkpoint(ckpt)?;
    let tc = sidecar(ckpt, ".train.json");
    let train = if tc.exists() { io::read_json(&tc)? } else { RunConfig::default().train };
    Ok((fields, store, train))
}

fn num_classes(ds: &Dataset, fallback: usize) -> usize {
    ds.scene.as_ref().map_or(fallback, |s| s.num_classes)
}

fn gen_scene(a: GenScene, out: &mut Outputs) -> Result<()> {
    let scene = SceneConfig {
        objects: a.objects,
        seed: a.seed,
        width: a.width,
        height: a.height,
        views: a.views,
        ..SceneConfig::default()
    };
    let noise = NoiseOpts {
        permute: !a.no_permute,
        p_split: a.p_split,
        p_flip: a.p_flip,
        seed: a.noise_seed.unwrap_or(a.seed),
    };
    let syn = synthesize(&scene, &noise)?;
    out.claim(&a.out);
    io::save_dataset(&a.out, &syn.cameras, Some(&syn.scene), &syn.dataset_frames())?;
    println!("{} views of {} objects written to {}", syn.cameras.len(), a.objects, a.out.display());
    Ok(())
}

fn train_cmd(a: Train, out: &mut Outputs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(d) = a.embed_dim {
        cfg.field.embed_dim = d;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let ds = io::load_dataset(&a.data)?;
    let mut field = cfg.field_for(ds.scene.as_ref().map(|s| s.bounds))?;
    field.num_classes = num_classes(&ds, field.num_classes);
    let data = Arc::new(train_data_from_dataset(&ds, field.num_classes)?);
    let fields = lift_core::fields::Fields::new(field)?;
    let (fields, store, log) = train(fields, data, cfg.train.clone())?;
    for s in [".config.json", ".train.json", ".log.csv"] {
        out.claim(&sidecar(&a.out, s));
    }
    out.claim(&a.out);
    io::save_checkpoint(&a.out, &fields, &store)?;
    io::write_json(&sidecar(&a.out, ".train.json"), &cfg.train)?;
    io::write_log(&sidecar(&a.out, ".log.csv"), &log)?;
    if let Some(last) = log.last() {
        // with frozen geometry the photometric loss stops being logged
        let rgb = log.iter().rev().find_map(|r| r.loss_rgb);
        let inst = log.iter().rev().find_map(|r| r.loss_inst);
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!(
            "trained {} iterations ({}); last rgb loss {}, last instance loss {}",
            last.iter + 1,
            cfg.train.variant.as_str(),
            show(rgb),
            show(inst)
        );
    }
    Ok(())
}

fn cluster_cmd(a: Cluster, out: &mut Outputs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let MinSize::Fixed(k) = a.min_cluster_size {
        cfg.label.min_cluster_sizes = vec![k];
    }
    let (fields, store, train) = load_run(&a.ckpt)?;
    let ds = io::load_dataset(&a.data)?;
    let instances = ds.all(Dataset::instance_noisy)?;
    let semantics = ds.all(Dataset::semantic)?;
    let sup = Supervision {
        instances: &instances,
        semantics: &semantics,
    };
    let r = build_cache(&fields, &store, &ds.cameras, &sup, &cfg.label, &train.render_march())?;
    out.claim(&a.out);
    io::write_json(&a.out, &r.cache)?;
    println!(
        "{} instances from {} samples, min cluster size {}",
        r.cache.num_instances(),
        r.samples,
        r.min_cluster_size
    );
    Ok(())
}

fn render_labels_cmd(a: RenderLabels, out: &mut Outputs) -> Result<()> {
    let (fields, store, train) = load_run(&a.ckpt)?;
    let cache: CentroidCache = io::read_json(&a.cache)?;
    cache.validate()?;
    let ds = io::load_dataset(&a.data)?;
    let march = train.render_march();
    let rendered = render_labels(&fields, &store, &ds.cameras, &cache, &march, BACKGROUND_CLASS)?;
    out.claim(&a.out);
    for (i, (r, cam)) in rendered.iter().zip(&ds.cameras).enumerate() {
        let rgb = render_rgb(&fields, &store, cam, &march);
        let img = Image::from_f64(cam.width, cam.height, &rgb);
        files::write_frame(out, &a.out, i, &r.instance, Some(&r.semantic), Some(&img))?;
    }
    println!("{} views rendered to {}", rendered.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: Eval, out: &mut Outputs) -> Result<()> {
    let gt_ds = io::load_dataset(&a.gt)?;
    let gt = gt_ds.all(Dataset::instance_gt)?;
    let pred = files::read_first(&a.pred, &["instance", "instance_gt"])?
        .with_context(|| format!("{} has no instance/ or instance_gt/ maps", a.pred.display()))?;
    if pred.len() != gt.len() {
        bail!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len());
    }
    let pred_sem = files::read_maps(&a.pred, "semantic")?;
    let gt_sem = files::read_maps(&a.gt, "semantic")?;
    let n_classes = gt_sem
        .iter()
        .chain(&pred_sem)
        .flatten()
        .flat_map(|m| m.data.iter().copied())
        .max()
        .map_or(0, |m| m as usize + 1)
        .max(num_classes(&gt_ds, 0));
    let pred_rgb = files::read_images(&a.pred)?;
    let gt_rgb = files::read_images(&a.gt)?;
    let images = match (&pred_rgb, &gt_rgb) {
        (Some(p), Some(g)) => Some((p.as_slice(), g.as_slice())),
        _ => None,
    };
    let report = evaluate(&pred, pred_sem.as_deref(), &gt, gt_sem.as_deref(), n_classes, images)?;
    out.claim(&a.report);
    io::write_json(&a.report, &report)?;
    println!("pq_scene {:.4} pq_frame {:.4}", report.pq_scene.pq, report.pq_frame);
    Ok(())
}

fn track_cmd(a: Track, out: &mut Outputs) -> Result<()> {
    let frames = files::read_first(&a.pred, &["instance", "instance_noisy"])?
        .with_context(|| format!("{} has no instance/ or instance_noisy/ maps", a.pred.display()))?;
    let semantic = match files::read_maps(&a.pred, "semantic")? {
        Some(s) => Some(s),
        None => files::read_maps(&a.data, "semantic")?,
    };
    if let Some(s) = semantic.as_ref().filter(|s| s.len() != frames.len()) {
        bail!("{} instance maps but {} semantic maps", frames.len(), s.len());
    }
    let cfg = TrackConfig {
        min_iou: a.min_iou,
        min_overlap: a.min_overlap,
        radius: a.radius,
    };
    let tracked = match a.method {
        TrackMethod::Iou => track_iou(&frames, &cfg)?,
        method => {
            let ds = io::load_dataset(&a.data)?;
            let depths = ds.all(Dataset::depth)?;
            match method {
                TrackMethod::Warp => track_warp(&frames, &depths, &ds.cameras, &cfg)?,
                _ => track_pointcloud(&frames, &depths, &ds.cameras, &cfg)?,
            }
        }
    };
    out.claim(&a.out);
    for (i, m) in tracked.iter().enumerate() {
        files::write_frame(out, &a.out, i, m, semantic.as_ref().map(|s| &s[i]), None)?;
    }
    println!("{} frames tracked to {}", tracked.len(), a.out.display());
    Ok(())
}

fn bench_cmd(a: BenchLoss, out: &mut Outputs) -> Result<()> {
    if a.labels.is_empty() {
        bail!("--labels needs at least one K");
    }
    let rows = bench_losses(&a.labels, a.batch, a.repeats, a.dim, a.seed)?;
    let mut w = files::csv_writer(out, &a.out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in &rows {
        println!("K={:<5} slow-fast {:.6}s  linear-assignment {:.6}s", r.k, r.slowfast_s, r.linassign_s);
    }
    Ok(())
}

fn dump_cmd(a: DumpEmbeddings, out: &mut Outputs) -> Result<()> {
    if a.stride == 0 {
        bail!("--stride must be positive");
    }
    let (fields, store, train) = load_run(&a.ckpt)?;
    let ds = io::load_dataset(&a.data)?;
    let march = train.render_march();
    let dim = fields.embed_dim();
    let mut w = files::csv_writer(out, &a.out)?;
    let mut header: Vec<String> = ["view", "x", "y", "class", "opacity", "instance_gt"].map(String::from).to_vec();
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    let has_gt = ds.has("instance_gt");
    let mut rows = 0usize;
    for (v, cam) in ds.cameras.iter().enumerate() {
        let r = render_view(&fields, &store, cam, &march, BACKGROUND_CLASS);
        let gt = if has_gt { Some(ds.instance_gt(v)?) } else { None };
        for y in (0..cam.height).step_by(a.stride) {
            for x in (0..cam.width).step_by(a.stride) {
                let p = y * cam.width + x;
                if r.classes[p] == BACKGROUND_CLASS {
                    continue;
                }
                let mut rec = vec![
                    v.to_string(),
                    x.to_string(),
                    y.to_string(),
                    r.classes[p].to_string(),
                    r.opacity[p].to_string(),
                    gt.as_ref().map_or(String::new(), |g| g.data[p].to_string()),
                ];
                rec.extend(r.embeddings[p * dim..(p + 1) * dim].iter().map(f64::to_string));
                w.write_record(&rec)?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    println!("{rows} embeddings written to {}", a.out.display());
    Ok(())
}

fn run(cli: Cli, out: &mut Outputs) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the worker pool")?;
    match cli.cmd {
        Cmd::GenScene(a) => gen_scene(a, out),
        Cmd::Train(a) => train_cmd(a, out),
        Cmd::Cluster(a) => cluster_cmd(a, out),
        Cmd::RenderLabels(a) => render_labels_cmd(a, out),
        Cmd::Eval(a) => eval_cmd(a, out),
        Cmd::Track(a) => track_cmd(a, out),
        Cmd::BenchLoss(a) => bench_cmd(a, out),
        Cmd::DumpEmbeddings(a) => dump_cmd(a, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = Outputs::default();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.remove();
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
