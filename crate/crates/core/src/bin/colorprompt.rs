use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;

use colorprompt::augment::prepare;
use colorprompt::colorstats::{
    camera_summary, channel_histogram, histogram_csv, image_stats, parse_stats_csv, stats_csv, Channel, ColorStats,
    Region,
};
use colorprompt::config::{Rehearsal, StreamConfig};
use colorprompt::dataset::{load_directory, market_file_name, synth_generate, Naming, Sample, SynthSpec};
use colorprompt::embed::{evaluate_retrieval, EmbedNet, Probe};
use colorprompt::prompter::{prompter_recover, PrompterNet, PrompterPool, PrompterTrainer};
use colorprompt::raster::{read_image, write_image};
use colorprompt::transfer::{object_agnostic_transfer, transfer_to};
use colorprompt::{seeded, srgb_to_lab, Error, Image, Result};

#[derive(Parser)]
#[command(name = "colorprompt", version, about = "Color statistics, transfer, prompters and continual runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// lαβ statistics of an image or a directory of images, as CSV.
    Stats {
        path: PathBuf,
        /// `full` or `frame:<crop fraction>`.
        #[arg(long, default_value = "full", value_parser = parse_region)]
        region: Region,
        /// One row per camera with all of its pixels pooled.
        #[arg(long)]
        per_camera: bool,
        /// Pooled 8-bit histogram of one sRGB channel instead of statistics.
        #[arg(long, value_parser = parse_channel)]
        hist: Option<Channel>,
        #[arg(long, default_value_t = 256)]
        bins: usize,
        #[arg(long, default_value = "market_style")]
        naming: Naming,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Move an image to target statistics.
    Transfer {
        image: PathBuf,
        /// Stats CSV; the first row is the target.
        #[arg(long, conflicts_with = "target_image", required_unless_present = "target_image")]
        target_stats: Option<PathBuf>,
        #[arg(long)]
        target_image: Option<PathBuf>,
        /// Source statistics from the frame outside a centered box of this fraction.
        #[arg(long)]
        object_agnostic: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a prompter on a directory and store it in a pool file.
    PrompterTrain {
        dir: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Add to an existing pool instead of replacing it.
        #[arg(long)]
        append: bool,
        /// Pool entry name; defaults to the directory name.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = colorprompt::nn::DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value = "market_style")]
        naming: Naming,
    },
    /// Predicted statistics for images, as CSV.
    PrompterPredict {
        pool: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer an image to the statistics a prompter predicts for it.
    Recover {
        pool: PathBuf,
        #[arg(long)]
        task: String,
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic set described by a TOML file.
    Synth {
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a task stream and write its report directory.
    ContinualRun {
        config: PathBuf,
        /// Overrides the config's output directory (default `<config stem>-report`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rehearsal: Option<Rehearsal>,
    },
    /// Retrieval metrics of an embedding checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value = "market_style")]
        naming: Naming,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_region(s: &str) -> std::result::Result<Region, String> {
    match s.split_once(':') {
        None if s == "full" => Ok(Region::Full),
        Some(("frame", f)) => {
            let f: f64 = f.parse().map_err(|e| format!("crop fraction: {e}"))?;
            Region::frame(f).map_err(|e| e.to_string())
        }
        _ => Err(format!("expected `full` or `frame:<fraction>`, got {s:?}")),
    }
}

fn parse_channel(s: &str) -> std::result::Result<Channel, String> {
    match s {
        "R" | "r" => Ok(Channel::R),
        "G" | "g" => Ok(Channel::G),
        "B" | "b" => Ok(Channel::B),
        _ => Err(format!("channel must be R, G or B, got {s:?}")),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// A single image, or every decodable image of a directory.
fn load_any(path: &Path, naming: Naming) -> Result<Vec<Sample>> {
    if path.is_dir() {
        let loaded = load_directory(path, naming)?;
        if loaded.skipped > 0 {
            eprintln!("warning: skipped {} undecodable file(s)", loaded.skipped);
        }
        Ok(loaded.samples)
    } else {
        Ok(vec![Sample { image: read_image(path)?, identity: None, camera: None, source: path.display().to_string() }])
    }
}

fn full_stats(img: &Image) -> Result<ColorStats> {
    image_stats(&srgb_to_lab(img)?, Region::Full)
}

fn stats_cmd(
    path: &Path,
    region: Region,
    per_camera: bool,
    hist: Option<Channel>,
    bins: usize,
    naming: Naming,
    out: Option<&Path>,
) -> Result<()> {
    let samples = load_any(path, naming)?;
    if samples.is_empty() {
        return Err(Error::Empty("no images found"));
    }
    if let Some(ch) = hist {
        let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        return emit(&histogram_csv(&channel_histogram(&imgs, ch, bins)?), out);
    }
    if per_camera {
        if region != Region::Full {
            return Err(Error::InvalidArgument("--per-camera pools full frames; drop --region".into()));
        }
        let labs = samples.iter().map(|s| srgb_to_lab(&s.image)).collect::<Result<Vec<_>>>()?;
        let cams: Vec<Option<String>> = samples.iter().map(|s| s.camera.map(|c| c.to_string())).collect();
        let summary = camera_summary(labs.iter().zip(&cams).map(|(l, c)| (l, c.as_deref())))?;
        return emit(&stats_csv(summary.iter().map(|c| (c.camera_id.as_str(), &c.stats))), out);
    }
    let rows = samples
        .iter()
        .map(|s| Ok((file_name(Path::new(&s.source)), image_stats(&srgb_to_lab(&s.image)?, region)?)))
        .collect::<Result<Vec<_>>>()?;
    emit(&stats_csv(rows.iter().map(|(n, s)| (n.as_str(), s))), out)
}

fn transfer_cmd(
    image: &Path,
    target_stats: Option<&Path>,
    target_image: Option<&Path>,
    object_agnostic: Option<f64>,
    out: &Path,
) -> Result<()> {
    let img = read_image(image)?;
    let target = match (target_stats, target_image) {
        (Some(p), _) => parse_stats_csv(&fs::read_to_string(p)?)?
            .into_iter()
            .next()
            .ok_or(Error::Empty("target stats file has no rows"))?
            .1,
        (None, Some(p)) => full_stats(&read_image(p)?)?,
        (None, None) => return Err(Error::InvalidArgument("need --target-stats or --target-image".into())),
    };
    let result = match object_agnostic {
        Some(f) => object_agnostic_transfer(&img, &target, f)?,
        None => transfer_to(&img, &target)?,
    };
    write_image(out, &result)
}

#[allow(clippy::too_many_arguments)]
fn prompter_train_cmd(
    dir: &Path,
    epochs: usize,
    seed: u64,
    out: &Path,
    append: bool,
    task: Option<String>,
    lr: f64,
    batch_size: usize,
    naming: Naming,
) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument("--batch-size must be at least 2".into()));
    }
    let samples = load_any(dir, naming)?;
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("prompter training needs at least 2 images".into()));
    }
    let task = task.unwrap_or_else(|| file_name(dir));
    let mut pool = if append && out.exists() { PrompterPool::load(out)? } else { PrompterPool::new() };
    if pool.get(&task).is_some() {
        return Err(Error::InvalidArgument(format!("pool already has a prompter for task {task:?}")));
    }
    let imgs: Vec<Image> = samples.into_iter().map(|s| s.image).collect();
    let prepared = prepare(&imgs)?;
    let mut rng = seeded(seed);
    let mut trainer = PrompterTrainer::new(PrompterNet::new(&mut rng), lr);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    println!("epoch,loss");
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<_> = chunk.iter().map(|&i| &prepared[i]).collect();
            sum += trainer.train_step_prepared(&batch, &mut rng)?;
            n += 1;
        }
        println!("{epoch},{}", sum / n as f64);
    }
    pool.push(task, trainer.net)?;
    pool.save(out)
}

fn load_prompter(pool: &Path, task: &str) -> Result<PrompterNet> {
    let pool = PrompterPool::load(pool)?;
    pool.get(task).cloned().ok_or_else(|| {
        let known: Vec<&str> = pool.task_ids().collect();
        Error::InvalidArgument(format!("no prompter for task {task:?}; pool has {known:?}"))
    })
}

fn synth_cmd(spec: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec: SynthSpec = toml::from_str(&fs::read_to_string(spec)?).map_err(|e| Error::Config(e.to_string()))?;
    let samples = synth_generate(&spec, seed)?;
    fs::create_dir_all(out)?;
    let mut manifest = String::from("path,identity,camera\n");
    for (i, s) in samples.iter().enumerate() {
        let identity = s.identity.expect("synthetic samples carry identities");
        let name = match s.camera {
            Some(c) => market_file_name(identity, c, i, "png"),
            None => format!("{identity:04}_{i:06}.png"),
        };
        write_image(&out.join(&name), &s.image)?;
        let cam = s.camera.map(|c| c.to_string()).unwrap_or_default();
        manifest.push_str(&format!("{name},{identity},{cam}\n"));
    }
    fs::write(out.join("manifest.csv"), manifest)?;
    eprintln!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}

fn continual_cmd(config: &Path, out: Option<PathBuf>, seed: Option<u64>, rehearsal: Option<Rehearsal>) -> Result<()> {
    let mut cfg = StreamConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = rehearsal {
        cfg.rehearsal = r;
    }
    let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| {
        let stem = config.file_stem().map_or("stream".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from(format!("{stem}-report"))
    });
    let outcome = colorprompt::pipeline::run_stream(&cfg, Some(&dir))?;
    print!("{}", outcome.report.eval_csv());
    if outcome.report.violations > 0 {
        eprintln!("note: {} reads of earlier tasks' images (replay mode)", outcome.report.violations);
    }
    Ok(())
}

fn probes(samples: &[Sample], net: &EmbedNet) -> Vec<Probe> {
    let labeled: Vec<&Sample> = samples.iter().filter(|s| s.identity.is_some()).collect();
    let feats = net.embed_all(&labeled.iter().map(|s| &s.image).collect::<Vec<_>>());
    labeled
        .iter()
        .zip(feats)
        .map(|(s, feature)| Probe { feature, identity: s.identity.expect("filtered"), camera: s.camera })
        .collect()
}

fn eval_cmd(model: &Path, query: &Path, gallery: &Path, naming: Naming, out: Option<&Path>) -> Result<()> {
    let net = EmbedNet::load(model)?;
    let q = load_directory(query, naming)?.samples;
    let g = load_directory(gallery, naming)?.samples;
    let m = evaluate_retrieval(&probes(&q, &net), &probes(&g, &net));
    emit(&format!("map,rank1,evaluated,skipped\n{},{},{},{}\n", m.map, m.rank1, m.evaluated, m.skipped), out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { path, region, per_camera, hist, bins, naming, out } => {
            stats_cmd(&path, region, per_camera, hist, bins, naming, out.as_deref())
        }
        Command::Transfer { image, target_stats, target_image, object_agnostic, out } => {
            transfer_cmd(&image, target_stats.as_deref(), target_image.as_deref(), object_agnostic, &out)
        }
        Command::PrompterTrain { dir, epochs, seed, out, append, task, lr, batch_size, naming } => {
            prompter_train_cmd(&dir, epochs, seed, &out, append, task, lr, batch_size, naming)
        }
        Command::PrompterPredict { pool, task, images, out } => {
            let net = load_prompter(&pool, &task)?;
            let rows = images
                .iter()
                .map(|p| Ok((file_name(p), net.forward(&read_image(p)?)?)))
                .collect::<Result<Vec<_>>>()?;
            emit(&stats_csv(rows.iter().map(|(n, s)| (n.as_str(), s))), out.as_deref())
        }
        Command::Recover { pool, task, image, out } => {
            let net = load_prompter(&pool, &task)?;
            write_image(&out, &prompter_recover(&net, &read_image(&image)?)?)
        }
        Command::Synth { spec, seed, out } => synth_cmd(&spec, seed, &out),
        Command::ContinualRun { config, out, seed, rehearsal } => continual_cmd(&config, out, seed, rehearsal),
        Command::Eval { model, query, gallery, naming, out } => eval_cmd(&model, &query, &gallery, naming, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
