//! Command-line entry points: `gen-data`, `train`, `eval`, `sweep`, `serve`.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    compare_novel_view, equivariance_from_batches, invariance_score, latent_sweep_render, reconstruction_mse,
};
use crate::io::{
    apply_config, image_grid, load_checkpoint, parse_config, read_dataset, read_png, save_checkpoint, write_dataset,
    write_png, Checkpoint, DatasetReader,
};
use crate::layout::Factor;
use crate::scene::{ObjectKind, SceneParams, AZIMUTH_RANGE, ELEVATION_RANGE, LIGHT_RANGE};
use crate::trainer::{train, BatchGenerator, BatchRatio, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dcign", version, about = "Inverse-graphics autoencoder: data, training, evaluation, serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render single-factor batches into a dataset file.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file and write reports.
    Eval(EvalArgs),
    /// Re-render an image while sweeping one latent.
    Sweep(SweepArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub batches: u64,
    /// azimuth:elevation:light:intrinsic
    #[arg(long, default_value = "1:1:1:10")]
    pub ratio: BatchRatio,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value = "head", value_parser = parse_object)]
    pub object: ObjectKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on this dataset file in order; otherwise batches are rendered on the fly.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log (tab-separated). Defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint; config values still apply on top.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// disentangled or baseline
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub ratio: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Any config key, e.g. `--set learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Plain variational baseline for the novel-view comparison.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of source scenes in the novel-view comparison.
    #[arg(long, default_value_t = 20)]
    pub novel_sources: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale PNG at the model resolution.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub latent: usize,
    /// Start value; defaults to the encoded mean.
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<f64>,
    /// End value; defaults to the encoded mean.
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// Images per grid row; defaults to all in one row.
    #[arg(long)]
    pub columns: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn parse_object(s: &str) -> std::result::Result<ObjectKind, String> {
    match s {
        "head" => Ok(ObjectKind::Head),
        "chair" => Ok(ObjectKind::Chair),
        _ => Err(format!("unknown object {s:?} (head or chair)")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let gen = BatchGenerator::new(a.object, a.ratio, a.batch_size, a.resolution, a.seed)?;
    let header = write_dataset(&a.out, a.resolution, a.object, gen.take(a.batches as usize))?;
    eprintln!("wrote {} batches to {}", header.batches, a.out.display());
    Ok(())
}

/// Training config from the file, then flags in command line order of precedence.
pub fn resolve_train_config(a: &TrainArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut entries = match &a.config {
        Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Vec::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            entries.push((k.to_string(), v));
        }
    };
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("steps", a.steps.map(|v| v.to_string()));
    flag("mode", a.mode.clone());
    flag("ratio", a.ratio.clone());
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        entries.extend(parse_config(&format!("{k} = {v}"))?);
    }
    let mut config = base;
    apply_config(&mut config, &entries)?;
    Ok(config)
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        p.into()
    })
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let (mut trainer, mut log_file) = match &a.resume {
        Some(p) => {
            let mut c: Checkpoint = load_checkpoint(p)?;
            let config = resolve_train_config(a, c.config.clone())?;
            if config.network != c.config.network {
                return Err(Error::config("resumed training cannot change the network"));
            }
            c.config = config;
            let log = fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(log_path(a))
                .map_err(|e| Error::io(log_path(a), e))?;
            (c.into_trainer()?, log)
        }
        None => {
            let config = resolve_train_config(a, TrainConfig::default())?;
            let log = fs::File::create(log_path(a)).map_err(|e| Error::io(log_path(a), e))?;
            (crate::trainer::Trainer::<f32>::new(config)?, log)
        }
    };
    let out = a.out.clone();
    let save = |t: &crate::trainer::Trainer<f32>| save_checkpoint(&out, &Checkpoint::from_trainer(t));
    let summary = match &a.data {
        Some(p) => {
            let reader = DatasetReader::open(p)?;
            let h = reader.header().clone();
            if h.resolution != trainer.config.network.resolution || h.object != trainer.config.object {
                return Err(Error::config(format!(
                    "dataset holds {:?} at {}x{}, training expects {:?} at {}",
                    h.object, h.resolution, h.resolution, trainer.config.object, trainer.config.network.resolution
                )));
            }
            // skip batches a resumed run has already consumed
            let skip = trainer.step_count() as usize;
            train(&mut trainer, reader.skip(skip), &mut log_file, save)?
        }
        None => {
            let mut gen = BatchGenerator::for_config(&trainer.config)?;
            for _ in 0..trainer.step_count() {
                gen.next_batch()?;
            }
            train(&mut trainer, gen, &mut log_file, save)?
        }
    };
    save_checkpoint(&a.out, &Checkpoint::from_trainer(&trainer))?;
    if summary.exhausted {
        eprintln!("data ran out after {} steps", trainer.step_count());
    }
    if let Some(m) = summary.metrics.last {
        eprintln!(
            "step {}: reconstruction {:.3} kl {:.3} (run means {:.3} / {:.3})",
            m.step, m.loss.reconstruction, m.loss.kl, summary.metrics.mean.reconstruction, summary.metrics.mean.kl
        );
    }
    Ok(())
}

/// Azimuth targets of the novel-view comparison.
pub const NOVEL_VIEW_TARGETS: [f64; 5] = [-60.0, -30.0, 0.0, 30.0, 60.0];
/// Connected azimuth window for the azimuth equivariance report.
pub const AZIMUTH_EVAL_RANGE: (f64, f64) = (-60.0, 60.0);

fn write_report(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
    let net = &ckpt.net;
    let layout = net.layout().clone();
    let (header, batches) = read_dataset(&a.data)?;
    if header.resolution != net.resolution() {
        return Err(Error::config(format!(
            "dataset resolution {} differs from model resolution {}",
            header.resolution,
            net.resolution()
        )));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut summary = String::from("metric\tvalue\n");

    for &(factor, _) in layout.extrinsic() {
        let range = match factor {
            Factor::Azimuth => AZIMUTH_EVAL_RANGE,
            Factor::Elevation => ELEVATION_RANGE,
            _ => LIGHT_RANGE,
        };
        if !batches.iter().any(|b| b.active == factor) {
            continue;
        }
        let r = equivariance_from_batches(net, &layout, factor, &batches, range)?;
        write_report(&a.out_dir, &format!("equivariance_{factor}.tsv"), &r.to_tsv())?;
        if factor == Factor::Azimuth {
            let full = equivariance_from_batches(net, &layout, factor, &batches, AZIMUTH_RANGE)?;
            write_report(&a.out_dir, "equivariance_azimuth_full.tsv", &full.to_tsv())?;
        }
        summary.push_str(&format!(
            "pearson_{factor}\t{}\nspearman_{factor}\t{}\npooled_pearson_{factor}\t{}\n",
            r.mean_pearson, r.mean_spearman, r.pooled.pearson
        ));
    }
    if batches.iter().any(|b| b.active.is_extrinsic()) {
        let inv = invariance_score(net, &layout, &batches)?;
        write_report(&a.out_dir, "invariance.tsv", &inv.to_tsv())?;
        summary.push_str(&format!("invariance_ratio\t{}\n", inv.ratio));
    }
    let images: Vec<_> = batches.iter().flat_map(|b| b.images.iter().cloned()).collect();
    if !images.is_empty() {
        summary.push_str(&format!("reconstruction_mse\t{}\n", reconstruction_mse(net, &images)?));
    }

    if let Some(bp) = &a.baseline {
        let base: Checkpoint = load_checkpoint(bp)?;
        let az = batches
            .iter()
            .find(|b| b.active == Factor::Azimuth)
            .ok_or_else(|| Error::config("novel-view comparison needs an azimuth batch"))?;
        let sources: Vec<SceneParams> = batches
            .iter()
            .filter(|b| b.active == Factor::Intrinsic)
            .map(|b| b.params[0].clone())
            .take(a.novel_sources)
            .collect();
        let r = compare_novel_view(
            net,
            &base.net,
            &layout,
            header.object,
            az,
            &sources,
            &NOVEL_VIEW_TARGETS,
            header.resolution,
        )?;
        write_report(&a.out_dir, "novel_view.tsv", &r.to_tsv())?;
        summary.push_str(&format!(
            "novel_view_mse_dcign\t{}\nnovel_view_mse_baseline\t{}\n",
            r.dcign_mse, r.baseline_mse
        ));
    }
    write_report(&a.out_dir, "summary.tsv", &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
    let net = &ckpt.net;
    let image = read_png(&a.image)?;
    let r = net.resolution();
    if image.shape() != [1, r, r] {
        return Err(Error::Dimension(format!(
            "image is {}x{}, the model takes {r}x{r}",
            image.shape()[2],
            image.shape()[1]
        )));
    }
    if a.latent >= net.latent_dim() {
        return Err(Error::Contract(format!(
            "latent {} out of range for {} latents",
            a.latent,
            net.latent_dim()
        )));
    }
    let mu = net.encode_mean(&image)?[a.latent] as f64;
    let sweep = latent_sweep_render(
        net,
        &image,
        a.latent,
        a.from.unwrap_or(mu),
        a.to.unwrap_or(mu),
        a.steps,
    )?;
    let grid = image_grid(&sweep.images, a.columns.unwrap_or(sweep.images.len()))?;
    write_png(&a.out, &grid)
}

pub fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| Error::config(format!("bad address {}:{}", a.host, a.port)))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    eprintln!("serving {} on http://{addr}", a.checkpoint.display());
    rt.block_on(crate::service::serve(ckpt.net, addr))
        .map_err(|e| Error::io(addr.to_string(), e))
}
