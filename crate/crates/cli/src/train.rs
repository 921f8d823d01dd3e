use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use cyclegan::checkpoint::save_checkpoint;
use cyclegan::data::{denormalize, normalize_to_unit_range, AugmentPolicy, ImageRecord, UnpairedDataset};
use cyclegan::models::generate;
use cyclegan::training::{checkpoint_name, fit, loss_csv_path, LossLog};
use cyclegan::{AdamConfig, CycleGanModel, NetConfig, Tensor, TrainConfig, TrainingSession};
use log::info;

use crate::Failure;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding `photos/` and `monet/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Working resolution; a power of two.
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    pub size: u32,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u32).range(1..))]
    pub epochs: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_cycle: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    pub base_channels: u32,
    /// Generator down blocks; defaults to min(8, log2(size)).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub depth: Option<u32>,
    /// Downsample blocks in each discriminator.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub disc_downsamples: u32,
    /// Epochs between checkpoints; the final epoch is always saved.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: u32,
    /// Random horizontal flips during training.
    #[arg(long)]
    pub flip: bool,
    /// Abort on the first undecodable image instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig, String> {
        let size = self.size as usize;
        if !size.is_power_of_two() {
            return Err(format!("--size {size} must be a power of two"));
        }
        let depth = self.depth.map_or_else(|| (size.trailing_zeros() as usize).min(8), |d| d as usize);
        if !(self.lambda_cycle.is_finite() && self.lambda_cycle >= 0.0) {
            return Err(format!("--lambda-cycle {} must be finite and ≥ 0", self.lambda_cycle));
        }
        let net = NetConfig {
            disc_downsamples: self.disc_downsamples as usize,
            ..NetConfig::scaled(size, self.base_channels as usize, depth)
        };
        let config = TrainConfig {
            epochs: self.epochs as usize,
            batch_size: self.batch as usize,
            seed: self.seed,
            lambda_cycle: self.lambda_cycle,
            adam: AdamConfig::default(),
            net,
            out_dir: Some(self.out.clone()),
            checkpoint_every: self.checkpoint_every as usize,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

/// Two rows of `original | translated | cycled`, photo first.
fn sample_grid(model: &CycleGanModel<f32>, photo: &Tensor<f32>, monet: &Tensor<f32>) -> anyhow::Result<ImageRecord> {
    let s = model.net_config().image_size;
    let fake_monet = generate(&model.m_gen, photo)?;
    let cycled_photo = generate(&model.p_gen, &fake_monet)?;
    let fake_photo = generate(&model.p_gen, monet)?;
    let cycled_monet = generate(&model.m_gen, &fake_photo)?;
    let rows = [[photo, &fake_monet, &cycled_photo], [monet, &fake_photo, &cycled_monet]];

    let width = 3 * s;
    let mut pixels = vec![0u8; width * 2 * s * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let img = denormalize(tile, 0)?;
            for y in 0..s {
                let dst = ((r * s + y) * width + c * s) * 3;
                pixels[dst..dst + s * 3].copy_from_slice(&img.pixels[y * s * 3..(y + 1) * s * 3]);
            }
        }
    }
    Ok(ImageRecord::new(width, 2 * s, pixels, "")?)
}

pub fn grid_name(epoch: usize) -> String {
    format!("epoch_{epoch}.png")
}

pub fn run(args: &TrainArgs) -> Result<(), Failure> {
    let config = args.config().map_err(Failure::Usage)?;
    train(config, &args.data, args.flip, args.strict).map_err(Failure::Runtime)
}

fn train(config: TrainConfig, data: &Path, flip: bool, strict: bool) -> anyhow::Result<()> {
    let out = config.out_dir.clone().expect("set from --out");
    let policy = if flip { AugmentPolicy::ResizeFlip } else { AugmentPolicy::Resize };
    let dataset = UnpairedDataset::from_root(data, config.net.image_size, policy, config.seed, strict)
        .with_context(|| format!("loading {}", data.display()))?;
    let steps = dataset.steps_per_epoch(config.batch_size);
    info!(
        "{} photos, {} monet paintings; {} steps per epoch at batch {}",
        dataset.photos().len(),
        dataset.monet().len(),
        steps,
        config.batch_size
    );
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let probe_photo = normalize_to_unit_range::<f32>(&dataset.photos()[0]);
    let probe_monet = normalize_to_unit_range::<f32>(&dataset.monet()[0]);
    let mut session = TrainingSession::<f32>::new(config.clone())?;
    let mut log = LossLog::to_file(loss_csv_path(&out));
    let started = std::time::Instant::now();
    fit(&mut session, &dataset, &mut log, |epoch, s, log| {
        let grid = sample_grid(&s.model, &probe_photo, &probe_monet).map_err(|e| {
            cyclegan::Error::Argument(format!("sample grid: {e:#}"))
        })?;
        grid.save_png(&out.join(grid_name(epoch)))?;
        if let Some(m) = log.epoch_mean(epoch) {
            info!(
                "epoch {epoch}/{} ({:.1?}): photo_gen_loss {:.4} photo_disc_loss {:.4} monet_gen_loss {:.4} monet_disc_loss {:.4}",
                config.epochs,
                started.elapsed(),
                m.photo_gen_loss,
                m.photo_disc_loss,
                m.monet_gen_loss,
                m.monet_disc_loss
            );
        }
        Ok(())
    })?;
    // The last epoch is always saved so the run can be stylized from.
    if config.checkpoint_every == 0 || !config.epochs.is_multiple_of(config.checkpoint_every) {
        save_checkpoint(&session, &out.join(checkpoint_name(config.epochs)))?;
    }
    println!(
        "trained {} epochs ({} steps); outputs in {}",
        config.epochs,
        session.step,
        out.display()
    );
    Ok(())
}
