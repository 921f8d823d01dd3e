use anyhow::Context;
use cyclegan::checkpoint::load_checkpoint;
use cyclegan::data::{augment, decode_image, denormalize, normalize_to_unit_range, AugmentPolicy};
use cyclegan::models::generate;
use cyclegan::Rng;
use log::info;

use crate::{Direction, StylizeArgs};

/// Output is written at the checkpoint's working resolution.
pub fn run(args: &StylizeArgs) -> anyhow::Result<()> {
    let session = load_checkpoint::<f32>(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let size = session.model.net_config().image_size;
    let input = decode_image(&args.input)?;
    let resized = augment(&input, size, &mut Rng::new(0), AugmentPolicy::Resize)?;
    let generator = match args.direction {
        Direction::Photo2monet => &session.model.m_gen,
        Direction::Monet2photo => &session.model.p_gen,
    };
    let translated = generate(generator, &normalize_to_unit_range(&resized))?;
    denormalize(&translated, 0)?.save_png(&args.output)?;
    info!(
        "{} ({}×{}) → {} ({size}×{size})",
        args.input.display(),
        input.width,
        input.height,
        args.output.display()
    );
    Ok(())
}
