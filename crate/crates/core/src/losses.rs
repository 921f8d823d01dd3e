//! The four CycleGAN objectives, built on tape primitives.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Weight of the identity term relative to `lambda_cycle`.
pub const DEFAULT_IDENTITY_WEIGHT: f64 = 0.5;

/// BCE of the discriminator's verdict on generated images against "real".
pub fn generator_adv_loss<T: Element>(tape: &mut Tape<T>, fake_logits: Var) -> Result<Var> {
    let ones = Tensor::ones(tape.value(fake_logits).dims());
    tape.bce_with_logits_mean(fake_logits, &ones)
}

/// `0.5 · (bce(real, 1) + bce(fake, 0))`; a chance-level discriminator scores ln 2.
pub fn discriminator_loss<T: Element>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let ones = Tensor::ones(tape.value(real_logits).dims());
    let zeros = Tensor::zeros(tape.value(fake_logits).dims());
    let real = tape.bce_with_logits_mean(real_logits, &ones)?;
    let fake = tape.bce_with_logits_mean(fake_logits, &zeros)?;
    let sum = tape.add(real, fake)?;
    tape.scale(sum, 0.5)
}

/// `λ · mean|real − cycled|`
pub fn cycle_consistency_loss<T: Element>(tape: &mut Tape<T>, real: Var, cycled: Var, lambda_cycle: f64) -> Result<Var> {
    let l1 = tape.l1_mean(real, cycled)?;
    tape.scale(l1, lambda_cycle)
}

/// `λ · weight · mean|real − same|`, where `same` is the generator applied
/// to an image already in its target domain.
pub fn identity_loss<T: Element>(
    tape: &mut Tape<T>,
    real: Var,
    same: Var,
    lambda_cycle: f64,
    weight: f64,
) -> Result<Var> {
    let l1 = tape.l1_mean(real, same)?;
    tape.scale(l1, lambda_cycle * weight)
}
