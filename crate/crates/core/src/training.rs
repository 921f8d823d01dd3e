//! The composite four-network model, its training step and the epoch loop.
//!
//! A step evaluates every forward pass and gradient against the current
//! parameters, then applies the four Adam updates together.

use std::path::{Path, PathBuf};

use crate::data::UnpairedDataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{self, DEFAULT_IDENTITY_WEIGHT};
use crate::models::{Discriminator, Generator, NetConfig, IMAGE_CHANNELS};
use crate::nn::Module;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LAMBDA_CYCLE: f64 = 10.0;

/// `m_gen` maps photo→monet, `p_gen` monet→photo; each discriminator
/// judges its own domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleGanModel<T> {
    pub m_gen: Generator<T>,
    pub p_gen: Generator<T>,
    pub m_disc: Discriminator<T>,
    pub p_disc: Discriminator<T>,
    pub lambda_cycle: f64,
    pub identity_weight: f64,
}

impl<T: Element> CycleGanModel<T> {
    pub fn new(net: &NetConfig, lambda_cycle: f64, rng: &mut Rng) -> Result<Self> {
        if !(lambda_cycle >= 0.0 && lambda_cycle.is_finite()) {
            return Err(Error::Config(format!("lambda_cycle {lambda_cycle} must be finite and ≥ 0")));
        }
        Ok(Self {
            m_gen: Generator::new(net, rng)?,
            p_gen: Generator::new(net, rng)?,
            m_disc: Discriminator::new(net, rng)?,
            p_disc: Discriminator::new(net, rng)?,
            lambda_cycle,
            identity_weight: DEFAULT_IDENTITY_WEIGHT,
        })
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.m_gen.config
    }

    /// The four networks in checkpoint order.
    pub fn networks(&self) -> [(&'static str, &dyn Module<T>); 4] {
        [
            ("m_gen", &self.m_gen),
            ("p_gen", &self.p_gen),
            ("m_disc", &self.m_disc),
            ("p_disc", &self.p_disc),
        ]
    }

    pub fn networks_mut(&mut self) -> [(&'static str, &mut dyn Module<T>); 4] {
        [
            ("m_gen", &mut self.m_gen),
            ("p_gen", &mut self.p_gen),
            ("m_disc", &mut self.m_disc),
            ("p_disc", &mut self.p_disc),
        ]
    }
}

/// One Adam state per network.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers<T> {
    pub m_gen: AdamState<T>,
    pub p_gen: AdamState<T>,
    pub m_disc: AdamState<T>,
    pub p_disc: AdamState<T>,
}

impl<T: Element> Optimizers<T> {
    pub fn new(model: &CycleGanModel<T>, config: AdamConfig) -> Self {
        let state = |m: &dyn Module<T>| AdamState::new(config, m.params().into_iter().map(|(_, t)| t));
        Self {
            m_gen: state(&model.m_gen),
            p_gen: state(&model.p_gen),
            m_disc: state(&model.m_disc),
            p_disc: state(&model.p_disc),
        }
    }

    pub fn states(&self) -> [(&'static str, &AdamState<T>); 4] {
        [("m_gen", &self.m_gen), ("p_gen", &self.p_gen), ("m_disc", &self.m_disc), ("p_disc", &self.p_disc)]
    }

    pub fn states_mut(&mut self) -> [(&'static str, &mut AdamState<T>); 4] {
        [
            ("m_gen", &mut self.m_gen),
            ("p_gen", &mut self.p_gen),
            ("m_disc", &mut self.m_disc),
            ("p_disc", &mut self.p_disc),
        ]
    }
}

/// The four per-step scalars; generator values are totals (adversarial +
/// cycle + identity).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub photo_gen_loss: f64,
    pub photo_disc_loss: f64,
    pub monet_gen_loss: f64,
    pub monet_disc_loss: f64,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        [self.photo_gen_loss, self.photo_disc_loss, self.monet_gen_loss, self.monet_disc_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// How many parameter tensors of each network the backward pass reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradCoverage {
    pub unreached: Vec<String>,
    pub total: usize,
}

fn scalar<T: Element>(tape: &Tape<T>, v: Var, term: &str) -> Result<f64> {
    let value = tape.value(v).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(term.to_string()));
    }
    Ok(value)
}

fn check_batches<T: Element>(photo: &Tensor<T>, monet: &Tensor<T>, size: usize) -> Result<()> {
    let [n, h, w, c] = photo.nhwc()?;
    if photo.dims() != monet.dims() || n == 0 || (h, w, c) != (size, size, IMAGE_CHANNELS) {
        return Err(Error::shape(
            "train_step",
            format!(
                "photo {:?} and monet {:?} batches must both be n×{size}×{size}×3",
                photo.dims(),
                monet.dims()
            ),
        ));
    }
    Ok(())
}

fn coverage<T: Element>(
    name: &str,
    net: &dyn Module<T>,
    grads: &Gradients<T>,
    bound: &[Var],
    out: &mut GradCoverage,
) {
    for ((pname, _), var) in net.params().into_iter().zip(bound) {
        out.total += 1;
        if !grads.reachable(*var) {
            out.unreached.push(format!("{name}/{pname}"));
        }
    }
}

/// Runs all forward passes and writes each network's gradient into its
/// parameters' grad buffers, without updating anything.
pub fn compute_gradients<T: Element>(
    model: &mut CycleGanModel<T>,
    photo: &Tensor<T>,
    monet: &Tensor<T>,
    rng: &mut Rng,
) -> Result<(LossBundle, GradCoverage)> {
    let size = model.net_config().image_size;
    check_batches(photo, monet, size)?;
    let lambda = model.lambda_cycle;
    let id_weight = model.identity_weight;
    let mut cov = GradCoverage { unreached: Vec::new(), total: 0 };

    // Generators: the discriminators are frozen constants here.
    let mut tape = Tape::new();
    let mg = model.m_gen.bind(&mut tape, true);
    let pg = model.p_gen.bind(&mut tape, true);
    let md = model.m_disc.bind(&mut tape, false);
    let pd = model.p_disc.bind(&mut tape, false);
    let real_photo = tape.constant(photo.clone());
    let real_monet = tape.constant(monet.clone());

    let fake_monet = model.m_gen.forward(&mut tape, &mg, real_photo, rng, true)?;
    let cycled_photo = model.p_gen.forward(&mut tape, &pg, fake_monet, rng, true)?;
    let fake_photo = model.p_gen.forward(&mut tape, &pg, real_monet, rng, true)?;
    let cycled_monet = model.m_gen.forward(&mut tape, &mg, fake_photo, rng, true)?;
    let same_monet = model.m_gen.forward(&mut tape, &mg, real_monet, rng, true)?;
    let same_photo = model.p_gen.forward(&mut tape, &pg, real_photo, rng, true)?;

    let disc_fake_monet = model.m_disc.forward(&mut tape, &md, fake_monet)?;
    let disc_fake_photo = model.p_disc.forward(&mut tape, &pd, fake_photo)?;

    let monet_adv = losses::generator_adv_loss(&mut tape, disc_fake_monet)?;
    let photo_adv = losses::generator_adv_loss(&mut tape, disc_fake_photo)?;
    let cycle_photo = losses::cycle_consistency_loss(&mut tape, real_photo, cycled_photo, lambda)?;
    let cycle_monet = losses::cycle_consistency_loss(&mut tape, real_monet, cycled_monet, lambda)?;
    let total_cycle = tape.add(cycle_photo, cycle_monet)?;
    let monet_id = losses::identity_loss(&mut tape, real_monet, same_monet, lambda, id_weight)?;
    let photo_id = losses::identity_loss(&mut tape, real_photo, same_photo, lambda, id_weight)?;

    let terms = [
        (monet_adv, "monet generator adversarial loss"),
        (photo_adv, "photo generator adversarial loss"),
        (cycle_photo, "photo cycle-consistency loss"),
        (cycle_monet, "monet cycle-consistency loss"),
        (monet_id, "monet identity loss"),
        (photo_id, "photo identity loss"),
    ];
    let mut values = [0.0; 6];
    for (slot, (v, term)) in values.iter_mut().zip(terms) {
        *slot = scalar(&tape, v, term)?;
    }
    let [m_adv, p_adv, c_photo, c_monet, m_id, p_id] = values;
    let cycle = c_photo + c_monet;

    // Each generator's own total differs from this sum only by terms that
    // do not depend on its parameters, so one backward pass serves both.
    let mut joint = tape.add(monet_adv, photo_adv)?;
    joint = tape.add(joint, total_cycle)?;
    joint = tape.add(joint, monet_id)?;
    joint = tape.add(joint, photo_id)?;
    let grads = tape.backward(joint)?;
    coverage("m_gen", &model.m_gen, &grads, &mg, &mut cov);
    coverage("p_gen", &model.p_gen, &grads, &pg, &mut cov);
    model.m_gen.store_grads(&grads, &mg);
    model.p_gen.store_grads(&grads, &pg);
    let fake_monet_value = tape.value(fake_monet).detached();
    let fake_photo_value = tape.value(fake_photo).detached();
    drop(grads);
    drop(tape);

    // Discriminators, on detached generator outputs.
    let mut tape = Tape::new();
    let md = model.m_disc.bind(&mut tape, true);
    let pd = model.p_disc.bind(&mut tape, true);
    let real_monet = tape.constant(monet.clone());
    let real_photo = tape.constant(photo.clone());
    let fake_monet = tape.constant(fake_monet_value);
    let fake_photo = tape.constant(fake_photo_value);
    let m_real = model.m_disc.forward(&mut tape, &md, real_monet)?;
    let m_fake = model.m_disc.forward(&mut tape, &md, fake_monet)?;
    let p_real = model.p_disc.forward(&mut tape, &pd, real_photo)?;
    let p_fake = model.p_disc.forward(&mut tape, &pd, fake_photo)?;
    let monet_disc = losses::discriminator_loss(&mut tape, m_real, m_fake)?;
    let photo_disc = losses::discriminator_loss(&mut tape, p_real, p_fake)?;
    let m_disc_value = scalar(&tape, monet_disc, "monet discriminator loss")?;
    let p_disc_value = scalar(&tape, photo_disc, "photo discriminator loss")?;
    let joint = tape.add(monet_disc, photo_disc)?;
    let grads = tape.backward(joint)?;
    coverage("m_disc", &model.m_disc, &grads, &md, &mut cov);
    coverage("p_disc", &model.p_disc, &grads, &pd, &mut cov);
    model.m_disc.store_grads(&grads, &md);
    model.p_disc.store_grads(&grads, &pd);

    let bundle = LossBundle {
        photo_gen_loss: p_adv + cycle + p_id,
        photo_disc_loss: p_disc_value,
        monet_gen_loss: m_adv + cycle + m_id,
        monet_disc_loss: m_disc_value,
    };
    Ok((bundle, cov))
}

/// One simultaneous update of all four networks.
pub fn train_step<T: Element>(
    model: &mut CycleGanModel<T>,
    optimizers: &mut Optimizers<T>,
    photo: &Tensor<T>,
    monet: &Tensor<T>,
    rng: &mut Rng,
) -> Result<LossBundle> {
    let (bundle, _) = compute_gradients(model, photo, monet, rng)?;
    optimizers.m_gen.step(model.m_gen.params_mut())?;
    optimizers.p_gen.step(model.p_gen.params_mut())?;
    optimizers.m_disc.step(model.m_disc.params_mut())?;
    optimizers.p_disc.step(model.p_disc.params_mut())?;
    for (_, net) in model.networks_mut() {
        net.params_mut().into_iter().for_each(Tensor::clear_grad);
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_cycle: f64,
    pub adam: AdamConfig,
    pub net: NetConfig,
    pub out_dir: Option<PathBuf>,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            seed: 0,
            lambda_cycle: DEFAULT_LAMBDA_CYCLE,
            adam: AdamConfig::default(),
            net: NetConfig::full_scale(),
            out_dir: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        self.net.validate_generator()?;
        self.net.validate_discriminator()
    }
}

/// Everything a run mutates: the networks, their optimizers, the
/// training RNG and the global step count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSession<T> {
    pub config: TrainConfig,
    pub model: CycleGanModel<T>,
    pub optimizers: Optimizers<T>,
    pub rng: Rng,
    pub step: u64,
    pub epochs_done: usize,
}

impl<T: Element> TrainingSession<T> {
    /// Fresh networks. Weights come from stream 0 of the seed, dropout
    /// from stream 1, shuffling from the dataset's own streams.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Rng::with_stream(config.seed, 0);
        let model = CycleGanModel::new(&config.net, config.lambda_cycle, &mut init)?;
        let optimizers = Optimizers::new(&model, config.adam);
        Ok(Self { rng: Rng::with_stream(config.seed, 1), config, model, optimizers, step: 0, epochs_done: 0 })
    }

    pub fn train_step(&mut self, photo: &Tensor<T>, monet: &Tensor<T>) -> Result<LossBundle> {
        let bundle = train_step(&mut self.model, &mut self.optimizers, photo, monet, &mut self.rng)?;
        self.step += 1;
        Ok(bundle)
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,photo_gen_loss,photo_disc_loss,monet_gen_loss,monet_disc_loss";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub bundle: LossBundle,
}

/// Formats with at least `digits` significant digits, in plain decimal.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.prec$}", prec = digits.saturating_sub(1));
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        let b = &self.bundle;
        let f = |v| format_significant(v, 8);
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            f(b.photo_gen_loss),
            f(b.photo_disc_loss),
            f(b.monet_gen_loss),
            f(b.monet_disc_loss)
        )
    }
}

/// Loss history, optionally mirrored to a CSV file at each flush.
#[derive(Debug, Default)]
pub struct LossLog {
    rows: Vec<LossRow>,
    path: Option<PathBuf>,
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rewrites `path` with the full history on every flush.
    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        Self { rows: Vec::new(), path: Some(path.into()) }
    }

    pub fn append(&mut self, epoch: usize, step: usize, bundle: LossBundle) {
        self.rows.push(LossRow { epoch, step, bundle });
    }

    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    /// Mean of each loss over the rows of `epoch`.
    pub fn epoch_mean(&self, epoch: usize) -> Option<LossBundle> {
        let rows: Vec<&LossBundle> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| &r.bundle).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&LossBundle) -> f64| rows.iter().map(|b| f(b)).sum::<f64>() / n;
        Some(LossBundle {
            photo_gen_loss: mean(|b| b.photo_gen_loss),
            photo_disc_loss: mean(|b| b.photo_disc_loss),
            monet_gen_loss: mean(|b| b.monet_gen_loss),
            monet_disc_loss: mean(|b| b.monet_disc_loss),
        })
    }

    /// Replaces the file atomically, so readers never see a partial table.
    pub fn flush(&mut self) -> Result<()> {
        match &self.path {
            Some(path) => write_atomic(path, self.to_csv_string().as_bytes()),
            None => Ok(()),
        }
    }
}

/// Rolling window mean of a loss series.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch}.cygn")
}

/// Trains for the configured number of epochs. `on_epoch_end` runs after
/// the loss log flush and any checkpoint of that epoch.
pub fn fit<T: Element>(
    session: &mut TrainingSession<T>,
    dataset: &UnpairedDataset,
    log: &mut LossLog,
    mut on_epoch_end: impl FnMut(usize, &TrainingSession<T>, &LossLog) -> Result<()>,
) -> Result<()> {
    let cfg = session.config.clone();
    cfg.validate()?;
    if dataset.image_size() != cfg.net.image_size {
        return Err(Error::Config(format!(
            "dataset prepared at {} px but the networks expect {}",
            dataset.image_size(),
            cfg.net.image_size
        )));
    }
    let steps = dataset.steps_per_epoch(cfg.batch_size);
    if steps == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the larger domain ({} photos, {} monet)",
            cfg.batch_size,
            dataset.photos().len(),
            dataset.monet().len()
        )));
    }
    for epoch in session.epochs_done + 1..=cfg.epochs {
        for (i, (photo, monet)) in dataset.batches::<T>(cfg.batch_size, epoch)?.enumerate() {
            let bundle = session.train_step(&photo, &monet)?;
            log.append(epoch, i + 1, bundle);
        }
        log.flush()?;
        session.epochs_done = epoch;
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                crate::checkpoint::save_checkpoint(session, &dir.join(checkpoint_name(epoch)))?;
            }
        }
        on_epoch_end(epoch, session, log)?;
    }
    Ok(())
}

pub fn loss_csv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("losses.csv")
}
