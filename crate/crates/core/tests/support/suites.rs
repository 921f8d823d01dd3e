//! Whole-system checks shared by the integration tests and the
//! acceptance report.

use cyclegan::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use cyclegan::models::{discriminate, generate};
use cyclegan::tape::Activation;
use cyclegan::training::compute_gradients;
use cyclegan::{
    AdamConfig, AdamState, CycleGanModel, Discriminator, Generator, LossBundle, Module, NetConfig, Padding, Rng,
    Tape, Tensor, TrainConfig, TrainingSession,
};

use super::reference::{discriminator_forward, generator_forward, Img, RefAdam};
use super::{away_from_zero, grad_check, random_tensor};

pub const GRAD_FLOOR: f64 = 1e-6;

fn weights(dims: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(dims, &mut Rng::new(seed))
}

/// Worst relative error of every tape primitive against central
/// differences, keyed by a short label.
pub fn primitive_gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = Rng::new(1);
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        let x = random_tensor(&[2, 5, 6, 2], &mut rng);
        let k = random_tensor(&[3, 3, 2, 3], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        let err = grad_check(&[x, k, b], GRAD_FLOOR, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            let w = weights(t.value(y).dims(), 77);
            t.dot(y, &w)
        });
        out.push((format!("conv2d s{stride} {padding:?}"), err));
    }
    for stride in [1, 2] {
        let x = random_tensor(&[2, 3, 3, 2], &mut rng);
        let k = random_tensor(&[4, 4, 3, 2], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        let err = grad_check(&[x, k, b], GRAD_FLOOR, |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], Some(v[2]), stride)?;
            let w = weights(t.value(y).dims(), 78);
            t.dot(y, &w)
        });
        out.push((format!("conv2d_transpose s{stride}"), err));
    }

    let a = random_tensor(&[1, 3, 3, 2], &mut rng);
    let b = random_tensor(&[1, 3, 3, 3], &mut rng);
    let err = grad_check(&[a.clone(), b], GRAD_FLOOR, |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let p = t.pad_spatial(c, 2)?;
        let w = weights(t.value(p).dims(), 79);
        t.dot(p, &w)
    });
    out.push(("concat+pad+dot".into(), err));
    let c = random_tensor(&[1, 3, 3, 2], &mut rng);
    let err = grad_check(&[a, c], GRAD_FLOOR, |t, v| {
        let s = t.add(v[0], v[1])?;
        let s = t.scale(s, -2.5)?;
        let s = t.add(s, v[0])?;
        t.mean(s)
    });
    out.push(("add+scale+mean".into(), err));

    let x = random_tensor(&[2, 3, 4, 3], &mut rng);
    let g = random_tensor(&[3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let err = grad_check(&[x, g, b], GRAD_FLOOR, |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
        let w = weights(t.value(y).dims(), 80);
        t.dot(y, &w)
    });
    out.push(("instance_norm".into(), err));

    for kind in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Tanh] {
        let x = away_from_zero(&[4, 6], &mut rng);
        let err = grad_check(&[x], GRAD_FLOOR, |t, v| {
            let y = t.activation(v[0], kind)?;
            let w = weights(t.value(y).dims(), 81);
            t.dot(y, &w)
        });
        out.push((format!("{kind:?}"), err));
    }

    let x = random_tensor(&[50], &mut rng);
    let err = grad_check(&[x], GRAD_FLOOR, |t, v| {
        // same seed on every evaluation, so the mask is fixed
        let y = t.dropout(v[0], 0.5, &mut Rng::new(123), true)?;
        let w = weights(t.value(y).dims(), 82);
        t.dot(y, &w)
    });
    out.push(("dropout".into(), err));

    let z = random_tensor(&[2, 3, 3, 1], &mut rng).map(|v| 3.0 * v);
    let targets = Tensor::from_fn([2, 3, 3, 1], |i| (i % 3) as f64 / 2.0);
    let err = grad_check(&[z], GRAD_FLOOR, |t, v| t.bce_with_logits_mean(v[0], &targets));
    out.push(("bce_with_logits_mean".into(), err));

    let a = away_from_zero(&[3, 4], &mut rng);
    let b = Tensor::zeros([3, 4]);
    let err = grad_check(&[a, b], GRAD_FLOOR, |t, v| t.l1_mean(v[0], v[1]));
    out.push(("l1_mean".into(), err));
    out
}

/// 8×8 networks: a 3-level generator and a one-downsample discriminator.
pub fn tiny8() -> NetConfig {
    NetConfig { disc_downsamples: 1, ..NetConfig::scaled(8, 4, 3) }
}

/// Fresh networks have gamma ≈ 0 and beta = 0, which parks normalized
/// activations on the ReLU kinks (exactly so at a 1×1 bottleneck). Central
/// differences need a point where no kink lies within one step.
pub fn generic_point(model: &mut CycleGanModel<f64>, rng: &mut Rng) {
    for (_, net) in model.networks_mut() {
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(net.params_mut()) {
            if name.ends_with("gamma") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.5 + rng.uniform());
            } else if name.ends_with("beta") {
                p.data_mut().iter_mut().for_each(|v| *v = rng.uniform() - 0.5);
            }
        }
    }
}

/// The four networks in model order, each paired with the loss it owns.
pub type Composite = (&'static str, fn(&LossBundle) -> f64);

pub const COMPOSITES: [Composite; 4] = [
    ("monet generator total", |b| b.monet_gen_loss),
    ("photo generator total", |b| b.photo_gen_loss),
    ("monet discriminator", |b| b.monet_disc_loss),
    ("photo discriminator", |b| b.photo_disc_loss),
];

/// Worst relative error between the training step's gradient for network
/// `which` and central differences of that network's own loss, over up to
/// `per_tensor` coordinates of every parameter tensor.
pub fn composite_fd_error(which: usize, per_tensor: usize) -> f64 {
    let mut rng = Rng::new(100);
    let mut base = CycleGanModel::<f64>::new(&tiny8(), 10.0, &mut rng).unwrap();
    generic_point(&mut base, &mut rng);
    let photo = Tensor::from_fn(vec![2, 8, 8, 3], |_| rng.uniform() * 1.8 - 0.9);
    let monet = Tensor::from_fn(vec![2, 8, 8, 3], |_| rng.uniform() * 1.8 - 0.9);
    // dropout masks repeat exactly when every evaluation reuses the seed
    let seed = 77;
    let select = COMPOSITES[which].1;

    let mut model = base.clone();
    compute_gradients(&mut model, &photo, &monet, &mut Rng::new(seed)).unwrap();
    let analytic: Vec<Tensor<f64>> = model.networks()[which].1.params().into_iter().map(|(_, t)| t.clone()).collect();

    let mut worst: f64 = 0.0;
    for (ti, t) in analytic.iter().enumerate() {
        let stride = (t.len() / per_tensor).max(1);
        for i in (0..t.len()).step_by(stride).take(per_tensor) {
            let mut x = vec![base.networks()[which].1.params()[ti].1.data()[i]];
            let numeric = central_difference(&mut x, DEFAULT_STEP, None, |x| {
                let mut probe = base.clone();
                probe.networks_mut()[which].1.params_mut()[ti].data_mut()[i] = x[0];
                let (b, _) = compute_gradients(&mut probe, &photo, &monet, &mut Rng::new(seed)).unwrap();
                select(&b)
            })[0];
            worst = worst.max(relative_error(t.grad().unwrap()[i], numeric, GRAD_FLOOR));
        }
    }
    worst
}

/// Largest absolute difference between the engine and the direct-loop
/// reference for (generator, discriminator) on 8×8 inputs at f64.
pub fn oracle_forward_errors() -> (f64, f64) {
    let cfg = tiny8();
    let mut rng = Rng::new(11);
    let mut g = Generator::<f64>::new(&cfg, &mut rng).unwrap();
    let mut d = Discriminator::<f64>::new(&cfg, &mut rng).unwrap();
    // non-trivial affine parameters and biases so every term is exercised
    for p in g.params_mut().into_iter().chain(d.params_mut()) {
        *p = random_tensor(p.dims(), &mut rng);
    }
    let x = random_tensor(&[2, 8, 8, 3], &mut rng);
    let max_diff = |a: &Tensor<f64>, b: &Img| {
        assert_eq!(a.len(), b.data.len());
        a.data().iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    let ge = max_diff(&generate(&g, &x).unwrap(), &generator_forward(&g, &Img::from_tensor(&x)));
    let de = max_diff(&discriminate(&d, &x).unwrap(), &discriminator_forward(&d, &Img::from_tensor(&x)));
    (ge, de)
}

/// Trains a tiny discriminator with this crate's Adam and with the scalar
/// reference side by side; `Err` names the first step whose bits differ.
pub fn adam_matches_reference(steps: usize) -> Result<(), String> {
    let mut rng = Rng::new(9);
    let mut d = Discriminator::<f64>::new(&tiny8(), &mut rng).unwrap();
    let x = random_tensor(&[2, 8, 8, 3], &mut rng);
    let targets = Tensor::from_fn(vec![2, 2, 2, 1], |i| (i % 2) as f64);
    let config = AdamConfig::default();
    let mut ours = AdamState::new(config, d.params().into_iter().map(|(_, t)| t));
    let mut flat: Vec<Vec<f64>> = d.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut refs: Vec<RefAdam> =
        flat.iter().map(|f| RefAdam::new(f.len(), config.lr, config.beta1, config.beta2, config.eps)).collect();

    for step in 1..=steps {
        let mut tape = Tape::new();
        let bound = d.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let logits = d.forward(&mut tape, &bound, xv).unwrap();
        let loss = tape.bce_with_logits_mean(logits, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        d.store_grads(&grads, &bound);
        let g: Vec<Vec<f64>> = d.params().iter().map(|(_, t)| t.grad().unwrap().to_vec()).collect();
        ours.step(d.params_mut()).unwrap();
        for ((theta, r), g) in flat.iter_mut().zip(&mut refs).zip(&g) {
            r.update(theta, g);
        }
        for ((name, t), theta) in d.params().iter().zip(&flat) {
            if !t.data().iter().zip(theta).all(|(a, b)| a.to_bits() == b.to_bits()) {
                return Err(format!("{name} diverged at step {step}"));
            }
        }
    }
    if ours.step != steps as u64 {
        return Err(format!("step counter reads {} after {steps} steps", ours.step));
    }
    Ok(())
}

/// Smooth, distinct test images for the two domains.
pub fn smooth_pair(size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let coord = |i: usize| {
        let (p, c) = (i / 3, (i % 3) as f32);
        ((p / size) as f32 / size as f32, (p % size) as f32 / size as f32, c)
    };
    let photo = Tensor::from_fn(vec![1, size, size, 3], |i| {
        let (y, _, c) = coord(i);
        0.8 * (y * (c + 1.0)).sin()
    });
    let monet = Tensor::from_fn(vec![1, size, size, 3], |i| {
        let (_, x, c) = coord(i);
        0.7 * (3.0 * x + c).cos()
    });
    (photo, monet)
}

pub struct SmokeRun {
    pub monet_gen: Vec<f64>,
    pub disc: Vec<(f64, f64)>,
}

impl SmokeRun {
    /// Final 10-step moving average of the monet generator total relative
    /// to the moving average at step 10.
    pub fn monet_gen_ratio(&self) -> f64 {
        let ma = cyclegan::training::moving_average(&self.monet_gen, 10);
        ma[ma.len() - 1] / ma[9]
    }

    pub fn disc_in_open_band(&self, hi: f64) -> bool {
        self.disc.iter().all(|&(a, b)| a > 0.0 && a < hi && b > 0.0 && b < hi)
    }
}

/// One image per domain at 64×64, `steps` updates, fixed seed.
pub fn overfit_smoke(steps: usize) -> SmokeRun {
    let net = NetConfig::scaled(64, 8, 6);
    let cfg = TrainConfig { net, batch_size: 1, seed: 7, ..TrainConfig::default() };
    let mut session = TrainingSession::<f32>::new(cfg).expect("valid config");
    let (photo, monet) = smooth_pair(64);
    let mut run = SmokeRun { monet_gen: Vec::new(), disc: Vec::new() };
    for _ in 0..steps {
        let b = session.train_step(&photo, &monet).expect("finite step");
        run.monet_gen.push(b.monet_gen_loss);
        run.disc.push((b.photo_disc_loss, b.monet_disc_loss));
    }
    run
}
