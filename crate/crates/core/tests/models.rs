mod support;

use cyclegan::models::{discriminate, generate};
use cyclegan::{Discriminator, Error, Generator, Module, NetConfig, Rng, Tape, Tensor};
use support::random_tensor;

fn tiny(size: usize, base: usize, depth: usize, disc_downsamples: usize) -> NetConfig {
    NetConfig { disc_downsamples, ..NetConfig::scaled(size, base, depth) }
}

fn dims(v: &[usize]) -> Vec<usize> {
    v.to_vec()
}

#[test]
fn full_scale_generator_shape_chain() {
    let cfg = NetConfig::full_scale();
    let g = Generator::<f32>::new(&cfg, &mut Rng::new(1)).unwrap();
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, false);
    let mut rng = Rng::new(2);
    let x = tape.constant(Tensor::from_fn(vec![1, 256, 256, 3], |_| rng.uniform() as f32 * 2.0 - 1.0));
    let (y, trace) = g.forward_traced(&mut tape, &bound, x, &mut rng, false).unwrap();
    let got = trace.dims(&tape);
    let want: Vec<(&str, [usize; 4])> = vec![
        ("down0", [1, 128, 128, 64]),
        ("down1", [1, 64, 64, 128]),
        ("down2", [1, 32, 32, 256]),
        ("down3", [1, 16, 16, 512]),
        ("down4", [1, 8, 8, 512]),
        ("down5", [1, 4, 4, 512]),
        ("down6", [1, 2, 2, 512]),
        ("down7", [1, 1, 1, 512]),
        ("up0", [1, 2, 2, 1024]),
        ("up1", [1, 4, 4, 1024]),
        ("up2", [1, 8, 8, 1024]),
        ("up3", [1, 16, 16, 1024]),
        ("up4", [1, 32, 32, 512]),
        ("up5", [1, 64, 64, 256]),
        ("up6", [1, 128, 128, 128]),
        ("output", [1, 256, 256, 3]),
    ];
    assert_eq!(got.len(), want.len());
    for ((name, d), (wname, wd)) in got.iter().zip(&want) {
        assert_eq!(name, wname);
        assert_eq!(d, &dims(wd), "{name}");
    }
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn full_scale_discriminator_shape_chain() {
    let cfg = NetConfig::full_scale();
    let d = Discriminator::<f32>::new(&cfg, &mut Rng::new(1)).unwrap();
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, false);
    let mut rng = Rng::new(3);
    let x = tape.constant(Tensor::from_fn(vec![2, 256, 256, 3], |_| rng.uniform() as f32 * 2.0 - 1.0));
    let (_, trace) = d.forward_traced(&mut tape, &bound, x).unwrap();
    let got: Vec<(String, Vec<usize>)> = trace.dims(&tape);
    let want = [
        ("down0", [2, 128, 128, 64]),
        ("down1", [2, 64, 64, 128]),
        ("down2", [2, 32, 32, 256]),
        ("pad1", [2, 34, 34, 256]),
        ("conv", [2, 31, 31, 512]),
        ("pad2", [2, 33, 33, 512]),
        ("logits", [2, 30, 30, 1]),
    ];
    assert_eq!(got.len(), want.len());
    for ((name, d), (wname, wd)) in got.iter().zip(&want) {
        assert_eq!((name.as_str(), d.as_slice()), (*wname, wd.as_slice()));
    }
}

#[test]
fn forward_matches_direct_reference() {
    let (g, d) = support::suites::oracle_forward_errors();
    assert!(g <= 1e-10, "generator differs by {g:e}");
    assert!(d <= 1e-10, "discriminator differs by {d:e}");
}

#[test]
fn generator_preserves_shape_across_sizes() {
    for (size, depth) in [(16, 4), (32, 5), (64, 6), (32, 3)] {
        let cfg = NetConfig::scaled(size, 4, depth);
        let g = Generator::<f32>::new(&cfg, &mut Rng::new(size as u64)).unwrap();
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn(vec![2, size, size, 3], |_| rng.uniform() as f32 * 2.0 - 1.0);
        let y = generate(&g, &x).unwrap();
        assert_eq!(y.dims(), x.dims(), "size {size} depth {depth}");
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn undersized_image_is_a_config_error() {
    let cfg = NetConfig::scaled(16, 4, 5);
    assert!(matches!(Generator::<f32>::new(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
}

/// Counting oracle: every block is a 4×4 kernel plus instance-norm affine
/// pairs where the block normalizes.
fn expected_generator_params(cfg: &NetConfig) -> usize {
    let ch: Vec<usize> = (0..cfg.depth).map(|i| (cfg.base_channels << i).min(cfg.channel_cap)).collect();
    let mut total = 0;
    let mut cin = 3;
    for (i, &c) in ch.iter().enumerate() {
        total += 16 * cin * c + if i > 0 { 2 * c } else { 0 };
        cin = c;
    }
    for j in 0..cfg.depth - 1 {
        let c = ch[cfg.depth - 2 - j];
        total += 16 * cin * c + 2 * c;
        cin = 2 * c;
    }
    total + 16 * cin * 3 + 3
}

#[test]
fn parameter_count_matches_counting_oracle() {
    let cfg = NetConfig::scaled(32, 8, 5);
    let g = Generator::<f32>::new(&cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(g.param_count(), expected_generator_params(&cfg));
    assert_eq!(g.param_count(), 261_843);

    let d = Discriminator::<f32>::new(&cfg, &mut Rng::new(0)).unwrap();
    // 3→8 (no norm), 8→16, 16→32, mid 32→64 with norm, head 64→1 with bias
    let want = 16 * 3 * 8 + (16 * 8 * 16 + 32) + (16 * 16 * 32 + 64) + (16 * 32 * 64 + 128) + 16 * 64 + 1;
    assert_eq!(d.param_count(), want);

    let full = NetConfig::full_scale();
    let g = Generator::<f32>::new(&full, &mut Rng::new(0)).unwrap();
    assert_eq!(g.param_count(), expected_generator_params(&full));
}

#[test]
fn bottleneck_is_one_pixel() {
    let cfg = NetConfig::scaled(32, 8, 5);
    let g = Generator::<f32>::new(&cfg, &mut Rng::new(0)).unwrap();
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([1, 32, 32, 3]));
    let (_, trace) = g.forward_traced(&mut tape, &bound, x, &mut Rng::new(0), false).unwrap();
    assert_eq!(trace.dims(&tape)[4].1, vec![1, 1, 1, 64]);
}

fn stage(d: &Discriminator<f64>, x: &Tensor<f64>, name: &str) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (_, trace) = d.forward_traced(&mut tape, &bound, xv).unwrap();
    let var = trace.stages.iter().find(|(n, _)| n == name).unwrap().1;
    tape.value(var).clone()
}

/// Instance norm couples every position through per-channel statistics,
/// so locality is exact up to the first normalization and dominant after.
#[test]
fn discriminator_logits_are_local() {
    let cfg = tiny(32, 4, 3, 1);
    let d = Discriminator::<f64>::new(&cfg, &mut Rng::new(8)).unwrap();
    let x = random_tensor(&[1, 32, 32, 3], &mut Rng::new(9));
    let (py, px) = (3usize, 27usize);
    let mut bumped = x.clone();
    bumped.data_mut()[(py * 32 + px) * 3 + 1] += 0.5;

    // Input rows seen by output row `o`, as (first, last).
    let conv_rf = |o: usize| (2 * o as isize - 3, 2 * o as isize + 6);
    let logit_rf = |o: usize| (2 * o as isize - 5, 2 * o as isize + 10);
    let covers = |rf: (isize, isize), p: usize| rf.0 <= p as isize && p as isize <= rf.1;

    let (before, after) = (stage(&d, &x, "conv"), stage(&d, &bumped, "conv"));
    let [_, s, _, c] = before.nhwc().unwrap();
    let mut inside = 0;
    for oy in 0..s {
        for ox in 0..s {
            let moved = (0..c).any(|k| {
                let i = (oy * s + ox) * c + k;
                before.data()[i] != after.data()[i]
            });
            let within = covers(conv_rf(oy), py) && covers(conv_rf(ox), px);
            assert!(within || !moved, "pre-norm ({oy},{ox}) moved outside its receptive field");
            inside += moved as usize;
        }
    }
    assert!(inside > 0);

    let (before, after) = (discriminate(&d, &x).unwrap(), discriminate(&d, &bumped).unwrap());
    let s = before.dims()[1];
    let (mut near, mut far) = (0.0f64, 0.0f64);
    for oy in 0..s {
        for ox in 0..s {
            let delta = (after.data()[oy * s + ox] - before.data()[oy * s + ox]).abs();
            if covers(logit_rf(oy), py) && covers(logit_rf(ox), px) {
                near = near.max(delta);
            } else {
                far = far.max(delta);
            }
        }
    }
    assert!(far < near / 10.0, "outside {far:e} vs inside {near:e}");
}

#[test]
fn zero_head_gives_chance_level_loss() {
    let cfg = tiny(8, 4, 3, 1);
    let mut d = Discriminator::<f64>::new(&cfg, &mut Rng::new(0)).unwrap();
    d.final_kernel = Tensor::zeros(d.final_kernel.dims());
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([1, 8, 8, 3]));
    let logits = d.forward(&mut tape, &bound, x).unwrap();
    assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    let loss = cyclegan::losses::generator_adv_loss(&mut tape, logits).unwrap();
    assert!((tape.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}
