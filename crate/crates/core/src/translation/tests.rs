use lesionforge_nn::{AdamConfig, Graph, ParamId, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use super::train::{alternating_step, Optimizers};
use super::*;
use crate::seed::rng_from_seed;

fn micro_arch() -> TranslatorArch {
    TranslatorArch { side: 8, base_channels: 1, n_down: 1, n_res: 1, disc_channels: 2, disc_layers: 1 }
}

fn small_arch() -> TranslatorArch {
    TranslatorArch { side: 16, base_channels: 4, n_down: 2, n_res: 1, disc_channels: 4, disc_layers: 2 }
}

fn random_batch(n: usize, side: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    Tensor::from_vec(&[n, 1, side, side], (0..n * side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Every parameter nudged off its initial value so zero-initialized blocks
/// do not hide gradient paths.
fn perturbed_micro(seed: u64) -> Translator<f64> {
    let mut tr = Translator::<f64>::new(micro_arch(), seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0x55);
    let ids: Vec<ParamId> = tr.store().ids().collect();
    for id in ids {
        for v in tr.store_mut().get_mut(id).data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    tr
}

#[test]
fn micro_model_is_small() {
    let tr = perturbed_micro(1);
    assert!(tr.store().num_elements() <= 1000, "{}", tr.store().num_elements());
}

#[test]
fn shared_block_is_single_storage() {
    let mut tr = Translator::<f64>::new(small_arch(), 3).unwrap();
    let x = random_batch(1, 16, 4);
    let before_l = tr.encode_batch(Domain::Lesion, &x, None).unwrap().mean;
    let before_h = tr.encode_batch(Domain::NonLesion, &x, None).unwrap().mean;
    // Write through the encoder-side shared block: both encoders see it.
    let shared_enc_b = tr.shared_enc.b.w;
    tr.store_mut().get_mut(shared_enc_b).data_mut().iter_mut().for_each(|v| *v = 0.05);
    let after_l = tr.encode_batch(Domain::Lesion, &x, None).unwrap().mean;
    let after_h = tr.encode_batch(Domain::NonLesion, &x, None).unwrap().mean;
    assert_ne!(before_l, after_l);
    assert_ne!(before_h, after_h);
    // A private parameter only affects its own domain.
    let stem_l = tr.enc[0].stem.b;
    tr.store_mut().get_mut(stem_l).data_mut()[0] += 0.3;
    assert_ne!(tr.encode_batch(Domain::Lesion, &x, None).unwrap().mean, after_l);
    assert_eq!(tr.encode_batch(Domain::NonLesion, &x, None).unwrap().mean, after_h);
    // Shared ids are listed once among the generator parameters.
    let gen = tr.generator_params();
    for id in tr.shared_params() {
        assert_eq!(gen.iter().filter(|&&g| g == id).count(), 1);
    }
}

#[test]
fn encode_is_deterministic_without_rng() {
    let tr = Translator::<f32>::new(small_arch(), 9).unwrap();
    let x = random_batch(2, 16, 1).cast::<f32>();
    let a = tr.encode_batch(Domain::Lesion, &x, None).unwrap();
    let b = tr.encode_batch(Domain::Lesion, &x, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mean, a.z);
    assert_eq!(&a.mean.shape()[1..], &small_arch().latent_shape());
}

#[test]
fn sampled_codes_center_on_the_mean() {
    let tr = Translator::<f64>::new(micro_arch(), 2).unwrap();
    let x = random_batch(1, 8, 2);
    let mut rng = rng_from_seed(77);
    let n = 400;
    let mut diff_sum = 0.0;
    let mut count = 0usize;
    for _ in 0..n {
        let code = tr.encode_batch(Domain::NonLesion, &x, Some(&mut rng)).unwrap();
        assert_eq!(code.mean.shape(), code.z.shape());
        for (z, m) in code.z.data().iter().zip(code.mean.data()) {
            diff_sum += z - m;
            count += 1;
        }
    }
    let tol = 3.0 / (count as f64).sqrt();
    assert!((diff_sum / count as f64).abs() < tol);
}

#[test]
fn decode_range_and_shape() {
    let tr = Translator::<f64>::new(small_arch(), 5).unwrap();
    let mut rng = rng_from_seed(6);
    let [c, h, w] = small_arch().latent_shape();
    let z = Tensor::from_vec(&[3, c, h, w], (0..3 * c * h * w).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .unwrap();
    let out = tr.decode_batch(Domain::Lesion, &z).unwrap();
    assert_eq!(out.shape(), &[3, 1, 16, 16]);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let bad = Tensor::<f64>::zeros(&[1, c + 1, h, w]);
    assert!(tr.decode_batch(Domain::Lesion, &bad).is_err());
}

#[test]
fn translate_contracts() {
    let tr = Translator::<f32>::new(small_arch(), 8).unwrap();
    let x = random_batch(1, 16, 3).cast::<f32>();
    let same = tr.translate_batch(&x, Domain::Lesion, Domain::Lesion).unwrap();
    let code = tr.encode_batch(Domain::Lesion, &x, None).unwrap();
    assert_eq!(same, tr.decode_batch(Domain::Lesion, &code.mean).unwrap());
    let a = tr.translate_batch(&x, Domain::NonLesion, Domain::Lesion).unwrap();
    let b = tr.translate_batch(&x, Domain::NonLesion, Domain::Lesion).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(tr.translate_batch(&x, Domain::Generated, Domain::Lesion).is_err());
    let wrong = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
    assert!(tr.translate_batch(&wrong, Domain::NonLesion, Domain::Lesion).is_err());
}

#[test]
fn kl_closed_form_values() {
    assert_eq!(diag_gaussian_kl(&[0.0; 4], &[0.0; 4]), 0.0);
    assert!((diag_gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    let store = lesionforge_nn::ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let zero = g.input(Tensor::zeros(&[1, 2, 2, 2]));
    let one = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let kz = Translator::<f64>::kl_graph(&mut g, zero);
    let k1 = Translator::<f64>::kl_graph(&mut g, one);
    assert_eq!(g.value(kz).item(), 0.0);
    assert_eq!(g.value(k1).item(), 0.5);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = rng_from_seed(2024);
    for dim in [1usize, 4, 16] {
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let logvar: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            // log q(z) − log p(z) at z ~ q.
            let mut d = 0.0;
            for k in 0..dim {
                let sd = (0.5 * logvar[k]).exp();
                let e: f64 = rng.sample(StandardNormal);
                let z = mu[k] + sd * e;
                d += -0.5 * e * e - 0.5 * logvar[k] + 0.5 * z * z;
            }
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = diag_gaussian_kl(&mu, &logvar);
        assert!((mean - exact).abs() < 3.0 * se, "dim {dim}: mc {mean} vs {exact} (se {se})");
    }
}

#[test]
fn zero_weights_zero_terms() {
    let tr = Translator::<f64>::new(micro_arch(), 1).unwrap();
    let x = random_batch(2, 8, 1);
    let y = random_batch(2, 8, 2);
    let w = LossWeights::zero();
    let terms = tr.total_objective(&x, &y, &w, None).unwrap();
    assert!(terms.values().iter().all(|&v| v == 0.0));
    let gan = tr.gan_loss(Domain::Lesion, &x, &y, &w).unwrap();
    assert_eq!((gan.d_loss, gan.g_loss), (0.0, 0.0));
    assert_eq!(tr.cycle_loss(Domain::Lesion, &x, &w, None).unwrap(), 0.0);
    assert_eq!(tr.vae_loss(Domain::NonLesion, &x, &w, None).unwrap(), 0.0);
}

#[test]
fn uninformative_discriminator_value() {
    let mut tr = Translator::<f64>::new(micro_arch(), 1).unwrap();
    let out = tr.disc[0].out;
    tr.store_mut().get_mut(out.w).data_mut().fill(0.0);
    tr.store_mut().get_mut(out.b).data_mut().fill(0.0);
    let w = LossWeights::default();
    let gan = tr.gan_loss(Domain::Lesion, &random_batch(3, 8, 1), &random_batch(3, 8, 2), &w).unwrap();
    let expected = -w.lambda0 * 2.0 * std::f64::consts::LN_2;
    assert!((gan.objective - expected).abs() < 1e-12);
    assert!((gan.g_loss - w.lambda0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn objective_is_additive_and_bounded() {
    let tr = perturbed_micro(4);
    let x = random_batch(2, 8, 5);
    let y = random_batch(2, 8, 6);
    let w = LossWeights::default();
    let t = tr.total_objective(&x, &y, &w, None).unwrap();
    assert!((t.vae_l - tr.vae_loss(Domain::Lesion, &x, &w, None).unwrap()).abs() < 1e-12);
    assert!((t.vae_h - tr.vae_loss(Domain::NonLesion, &y, &w, None).unwrap()).abs() < 1e-12);
    assert!((t.cc_l - tr.cycle_loss(Domain::Lesion, &x, &w, None).unwrap()).abs() < 1e-12);
    assert!((t.cc_h - tr.cycle_loss(Domain::NonLesion, &y, &w, None).unwrap()).abs() < 1e-12);
    let fake_l = tr.translate_batch(&y, Domain::NonLesion, Domain::Lesion).unwrap();
    assert!((t.gan_l - tr.gan_loss(Domain::Lesion, &x, &fake_l, &w).unwrap().objective).abs() < 1e-12);
    let sum: f64 = t.values()[..6].iter().sum();
    assert_eq!(sum, t.total());
    assert!(t.vae_l >= 0.0 && t.cc_h >= 0.0 && t.gan_l <= 0.0 && t.gan_h <= 0.0);
}

/// Central differences over every parameter in `ids` against the tape.
fn check_gradients(tr: &mut Translator<f64>, ids: &[ParamId], loss: impl Fn(&Translator<f64>, &mut Graph<f64>) -> Var) {
    let analytic = {
        let mut g = Graph::new(tr.store());
        let l = loss(tr, &mut g);
        g.backward(l).unwrap()
    };
    let eval = |tr: &Translator<f64>| {
        let mut g = Graph::new(tr.store());
        let l = loss(tr, &mut g);
        g.value(l).item()
    };
    let h = 1e-6;
    let mut checked = 0;
    for &id in ids {
        let grad = analytic.param(id).cloned().unwrap_or_else(|| Tensor::zeros(tr.store().get(id).shape()));
        for k in 0..grad.len() {
            let orig = tr.store().get(id).data()[k];
            tr.store_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = eval(tr);
            tr.store_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = eval(tr);
            tr.store_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-4);
            assert!((a - numeric).abs() / scale < 1e-3, "{}[{k}]: analytic {a} vs numeric {numeric}", tr.store().name(id));
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn generator_objective_gradients_match_finite_differences() {
    let mut tr = perturbed_micro(11);
    let x = random_batch(2, 8, 12);
    let y = random_batch(2, 8, 13);
    let w = LossWeights::default();
    let ids = tr.generator_params();
    check_gradients(&mut tr, &ids, |tr, g| {
        let l = g.input(x.clone());
        let h = g.input(y.clone());
        tr.joint_forward(g, l, h, &w, None).unwrap().gen_loss
    });
}

#[test]
fn cycle_and_gan_gradients_match_finite_differences() {
    let mut tr = perturbed_micro(21);
    let x = random_batch(2, 8, 22);
    let w = LossWeights::default();
    let gen = tr.generator_params();
    check_gradients(&mut tr, &gen, |tr, g| {
        let xv = g.input(x.clone());
        let mu = tr.encode_graph(g, 1, xv).unwrap();
        tr.cycle_graph(g, 1, xv, mu, mu, &w, None).unwrap().0
    });
    let y = random_batch(2, 8, 23);
    check_gradients(&mut tr, &gen, |tr, g| {
        let real = g.input(x.clone());
        let yv = g.input(y.clone());
        let mu = tr.encode_graph(g, 1, yv).unwrap();
        let fake = tr.decode_graph(g, 0, mu).unwrap();
        tr.gan_graph(g, 0, real, fake, &w).unwrap().g_loss
    });
    let disc = tr.discriminator_params();
    check_gradients(&mut tr, &disc, |tr, g| {
        let real = g.input(x.clone());
        let fake = g.input(y.clone());
        tr.gan_graph(g, 0, real, fake, &w).unwrap().d_loss
    });
}

fn gen_loss_value(tr: &Translator<f64>, x: &Tensor<f64>, y: &Tensor<f64>, w: &LossWeights) -> f64 {
    let mut g = Graph::new(tr.store());
    let l = g.input(x.clone());
    let h = g.input(y.clone());
    let f = tr.joint_forward(&mut g, l, h, w, None).unwrap();
    g.value(f.gen_loss).item()
}

fn disc_objective(tr: &Translator<f64>, x: &Tensor<f64>, y: &Tensor<f64>, fl: &Tensor<f64>, fh: &Tensor<f64>, w: &LossWeights) -> f64 {
    -(tr.gan_loss(Domain::Lesion, x, fl, w).unwrap().d_loss + tr.gan_loss(Domain::NonLesion, y, fh, w).unwrap().d_loss)
}

#[test]
fn alternating_step_descends_and_ascends() {
    let tr0 = perturbed_micro(31);
    let x = random_batch(2, 8, 32);
    let y = random_batch(2, 8, 33);
    let w = LossWeights::default();
    let fl = tr0.translate_batch(&y, Domain::NonLesion, Domain::Lesion).unwrap();
    let fh = tr0.translate_batch(&x, Domain::Lesion, Domain::NonLesion).unwrap();
    let mut tr = tr0.clone();
    let adam = AdamConfig { lr: 1e-4, ..AdamConfig::default() };
    let mut opt = Optimizers::new(&tr, adam);
    alternating_step(&mut tr, &mut opt, &x, &y, &w, None).unwrap();

    // Generator side: new encoder/generator weights, discriminator as before.
    let mut gen_only = tr0.clone();
    for id in tr.generator_params() {
        *gen_only.store_mut().get_mut(id) = tr.store().get(id).clone();
    }
    assert!(gen_loss_value(&gen_only, &x, &y, &w) < gen_loss_value(&tr0, &x, &y, &w));
    // Discriminator side on the fakes it was trained against.
    let mut disc_only = tr0.clone();
    for id in tr.discriminator_params() {
        *disc_only.store_mut().get_mut(id) = tr.store().get(id).clone();
    }
    assert!(disc_objective(&disc_only, &x, &y, &fl, &fh, &w) > disc_objective(&tr0, &x, &y, &fl, &fh, &w));
}

#[test]
fn nan_weights_abort_with_numerical_error() {
    let mut tr = Translator::<f64>::new(micro_arch(), 1).unwrap();
    let stem = tr.enc[0].stem.w;
    tr.store_mut().get_mut(stem).data_mut()[0] = f64::NAN;
    let mut opt = Optimizers::new(&tr, AdamConfig::default());
    let err = alternating_step(&mut tr, &mut opt, &random_batch(1, 8, 1), &random_batch(1, 8, 2), &LossWeights::default(), None)
        .unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
}

fn toy_patches(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let level: f64 = rng.random_range(0.3..0.6);
            Image::from_fn(side, side, |x, y| level + 0.05 * ((x + y) % 3) as f64)
        })
        .collect()
}

#[test]
fn zero_epochs_returns_initialization() {
    let arch = TranslatorArch { side: 8, ..micro_arch() };
    let cfg = TranslatorTrainConfig { arch, epochs: 0, seed: 5, ..TranslatorTrainConfig::default() };
    let out = train_translator(&toy_patches(3, 8, 1), &toy_patches(3, 8, 2), &cfg).unwrap();
    let init = Translator::<f32>::new(arch, 5).unwrap();
    assert_eq!(out.translator.store().snapshot(), init.store().snapshot());
    assert!(out.curve.epochs.is_empty());
    assert_eq!(out.translator.epoch, 0);
}

#[test]
fn curve_has_one_row_per_epoch_and_term() {
    let cfg = TranslatorTrainConfig { arch: micro_arch(), epochs: 3, batch_size: 2, seed: 1, ..TranslatorTrainConfig::default() };
    let out = train_translator(&toy_patches(5, 8, 1), &toy_patches(4, 8, 2), &cfg).unwrap();
    assert_eq!(out.translator.epoch, 3);
    let csv = out.curve.to_csv();
    assert_eq!(csv.lines().count(), 1 + 3 * TERM_NAMES.len());
    assert!(csv.starts_with("epoch,term,value\n1,VAE_l,"));
}

#[test]
fn training_rejects_bad_inputs() {
    let cfg = TranslatorTrainConfig { arch: micro_arch(), ..TranslatorTrainConfig::default() };
    assert!(matches!(train_translator(&[], &toy_patches(2, 8, 1), &cfg), Err(Error::Data(_))));
    assert!(matches!(train_translator(&toy_patches(2, 16, 1), &toy_patches(2, 8, 1), &cfg), Err(Error::Data(_))));
}

#[test]
fn training_is_reproducible_and_checkpoints_roundtrip() {
    let cfg = TranslatorTrainConfig { arch: micro_arch(), epochs: 2, batch_size: 2, seed: 3, ..TranslatorTrainConfig::default() };
    let a = train_translator(&toy_patches(4, 8, 1), &toy_patches(4, 8, 2), &cfg).unwrap();
    let b = train_translator(&toy_patches(4, 8, 1), &toy_patches(4, 8, 2), &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    let ck = a.translator.to_checkpoint(cfg.loss_weights, Some(2.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    ck.save(&path).unwrap();
    let loaded = TranslatorCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let back = Translator::<f32>::from_checkpoint(&loaded).unwrap();
    assert_eq!(back.epoch, 2);
    let p = &toy_patches(1, 8, 9)[0];
    assert_eq!(back.translate(p, Domain::NonLesion, Domain::Lesion).unwrap(), a.translator.translate(p, Domain::NonLesion, Domain::Lesion).unwrap());
}
