//! Central finite-difference checks for every differentiable component.
//!
//! Each `check_*` function draws `instances` random problems and returns
//! the worst relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and
//! numeric gradients.

#![allow(dead_code)]

use digitnet::autoencoders::{Autoencoder, ReconLoss, Vae};
use digitnet::layers::*;
use digitnet::loss::{categorical_crossentropy, softmax_ce_grad};
use digitnet::mnist::PIXELS;
use digitnet::rng::SeededRng;
use digitnet::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - STEP;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

/// Central differences over a chosen subset of coordinates.
pub fn numeric_at(x: &Tensor, coords: &[usize], mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - STEP;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

pub fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Normal values pushed at least `gap` away from zero, so that ReLU kinks
/// are never straddled by a finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut SeededRng) -> Tensor {
    random(shape, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn pairing(y: &Tensor, g: &Tensor) -> f64 {
    y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

fn size(rng: &mut SeededRng, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

pub fn check_conv(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, c, f, k) = (
            size(&mut rng, 1, 2),
            size(&mut rng, 1, 3),
            size(&mut rng, 1, 4),
            size(&mut rng, 1, 3),
        );
        let (h, w) = (size(&mut rng, k as u64, 7), size(&mut rng, k as u64, 7));
        let x = random(&[n, h, w, c], &mut rng);
        let wt = random(&[k, k, c, f], &mut rng);
        let b = random(&[f], &mut rng);
        let y = conv2d_forward(&x, &wt, &b).unwrap();
        let g = random(y.shape(), &mut rng);
        let grads = conv2d_backward(&x, &wt, &g).unwrap();
        let nx = numeric(&x, |x| pairing(&conv2d_forward(x, &wt, &b).unwrap(), &g));
        let nw = numeric(&wt, |wt| pairing(&conv2d_forward(&x, wt, &b).unwrap(), &g));
        let nb = numeric(&b, |b| pairing(&conv2d_forward(&x, &wt, b).unwrap(), &g));
        worst = worst
            .max(relative_error(grads.input.data(), &nx))
            .max(relative_error(grads.weights.data(), &nw))
            .max(relative_error(grads.bias.data(), &nb));
    }
    worst
}

pub fn check_maxpool(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let s = size(&mut rng, 1, 3);
        let (n, c) = (size(&mut rng, 1, 2), size(&mut rng, 1, 3));
        let (h, w) = (size(&mut rng, s as u64, 8), size(&mut rng, s as u64, 8));
        // A permutation of spaced values keeps every window free of near-ties.
        let len = n * h * w * c;
        let values = rng
            .permutation(len)
            .into_iter()
            .map(|p| p as f64 * 0.01)
            .collect();
        let x = Tensor::new(vec![n, h, w, c], values).unwrap();
        let pooled = maxpool2d_forward(&x, s).unwrap();
        let g = random(pooled.output.shape(), &mut rng);
        let analytic = maxpool2d_backward(x.shape(), &pooled.argmax, &g).unwrap();
        let num = numeric(&x, |x| {
            pairing(&maxpool2d_forward(x, s).unwrap().output, &g)
        });
        worst = worst.max(relative_error(analytic.data(), &num));
    }
    worst
}

pub fn check_dense(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, i, o) = (
            size(&mut rng, 1, 4),
            size(&mut rng, 1, 9),
            size(&mut rng, 1, 7),
        );
        let x = random(&[n, i], &mut rng);
        let w = random(&[o, i], &mut rng);
        let b = random(&[o], &mut rng);
        let g = random(&[n, o], &mut rng);
        let grads = dense_backward(&x, &w, &g).unwrap();
        let nx = numeric(&x, |x| pairing(&dense_forward(x, &w, &b).unwrap(), &g));
        let nw = numeric(&w, |w| pairing(&dense_forward(&x, w, &b).unwrap(), &g));
        let nb = numeric(&b, |b| pairing(&dense_forward(&x, &w, b).unwrap(), &g));
        worst = worst
            .max(relative_error(grads.input.data(), &nx))
            .max(relative_error(grads.weights.data(), &nw))
            .max(relative_error(grads.bias.data(), &nb));
    }
    worst
}

pub fn check_relu(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let x = away_from_zero(
            &[size(&mut rng, 1, 4), size(&mut rng, 1, 12)],
            1e-3,
            &mut rng,
        );
        let g = random(x.shape(), &mut rng);
        let analytic = relu_backward(&x, &g).unwrap();
        let num = numeric(&x, |x| pairing(&relu(x), &g));
        worst = worst.max(relative_error(analytic.data(), &num));
    }
    worst
}

pub fn check_dropout(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let x = random(&[size(&mut rng, 1, 4), size(&mut rng, 2, 12)], &mut rng);
        let rate = [0.0, 0.25, 0.5][i % 3];
        let mask_rng = SeededRng::new(seed ^ i as u64);
        let (_, mask) = dropout(&x, rate, Mode::Train, &mut mask_rng.clone()).unwrap();
        let g = random(x.shape(), &mut rng);
        let analytic = dropout_backward(mask.as_deref(), &g).unwrap();
        let num = numeric(&x, |x| {
            pairing(
                &dropout(x, rate, Mode::Train, &mut mask_rng.clone())
                    .unwrap()
                    .0,
                &g,
            )
        });
        worst = worst.max(relative_error(analytic.data(), &num));
    }
    worst
}

pub fn check_softmax(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let z = random(&[size(&mut rng, 1, 4), size(&mut rng, 2, 10)], &mut rng).scale(2.0);
        let g = random(z.shape(), &mut rng);
        let s = softmax(&z).unwrap();
        let analytic = softmax_backward(&s, &g).unwrap();
        let num = numeric(&z, |z| pairing(&softmax(z).unwrap(), &g));
        worst = worst.max(relative_error(analytic.data(), &num));
    }
    worst
}

fn random_onehot(n: usize, classes: usize, rng: &mut SeededRng) -> Tensor {
    let mut t = Tensor::zeros(&[n, classes]);
    for i in 0..n {
        let k = rng.below(classes as u64) as usize;
        t.data_mut()[i * classes + k] = 1.0;
    }
    t
}

/// Softmax followed by batch-mean cross-entropy, differentiated with respect
/// to the logits.
pub fn check_softmax_ce(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, k) = (size(&mut rng, 1, 5), size(&mut rng, 2, 10));
        let z = random(&[n, k], &mut rng).scale(2.0);
        let t = random_onehot(n, k, &mut rng);
        let analytic = softmax_ce_grad(&z, &t).unwrap().scale(1.0 / n as f64);
        let num = numeric(&z, |z| {
            categorical_crossentropy(&softmax(z).unwrap(), &t).unwrap()
        });
        worst = worst.max(relative_error(analytic.data(), &num));
    }
    worst
}

fn unit_interval(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64()).collect()).unwrap()
}

/// VAE objective: gradients with respect to μ, logvar and decoder
/// parameters for fixed noise, plus a sampled subset of encoder parameters
/// through the full model.
pub fn check_vae_elbo(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (latent, hidden, n) = (
            size(&mut rng, 1, 4),
            size(&mut rng, 2, 6),
            size(&mut rng, 1, 3),
        );
        let kind = if i % 4 == 3 {
            ReconLoss::Mse
        } else {
            ReconLoss::Bce
        };
        let mut model = Vae::new(latent, hidden, &mut rng).unwrap();
        for p in &mut model.params {
            *p = p.map(|v| v * 0.5);
        }
        let x = unit_interval(&[n, PIXELS], &mut rng);
        let mu = random(&[n, latent], &mut rng).scale(0.5);
        let lv = random(&[n, latent], &mut rng).scale(0.5);
        let eps = random(&[n, latent], &mut rng);

        let (_, grads) = model.loss_from_latent(&x, &mu, &lv, &eps, kind).unwrap();
        let total = |m: &Vae, mu: &Tensor, lv: &Tensor| {
            m.loss_from_latent(&x, mu, lv, &eps, kind).unwrap().0.total
        };
        let nmu = numeric(&mu, |mu| total(&model, mu, &lv));
        let nlv = numeric(&lv, |lv| total(&model, &mu, lv));
        worst = worst
            .max(relative_error(grads.mu.data(), &nmu))
            .max(relative_error(grads.logvar.data(), &nlv));
        for p in 6..10 {
            let num = numeric(&model.params[p].clone(), |v| {
                let mut m = model.clone();
                m.params[p] = v.clone();
                total(&m, &mu, &lv)
            });
            worst = worst.max(relative_error(grads.params[p].data(), &num));
        }

        let (_, full) = model.loss_and_grads(&x, &eps, kind).unwrap();
        for p in 0..10 {
            let len = model.params[p].len();
            let coords: Vec<usize> = (0..len.min(40))
                .map(|_| rng.below(len as u64) as usize)
                .collect();
            let num = numeric_at(&model.params[p].clone(), &coords, |v| {
                let mut m = model.clone();
                m.params[p] = v.clone();
                m.loss_and_grads(&x, &eps, kind).unwrap().0.total
            });
            let analytic: Vec<f64> = coords.iter().map(|&c| full.params[p].data()[c]).collect();
            worst = worst.max(relative_error(&analytic, &num));
        }
    }
    worst
}

pub fn check_autoencoder(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let latent = size(&mut rng, 1, 6);
        let model = Autoencoder::new(latent, &mut rng).unwrap();
        let x = unit_interval(&[size(&mut rng, 1, 3), PIXELS], &mut rng);
        let (_, grads) = model.loss_and_grads(&x).unwrap();
        for (p, grad) in grads.iter().enumerate() {
            let len = model.params[p].len();
            let coords: Vec<usize> = (0..len.min(60))
                .map(|_| rng.below(len as u64) as usize)
                .collect();
            let num = numeric_at(&model.params[p].clone(), &coords, |v| {
                let mut m = model.clone();
                m.params[p] = v.clone();
                m.loss_and_grads(&x).unwrap().0
            });
            let analytic: Vec<f64> = coords.iter().map(|&c| grad.data()[c]).collect();
            worst = worst.max(relative_error(&analytic, &num));
        }
    }
    worst
}

/// Every layer type composed: conv, relu, pool, dropout, flatten, dense,
/// softmax, with cross-entropy on top and a fixed dropout mask.
pub fn small_network_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            kernel: 3,
            filters: 3,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            kernel: 2,
            filters: 4,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Dropout { rate: 0.25 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 6 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense { units: 4 },
        LayerSpec::Softmax,
    ]
}

/// Output of the first `count` layers in train mode, replaying the same
/// dropout draws as a full forward pass.
fn prefix_output(net: &Network, count: usize, x: &Tensor, drop: &SeededRng) -> Tensor {
    let specs: Vec<LayerSpec> = net.specs().take(count).cloned().collect();
    let mut prefix = Network::with_zero_params(net.input_shape(), specs).unwrap();
    let n = prefix.params().len();
    prefix.set_params(net.params()[..n].to_vec()).unwrap();
    prefix
        .forward(x, Mode::Train, Some(&mut drop.clone()))
        .unwrap()
        .0
}

/// True when no ReLU input lies within `margin` of zero and no max-pool
/// window has its two largest positive entries within `margin`, so a
/// finite-difference step cannot cross a kink.
pub fn kink_free(net: &Network, x: &Tensor, drop: &SeededRng, margin: f64) -> bool {
    let specs: Vec<LayerSpec> = net.specs().cloned().collect();
    for (i, spec) in specs.iter().enumerate() {
        let input = prefix_output(net, i, x, drop);
        match spec {
            LayerSpec::Relu => {
                if input.data().iter().any(|v| v.abs() < margin) {
                    return false;
                }
            }
            LayerSpec::MaxPool2d { size } => {
                let &[n, h, w, c] = input.shape() else {
                    unreachable!()
                };
                let d = input.data();
                for b in 0..n {
                    for oy in 0..h / size {
                        for ox in 0..w / size {
                            for ch in 0..c {
                                let mut v: Vec<f64> = (0..size * size)
                                    .map(|k| {
                                        let (y, xx) = (oy * size + k / size, ox * size + k % size);
                                        d[((b * h + y) * w + xx) * c + ch]
                                    })
                                    .collect();
                                v.sort_by(|a, b| b.total_cmp(a));
                                if v.len() > 1 && v[0] > 0.0 && v[0] - v[1] < margin {
                                    return false;
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    true
}

fn network_loss(net: &Network, x: &Tensor, t: &Tensor, dropout_rng: &SeededRng) -> f64 {
    let (p, _) = net
        .forward(x, Mode::Train, Some(&mut dropout_rng.clone()))
        .unwrap();
    categorical_crossentropy(&p, t).unwrap()
}

/// Full-network check on a 3-sample batch, through both the generic softmax
/// backward and the fused logits path.
pub fn check_network(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    let mut i = 0;
    while i < instances {
        let mut net = Network::new(&[7, 7, 2], small_network_specs(), &mut rng).unwrap();
        let x = random(&[3, 7, 7, 2], &mut rng);
        let t = random_onehot(3, 4, &mut rng);
        let drop = SeededRng::new(seed.wrapping_add(i as u64));
        if !kink_free(&net, &x, &drop, 1e-4) {
            continue;
        }
        let (p, cache) = net
            .forward(&x, Mode::Train, Some(&mut drop.clone()))
            .unwrap();
        if i % 2 == 0 {
            let g = p.sub(&t).unwrap().scale(1.0 / 3.0);
            net.backward_from_logits(cache, &g).unwrap();
        } else {
            let g = Tensor::new(
                p.shape().to_vec(),
                p.data()
                    .iter()
                    .zip(t.data())
                    .map(|(p, t)| -t / p / 3.0)
                    .collect(),
            )
            .unwrap();
            net.backward(cache, &g).unwrap();
        }
        let analytic: Vec<Tensor> = net.grads().to_vec();
        for (k, param) in net.params().to_vec().into_iter().enumerate() {
            let num = numeric(&param, |v| {
                let mut m = net.clone();
                let mut ps = m.params().to_vec();
                ps[k] = v.clone();
                m.set_params(ps).unwrap();
                network_loss(&m, &x, &t, &drop)
            });
            worst = worst.max(relative_error(analytic[k].data(), &num));
        }
        i += 1;
    }
    worst
}

/// Default classifier on a 3-sample batch, checking a random subset of
/// coordinates of every parameter tensor.
pub fn check_default_network(seed: u64, coords_per_tensor: usize) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (mut net, x, t, drop) = loop {
        let net = Network::cnn(&CnnOptions::default(), &mut rng).unwrap();
        let x = Tensor::new(
            vec![3, 28, 28, 1],
            (0..3 * 784).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let t = random_onehot(3, 10, &mut rng);
        let drop = SeededRng::new(rng.next_u64());
        if kink_free(&net, &x, &drop, 1e-6) {
            break (net, x, t, drop);
        }
    };
    let (p, cache) = net
        .forward(&x, Mode::Train, Some(&mut drop.clone()))
        .unwrap();
    net.backward_from_logits(cache, &p.sub(&t).unwrap().scale(1.0 / 3.0))
        .unwrap();
    let analytic = net.grads().to_vec();
    let mut worst = 0.0f64;
    for (k, param) in net.params().to_vec().into_iter().enumerate() {
        let coords: Vec<usize> = (0..coords_per_tensor.min(param.len()))
            .map(|_| rng.below(param.len() as u64) as usize)
            .collect();
        let num = numeric_at(&param, &coords, |v| {
            let mut m = net.clone();
            let mut ps = m.params().to_vec();
            ps[k] = v.clone();
            m.set_params(ps).unwrap();
            network_loss(&m, &x, &t, &drop)
        });
        let a: Vec<f64> = coords.iter().map(|&c| analytic[k].data()[c]).collect();
        worst = worst.max(relative_error(&a, &num));
    }
    worst
}
