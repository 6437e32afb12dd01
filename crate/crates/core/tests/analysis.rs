mod support;

use digitnet::analysis::*;
use digitnet::image::{parse_pgm, read_pgm};
use digitnet::layers::{CnnOptions, LayerSpec, Network, MNIST_INPUT};
use digitnet::rng::SeededRng;
use digitnet::Tensor;
use support::data::fixture_dataset;
use support::gradcheck::random;

/// Two nested loops over filter pairs, straight from the definition.
fn brute_force(weights: &Tensor) -> Vec<f64> {
    let s = weights.shape();
    let (len, f) = (s[0] * s[1] * s[2], s[3]);
    let w = weights.data();
    let mut out = vec![0.0; f * f];
    for a in 0..f {
        for b in 0..f {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for p in 0..len {
                let (x, y) = (w[p * f + a], w[p * f + b]);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            out[a * f + b] = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
        }
    }
    out
}

#[test]
fn matrix_matches_brute_force_exactly() {
    let mut rng = SeededRng::new(21);
    for f in [2, 8, 32] {
        for (k, c) in [(3, 1), (5, 4), (2, 3)] {
            let w = random(&[k, k, c, f], &mut rng);
            let m = similarity_matrix(&w).unwrap();
            assert_eq!(m.values, brute_force(&w), "F={f} k={k} C={c}");
            for i in 0..f {
                assert!((m.get(i, i) - 1.0).abs() < 1e-9);
                for j in 0..f {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    assert!((-1.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }
    }
}

#[test]
fn pair_counts_monotone_in_threshold() {
    let mut rng = SeededRng::new(22);
    for f in [2, 8, 32] {
        let m = similarity_matrix(&random(&[3, 3, 2, f], &mut rng)).unwrap();
        let mut last = usize::MAX;
        for step in 0..=40 {
            let t = (-0.95 + step as f64 * 0.04875).min(1.0);
            let r = similar_pairs(&m, t, false).unwrap();
            assert!(r.pairs.len() <= last);
            assert!((0.0..=1.0).contains(&r.ratio));
            assert!(r.pairs.iter().all(|p| p.similarity >= t && p.i < p.j));
            assert!(r
                .pairs
                .windows(2)
                .all(|w| w[0].similarity >= w[1].similarity));
            last = r.pairs.len();
        }
    }
}

#[test]
fn activation_maps_match_direct_convolution() {
    let mut rng = SeededRng::new(23);
    let net = Network::cnn(&CnnOptions::default(), &mut rng).unwrap();
    let image = fixture_dataset().image(0);
    let maps = activation_maps(&net, &image, 0).unwrap();
    assert_eq!(maps.len(), 32);
    let (w, b) = net.layer_params(0).unwrap();
    let px = image.data();
    for m in &maps {
        assert_eq!(m.map.shape(), &[26, 26]);
        let f = m.filter_index;
        for y in 0..26 {
            for x in 0..26 {
                let mut acc = b.data()[f];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += px[(y + dy) * 28 + x + dx] * w.data()[(dy * 3 + dx) * 32 + f];
                    }
                }
                let expected = acc.max(0.0);
                assert!((m.map.data()[y * 26 + x] - expected).abs() < 1e-9);
            }
        }
    }
    let second = activation_maps(&net, &image, 2).unwrap();
    assert_eq!(second.len(), 16);
    assert_eq!(second[0].map.shape(), &[22, 22]);
    assert!(second
        .iter()
        .all(|m| m.map.data().iter().all(|&v| v >= 0.0)));
}

#[test]
fn activation_map_errors_and_zero_case() {
    let net = Network::with_zero_params(&MNIST_INPUT, CnnOptions::default().layers()).unwrap();
    let zero = Tensor::zeros(&[28, 28, 1]);
    let maps = activation_maps(&net, &zero, 0).unwrap();
    assert!(maps.iter().all(|m| m.map.data().iter().all(|&v| v == 0.0)));
    assert_eq!(
        activation_maps(&net, &zero, 1)
            .unwrap_err()
            .category()
            .as_str(),
        "user"
    );
    assert!(activation_maps(&net, &zero, 99).is_err());
    assert!(activation_maps(&net, &Tensor::zeros(&[2, 28, 28, 1]), 0).is_err());
}

#[test]
fn analysis_of_a_network_is_deterministic() {
    let net = Network::cnn(&CnnOptions::default(), &mut SeededRng::new(5)).unwrap();
    let a = report_csv(&analyze_network(&net, &[0.5, 0.6], false).unwrap());
    let b = report_csv(&analyze_network(&net, &[0.5, 0.6], false).unwrap());
    assert_eq!(a, b);
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("1,3,32,0.5,"));
    assert!(rows[3].starts_with("2,5,16,0.5,"));
    let reports = analyze_network(&net, &[0.5, 0.6], true).unwrap();
    assert!(reports.iter().all(|r| r.absolute));
}

#[test]
fn figures_render() {
    let net = Network::cnn(&CnnOptions::default(), &mut SeededRng::new(6)).unwrap();
    let (w, _) = net.layer_params(0).unwrap();
    let grid = filter_grid(w).unwrap();
    assert_eq!((grid.width, grid.height), (6 * 12 + 5, 6 * 12 + 5));
    let pair = SimilarPair {
        i: 0,
        j: 1,
        similarity: 0.75,
    };
    let fig = pair_figure(&net, 2, pair, &fixture_dataset().image(3)).unwrap();
    assert_eq!(fig.width, 5 * 56 + 4 * 2);
    assert_eq!(parse_pgm(&fig.to_pgm()).unwrap(), fig);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.pgm");
    grid.save_pgm(&path).unwrap();
    assert_eq!(read_pgm(&path).unwrap(), grid);
}

#[test]
fn sweep_needs_checkpoints_or_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = SweepConfig {
        filter_counts: vec![2, 3],
        ..SweepConfig::default()
    };
    let err = sweep(&config, dir.path(), None).unwrap_err();
    assert_eq!(err.category().as_str(), "user");
}

#[test]
fn small_sweep_trains_then_reuses_checkpoints() {
    let data = fixture_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut config = SweepConfig {
        filter_counts: vec![2, 4],
        ..SweepConfig::default()
    };
    config.training.epochs = 1;
    config.training.batch_size = 16;
    let first = sweep(&config, dir.path(), Some((&data, &data))).unwrap();
    assert_eq!(first.len(), 2 * 2 * 2);
    assert!(sweep_checkpoint_path(dir.path(), 4).is_file());
    let again = sweep(&config, dir.path(), None).unwrap();
    assert_eq!(report_csv(&first), report_csv(&again));
    for pair in first.chunks(2) {
        assert!(pair[1].pairs.len() <= pair[0].pairs.len());
    }
    let wrong = SweepConfig {
        filter_counts: vec![2],
        options: CnnOptions {
            conv2_kernel: 3,
            ..CnnOptions::default()
        },
        ..config.clone()
    };
    assert!(sweep(&wrong, dir.path(), None).is_err());
    assert!(matches!(
        config.architecture(8)[2],
        LayerSpec::Conv2d { filters: 8, .. }
    ));
}
