use super::*;

fn small() -> Geometry {
    Geometry {
        image_hw: 16,
        depth_hw: 8,
    }
}

fn channel_means(s: &Sample) -> [f64; 3] {
    let n = s.image.len() / 3;
    let d = s.image.data();
    [0, 1, 2].map(|c| d[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
}

#[test]
fn labels_follow_requested_counts() {
    let spec = default_source_spec(0, 1);
    let only_spoof = generate_domain(&spec, 0, 5, small());
    assert!(only_spoof.iter().all(|s| s.label == SPOOF));
    let mixed = generate_domain(&spec, 3, 4, small());
    assert_eq!(mixed.iter().filter(|s| s.label == LIVE).count(), 3);
    assert_eq!(mixed.len(), 7);
}

#[test]
fn generation_is_deterministic() {
    let spec = default_source_spec(1, 9);
    assert_eq!(generate_domain(&spec, 4, 4, small()), generate_domain(&spec, 4, 4, small()));
}

#[test]
fn depth_and_pixel_invariants() {
    for k in 0..3 {
        for s in generate_domain(&default_source_spec(k, 2), 10, 10, Geometry::default()) {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            assert_eq!(s.depth.shape(), &[1, 16, 16]);
            if s.label == LIVE {
                assert_eq!(s.depth.data().iter().cloned().fold(f64::MIN, f64::max), 1.0);
                assert!(s.depth.data().iter().all(|&v| v >= 0.0));
            } else {
                assert!(s.depth.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn mean_intensity_tracks_gain() {
    let mut means = Vec::new();
    for gain in [0.5, 1.0, 1.5] {
        let mut spec = default_source_spec(0, 3);
        spec.style.gain = [gain; 3];
        spec.style.bias = [0.0; 3];
        let samples = generate_domain(&spec, 50, 50, small());
        let m: f64 = samples.iter().map(|s| s.image.mean()).sum::<f64>() / samples.len() as f64;
        means.push(m);
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{:?}", means);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = default_source_spec(0, 0);
    spec.style.gain[1] = 0.0;
    assert!(matches!(spec.validate(), Err(AmelError::Config { ref field, .. }) if field == "style.gain"));
    let knob = DomainRelevanceKnob {
        delta: -1.0,
        ..Default::default()
    };
    assert!(knob.target_spec(&default_source_spec(0, 0), 3, 0).is_err());
}

#[test]
fn zero_delta_target_replays_source() {
    let config = BenchmarkConfig {
        n_live: 500,
        n_spoof: 500,
        target_live: 500,
        target_spoof: 500,
        geometry: small(),
        relevance: DomainRelevanceKnob {
            source: 1,
            delta: 0.0,
            seed_offset: 0,
        },
        ..Default::default()
    };
    let ds = make_benchmark(&config).unwrap();
    let (src, tgt) = (&ds.domains[1], ds.target_domain().unwrap());
    let pixel_mean = |d: &DomainData| {
        let mut acc = vec![0.0; d.samples[0].image.len()];
        for s in &d.samples {
            for (a, v) in acc.iter_mut().zip(s.image.data()) {
                *a += v;
            }
        }
        acc.into_iter().map(|v| v / d.samples.len() as f64).collect::<Vec<_>>()
    };
    for (a, b) in pixel_mean(src).iter().zip(pixel_mean(tgt)) {
        assert!((a - b).abs() < 1e-3);
    }
    // a fresh seed draws new faces from the same distribution
    let fresh = DomainRelevanceKnob {
        source: 1,
        delta: 0.0,
        seed_offset: 5,
    };
    let spec = fresh.target_spec(&src.spec, 3, 0).unwrap();
    assert_eq!(spec.style, src.spec.style);
    assert_eq!(spec.spoof_artifact, src.spec.spoof_artifact);
    assert_ne!(spec.rng_seed, src.spec.rng_seed);
}

#[test]
fn benchmark_sizes_are_exact() {
    let config = BenchmarkConfig {
        num_sources: 2,
        n_live: 3,
        n_spoof: 5,
        target_live: 2,
        target_spoof: 1,
        geometry: small(),
        ..Default::default()
    };
    let ds = make_benchmark(&config).unwrap();
    assert_eq!(ds.domains.len(), 3);
    assert_eq!(ds.sources().len(), 2);
    for d in ds.sources() {
        assert_eq!(d.len(), 8);
        assert_eq!(d.samples.iter().filter(|s| s.label == LIVE).count(), 3);
    }
    assert_eq!(ds.target_domain().unwrap().len(), 3);
    let bad = BenchmarkConfig {
        relevance: DomainRelevanceKnob {
            source: 2,
            ..Default::default()
        },
        ..config
    };
    assert!(matches!(make_benchmark(&bad), Err(AmelError::Config { ref field, .. }) if field == "relevance.source"));
}

#[test]
fn default_styles_are_well_separated() {
    let per_domain: Vec<Vec<[f64; 3]>> = (0..3)
        .map(|k| {
            generate_domain(&default_source_spec(k, 0), 100, 100, Geometry::default())
                .iter()
                .map(channel_means)
                .collect()
        })
        .collect();
    let centroid = |v: &[[f64; 3]]| [0, 1, 2].map(|c| v.iter().map(|m| m[c]).sum::<f64>() / v.len() as f64);
    let spread = |v: &[[f64; 3]]| {
        let c = centroid(v);
        let var = v
            .iter()
            .map(|m| (0..3).map(|i| (m[i] - c[i]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / v.len() as f64;
        var.sqrt()
    };
    for a in 0..3 {
        for b in a + 1..3 {
            let (ca, cb) = (centroid(&per_domain[a]), centroid(&per_domain[b]));
            let dist = (0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum::<f64>().sqrt();
            let within = spread(&per_domain[a]).max(spread(&per_domain[b]));
            assert!(dist > 3.0 * within, "domains {} {}: {} vs {}", a, b, dist, within);
        }
    }
}

#[test]
fn linear_probe_separates_domains() {
    // Softmax regression on per-channel means and variances of raw pixels.
    let feats = |s: &Sample| {
        let m = channel_means(s);
        let n = s.image.len() / 3;
        let mut f = m.to_vec();
        for c in 0..3 {
            let slice = &s.image.data()[c * n..(c + 1) * n];
            f.push(slice.iter().map(|v| (v - m[c]).powi(2)).sum::<f64>() / n as f64);
        }
        f.push(1.0);
        f
    };
    let split = |k: usize, seed: u64| -> Vec<(Vec<f64>, usize)> {
        generate_domain(&default_source_spec(k, seed), 60, 60, Geometry::default())
            .iter()
            .map(|s| (feats(s), k))
            .collect()
    };
    let train: Vec<_> = (0..3).flat_map(|k| split(k, 0)).collect();
    let mut test: Vec<_> = Vec::new();
    for k in 0..3 {
        let mut spec = default_source_spec(k, 0);
        spec.rng_seed += 77;
        test.extend(generate_domain(&spec, 60, 60, Geometry::default()).iter().map(|s| (feats(s), k)));
    }
    let dim = train[0].0.len();
    let mut w = vec![vec![0.0; dim]; 3];
    for _ in 0..2000 {
        let mut grad = vec![vec![0.0; dim]; 3];
        for (x, y) in &train {
            let z: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..3 {
                let p = e[k] / s - if k == *y { 1.0 } else { 0.0 };
                for j in 0..dim {
                    grad[k][j] += p * x[j] / train.len() as f64;
                }
            }
        }
        for k in 0..3 {
            for j in 0..dim {
                w[k][j] -= 5.0 * grad[k][j];
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            (0..3).max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap()).unwrap() == *y
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "probe accuracy {}", acc);
}

#[test]
fn dataset_round_trip_and_errors() {
    let config = BenchmarkConfig {
        num_sources: 2,
        n_live: 2,
        n_spoof: 2,
        target_live: 1,
        target_spoof: 1,
        geometry: small(),
        ..Default::default()
    };
    let ds = make_benchmark(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.amelds");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);

    let mut bytes = encode_dataset(&ds).unwrap();
    let truncated = &bytes[..bytes.len() - 10];
    match decode_dataset(truncated) {
        Err(AmelError::UnexpectedEnd { section }) => assert_eq!(section, "samples of domain 2"),
        other => panic!("unexpected {:?}", other),
    }
    match decode_dataset(&bytes[..12]) {
        Err(AmelError::UnexpectedEnd { section }) => assert_eq!(section, "header"),
        other => panic!("unexpected {:?}", other),
    }
    bytes[3] = b'?';
    let err = decode_dataset(&bytes).unwrap_err();
    assert!(matches!(err, AmelError::BadMagic { .. }));
    assert!(err.to_string().contains("bad magic"));
}

#[test]
fn batches_stack_samples() {
    let d = DomainData::generate(default_source_spec(0, 4), 5, 5, small());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = d.sample_batch(0, 4, &mut rng).unwrap();
    assert_eq!(b.images.shape(), &[4, 3, 16, 16]);
    assert_eq!(b.depth.shape(), &[4, 1, 8, 8]);
    assert_eq!(b.len(), 4);
    assert!(d.sample_batch(0, 11, &mut rng).is_err());
}
