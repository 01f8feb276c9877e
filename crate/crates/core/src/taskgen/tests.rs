use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fixture::{decode, encode, Fixture};
use super::*;

fn episode(spec: &EpisodeSpec) -> EpisodeBatch {
    gen_episode(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).unwrap()
}

fn clean_spec() -> EpisodeSpec {
    EpisodeSpec {
        noise_std: 0.0,
        jitter: (1.0, 1.0),
        fixed_offset: Some(3),
        seed: 11,
        ..EpisodeSpec::default()
    }
}

fn dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn validation_rejects_bad_specs() {
    let ok = EpisodeSpec::default();
    assert!(ok.validate().is_ok());
    for bad in [
        EpisodeSpec { n_way: 1, ..ok },
        EpisodeSpec { k_shot: 0, ..ok },
        EpisodeSpec { frames: 31, ..ok },
        EpisodeSpec { motif_len: 9, ..ok },
        EpisodeSpec { motif_len: 0, ..ok },
        EpisodeSpec { noise_std: -1.0, ..ok },
        EpisodeSpec { jitter: (1.2, 0.8), ..ok },
        EpisodeSpec { fixed_offset: Some(30), ..ok },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let spec = EpisodeSpec { seed: 42, ..EpisodeSpec::default() };
    let noise = NoiseConfig {
        frame_noise: 4,
        sample_noise_ratio: 0.0,
        gaussian_bg_std: 0.3,
        reverse_support: true,
    };
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut b = gen_episode(&spec, &mut rng).unwrap();
        apply_perturbations(&mut b, &noise, &mut rng).unwrap();
        b
    };
    assert_eq!(run(), run());
    let other = episode(&EpisodeSpec { seed: 43, ..spec });
    assert_ne!(other.support, run().support);
}

#[test]
fn shapes_and_label_balance() {
    let spec = EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        q_per_class: 1,
        frames: 32,
        feat_dim: 16,
        ..EpisodeSpec::default()
    };
    let b = episode(&spec);
    assert_eq!(b.support.len(), 5);
    assert_eq!(b.query.len(), 5);
    assert!(b.support.iter().chain(&b.query).all(|t| t.shape() == [32, 16]));
    assert_eq!(b.support_labels, vec![0, 1, 2, 3, 4]);

    let b = episode(&EpisodeSpec { k_shot: 3, q_per_class: 2, ..spec });
    for c in 0..5 {
        assert_eq!(b.support_labels.iter().filter(|&&l| l == c).count(), 3);
        assert_eq!(b.query_labels.iter().filter(|&&l| l == c).count(), 2);
    }
}

#[test]
fn motifs_are_separated() {
    let b = episode(&EpisodeSpec { n_way: 8, ..EpisodeSpec::default() });
    for i in 0..8 {
        for j in i + 1..8 {
            assert!(cosine_distance(&b.motifs[i], &b.motifs[j]) >= 0.5);
        }
    }
}

#[test]
fn impossible_separation_reports_seed() {
    // one-element motifs: two classes collide in sign half the time, and with
    // many classes a separated draw is impossible
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = draw_motifs(6, 1, 1, 77, &mut rng).unwrap_err().to_string();
    assert!(err.contains("seed 77"), "{err}");
}

#[test]
fn degenerate_generator_copies_support() {
    let b = episode(&clean_spec());
    for c in 0..5 {
        assert_eq!(b.query[c], b.support[c]);
    }
    // the motif sits exactly at the fixed offset
    let s = &b.support[0];
    assert!(s.row(2).iter().all(|&v| v == 0.0));
    assert_eq!(s.row(3), b.motifs[0].row(0));
}

#[test]
fn separable_at_zero_noise() {
    // aligned, unjittered samples: nearest raw prototype is always right
    for seed in 0..5 {
        let spec = EpisodeSpec {
            seed,
            k_shot: 2,
            q_per_class: 3,
            ..clean_spec()
        };
        let b = episode(&spec);
        for (q, &label) in b.query.iter().zip(&b.query_labels) {
            let best = (0..spec.n_way)
                .min_by(|&x, &y| {
                    dist(q, &b.support[x * spec.k_shot])
                        .partial_cmp(&dist(q, &b.support[y * spec.k_shot]))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(best, label);
        }
    }
}

#[test]
fn intra_class_spread_grows_with_length() {
    let spread = |frames: usize| -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..20 {
            let spec = EpisodeSpec {
                frames,
                k_shot: 4,
                seed,
                ..EpisodeSpec::default()
            };
            let b = episode(&spec);
            for c in 0..spec.n_way {
                for i in 0..4 {
                    for j in i + 1..4 {
                        total += dist(&b.support[c * 4 + i], &b.support[c * 4 + j]);
                        n += 1;
                    }
                }
            }
        }
        total / n as f64
    };
    let s: Vec<f64> = [24, 32, 48, 64].iter().map(|&f| spread(f)).collect();
    assert!(s.windows(2).all(|w| w[1] >= w[0]), "{s:?}");
}

#[test]
fn frame_noise_cases() {
    let spec = EpisodeSpec { seed: 3, ..EpisodeSpec::default() };
    let base = episode(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut b = base.clone();
    inject_frame_noise(&mut b, 0, &mut rng).unwrap();
    assert_eq!(b, base);

    let mut b = base.clone();
    inject_frame_noise(&mut b, 5, &mut rng).unwrap();
    assert_eq!(b.manifest.frame_noise.len(), b.sample_count());
    for (i, frames) in b.manifest.frame_noise.iter().enumerate() {
        assert_eq!(frames.len(), 5);
        let (new, old) = if i < 5 { (&b.support[i], &base.support[i]) } else { (&b.query[i - 5], &base.query[i - 5]) };
        for t in 0..spec.frames {
            assert_eq!(new.row(t) == old.row(t), !frames.contains(&t));
        }
    }

    // total corruption: clean generator, every frame replaced
    let clean = episode(&clean_spec());
    let mut b = clean.clone();
    inject_frame_noise(&mut b, 32, &mut rng).unwrap();
    for (s, c) in b.support.iter().zip(&clean.support) {
        for t in 3..3 + 6 {
            assert_ne!(s.row(t), c.row(t));
        }
    }
    assert!(inject_frame_noise(&mut b, 33, &mut rng).is_err());
}

#[test]
fn sample_noise_cases() {
    let spec = EpisodeSpec {
        k_shot: 10,
        seed: 5,
        ..EpisodeSpec::default()
    };
    let base = episode(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut b = base.clone();
    inject_sample_noise(&mut b, 0.0, &mut rng).unwrap();
    assert_eq!(b, base);

    let mut b = base.clone();
    inject_sample_noise(&mut b, 0.4, &mut rng).unwrap();
    for c in 0..spec.n_way {
        let swapped = b.manifest.swaps.iter().filter(|(i, _)| b.support_labels[*i] == c).count();
        assert_eq!(swapped, 4);
    }
    for &(i, src) in &b.manifest.swaps {
        assert_ne!(src, b.support_labels[i]);
        assert_eq!(b.support_source[i], src);
        assert_ne!(b.support[i], base.support[i]);
    }
    assert_eq!(b.support_labels, base.support_labels);
    assert!(inject_sample_noise(&mut b, 1.5, &mut rng).is_err());
}

#[test]
fn perturbation_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = episode(&EpisodeSpec { seed: 8, ..EpisodeSpec::default() });

    let mut b = base.clone();
    apply_perturbations(&mut b, &NoiseConfig::default(), &mut rng).unwrap();
    assert_eq!(b, base);

    let spec = EpisodeSpec {
        frames: 4,
        motif_len: 1,
        ..EpisodeSpec::default()
    };
    let small = episode(&spec);
    let mut b = small.clone();
    let rev = NoiseConfig {
        reverse_support: true,
        ..NoiseConfig::default()
    };
    apply_perturbations(&mut b, &rev, &mut rng).unwrap();
    for (s, o) in b.support.iter().zip(&small.support) {
        for t in 0..4 {
            assert_eq!(s.row(t), o.row(3 - t));
        }
    }
    assert_eq!(b.query, small.query);
    assert!(b.manifest.support_reversed);

    // 10 supports + 10 queries, a quarter of them perturbed
    let spec = EpisodeSpec {
        k_shot: 2,
        q_per_class: 2,
        seed: 4,
        ..EpisodeSpec::default()
    };
    let base = episode(&spec);
    let mut b = base.clone();
    let gauss = NoiseConfig {
        gaussian_bg_std: 0.5,
        ..NoiseConfig::default()
    };
    apply_perturbations(&mut b, &gauss, &mut rng).unwrap();
    assert_eq!(b.manifest.gaussian.len(), 5);
    let changed: Vec<usize> = (0..20)
        .filter(|&i| if i < 10 { b.support[i] != base.support[i] } else { b.query[i - 10] != base.query[i - 10] })
        .collect();
    assert_eq!(changed, b.manifest.gaussian);
}

#[test]
fn fixture_round_trip_and_rejections() {
    let spec = EpisodeSpec {
        n_way: 3,
        k_shot: 2,
        q_per_class: 2,
        frames: 8,
        feat_dim: 4,
        motif_len: 2,
        seed: 21,
        ..EpisodeSpec::default()
    };
    let fx = Fixture::from(&episode(&spec));
    let bytes = encode(&fx);
    assert_eq!(&bytes[..4], b"MEPB");
    let back = decode(&bytes).unwrap();
    assert_eq!(back, fx);
    assert_eq!(encode(&back), bytes);

    let err = decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode(&bad).unwrap_err().to_string().contains("byte 0"));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(decode(&bad).unwrap_err().to_string().contains("version"));

    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long).is_err());

    // a header promising a huge payload fails on length, not on allocation
    let mut huge = bytes[..6].to_vec();
    for v in [2u32, 1, 1, 1 << 30, 1 << 20, 1] {
        huge.extend_from_slice(&v.to_le_bytes());
    }
    huge.extend_from_slice(&[0u8; 32]);
    assert!(decode(&huge).is_err());
}
