use cmaev::data::{
    color_augment, denormalize, generate, load_dataset, normalize, sample_clip, save_dataset, temporal_shift, Dataset,
    GenerateConfig, ShiftConfig, VideoClip,
};
use cmaev::model::{detokenize, random_tube_mask, tubify};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64, num_videos: usize) -> Dataset {
    generate(&GenerateConfig {
        num_videos,
        seed,
        ..GenerateConfig::default()
    })
    .unwrap()
}

/// Mean and standard deviation of every frame, labelled by its video's class.
fn frame_stats(ds: &Dataset) -> Vec<([f64; 2], usize)> {
    let fl = ds.header.frame_len();
    let mut out = Vec::new();
    for v in &ds.videos {
        for frame in v.pixels.chunks_exact(fl) {
            let mean = frame.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / fl as f64;
            let var = frame.iter().map(|&p| (p as f64 / 255.0 - mean).powi(2)).sum::<f64>() / fl as f64;
            out.push(([mean, var.sqrt()], v.label));
        }
    }
    out
}

/// Multinomial logistic regression by full-batch gradient descent.
fn train_probe(rows: &[([f64; 2], usize)], classes: usize) -> impl Fn([f64; 2]) -> usize {
    let n = rows.len() as f64;
    let mu = [0, 1].map(|j| rows.iter().map(|r| r.0[j]).sum::<f64>() / n);
    let sd = [0, 1].map(|j| (rows.iter().map(|r| (r.0[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12));
    let feat = move |x: [f64; 2]| [(x[0] - mu[0]) / sd[0], (x[1] - mu[1]) / sd[1], 1.0];
    let mut w = vec![[0.0f64; 3]; classes];
    for _ in 0..300 {
        let mut g = vec![[0.0f64; 3]; classes];
        for (x, y) in rows {
            let f = feat(*x);
            let logits: Vec<f64> = w.iter().map(|wc| wc.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - m).exp() / z - if c == *y { 1.0 } else { 0.0 };
                for j in 0..3 {
                    g[c][j] += p * f[j] / n;
                }
            }
        }
        for c in 0..classes {
            for j in 0..3 {
                w[c][j] -= 1.0 * g[c][j];
            }
        }
    }
    move |x| {
        let f = feat(x);
        let scores: Vec<f64> = w.iter().map(|wc| wc.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
        (0..classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap()
    }
}

#[test]
fn single_frame_statistics_do_not_reveal_the_class() {
    let train = frame_stats(&dataset(1, 128));
    let test = frame_stats(&dataset(2, 128));
    let probe = train_probe(&train, 4);
    let acc = test.iter().filter(|(x, y)| probe(*x) == *y).count() as f64 / test.len() as f64;
    assert!(acc <= 0.25 + 0.10, "frame-statistics probe reached {acc}");
}

#[test]
fn generation_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenerateConfig {
        num_videos: 100,
        t_total: 20,
        seed: 9,
        ..GenerateConfig::default()
    };
    let (a, b) = (dir.path().join("a.cmvd"), dir.path().join("b.cmvd"));
    save_dataset(&generate(&cfg).unwrap(), &a).unwrap();
    save_dataset(&generate(&cfg).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds, generate(&cfg).unwrap());
    let mut per_class = [0; 4];
    for l in ds.labels() {
        per_class[l] += 1;
    }
    assert_eq!(per_class, [25; 4]);
}

#[test]
fn normalized_dataset_is_centred() {
    let ds = dataset(3, 32);
    let cfg = ShiftConfig {
        frames: ds.header.t_total,
        rate: 1,
        max_shift: 0,
    };
    let (mut sum, mut count) = (0.0f64, 0usize);
    for v in 0..ds.len() {
        let x = normalize::<f64>(&sample_clip(&ds, v, 0, &cfg).unwrap(), &ds.header.stats);
        sum += x.data().iter().sum::<f64>();
        count += x.len();
    }
    let mean = sum / count as f64;
    assert!(mean.abs() <= 0.01, "normalized channel mean {mean}");
}

#[test]
fn every_index_masked_half_the_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut hits = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        for i in random_tube_mask(10, 0.5, &mut rng).unwrap().masked {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "index {i} masked with frequency {f}");
    }
}

#[test]
fn zero_shift_views_match_at_every_start() {
    let ds = dataset(4, 4);
    let cfg = ShiftConfig {
        max_shift: 0,
        ..ShiftConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t1 in 0..=cfg.max_start(ds.header.t_total).unwrap() {
        let pair = temporal_shift(&ds, t1 % ds.len(), t1, &cfg, &mut rng).unwrap();
        assert_eq!(pair.online, pair.target);
    }
}

fn clip_strategy() -> impl Strategy<Value = VideoClip> {
    (1usize..4, 1usize..3, prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..=1.0], 2 * 2 * 4 * 4))
        .prop_map(|(frames, channels, pool)| {
            let len = frames * channels * 16;
            VideoClip {
                pixels: pool.iter().cycle().take(len).copied().collect(),
                timestamps: (0..frames).collect(),
                channels,
                height: 4,
                width: 4,
            }
        })
}

proptest! {
    #[test]
    fn color_augment_stays_in_unit_range(clip in clip_strategy(), strength in 0.0f32..=1.0, seed in any::<u64>()) {
        let out = color_augment(&clip, strength, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&out.timestamps, &clip.timestamps);
    }

    #[test]
    fn color_augment_is_shared_across_frames(seed in any::<u64>(), strength in 0.0f32..=1.0, v in 0.0f32..=1.0) {
        let clip = VideoClip {
            pixels: vec![v; 3 * 4],
            timestamps: vec![0, 1, 2],
            channels: 1,
            height: 2,
            width: 2,
        };
        let out = color_augment(&clip, strength, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(out.pixels.iter().all(|&p| p == out.pixels[0]));
    }

    #[test]
    fn tubify_roundtrip(seed in any::<u64>(), t in 1usize..3, c in 1usize..3, hp in 1usize..3, wp in 1usize..3) {
        let (tube, patch) = (2, 2);
        let shape = vec![t * tube, c, hp * patch, wp * patch];
        let clip = cmaev::Tensor64::normal(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let seq = tubify(&clip, tube, patch).unwrap();
        prop_assert_eq!(seq.tokens.shape(), &[t * hp * wp, tube * c * patch * patch][..]);
        let geo = cmaev::model::TubeGeometry {
            frames: t * tube,
            channels: c,
            height: hp * patch,
            width: wp * patch,
            tube,
            patch,
        };
        prop_assert_eq!(detokenize(&seq.tokens, &geo).unwrap(), clip);
    }

    #[test]
    fn normalize_inverts(seed in any::<u64>()) {
        let ds = dataset(seed % 5, 4);
        let clip = sample_clip(&ds, (seed % 4) as usize, (seed % 10) as usize, &ShiftConfig::default()).unwrap();
        let back = denormalize(&normalize::<f64>(&clip, &ds.header.stats), &ds.header.stats);
        prop_assert!(back.iter().zip(&clip.pixels).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn timestamps_step_by_rate(t1 in 0usize..10, frames in 1usize..6, rate in 1usize..5) {
        let ds = dataset(0, 1);
        let clip = sample_clip(&ds, 0, t1, &ShiftConfig { frames, rate, max_shift: 0 }).unwrap();
        prop_assert!(clip.timestamps.windows(2).all(|w| w[1] - w[0] == rate));
        prop_assert_eq!(clip.timestamps[0], t1);
    }
}
