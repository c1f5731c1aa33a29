use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> DataConfig {
    DataConfig {
        num_ids: 10,
        num_black: 4,
        samples_per_id: 6,
        ..DataConfig::default()
    }
}

#[test]
fn render_is_deterministic() {
    let specs = sample_identities(3, 4, 2, 0.15).unwrap();
    let a = render_sample(&specs[0], 2, 11, 96, 32).unwrap();
    let b = render_sample(&specs[0], 2, 11, 96, 32).unwrap();
    assert_eq!(a, b);
    let c = render_sample(&specs[0], 2, 12, 96, 32).unwrap();
    assert_ne!(a, c);
    assert!(render_sample(&specs[0], 7, 11, 96, 32).is_err());
}

#[test]
fn black_torso_is_dark_under_every_camera() {
    let specs = sample_identities(5, 20, 8, 0.15).unwrap();
    for spec in specs.iter().filter(|s| s.black()) {
        for cam in 1..=6 {
            let (img, layout) = render_with_layout(spec, cam, 99 + cam as u64, 96, 32).unwrap();
            let lum = torso_luminance(&img, &layout);
            assert!(lum < BLACK_LUMINANCE, "camera {cam}: {lum}");
        }
    }
}

#[test]
fn box_contains_head_center_and_stays_inside() {
    let specs = sample_identities(8, 12, 4, 0.15).unwrap();
    for (i, spec) in specs.iter().enumerate() {
        let (_, layout) = render_with_layout(spec, 1 + (i % 6) as u8, i as u64, 96, 32).unwrap();
        let b = layout.head_shoulder_box();
        assert!(b[0] > 0.0 && b[1] > 0.0 && b[2] < 1.0 && b[3] < 1.0, "{b:?}");
        assert!(b[0] < layout.cx && layout.cx < b[2]);
        assert!(b[1] < layout.head_cy && layout.head_cy < b[3]);
    }
}

#[test]
fn box_covers_rendered_head_shoulder_pixels() {
    // pixels of hair, face and glasses above the shoulder line must fall inside the box
    let specs = sample_identities(2, 10, 4, 0.15).unwrap();
    for (i, spec) in specs.iter().enumerate() {
        let plain = IdentitySpec {
            torso: [0.0; 3],
            trousers: [0.0; 3],
            ..spec.clone()
        };
        let (_, layout) = render_with_layout(&plain, 5, i as u64, 96, 32).unwrap();
        let b = layout.head_shoulder_box();
        let (mut inside, mut total) = (0, 0);
        for y in 0..96 {
            for x in 0..32 {
                let (u, v) = ((x as f64 + 0.5) / 32.0, (y as f64 + 0.5) / 96.0);
                let head = ((u - layout.cx) / layout.head_rx).powi(2) + ((v - layout.head_cy) / layout.head_ry).powi(2);
                let shoulder = v >= layout.shoulder_y && v < b[3] && (u - layout.cx).abs() <= layout.shoulder_hw;
                if head <= 1.3 || shoulder {
                    total += 1;
                    inside += (u >= b[0] && u <= b[2] && v >= b[1] && v <= b[3]) as usize;
                }
            }
        }
        assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
    }
}

#[test]
fn black_cohort_is_separated_in_head_attributes() {
    let specs = sample_identities(4, 120, 48, 0.15).unwrap();
    let black: Vec<_> = specs.iter().filter(|s| s.black()).collect();
    assert_eq!(black.len(), 48);
    for i in 0..black.len() {
        for j in i + 1..black.len() {
            assert!(black[i].head_shoulder_separation(black[j]) >= 0.15);
        }
    }
    assert!(specs.iter().filter(|s| !s.black()).all(|s| luminance(s.torso) >= 0.3));
}

#[test]
fn impossible_separation_is_rejected() {
    let err = sample_identities(1, 40, 40, 5.0).unwrap_err();
    assert!(err.to_string().contains("separation"));
}

#[test]
fn cohort_premise_holds() {
    let stats = cohort_stats(&DataConfig::default(), 7).unwrap();
    assert!(stats.black_torso_variance < TORSO_VARIANCE_CEILING, "{stats:?}");
    assert!(stats.black_min_head_distance > HEAD_DISTANCE_FLOOR, "{stats:?}");
}

#[test]
fn default_config_counts() {
    let cfg = DataConfig::default();
    assert_eq!(cfg.num_ids * cfg.samples_per_id, 1200);
    let black = (0..120).filter(|&i| is_black_slot(i, 120, 48)).count();
    assert_eq!(black, 48);
    let train_black = (0..60).filter(|&i| is_black_slot(i, 120, 48)).count();
    assert_eq!(train_black, 24);
}

#[test]
fn split_contract() {
    let ds = generate(&small(), 1).unwrap();
    assert_eq!(ds.len(), 60);
    ds.check_integrity().unwrap();
    for q in ds.indices(Split::Query) {
        let r = &ds.records[q];
        let cross = ds
            .records
            .iter()
            .any(|g| g.split == Split::Gallery && g.id == r.id && g.camera != r.camera);
        assert!(cross, "query {} lacks a cross-camera match", r.path);
    }
    let train: std::collections::BTreeSet<_> = ds.indices(Split::Train).iter().map(|&i| ds.records[i].id).collect();
    assert!(ds.indices(Split::Query).iter().all(|&i| !train.contains(&ds.records[i].id)));
    assert_eq!(ds.records.iter().filter(|r| r.black).count(), 4 * 6);
}

#[test]
fn unsatisfiable_configs_are_explained() {
    let bad = [
        DataConfig { queries_per_id: 6, ..small() },
        DataConfig { num_black: 11, ..small() },
        DataConfig { cameras: 1, ..small() },
        DataConfig { train_fraction: 1.0, ..small() },
        DataConfig { samples_per_id: 7, queries_per_id: 1, cameras: 6, ..small() },
    ];
    for (i, cfg) in bad.iter().enumerate().take(4) {
        let e = generate(cfg, 0).unwrap_err().to_string();
        assert!(e.contains("unsatisfiable"), "{i}: {e}");
    }
    assert!(generate(&bad[4], 0).is_ok());
}

#[test]
fn disk_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(), 2, dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds, back);
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let first = manifest.lines().next().unwrap();
    assert_eq!(first.split('\t').count(), 9);
    assert!(first.split('\t').nth(4).unwrap().split('.').nth(1).unwrap().len() == 6);
}

#[test]
fn malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    std::fs::write(&p, "a.ppm\t0\t1\t0\t0.8\t0.1\t0.2\t0.4\ttrain\n").unwrap();
    assert!(read_manifest(&p).unwrap_err().to_string().contains("line 1"));
    std::fs::write(&p, "a.ppm\t0\t1\t0\t0.1\t0.1\t0.2\t0.4\tval\n").unwrap();
    assert!(read_manifest(&p).is_err());
    let img = dir.path().join("x.ppm");
    std::fs::write(&img, b"P6\n2 2\n255\n\x01\x02").unwrap();
    assert!(read_ppm(&img).is_err());
    std::fs::write(&img, b"P3\n1 1\n255\n1 2 3").unwrap();
    assert!(read_ppm(&img).is_err());
}

#[test]
fn pk_sampling_examples() {
    let pool: Vec<(usize, usize)> = (0..200).map(|i| (i, i / 10)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = pk_sample(&pool, 16, 4, &mut rng).unwrap();
    assert_eq!(batch.len(), 64);
    let mut counts = BTreeMap::new();
    for &i in &batch {
        *counts.entry(pool[i].1).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 16);
    assert!(counts.values().all(|&c| c == 4));
    // groups are contiguous and distinct
    let groups: Vec<usize> = batch.chunks(4).map(|g| pool[g[0]].1).collect();
    assert!(batch.chunks(4).all(|g| g.iter().all(|&i| pool[i].1 == pool[g[0]].1)));
    let distinct: std::collections::BTreeSet<_> = groups.iter().collect();
    assert_eq!(distinct.len(), 16);

    let two = [(0, 5), (1, 5), (2, 9), (3, 9)];
    let b = pk_sample(&two, 2, 2, &mut rng).unwrap();
    let ids: std::collections::BTreeSet<_> = b.iter().map(|&i| two[i].1).collect();
    assert_eq!(ids.len(), 2);
    assert!(pk_sample(&two, 3, 2, &mut rng).is_err());
    assert!(pk_sample(&two, 2, 3, &mut rng).is_err());
}

#[test]
fn pk_epoch_uses_each_sample_once() {
    let pool: Vec<(usize, usize)> = (0..100).map(|i| (i, i % 10)).collect();
    let sampler = PkSampler::new(&pool, 4, 4).unwrap();
    let epoch = sampler.epoch(&mut ChaCha8Rng::seed_from_u64(3));
    // 10 ids x 2 groups of 4 = 20 groups -> 5 batches
    assert_eq!(epoch.len(), 5);
    let mut seen: Vec<usize> = epoch.concat();
    let n = seen.len();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), n);
}

#[test]
fn flip_examples() {
    let close = |a: [f64; 4], b: [f64; 4]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
    let b = [0.2, 0.1, 0.8, 0.4];
    assert!(close(flip_box(b), b));
    let b = [0.1, 0.2, 0.5, 0.6];
    assert!(close(flip_box(flip_box(b)), b));
    let mut img = Image::new(2, 3, (0..18).map(|v| v as f32).collect()).unwrap();
    let orig = img.clone();
    img.flip_horizontal();
    assert_eq!(img.pixel(0, 0), orig.pixel(0, 2));
    img.flip_horizontal();
    assert_eq!(img, orig);
}

#[test]
fn erasing_respects_area_and_aspect() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut erased = 0;
    for _ in 0..300 {
        let mut img = Image::new(96, 32, vec![0.5; 3 * 96 * 32]).unwrap();
        let mut b = [0.1, 0.1, 0.9, 0.4];
        let rep = augment(&mut img, &mut b, &mut rng);
        if let Some((top, left, h, w)) = rep.erased {
            erased += 1;
            let frac = (h * w) as f64 / (96.0 * 32.0);
            assert!((ERASE_AREA.0..=ERASE_AREA.1).contains(&frac), "{frac}");
            assert!(top + h <= 96 && left + w <= 32);
            let changed = img.data.iter().filter(|&&v| v != 0.5).count();
            assert!(changed > 0 && changed <= 3 * h * w);
        } else {
            assert!(img.data.iter().all(|&v| v == 0.5));
        }
        assert_eq!(b == [0.1, 0.1, 0.9, 0.4], !rep.flipped);
    }
    assert!((100..200).contains(&erased), "{erased}");
}

#[test]
fn augmentation_rejects_test_samples() {
    let specs = sample_identities(0, 2, 0, 0.1).unwrap();
    let image = render_sample(&specs[0], 1, 0, 96, 32).unwrap();
    let mut s = PersonSample {
        image,
        id: 0,
        camera: 1,
        black: false,
        bbox: [0.1, 0.1, 0.9, 0.4],
        split: Split::Query,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(augment_sample(&mut s, &mut rng).is_err());
    s.split = Split::Train;
    assert!(augment_sample(&mut s, &mut rng).is_ok());
}
