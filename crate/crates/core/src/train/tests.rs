use super::*;
use crate::data::{generate, DataConfig};
use crate::model::load_checkpoint;

fn tiny() -> (TrainConfig, Dataset) {
    let data = DataConfig {
        num_ids: 8,
        num_black: 4,
        samples_per_id: 6,
        height: 24,
        width: 8,
        ..DataConfig::default()
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            input_h: 24,
            input_w: 8,
            widths: vec![4, 6],
            strides: vec![2, 1],
            hll_widths: vec![4],
            embed_dim: 12,
            reduction: 2,
            stripes: 3,
            share_backbone: false,
        },
        stage_epochs: [1, 2, 1],
        p: 2,
        k: 2,
        batches_per_epoch: 2,
        ..TrainConfig::default()
    };
    (cfg, generate(&data, 3).unwrap())
}

fn hll_bits<T: Real>(store: &ParamStore<T>) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(k, _)| k.starts_with("hll."))
        .map(|(k, v)| (k.clone(), v.to_f64().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn localization_stays_frozen_after_stage0() {
    let (cfg, ds) = tiny();
    let out = train_staged::<f64>(&cfg, &ds, 5, Variant::Haa).unwrap();
    let before = hll_bits(&out.stage0);
    assert!(!before.is_empty());
    assert_eq!(before, hll_bits(&out.stage1));
    assert_eq!(before, hll_bits(&out.final_params));
    assert_ne!(hll_bits(&out.stage0), hll_bits(&out.model().init_params::<f64>(5)));

    // gradients reaching the frozen layer are exactly zero
    let model = out.model();
    let mut s = Session::new(&out.final_params, true);
    let x = s.input(ds.batch(&[0, 1, 2]).unwrap().cast());
    let f = model.forward(&mut s, x).unwrap();
    let loss = s.graph.mean_all(f.f).unwrap();
    let g = s.graph.backward(loss).unwrap();
    assert!(s.param_grads(&g).keys().all(|k| !k.starts_with("hll.")));
    for (k, v) in s.all_param_grads(&g).iter().filter(|(k, _)| k.starts_with("hll.")) {
        assert!(v.data().iter().all(|&x| x == 0.0), "{k}");
    }
}

#[test]
fn training_is_reproducible() {
    let (cfg, ds) = tiny();
    let a = train_staged::<f64>(&cfg, &ds, 9, Variant::Haa).unwrap();
    let b = train_staged::<f64>(&cfg, &ds, 9, Variant::Haa).unwrap();
    assert_eq!(a, b);
    let c = train_staged::<f64>(&cfg, &ds, 10, Variant::Haa).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn shared_stages_match_independent_runs() {
    let (cfg, ds) = tiny();
    let shared = train_variants::<f32>(&cfg, &ds, 4, &Variant::ALL).unwrap();
    for out in &shared {
        let alone = train_staged::<f32>(&cfg, &ds, 4, out.variant).unwrap();
        assert_eq!(&alone, out, "{}", out.variant);
    }
}

#[test]
fn metrics_log_lists_every_epoch() {
    let (cfg, ds) = tiny();
    let out = train_variants::<f32>(&cfg, &ds, 1, &[Variant::Haa, Variant::GlobalOnly]).unwrap();
    let phases = |o: &TrainOutcome<f32>| o.metrics.iter().map(|m| m.phase.to_string()).collect::<Vec<_>>();
    assert_eq!(phases(&out[0]), ["0", "1-global", "1-global", "1-hsa", "1-hsa", "2"]);
    assert_eq!(phases(&out[1]), ["1-global", "1-global", "2"]);
    let csv = metrics_csv(&out[0].metrics);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 7);
    // stage 0 row: box term only
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f.len(), 8);
    assert!(f[3].is_empty() && f[4].is_empty() && !f[5].is_empty() && f[6].is_empty());
    // joint row of the adaptive variant has the black term
    let f: Vec<&str> = lines[6].split(',').collect();
    assert!(!f[6].is_empty() && f[5].is_empty());
    assert!(out[0].stage0_iou.is_some() && out[1].stage0_iou.is_none());
    let no_black = train_staged::<f32>(&cfg, &ds, 1, Variant::Concat).unwrap();
    assert!(no_black.metrics.last().unwrap().black.is_none());
}

#[test]
fn checkpoints_round_trip() {
    let (cfg, ds) = tiny();
    let out = train_staged::<f32>(&cfg, &ds, 2, Variant::Haa).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    for f in CHECKPOINT_FILES {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = load_checkpoint(&dir.path().join("final.haa1")).unwrap();
    assert_eq!(back, out.final_checkpoint());
    assert!(back.params.names().all(|n| !n.starts_with("head.")));
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, metrics_csv(&out.metrics));
}

#[test]
fn config_checks() {
    let (cfg, ds) = tiny();
    assert!(TrainConfig { k: 1, ..cfg.clone() }.validate().is_err());
    assert!(cfg.clone().with_epochs_scale(0.0).is_err());
    let scaled = TrainConfig::default().with_epochs_scale(0.5).unwrap();
    assert_eq!(scaled.stage_epochs, [5, 8, 8]);
    let wrong = TrainConfig {
        model: ModelConfig::default(),
        ..cfg
    };
    assert!(train_staged::<f32>(&wrong, &ds, 0, Variant::Haa).unwrap_err().to_string().contains("expects"));
}

#[test]
fn standalone_localization_matches_stage0() {
    let (cfg, ds) = tiny();
    let loc = pretrain_localization::<f64>(&cfg, &ds, 6).unwrap();
    let full = train_staged::<f64>(&cfg, &ds, 6, Variant::Haa).unwrap();
    assert_eq!(loc.params, full.stage0);
    assert_eq!(Some(loc.iou), full.stage0_iou);
    assert_eq!(loc.metrics[..], full.metrics[..cfg.stage_epochs[0]]);
}
