//! Dataset generation, RTDS files, checkpoints and weight import.

mod common;

use std::collections::BTreeMap;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use res_tuner_core::backbone::ModelConfig;
use res_tuner_core::data::*;
use res_tuner_core::tuners::{AttachOp, AttachSpec, TunerConfig, TunerKind};
use res_tuner_core::{build_backbone, Error, ModelGraph};

/// Solve `a·x = b` (square `a`, several right-hand sides) by Gaussian
/// elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                for k in 0..b[r].len() {
                    b[r][k] -= f * b[c][k];
                }
            }
        }
    }
    for c in (0..n).rev() {
        for k in 0..b[c].len() {
            let s: f64 = (c + 1..n).map(|j| a[c][j] * b[j][k]).sum();
            b[c][k] = (b[c][k] - s) / a[c][c];
        }
    }
    b
}

#[test]
fn least_squares_probe_on_raw_pixels_separates_task_a() {
    let spec = DatasetSpec::synthetic(4, 16, 200, 11);
    let d = synth_dataset(&spec).unwrap();
    let n = d.len();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| d.image(i).iter().map(|&v| v as f64).chain([1.0]).collect())
        .collect();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>() + if i == j { 1e-3 } else { 0.0 })
                .collect()
        })
        .collect();
    let y: Vec<Vec<f64>> = d
        .labels()
        .iter()
        .map(|&l| (0..4).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let alpha = solve(gram.clone(), y);
    let mut hits = 0;
    for i in 0..n {
        let scores: Vec<f64> = (0..4)
            .map(|k| (0..n).map(|j| (gram[i][j] - if i == j { 1e-3 } else { 0.0 }) * alpha[j][k]).sum())
            .collect();
        let pred = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        hits += (pred == d.labels()[i]) as usize;
    }
    let acc = hits as f64 / n as f64;
    assert!(acc >= 0.9, "least-squares probe reaches {acc}");
}

#[test]
fn synthetic_bytes_are_a_function_of_the_spec() {
    let mut spec = DatasetSpec::synthetic(3, 8, 12, 1);
    spec.task = SynthTask::B;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.rtds"), dir.path().join("b.rtds"));
    save_binary_dataset(&synth_dataset(&spec).unwrap(), &a).unwrap();
    save_binary_dataset(&synth_dataset(&spec).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn rtds_file_round_trip_and_errors() {
    let d = synth_dataset(&DatasetSpec::synthetic(3, 8, 9, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.rtds");
    save_binary_dataset(&d, &path).unwrap();
    assert_eq!(load_binary_dataset(&path).unwrap(), d);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..100]).unwrap();
    match load_binary_dataset(&path).unwrap_err() {
        Error::Format { offset, msg, .. } => {
            assert_eq!(offset, 32);
            assert!(msg.contains("truncated"));
        }
        e => panic!("{e}"),
    }

    let mut header = bytes[..28].to_vec();
    header[8..12].copy_from_slice(&0u32.to_le_bytes());
    std::fs::write(&path, &header).unwrap();
    assert!(matches!(load_binary_dataset(&path), Err(Error::EmptyDataset)));

    let mut bad = bytes.clone();
    bad[28..32].copy_from_slice(&3u32.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(load_binary_dataset(&path).unwrap_err().to_string().contains("label 3"));
}

fn tuned_model() -> ModelGraph {
    let cfg = toy_backbone(8, 2, 2);
    let mut m = build_backbone(&cfg).unwrap();
    let mut specs = vec![
        AttachSpec::new(0, AttachOp::Mha, TunerConfig::res_attn(2, 2)),
        AttachSpec::new(1, AttachOp::Mha, TunerConfig::Prefix { length: 3 }),
        AttachSpec::new(0, AttachOp::Ffn, TunerConfig::default_for(TunerKind::Adapter)),
    ];
    specs.push(AttachSpec::new(1, AttachOp::Block, TunerConfig::Prompt { length: 2 }));
    m.attach(&specs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in m.params_mut() {
        if p.trainable() {
            let s = p.value().shape().to_vec();
            p.set_value(rand_tensor(&s, 0.3, &mut rng)).unwrap();
        }
    }
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = tuned_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtck");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model_config(), m.model_config());
    for (a, b) in m.params().iter().zip(back.params()) {
        assert_eq!(a.name(), b.name());
        assert!(a.value().bit_eq(b.value()));
        assert_eq!(a.trainable(), b.trainable());
    }
    let x = images(2, m.config(), &mut ChaCha8Rng::seed_from_u64(1));
    assert!(m.logits(&x).unwrap().bit_eq(&back.logits(&x).unwrap()));

    let second = dir.path().join("again.rtck");
    save_checkpoint(&back, &second).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn flipped_payload_byte_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtck");
    save_checkpoint(&tuned_model(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checksum { .. })));
}

#[test]
fn loading_into_a_different_rank_names_the_tensor() {
    let cfg = toy_backbone(8, 2, 2);
    let build = |r: usize, h: usize| {
        ModelGraph::from_config(&ModelConfig {
            backbone: cfg.clone(),
            tuners: vec![AttachSpec::new(0, AttachOp::Mha, TunerConfig::res_attn(r, h))],
        })
        .unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtck");
    save_checkpoint(&build(4, 4), &path).unwrap();
    let mut big = build(8, 8);
    match load_state(&mut big, &path).unwrap_err() {
        Error::TensorShape { name, expected, found } => {
            assert_eq!(name, "tuners.0.mha.res_attn.qkv.weight");
            assert_eq!(expected, [8, 192]);
            assert_eq!(found, [8, 48]);
        }
        e => panic!("{e}"),
    }
    let mut bare = build_backbone(&cfg).unwrap();
    assert!(matches!(load_state(&mut bare, &path), Err(Error::UnknownTensor(_))));
}

#[test]
fn import_weights_identity_missing_extra_and_dtype() {
    let cfg = toy_backbone(8, 2, 2);
    let source = tuned_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pretrained.rtck");
    save_checkpoint(&source, &path).unwrap();

    let mut other = cfg.clone();
    other.seed = 99;
    let mut target = build_backbone(&other).unwrap();
    let map = identity_map(&target);
    let report = import_weights(&mut target, &path, &map, DType::F64).unwrap();
    for p in target.params() {
        if !p.name().starts_with("head.") {
            assert!(p.value().bit_eq(source.param(p.name()).unwrap().value()), "{}", p.name());
        }
    }
    assert!(report.warnings.iter().any(|w| w.contains("tuners.0.mha.res_attn.qkv.weight")));
    assert!(report.warnings.iter().any(|w| w.contains("head.weight")));

    let mut partial: BTreeMap<String, String> = map.clone();
    partial.remove("patch_embed.weight");
    let mut fresh = build_backbone(&other).unwrap();
    match import_weights(&mut fresh, &path, &partial, DType::F64).unwrap_err() {
        Error::MissingTensors(names) => assert_eq!(names, ["patch_embed.weight"]),
        e => panic!("{e}"),
    }

    let mut ck = read_checkpoint(&path).unwrap();
    for t in &mut ck.tensors {
        t.dtype = DType::F32;
    }
    let f32_path = dir.path().join("f32.rtck");
    write_checkpoint(&ck, &f32_path).unwrap();
    let e = import_weights(&mut fresh, &f32_path, &map, DType::F64).unwrap_err();
    assert!(matches!(e, Error::DType { .. }), "{e}");
    import_weights(&mut fresh, &f32_path, &map, DType::F32).unwrap();
}
