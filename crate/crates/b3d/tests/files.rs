use b3d::bench::{BenchResult, Mode};
use b3d::checkpoint;
use b3d::config::{AppConfig, TrainSection};
use b3d::container::{self, SampleSet};
use b3d::csv::{self, LossRow, LOSS_HEADER};
use b3d::manifest::{manifest_path, RunManifest};
use b3d::AppError;
use b3d_core::backbone::{BackboneConfig, Model};
use b3d_core::layout::{build_triplet, pack_document, LayoutConfig, LayoutRng, LayoutStats, Vocab};
use b3d_core::numerics::ElemKind;
use b3d_core::train::{BatchSource, TrainConfig, Trainer};

fn sample_set(count: usize) -> SampleSet {
    let layout = LayoutConfig {
        block_size: 8,
        n_blocks: 3,
        seed: 4,
        ..Default::default()
    };
    let v = Vocab::bytes();
    let mut st = LayoutStats::default();
    let samples = (0..count)
        .map(|k| {
            let text: Vec<u8> = (0..k % 23).map(|i| b'a' + ((i * 7 + k) % 26) as u8).collect();
            let p = pack_document(&v.encode(&text), &layout, &v, &mut st).unwrap();
            build_triplet(
                &p.gold,
                &p.lossable,
                p.eos_block,
                &LayoutRng::new(4, k as u64),
                &layout,
                &v,
                &mut st,
            )
            .unwrap()
        })
        .collect();
    SampleSet {
        block_size: 8,
        n_blocks: 3,
        vocab_size: v.size(),
        samples,
    }
}

#[test]
fn container_round_trips_and_has_the_predicted_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.trpl");
    let set = sample_set(64);
    container::write(&path, &set).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), container::file_size(8, 3, 64));
    assert_eq!(container::load(&path).unwrap(), set);
}

#[test]
fn truncated_container_is_a_format_error() {
    let bytes = container::encode(&sample_set(5)).unwrap();
    for cut in [3, 20, bytes.len() - 1] {
        let err = container::decode(&bytes[..cut]).unwrap_err();
        assert!(!err.is_empty());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.trpl");
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let err = container::load(&path).unwrap_err();
    assert!(matches!(err, AppError::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

proptest::proptest! {
    #[test]
    fn any_prepared_set_round_trips(
        docs in proptest::collection::vec(proptest::collection::vec(proptest::prelude::any::<u8>(), 0..40), 0..6),
        seed in 0u64..1000,
    ) {
        let layout = LayoutConfig { block_size: 5, n_blocks: 8, seed, ..Default::default() };
        let v = Vocab::bytes();
        let mut st = LayoutStats::default();
        let samples = docs
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let p = pack_document(&v.encode(d), &layout, &v, &mut st).unwrap();
                build_triplet(&p.gold, &p.lossable, p.eos_block, &LayoutRng::new(seed, k as u64), &layout, &v, &mut st).unwrap()
            })
            .collect();
        let set = SampleSet { block_size: 5, n_blocks: 8, vocab_size: v.size(), samples };
        let bytes = container::encode(&set).unwrap();
        proptest::prop_assert_eq!(bytes.len() as u64, container::file_size(5, 8, docs.len()));
        proptest::prop_assert_eq!(container::decode(&bytes).unwrap(), set);
    }
}

#[test]
fn empty_container_round_trips() {
    let set = sample_set(0);
    let bytes = container::encode(&set).unwrap();
    assert_eq!(bytes.len() as u64, container::file_size(8, 3, 0));
    assert_eq!(container::decode(&bytes).unwrap(), set);
}

fn tiny_trainer() -> Trainer<f64> {
    let cfg = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        vocab_size: 259,
        ..Default::default()
    };
    let set = sample_set(4);
    let mut t = Trainer::new(
        Model::<f64>::init(&cfg, 3).unwrap(),
        TrainConfig {
            batch_size: 2,
            ..Default::default()
        },
    )
    .unwrap();
    t.run(&BatchSource::Fixed { samples: set.samples }, 3, |_, _, _| Ok(()))
        .unwrap();
    t
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.b3dk");
    let b = dir.path().join("b.b3dk");
    let t = tiny_trainer();
    let train = TrainSection {
        batch_size: 2,
        ..Default::default()
    };
    checkpoint::save(&a, &t, 11, &train).unwrap();
    let (header, back) = checkpoint::load::<f64>(&a).unwrap();
    assert_eq!(header.step, 3);
    assert_eq!(header.seed, 11);
    assert_eq!(header.elem, "f64");
    // gradients are scratch space and are not stored
    for (x, y) in back.model.params().iter().zip(t.model.params()) {
        assert_eq!(x.value, y.value);
    }
    assert_eq!(back.adam, t.adam);
    checkpoint::save(&b, &back, 11, &header.train).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn f32_checkpoints_load_as_f32() {
    let t = tiny_trainer();
    let bytes = checkpoint::encode(&t, 0, &TrainSection::default(), ElemKind::F32);
    let (h, back) = checkpoint::decode::<f32>(&bytes).unwrap();
    assert_eq!(h.elem, "f32");
    let want: Model<f32> = t.model.cast();
    for (x, y) in back.model.params().iter().zip(want.params()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let t = tiny_trainer();
    let mut bytes = checkpoint::encode(&t, 0, &TrainSection::default(), ElemKind::F64);
    let k = bytes.len() / 2;
    bytes[k] ^= 0x40;
    let err = checkpoint::decode::<f64>(&bytes).unwrap_err();
    assert!(err.contains("CRC"), "{err}");
    assert!(checkpoint::decode::<f64>(&bytes[..10]).is_err());
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let t = tiny_trainer();
    let bytes = checkpoint::encode(&t, 0, &TrainSection::default(), ElemKind::F64);
    let body = &bytes[..bytes.len() - 4];
    // rewrite the header so it claims a narrower model, keeping its length
    let text = String::from_utf8_lossy(body).into_owned();
    assert!(text.contains("d_model = 16"));
    let at = body.windows(12).position(|w| w == b"d_model = 16").unwrap();
    let mut forged = body.to_vec();
    forged[at..at + 12].copy_from_slice(b"d_model = 12");
    let crc = crc32fast::hash(&forged);
    forged.extend_from_slice(&crc.to_le_bytes());
    let err = checkpoint::decode::<f64>(&forged).unwrap_err();
    assert!(err.contains("tensor \"emb\""), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[train]\nlearning_rate = 0.1\n").unwrap();
    let err = AppConfig::resolve(Some(&path), &[]).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
    assert_eq!(err.exit_code(), 1);
    let err = AppConfig::resolve(None, &["sampler.bogus=1".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn overrides_beat_the_file_and_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 3\n[sampler]\ntau = 0.5\nk_min = 2\n").unwrap();
    let cfg = AppConfig::resolve(Some(&path), &["sampler.tau=0.75".into()]).unwrap();
    assert_eq!(cfg.sampler.tau, 0.75);
    assert_eq!(cfg.sampler.k_min, 2);
    assert_eq!(cfg.seed, 3);

    let artifact = dir.path().join("bench.csv");
    let written = RunManifest::new("bench", &cfg, &artifact, 0.0)
        .write(&artifact)
        .unwrap();
    assert_eq!(written, manifest_path(&artifact));
    let back: RunManifest = toml::from_str(&std::fs::read_to_string(&written).unwrap()).unwrap();
    assert_eq!(back.config.sampler.tau, 0.75);
    assert_eq!(back.seed, 3);
    assert_eq!(back.command, "bench");
    assert!(back.finished_unix >= back.started_unix);
}

#[test]
fn bench_csv_header_is_fixed() {
    let text = csv::bench_csv(&[]);
    assert_eq!(
        text,
        "mode,B,T,tau,k_min,tokens,seconds,tok_per_s,mean_iters,accuracy\n"
    );
}

#[test]
fn bench_csv_round_trips() {
    let rows = vec![
        BenchResult {
            mode: Mode::Ar,
            block_size: 8,
            max_iters: 0,
            tau: 0.0,
            k_min: 0,
            tokens: 96,
            seconds: 0.125,
            tok_per_s: 768.0,
            mean_iters: 8.0,
            accuracy: 1.0,
        },
        BenchResult {
            mode: Mode::Diffusion,
            block_size: 8,
            max_iters: 4,
            tau: 0.7,
            k_min: 2,
            tokens: 96,
            seconds: 0.0625,
            tok_per_s: 1536.0,
            mean_iters: 2.5,
            accuracy: 0.96875,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.csv");
    csv::emit_csv(&rows, &path).unwrap();
    assert_eq!(csv::load_bench_csv(&path).unwrap(), rows);
    csv::emit_csv(&[], &path).unwrap();
    assert!(csv::load_bench_csv(&path).unwrap().is_empty());
}

#[test]
fn loss_csv_round_trips() {
    let rows = vec![
        LossRow {
            step: 1,
            ce: 5.5,
            cap: 0.0,
            total: 5.5,
            acc: 0.0,
            lr: 1e-4,
            eval: None,
        },
        LossRow {
            step: 2,
            ce: 0.25,
            cap: 0.125,
            total: 0.3125,
            acc: 0.5,
            lr: 2e-4,
            eval: Some((0.5, 0.75)),
        },
    ];
    let text = csv::loss_csv(&rows);
    assert!(text.starts_with(LOSS_HEADER));
    assert_eq!(csv::parse_loss_csv(&text).unwrap(), rows);
}
