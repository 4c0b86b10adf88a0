use super::*;
use crate::dataset::DatasetInstance;
use crate::image::Image;
use crate::network::ModelConfig;

fn dataset(n_classes: usize, per_class: usize, res: usize, aux_dim: usize) -> Dataset {
    let mut instances = Vec::new();
    for c in 0..n_classes {
        for i in 0..per_class {
            let v = -0.8 + 1.6 * c as f64 / n_classes as f64 + 0.01 * i as f64;
            let aux = (aux_dim > 0).then(|| (0..aux_dim).map(|k| f64::from(u8::from(k == i % aux_dim))).collect());
            instances.push(DatasetInstance {
                image_path: format!("{c}_{i}.png"),
                image: Image::filled(res, res, v),
                captions: vec![format!("class {c} item {i}"), format!("another class {c}")],
                class_id: c,
                aux,
            });
        }
    }
    Dataset::new(instances, n_classes, res).unwrap()
}

fn setup(aux_dim: usize) -> (TrainingState, Dataset, EncoderBackend, TrainOptions) {
    let mut cfg = ModelConfig::tiny(2);
    cfg.aux_dim = aux_dim;
    let ds = dataset(2, 4, cfg.resolution, aux_dim);
    let enc = EncoderBackend::hashing(1, cfg.text_dim);
    let state = TrainingState::new(Model::new(cfg, 3).unwrap(), AdamConfig::default());
    let opts = TrainOptions { batch_size: 4, seed: 11 };
    (state, ds, enc, opts)
}

#[test]
fn zero_learning_rate_keeps_params() {
    let (mut state, ds, enc, opts) = setup(0);
    let zero = AdamConfig {
        learning_rate: 0.0,
        ..AdamConfig::default()
    };
    state.opt_d.config = zero;
    state.opt_g.config = zero;
    let before = state.model.params.clone();
    train(&mut state, &ds, &enc, &opts, 2, |_, _| Ok(())).unwrap();
    assert_eq!(state.model.params, before);
    assert_eq!(state.step, 2);
}

#[test]
fn steps_touch_only_their_partition() {
    let (mut state, ds, enc, opts) = setup(3);
    let (batch, noise_d, noise_g) = step_inputs(&ds, &enc, &state.model, &opts, 0).unwrap();

    let before = state.model.params.clone();
    discriminator_step(&mut state, &batch, &noise_d).unwrap();
    assert_eq!(state.model.params.generator, before.generator);
    assert_ne!(state.model.params.discriminator, before.discriminator);

    let before = state.model.params.clone();
    generator_step(&mut state, &batch, &noise_g).unwrap();
    assert_eq!(state.model.params.discriminator, before.discriminator);
    assert_ne!(state.model.params.generator, before.generator);
}

#[test]
fn identical_seeds_give_identical_losses() {
    let run = || {
        let (mut state, ds, enc, opts) = setup(3);
        let mut log = Vec::new();
        train(&mut state, &ds, &enc, &opts, 3, |_, l| {
            log.push(*l);
            Ok(())
        })
        .unwrap();
        (log, state)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    for l in &a {
        assert!(l.d_aux.is_some() && l.g_aux.is_some());
        for (_, v) in l.terms() {
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let (mut state, ds, enc, opts) = setup(0);
    state.model.params.discriminator.get_mut("d.source.b").unwrap().data_mut()[0] = f64::NAN;
    match train(&mut state, &ds, &enc, &opts, 1, |_, _| Ok(())) {
        Err(Error::NonFinite { term, step }) => {
            assert_eq!(term, "d_source");
            assert_eq!(step, 0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_encoder_is_rejected() {
    let (mut state, ds, _, opts) = setup(0);
    let enc = EncoderBackend::hashing(1, 7);
    assert!(matches!(
        train(&mut state, &ds, &enc, &opts, 1, |_, _| Ok(())),
        Err(Error::Validation(_))
    ));
}

fn checkpoint_after(steps: u64) -> Checkpoint {
    let (mut state, ds, enc, opts) = setup(3);
    train(&mut state, &ds, &enc, &opts, steps, |_, _| Ok(())).unwrap();
    let meta = [("encoder".to_string(), enc.id()), ("seed".to_string(), "11".to_string())].into();
    Checkpoint { state, meta }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let ck = checkpoint_after(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    for (name, t) in ck.state.model.params.generator.iter() {
        let u = back.state.model.params.generator.get(name).unwrap();
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(u));
    }
}

#[test]
fn bumped_version_is_reported() {
    let ck = checkpoint_after(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &ck).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(matches!(err, Error::Version { found: 2, expected: 1 }));
    let msg = err.to_string();
    assert!(msg.contains('2') && msg.contains('1'), "{msg}");
}

#[test]
fn truncated_checkpoint_is_a_load_error() {
    let ck = checkpoint_after(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &ck).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load { .. })), "cut at {cut}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (mut full, ds, enc, opts) = setup(3);
    train(&mut full, &ds, &enc, &opts, 13, |_, _| Ok(())).unwrap();

    let ck = checkpoint_after(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &ck).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap().state;
    train(&mut resumed, &ds, &enc, &opts, 10, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn loss_log_appends_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("losses.tsv");
    let l = LossBreakdown {
        d_source: 1.5,
        d_class: 0.25,
        g_source: 2.0,
        g_class: 0.125,
        d_aux: None,
        g_aux: None,
    };
    LossLog::open(&path).unwrap().append(1, &l).unwrap();
    LossLog::open(&path).unwrap().append(2, &l).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "step\tL_DS\tL_DC\tL_GS\tL_GC\n1\t1.5\t0.25\t2\t0.125\n2\t1.5\t0.25\t2\t0.125\n"
    );
}

#[test]
fn noise_is_in_range_and_reproducible() {
    let a = noise_vector(5, 9, 100);
    assert_eq!(a, noise_vector(5, 9, 100));
    assert_ne!(a, noise_vector(5, 10, 100));
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
}
