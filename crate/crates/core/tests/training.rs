use formcast_core::dataset::{DataSettings, Dataset};
use formcast_core::nn::NetConfig;
use formcast_core::train::{split, TargetKind, TrainConfig, Trainer};

fn small_settings() -> DataSettings {
    DataSettings {
        resolution: 16,
        cloud_spacing_mm: 20.0,
        mesh_spacing_mm: 20.0,
        ..DataSettings::default()
    }
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn first_epoch_improves_on_untrained_net() {
    let data = Dataset::generate(4, &small_settings(), 1).unwrap();
    let mut t = Trainer::new(NetConfig::reference(16, 1), TargetKind::Thinning, config(5)).unwrap();
    let before = t.evaluate_loss(&data.samples).unwrap();
    t.train_epoch(&data.samples).unwrap();
    let after = t.evaluate_loss(&data.samples).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn resume_reproduces_next_epoch() {
    let data = Dataset::generate(4, &small_settings(), 2).unwrap();
    let mut a = Trainer::new(NetConfig::reference(16, 3), TargetKind::Displacement, config(9)).unwrap();
    a.train_epoch(&data.samples).unwrap();
    let bytes = a.checkpoint().unwrap().to_bytes().unwrap();
    let mut b = Trainer::from_checkpoint(formcast_core::fqt::Container::from_bytes(&bytes).unwrap()).unwrap();
    let la = a.train_epoch(&data.samples).unwrap();
    let lb = b.train_epoch(&data.samples).unwrap();
    assert!((la - lb).abs() < 1e-6, "{la} vs {lb}");
    assert_eq!(a.adam.step, b.adam.step);
}

#[test]
fn same_seed_same_run() {
    let data = Dataset::generate(5, &small_settings(), 3).unwrap();
    let (tr, te) = split(data.len(), 0.2, 0).unwrap();
    let pick = |ix: &[usize]| ix.iter().map(|&i| data.samples[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&tr), pick(&te));
    let run = |seed| {
        let mut t = Trainer::new(NetConfig::reference(16, 1), TargetKind::Thinning, config(seed)).unwrap();
        t.run(&train, &test, None).unwrap()
    };
    let (r1, r2) = (run(4), run(4));
    assert_eq!(r1.epochs.len(), 3);
    assert_eq!(r1.epochs.len(), r2.epochs.len());
    for (a, b) in r1.epochs.iter().zip(&r2.epochs) {
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.test_loss, b.test_loss);
    }
}

#[test]
fn run_restores_best_weights_and_writes_checkpoint() {
    let data = Dataset::generate(3, &small_settings(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.fqt");
    let mut t = Trainer::new(NetConfig::reference(16, 1), TargetKind::Thinning, config(1)).unwrap();
    let run = t.run(&data.samples[..2], &data.samples[2..], Some(&path)).unwrap();
    let best = run
        .epochs
        .iter()
        .filter_map(|e| e.test_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(run.best_loss, best);
    let reloaded = Trainer::load(&path).unwrap();
    let l = reloaded.evaluate_loss(&data.samples[2..]).unwrap();
    assert!((l - best).abs() < 1e-9 * best.max(1.0), "{l} vs {best}");
}

#[test]
fn dataset_round_trip_on_disk() {
    let data = Dataset::generate(3, &small_settings(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, data);
    let ids: Vec<&str> = back.manifest.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["s00000", "s00001", "s00002"]);
}

#[test]
fn tampered_sample_fails_checksum() {
    let data = Dataset::generate(2, &small_settings(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let p = dir.path().join("samples/s00001.fqt");
    let mut c = formcast_core::fqt::Container::read(&p).unwrap();
    let input = c.tensors.iter_mut().find(|(n, _)| n == "input").unwrap();
    input.1.data_mut()[16 * 16 + 3] += 0.5;
    c.write(&p).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}
