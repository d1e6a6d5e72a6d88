use bmn::autodiff::Matrix;
use bmn::checkpoint::Checkpoint;
use bmn::data::{generate_synthetic, Dataset, Item, Modality, SyntheticSpec};
use bmn::eval::{evaluate, generate_eval_pairs, read_pairs, write_pairs};
use bmn::model::{ModelConfig, ModelParams};
use bmn::run::{train_run, RunConfig};
use bmn::target::TargetSpec;
use bmn::trainer::{train, TrainConfig};
use bmn::Error;

fn small_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        d: 16,
        p: 1,
        encoder_hidden: vec![32],
        ..ModelConfig::default()
    }
}

#[test]
fn generated_dataset_is_clustered() {
    let ds = generate_synthetic(&SyntheticSpec::benchmark()).unwrap();
    assert_eq!(ds.len(), 1000);
    assert_eq!(ds.identity_count(), 50);
    let dist = |a: usize, b: usize| -> f64 {
        let (x, y) = (ds.input(a, false), ds.input(b, false));
        x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
    };
    let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
    for a in (0..ds.len()).step_by(7) {
        for b in (a + 1..ds.len()).step_by(5) {
            if ds.items[a].identity == ds.items[b].identity {
                within += dist(a, b);
                nw += 1;
            } else {
                across += dist(a, b);
                na += 1;
            }
        }
    }
    assert!(nw > 0 && na > 0);
    assert!(within / nw as f64 * 3.0 < across / na as f64);
}

#[test]
fn dataset_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec { n_identities: 4, images_per_identity: 3, ..SyntheticSpec::benchmark() }).unwrap();
    let path = dir.path().join("d.bmnds");
    ds.write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(Dataset::read(&path).unwrap(), ds);
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(Dataset::read(&path), Err(Error::Format { .. })));
}

#[test]
fn image_modality_flows_through_evaluation() {
    let modality = Modality::Image { width: 3, height: 2 };
    let mut items = Vec::new();
    for id in 0..3u32 {
        for k in 0..3 {
            let input = (0..6).map(|i| ((id as f32 * 0.3) + i as f32 * 0.05 + k as f32 * 0.01).min(1.0)).collect();
            items.push(Item { identity: id, input });
        }
    }
    let ds = Dataset::new(modality, 6, items).unwrap();
    let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
    assert_eq!(back.modality, modality);
    let params = ModelParams::init(&small_config(6)).unwrap();
    let pairs = generate_eval_pairs(&ds, 4, 2).unwrap();
    let report = evaluate(&params, &TargetSpec::default(), &ds, &pairs).unwrap();
    assert_eq!(report.n_matching + report.n_non_matching, 8);
}

#[test]
fn pairs_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec { n_identities: 5, images_per_identity: 4, ..SyntheticSpec::benchmark() }).unwrap();
    let pairs = generate_eval_pairs(&ds, 12, 9).unwrap();
    let path = dir.path().join("pairs.txt");
    write_pairs(&path, &pairs).unwrap();
    assert_eq!(read_pairs(&path).unwrap(), pairs);
}

#[test]
fn trained_checkpoint_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let all = generate_synthetic(&SyntheticSpec { n_identities: 12, images_per_identity: 8, ..SyntheticSpec::benchmark() }).unwrap();
    let (train_set, test_set) = all.split_identities(4, 0).unwrap();
    train_set.write(&dir.path().join("train.bmnds")).unwrap();

    let text = "dataset = \"train.bmnds\"\noutput = \"out\"\n[model]\ninput_dim = 16\nd = 16\np = 1\nencoder_hidden = [32]\n[train]\nmax_iterations = 15\ncheckpoint_every = 0\n";
    std::fs::write(dir.path().join("run.toml"), text).unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
    let outcome = train_run(&cfg, None).unwrap();
    let ck = Checkpoint::load_expecting(&outcome.final_checkpoint, &cfg.model).unwrap();
    assert_eq!(ck.step, 15);

    let direct = train(&train_set, ModelParams::init(&cfg.model).unwrap(), &cfg.target, &cfg.train).unwrap();
    assert_eq!(direct.params, ck.params);

    let pairs = generate_eval_pairs(&test_set, 30, 3).unwrap();
    let a = evaluate(&ck.params, &ck.target, &test_set, &pairs).unwrap();
    let b = evaluate(&direct.params, &cfg.target, &test_set, &pairs).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_rejects_unusable_datasets() {
    let empty = Dataset::new(Modality::Vector, 16, Vec::new()).unwrap();
    let params = ModelParams::init(&small_config(16)).unwrap();
    let err = train(&empty, params.clone(), &TargetSpec::default(), &TrainConfig::default());
    assert!(matches!(err, Err(Error::DatasetInsufficient(_))));

    let wrong_dim = generate_synthetic(&SyntheticSpec { input_dim: 8, ..SyntheticSpec::benchmark() }).unwrap();
    assert!(train(&wrong_dim, params, &TargetSpec::default(), &TrainConfig::default()).is_err());
}

#[test]
fn latent_shapes_across_p() {
    for p in [1, 3, 8] {
        let params = ModelParams::init(&ModelConfig { p, ..small_config(4) }).unwrap();
        let x = Matrix::filled(5, 4, 0.2);
        assert_eq!(params.latent(&x, &x).unwrap().shape(), (5, p));
    }
}
