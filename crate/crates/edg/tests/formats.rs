mod common;

use common::{tiny_config, write_config, GAUSSIAN};
use edg::commands::{load_experiment, load_trained};
use edg::formats::*;
use edg_core::loss::{loss_on_draws, BatchDraws};
use edg_core::model::{Model, ModelParams};
use edg_core::train::Trainer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn checkpoint_round_trip_gives_identical_probe_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "g.toml", &tiny_config(GAUSSIAN, tmp.path(), 6));
    let (cfg, target) = load_experiment(&cfg_path, None, None).unwrap();
    let mut trainer = Trainer::new(&cfg.model_spec(), cfg.train.clone()).unwrap();
    for _ in 0..6 {
        trainer.train_step(target.energy()).unwrap();
    }
    let path = tmp.path().join("c.bin");
    let cp = trainer.checkpoint(&cfg.digest());
    save_checkpoint(&path, &cfg, &cp).unwrap();
    let (cfg2, cp2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(cp2, cp);

    let loaded = load_trained(&path).unwrap();
    let spec = cfg.model_spec();
    let probe = |model: &Model, params: &ModelParams| {
        let ctx = model.score_context(params, target.energy()).unwrap();
        let proposal = trainer.proposal.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = BatchDraws::sample(proposal, spec.latent_dim(), spec.data_dim(), 16, &mut rng);
        loss_on_draws(&ctx, cfg.train.loss_variant, &draws).unwrap().total
    };
    let before = probe(&trainer.model, &trainer.params);
    let after = probe(&loaded.model, &loaded.params);
    assert_eq!(before.to_bits(), after.to_bits());

    // resumed training continues the same trajectory
    let mut resumed = Trainer::from_checkpoint(cp2).unwrap();
    let a = trainer.train_step(target.energy()).unwrap().unwrap();
    let b = resumed.train_step(target.energy()).unwrap().unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("x.bin");
    write_container(&p, &serde_json::json!({"a": 1}), &[&[1.0, 2.0]]).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_container(&p).is_err());
    std::fs::write(&p, b"garbage!").unwrap();
    assert!(read_container(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn container_round_trips_bits(values in prop::collection::vec(any::<f64>(), 0..40)) {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.bin");
        write_container(&p, &serde_json::json!({"n": values.len()}), &[&values]).unwrap();
        let (_, back) = read_container(&p).unwrap();
        prop_assert_eq!(back.len(), values.len());
        for (a, b) in back.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sample_csv_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..20)) {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("s.csv");
        let t = edg_core::Tensor::from_rows(&rows);
        write_sample_matrix(&p, &t).unwrap();
        prop_assert_eq!(read_sample_matrix(&p).unwrap(), t);
    }
}
