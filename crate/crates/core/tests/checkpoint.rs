use stmg::backbone::Backbone;
use stmg::checkpoint::{load, load_matching, save};
use stmg::config::ExperimentConfig;
use stmg::maskgen::MaskGenerator;
use stmg::Error;

fn models(config: &ExperimentConfig) -> (Backbone, MaskGenerator) {
    let b = Backbone::new(config.backbone.clone(), 11).unwrap();
    let g = MaskGenerator::new(config.maskgen.clone(), &config.backbone, 12).unwrap();
    (b, g)
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.safetensors");
    let mut config = ExperimentConfig::default();
    config.maskgen.rho = 0.3;
    let (b, g) = models(&config);
    save(&path, &config, &b, &g).unwrap();

    let ck = load(&path).unwrap();
    assert_eq!(ck.config, config);
    for (a, r) in b.params.entries().iter().zip(ck.backbone.params.entries()) {
        assert_eq!(a.name, r.name);
        assert_eq!(a.value, r.value);
    }
    for (a, r) in g.params.entries().iter().zip(ck.generator.params.entries()) {
        assert_eq!(a.name, r.name);
        assert_eq!(a.value, r.value);
    }
    assert_eq!(ck.generator.config().rho, 0.3);
}

#[test]
fn architecture_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let config = ExperimentConfig::default();
    let (b, g) = models(&config);
    save(&path, &config, &b, &g).unwrap();

    let mut other = config.clone();
    other.maskgen.gate_channels = 4;
    assert!(matches!(load_matching(&path, &other), Err(Error::Checkpoint(_))));
    let mut same_arch = config.clone();
    same_arch.train.lr = 1.0;
    assert!(load_matching(&path, &same_arch).is_ok());
}

#[test]
fn garbage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.safetensors");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(load(&path).is_err());
    assert!(load(&dir.path().join("missing")).is_err());
}
