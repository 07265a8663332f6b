use stmg::backbone::Backbone;
use stmg::config::ExperimentConfig;
use stmg::maskgen::MaskGenerator;
use stmg::pipeline::{train, StepLog};

fn run(config: &ExperimentConfig) -> Vec<StepLog> {
    let data = config.training_sequences().unwrap();
    let mut backbone = Backbone::new(config.backbone.clone(), config.seed).unwrap();
    let mut generator = MaskGenerator::new(config.maskgen.clone(), &config.backbone, config.seed + 1).unwrap();
    let mut logs = Vec::new();
    train(&mut backbone, &mut generator, &data, &config.train, &config.loss, config.seed + 2, |s| {
        logs.push(s.clone());
        Ok(())
    })
    .unwrap();
    logs
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn five_hundred_steps_halve_the_loss() {
    let mut config = ExperimentConfig::default();
    config.train.warmup_steps = 300;
    config.train.joint_steps = 200;
    config.train.log_every = 1;
    let logs = run(&config);
    assert_eq!(logs.len(), 500);
    let early = mean(logs[..10].iter().map(|s| s.loss.total));
    let late = mean(logs[490..].iter().map(|s| s.loss.total));
    assert!(late <= 0.5 * early, "loss {early} -> {late}");
}

#[test]
fn stronger_sparsity_prior_keeps_fewer_blocks() {
    let keep: Vec<f64> = [0.0, 1e-4, 1e-2]
        .iter()
        .map(|&kl| {
            let mut config = ExperimentConfig::default();
            config.dataset.sequences = 4;
            config.train.warmup_steps = 100;
            config.train.joint_steps = 200;
            config.train.log_every = 1;
            config.loss.kl = kl;
            let logs = run(&config);
            mean(logs[logs.len() - 20..].iter().map(|s| s.mean_keep_prob))
        })
        .collect();
    assert!(keep[0] >= keep[1] && keep[1] >= keep[2] && keep[0] > keep[2], "keep probabilities {keep:?}");
}
