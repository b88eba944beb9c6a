use etnet::data::{synth_train, SynthConfig};
use etnet::model::{BranchKind, EtNetModel};
use etnet::training::{train, TrainConfig};

#[test]
fn three_wave_loss_falls_within_fifty_epochs() {
    let synth = SynthConfig { copies: 6, interval: 1.0 / 24.0, seed: 3, ..SynthConfig::default() };
    let data: Vec<Vec<f64>> = synth_train(&synth).unwrap().into_iter().map(|w| w.values).collect();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 6,
        hidden: 4,
        latent_dim: 2,
        n_branches: 2,
        gmm_k: 3,
        schedule_len: 32,
        learning_rate: 1e-2,
        lambda: 1e-3,
        membership_passes: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let (_, reports) = train(EtNetModel::initialize(cfg, &data).unwrap(), &data).unwrap();
    for kind in [BranchKind::W, BranchKind::D] {
        let totals: Vec<f64> = reports.iter().filter(|r| r.branch == kind).map(|r| r.total).collect();
        assert_eq!(totals.len(), 50);
        assert!(totals[49] < totals[0], "{kind:?}: {} vs {}", totals[49], totals[0]);
    }
}
