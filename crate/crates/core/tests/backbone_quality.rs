use sru::backbone::{train_backbone, BackboneConfig};
use sru::corpus::{drop_unseen_items, generate_synthetic, split, SplitRatios, SyntheticConfig};
use sru::evaluation::{evaluate, Popularity};

#[test]
fn gru_beats_popularity_on_clustered_sessions() {
    let data = generate_synthetic(&SyntheticConfig {
        num_sessions: 1500,
        vocab_size: 200,
        num_clusters: 2,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let (train, _, test) = split(&data, SplitRatios(8, 1, 1), 5).unwrap();
    let test = drop_unseen_items(&test, &train);
    let cfg = BackboneConfig { dim: 32, epochs: 15, batch_size: 64, lr: 5e-3, seed: 5, patience: 0, ..Default::default() };
    let gru = train_backbone::<f32>(&train, &cfg).unwrap();
    let model = evaluate(&gru, &test, &[10]).unwrap().recall_at(10).unwrap();
    let pop = evaluate(&Popularity::fit(&train), &test, &[10]).unwrap().recall_at(10).unwrap();
    assert!(model > 5.0 * pop, "GRU Recall@10 {model:.4} vs popularity {pop:.4}");
}
