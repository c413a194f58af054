use mdmt_core::model::{ModelConfig, DISCRIMINATOR_PREFIX};
use mdmt_core::tensor::ops::softmax_rows;
use mdmt_core::train::{accuracy, train_discriminator_on_features, StageLogs, TrainConfig};
use mdmt_core::{Model, RngStream, Tensor};

const D: usize = 64;
const K: usize = 4;
const HELD_OUT_ACCURACY: f64 = 0.98;

fn gaussians(per: usize, centers: &[Vec<f64>], rng: &mut RngStream) -> (Tensor<f32>, Vec<usize>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per * centers.len() {
        let c = i % centers.len();
        data.extend(centers[c].iter().map(|m| (m + rng.normal()) as f32));
        labels.push(c);
    }
    (Tensor::new(vec![labels.len(), D], data).unwrap(), labels)
}

fn scores(model: &Model<f32>, x: &Tensor<f32>) -> Vec<Vec<f64>> {
    let s = model.category_scores(x).unwrap();
    (0..s.as_matrix_dims().0).map(|i| s.row(i).iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn separable_features_are_learned_and_nothing_else_moves() {
    for seed in 1..=3u64 {
        let mut rng = RngStream::new(seed);
        let centers: Vec<Vec<f64>> = (0..K).map(|_| (0..D).map(|_| 0.6 * rng.normal()).collect()).collect();
        let (train_x, train_y) = gaussians(200, &centers, &mut rng);
        let (test_x, test_y) = gaussians(100, &centers, &mut rng);

        let mut model = Model::<f32>::new(ModelConfig {
            src_vocab: 10,
            tgt_vocab: 10,
            num_experts: K,
            seed,
            ..ModelConfig::desk()
        })
        .unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            discriminator_updates: 300,
            ..TrainConfig::default()
        };
        let report = train_discriminator_on_features(&mut model, &train_x, &train_y, &cfg, seed, false, StageLogs::default()).unwrap();

        for name in before.names() {
            assert!(!name.starts_with(DISCRIMINATOR_PREFIX));
            assert_eq!(before.get(name).unwrap(), model.params.get(name).unwrap(), "{name} changed");
        }
        assert!(report.train_accuracy >= report.majority_baseline);
        let held_out = accuracy(&scores(&model, &test_x), &test_y);
        assert!(held_out >= HELD_OUT_ACCURACY, "seed {seed}: held-out accuracy {held_out}");

        for row in scores(&model, &test_x) {
            let p = softmax_rows(&row, K);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn labels_must_fit_the_category_count() {
    let mut model = Model::<f32>::new(ModelConfig {
        src_vocab: 10,
        tgt_vocab: 10,
        num_experts: K,
        ..ModelConfig::desk()
    })
    .unwrap();
    let x = Tensor::zeros(&[2, D]);
    let err = train_discriminator_on_features(&mut model, &x, &[0, K], &TrainConfig::default(), 1, false, StageLogs::default());
    assert!(err.is_err());
}
