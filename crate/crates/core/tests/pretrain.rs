//! Pretraining recipes on reduced Shapes10 runs.

use tdaa_core::data::{gen_shapes10, ShapesVariant, Split};
use tdaa_core::models::{encode, ModelParams};
use tdaa_core::pretrain::{pretrain_encoder, PretrainConfig, PretrainMethod};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

#[test]
fn config_preconditions() {
    let ds = gen_shapes10(ShapesVariant::A, 0, Split::Train, 20).unwrap();
    for bad in [
        PretrainConfig { epochs: 0, ..Default::default() },
        PretrainConfig { temperature: 0.0, ..Default::default() },
        PretrainConfig { batch_size: 1, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
        assert!(pretrain_encoder(&bad, &ds).is_err());
    }
    // Batch larger than the dataset.
    assert!(pretrain_encoder(&PretrainConfig::default(), &ds).is_err());
    for m in PretrainMethod::ALL {
        assert_eq!(PretrainMethod::parse(m.as_str()).unwrap(), m);
    }
}

#[test]
fn every_recipe_is_deterministic() {
    let ds = gen_shapes10(ShapesVariant::A, 4, Split::Train, 40).unwrap();
    for method in PretrainMethod::ALL {
        let cfg = PretrainConfig { method, batch_size: 20, epochs: 1, seed: 6, ..Default::default() };
        let (a, ra) = pretrain_encoder(&cfg, &ds).unwrap();
        let (b, rb) = pretrain_encoder(&cfg, &ds).unwrap();
        assert_eq!(a, b, "{}", method.as_str());
        assert_eq!(ra, rb);
        assert_ne!(a, ModelParams::init(tdaa_core::models::Arch::Encoder, 0));
        assert!(ra.final_loss().is_finite());
    }
}

fn mean_distances(f: &tdaa_core::Tensor<f32>, labels: &[u8]) -> (f64, f64) {
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d = f.row(i).iter().zip(f.row(j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
        }
    }
    (intra / ni as f64, inter / ne as f64)
}

#[test]
fn simclr_loss_falls_and_classes_separate() {
    let train = gen_shapes10(ShapesVariant::A, 0, Split::Train, 640).unwrap();
    let cfg = PretrainConfig { epochs: 5, ..Default::default() };
    let (enc, report) = pretrain_encoder(&cfg, &train).unwrap();
    let per_epoch: Vec<f64> = report.step_losses.chunks(5).map(|c| median(c.to_vec())).collect();
    assert_eq!(per_epoch.len(), 5);
    for w in per_epoch.windows(2) {
        assert!(w[1] < w[0], "{per_epoch:?}");
    }
    let test = gen_shapes10(ShapesVariant::A, 0, Split::Test, 200).unwrap();
    let f = encode(&enc, test.images(), 100).unwrap();
    let (intra, inter) = mean_distances(&f, test.labels());
    assert!(intra < inter, "intra {intra} inter {inter}");
}
