//! Training-loop behaviour on small synthetic problems.

use marrowcast_core::nn::Tensor4;
use marrowcast_core::unet::{LossKind, UNet, UNetConfig};

fn overfit_config() -> UNetConfig {
    UNetConfig {
        input_size: 64,
        in_channels: 1,
        depth: 3,
        base_channels: 4,
        channel_growth: 2,
        loss: LossKind::Bce,
        w_pos: None,
        lr: 3e-4,
        epochs: 200,
        batch_size: 1,
        seed: 0,
    }
}

/// Two bright disks of different size on a dark ramp; the target marks the
/// larger disk only.
fn sample() -> (Tensor4<f32>, Tensor4<f32>) {
    let n = 64;
    let mut x = vec![0.0f32; n * n];
    let mut y = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (fx, fy) = (c as f32, r as f32);
            let big = (fx - 22.0).powi(2) + (fy - 30.0).powi(2) <= 100.0;
            let small = (fx - 48.0).powi(2) + (fy - 44.0).powi(2) <= 9.0;
            x[r * n + c] = 0.1 + 0.2 * fx / n as f32 + if big || small { 0.6 } else { 0.0 };
            y[r * n + c] = f32::from(u8::from(big));
        }
    }
    (
        Tensor4::from_vec([1, 1, n, n], x).unwrap(),
        Tensor4::from_vec([1, 1, n, n], y).unwrap(),
    )
}

#[test]
fn overfits_a_single_sample() {
    let (x, y) = sample();
    let mut net = UNet::<f32>::build(overfit_config(), 7).unwrap();
    let data = vec![(x, y)];
    let losses: Vec<f64> = (0..200).map(|e| net.train_epoch(&data, e as u64).unwrap()).collect();
    let last = *losses.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
    // eventual monotonicity: mean loss of consecutive 20-epoch windows after
    // epoch 50 never rises
    let means: Vec<f64> = losses[50..].chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for (i, pair) in means.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "window {} mean rose: {} -> {}", i + 1, pair[0], pair[1]);
    }
}

#[test]
fn equal_seeds_give_equal_loss_sequences() {
    let (x, y) = sample();
    let data = vec![(x.clone(), y.clone()), (x.map(|v| 1.0 - v), y)];
    let config = UNetConfig {
        depth: 2,
        epochs: 4,
        batch_size: 1,
        ..overfit_config()
    };
    let run = || {
        let mut net = UNet::<f32>::build(config.clone(), 3).unwrap();
        (0..4).map(|e| net.train_epoch(&data, 100 + e).unwrap().to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_binary_targets_train() {
    let (x, y) = sample();
    let soft = y.map(|v| 0.25 + 0.5 * v);
    let mut net = UNet::<f32>::build(UNetConfig { depth: 2, ..overfit_config() }, 1).unwrap();
    let loss = net.train_epoch(&[(x, soft)], 0).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}
