//! Rough engine throughput probe. Run explicitly:
//! `cargo test -p onn-core --test throughput -- --ignored --nocapture`

use std::time::Instant;

use onn_core::ops::{conv2d, conv2d_backward, Padding};
use onn_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

#[test]
#[ignore]
fn conv_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Heaviest desk layer: 16->16 channels at 32x32, batch 32.
    let input = rand_tensor(&[32, 16, 32, 32], &mut rng);
    let weights = rand_tensor(&[16, 16, 3, 3], &mut rng);
    let bias = rand_tensor(&[16], &mut rng);

    let macs_fwd = 32.0 * 16.0 * 32.0 * 32.0 * 16.0 * 9.0;
    let reps = 20;

    let start = Instant::now();
    for _ in 0..reps {
        let out = conv2d(&input, &weights, &bias, Padding::Same).unwrap();
        std::hint::black_box(out);
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!(
        "conv2d fwd: {:.1} ms/batch, {:.2} GFLOP/s",
        dt * 1e3,
        2.0 * macs_fwd / dt / 1e9
    );

    let out = conv2d(&input, &weights, &bias, Padding::Same).unwrap();
    let start = Instant::now();
    for _ in 0..reps {
        let g = conv2d_backward(&input, &weights, &out, Padding::Same).unwrap();
        std::hint::black_box(g);
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!(
        "conv2d bwd: {:.1} ms/batch, {:.2} GFLOP/s",
        dt * 1e3,
        2.0 * 2.0 * macs_fwd / dt / 1e9
    );
}
