use aroid_nn::loss::cross_entropy;
use aroid_nn::{BackwardMode, ConvNetSpec, Network, Readout, Tensor};
use rand::{Rng, SeedableRng};
use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for widths in [vec![8, 16, 32], vec![16, 32, 64], vec![8, 16, 32, 32]] {
        let spec = ConvNetSpec { in_channels: 3, height: 32, width: 32, widths: widths.clone(), readout: Readout::Flatten, outputs: Some(10) };
        let net = Network::build(&spec, &mut rng);
        let n = 64;
        let x = Tensor::from_vec(&[n, 3, 32, 32], (0..n * 3072).map(|_| rng.random::<f32>()).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let reps = 10;
        let t = Instant::now();
        for _ in 0..reps {
            let (logits, tape) = net.forward_tape(&x).unwrap();
            let (_, g) = cross_entropy(&logits, &y).unwrap();
            net.backward(&tape, g, BackwardMode::INPUT).unwrap();
        }
        let inp = t.elapsed().as_secs_f64() / (reps * n) as f64;
        let t = Instant::now();
        for _ in 0..reps {
            net.forward(&x).unwrap();
        }
        let fwd = t.elapsed().as_secs_f64() / (reps * n) as f64;
        println!("{widths:?} params={} fwd {:.3} ms/img, fwd+bwd_input {:.3} ms/img", net.num_params(), fwd * 1e3, inp * 1e3);
    }
}
