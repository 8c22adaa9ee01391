use gazedrop::dropout::{DropoutSpec, Phase};
use gazedrop::net::{ArchConfig, GazeInput, PilotNetMini};
use gazedrop::tensor::{sample_uniform, RngStream};
use std::time::Instant;

fn main() {
    let arch = ArchConfig::default();
    let mut rng = RngStream::from_seed(1);
    let net = PilotNetMini::new(arch.clone(), &mut rng).unwrap();
    println!("params: {}", net.param_count());

    let n = 64;
    let frames = sample_uniform(&[n, 48, 128, 1], &mut rng).unwrap().add_scalar(-0.5);
    let targets: Vec<f32> = (0..n).map(|i| (i as f32) * 0.1 - 3.0).collect();
    let spec = DropoutSpec::uniform(0.1, Phase::Train);

    // warmup
    let _ = net.backward(&frames, &targets, &spec, GazeInput::None, &mut rng.clone()).unwrap();
    let t0 = Instant::now();
    let steps = 5;
    for _ in 0..steps {
        let _ = net.backward(&frames, &targets, &spec, GazeInput::None, &mut rng.clone()).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("train step (batch {n}): {:.1} ms -> {:.1} ms/sample", dt * 1e3, dt * 1e3 / n as f64);

    let tspec = DropoutSpec::uniform(0.1, Phase::Test);
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let _ = net.forward(&frames, &tspec, GazeInput::None, &mut rng.clone()).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("batch-{n} forward: {:.1} ms -> {:.2} ms/sample", dt * 1e3, dt * 1e3 / n as f64);

    let one = sample_uniform(&[1, 48, 128, 1], &mut rng).unwrap();
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = net.forward(&one, &spec, GazeInput::None, &mut rng).unwrap();
    }
    println!("50 single-frame stochastic passes: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
}
