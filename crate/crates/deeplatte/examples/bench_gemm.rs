use deeplatte::autodiff::tensor::gemm;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a: Vec<f64> = (0..m * k).map(|i| (i % 17) as f64 * 0.1).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i % 13) as f64 * 0.1).collect();
    let mut c = vec![0.0; m * n];
    // warmup
    gemm(m, k, n, &a, &b, &mut c);
    let t0 = Instant::now();
    for _ in 0..reps {
        gemm(m, k, n, &a, &b, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
    println!("{}x{}x{}: {:.2} GFLOP/s ({:.1} ms/iter)  checksum={}", m, k, n, gflops, dt * 1000.0 / reps as f64, c[0]);
}

fn main() {
    bench(576, 2400, 256, 10); // k=5 conv gemm shape
    bench(576, 864, 256, 20);  // k=3
    bench(576, 96, 256, 50);   // k=1
    bench(2400, 256, 576, 10); // backward dW-like
    bench(576, 256, 2400, 10); // backward dX-like
}
