// Micro-benchmarks of the engine primitives at grid-32 training shapes.
use fcgno_core::scalar::Scalar;
use fcgno_core::spectral::SpectralPipe;
use std::time::Instant;

fn main() {
    let n = 32usize;
    let nn = n * n;
    let (w, b) = (32usize, 32usize);
    let block = b * nn;

    // pointwise GEMM shape: 32 x 32 over 32768-length planes
    let input = vec![1.0f64; w * block];
    let mut out = vec![0.0f64; w * block];
    let weights = vec![0.5f64; w * w];
    let t = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        for o in 0..w {
            let dst = &mut out[o * block..(o + 1) * block];
            for c in 0..w {
                f64::axpy(weights[o * w + c], &input[c * block..(c + 1) * block], dst);
            }
        }
    }
    let per = t.elapsed() / reps;
    println!(
        "pointwise 32x32x32768 serial: {per:.1?} ({:.1} Gflop/s)",
        2.0 * (w * w * block) as f64 / per.as_secs_f64() / 1e9
    );

    // fft2 pair via the pipe
    let pipe = SpectralPipe::<f64>::new(20, n).unwrap();
    let live = pipe.modes.live_count();
    let f1 = vec![0.3f64; nn];
    let f2 = vec![0.7f64; nn];
    let mut or1 = vec![0.0f64; live];
    let mut oi1 = vec![0.0f64; live];
    let mut or2 = vec![0.0f64; live];
    let mut oi2 = vec![0.0f64; live];
    let mut ws = pipe.make_scratch();
    let t = Instant::now();
    let reps = 2000;
    for _ in 0..reps {
        pipe.forward_extract_pair(
            &f1, Some(&f2), 1.0,
            (&mut or1, &mut oi1), Some((&mut or2, &mut oi2)),
            0, 1, &mut ws,
        );
    }
    println!("paired fft2 analysis (n=32): {:.2?}", t.elapsed() / reps);

    let t = Instant::now();
    let mut g1 = vec![0.0f64; nn];
    let mut g2 = vec![0.0f64; nn];
    for _ in 0..reps {
        pipe.place_invert_pair(
            (&or1, &oi1), Some((&or2, &oi2)), 1.0,
            &mut g1, Some(&mut g2), 0, 1, &mut ws,
        );
    }
    println!("paired fft2 synthesis (n=32): {:.2?}", t.elapsed() / reps);

    // mixing kernel shape: per live mode, 32 samples x (32x32 complex)
    let cre = vec![0.1f64; live * b * w];
    let cim = vec![0.2f64; live * b * w];
    let wre = vec![0.3f64; 400 * w * w];
    let wim = vec![0.4f64; 400 * w * w];
    let mut mre = vec![0.0f64; live * b * w];
    let mut mim = vec![0.0f64; live * b * w];
    let t = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        for li in 0..live {
            let wr = &wre[li * w * w..(li + 1) * w * w];
            let wi = &wim[li * w * w..(li + 1) * w * w];
            for bb in 0..b {
                let base = (li * b + bb) * w;
                for c in 0..w {
                    let (cr, ci) = (cre[base + c], cim[base + c]);
                    // split borrows of the same plane
                    let (mr, mi) = (&mut mre[base..base + w], &mut mim[base..base + w]);
                    f64::caxpy(cr, ci, &wr[c * w..(c + 1) * w], &wi[c * w..(c + 1) * w], mr, mi);
                }
            }
        }
    }
    let per = t.elapsed() / reps;
    println!(
        "mixing (361 modes, b=32, 32x32) serial: {per:.1?} ({:.1} Gflop/s)",
        8.0 * (live * b * w * w) as f64 / per.as_secs_f64() / 1e9
    );
}
