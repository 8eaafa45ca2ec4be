// Where does the error energy live, by training-sample iteration bucket?
// Projects each sample's error onto the live mode box and reports the
// A-norm fraction left outside.
use fcgno_core::problems::{make_poisson_instance, mix_seed, GridDescriptor};
use fcgno_core::sparse::a_norm;
use fcgno_core::spectral::SpectralPipe;
use fcgno_core::training::generate_krylov_dataset;
use fcgno_core::vecops;

fn main() {
    let grid = GridDescriptor::new(32).unwrap();
    let problems: Vec<_> = (0..4)
        .map(|j| make_poisson_instance::<f64>(&grid, mix_seed(7, 0x100 + j)).unwrap())
        .collect();
    let samples = generate_krylov_dataset(&problems, 100, 7).unwrap();
    let pipe = SpectralPipe::<f64>::new(20, 32).unwrap();

    let buckets = [(1usize, 5usize), (6, 20), (21, 50), (51, 75), (76, 100)];
    println!("bucket      n   resid_norm   out_frac_e(A)  out_frac_r(2)");
    for (lo, hi) in buckets {
        let mut count = 0;
        let mut out_e = 0.0;
        let mut out_r = 0.0;
        let mut rn = 0.0;
        for s in samples.iter().filter(|s| s.source_iteration >= lo && s.source_iteration <= hi) {
            let p = &problems[s.problem_index];
            // projection of e onto the live box
            let pe = pipe.synthesize(&pipe.analyze(&s.e).unwrap()).unwrap();
            let diff = vecops::sub(&s.e, &pe);
            out_e += a_norm(&p.matrix, &diff).unwrap() / a_norm(&p.matrix, &s.e).unwrap();
            let pr = pipe.synthesize(&pipe.analyze(&s.r).unwrap()).unwrap();
            let dr = vecops::sub(&s.r, &pr);
            out_r += vecops::norm2(&dr) / vecops::norm2(&s.r);
            rn += vecops::norm2(&s.r);
            count += 1;
        }
        println!(
            "{lo:3}-{hi:3} {count:6}   {:.3e}     {:.3}          {:.3}",
            rn / count as f64,
            out_e / count as f64,
            out_r / count as f64
        );
    }
}
