use kinseg::pipeline::{relative_drift, run_test1, Test1Config};

fn main() {
    let mut means = [0.0f64; 2];
    for seed in 1..=5u64 {
        for (i, eps) in [0.5, 0.01].into_iter().enumerate() {
            let cfg = Test1Config { epsilon: eps, seed, ..Default::default() };
            let out = run_test1(&cfg).unwrap();
            let d = relative_drift(&out.f_series, 0.05);
            means[i] += d / 5.0;
            let worst = out.slice_l1.iter().map(|s| s.1.max(s.2)).fold(0.0f64, f64::max);
            println!("seed {seed} eps {eps}: drift {:.4} slices(n={}) worst {:.4} rhom {:.4}/{:.4}",
                d, out.slice_l1.len(), worst, out.rhom_l1[0], out.rhom_l1[1]);
        }
    }
    println!("5-seed mean drift: eps=0.5 {:.5} vs eps=0.01 {:.5}", means[0], means[1]);
}
