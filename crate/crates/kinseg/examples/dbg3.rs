use kinseg::noise::NoiseFamily;
use kinseg::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let refresh: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let runs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cfg = RunConfig {
        seed: 2,
        out_dir: None,
        image: ImageSource {
            path: None, mask_path: None,
            shape: Some(ShapeSpec {
                kind: ShapeKind::Square, size: 14, width: 28, height: 28,
                foreground: vec![255.0, 255.0, 255.0], background: vec![0.0, 0.0, 0.0],
            }),
        },
        noise: NoiseConfig {
            family: Some(NoiseFamily::Gaussian),
            shape_intensity: vec![0.0],
            background_intensity: vec![0.2],
            scale: NoiseScale::Normalized,
        },
        grid: GridConfig { nx: 28, ny: 28, nc: 30 },
        scales: ScaleConfig::default(),
        horizons: HorizonConfig { t_macro: 400.0, t_micro: 400.0 },
        solver: SolverConfig { refresh_every: refresh, ..Default::default() },
        params: Some(FixedParams {
            delta1: 0.5742, delta2: 0.5016, sigma2: 0.0493,
            c_max: vec![0.5413, 0.5488, 0.5533], alpha_exp: None,
        }),
        cbo: CboSettings::default(),
        mask: MaskConfig { runs, combine: MaskCombine::Exact },
    };
    let t0 = std::time::Instant::now();
    match segment(&cfg) {
        Ok(r) => println!(
            "test4 refresh={refresh} runs={runs}: loss {:.4} (table 0.0273) dice {:.4} ({:.0}s)",
            r.loss, r.dice.unwrap(), t0.elapsed().as_secs_f64()
        ),
        Err(e) => println!("test4: ERROR {e}"),
    }
}
