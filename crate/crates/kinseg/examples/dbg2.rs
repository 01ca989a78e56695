use kinseg::noise::NoiseFamily;
use kinseg::pipeline::*;

fn main() {
    let cases: [(&str, ShapeKind, NoiseFamily, f64, f64, f64, f64, (f64, f64, f64, f64), f64); 4] = [
        ("square", ShapeKind::Square, NoiseFamily::Gaussian, 5.0, 10.0, 20.0, 0.0, (0.2903, 0.4685, 0.1549, 0.4778), 0.0226),
        ("circle", ShapeKind::Circle, NoiseFamily::Uniform, 10.0, 50.0, 200.0, 0.0, (0.2138, 0.1537, 0.1350, 0.5140), 0.0249),
        ("triangle", ShapeKind::Triangle, NoiseFamily::Speckle, 1.0, 0.05, 100.0, -600.0, (0.1108, 0.1657, 0.0778, 0.5287), 0.0179),
        ("rhombus", ShapeKind::Rhombus, NoiseFamily::Poisson, 1.0, 15.0, 150.0, 30.0, (0.1720, 0.1564, 0.0844, 0.5112), 0.0137),
    ];
    for (name, kind, fam, si, bi, fg, bg, p, table) in cases {
        for t_micro in [400.0] {
            let cfg = RunConfig {
                seed: 1,
                out_dir: None,
                image: ImageSource {
                    path: None, mask_path: None,
                    shape: Some(ShapeSpec { kind, size: 20, width: 40, height: 40, foreground: vec![fg], background: vec![bg] }),
                },
                noise: NoiseConfig { family: Some(fam), shape_intensity: vec![si], background_intensity: vec![bi], scale: NoiseScale::Raw },
                grid: GridConfig::default(),
                scales: ScaleConfig::default(),
                horizons: HorizonConfig { t_macro: 20.0, t_micro },
                solver: SolverConfig::default(),
                params: Some(FixedParams { delta1: p.0, delta2: p.1, sigma2: p.2, c_max: vec![p.3], alpha_exp: None }),
                cbo: CboSettings::default(),
                mask: MaskConfig { runs: 1, combine: MaskCombine::Exact },
            };
            let t0 = std::time::Instant::now();
            match segment(&cfg) {
                Ok(r) => println!(
                    "{name} t_micro {t_micro}: loss {:.4} (table {table}) dice {:.4} ({:.0}s)",
                    r.loss, r.dice.unwrap(), t0.elapsed().as_secs_f64()
                ),
                Err(e) => println!("{name} t_micro {t_micro}: ERROR {e}"),
            }
        }
    }
}
