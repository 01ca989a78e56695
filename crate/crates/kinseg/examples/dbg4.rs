use kinseg::grid::{FeatureGrid, SpatialDomain};
use kinseg::macrosolver::{MacroOptions, MacroRun};
use kinseg::noise::NoiseFamily;
use kinseg::params::ModelParams;
use kinseg::pipeline::*;

fn main() {
    let theta_f: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10.0);
    let refresh: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(4);
    let cfg = RunConfig {
        seed: 2,
        out_dir: None,
        image: ImageSource {
            path: None, mask_path: None,
            shape: Some(ShapeSpec {
                kind: ShapeKind::Square, size: 14, width: 28, height: 28,
                foreground: vec![255.0; 3], background: vec![0.0; 3],
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
        params: None,
        cbo: CboSettings::default(),
        mask: MaskConfig::default(),
    };
    let input = prepare_input(&cfg).unwrap();
    let grid = FeatureGrid::new(3, 30);
    let spatial = SpatialDomain::new(28, 28);
    let target = kinseg::macrosolver::rho_gtsm_from_mask(input.gtsm.as_ref().unwrap(), &grid);
    let objective = MacroObjective::new(&input.ensemble, grid.clone(), spatial, target.clone(), 400.0, cfg.solver.to_options());
    let mut params = ModelParams::with_default_exponents(0.5742, 0.5016, 0.0493, vec![0.5413, 0.5488, 0.5533]).unwrap();
    params.theta_f = theta_f;
    let mut run = MacroRun::new(objective.initial_state(), params, spatial,
        MacroOptions { refresh_every: refresh, ..Default::default() }).unwrap();
    let mut printed = 0.0f64;
    let t0 = std::time::Instant::now();
    while run.t < 400.0 && !run.is_steady() {
        run.step(400.0 - run.t).unwrap();
        if run.t > printed + 2.0 {
            printed = run.t;
            let dc = 1.0 / 30.0;
            let mut parts = String::new();
            for axis in 0..3 {
                let m = run.state.marginal(axis);
                let low: f64 = m[..15].iter().sum::<f64>() * dc;
                parts.push_str(&format!(" ch{axis} low {:.3}", low));
            }
            println!("t {:6.1} steps {:6}:{} ({:.0}s)", run.t, run.steps, parts, t0.elapsed().as_secs_f64());
        }
        if t0.elapsed().as_secs() > 420 {
            println!("timeout at t {:.1}", run.t);
            break;
        }
    }
    let loss = kinseg::macrosolver::l1_loss(&run.state.rho, &target, &grid).unwrap();
    println!("theta_f {theta_f}: final t {:.1} steps {} loss {:.4} steady {} ({:.0}s)",
        run.t, run.steps, loss, run.is_steady(), t0.elapsed().as_secs_f64());
}
