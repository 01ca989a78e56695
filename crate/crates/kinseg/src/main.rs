//! `kinseg` command line: shape/noise generation, full segmentation runs,
//! the consistency harnesses, loss-landscape sweeps and figure-data export.

use clap::{Args, Parser, Subcommand};
use kinseg::io::{macro_state_csv, write_csv, FigureManifest};
use kinseg::macrosolver::MacroState;
use kinseg::pipeline::{
    self, mask_to_image, prepare_input, MacroObjective, RunConfig, Test1Config, Test2Config,
};
use kinseg::rng::RngStream;
use kinseg::{KinsegError, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "kinseg", about = "Multiscale kinetic image segmentation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Override grid.nc.
    #[arg(long)]
    nc: Option<usize>,
    /// Override grid.nx and grid.ny.
    #[arg(long)]
    nx: Option<usize>,
    /// Override horizons.t_macro.
    #[arg(long)]
    t_macro: Option<f64>,
    /// Override horizons.t_micro.
    #[arg(long)]
    t_micro: Option<f64>,
    /// Override solver.cfl.
    #[arg(long)]
    cfl: Option<f64>,
    /// Override solver.refresh_every.
    #[arg(long)]
    refresh_every: Option<usize>,
    /// Override scales.tau1.
    #[arg(long)]
    tau1: Option<f64>,
    /// Override scales.tau2.
    #[arg(long)]
    tau2: Option<f64>,
    /// Override mask.runs.
    #[arg(long)]
    mask_runs: Option<usize>,
    /// Override cbo.iterations.
    #[arg(long)]
    cbo_iterations: Option<usize>,
    /// Override cbo.particles.
    #[arg(long)]
    cbo_particles: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.nc {
            config.grid.nc = v;
        }
        if let Some(v) = self.nx {
            config.grid.nx = v;
            config.grid.ny = v;
        }
        if let Some(v) = self.t_macro {
            config.horizons.t_macro = v;
        }
        if let Some(v) = self.t_micro {
            config.horizons.t_micro = v;
        }
        if let Some(v) = self.cfl {
            config.solver.cfl = v;
        }
        if let Some(v) = self.refresh_every {
            config.solver.refresh_every = v;
        }
        if let Some(v) = self.tau1 {
            config.scales.tau1 = v;
        }
        if let Some(v) = self.tau2 {
            config.scales.tau2 = v;
        }
        if let Some(v) = self.mask_runs {
            config.mask.runs = v;
        }
        if let Some(v) = self.cbo_iterations {
            config.cbo.iterations = v;
        }
        if let Some(v) = self.cbo_particles {
            config.cbo.particles = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured image, its noisy version and the ground-truth
    /// mask as PNGs.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        over: Overrides,
    },
    /// Run the full segmentation pipeline.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        over: Overrides,
        /// Also export the density-evolution CSV of the final macro run.
        #[arg(long)]
        evolution: bool,
    },
    /// Consistency harnesses for the particle/macroscopic reductions.
    Consistency {
        /// Which test to run (1 = quasi-equilibrium, 2 = macroscopic limit).
        #[arg(long)]
        test: u32,
        /// Output directory for the figure CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Particle count.
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Loss-landscape sweep over two parameters, others fixed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        over: Overrides,
        /// First swept parameter (delta1|delta2|sigma2|c_max).
        #[arg(long, default_value = "delta1")]
        param_x: String,
        /// Second swept parameter.
        #[arg(long, default_value = "sigma2")]
        param_y: String,
        /// Grid points per axis.
        #[arg(long, default_value_t = 12)]
        steps: usize,
    },
    /// Write a manifest of the figure CSVs found in a directory.
    Export {
        /// Directory holding previously exported CSVs.
        #[arg(long)]
        dir: PathBuf,
        /// Comma-separated figure names that must be present.
        #[arg(long)]
        require: Option<String>,
    },
}

fn load_config(cfg: &ConfigArgs, over: &Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::from_toml_path(&cfg.config)?;
    if let Some(seed) = cfg.seed {
        config.seed = seed;
    }
    if let Some(out) = &cfg.out {
        config.out_dir = Some(out.clone());
    }
    over.apply(&mut config);
    Ok(config)
}

fn ensure_out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| KinsegError::Config("no output directory (set out_dir or --out)".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run_generate(cfg: ConfigArgs, over: Overrides) -> Result<()> {
    let config = load_config(&cfg, &over)?;
    let dir = ensure_out_dir(&config)?;
    let input = prepare_input(&config)?;
    input
        .normalized
        .save_png_normalized(&dir.join("noisy.png"))?;
    if let Some(gtsm) = &input.gtsm {
        gtsm.save_png_normalized(&dir.join("gtsm.png"))?;
    }
    for w in &input.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "wrote {} ({} pixels, {} channels)",
        dir.join("noisy.png").display(),
        input.normalized.pixel_count(),
        input.normalized.channels
    );
    Ok(())
}

fn densities_csv(
    path: &Path,
    grid: &kinseg::grid::FeatureGrid,
    rho_init: &[f64],
    rho_final: &[f64],
    rho_gtsm: &[f64],
) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..grid.nc)
        .map(|k| {
            vec![
                grid.axis_center(k),
                rho_init[k],
                rho_final[k],
                rho_gtsm[k],
            ]
        })
        .collect();
    write_csv(path, &["c", "rho_init", "rho_final", "rho_gtsm"], rows)
}

fn run_segment(cfg: ConfigArgs, over: Overrides, evolution: bool) -> Result<()> {
    let config = load_config(&cfg, &over)?;
    let dir = ensure_out_dir(&config)?;
    let result = pipeline::segment(&config)?;
    let mut manifest = FigureManifest::default();

    // Mask PNG on the original pixel grid.
    let input = prepare_input(&config)?;
    let (w, h) = (input.normalized.width, input.normalized.height);
    mask_to_image(&result.mask, w, h).save_png_normalized(&dir.join("mask.png"))?;

    // Result JSON.
    let json = serde_json::to_string_pretty(&result)?;
    std::fs::write(dir.join("result.json"), json)?;

    // Figure data.
    if let Some(state) = &result.final_state {
        macro_state_csv(state, result.delta2, &dir.join("final_state.csv"))?;
        manifest.insert("final_state", dir.join("final_state.csv"));
        if state.grid.dim == 1 {
            densities_csv(
                &dir.join("densities.csv"),
                &state.grid,
                &result.initial_rho,
                &state.rho,
                &result.target_rho,
            )?;
            manifest.insert("densities", dir.join("densities.csv"));
        } else {
            // per-channel marginals
            let init = MacroState::new(
                state.grid.clone(),
                result.initial_rho.clone(),
                vec![[0.0, 0.0]; state.grid.len()],
            );
            let target = MacroState::new(
                state.grid.clone(),
                result.target_rho.clone(),
                vec![[0.0, 0.0]; state.grid.len()],
            );
            let mut rows = Vec::new();
            for axis in 0..state.grid.dim {
                let mi = init.marginal(axis);
                let mf = state.marginal(axis);
                let mt = target.marginal(axis);
                for k in 0..state.grid.nc {
                    rows.push(vec![
                        axis as f64,
                        state.grid.axis_center(k),
                        mi[k],
                        mf[k],
                        mt[k],
                    ]);
                }
            }
            write_csv(
                &dir.join("marginals.csv"),
                &["channel", "c", "rho_init", "rho_final", "rho_gtsm"],
                rows,
            )?;
            manifest.insert("marginals", dir.join("marginals.csv"));
        }
    }
    if !result.history.is_empty() {
        let rows: Vec<Vec<f64>> = result
            .history
            .iter()
            .map(|h| {
                let mut row = vec![h.iteration as f64, h.best_loss];
                row.extend(h.consensus.iter());
                row
            })
            .collect();
        let mut header = vec!["iteration".to_string(), "best_loss".to_string()];
        for i in 0..result.history[0].consensus.len() {
            header.push(format!("consensus{}", i + 1));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        write_csv(&dir.join("cbo_history.csv"), &header_refs, rows)?;
        manifest.insert("cbo_history", dir.join("cbo_history.csv"));
    }

    if evolution {
        // Re-run the final macro solve recording rho(c, t).
        let grid = kinseg::grid::FeatureGrid::new(input.normalized.channels, config.grid.nc);
        let spatial = kinseg::grid::SpatialDomain::new(config.grid.nx, config.grid.ny);
        let gtsm = input.gtsm.as_ref().unwrap();
        let target = kinseg::macrosolver::rho_gtsm_from_mask(gtsm, &grid);
        let objective = MacroObjective::new(
            &input.ensemble,
            grid.clone(),
            spatial,
            target,
            config.horizons.t_macro,
            config.solver.to_options(),
        );
        let params = kinseg::params::ModelParams::with_default_exponents(
            result.delta1,
            result.delta2,
            result.sigma2,
            result.c_max.clone(),
        )?;
        let state = objective.initial_state();
        let mut run = kinseg::macrosolver::MacroRun::new(
            state,
            params,
            spatial,
            config.solver.to_options(),
        )?;
        let mut rows = Vec::new();
        run.run_with_observer(config.horizons.t_macro, config.horizons.t_macro / 8.0, |t, s| {
            let marg = s.marginal(0);
            for k in 0..s.grid.nc {
                rows.push(vec![t, s.grid.axis_center(k), marg[k]]);
            }
        })?;
        write_csv(&dir.join("rho_evolution.csv"), &["t", "c", "rho"], rows)?;
        manifest.insert("rho_evolution", dir.join("rho_evolution.csv"));
    }

    manifest.save(&dir.join("manifest.json"))?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "loss {:.4}  dice {}  params: delta1={:.4} delta2={:.4} sigma2={:.4} c_max={:?}  ({:.1}s)",
        result.loss,
        result
            .dice
            .map(|d| format!("{d:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        result.delta1,
        result.delta2,
        result.sigma2,
        result.c_max,
        result.runtime_seconds
    );
    Ok(())
}

fn run_consistency(test: u32, out: PathBuf, n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(&out)?;
    let mut manifest = FigureManifest::default();
    match test {
        1 => {
            let mut rows_fcant = Vec::new();
            let mut rows_slices = Vec::new();
            let mut rows_rhom = Vec::new();
            for epsilon in [0.5, 0.1, 0.01] {
                let cfg = Test1Config {
                    n_particles: n,
                    epsilon,
                    seed,
                    ..Default::default()
                };
                let outp = pipeline::run_test1(&cfg)?;
                let grid = kinseg::grid::FeatureGrid::new(1, cfg.nc);
                for (ti, t) in outp.times.iter().enumerate() {
                    for k in 0..grid.nc {
                        rows_fcant.push(vec![
                            epsilon,
                            *t,
                            grid.axis_center(k),
                            outp.f_series[ti][k][0],
                            outp.f_series[ti][k][1],
                        ]);
                    }
                }
                for (k, l1x, l1y) in &outp.slice_l1 {
                    rows_slices.push(vec![epsilon, grid.axis_center(*k), *l1x, *l1y]);
                }
                rows_rhom.push(vec![epsilon, outp.rhom_l1[0], outp.rhom_l1[1]]);
            }
            write_csv(
                &out.join("fcant.csv"),
                &["epsilon", "t", "c", "Fx", "Fy"],
                rows_fcant,
            )?;
            write_csv(
                &out.join("slices.csv"),
                &["epsilon", "c", "l1_x", "l1_y"],
                rows_slices,
            )?;
            write_csv(&out.join("rhom.csv"), &["epsilon", "l1_x", "l1_y"], rows_rhom)?;
            manifest.insert("fcant", out.join("fcant.csv"));
            manifest.insert("slices", out.join("slices.csv"));
            manifest.insert("rhom", out.join("rhom.csv"));
        }
        2 => {
            let mut rows = Vec::new();
            for tau in [1.0, 1e-3] {
                let cfg = Test2Config {
                    n_particles: n,
                    tau,
                    seed,
                    ..Default::default()
                };
                let outp = pipeline::run_test2(&cfg)?;
                let grid = kinseg::grid::FeatureGrid::new(1, cfg.nc);
                for k in 0..cfg.nc {
                    rows.push(vec![
                        tau,
                        grid.axis_center(k),
                        outp.rho_dsmc[k],
                        outp.rho_macro[k],
                    ]);
                }
                println!("tau = {tau}: L1 distance {:.4}", outp.l1);
            }
            write_csv(
                &out.join("macro.csv"),
                &["tau", "c", "rho_dsmc", "rho_macro"],
                rows,
            )?;
            manifest.insert("macro", out.join("macro.csv"));
        }
        other => {
            return Err(KinsegError::Config(format!(
                "unknown consistency test {other} (use 1 or 2)"
            )))
        }
    }
    manifest.save(&out.join("manifest.json"))?;
    println!("wrote {}", out.join("manifest.json").display());
    Ok(())
}

fn param_index(name: &str) -> Result<usize> {
    match name {
        "delta1" => Ok(0),
        "delta2" => Ok(1),
        "sigma2" => Ok(2),
        "c_max" => Ok(3),
        other => Err(KinsegError::Config(format!("unknown parameter '{other}'"))),
    }
}

fn run_sweep(
    cfg: ConfigArgs,
    over: Overrides,
    param_x: String,
    param_y: String,
    steps: usize,
) -> Result<()> {
    let config = load_config(&cfg, &over)?;
    let dir = ensure_out_dir(&config)?;
    let input = prepare_input(&config)?;
    let dim = input.normalized.channels;
    let grid = kinseg::grid::FeatureGrid::new(dim, config.grid.nc);
    let spatial = kinseg::grid::SpatialDomain::new(config.grid.nx, config.grid.ny);
    let gtsm = input
        .gtsm
        .as_ref()
        .ok_or_else(|| KinsegError::Config("sweep requires a ground-truth mask".into()))?;
    let target = kinseg::macrosolver::rho_gtsm_from_mask(gtsm, &grid);
    let objective = MacroObjective::new(
        &input.ensemble,
        grid,
        spatial,
        target,
        config.horizons.t_macro,
        config.solver.to_options(),
    );
    let fixed = config
        .params
        .as_ref()
        .ok_or_else(|| KinsegError::Config("sweep requires [params] as the anchor".into()))?;
    let base = vec![fixed.delta1, fixed.delta2, fixed.sigma2, fixed.c_max[0]];
    let ix = param_index(&param_x)?;
    let iy = param_index(&param_y)?;
    let bounds = config.cbo.bounds(dim);
    let axis = |i: usize, k: usize| -> f64 {
        let (lo, hi) = bounds[i.min(bounds.len() - 1)];
        lo + (hi - lo) * (k as f64 + 0.5) / steps as f64
    };
    let cells: Vec<(usize, usize)> = (0..steps)
        .flat_map(|a| (0..steps).map(move |b| (a, b)))
        .collect();
    let losses = kinseg::exec::par_map_indexed(cells.len(), |i| {
        let (a, b) = cells[i];
        let mut x = base.clone();
        x[ix] = axis(ix, a);
        x[iy] = axis(iy, b);
        objective.evaluate_vector(&x)
    });
    let rows: Vec<Vec<f64>> = cells
        .iter()
        .zip(&losses)
        .map(|(&(a, b), &l)| vec![axis(ix, a), axis(iy, b), l])
        .collect();
    let path = dir.join("cbo_tuning.csv");
    write_csv(&path, &[param_x.as_str(), param_y.as_str(), "loss"], rows)?;
    let mut manifest = FigureManifest::default();
    manifest.insert("cbo_tuning", path.clone());
    manifest.save(&dir.join("manifest.json"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_export(dir: PathBuf, require: Option<String>) -> Result<()> {
    let known = [
        "fcant",
        "slices",
        "rhom",
        "macro",
        "densities",
        "marginals",
        "rho_evolution",
        "cbo_tuning",
        "cbo_history",
        "final_state",
    ];
    let mut manifest = FigureManifest::default();
    for name in known {
        let path = dir.join(format!("{name}.csv"));
        if path.exists() {
            manifest.insert(name, path);
        }
    }
    if let Some(req) = require {
        for name in req.split(',') {
            manifest.require(name.trim())?;
        }
    }
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "manifest lists {} figures at {}",
        manifest.figures.len(),
        dir.join("manifest.json").display()
    );
    Ok(())
}

fn main() {
    kinseg::exec::init_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { cfg, over } => run_generate(cfg, over),
        Command::Segment {
            cfg,
            over,
            evolution,
        } => run_segment(cfg, over, evolution),
        Command::Consistency { test, out, n, seed } => run_consistency(test, out, n, seed),
        Command::Sweep {
            cfg,
            over,
            param_x,
            param_y,
            steps,
        } => run_sweep(cfg, over, param_x, param_y, steps),
        Command::Export { dir, require } => run_export(dir, require),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

// Silence an unused-import warning when the binary is built without tests.
#[allow(unused_imports)]
use RngStream as _RngStreamUsedInHarnesses;
