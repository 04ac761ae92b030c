//! `gridntk`: training runs, kernel spectra and diagnostics for coordinate
//! networks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridntk::checkpoint::Checkpoint;
use gridntk::config::{parse_overlay, presets, resolve, ConfigOverlay, ExperimentConfig, Task};
use gridntk::diagnostics::{count_regions, grid_to_image, DEFAULT_REGION_RESOLUTION};
use gridntk::encoding::EncodingSpec;
use gridntk::linalg::fmt_f64;
use gridntk::mesh::load_mesh;
use gridntk::network::init_model;
use gridntk::ntk::{empirical_ntk, linearized_descent, predict_dynamics, stacked_jacobian, stratified_indices_2d, NtkOptions, SpectrumSnapshot, FLOW_LR_FRACTION};
use gridntk::regress2d::{load_image_dataset, run_experiment, write_summary, ExperimentResult};
use gridntk::surface3d::{raymarch_depth, train_occupancy, Camera};
use gridntk::Error;

#[derive(Parser)]
#[command(name = "gridntk", version, about = "Neural tangent kernel experiments for encoded coordinate networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an image and record loss, PSNR and kernel spectra.
    Regress2d {
        /// PNG or PPM image; pixel values become regression targets.
        image: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a multigrid model and compare spectra with and without the
    /// grid block against an identity-encoded reference.
    AblateGrid {
        /// PNG or PPM image; pixel values become regression targets.
        image: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare kernel-flow predictions with gradient descent on the
    /// linearized network.
    Dynamics {
        /// PNG or PPM image; pixel values become regression targets.
        image: PathBuf,
        /// Number of training pixels.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Largest gradient-descent step recorded.
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit an occupancy field to an OBJ mesh and ray-march its level set.
    Surface3d {
        /// Closed triangle mesh in OBJ format.
        mesh: PathBuf,
        /// Side length of the depth render in pixels.
        #[arg(long, default_value_t = 128)]
        render_size: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Grid images and activation-region counts of a saved model.
    Diagnostics {
        /// `model.gntk` written by a training command.
        checkpoint: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Lattice side used for region counting.
        #[arg(long, default_value_t = DEFAULT_REGION_RESOLUTION)]
        resolution: usize,
    },
    /// List preset names with their encodings.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Named preset to start from (see `gridntk presets`).
    #[arg(long)]
    preset: Option<String>,
    /// TOML file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Largest number of probe points entering a kernel matrix.
    #[arg(long)]
    gram_cap: Option<usize>,
}

impl RunArgs {
    /// Preset, then file, then flags.
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let file = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                Some(parse_overlay(&text)?)
            }
            None => None,
        };
        let flags = ConfigOverlay {
            seed: self.seed,
            epochs: self.epochs,
            gram_cap: self.gram_cap,
            ..Default::default()
        };
        resolve(self.preset.as_deref(), file.as_ref(), &flags)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| Error::Io { path, source: e })
}

fn write_with(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Error> {
    let path = dir.join(name);
    let mut w = create(dir, name)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::Io { path, source: e })
}

fn prepare_out(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_snapshots(dir: &Path, prefix: &str, snaps: &[SpectrumSnapshot]) -> Result<(), Error> {
    for s in snaps {
        let name = format!("{prefix}{}_{}.csv", s.component.label(), s.tag.label());
        write_with(dir, &name, |w| s.write_csv(w))?;
    }
    Ok(())
}

fn require_task(cfg: &ExperimentConfig, task: Task) -> Result<(), Error> {
    if cfg.task != task {
        return Err(Error::Config(format!("preset `{}` is for the {:?} task", cfg.name, cfg.task)));
    }
    Ok(())
}

fn cmd_regress2d(image: &Path, run: &RunArgs) -> Result<(), Error> {
    let cfg = run.resolve()?;
    require_task(&cfg, Task::Image)?;
    let data = load_image_dataset(image)?;
    prepare_out(&run.out)?;
    let res = run_experiment(&data, &cfg)?;
    res.prediction.save(run.out.join("prediction.png"))?;
    write_with(&run.out, "trace.csv", |w| res.write_trace_csv(w))?;
    write_snapshots(&run.out, "spectrum_", &res.snapshots)?;
    write_with(&run.out, "summary.csv", |w| write_summary(w, &[&res]))?;
    Checkpoint {
        config: cfg,
        model: res.model.clone(),
    }
    .save(run.out.join("model.gntk"))?;
    println!(
        "{}: psnr {:.3} dB, ms-ssim {}",
        res.config.name,
        res.final_psnr,
        res.final_ms_ssim.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_ablate_grid(image: &Path, run: &RunArgs) -> Result<(), Error> {
    let mut cfg = run.resolve()?;
    require_task(&cfg, Task::Image)?;
    if !cfg.encoding.is_multigrid() {
        return Err(Error::Config(format!("ablate-grid needs a multigrid preset, `{}` is {}", cfg.name, cfg.encoding.label())));
    }
    cfg.snapshot_grid = vec![true, false];
    let mut reference = cfg.clone();
    reference.name = format!("{}-identity-reference", cfg.name);
    reference.encoding = EncodingSpec::Identity;
    reference.snapshot_grid = vec![true];
    let data = load_image_dataset(image)?;
    prepare_out(&run.out)?;
    let grid = run_experiment(&data, &cfg)?;
    let base = run_experiment(&data, &reference)?;
    let mid_end = |r: &ExperimentResult| -> Vec<SpectrumSnapshot> {
        r.snapshots.iter().filter(|s| s.tag != gridntk::ntk::SnapshotTag::Start).cloned().collect()
    };
    write_snapshots(&run.out, "spectrum_", &mid_end(&grid))?;
    write_snapshots(&run.out, "spectrum_baseline_", &mid_end(&base))?;
    write_with(&run.out, "ablation.csv", |w| {
        writeln!(w, "tag,rank,full,mlp_only,baseline")?;
        for tag in [gridntk::ntk::SnapshotTag::Mid, gridntk::ntk::SnapshotTag::End] {
            let (Some(f), Some(m), Some(b)) = (grid.snapshot(tag, true), grid.snapshot(tag, false), base.snapshot(tag, true)) else {
                continue;
            };
            let (f, m, b) = (f.clamped(), m.clamped(), b.clamped());
            for i in 0..f.len().min(m.len()).min(b.len()) {
                writeln!(w, "{},{i},{},{},{}", tag.label(), fmt_f64(f[i]), fmt_f64(m[i]), fmt_f64(b[i]))?;
            }
        }
        Ok(())
    })?;
    write_with(&run.out, "summary.csv", |w| write_summary(w, &[&grid, &base]))?;
    if let (Some(f), Some(m)) = (grid.snapshot(gridntk::ntk::SnapshotTag::End, true), grid.snapshot(gridntk::ntk::SnapshotTag::End, false)) {
        println!("end-of-training min eigenvalue: full {:e}, without grid {:e}", f.min_clamped(), m.min_clamped());
    }
    Ok(())
}

/// Record points: 0, then roughly logarithmic up to `max_steps`.
fn record_steps(max_steps: usize) -> Vec<usize> {
    let mut v = vec![0];
    let mut s = 1.0f64;
    while (s as usize) < max_steps {
        let k = s as usize;
        if v.last() != Some(&k) {
            v.push(k);
        }
        s *= 10f64.powf(0.25);
    }
    v.push(max_steps);
    v
}

fn cmd_dynamics(image: &Path, n: usize, steps: usize, run: &RunArgs) -> Result<(), Error> {
    let cfg = run.resolve()?;
    require_task(&cfg, Task::Image)?;
    if n < 2 || n > cfg.gram_cap {
        return Err(Error::Config(format!("sample count {n} must lie in 2..={}", cfg.gram_cap)));
    }
    let data = load_image_dataset(image)?;
    prepare_out(&run.out)?;
    let ids = stratified_indices_2d(data.width(), data.height(), n);
    let pts: Vec<Vec<f64>> = ids.iter().map(|&i| data.coords()[i].clone()).collect();
    let y = data.channel(cfg.ntk_channel, &ids);
    let model = init_model(&cfg.encoding, 2, &cfg.mlp_config(), cfg.seed)?;
    let opts = NtkOptions {
        channel: cfg.ntk_channel,
        include_grid: true,
        cap: cfg.gram_cap,
    };
    let k = empirical_ntk(&model, &pts, &opts)?;
    let j = stacked_jacobian(&model, &pts, &opts)?;
    let spec = k.spectrum()?;
    let lr = FLOW_LR_FRACTION / spec.max_eigenvalue();
    let record = record_steps(steps);
    let actual = linearized_descent(&j, &y, lr, &record)?;
    let times: Vec<f64> = record.iter().map(|&s| s as f64 * lr).collect();
    let pred = predict_dynamics(&k, None, &y, &times)?;
    write_with(&run.out, "dynamics.csv", |w| pred.write_csv(w, &ids, &actual))?;
    write_with(&run.out, "residuals.csv", |w| {
        writeln!(w, "t,rank,eigenvalue,residual")?;
        for (ti, t) in pred.times.iter().enumerate() {
            for (i, r) in pred.residuals[ti].iter().enumerate() {
                writeln!(w, "{},{i},{},{}", fmt_f64(*t), fmt_f64(pred.eigenvalues[i]), fmt_f64(*r))?;
            }
        }
        Ok(())
    })?;
    let err = pred
        .predictions
        .iter()
        .zip(&actual)
        .flat_map(|(p, a)| p.iter().zip(a).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!("max |predicted - actual| over {} records: {err:e}", record.len());
    Ok(())
}

fn cmd_surface3d(mesh: &Path, render_size: usize, run: &RunArgs) -> Result<(), Error> {
    let cfg = run.resolve()?;
    require_task(&cfg, Task::Surface)?;
    let mesh = load_mesh(mesh)?;
    prepare_out(&run.out)?;
    let res = train_occupancy(&mesh, &cfg)?;
    write_with(&run.out, "loss.csv", |w| res.write_loss_csv(w))?;
    write_snapshots(&run.out, "spectrum_", &res.snapshots)?;
    let depth = raymarch_depth(&res.model, &Camera::default_orbit(), render_size, render_size, None)?;
    depth.save_png(run.out.join("depth.png"))?;
    write_with(&run.out, "depth.csv", |w| depth.write_csv(w))?;
    write_with(&run.out, "summary.csv", |w| {
        writeln!(w, "preset,encoding,epochs,final_bce,silhouette_pixels")?;
        writeln!(w, "{},{},{},{},{}", cfg.name, cfg.encoding.label(), cfg.epochs, fmt_f64(res.final_bce), depth.hit_count())
    })?;
    Checkpoint {
        config: cfg,
        model: res.model.clone(),
    }
    .save(run.out.join("model.gntk"))?;
    println!("{}: final bce {:.5}, {} silhouette pixels", res.config.name, res.final_bce, depth.hit_count());
    Ok(())
}

fn cmd_diagnostics(checkpoint: &Path, out: &Path, resolution: usize) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.coord_dim() != 2 {
        return Err(Error::Unsupported(format!("diagnostics need a 2D model, checkpoint takes {}D inputs", ck.model.coord_dim())));
    }
    prepare_out(out)?;
    if let Some(g) = ck.model.encoding.grid() {
        for l in 0..g.layers().len() {
            for s in 0..g.slots() {
                grid_to_image(g, l, s)?.save(out.join(format!("grid_l{l}_s{s}.png")))?;
            }
        }
    }
    let map = count_regions(&ck.model, resolution)?;
    map.colorized().save(out.join("regions.png"))?;
    write_with(out, "regions.csv", |w| {
        writeln!(w, "preset,encoding,resolution,regions")?;
        writeln!(w, "{},{},{},{}", ck.config.name, ck.config.encoding.label(), resolution, map.count)
    })?;
    println!("{}: {} activation regions on a {resolution}x{resolution} lattice", ck.config.name, map.count);
    Ok(())
}

fn cmd_presets() {
    for p in presets() {
        println!("{:<24} {:<8} {}", p.name, format!("{:?}", p.task).to_lowercase(), p.encoding.label());
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::Image(_) | Error::Unsupported(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Regress2d { image, run } => cmd_regress2d(image, run),
        Command::AblateGrid { image, run } => cmd_ablate_grid(image, run),
        Command::Dynamics { image, n, steps, run } => cmd_dynamics(image, *n, *steps, run),
        Command::Surface3d { mesh, render_size, run } => cmd_surface3d(mesh, *render_size, run),
        Command::Diagnostics { checkpoint, out, resolution } => cmd_diagnostics(checkpoint, out, *resolution),
        Command::Presets => {
            cmd_presets();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
