//! Image regression: fit RGB values from normalized pixel coordinates.
//!
//! Pixel `(col, row)` maps to `(col/(w−1), row/(h−1))`; a single-pixel axis
//! maps to 0. Samples are ordered row-major. Every pixel is used for
//! training; there is no held-out split.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Task};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::linalg::fmt_f64;
use crate::metrics::{ms_ssim, psnr};
use crate::network::{init_model, CoordinateModel, Loss};
use crate::ntk::{spectrum_snapshot, stratified_indices_2d, NtkOptions, SnapshotTag, SpectrumSnapshot};

const SHUFFLE_STREAM: u64 = 0x5DEE_CE66_D1CE_5EED;
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    width: usize,
    height: usize,
    coords: Vec<Vec<f64>>,
    /// `N × 3` RGB targets.
    targets: Array2<f64>,
}

fn axis_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Row-major normalized pixel coordinates of a `width × height` image.
pub fn pixel_coords(width: usize, height: usize) -> Vec<Vec<f64>> {
    (0..height)
        .flat_map(|r| (0..width).map(move |c| vec![axis_coord(c, width), axis_coord(r, height)]))
        .collect()
}

impl RegressionDataset {
    pub fn from_image(img: &RgbImage) -> Self {
        let n = img.pixel_count();
        let targets = Array2::from_shape_vec((n, 3), img.as_slice().to_vec()).expect("RGB layout");
        RegressionDataset {
            width: img.width(),
            height: img.height(),
            coords: pixel_coords(img.width(), img.height()),
            targets,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec<f64>] {
        &self.coords
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn image(&self) -> RgbImage {
        RgbImage::from_vec(self.width, self.height, self.targets.iter().copied().collect()).expect("consistent size")
    }

    /// Targets of channel `c` for the given sample indices.
    pub fn channel(&self, c: usize, ids: &[usize]) -> Vec<f64> {
        ids.iter().map(|&i| self.targets[(i, c)]).collect()
    }
}

pub fn load_image_dataset(path: impl AsRef<Path>) -> Result<RegressionDataset> {
    Ok(RegressionDataset::from_image(&RgbImage::load(path)?))
}

/// Evaluates the model at every pixel without clamping.
pub fn predict_image(model: &CoordinateModel, width: usize, height: usize) -> Result<RgbImage> {
    if model.output_dim() != 3 || model.coord_dim() != 2 {
        return Err(Error::Dimension("image rendering needs a 2D-input, 3-channel model".into()));
    }
    let out = model.predict(&pixel_coords(width, height), PREDICT_CHUNK)?;
    RgbImage::from_vec(width, height, out.into_raw_vec_and_offset().0)
}

/// Evaluates the model at every pixel centre, clamps to `[0,1]` and
/// quantizes to 8 bits.
pub fn render_prediction(model: &CoordinateModel, width: usize, height: usize) -> Result<RgbImage> {
    Ok(predict_image(model, width, height)?.quantized())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// PSNR of the unclamped prediction after each epoch.
    pub psnr_trace: Vec<f64>,
    pub final_psnr: f64,
    /// `None` when the image is too small for the metric.
    pub final_ms_ssim: Option<f64>,
    pub snapshots: Vec<SpectrumSnapshot>,
    /// Pixel indices of the kernel probe set.
    pub probe_ids: Vec<usize>,
    pub prediction: RgbImage,
    pub model: CoordinateModel,
}

impl ExperimentResult {
    pub fn snapshot(&self, tag: SnapshotTag, include_grid: bool) -> Option<&SpectrumSnapshot> {
        let comp = NtkOptions {
            include_grid,
            ..Default::default()
        }
        .component();
        self.snapshots.iter().find(|s| s.tag == tag && s.component == comp)
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,psnr")?;
        for (e, (l, p)) in self.loss_trace.iter().zip(&self.psnr_trace).enumerate() {
            writeln!(w, "{},{},{}", e + 1, fmt_f64(*l), fmt_f64(*p))?;
        }
        Ok(())
    }
}

fn snapshot_tag(epoch: usize, schedule: &[usize]) -> SnapshotTag {
    if epoch == schedule[0] {
        SnapshotTag::Start
    } else if epoch == *schedule.last().expect("non-empty") {
        SnapshotTag::End
    } else {
        SnapshotTag::Mid
    }
}

fn take_snapshots(
    model: &CoordinateModel,
    probe: &[Vec<f64>],
    config: &ExperimentConfig,
    tag: SnapshotTag,
    epoch: usize,
    out: &mut Vec<SpectrumSnapshot>,
) -> Result<()> {
    let has_grid = model.encoding.grid().is_some();
    for &include_grid in &config.snapshot_grid {
        if !include_grid && !has_grid {
            continue;
        }
        let opts = NtkOptions {
            channel: config.ntk_channel,
            include_grid,
            cap: config.gram_cap,
        };
        out.push(spectrum_snapshot(model, probe, &opts, tag, epoch)?);
    }
    Ok(())
}

/// Trains a fresh model on the dataset with minibatch SGD and MSE loss,
/// recording loss/PSNR per epoch and kernel spectra at the scheduled
/// epochs. Deterministic in `config.seed`.
pub fn run_experiment(dataset: &RegressionDataset, config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    if config.task != Task::Image {
        return Err(Error::Config(format!("preset `{}` is not an image preset", config.name)));
    }
    let model = init_model(&config.encoding, 2, &config.mlp_config(), config.seed)?;
    train_image_model(dataset, config, model)
}

/// Same as [`run_experiment`] but starting from a given model.
pub fn train_image_model(
    dataset: &RegressionDataset,
    config: &ExperimentConfig,
    mut model: CoordinateModel,
) -> Result<ExperimentResult> {
    let (w, h) = (dataset.width, dataset.height);
    let truth = dataset.image();
    let schedule = config.snapshot_schedule();
    let probe_ids = stratified_indices_2d(w, h, config.gram_cap);
    let probe: Vec<Vec<f64>> = probe_ids.iter().map(|&i| dataset.coords[i].clone()).collect();
    let mut snapshots = Vec::new();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut psnr_trace = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..=config.epochs {
        if schedule.contains(&epoch) {
            let tag = snapshot_tag(epoch, &schedule);
            take_snapshots(&model, &probe, config, tag, epoch, &mut snapshots)?;
        }
        if epoch == config.epochs {
            break;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let pts: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset.coords[i].clone()).collect();
            let y = dataset.targets.select(ndarray::Axis(0), chunk);
            total += model.train_step(&pts, &y, config.learning_rate, Loss::Mse)?;
            batches += 1;
        }
        loss_trace.push(total / batches as f64);
        psnr_trace.push(psnr(&predict_image(&model, w, h)?, &truth)?);
    }
    let raw = predict_image(&model, w, h)?;
    let final_psnr = psnr(&raw, &truth)?;
    let prediction = raw.quantized();
    let final_ms_ssim = ms_ssim(&prediction, &truth).ok();
    Ok(ExperimentResult {
        config: config.clone(),
        loss_trace,
        psnr_trace,
        final_psnr,
        final_ms_ssim,
        snapshots,
        probe_ids,
        prediction,
        model,
    })
}

pub fn write_summary<W: Write>(mut w: W, results: &[&ExperimentResult]) -> std::io::Result<()> {
    writeln!(w, "preset,encoding,epochs,final_loss,psnr,ms_ssim")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.config.name,
            r.config.encoding.label(),
            r.config.epochs,
            r.loss_trace.last().map_or("nan".to_string(), |v| fmt_f64(*v)),
            fmt_f64(r.final_psnr),
            r.final_ms_ssim.map_or("nan".to_string(), fmt_f64)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::encoding::{EncodingSpec, ResolutionSpec};

    fn checker(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |c, r| {
            let v = if (c / 2 + r / 2) % 2 == 0 { 0.9 } else { 0.1 };
            [v, 1.0 - v, 0.5]
        })
        .unwrap()
    }

    fn tiny_config(encoding: EncodingSpec, epochs: usize) -> ExperimentConfig {
        let mut c = preset("baseline").unwrap();
        c.encoding = encoding;
        c.hidden = vec![32, 32];
        c.epochs = epochs;
        c.batch_size = 8;
        c.learning_rate = 1.0;
        c.gram_cap = 16;
        c
    }

    #[test]
    fn corner_normalization() {
        let img = RgbImage::from_fn(2, 2, |c, r| [c as f64, r as f64, 0.0]).unwrap();
        let d = RegressionDataset::from_image(&img);
        assert_eq!(d.len(), 4);
        assert_eq!(d.coords(), &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(d.targets().row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        let black = RgbImage::from_fn(3, 2, |_, _| [0.0; 3]).unwrap();
        assert!(RegressionDataset::from_image(&black).targets().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_epochs_reports_untrained_state() {
        let d = RegressionDataset::from_image(&checker(12, 12));
        let cfg = tiny_config(EncodingSpec::Identity, 0);
        let r = run_experiment(&d, &cfg).unwrap();
        assert!(r.loss_trace.is_empty() && r.psnr_trace.is_empty());
        assert_eq!(r.snapshots.len(), 1);
        assert_eq!(r.snapshots[0].tag, SnapshotTag::Start);
        let fresh = init_model(&cfg.encoding, 2, &cfg.mlp_config(), cfg.seed).unwrap();
        assert_eq!(r.model, fresh);
    }

    #[test]
    fn traces_and_snapshots_line_up() {
        let d = RegressionDataset::from_image(&checker(12, 12));
        let cfg = tiny_config(
            EncodingSpec::Multigrid {
                slots: 2,
                levels: 1,
                resolution: ResolutionSpec::Single(13),
            },
            4,
        );
        let cfg = ExperimentConfig {
            snapshot_grid: vec![true, false],
            ..cfg
        };
        let a = run_experiment(&d, &cfg).unwrap();
        assert_eq!(a.loss_trace.len(), 4);
        assert_eq!(a.psnr_trace.len(), 4);
        let tags: Vec<_> = a.snapshots.iter().map(|s| (s.tag, s.epoch)).collect();
        assert_eq!(tags.len(), 6);
        assert_eq!(tags[0], (SnapshotTag::Start, 0));
        assert_eq!(tags[5], (SnapshotTag::End, 4));
        assert!(a.snapshot(SnapshotTag::Mid, false).is_some());
        assert_eq!(a.snapshots[0].eigenvalues.len(), 16);
        let b = run_experiment(&d, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.prediction, b.prediction);
        let mut csv = Vec::new();
        a.write_trace_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,loss,psnr\n1,"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn constant_model_renders_uniform_image() {
        let cfg = tiny_config(EncodingSpec::Identity, 0);
        let mut m = init_model(&cfg.encoding, 2, &cfg.mlp_config(), 0).unwrap();
        let last = m.network.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(3.0);
        let img = render_prediction(&m, 5, 4).unwrap();
        let v = 0.3f64;
        assert!(img.as_slice().iter().all(|p| (p - (v * 255.0).round() / 255.0).abs() < 1e-15));
    }

    #[test]
    fn wrong_task_is_rejected() {
        let d = RegressionDataset::from_image(&checker(4, 4));
        let cfg = preset("desk-dragon-mpe").unwrap();
        assert!(run_experiment(&d, &cfg).is_err());
    }
}
