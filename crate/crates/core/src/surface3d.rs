//! Occupancy regression on meshes and ray-marched rendering of the 0.5
//! level set.
//!
//! An epoch draws `batch_size` fresh points uniformly in the normalized
//! mesh's bounding box, labels them by the parity rule and takes one SGD
//! step on binary cross-entropy of `sigmoid(output)`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Task};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::linalg::fmt_f64;
use crate::mesh::{TriangleMesh, Vec3};
use crate::network::{init_model, CoordinateModel, Loss};
use crate::ntk::{spectrum_snapshot, NtkOptions, SnapshotTag, SpectrumSnapshot};

pub const PROBE_SIZE: usize = 512;
pub const PROBE_SEED: u64 = 0x0CC0_FFEE;
pub const EVAL_SIZE: usize = 4096;
pub const EVAL_SEED: u64 = 0x00E7_A100;
const SAMPLE_STREAM: u64 = 0xA5A5_5A5A_0F0F_F0F0;
/// Fraction of the unit-box diagonal covered by one march step.
pub const MARCH_STEPS_PER_DIAGONAL: f64 = 256.0;
pub const BISECTION_STEPS: usize = 8;
/// Depth recorded for rays that never reach the level set.
pub const BACKGROUND_DEPTH: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    pub point: Vec3,
    pub inside: bool,
}

impl OccupancySample {
    pub fn label(&self) -> f64 {
        if self.inside {
            1.0
        } else {
            0.0
        }
    }
}

/// `n` points uniform in the mesh's bounding box.
pub fn sample_points(mesh: &TriangleMesh, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let (lo, hi) = mesh.bounds();
    (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = lo[a] + (hi[a] - lo[a]) * rng.random::<f64>();
            }
            p
        })
        .collect()
}

pub fn label_points(mesh: &TriangleMesh, points: Vec<Vec3>) -> Vec<OccupancySample> {
    points
        .into_iter()
        .map(|point| OccupancySample {
            point,
            inside: mesh.contains(point),
        })
        .collect()
}

pub fn occupancy_sample(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<OccupancySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    label_points(mesh, sample_points(mesh, n, &mut rng))
}

/// Fixed probe set shared by every encoding on a mesh.
pub fn probe_points(mesh: &TriangleMesh) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    sample_points(mesh, PROBE_SIZE, &mut rng).into_iter().map(|p| p.to_vec()).collect()
}

fn split(samples: &[OccupancySample]) -> (Vec<Vec<f64>>, Array2<f64>) {
    let pts = samples.iter().map(|s| s.point.to_vec()).collect();
    let y = Array2::from_shape_fn((samples.len(), 1), |(i, _)| samples[i].label());
    (pts, y)
}

/// Mean binary cross-entropy of the model on labelled samples.
pub fn mean_bce(model: &CoordinateModel, samples: &[OccupancySample]) -> Result<f64> {
    let (pts, y) = split(samples);
    let out = model.predict(&pts, 2048)?;
    Ok(CoordinateModel::loss_and_grad(&out.column(0).to_owned().insert_axis(ndarray::Axis(1)), &y, Loss::Bce)?.0)
}

#[derive(Debug, Clone)]
pub struct SurfaceResult {
    pub config: ExperimentConfig,
    pub model: CoordinateModel,
    /// Training BCE of each epoch's fresh batch, before its update.
    pub loss_trace: Vec<f64>,
    /// BCE on a fixed evaluation set after training.
    pub final_bce: f64,
    pub snapshots: Vec<SpectrumSnapshot>,
}

impl SurfaceResult {
    pub fn snapshot(&self, tag: SnapshotTag, include_grid: bool) -> Option<&SpectrumSnapshot> {
        let comp = NtkOptions {
            include_grid,
            ..Default::default()
        }
        .component();
        self.snapshots.iter().find(|s| s.tag == tag && s.component == comp)
    }

    pub fn write_loss_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss")?;
        for (e, l) in self.loss_trace.iter().enumerate() {
            writeln!(w, "{},{}", e + 1, fmt_f64(*l))?;
        }
        Ok(())
    }
}

fn snapshot_all(
    model: &CoordinateModel,
    probe: &[Vec<f64>],
    config: &ExperimentConfig,
    tag: SnapshotTag,
    epoch: usize,
    out: &mut Vec<SpectrumSnapshot>,
) -> Result<()> {
    for &include_grid in &config.snapshot_grid {
        if !include_grid && model.encoding.grid().is_none() {
            continue;
        }
        let opts = NtkOptions {
            channel: 0,
            include_grid,
            cap: config.gram_cap,
        };
        out.push(spectrum_snapshot(model, probe, &opts, tag, epoch)?);
    }
    Ok(())
}

/// Trains an occupancy network on a normalized mesh. Deterministic in
/// `config.seed`; spectra are taken on the fixed probe set.
pub fn train_occupancy(mesh: &TriangleMesh, config: &ExperimentConfig) -> Result<SurfaceResult> {
    config.validate()?;
    if config.task != Task::Surface {
        return Err(Error::Config(format!("preset `{}` is not a surface preset", config.name)));
    }
    let mut model = init_model(&config.encoding, 3, &config.mlp_config(), config.seed)?;
    let probe = probe_points(mesh);
    let schedule = config.snapshot_schedule();
    let mut snapshots = Vec::new();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLE_STREAM);
    for epoch in 0..=config.epochs {
        if schedule.contains(&epoch) {
            let tag = if epoch == schedule[0] {
                SnapshotTag::Start
            } else if epoch == *schedule.last().expect("non-empty") {
                SnapshotTag::End
            } else {
                SnapshotTag::Mid
            };
            snapshot_all(&model, &probe, config, tag, epoch, &mut snapshots)?;
        }
        if epoch == config.epochs {
            break;
        }
        let batch = label_points(mesh, sample_points(mesh, config.batch_size, &mut rng));
        let (pts, y) = split(&batch);
        loss_trace.push(model.train_step(&pts, &y, config.learning_rate, Loss::Bce)?);
    }
    let eval = occupancy_sample(mesh, EVAL_SIZE, EVAL_SEED);
    let final_bce = mean_bce(&model, &eval)?;
    Ok(SurfaceResult {
        config: config.clone(),
        model,
        loss_trace,
        final_bce,
        snapshots,
    })
}

/// Anything that yields occupancy logits for points in the unit cube.
pub trait OccupancyField {
    fn logits(&self, points: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl OccupancyField for CoordinateModel {
    fn logits(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.predict(points, 2048)?.column(0).to_vec())
    }
}

/// `sharpness·(radius − ‖p − centre‖)`: positive inside the ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSphere {
    pub center: Vec3,
    pub radius: f64,
    pub sharpness: f64,
}

impl AnalyticSphere {
    pub fn distance_along(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let oc: Vec3 = [origin[0] - self.center[0], origin[1] - self.center[1], origin[2] - self.center[2]];
        let b = dot3(oc, dir);
        let c = dot3(oc, oc) - self.radius * self.radius;
        let disc = b * b - c;
        (disc >= 0.0).then(|| -b - disc.sqrt())
    }
}

impl OccupancyField for AnalyticSphere {
    fn logits(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(points
            .iter()
            .map(|p| {
                let d = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) + (p[2] - self.center[2]).powi(2)).sqrt();
                self.sharpness * (self.radius - d)
            })
            .collect())
    }
}

/// Constant logit everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField(pub f64);

impl OccupancyField for ConstantField {
    fn logits(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(vec![self.0; points.len()])
    }
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize3(a: Vec3) -> Vec3 {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Pinhole camera. Pixel `(0, 0)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
}

pub const DEFAULT_AZIMUTH: f64 = 30.0;
pub const DEFAULT_ELEVATION: f64 = 25.0;
/// Far enough that the whole unit cube fits the default field of view.
pub const DEFAULT_DISTANCE: f64 = 2.6;
pub const DEFAULT_FOV: f64 = 40.0;

impl Camera {
    /// Looks at the cube centre from the given azimuth (about +z, from +x)
    /// and elevation, both in degrees.
    pub fn orbit(azimuth: f64, elevation: f64, distance: f64) -> Camera {
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let target = [0.5; 3];
        let eye = [
            target[0] + distance * el.cos() * az.cos(),
            target[1] + distance * el.cos() * az.sin(),
            target[2] + distance * el.sin(),
        ];
        Camera {
            eye,
            target,
            up: [0.0, 0.0, 1.0],
            fov_y: DEFAULT_FOV,
        }
    }

    pub fn default_orbit() -> Camera {
        Camera::orbit(DEFAULT_AZIMUTH, DEFAULT_ELEVATION, DEFAULT_DISTANCE)
    }

    /// Unit direction through the centre of pixel `(px, py)`.
    pub fn ray(&self, px: usize, py: usize, width: usize, height: usize) -> Vec3 {
        let forward = normalize3([self.target[0] - self.eye[0], self.target[1] - self.eye[1], self.target[2] - self.eye[2]]);
        let right = normalize3(cross3(forward, self.up));
        let up = cross3(right, forward);
        let half = (self.fov_y.to_radians() / 2.0).tan();
        let aspect = width as f64 / height as f64;
        let sx = (2.0 * (px as f64 + 0.5) / width as f64 - 1.0) * half * aspect;
        let sy = (1.0 - 2.0 * (py as f64 + 0.5) / height as f64) * half;
        normalize3([
            forward[0] + sx * right[0] + sy * up[0],
            forward[1] + sx * right[1] + sy * up[1],
            forward[2] + sx * right[2] + sy * up[2],
        ])
    }
}

/// Parametric interval where the ray is inside `[0,1]³`.
fn unit_box_span(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > 1.0 {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((0.0 - origin[a]) / dir[a], (1.0 - origin[a]) / dir[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 <= t1).then_some((t0, t1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major distances from the eye; [`BACKGROUND_DEPTH`] for misses.
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn get(&self, px: usize, py: usize) -> f64 {
        self.depth[py * self.width + px]
    }

    pub fn hit_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// Grayscale rendering: nearest hit 1.0, farthest 0.2, background 0.
    pub fn to_gray(&self) -> GrayImage {
        let finite: Vec<f64> = self.depth.iter().copied().filter(|d| d.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = (hi - lo).max(1e-12);
        let data = self
            .depth
            .iter()
            .map(|&d| if d.is_finite() { 1.0 - 0.8 * (d - lo) / range } else { 0.0 })
            .collect();
        GrayImage::from_vec(self.width, self.height, data).expect("consistent size")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray().save(path)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "px,py,depth")?;
        for py in 0..self.height {
            for px in 0..self.width {
                writeln!(w, "{px},{py},{}", fmt_f64(self.get(px, py)))?;
            }
        }
        Ok(())
    }
}

fn point_at(origin: Vec3, dir: Vec3, t: f64) -> Vec<f64> {
    (0..3).map(|a| (origin[a] + t * dir[a]).clamp(0.0, 1.0)).collect()
}

/// Renders the first crossing of the 0.5 occupancy level (logit ≥ 0) along
/// each pixel ray through the unit cube. Rays advance in lock step by
/// `step` (default: diagonal/256) and each bracketed crossing is refined by
/// bisection.
pub fn raymarch_depth(
    field: &dyn OccupancyField,
    camera: &Camera,
    width: usize,
    height: usize,
    step: Option<f64>,
) -> Result<DepthImage> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension("render size must be positive".into()));
    }
    let step = step.unwrap_or(3f64.sqrt() / MARCH_STEPS_PER_DIAGONAL);
    if !(step > 0.0) {
        return Err(Error::Config(format!("march step must be positive, got {step}")));
    }
    let mut depth = vec![BACKGROUND_DEPTH; width * height];
    struct Ray {
        pixel: usize,
        dir: Vec3,
        t: f64,
        t_end: f64,
    }
    let mut active: Vec<Ray> = Vec::new();
    for py in 0..height {
        for px in 0..width {
            let dir = camera.ray(px, py, width, height);
            if let Some((t0, t1)) = unit_box_span(camera.eye, dir) {
                active.push(Ray {
                    pixel: py * width + px,
                    dir,
                    t: t0,
                    t_end: t1,
                });
            }
        }
    }
    let eye = camera.eye;
    // Entry points already inside the level set hit immediately.
    let entry: Vec<Vec<f64>> = active.iter().map(|r| point_at(eye, r.dir, r.t)).collect();
    let logits = field.logits(&entry)?;
    let mut still = Vec::with_capacity(active.len());
    for (r, l) in active.into_iter().zip(logits) {
        if l >= 0.0 {
            depth[r.pixel] = r.t;
        } else {
            still.push(r);
        }
    }
    active = still;
    while !active.is_empty() {
        let next_t: Vec<f64> = active.iter().map(|r| (r.t + step).min(r.t_end)).collect();
        let pts: Vec<Vec<f64>> = active.iter().zip(&next_t).map(|(r, &t)| point_at(eye, r.dir, t)).collect();
        let logits = field.logits(&pts)?;
        let mut hits: Vec<(Ray, f64, f64)> = Vec::new();
        let mut still = Vec::with_capacity(active.len());
        for ((mut r, t), l) in active.into_iter().zip(next_t).zip(logits) {
            if l >= 0.0 {
                let lo = r.t;
                hits.push((r, lo, t));
            } else if t >= r.t_end {
                continue;
            } else {
                r.t = t;
                still.push(r);
            }
        }
        for _ in 0..BISECTION_STEPS {
            if hits.is_empty() {
                break;
            }
            let mids: Vec<Vec<f64>> = hits.iter().map(|(r, lo, hi)| point_at(eye, r.dir, 0.5 * (lo + hi))).collect();
            let ml = field.logits(&mids)?;
            for ((_, lo, hi), l) in hits.iter_mut().zip(ml) {
                let mid = 0.5 * (*lo + *hi);
                if l >= 0.0 {
                    *hi = mid;
                } else {
                    *lo = mid;
                }
            }
        }
        for (r, _, hi) in hits {
            depth[r.pixel] = hi;
        }
        active = still;
    }
    Ok(DepthImage { width, height, depth })
}

/// Projected radius in pixels of a sphere centred on the optical axis.
pub fn analytic_silhouette_radius(camera: &Camera, sphere: &AnalyticSphere, height: usize) -> f64 {
    let d = ((0..3).map(|a| (camera.eye[a] - sphere.center[a]).powi(2)).sum::<f64>()).sqrt();
    let angle = (sphere.radius / d).asin();
    angle.tan() / (camera.fov_y.to_radians() / 2.0).tan() * height as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::mesh::parse_obj;

    const CUBE: &str = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
        f 1 4 3 2\nf 5 6 7 8\nf 1 2 6 5\nf 3 4 8 7\nf 2 3 7 6\nf 1 5 8 4\n";

    fn tetra() -> TriangleMesh {
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n")
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn samples_are_deterministic_and_in_box() {
        let m = tetra();
        let a = occupancy_sample(&m, 500, 3);
        assert_eq!(a, occupancy_sample(&m, 500, 3));
        assert!(a.iter().all(|s| s.point.iter().all(|c| (0.0..=1.0).contains(c))));
        let frac = a.iter().filter(|s| s.inside).count() as f64 / 500.0;
        assert!((frac - 1.0 / 6.0).abs() < 0.05);
        assert!(!m.contains([0.95, 0.95, 0.95]));
    }

    #[test]
    fn constant_negative_field_is_background() {
        let d = raymarch_depth(&ConstantField(-1.0), &Camera::default_orbit(), 8, 6, None).unwrap();
        assert_eq!(d.hit_count(), 0);
        assert!(d.depth.iter().all(|v| *v == BACKGROUND_DEPTH));
        let g = d.to_gray();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sphere_silhouette_and_depth() {
        let sphere = AnalyticSphere {
            center: [0.5; 3],
            radius: 0.3,
            sharpness: 10.0,
        };
        let cam = Camera::default_orbit();
        let (w, h) = (64, 64);
        let d = raymarch_depth(&sphere, &cam, w, h, None).unwrap();
        let r_est = (d.hit_count() as f64 / std::f64::consts::PI).sqrt();
        let r_true = analytic_silhouette_radius(&cam, &sphere, h);
        assert!((r_est - r_true).abs() <= 2.0, "{r_est} vs {r_true}");
        let step = 3f64.sqrt() / MARCH_STEPS_PER_DIAGONAL;
        for py in 0..h {
            for px in 0..w {
                let dep = d.get(px, py);
                if dep.is_finite() {
                    let exact = sphere.distance_along(cam.eye, cam.ray(px, py, w, h)).unwrap();
                    assert!((dep - exact).abs() < step / 16.0);
                    assert!(dep < BACKGROUND_DEPTH);
                }
            }
        }
    }

    #[test]
    fn untrained_bce_is_near_ln2_for_tiny_output() {
        let m = parse_obj(CUBE).unwrap().normalized().unwrap();
        let mut cfg = preset("desk-armadillo-base").unwrap();
        cfg.hidden = vec![16, 16];
        let mut model = init_model(&cfg.encoding, 3, &cfg.mlp_config(), 0).unwrap();
        let last = model.network.layers.last_mut().unwrap();
        last.weight.mapv_inplace(|w| w * 1e-6);
        last.bias.fill(0.0);
        let s = occupancy_sample(&m, 200, 1);
        assert!((mean_bce(&model, &s).unwrap() - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn short_training_run() {
        let m = parse_obj(CUBE).unwrap().normalized().unwrap();
        let mut cfg = preset("desk-armadillo-mpe").unwrap();
        cfg.hidden = vec![16, 16];
        cfg.epochs = 3;
        cfg.batch_size = 64;
        let a = train_occupancy(&m, &cfg).unwrap();
        assert_eq!(a.loss_trace.len(), 3);
        assert!(a.final_bce.is_finite());
        assert_eq!(a.snapshot(SnapshotTag::End, true).unwrap().eigenvalues.len(), PROBE_SIZE);
        let b = train_occupancy(&m, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        let mut csv = Vec::new();
        a.write_loss_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,loss\n1,"));
    }
}
