//! Rate-based navigation simulator: Ornstein–Uhlenbeck motion in the unit
//! square and place / grid / head-direction / speed cell populations, plus
//! the spatial-information and grid-score metrics used to sanity-check them.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryMap, Dataset, DatasetMeta, GeneratorKind, Link};
use crate::diff::Tensor;
use crate::rng::{self, tag};

pub const NOISE_LEVELS: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5];
pub const CELLS_PER_KIND: usize = 100;
pub const PLACE_WIDTH: f64 = 0.2;
pub const GRID_SCALES: [f64; 2] = [0.3, 0.4];
pub const HD_CONCENTRATION: f64 = 4.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NavError {
    #[error("need at least two timesteps, got {0}")]
    TooShort(usize),
    #[error("time step must be positive and finite")]
    Dt,
    #[error("noise level must be finite and non-negative")]
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    /// Reversion time of the rotational velocity (s).
    pub rotation_tau: f64,
    /// Rotational noise (rad/√s).
    pub rotation_noise: f64,
    pub speed_mean: f64,
    /// Stationary standard deviation of speed (m/s).
    pub speed_std: f64,
    pub speed_tau: f64,
    /// Smoothing time constant of head direction (s).
    pub head_tau: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self { rotation_tau: 1.0, rotation_noise: 2.0, speed_mean: 0.08, speed_std: 0.08, speed_tau: 0.7, head_tau: 0.2 }
    }
}

impl MotionParams {
    pub fn noiseless(self) -> Self {
        Self { rotation_noise: 0.0, speed_std: 0.0, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub position: Vec<[f64; 2]>,
    pub speed: Vec<f64>,
    pub direction: Vec<f64>,
    pub head_direction: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }
}

/// Exact discretisation of an OU step with stationary std `std`.
fn ou_step(rng: &mut ChaCha8Rng, x: f64, mean: f64, tau: f64, std: f64, dt: f64) -> f64 {
    let decay = (-dt / tau).exp();
    let eps: f64 = StandardNormal.sample(rng);
    mean + (x - mean) * decay + std * (1.0 - decay * decay).sqrt() * eps
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Specular reflection off the walls of `[0, 1]²`.
fn reflect(pos: &mut [f64; 2], dir: &mut f64) {
    for _ in 0..4 {
        if pos[0] < 0.0 {
            pos[0] = -pos[0];
            *dir = PI - *dir;
        } else if pos[0] > 1.0 {
            pos[0] = 2.0 - pos[0];
            *dir = PI - *dir;
        } else if pos[1] < 0.0 {
            pos[1] = -pos[1];
            *dir = -*dir;
        } else if pos[1] > 1.0 {
            pos[1] = 2.0 - pos[1];
            *dir = -*dir;
        } else {
            break;
        }
    }
    pos[0] = pos[0].clamp(0.0, 1.0);
    pos[1] = pos[1].clamp(0.0, 1.0);
    *dir = wrap_angle(*dir);
}

/// Rotational velocity and speed follow OU processes (speed reflected at
/// zero); position integrates the velocity with specular wall reflections;
/// head direction is the direction of travel smoothed on the circle.
pub fn simulate_trajectory(t: usize, dt: f64, params: &MotionParams, seed: u64) -> Result<Trajectory, NavError> {
    if t < 2 {
        return Err(NavError::TooShort(t));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(NavError::Dt);
    }
    let mut rng = rng::stream(seed, &[tag::TRAJECTORY]);
    let mut pos = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let mut dir: f64 = rng.random_range(-PI..PI);
    let mut speed = params.speed_mean;
    let mut omega = 0.0;
    let mut head = [dir.cos(), dir.sin()];
    let omega_std = params.rotation_noise * (params.rotation_tau / 2.0).sqrt();
    let alpha = (dt / params.head_tau).min(1.0);

    let mut out = Trajectory {
        dt,
        position: Vec::with_capacity(t),
        speed: Vec::with_capacity(t),
        direction: Vec::with_capacity(t),
        head_direction: Vec::with_capacity(t),
    };
    for step in 0..t {
        if step > 0 {
            omega = ou_step(&mut rng, omega, 0.0, params.rotation_tau, omega_std, dt);
            speed = ou_step(&mut rng, speed, params.speed_mean, params.speed_tau, params.speed_std, dt).abs();
            dir = wrap_angle(dir + omega * dt);
            pos[0] += speed * dir.cos() * dt;
            pos[1] += speed * dir.sin() * dt;
            reflect(&mut pos, &mut dir);
            head[0] += alpha * (dir.cos() - head[0]);
            head[1] += alpha * (dir.sin() - head[1]);
        }
        out.position.push(pos);
        out.speed.push(speed);
        out.direction.push(dir);
        out.head_direction.push(head[1].atan2(head[0]));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Place,
    Grid,
    HeadDirection,
    Speed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CellMeta {
    Place { center: [f64; 2], width: f64 },
    Grid { module: usize, scale: f64, orientation: f64, phase: [f64; 2] },
    HeadDirection { preferred: f64, concentration: f64 },
    Speed { gain: f64 },
}

impl CellMeta {
    pub fn kind(&self) -> CellKind {
        match self {
            CellMeta::Place { .. } => CellKind::Place,
            CellMeta::Grid { .. } => CellKind::Grid,
            CellMeta::HeadDirection { .. } => CellKind::HeadDirection,
            CellMeta::Speed { .. } => CellKind::Speed,
        }
    }

    /// Noiseless rate at one motion state; always `≥ 0`.
    pub fn rate(&self, pos: [f64; 2], speed: f64, head: f64, speed_mean: f64) -> f64 {
        match *self {
            CellMeta::Place { center, width } => place_rate(pos, center, width),
            CellMeta::Grid { scale, orientation, phase, .. } => grid_rate(pos, scale, orientation, phase),
            CellMeta::HeadDirection { preferred, concentration } => (concentration * ((head - preferred).cos() - 1.0)).exp(),
            CellMeta::Speed { gain } => (gain * speed / speed_mean).max(0.0),
        }
    }
}

/// Zero-mean difference of Gaussians (outer width 1.5×), rectified and
/// scaled so the peak at the centre is 1.
pub fn place_rate(pos: [f64; 2], center: [f64; 2], width: f64) -> f64 {
    let d2 = (pos[0] - center[0]).powi(2) + (pos[1] - center[1]).powi(2);
    let outer = 1.5 * width;
    let ratio = (width / outer).powi(2);
    let dog = (-d2 / (2.0 * width * width)).exp() - ratio * (-d2 / (2.0 * outer * outer)).exp();
    (dog / (1.0 - ratio)).max(0.0)
}

/// Mean of three rectified cosines with wave vectors 60° apart; equals 1 on
/// the vertices of the hexagonal lattice.
pub fn grid_rate(pos: [f64; 2], scale: f64, orientation: f64, phase: [f64; 2]) -> f64 {
    let k = 4.0 * PI / (3f64.sqrt() * scale);
    let (dx, dy) = (pos[0] - phase[0], pos[1] - phase[1]);
    (0..3)
        .map(|i| {
            let a = orientation + i as f64 * PI / 3.0;
            (k * (a.cos() * dx + a.sin() * dy)).cos().max(0.0)
        })
        .sum::<f64>()
        / 3.0
}

/// Population layout: place, grid (two modules), head direction, speed —
/// `per_kind` cells each, in that row order.
pub fn build_population(per_kind: usize, seed: u64) -> Vec<CellMeta> {
    let mut rng = rng::stream(seed, &[tag::CELLS]);
    let mut cells = Vec::with_capacity(4 * per_kind);
    for _ in 0..per_kind {
        cells.push(CellMeta::Place { center: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)], width: PLACE_WIDTH });
    }
    let orientations: Vec<f64> = GRID_SCALES.iter().map(|_| rng.random_range(0.0..PI / 3.0)).collect();
    for i in 0..per_kind {
        let module = i * GRID_SCALES.len() / per_kind.max(1);
        let scale = GRID_SCALES[module];
        cells.push(CellMeta::Grid {
            module,
            scale,
            orientation: orientations[module],
            phase: [rng.random_range(0.0..scale), rng.random_range(0.0..scale)],
        });
    }
    for _ in 0..per_kind {
        cells.push(CellMeta::HeadDirection { preferred: rng.random_range(-PI..PI), concentration: HD_CONCENTRATION });
    }
    for _ in 0..per_kind {
        cells.push(CellMeta::Speed { gain: rng.random_range(0.5..2.0) });
    }
    cells
}

/// `T × n` rates with additive Gaussian noise clipped at zero.
pub fn firing_rates(traj: &Trajectory, cells: &[CellMeta], speed_mean: f64, noise_std: f64, seed: u64) -> Tensor {
    let mut rates = Tensor::from_fn(traj.len(), cells.len(), |t, i| {
        cells[i].rate(traj.position[t], traj.speed[t], traj.head_direction[t], speed_mean)
    });
    if noise_std > 0.0 {
        let mut rng = rng::stream(seed, &[tag::NOISE]);
        for v in rates.data_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + noise_std * eps).max(0.0);
        }
    }
    rates
}

/// Occupancy-normalised rate map on a `bins × bins` grid over the unit
/// square. Unvisited bins hold `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMap {
    pub bins: usize,
    pub occupancy: Vec<f64>,
    pub rates: Vec<f64>,
}

impl RateMap {
    pub fn from_samples(rate: impl Iterator<Item = f64>, positions: &[[f64; 2]], bins: usize) -> RateMap {
        let mut occ = vec![0.0; bins * bins];
        let mut sum = vec![0.0; bins * bins];
        for (r, p) in rate.zip(positions) {
            let bx = ((p[0] * bins as f64) as usize).min(bins - 1);
            let by = ((p[1] * bins as f64) as usize).min(bins - 1);
            occ[by * bins + bx] += 1.0;
            sum[by * bins + bx] += r;
        }
        let rates = occ.iter().zip(&sum).map(|(&o, &s)| if o > 0.0 { s / o } else { f64::NAN }).collect();
        RateMap { bins, occupancy: occ, rates }
    }

    /// Evaluates a tuning function at the bin centres with uniform occupancy.
    pub fn from_fn(bins: usize, f: impl Fn([f64; 2]) -> f64) -> RateMap {
        let mut rates = Vec::with_capacity(bins * bins);
        for by in 0..bins {
            for bx in 0..bins {
                rates.push(f([(bx as f64 + 0.5) / bins as f64, (by as f64 + 0.5) / bins as f64]));
            }
        }
        RateMap { bins, occupancy: vec![1.0; bins * bins], rates }
    }
}

/// `Σ P_i (r_i/r̄) log₂(r_i/r̄)` in bits per spike; `None` when the mean
/// rate is zero or nothing was visited.
pub fn spatial_information(map: &RateMap) -> Option<f64> {
    let total: f64 = map.occupancy.iter().sum();
    if total <= 0.0 {
        return None;
    }
    // one division, so a uniform map gives r/r̄ = 1 and SI = 0 exactly
    let mean: f64 = map.occupancy.iter().zip(&map.rates).filter(|(o, _)| **o > 0.0).map(|(o, r)| o * r).sum::<f64>() / total;
    if mean <= 0.0 || !mean.is_finite() {
        return None;
    }
    Some(
        map.occupancy
            .iter()
            .zip(&map.rates)
            .filter(|(o, r)| **o > 0.0 && **r > 0.0)
            .map(|(o, r)| {
                let q = r / mean;
                o / total * q * q.log2()
            })
            .sum(),
    )
}

/// Spatial autocorrelogram: Pearson correlation of the map with itself at
/// every integer shift, over bins valid in both copies. Shifts with fewer
/// than 20 overlapping bins are `NaN`. Output is `(2n−1)²`, centre at
/// `(n−1, n−1)`.
pub fn autocorrelogram(map: &RateMap) -> Vec<f64> {
    let n = map.bins as isize;
    let size = (2 * n - 1) as usize;
    let mut out = vec![f64::NAN; size * size];
    let at = |x: isize, y: isize| map.rates[(y * n + x) as usize];
    for sy in -(n - 1)..n {
        for sx in -(n - 1)..n {
            let (mut k, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0.max(-sy)..n.min(n - sy) {
                for x in 0.max(-sx)..n.min(n - sx) {
                    let (a, b) = (at(x, y), at(x + sx, y + sy));
                    if a.is_nan() || b.is_nan() {
                        continue;
                    }
                    k += 1.0;
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            if k < 20.0 {
                continue;
            }
            let cov = sab - sa * sb / k;
            let va = saa - sa * sa / k;
            let vb = sbb - sb * sb / k;
            if va > 1e-12 && vb > 1e-12 {
                out[((sy + n - 1) as usize) * size + (sx + n - 1) as usize] = cov / (va * vb).sqrt();
            }
        }
    }
    out
}

fn bilinear(img: &[f64], size: usize, x: f64, y: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (size - 1) as f64 || y > (size - 1) as f64 {
        return f64::NAN;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v = |xx: usize, yy: usize| img[yy * size + xx];
    (1.0 - fy) * ((1.0 - fx) * v(x0, y0) + fx * v(x1, y0)) + fy * ((1.0 - fx) * v(x0, y1) + fx * v(x1, y1))
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let k = pairs.len() as f64;
    if pairs.len() < 3 {
        return None;
    }
    let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / k, pairs.iter().map(|p| p.1).sum::<f64>() / k);
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for &(a, b) in pairs {
        c += (a - ma) * (b - mb);
        va += (a - ma).powi(2);
        vb += (b - mb).powi(2);
    }
    (va > 1e-12 && vb > 1e-12).then(|| c / (va * vb).sqrt())
}

/// Mean autocorrelation at each integer radius from the centre.
fn radial_profile(sac: &[f64], size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut sum = vec![0.0; size];
    let mut cnt = vec![0.0; size];
    for y in 0..size {
        for x in 0..size {
            let v = sac[y * size + x];
            if v.is_nan() {
                continue;
            }
            let r = ((x as f64 - c).hypot(y as f64 - c)).round() as usize;
            if r < size {
                sum[r] += v;
                cnt[r] += 1.0;
            }
        }
    }
    sum.iter().zip(&cnt).map(|(s, n)| if *n > 0.0 { s / n } else { f64::NAN }).collect()
}

/// Gridness of a rate map: `min(ρ60, ρ120) − max(ρ30, ρ90, ρ150)` where `ρθ`
/// correlates the autocorrelogram with itself rotated by `θ`, restricted to
/// an annulus around the masked central peak. The inner radius is the first
/// local minimum of the radial profile. Constant maps score 0.
pub fn grid_score(map: &RateMap) -> f64 {
    let valid: Vec<f64> = map.rates.iter().copied().filter(|v| !v.is_nan()).collect();
    let mean = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
    if valid.iter().all(|v| (v - mean).abs() < 1e-12) {
        return 0.0;
    }
    let sac = autocorrelogram(map);
    let size = 2 * map.bins - 1;
    let centre = (size / 2) as f64;
    let profile = radial_profile(&sac, size);
    let inner = (1..profile.len() - 1)
        .find(|&r| profile[r] <= profile[r - 1] && profile[r] < profile[r + 1])
        .unwrap_or(1) as f64;

    let rotated: Vec<Vec<f64>> = [30.0f64, 60.0, 90.0, 120.0, 150.0]
        .iter()
        .map(|&deg| {
            let (s, c) = deg.to_radians().sin_cos();
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64 - centre, (i / size) as f64 - centre);
                    bilinear(&sac, size, c * x - s * y + centre, s * x + c * y + centre)
                })
                .collect()
        })
        .collect();

    // The annulus ends one central-peak radius beyond the first ring of
    // peaks, so that ring is enclosed whole.
    let ring = (inner as usize + 1..profile.len() - 1)
        .find(|&r| profile[r] >= profile[r - 1] && profile[r] > profile[r + 1])
        .map_or(centre, |r| r as f64);
    let outer = (ring + inner).min(centre);
    let in_ring = |i: usize| {
        let r = ((i % size) as f64 - centre).hypot((i / size) as f64 - centre);
        r >= inner && r <= outer
    };
    let corr: Vec<Option<f64>> = rotated
        .iter()
        .map(|img| {
            let pairs: Vec<(f64, f64)> = (0..size * size)
                .filter(|&i| in_ring(i) && !sac[i].is_nan() && !img[i].is_nan())
                .map(|i| (sac[i], img[i]))
                .collect();
            pearson(&pairs)
        })
        .collect();
    match corr[..] {
        [Some(r30), Some(r60), Some(r90), Some(r120), Some(r150)] => r60.min(r120) - r30.max(r90).max(r150),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavConfig {
    pub t: usize,
    pub dt: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub cells_per_kind: usize,
    pub motion: MotionParams,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self { t: 20_000, dt: 0.1, seed: 0, noise_std: 0.0, cells_per_kind: CELLS_PER_KIND, motion: MotionParams::default() }
    }
}

/// Observations are the population rates, labels the 2-D position. Only
/// place and grid rows depend on position. Trajectory and cell parameters
/// depend on the seed alone, so a noise sweep shares them.
pub fn make_nav_dataset(cfg: &NavConfig) -> Result<(Dataset, Trajectory), NavError> {
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(NavError::Noise);
    }
    let traj = simulate_trajectory(cfg.t, cfg.dt, &cfg.motion, cfg.seed)?;
    let cells = build_population(cfg.cells_per_kind, cfg.seed);
    let x = firing_rates(&traj, &cells, cfg.motion.speed_mean, cfg.noise_std, cfg.seed);
    let position = Tensor::from_fn(traj.len(), 2, |t, k| traj.position[t][k]);
    let ground_truth = BinaryMap::from_fn(cells.len(), 2, |i, _| matches!(cells[i].kind(), CellKind::Place | CellKind::Grid));
    let mut extras = BTreeMap::new();
    extras.insert("speed".to_string(), Tensor::new(traj.len(), 1, traj.speed.clone()).expect("one column"));
    extras.insert("headdir".to_string(), Tensor::new(traj.len(), 1, traj.head_direction.clone()).expect("one column"));
    let meta = DatasetMeta {
        generator: GeneratorKind::Navsim,
        t: cfg.t,
        input_dim: cells.len(),
        latent_dim: 2,
        partition: vec![2],
        observed: vec![0],
        label_dim: 2,
        sigma: 0.0,
        seed: cfg.seed,
        link: Link::Identity,
        mixing: None,
        block_out_dims: None,
        dt: Some(cfg.dt),
        noise_std: Some(cfg.noise_std),
        cells: Some(cells),
        extras: extras.keys().cloned().collect(),
        shuffled_labels: false,
    };
    let dataset = Dataset { meta, x, c: Some(position.clone()), z: Some(position), ground_truth: Some(ground_truth), extras };
    Ok((dataset, traj))
}

/// Per-cell spatial information and grid score from simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub kind: CellKind,
    pub spatial_information: Option<f64>,
    pub grid_score: f64,
}

pub fn cell_stats(dataset: &Dataset, positions: &[[f64; 2]], bins: usize) -> Vec<CellStats> {
    let cells = dataset.meta.cells.as_deref().unwrap_or(&[]);
    let x = &dataset.x;
    cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let map = RateMap::from_samples((0..x.rows()).map(|t| x.get(t, i)), positions, bins);
            CellStats { kind: cell.kind(), spatial_information: spatial_information(&map), grid_score: grid_score(&map) }
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

#[cfg(test)]
mod tests;
