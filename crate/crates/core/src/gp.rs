//! Gaussian-process regression of velocity residuals.
//!
//! Features are body-frame velocities and targets are body-frame residual
//! accelerations; callers rotate predictions back to the world frame.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::rk4_step;
use crate::error::{Error, Result};
use crate::quad::{rotate_inverse_unchecked, Disturbance, QuadParams, QuadState, RotorInput};

/// Smallest admissible noise std.
pub const SIGMA_N_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelHyper {
    pub sigma_f: f64,
    pub sigma_n: f64,
    pub length_scales: [f64; 3],
    pub alpha: f64,
}

impl Default for KernelHyper {
    fn default() -> Self {
        Self {
            sigma_f: 1.0,
            sigma_n: 0.05,
            length_scales: [1.0; 3],
            alpha: 1.0,
        }
    }
}

impl KernelHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_f > 0.0
            && self.sigma_n >= SIGMA_N_FLOOR
            && self.alpha > 0.0
            && self.length_scales.iter().all(|l| *l > 0.0);
        if !ok {
            return Err(Error::invalid("kernel hyperparameters must be positive"));
        }
        Ok(())
    }

    #[inline]
    fn signal(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (a[k] - b[k]) / self.length_scales[k];
            d2 += d * d;
        }
        self.sigma_f * self.sigma_f * (1.0 + d2 / (2.0 * self.alpha)).powf(-self.alpha)
    }

    /// Prior variance at any input (signal plus noise).
    pub fn prior_variance(&self) -> f64 {
        self.sigma_f * self.sigma_f + self.sigma_n * self.sigma_n
    }
}

/// Rational quadratic kernel; the noise term applies to identical inputs only.
pub fn kernel(zi: &Vector3<f64>, zj: &Vector3<f64>, hyper: &KernelHyper) -> f64 {
    let noise = if zi == zj {
        hyper.sigma_n * hyper.sigma_n
    } else {
        0.0
    };
    hyper.signal(zi, zj) + noise
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    pub inputs: Vec<Vector3<f64>>,
    pub targets: Vec<Vector3<f64>>,
    pub max_points: usize,
}

impl GpDataset {
    pub fn new(max_points: usize) -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            max_points,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, z: Vector3<f64>, y: Vector3<f64>) -> Result<()> {
        if self.len() >= self.max_points {
            return Err(Error::invalid("dataset is full"));
        }
        self.inputs.push(z);
        self.targets.push(y);
        Ok(())
    }

    /// Per-axis `(min, max)` of the features.
    pub fn envelope(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.inputs.first()?;
        Some(self.inputs.iter().fold((first, first), |(lo, hi), z| {
            (lo.inf(z), hi.sup(z))
        }))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("zx,zy,zz,yx,yy,yz\n");
        for (z, y) in self.inputs.iter().zip(&self.targets) {
            let _ = writeln!(
                out,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                z.x, z.y, z.z, y.x, y.y, y.z
            );
        }
        out
    }

    pub fn from_csv(text: &str, max_points: usize) -> Result<Self> {
        let mut ds = GpDataset::new(max_points);
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            if vals.len() != 6 {
                return Err(Error::Parse(format!("line {}: expected 6 columns", i + 1)));
            }
            ds.push(
                Vector3::new(vals[0], vals[1], vals[2]),
                Vector3::new(vals[3], vals[4], vals[5]),
            )?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path, max_points: usize) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, max_points)
    }
}

pub fn gram_matrix(inputs: &[Vector3<f64>], hyper: &KernelHyper) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = hyper.signal(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[derive(Debug, Clone)]
pub struct GpModel {
    dataset: GpDataset,
    hyper: KernelHyper,
    chol: Cholesky<f64, Dyn>,
    weights: [DVector<f64>; 3],
}

fn factorize(dataset: &GpDataset, hyper: &KernelHyper) -> Result<Cholesky<f64, Dyn>> {
    let mut k = gram_matrix(&dataset.inputs, hyper);
    for i in 0..dataset.len() {
        k[(i, i)] += hyper.sigma_n * hyper.sigma_n;
    }
    let chol = Cholesky::new(k)
        .ok_or_else(|| Error::IllConditioned("Gram matrix is not positive definite".into()))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    // pivot ratio² bounds the condition number from below
    if !(lo > 0.0) || (hi / lo).powi(2) > 1e14 {
        return Err(Error::IllConditioned(format!(
            "Gram factor pivots span {lo:e}..{hi:e}"
        )));
    }
    Ok(chol)
}

impl GpModel {
    pub fn fit(dataset: GpDataset, hyper: KernelHyper) -> Result<Self> {
        hyper.validate()?;
        if dataset.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        if dataset.inputs.len() != dataset.targets.len() {
            return Err(Error::invalid("inputs and targets differ in length"));
        }
        let chol = factorize(&dataset, &hyper)?;
        let weights = [0, 1, 2].map(|a| {
            let y = DVector::from_iterator(dataset.len(), dataset.targets.iter().map(|t| t[a]));
            chol.solve(&y)
        });
        Ok(Self {
            dataset,
            hyper,
            chol,
            weights,
        })
    }

    pub fn dataset(&self) -> &GpDataset {
        &self.dataset
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    fn cross(&self, z: &Vector3<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dataset.len(),
            self.dataset.inputs.iter().map(|zi| self.hyper.signal(z, zi)),
        )
    }

    /// Posterior mean only.
    pub fn predict_mean(&self, z: &Vector3<f64>) -> Vector3<f64> {
        let mut m = Vector3::zeros();
        for (i, zi) in self.dataset.inputs.iter().enumerate() {
            let k = self.hyper.signal(z, zi);
            for a in 0..3 {
                m[a] += k * self.weights[a][i];
            }
        }
        m
    }

    /// Posterior mean and per-axis variance.
    pub fn predict(&self, z: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let k = self.cross(z);
        let mean = Vector3::new(k.dot(&self.weights[0]), k.dot(&self.weights[1]), k.dot(&self.weights[2]));
        let v = self.chol.l().solve_lower_triangular(&k).expect("factor is nonsingular");
        let var = (self.hyper.prior_variance() - v.norm_squared()).max(0.0);
        (mean, Vector3::repeat(var))
    }
}

/// Sum over the three axes of the log marginal likelihood.
pub fn log_marginal_likelihood(dataset: &GpDataset, hyper: &KernelHyper) -> Result<f64> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let chol = factorize(dataset, hyper)?;
    let n = dataset.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let mut total = 0.0;
    for a in 0..3 {
        let y = DVector::from_iterator(dataset.len(), dataset.targets.iter().map(|t| t[a]));
        let w = chol.solve(&y);
        total += -0.5 * y.dot(&w) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(total)
}

/// Candidate values for the marginal-likelihood grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    pub sigma_f: Vec<f64>,
    pub sigma_n: Vec<f64>,
    /// Isotropic length scales.
    pub length_scale: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            sigma_f: vec![0.3, 1.0, 3.0],
            sigma_n: vec![0.01, 0.05, 0.2],
            length_scale: vec![0.5, 1.0, 2.0, 4.0],
            alpha: vec![0.5, 1.0, 5.0],
        }
    }
}

/// Best grid point by log marginal likelihood; ill-conditioned points are skipped.
pub fn grid_search(dataset: &GpDataset, grid: &HyperGrid) -> Result<(KernelHyper, f64)> {
    let mut best: Option<(KernelHyper, f64)> = None;
    for &sigma_f in &grid.sigma_f {
        for &sigma_n in &grid.sigma_n {
            for &l in &grid.length_scale {
                for &alpha in &grid.alpha {
                    let h = KernelHyper {
                        sigma_f,
                        sigma_n,
                        length_scales: [l; 3],
                        alpha,
                    };
                    if let Ok(lml) = log_marginal_likelihood(dataset, &h) {
                        if best.as_ref().is_none_or(|(_, b)| lml > *b) {
                            best = Some((h, lml));
                        }
                    }
                }
            }
        }
    }
    best.ok_or_else(|| Error::IllConditioned("no grid point could be factorized".into()))
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingTuple {
    pub state: QuadState,
    pub input: RotorInput,
    pub disturbance_estimate: Disturbance,
    pub next: QuadState,
}

/// How the logged samples are reduced to `max_points`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// Keep the farthest-point selection as is.
    FarthestPoint,
    /// Replace each selected point by the mean feature and target of the
    /// samples closest to it.
    CellMean,
}

/// Greedy farthest-point selection; starts from the sample farthest from the mean.
pub fn farthest_point_indices(features: &[Vector3<f64>], k: usize) -> Vec<usize> {
    let n = features.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mean = features.iter().sum::<Vector3<f64>>() / n as f64;
    let first = (0..n)
        .max_by(|&a, &b| {
            (features[a] - mean)
                .norm_squared()
                .total_cmp(&(features[b] - mean).norm_squared())
                .then(b.cmp(&a))
        })
        .expect("nonempty");
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = features.iter().map(|f| (f - features[first]).norm_squared()).collect();
    while chosen.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("nonempty");
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((features[i] - features[next]).norm_squared());
        }
    }
    chosen
}

/// Body-frame residual samples from logged steps, reduced to `max_points`.
/// Body-frame velocity features and body-frame residual accelerations
/// `(v_next − v_pred)/dt` of each logged step.
pub fn residual_targets(
    trajectory: &[TrainingTuple],
    params: &QuadParams,
    dt: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let mut features = Vec::with_capacity(trajectory.len());
    let mut targets = Vec::with_capacity(trajectory.len());
    for t in trajectory {
        let pred = rk4_step(&t.state, &t.input, &t.disturbance_estimate, dt, params)?;
        let r_world = (t.next.velocity - pred.velocity) / dt;
        features.push(rotate_inverse_unchecked(&t.state.attitude, &t.state.velocity));
        targets.push(rotate_inverse_unchecked(&t.state.attitude, &r_world));
    }
    Ok((features, targets))
}

pub fn collect_training(
    trajectory: &[TrainingTuple],
    params: &QuadParams,
    dt: f64,
    max_points: usize,
    downsample: Downsample,
) -> Result<GpDataset> {
    let (features, targets) = residual_targets(trajectory, params, dt)?;
    let idx = farthest_point_indices(&features, max_points);
    let mut ds = GpDataset::new(max_points);
    match downsample {
        Downsample::FarthestPoint => {
            for &i in &idx {
                ds.push(features[i], targets[i])?;
            }
        }
        Downsample::CellMean => {
            let mut sum_z = vec![Vector3::zeros(); idx.len()];
            let mut sum_y = vec![Vector3::zeros(); idx.len()];
            let mut count = vec![0usize; idx.len()];
            for (z, y) in features.iter().zip(&targets) {
                let cell = (0..idx.len())
                    .min_by(|&a, &b| {
                        (z - features[idx[a]])
                            .norm_squared()
                            .total_cmp(&(z - features[idx[b]]).norm_squared())
                    })
                    .expect("nonempty");
                sum_z[cell] += z;
                sum_y[cell] += y;
                count[cell] += 1;
            }
            for c in 0..idx.len() {
                // every center is its own nearest sample, so counts are ≥ 1
                let n = count[c].max(1) as f64;
                ds.push(sum_z[c] / n, sum_y[c] / n)?;
            }
        }
    }
    Ok(ds)
}
