//! Appearance model: one multivariate Gaussian per class on log-intensities,
//! plus an additive bias field spanned by separable cosine basis functions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::volio::{MultiContrastVolume, VoxelGrid};

/// Relative eigenvalue bound below which a covariance is not accepted as SPD.
const SPD_RELATIVE_EIGEN: f64 = 1e-12;

/// Covariance floor as a fraction of the mean per-contrast data variance.
pub const COVARIANCE_FLOOR_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GaussianParams {
    pub fn new(means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let g = Self { means, covs };
        g.validate()?;
        Ok(g)
    }

    /// Scalar (single-contrast) parameters from means and variances.
    pub fn scalar(means: &[f64], variances: &[f64]) -> Result<Self> {
        Self::new(
            means.iter().map(|&m| DVector::from_element(1, m)).collect(),
            variances
                .iter()
                .map(|&v| DMatrix::from_element(1, 1, v))
                .collect(),
        )
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn n_contrasts(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.covs.len() {
            return Err(Error::Shape(
                "means and covariances differ in class count".into(),
            ));
        }
        let n = self.n_contrasts();
        for (k, (m, s)) in self.means.iter().zip(&self.covs).enumerate() {
            if m.len() != n || s.nrows() != n || s.ncols() != n {
                return Err(Error::Shape(format!(
                    "class {k} has inconsistent dimensions"
                )));
            }
            if m.iter().chain(s.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NotSpd { class: k });
            }
            check_spd(s).map_err(|_| Error::NotSpd { class: k })?;
        }
        Ok(())
    }
}

pub(crate) fn check_spd(s: &DMatrix<f64>) -> Result<()> {
    let n = s.nrows();
    if (s - s.transpose()).amax() > 1e-9 * s.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::NotSpd { class: 0 });
    }
    let eig = s.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let trace = s.trace();
    if !(trace > 0.0) || !(min > SPD_RELATIVE_EIGEN * trace / n as f64) {
        return Err(Error::NotSpd { class: 0 });
    }
    Ok(())
}

/// Per-axis polynomial orders of the cosine basis.
pub type BasisOrders = [usize; 3];

pub fn n_basis(orders: BasisOrders) -> usize {
    orders.iter().map(|o| o + 1).product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    /// `N × P` coefficients; row `n` is the expansion for contrast `n`.
    pub coeffs: DMatrix<f64>,
    pub orders: BasisOrders,
}

impl BiasField {
    pub fn zeros(n_contrasts: usize, orders: BasisOrders) -> Self {
        Self {
            coeffs: DMatrix::zeros(n_contrasts, n_basis(orders)),
            orders,
        }
    }

    pub fn n_basis(&self) -> usize {
        self.coeffs.ncols()
    }
}

/// Basis functions evaluated on a grid, voxel-major (`dims × P`).
#[derive(Debug, Clone)]
pub struct BasisTable {
    pub orders: BasisOrders,
    pub n_basis: usize,
    pub values: Vec<f64>,
}

impl BasisTable {
    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.values[voxel * self.n_basis..(voxel + 1) * self.n_basis]
    }
}

fn axis_cosines(extent: usize, order: usize) -> Vec<Vec<f64>> {
    (0..=order)
        .map(|a| {
            (0..extent)
                .map(|x| {
                    if a == 0 {
                        1.0
                    } else {
                        (std::f64::consts::PI * a as f64 * (x as f64 + 0.5) / extent as f64).cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Separable DCT-II basis; function `p = a + (ox+1)(b + (oy+1)c)` is
/// `cos(πa(x+½)/dx)·cos(πb(y+½)/dy)·cos(πc(z+½)/dz)`, and `p = 0` is the
/// constant 1.
pub fn eval_basis(grid: &VoxelGrid, orders: BasisOrders) -> BasisTable {
    eval_basis_at(grid, orders, &(0..grid.n_voxels()).collect::<Vec<_>>())
}

pub(crate) fn eval_basis_at(grid: &VoxelGrid, orders: BasisOrders, voxels: &[usize]) -> BasisTable {
    let cx = axis_cosines(grid.dims[0], orders[0]);
    let cy = axis_cosines(grid.dims[1], orders[1]);
    let cz = axis_cosines(grid.dims[2], orders[2]);
    let p = n_basis(orders);
    let mut values = Vec::with_capacity(voxels.len() * p);
    for &v in voxels {
        let [x, y, z] = grid.coords(v);
        for c in 0..=orders[2] {
            for b in 0..=orders[1] {
                let yz = cy[b][y] * cz[c][z];
                for a in 0..=orders[0] {
                    values.push(cx[a][x] * yz);
                }
            }
        }
    }
    BasisTable {
        orders,
        n_basis: p,
        values,
    }
}

/// Masked log-intensities with their basis rows, the working set of every fit.
#[derive(Debug, Clone)]
pub struct VoxelData {
    pub grid: VoxelGrid,
    /// Grid indices of the masked voxels.
    pub voxels: Vec<usize>,
    pub n_contrasts: usize,
    /// Row-major `masked × N` log-intensities.
    pub values: Vec<f64>,
    pub basis: BasisTable,
    /// Lower bound on covariance eigenvalues after an M-step.
    pub covariance_floor: f64,
}

impl VoxelData {
    pub fn new(vol: &MultiContrastVolume, orders: BasisOrders) -> Result<Self> {
        if !vol.log_transformed {
            return Err(Error::State(
                "appearance model expects log-transformed intensities".into(),
            ));
        }
        vol.validate()?;
        let voxels = vol.masked_indices();
        if voxels.is_empty() {
            return Err(Error::Validation("mask is empty".into()));
        }
        let n = vol.n_contrasts;
        let mut values = Vec::with_capacity(voxels.len() * n);
        for &v in &voxels {
            for c in 0..n {
                values.push(vol.value(v, c) as f64);
            }
        }
        let basis = eval_basis_at(&vol.grid, orders, &voxels);
        let mut vd = Self {
            grid: vol.grid.clone(),
            voxels,
            n_contrasts: n,
            values,
            basis,
            covariance_floor: 0.0,
        };
        vd.covariance_floor = COVARIANCE_FLOOR_FRACTION * vd.mean_contrast_variance();
        Ok(vd)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_contrasts..(i + 1) * self.n_contrasts]
    }

    fn mean_contrast_variance(&self) -> f64 {
        let n = self.n_contrasts;
        let count = self.len() as f64;
        let mut total = 0.0;
        for c in 0..n {
            let mean = (0..self.len()).map(|i| self.values[i * n + c]).sum::<f64>() / count;
            let var = (0..self.len())
                .map(|i| (self.values[i * n + c] - mean).powi(2))
                .sum::<f64>()
                / count;
            total += var;
        }
        total / n as f64
    }

    /// Bias offsets `C φ_i`, row-major `masked × N`.
    pub fn bias_offsets(&self, bias: &BiasField) -> Result<Vec<f64>> {
        if bias.coeffs.nrows() != self.n_contrasts || bias.n_basis() != self.basis.n_basis {
            return Err(Error::Shape(format!(
                "bias field is {}x{}, data needs {}x{}",
                bias.coeffs.nrows(),
                bias.n_basis(),
                self.n_contrasts,
                self.basis.n_basis
            )));
        }
        let n = self.n_contrasts;
        let mut out = vec![0.0; self.len() * n];
        for i in 0..self.len() {
            let phi = self.basis.row(i);
            for c in 0..n {
                let mut s = 0.0;
                for (p, &f) in phi.iter().enumerate() {
                    s += bias.coeffs[(c, p)] * f;
                }
                out[i * n + c] = s;
            }
        }
        Ok(out)
    }

    /// Bias-corrected samples `d_i - C φ_i`.
    pub fn corrected(&self, bias: &BiasField) -> Result<Vec<f64>> {
        let mut out = self.bias_offsets(bias)?;
        for (o, v) in out.iter_mut().zip(&self.values) {
            *o = v - *o;
        }
        Ok(out)
    }
}

/// A class Gaussian prepared for repeated density evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ClassDensity {
    mean: Vec<f64>,
    /// Row-major inverse of the lower Cholesky factor.
    chol_inv: Vec<f64>,
    log_norm: f64,
}

impl ClassDensity {
    pub(crate) fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, class: usize) -> Result<Self> {
        let n = mean.len();
        let chol = cov.clone().cholesky().ok_or(Error::NotSpd { class })?;
        let l = chol.l();
        let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        let l_inv = l.try_inverse().ok_or(Error::NotSpd { class })?;
        let mut chol_inv = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                chol_inv[r * n + c] = l_inv[(r, c)];
            }
        }
        Ok(Self {
            mean: mean.iter().copied().collect(),
            chol_inv,
            log_norm: -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    /// Log density of `x` (already bias corrected).
    #[inline]
    pub(crate) fn log_pdf(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        if n == 1 {
            let z = (x[0] - self.mean[0]) * self.chol_inv[0];
            return self.log_norm - 0.5 * z * z;
        }
        let mut q = 0.0;
        for r in 0..n {
            let mut z = 0.0;
            for c in 0..=r {
                z += self.chol_inv[r * n + c] * (x[c] - self.mean[c]);
            }
            q += z * z;
        }
        self.log_norm - 0.5 * q
    }
}

pub(crate) fn densities(gauss: &GaussianParams) -> Result<Vec<ClassDensity>> {
    gauss
        .means
        .iter()
        .zip(&gauss.covs)
        .enumerate()
        .map(|(k, (m, s))| {
            check_spd(s).map_err(|_| Error::NotSpd { class: k })?;
            ClassDensity::new(m, s, k)
        })
        .collect()
}

/// Masked-voxel class log-likelihoods, row-major `masked × K`.
pub fn log_likelihoods(
    vd: &VoxelData,
    gauss: &GaussianParams,
    bias: &BiasField,
) -> Result<Vec<f64>> {
    if gauss.n_contrasts() != vd.n_contrasts {
        return Err(Error::Shape(
            "Gaussian dimension differs from contrast count".into(),
        ));
    }
    let dens = densities(gauss)?;
    let corrected = vd.corrected(bias)?;
    let n = vd.n_contrasts;
    let k = dens.len();
    let mut out = vec![0.0; vd.len() * k];
    use rayon::prelude::*;
    out.par_chunks_mut(k * CHUNK)
        .zip(corrected.par_chunks(n * CHUNK))
        .for_each(|(rows, xs)| {
            for (row, x) in rows.chunks_exact_mut(k).zip(xs.chunks_exact(n)) {
                for (c, d) in dens.iter().enumerate() {
                    row[c] = d.log_pdf(x);
                }
            }
        });
    Ok(out)
}

/// Fixed work-unit size for parallel loops; reductions combine chunk partials
/// in chunk order so results do not depend on the thread count.
pub(crate) const CHUNK: usize = 4096;

/// Normalizes `loglik + ln prior` per voxel. Returns the posteriors and the
/// data log-likelihood `Σ_i log Σ_k N_ik p_ik`. `prior` is row-major
/// `masked × K`.
pub fn posteriors(
    loglik: &[f64],
    prior: &[f64],
    k: usize,
    vd_voxels: &[usize],
) -> Result<(Vec<f64>, f64)> {
    use rayon::prelude::*;
    let mut resp = vec![0.0; loglik.len()];
    let partial: Vec<(f64, Vec<usize>)> = resp
        .par_chunks_mut(k * CHUNK)
        .zip(loglik.par_chunks(k * CHUNK))
        .zip(prior.par_chunks(k * CHUNK))
        .enumerate()
        .map(|(chunk, ((out, ll), pr))| {
            let mut total = 0.0;
            let mut bad = Vec::new();
            for (row, ((o, l), p)) in out
                .chunks_exact_mut(k)
                .zip(ll.chunks_exact(k))
                .zip(pr.chunks_exact(k))
                .enumerate()
            {
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    let v = if p[c] > 0.0 {
                        l[c] + p[c].ln()
                    } else {
                        f64::NEG_INFINITY
                    };
                    o[c] = v;
                    max = max.max(v);
                }
                if !max.is_finite() {
                    bad.push(vd_voxels[chunk * CHUNK + row]);
                    continue;
                }
                let mut sum = 0.0;
                for v in o.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in o.iter_mut() {
                    *v /= sum;
                }
                total += max + sum.ln();
            }
            (total, bad)
        })
        .collect();
    let mut total = 0.0;
    let mut bad = Vec::new();
    for (t, b) in partial {
        total += t;
        bad.extend(b);
    }
    if !bad.is_empty() {
        return Err(Error::DegenerateVoxels { voxels: bad });
    }
    Ok((resp, total))
}

/// Weighted sufficient statistics of one class on bias-corrected data.
#[derive(Debug, Clone)]
pub struct ClassStats {
    /// Total responsibility n_k.
    pub weight: f64,
    /// Weighted mean of the corrected samples (zero when `weight` is 0).
    pub mean: DVector<f64>,
    /// Unnormalized weighted scatter about `mean`.
    pub scatter: DMatrix<f64>,
}

pub fn class_statistics(
    vd: &VoxelData,
    resp: &[f64],
    k: usize,
    bias: &BiasField,
) -> Result<Vec<ClassStats>> {
    let corrected = vd.corrected(bias)?;
    let n = vd.n_contrasts;
    let mut stats = Vec::with_capacity(k);
    for c in 0..k {
        let mut weight = 0.0;
        let mut sum = DVector::zeros(n);
        for i in 0..vd.len() {
            let w = resp[i * k + c];
            weight += w;
            for a in 0..n {
                sum[a] += w * corrected[i * n + a];
            }
        }
        let mean = if weight > 0.0 {
            sum / weight
        } else {
            DVector::zeros(n)
        };
        let mut scatter = DMatrix::zeros(n, n);
        if weight > 0.0 {
            for i in 0..vd.len() {
                let w = resp[i * k + c];
                if w == 0.0 {
                    continue;
                }
                for a in 0..n {
                    let da = corrected[i * n + a] - mean[a];
                    for b in 0..=a {
                        scatter[(a, b)] += w * da * (corrected[i * n + b] - mean[b]);
                    }
                }
            }
            for a in 0..n {
                for b in 0..a {
                    scatter[(b, a)] = scatter[(a, b)];
                }
            }
        }
        stats.push(ClassStats {
            weight,
            mean,
            scatter,
        });
    }
    Ok(stats)
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`. This is
/// the maximizer of a Gaussian log-likelihood over covariances `Σ ⪰ floor·I`.
pub fn floor_covariance(s: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (&s + s.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor)));
    let out = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Weighted maximum-likelihood Gaussians from responsibilities, covariances
/// floored so that no eigenvalue falls below `floor`.
pub fn gaussians_ml_from_stats(stats: &[ClassStats], floor: f64) -> Result<GaussianParams> {
    let mut means = Vec::with_capacity(stats.len());
    let mut covs = Vec::with_capacity(stats.len());
    for (k, s) in stats.iter().enumerate() {
        if !(s.weight > 0.0) {
            return Err(Error::EmptyClass { class: k });
        }
        means.push(s.mean.clone());
        covs.push(floor_covariance(&s.scatter / s.weight, floor));
    }
    GaussianParams::new(means, covs)
}

pub fn update_gaussians_ml_data(
    vd: &VoxelData,
    resp: &[f64],
    k: usize,
    bias: &BiasField,
) -> Result<GaussianParams> {
    gaussians_ml_from_stats(&class_statistics(vd, resp, k, bias)?, vd.covariance_floor)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BiasSolveInfo {
    /// Set when the normal matrix needed a ridge to be solvable.
    pub regularized: bool,
    pub relative_residual: f64,
}

/// Exact maximizer over the bias coefficients of the expected complete-data
/// log-likelihood, holding responsibilities and Gaussians fixed.
pub fn update_bias_field_data(
    vd: &VoxelData,
    resp: &[f64],
    gauss: &GaussianParams,
    orders: BasisOrders,
) -> Result<(BiasField, BiasSolveInfo)> {
    if orders != vd.basis.orders {
        return Err(Error::Shape(
            "bias orders differ from the evaluated basis".into(),
        ));
    }
    let n = vd.n_contrasts;
    let p = vd.basis.n_basis;
    let k = gauss.n_classes();
    let precisions: Vec<DMatrix<f64>> = gauss
        .covs
        .iter()
        .enumerate()
        .map(|(c, s)| s.clone().try_inverse().ok_or(Error::NotSpd { class: c }))
        .collect::<Result<_>>()?;
    let np = n * p;
    let mut normal = DMatrix::<f64>::zeros(np, np);
    let mut rhs = DVector::<f64>::zeros(np);
    let mut weight = vec![0.0; n * n];
    let mut target = vec![0.0; n];
    // Upper triangle of φφᵀ per voxel, reused across contrast blocks.
    let mut outer = vec![0.0; p * (p + 1) / 2];
    let mut block_acc = vec![vec![0.0; p * (p + 1) / 2]; n * (n + 1) / 2];
    for i in 0..vd.len() {
        weight.fill(0.0);
        target.fill(0.0);
        let d = vd.sample(i);
        for c in 0..k {
            let w = resp[i * k + c];
            if w == 0.0 {
                continue;
            }
            let lam = &precisions[c];
            for a in 0..n {
                let mut t = 0.0;
                for b in 0..n {
                    weight[a * n + b] += w * lam[(a, b)];
                    t += lam[(a, b)] * (d[b] - gauss.means[c][b]);
                }
                target[a] += w * t;
            }
        }
        let phi = vd.basis.row(i);
        let mut idx = 0;
        for q in 0..p {
            for r in q..p {
                outer[idx] = phi[q] * phi[r];
                idx += 1;
            }
        }
        let mut blk = 0;
        for a in 0..n {
            for b in a..n {
                let w = weight[a * n + b];
                if w != 0.0 {
                    for (acc, o) in block_acc[blk].iter_mut().zip(&outer) {
                        *acc += w * o;
                    }
                }
                blk += 1;
            }
            for q in 0..p {
                rhs[a * p + q] += target[a] * phi[q];
            }
        }
    }
    let mut blk = 0;
    for a in 0..n {
        for b in a..n {
            let mut idx = 0;
            for q in 0..p {
                for r in q..p {
                    let v = block_acc[blk][idx];
                    normal[(a * p + q, b * p + r)] = v;
                    normal[(a * p + r, b * p + q)] = v;
                    normal[(b * p + q, a * p + r)] = v;
                    normal[(b * p + r, a * p + q)] = v;
                    idx += 1;
                }
            }
            blk += 1;
        }
    }
    let (solution, info) = solve_spd(&normal, &rhs)?;
    let coeffs = DMatrix::from_fn(n, p, |a, q| solution[a * p + q]);
    Ok((BiasField { coeffs, orders }, info))
}

/// Cholesky solve; on failure retries with a ridge of 1e-10 · mean diagonal.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, BiasSolveInfo)> {
    let residual = |x: &DVector<f64>| (a * x - b).norm() / b.norm().max(f64::MIN_POSITIVE);
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        let r = residual(&x);
        if x.iter().all(|v| v.is_finite()) && r < 1e-8 {
            return Ok((
                x,
                BiasSolveInfo {
                    regularized: false,
                    relative_residual: r,
                },
            ));
        }
    }
    let scale = a.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let ridge = a + DMatrix::identity(a.nrows(), a.ncols()) * (1e-10 * scale);
    let chol = ridge
        .cholesky()
        .ok_or_else(|| Error::Singular("bias normal equations".into()))?;
    let x = chol.solve(b);
    let r = residual(&x);
    Ok((
        x,
        BiasSolveInfo {
            regularized: true,
            relative_residual: r,
        },
    ))
}

/// Exponent applied to the prior rows (then renormalized) before taking the
/// initial moments. Plain prior weights let a small class that mostly overlaps
/// a large one start, and stay, on top of it.
pub const INIT_PRIOR_EXPONENT: f64 = 4.0;

/// Moments weighted by the sharpened prior: initial Gaussians, zero bias.
pub fn initialize_appearance_data(
    vd: &VoxelData,
    prior: &[f64],
    k: usize,
    orders: BasisOrders,
) -> Result<(GaussianParams, BiasField)> {
    let bias = BiasField::zeros(vd.n_contrasts, orders);
    let sharp: Vec<f64> = prior
        .chunks_exact(k)
        .flat_map(|row| {
            let w: Vec<f64> = row.iter().map(|p| p.powf(INIT_PRIOR_EXPONENT)).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(move |x| x / total)
        })
        .collect();
    let gauss = update_gaussians_ml_data(vd, &sharp, k, &bias)?;
    Ok((gauss, bias))
}

// ---------------------------------------------------------------------------
// Whole-grid conveniences

fn masked_rows(vol: &MultiContrastVolume, full: &[f64], k: usize) -> Result<Vec<f64>> {
    if full.len() != vol.grid.n_voxels() * k {
        return Err(Error::Shape(format!(
            "expected a dims x {k} array ({} values), got {}",
            vol.grid.n_voxels() * k,
            full.len()
        )));
    }
    let mut out = Vec::with_capacity(vol.n_masked() * k);
    for v in 0..vol.grid.n_voxels() {
        if vol.mask[v] {
            out.extend_from_slice(&full[v * k..(v + 1) * k]);
        }
    }
    Ok(out)
}

fn scatter_rows(vd: &VoxelData, rows: &[f64], k: usize) -> Vec<f64> {
    let mut full = vec![0.0; vd.grid.n_voxels() * k];
    for (i, &v) in vd.voxels.iter().enumerate() {
        full[v * k..(v + 1) * k].copy_from_slice(&rows[i * k..(i + 1) * k]);
    }
    full
}

/// Per-voxel class log-densities over the whole grid (`dims × K`); rows
/// outside the mask are zero.
pub fn voxel_log_likelihoods(
    vol: &MultiContrastVolume,
    gauss: &GaussianParams,
    bias: &BiasField,
) -> Result<Vec<f64>> {
    let vd = VoxelData::new(vol, bias.orders)?;
    let ll = log_likelihoods(&vd, gauss, bias)?;
    Ok(scatter_rows(&vd, &ll, gauss.n_classes()))
}

/// Posterior class probabilities over the whole grid.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub n_classes: usize,
    /// Voxel-major `dims × K`; rows outside the mask are zero.
    pub values: Vec<f64>,
}

pub fn responsibilities(
    vol: &MultiContrastVolume,
    gauss: &GaussianParams,
    bias: &BiasField,
    prior: &[f64],
) -> Result<Responsibilities> {
    let k = gauss.n_classes();
    let vd = VoxelData::new(vol, bias.orders)?;
    let prior = masked_rows(vol, prior, k)?;
    let ll = log_likelihoods(&vd, gauss, bias)?;
    let (resp, _) = posteriors(&ll, &prior, k, &vd.voxels)?;
    Ok(Responsibilities {
        n_classes: k,
        values: scatter_rows(&vd, &resp, k),
    })
}

pub fn update_gaussians_ml(
    vol: &MultiContrastVolume,
    resp: &Responsibilities,
    bias: &BiasField,
) -> Result<GaussianParams> {
    let vd = VoxelData::new(vol, bias.orders)?;
    let rows = masked_rows(vol, &resp.values, resp.n_classes)?;
    update_gaussians_ml_data(&vd, &rows, resp.n_classes, bias)
}

pub fn update_bias_field(
    vol: &MultiContrastVolume,
    resp: &Responsibilities,
    gauss: &GaussianParams,
    basis: &BasisTable,
) -> Result<(BiasField, BiasSolveInfo)> {
    let vd = VoxelData::new(vol, basis.orders)?;
    let rows = masked_rows(vol, &resp.values, resp.n_classes)?;
    update_bias_field_data(&vd, &rows, gauss, basis.orders)
}

// ---------------------------------------------------------------------------
// PARAMS files

/// Renders `PARAMS 1`: `MU k v1..vN` and `SIGMA k <N² row-major>` per class
/// (1-based k), `ORDERS ox oy oz` for the basis, then `BIAS N P` followed by
/// the row-major coefficients.
pub fn format_params(gauss: &GaussianParams, bias: &BiasField) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("PARAMS 1\n");
    let n = gauss.n_contrasts();
    for k in 0..gauss.n_classes() {
        write!(out, "MU {}", k + 1).unwrap();
        for v in gauss.means[k].iter() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
        write!(out, "SIGMA {}", k + 1).unwrap();
        for r in 0..n {
            for c in 0..n {
                write!(out, " {}", gauss.covs[k][(r, c)]).unwrap();
            }
        }
        out.push('\n');
    }
    let (rows, cols) = bias.coeffs.shape();
    writeln!(
        out,
        "ORDERS {} {} {}",
        bias.orders[0], bias.orders[1], bias.orders[2]
    )
    .unwrap();
    write!(out, "BIAS {rows} {cols}").unwrap();
    for r in 0..rows {
        for c in 0..cols {
            write!(out, " {}", bias.coeffs[(r, c)]).unwrap();
        }
    }
    out.push('\n');
    out
}

pub fn parse_params(text: &str) -> Result<(GaussianParams, BiasField)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("PARAMS 1") {
        return Err(Error::format("PARAMS", "missing `PARAMS 1` line"));
    }
    let num = |s: &str, field: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::format(field, format!("cannot parse `{s}`")))
    };
    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut bias = None;
    let mut orders: Option<BasisOrders> = None;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "MU" | "SIGMA" => {
                let field = tokens[0];
                let k: usize = tokens
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(field, "missing class index"))?;
                let vals: Vec<f64> = tokens[2..]
                    .iter()
                    .map(|s| num(s, field))
                    .collect::<Result<_>>()?;
                if field == "MU" {
                    if k != means.len() + 1 {
                        return Err(Error::format("MU", format!("class {k} out of order")));
                    }
                    means.push(DVector::from_vec(vals));
                } else {
                    if k != covs.len() + 1 {
                        return Err(Error::format("SIGMA", format!("class {k} out of order")));
                    }
                    let n = (vals.len() as f64).sqrt().round() as usize;
                    if n * n != vals.len() {
                        return Err(Error::format("SIGMA", "entry count is not a square"));
                    }
                    covs.push(DMatrix::from_row_slice(n, n, &vals));
                }
            }
            "ORDERS" => {
                let o: Vec<usize> = tokens[1..]
                    .iter()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::format("ORDERS", format!("cannot parse `{s}`")))
                    })
                    .collect::<Result<_>>()?;
                orders = Some(
                    <[usize; 3]>::try_from(o)
                        .map_err(|_| Error::format("ORDERS", "expected 3 orders"))?,
                );
            }
            "BIAS" => {
                let dims: Vec<usize> = tokens[1..3.min(tokens.len())]
                    .iter()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::format("BIAS", format!("cannot parse `{s}`")))
                    })
                    .collect::<Result<_>>()?;
                if dims.len() != 2 {
                    return Err(Error::format("BIAS", "expected `BIAS N P ...`"));
                }
                let (rows, cols) = (dims[0], dims[1]);
                let orders = orders.ok_or_else(|| Error::format("ORDERS", "must precede BIAS"))?;
                if n_basis(orders) != cols {
                    return Err(Error::format("BIAS", "basis count does not match orders"));
                }
                let vals: Vec<f64> = tokens[3..]
                    .iter()
                    .map(|s| num(s, "BIAS"))
                    .collect::<Result<_>>()?;
                if vals.len() != rows * cols {
                    return Err(Error::format("BIAS", "coefficient count mismatch"));
                }
                bias = Some(BiasField {
                    coeffs: DMatrix::from_row_slice(rows, cols, &vals),
                    orders,
                });
            }
            other => return Err(Error::format(other, "unknown PARAMS record")),
        }
    }
    let bias = bias.ok_or_else(|| Error::format("BIAS", "missing"))?;
    let gauss = GaussianParams::new(means, covs)?;
    if bias.coeffs.nrows() != gauss.n_contrasts() {
        return Err(Error::format(
            "BIAS",
            "row count differs from contrast count",
        ));
    }
    Ok((gauss, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn log_volume(grid: VoxelGrid, n: usize, data: Vec<f32>) -> MultiContrastVolume {
        let mut v = MultiContrastVolume::new(grid, n, data).unwrap();
        v.log_transformed = true;
        v
    }

    #[test]
    fn basis_shapes_and_orthogonality() {
        let grid = VoxelGrid::new([6, 5, 4], [1.0; 3]).unwrap();
        let b = eval_basis(&grid, [0, 0, 0]);
        assert_eq!(b.n_basis, 1);
        assert!(b.values.iter().all(|&v| v == 1.0));
        assert_eq!(n_basis([2, 1, 0]), 6);

        let b = eval_basis(&grid, [2, 2, 2]);
        let p = b.n_basis;
        let mut gram = vec![0.0; p * p];
        for v in 0..grid.n_voxels() {
            let row = b.row(v);
            for q in 0..p {
                for r in 0..p {
                    gram[q * p + r] += row[q] * row[r];
                }
            }
        }
        for q in 0..p {
            for r in 0..p {
                if q != r {
                    let rel = gram[q * p + r].abs() / (gram[q * p + q] * gram[r * p + r]).sqrt();
                    assert!(rel < 1e-10, "{q},{r}: {rel}");
                }
            }
        }
    }

    #[test]
    fn scalar_log_densities() {
        let grid = VoxelGrid::new([2, 1, 1], [1.0; 3]).unwrap();
        let vol = log_volume(grid, 1, vec![0.0, 3.0]);
        let bias = BiasField::zeros(1, [0, 0, 0]);
        let g = GaussianParams::scalar(&[0.0, 1.0], &[1.0, 4.0]).unwrap();
        let ll = voxel_log_likelihoods(&vol, &g, &bias).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll[0] + half_ln_2pi).abs() < 1e-14);
        let expected = -0.5 * (8.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((ll[3] - expected).abs() < 1e-14);
    }

    #[test]
    fn dc_shift_cancels_in_likelihood() {
        let grid = VoxelGrid::new([3, 2, 1], [1.0; 3]).unwrap();
        let data: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let vol = log_volume(grid.clone(), 2, data.clone());
        let shifted = log_volume(grid, 2, data.iter().map(|v| v + 0.75).collect());
        let g = GaussianParams::new(
            vec![
                DVector::from_vec(vec![0.1, -0.2]),
                DVector::from_vec(vec![0.5, 0.4]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
                DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.9]),
            ],
        )
        .unwrap();
        let bias = BiasField::zeros(2, [1, 1, 0]);
        let mut moved = bias.clone();
        moved.coeffs[(0, 0)] += 0.75;
        moved.coeffs[(1, 0)] += 0.75;
        let a = voxel_log_likelihoods(&vol, &g, &bias).unwrap();
        let b = voxel_log_likelihoods(&shifted, &g, &moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let g = GaussianParams {
            means: vec![DVector::from_vec(vec![0.0, 0.0])],
            covs: vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])],
        };
        assert!(matches!(g.validate(), Err(Error::NotSpd { class: 0 })));
    }

    #[test]
    fn responsibilities_follow_prior_when_likelihoods_tie() {
        let grid = VoxelGrid::new([1, 1, 1], [1.0; 3]).unwrap();
        let vol = log_volume(grid, 1, vec![0.5]);
        let g = GaussianParams::scalar(&[0.5, 0.5], &[1.0, 1.0]).unwrap();
        let bias = BiasField::zeros(1, [0, 0, 0]);
        let r = responsibilities(&vol, &g, &bias, &[0.8, 0.2]).unwrap();
        assert!((r.values[0] - 0.8).abs() < 1e-15 && (r.values[1] - 0.2).abs() < 1e-15);
        let r = responsibilities(&vol, &g, &bias, &[1.0, 0.0]).unwrap();
        assert_eq!(r.values[1], 0.0);
    }

    #[test]
    fn zero_prior_everywhere_is_degenerate() {
        let grid = VoxelGrid::new([2, 1, 1], [1.0; 3]).unwrap();
        let vol = log_volume(grid, 1, vec![0.5, 0.1]);
        let g = GaussianParams::scalar(&[0.5, 0.5], &[1.0, 1.0]).unwrap();
        let bias = BiasField::zeros(1, [0, 0, 0]);
        let err = responsibilities(&vol, &g, &bias, &[1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateVoxels { voxels } if voxels == vec![1]));
    }

    #[test]
    fn three_class_responsibilities_match_direct_normalization() {
        let mut rng = SplitMix64::new(3);
        let grid = VoxelGrid::new([5, 1, 1], [1.0; 3]).unwrap();
        let data: Vec<f32> = (0..5).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let vol = log_volume(grid, 1, data.clone());
        let means = [-1.0, 0.2, 1.3];
        let vars = [0.3, 0.8, 0.5];
        let g = GaussianParams::scalar(&means, &vars).unwrap();
        let prior: Vec<f64> = (0..5)
            .flat_map(|_| {
                let a = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
                let s: f64 = a.iter().sum();
                a.map(|v| v / s)
            })
            .collect();
        let r = responsibilities(&vol, &g, &BiasField::zeros(1, [0, 0, 0]), &prior).unwrap();
        for i in 0..5 {
            let d = data[i] as f64;
            let joint: Vec<f64> = (0..3)
                .map(|k| {
                    (-(d - means[k]).powi(2) / (2.0 * vars[k])).exp()
                        / (2.0 * std::f64::consts::PI * vars[k]).sqrt()
                        * prior[i * 3 + k]
                })
                .collect();
            let z: f64 = joint.iter().sum();
            for k in 0..3 {
                assert!((r.values[i * 3 + k] - joint[k] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ml_update_single_class_is_sample_moments() {
        let grid = VoxelGrid::new([4, 1, 1], [1.0; 3]).unwrap();
        let vol = log_volume(grid, 2, vec![1.0, 2.0, 3.0, 6.0, 0.0, 1.0, 0.0, 3.0]);
        let resp = Responsibilities {
            n_classes: 1,
            values: vec![1.0; 4],
        };
        let bias = BiasField::zeros(2, [0, 0, 0]);
        let g = update_gaussians_ml(&vol, &resp, &bias).unwrap();
        assert_eq!(g.means[0].as_slice(), &[3.0, 1.0]);
        let vd = VoxelData::new(&vol, [0, 0, 0]).unwrap();
        assert!(vd.covariance_floor < 1.0);
        // Biased (1/n) covariance of x = (1,2,3,6), y = (0,1,0,3); both
        // eigenvalues sit well above the floor.
        let cov = [3.5, 2.0, 2.0, 1.5];
        for (i, c) in cov.iter().enumerate() {
            assert!((g.covs[0].as_slice()[i] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn ml_update_two_clusters_and_floor() {
        let grid = VoxelGrid::new([5, 1, 1], [1.0; 3]).unwrap();
        let vol = log_volume(grid, 1, vec![1.0, 1.2, 0.8, 5.0, 5.5]);
        let resp = Responsibilities {
            n_classes: 3,
            values: vec![1., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 1.],
        };
        let bias = BiasField::zeros(1, [0, 0, 0]);
        let g = update_gaussians_ml(&vol, &resp, &bias).unwrap();
        assert!((g.means[0][0] - 1.0).abs() < 1e-6);
        assert!((g.means[1][0] - 5.0).abs() < 1e-6);
        let vd = VoxelData::new(&vol, [0, 0, 0]).unwrap();
        assert_eq!(g.covs[1][(0, 0)], vd.covariance_floor);
        assert!(vd.covariance_floor > 0.0);

        let empty = Responsibilities {
            n_classes: 2,
            values: vec![1., 0., 1., 0., 1., 0., 1., 0., 1., 0.],
        };
        assert!(matches!(
            update_gaussians_ml(&vol, &empty, &bias),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    fn planted_field(grid: &VoxelGrid, orders: BasisOrders, coeffs: &[f64]) -> Vec<f64> {
        let basis = eval_basis(grid, orders);
        (0..grid.n_voxels())
            .map(|v| basis.row(v).iter().zip(coeffs).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn bias_update_recovers_planted_field() {
        let grid = VoxelGrid::new([12, 10, 8], [1.0; 3]).unwrap();
        let orders = [2, 2, 1];
        let p = n_basis(orders);
        let mut rng = SplitMix64::new(9);
        let mut coeffs: Vec<f64> = (0..p).map(|_| rng.uniform(-0.2, 0.2)).collect();
        coeffs[0] = 0.0;
        let field = planted_field(&grid, orders, &coeffs);
        let labels: Vec<usize> = (0..grid.n_voxels())
            .map(|v| usize::from(grid.coords(v)[0] >= 6))
            .collect();
        let means = [1.0, 3.0];
        let data: Vec<f32> = (0..grid.n_voxels())
            .map(|v| (means[labels[v]] + field[v] + rng.normal(0.0, 1e-4)) as f32)
            .collect();
        let vol = log_volume(grid.clone(), 1, data);
        let resp = Responsibilities {
            n_classes: 2,
            values: labels
                .iter()
                .flat_map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                .collect(),
        };
        let g = GaussianParams::scalar(&means, &[1e-8, 1e-8]).unwrap();
        let (bias, info) = update_bias_field(&vol, &resp, &g, &eval_basis(&grid, orders)).unwrap();
        assert!(!info.regularized);
        let recovered = planted_field(&grid, orders, bias.coeffs.as_slice());
        let range = field.iter().cloned().fold(f64::MIN, f64::max)
            - field.iter().cloned().fold(f64::MAX, f64::min);
        let err = recovered
            .iter()
            .zip(&field)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3 * range, "max error {err} vs range {range}");
    }

    #[test]
    fn bias_free_data_gives_near_zero_field_and_dc_shift_is_local() {
        let grid = VoxelGrid::new([8, 8, 4], [1.0; 3]).unwrap();
        let orders = [2, 2, 1];
        let mut rng = SplitMix64::new(4);
        let n = grid.n_voxels();
        let mut data = vec![0f32; 2 * n];
        let labels: Vec<usize> = (0..n)
            .map(|v| usize::from(grid.coords(v)[1] >= 4))
            .collect();
        let means = [[1.0, 2.0], [3.0, 0.5]];
        for v in 0..n {
            data[v] = means[labels[v]][0] as f32;
            data[n + v] = means[labels[v]][1] as f32;
        }
        let _ = &mut rng;
        let vol = log_volume(grid.clone(), 2, data.clone());
        let resp = Responsibilities {
            n_classes: 2,
            values: labels
                .iter()
                .flat_map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                .collect(),
        };
        let cov = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let g = GaussianParams::new(
            means
                .iter()
                .map(|m| DVector::from_vec(m.to_vec()))
                .collect(),
            vec![cov.clone(), cov],
        )
        .unwrap();
        let basis = eval_basis(&grid, orders);
        let (b0, _) = update_bias_field(&vol, &resp, &g, &basis).unwrap();
        assert!(b0.coeffs.amax() < 1e-6 * 3.0);

        let mut shifted = data;
        for v in &mut shifted[n..] {
            *v += 0.5;
        }
        let vol2 = log_volume(grid, 2, shifted);
        let (b1, _) = update_bias_field(&vol2, &resp, &g, &basis).unwrap();
        let diff = &b1.coeffs - &b0.coeffs;
        for r in 0..2 {
            for c in 0..diff.ncols() {
                let expected = if (r, c) == (1, 0) { 0.5 } else { 0.0 };
                assert!(
                    (diff[(r, c)] - expected).abs() < 1e-6,
                    "({r},{c}) {}",
                    diff[(r, c)]
                );
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let g = GaussianParams::new(
            vec![
                DVector::from_vec(vec![0.1, 1.0 / 3.0]),
                DVector::from_vec(vec![2.0, -1.0]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25]),
            ],
        )
        .unwrap();
        let mut bias = BiasField::zeros(2, [1, 0, 0]);
        bias.coeffs[(1, 1)] = -0.125;
        let text = format_params(&g, &bias);
        assert!(text.starts_with("PARAMS 1\nMU 1 0.1 0.3333333333333333\nSIGMA 1 1 0.1 0.1 2\n"));
        assert_eq!(parse_params(&text).unwrap(), (g, bias));
    }

    proptest! {
        #[test]
        fn responsibilities_are_simplexes(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let grid = VoxelGrid::new([4, 3, 2], [1.0; 3]).unwrap();
            let data: Vec<f32> = (0..24).map(|_| rng.uniform(-5.0, 5.0) as f32).collect();
            let vol = log_volume(grid.clone(), 1, data);
            let means: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let vars: Vec<f64> = (0..3).map(|_| rng.uniform(0.01, 2.0)).collect();
            let g = GaussianParams::scalar(&means, &vars).unwrap();
            let mut bias = BiasField::zeros(1, [1, 1, 1]);
            for v in bias.coeffs.iter_mut() { *v = rng.uniform(-0.5, 0.5); }
            let prior: Vec<f64> = (0..24).flat_map(|_| {
                let a = [rng.next_f64() + 1e-3, rng.next_f64(), rng.next_f64()];
                let s: f64 = a.iter().sum();
                a.map(|v| v / s)
            }).collect();
            let r = responsibilities(&vol, &g, &bias, &prior).unwrap();
            for row in r.values.chunks_exact(3) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
