//! Cross-sectional engine: alternate appearance updates and mesh deformation
//! to maximize the log-posterior of one scan, then label voxels by MAP.

use crate::applik::{
    self, class_statistics, gaussians_ml_from_stats, log_likelihoods, posteriors,
    update_bias_field_data, BasisOrders, BiasField, ClassStats, GaussianParams, VoxelData,
};
use crate::atlas::{self, locate, prior_at, MeshPositions, TetrahedralMesh, OUTSIDE};
use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsConfig};
use crate::longit::{LesionConfig, LesionPriorSource};
use crate::volio::{argmax, LabelVolume, MultiContrastVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Mesh stiffness 𝒦.
    pub kappa: f64,
    pub max_outer_sweeps: usize,
    /// Stop when the objective changes by less than this fraction of its magnitude.
    pub em_tolerance: f64,
    pub mesh: LbfgsConfig,
    pub bias_orders: BasisOrders,
    /// Line-search steps that shrink any tetrahedron below this fraction of its
    /// reference volume are rejected.
    pub min_volume_ratio: f64,
    pub seed: u64,
    pub lesion: Option<LesionConfig>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            max_outer_sweeps: 30,
            em_tolerance: 1e-6,
            mesh: LbfgsConfig::default(),
            bias_orders: [2, 2, 2],
            min_volume_ratio: 1e-9,
            seed: 0,
            lesion: None,
        }
    }
}

pub const DEFAULT_KAPPA: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct CrossFitResult {
    pub x_hat: MeshPositions,
    pub gauss: GaussianParams,
    pub bias: BiasField,
    /// Objective before the first sweep and after every sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Result of one mesh optimization.
#[derive(Debug, Clone)]
pub struct MeshStep {
    pub x: MeshPositions,
    /// Data term minus the deformation penalty at `x`.
    pub objective: f64,
    pub line_search_failed: bool,
}

/// Fitting context shared by the cross-sectional and longitudinal engines.
pub(crate) struct Engine<'a> {
    pub vd: &'a VoxelData,
    pub mesh: &'a TetrahedralMesh,
    /// Coordinates held fixed during mesh optimization.
    pub frozen: Vec<[bool; 3]>,
    pub lesion: Option<&'a LesionConfig>,
    pub min_volume_ratio: f64,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        vd: &'a VoxelData,
        mesh: &'a TetrahedralMesh,
        cfg: &'a FitConfig,
    ) -> Result<Self> {
        if let Some(lesion) = &cfg.lesion {
            lesion.validate(mesh.n_classes)?;
        }
        Ok(Self {
            vd,
            mesh,
            frozen: mesh.boundary_coordinates(),
            lesion: cfg.lesion.as_ref().filter(|l| l.enabled),
            min_volume_ratio: cfg.min_volume_ratio,
        })
    }

    /// Number of appearance classes (atlas classes plus an optional lesion class).
    pub(crate) fn n_app(&self) -> usize {
        self.mesh.n_classes + usize::from(self.lesion.is_some())
    }

    /// Extends an atlas prior row to the appearance classes.
    fn expand(&self, atlas_row: &[f64], out: &mut [f64]) {
        let k = self.mesh.n_classes;
        out[..k].copy_from_slice(atlas_row);
        let Some(lesion) = self.lesion else { return };
        match lesion.prior {
            LesionPriorSource::AtlasClass { class, fraction } => {
                let c = class as usize - 1;
                out[k] = fraction * atlas_row[c];
                out[c] = (1.0 - fraction) * atlas_row[c];
            }
            LesionPriorSource::Uniform(p) => {
                for v in &mut out[..k] {
                    *v *= 1.0 - p;
                }
                out[k] = p;
            }
        }
    }

    /// Masked-voxel prior rows over the appearance classes.
    pub(crate) fn prior_rows(&self, x: &MeshPositions) -> Result<Vec<f64>> {
        let ras = locate(x, self.mesh, &self.vd.grid)?;
        let k = self.mesh.n_classes;
        let ka = self.n_app();
        let mut row = vec![0.0; k];
        let mut out = vec![0.0; self.vd.len() * ka];
        for (i, &v) in self.vd.voxels.iter().enumerate() {
            prior_at(self.mesh, &ras, v, &mut row);
            self.expand(&row, &mut out[i * ka..(i + 1) * ka]);
        }
        Ok(out)
    }

    /// Posteriors and data log-likelihood `Σ_i log Σ_k N p`.
    pub(crate) fn e_step(
        &self,
        prior: &[f64],
        gauss: &GaussianParams,
        bias: &BiasField,
    ) -> Result<(Vec<f64>, f64)> {
        let ll = log_likelihoods(self.vd, gauss, bias)?;
        posteriors(&ll, prior, self.n_app(), &self.vd.voxels)
    }

    /// One appearance sweep: E-step, Gaussian M-step via `m_step`, bias update.
    pub(crate) fn appearance_sweep(
        &self,
        prior: &[f64],
        gauss: &GaussianParams,
        bias: &BiasField,
        m_step: impl Fn(&[ClassStats], &GaussianParams) -> Result<GaussianParams>,
    ) -> Result<(GaussianParams, BiasField)> {
        let (resp, _) = self.e_step(prior, gauss, bias)?;
        let stats = class_statistics(self.vd, &resp, self.n_app(), bias)?;
        let gauss = m_step(&stats, gauss)?;
        let (bias, _) = update_bias_field_data(self.vd, &resp, &gauss, bias.orders)?;
        Ok((gauss, bias))
    }

    /// Flat-prior M-step; a lesion class with no support keeps its parameters.
    pub(crate) fn ml_step(
        &self,
        stats: &[ClassStats],
        previous: &GaussianParams,
    ) -> Result<GaussianParams> {
        self.m_step_with(stats, previous, |_, s| {
            gaussians_ml_from_stats(std::slice::from_ref(s), self.vd.covariance_floor)
        })
    }

    pub(crate) fn m_step_with(
        &self,
        stats: &[ClassStats],
        previous: &GaussianParams,
        atlas_class: impl Fn(usize, &ClassStats) -> Result<GaussianParams>,
    ) -> Result<GaussianParams> {
        let mut means = Vec::with_capacity(stats.len());
        let mut covs = Vec::with_capacity(stats.len());
        for (k, s) in stats.iter().enumerate() {
            let is_lesion = k >= self.mesh.n_classes;
            let g = if is_lesion {
                if s.weight > LESION_MIN_WEIGHT {
                    gaussians_ml_from_stats(std::slice::from_ref(s), self.vd.covariance_floor)?
                } else {
                    GaussianParams {
                        means: vec![previous.means[k].clone()],
                        covs: vec![previous.covs[k].clone()],
                    }
                }
            } else {
                atlas_class(k, s).map_err(|e| match e {
                    Error::EmptyClass { .. } => Error::EmptyClass { class: k },
                    Error::NotSpd { .. } => Error::NotSpd { class: k },
                    other => other,
                })?
            };
            means.push(g.means[0].clone());
            covs.push(g.covs[0].clone());
        }
        GaussianParams::new(means, covs)
    }

    /// Per-voxel class likelihoods folded onto the atlas classes, normalized by
    /// the per-voxel maximum. Returns the folded table and `Σ_i log max_i`.
    fn folded_likelihoods(
        &self,
        gauss: &GaussianParams,
        bias: &BiasField,
    ) -> Result<(Vec<f64>, f64)> {
        let ll = log_likelihoods(self.vd, gauss, bias)?;
        let ka = self.n_app();
        let k = self.mesh.n_classes;
        let mut folded = vec![0.0; self.vd.len() * k];
        let mut offset = 0.0;
        for (i, row) in ll.chunks_exact(ka).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            offset += max;
            let out = &mut folded[i * k..(i + 1) * k];
            for c in 0..k {
                out[c] = (row[c] - max).exp();
            }
            if let Some(lesion) = self.lesion {
                let les = (row[k] - max).exp();
                match lesion.prior {
                    LesionPriorSource::AtlasClass { class, fraction } => {
                        let c = class as usize - 1;
                        out[c] = (1.0 - fraction) * out[c] + fraction * les;
                    }
                    LesionPriorSource::Uniform(p) => {
                        for v in out.iter_mut() {
                            *v = (1.0 - p) * *v + p * les;
                        }
                    }
                }
            }
        }
        Ok((folded, offset))
    }

    /// `-(data term) + kappa·U(x, reference)` and its gradient, or `None` when
    /// `x` is infeasible.
    fn mesh_cost(
        &self,
        x: &MeshPositions,
        reference: &MeshPositions,
        kappa: f64,
        folded: &[f64],
        offset: f64,
    ) -> Option<(f64, Vec<f64>)> {
        if !(atlas::min_volume_ratio(x, reference, self.mesh) > self.min_volume_ratio) {
            return None;
        }
        let ras = locate(x, self.mesh, &self.vd.grid).ok()?;
        let k = self.mesh.n_classes;
        let mut grad = vec![[0.0f64; 3]; self.mesh.n_nodes()];
        let mut data = offset;
        for (i, &v) in self.vd.voxels.iter().enumerate() {
            let lik = &folded[i * k..(i + 1) * k];
            let m = ras.owner[v];
            if m == OUTSIDE {
                if !(lik[0] > 0.0) {
                    return None;
                }
                data += lik[0].ln();
                continue;
            }
            let tet = &self.mesh.tets[m as usize];
            let lambda = &ras.bary[v];
            let mut a = [0.0; 4];
            for (j, &node) in tet.iter().enumerate() {
                let alphas = self.mesh.node_alphas(node);
                a[j] = alphas.iter().zip(lik).map(|(p, l)| p * l).sum();
            }
            let clamped = lambda.map(|l| l.max(0.0));
            let norm: f64 = clamped.iter().sum();
            let big_l: f64 = clamped.iter().zip(&a).map(|(l, a)| l * a).sum::<f64>() / norm;
            if !(big_l > 0.0) {
                return None;
            }
            data += big_l.ln();
            let inv = &ras.bary_grad[m as usize];
            let mut w = [0.0; 3];
            for j in 1..4 {
                let c = a[j] - a[0];
                for d in 0..3 {
                    w[d] += c * inv[j - 1][d];
                }
            }
            for (j, &node) in tet.iter().enumerate() {
                let s = lambda[j] / big_l;
                for d in 0..3 {
                    grad[node][d] += s * w[d];
                }
            }
        }
        let (energy, gx, _) =
            atlas::energy_and_gradients(x, reference, self.mesh, kappa, true, false).ok()?;
        for ((g, e), fixed) in grad.iter_mut().zip(&gx).zip(&self.frozen) {
            for d in 0..3 {
                g[d] = if fixed[d] { 0.0 } else { g[d] + e[d] };
            }
        }
        Some((energy - data, grad.into_iter().flatten().collect()))
    }

    /// Data term minus `kappa·U(x, reference)`.
    pub(crate) fn objective(
        &self,
        x: &MeshPositions,
        reference: &MeshPositions,
        gauss: &GaussianParams,
        bias: &BiasField,
        kappa: f64,
    ) -> Result<f64> {
        let energy = atlas::deformation_energy(x, reference, self.mesh)?;
        if !energy.is_finite() {
            let tet = first_bad_tet(x, self.mesh);
            return Err(Error::InfiniteEnergy { tet });
        }
        let prior = self.prior_rows(x)?;
        let (_, data) = self.e_step(&prior, gauss, bias)?;
        Ok(data - kappa * energy)
    }

    pub(crate) fn optimize_mesh(
        &self,
        x_init: &MeshPositions,
        reference: &MeshPositions,
        gauss: &GaussianParams,
        bias: &BiasField,
        kappa: f64,
        cfg: &LbfgsConfig,
    ) -> Result<MeshStep> {
        let (folded, offset) = self.folded_likelihoods(gauss, bias)?;
        let eval = |flat: &[f64]| {
            self.mesh_cost(
                &MeshPositions::from_flat(flat),
                reference,
                kappa,
                &folded,
                offset,
            )
        };
        let outcome =
            lbfgs::minimize(x_init.as_flat(), cfg, eval).ok_or_else(|| Error::InfiniteEnergy {
                tet: first_bad_tet(x_init, self.mesh),
            })?;
        Ok(MeshStep {
            x: MeshPositions::from_flat(&outcome.x),
            objective: -outcome.f,
            line_search_failed: outcome.line_search_failed,
        })
    }

    /// Hard labels and posteriors over the whole grid.
    pub(crate) fn segment(
        &self,
        x: &MeshPositions,
        gauss: &GaussianParams,
        bias: &BiasField,
    ) -> Result<LabelVolume> {
        let prior = self.prior_rows(x)?;
        let (resp, _) = self.e_step(&prior, gauss, bias)?;
        let ka = self.n_app();
        let n = self.vd.grid.n_voxels();
        let mut labels = vec![0u32; n];
        let mut post = vec![0.0; n * ka];
        for (i, &v) in self.vd.voxels.iter().enumerate() {
            let row = &resp[i * ka..(i + 1) * ka];
            labels[v] = argmax(row) as u32 + 1;
            post[v * ka..(v + 1) * ka].copy_from_slice(row);
        }
        LabelVolume::new(self.vd.grid.clone(), ka, labels)?.with_posteriors(post)
    }

    /// Prior-weighted moments for the atlas classes; the lesion class starts
    /// from its host class shifted by the configured offset.
    pub(crate) fn initialize(
        &self,
        x: &MeshPositions,
        orders: BasisOrders,
    ) -> Result<(GaussianParams, BiasField)> {
        let ras = locate(x, self.mesh, &self.vd.grid)?;
        let k = self.mesh.n_classes;
        let mut prior = vec![0.0; self.vd.len() * k];
        for (i, &v) in self.vd.voxels.iter().enumerate() {
            prior_at(self.mesh, &ras, v, &mut prior[i * k..(i + 1) * k]);
        }
        let (mut gauss, bias) = applik::initialize_appearance_data(self.vd, &prior, k, orders)?;
        if let Some(lesion) = self.lesion {
            let host = lesion.host_class as usize - 1;
            let mut mean = gauss.means[host].clone();
            for (m, off) in mean.iter_mut().zip(&lesion.intensity_offset) {
                *m += off;
            }
            let cov = gauss.covs[host].clone();
            gauss.means.push(mean);
            gauss.covs.push(cov);
        }
        Ok((gauss, bias))
    }
}

const LESION_MIN_WEIGHT: f64 = 1e-6;

fn first_bad_tet(x: &MeshPositions, mesh: &TetrahedralMesh) -> usize {
    mesh.tets
        .iter()
        .position(|t| !(atlas::det3(&atlas::edge_matrix(&x.0, t)) > 0.0))
        .unwrap_or(0)
}

fn log_volume_data(vol: &MultiContrastVolume, orders: BasisOrders) -> Result<VoxelData> {
    VoxelData::new(vol, orders)
}

/// Log-posterior of one scan up to a constant:
/// `Σ_i log Σ_k N(d_i | μ_k + Cφ_i, Σ_k) p(l_i = k | x) − 𝒦 Σ_m U_m(x, x_ref)`.
pub fn objective(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    x: &MeshPositions,
    gauss: &GaussianParams,
    bias: &BiasField,
    kappa: f64,
) -> Result<f64> {
    let vd = log_volume_data(vol, bias.orders)?;
    let cfg = FitConfig::default();
    let engine = Engine::new(&vd, atlas, &cfg)?;
    engine.objective(x, &atlas.reference, gauss, bias, kappa)
}

/// Optimizes node positions with appearance fixed, penalizing deformation
/// relative to `reference`. Coordinates on the reference bounding box stay
/// where `x_init` has them.
#[allow(clippy::too_many_arguments)]
pub fn optimize_mesh(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    x_init: &MeshPositions,
    gauss: &GaussianParams,
    bias: &BiasField,
    kappa: f64,
    reference: &MeshPositions,
    cfg: &FitConfig,
) -> Result<MeshStep> {
    let vd = log_volume_data(vol, bias.orders)?;
    let engine = Engine::new(&vd, atlas, cfg)?;
    engine.optimize_mesh(x_init, reference, gauss, bias, kappa, &cfg.mesh)
}

/// Prior-weighted initial Gaussians and a zero bias field.
pub fn initialize_appearance(
    vol: &MultiContrastVolume,
    prior_at_ref: &[f64],
    n_classes: usize,
    orders: BasisOrders,
) -> Result<(GaussianParams, BiasField)> {
    let vd = log_volume_data(vol, orders)?;
    let n = vol.grid.n_voxels();
    if prior_at_ref.len() != n * n_classes {
        return Err(Error::Shape("prior must be dims x K".into()));
    }
    let mut rows = Vec::with_capacity(vd.len() * n_classes);
    for &v in &vd.voxels {
        let row = &prior_at_ref[v * n_classes..(v + 1) * n_classes];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "prior row at voxel {v} is not a simplex"
            )));
        }
        rows.extend_from_slice(row);
    }
    applik::initialize_appearance_data(&vd, &rows, n_classes, orders)
}

pub fn fit_cross(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    cfg: &FitConfig,
) -> Result<CrossFitResult> {
    let vd = log_volume_data(vol, cfg.bias_orders)?;
    fit_cross_data(&vd, atlas, cfg)
}

pub(crate) fn fit_cross_data(
    vd: &VoxelData,
    atlas: &TetrahedralMesh,
    cfg: &FitConfig,
) -> Result<CrossFitResult> {
    let engine = Engine::new(vd, atlas, cfg)?;
    let reference = &atlas.reference;
    let (mut x, mut gauss, mut bias, mut warnings) = match &cfg.lesion {
        None => {
            let (g, b) = engine.initialize(reference, cfg.bias_orders)?;
            (reference.clone(), g, b, Vec::new())
        }
        // Fit the atlas classes alone first; a lesion Gaussian started from
        // the rough initial estimates tends to capture a small atlas class
        // instead of the lesions.
        Some(lesion) => {
            let plain = FitConfig {
                lesion: None,
                ..cfg.clone()
            };
            let fit = fit_cross_data(vd, atlas, &plain)?;
            let mut gauss = fit.gauss;
            let host = lesion.host_class as usize - 1;
            let mut mean = gauss.means[host].clone();
            for (m, off) in mean.iter_mut().zip(&lesion.intensity_offset) {
                *m += off;
            }
            let cov = gauss.covs[host].clone();
            gauss.means.push(mean);
            gauss.covs.push(cov);
            (fit.x_hat, gauss, fit.bias, fit.warnings)
        }
    };
    let mut prior = engine.prior_rows(&x)?;
    let mut trace = vec![engine.objective(&x, reference, &gauss, &bias, cfg.kappa)?];
    let mut stalled = 0;
    let mut converged = false;
    for _ in 0..cfg.max_outer_sweeps {
        let (g, b) =
            engine.appearance_sweep(&prior, &gauss, &bias, |s, prev| engine.ml_step(s, prev))?;
        gauss = g;
        bias = b;
        let step = engine.optimize_mesh(&x, reference, &gauss, &bias, cfg.kappa, &cfg.mesh)?;
        stalled += usize::from(step.line_search_failed);
        x = step.x;
        prior = engine.prior_rows(&x)?;
        let obj = step.objective;
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(obj);
        if (obj - prev).abs() < cfg.em_tolerance * obj.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if stalled > 0 {
        warnings.push(format!(
            "mesh line search made no progress in {stalled} sweeps; positions kept"
        ));
    }
    log::debug!(
        "cross fit: {} sweeps, objective {:?}",
        trace.len() - 1,
        trace.last()
    );
    Ok(CrossFitResult {
        x_hat: x,
        gauss,
        bias,
        trace,
        converged,
        warnings,
    })
}

/// MAP labels `argmax_k N(d_i | ·) p(l_i = k | x)` with posteriors attached.
pub fn segment(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    x_hat: &MeshPositions,
    gauss: &GaussianParams,
    bias: &BiasField,
) -> Result<LabelVolume> {
    segment_with(vol, atlas, x_hat, gauss, bias, None)
}

/// [`segment`] with an optional lesion class appended after the atlas classes.
pub fn segment_with(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    x_hat: &MeshPositions,
    gauss: &GaussianParams,
    bias: &BiasField,
    lesion: Option<&LesionConfig>,
) -> Result<LabelVolume> {
    let vd = log_volume_data(vol, bias.orders)?;
    let cfg = FitConfig {
        lesion: lesion.cloned(),
        ..Default::default()
    };
    let engine = Engine::new(&vd, atlas, &cfg)?;
    if gauss.n_classes() != engine.n_app() {
        return Err(Error::Shape(format!(
            "{} Gaussians for {} classes",
            gauss.n_classes(),
            engine.n_app()
        )));
    }
    engine.segment(x_hat, gauss, bias)
}
