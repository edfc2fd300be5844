//! Longitudinal engine: a subject-specific atlas `x₀` and Gaussian latents
//! `θ₀` couple per-time-point fits through the mesh penalty and a
//! normal-inverse-Wishart prior.
//!
//! NIW-MAP update. With prior `N(μ | μ₀, Σ/P₀) · IW(Σ | P₀Σ₀, P₀ − N − 2)` and
//! weighted statistics `n = Σwᵢ`, `s = Σwᵢdᵢ`, the expected complete-data log
//! posterior of one class is, up to constants,
//!
//! ```text
//! −(n + P₀)/2 · log|Σ| − ½ tr(Σ⁻¹ [Σwᵢ(dᵢ−μ)(dᵢ−μ)ᵀ + P₀(μ−μ₀)(μ−μ₀)ᵀ + P₀Σ₀])
//! ```
//!
//! (the Wishart's `ν + N + 1` plus the mean term's 1 give `P₀` in the log-det
//! coefficient). Setting the μ-derivative to zero gives
//! `μ = (s + P₀μ₀)/(n + P₀)`, and the Σ-derivative gives
//! `Σ = (S_μ + P₀(μ−μ₀)(μ−μ₀)ᵀ + P₀Σ₀)/(n + P₀)` with `S_μ` the scatter about μ.
//! At `n = 0` both collapse to `(μ₀, Σ₀)`; at `P₀ = 0` they are the ML step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::applik::{
    floor_covariance, gaussians_ml_from_stats, BiasField, ClassStats, GaussianParams, VoxelData,
};
use crate::atlas::{self, MeshPositions, TetrahedralMesh};
use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsConfig};
use crate::volio::{LabelVolume, MultiContrastVolume};
use crate::xsect::{fit_cross_data, CrossFitResult, Engine, FitConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum LesionPriorSource {
    /// A fraction of one atlas class's prior (1-based label) becomes lesion prior.
    AtlasClass { class: u32, fraction: f64 },
    /// Spatially constant lesion prior; atlas classes are scaled by `1 − p`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionConfig {
    pub enabled: bool,
    pub prior: LesionPriorSource,
    /// Class (1-based label) whose Gaussian seeds the lesion Gaussian.
    pub host_class: u32,
    pub threshold: f64,
    /// Added to the host mean, per contrast, in log units.
    pub intensity_offset: Vec<f64>,
}

impl LesionConfig {
    pub fn new(prior: LesionPriorSource, host_class: u32, intensity_offset: Vec<f64>) -> Self {
        Self {
            enabled: true,
            prior,
            host_class,
            threshold: 0.5,
            intensity_offset,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lesion threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        let in_range = |c: u32| c >= 1 && c as usize <= n_classes;
        if !in_range(self.host_class) {
            return Err(Error::InvalidArgument(format!(
                "lesion host class {} out of range",
                self.host_class
            )));
        }
        match self.prior {
            LesionPriorSource::AtlasClass { class, fraction } => {
                if !in_range(class) {
                    return Err(Error::InvalidArgument(format!(
                        "lesion prior class {class} out of range"
                    )));
                }
                if !(fraction > 0.0 && fraction < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "lesion prior fraction {fraction} outside (0, 1)"
                    )));
                }
            }
            LesionPriorSource::Uniform(p) => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "uniform lesion prior {p} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-class NIW strengths `P₀ₖ` and template voxel counts `N_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwHyper {
    pub p0: Vec<f64>,
    pub n_k: Vec<f64>,
}

impl NiwHyper {
    /// `P₀ₖ = ratio · N_k`; strengths too small for a proper inverse-Wishart
    /// (`≤ N + 2`) switch coupling off for that class.
    pub fn from_counts(n_k: Vec<f64>, ratio: f64, n_contrasts: usize) -> Self {
        let p0 = n_k
            .iter()
            .map(|&n| {
                let p = ratio * n;
                if p > n_contrasts as f64 + 2.0 {
                    p
                } else {
                    0.0
                }
            })
            .collect();
        Self { p0, n_k }
    }

    pub fn validate(&self, n_contrasts: usize) -> Result<()> {
        for (k, &p) in self.p0.iter().enumerate() {
            if !(p == 0.0 || p > n_contrasts as f64 + 2.0) || !p.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "P0 of class {} is {p}; must be 0 or exceed N + 2 = {}",
                    k + 1,
                    n_contrasts + 2
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SubjectLatents {
    pub x0: MeshPositions,
    pub mu0: Vec<DVector<f64>>,
    pub sigma0: Vec<DMatrix<f64>>,
}

/// Per-time-point parameters during fitting.
#[derive(Debug, Clone)]
pub struct TimepointState {
    pub x: MeshPositions,
    pub gauss: GaussianParams,
    pub bias: BiasField,
}

#[derive(Debug, Clone)]
pub struct TimepointResult {
    pub x: MeshPositions,
    pub gauss: GaussianParams,
    pub bias: BiasField,
    pub labels: LabelVolume,
    pub lesion_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct LongFitResult {
    pub latents: SubjectLatents,
    pub hyper: NiwHyper,
    pub timepoints: Vec<TimepointResult>,
    pub template: CrossFitResult,
    /// Joint log-posterior after initialization and after every block update.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorStrength {
    /// `P₀ₖ = ratio · N_k`.
    Ratio(f64),
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongConfig {
    /// Settings shared with the template fit and the per-time-point sweeps.
    pub cross: FitConfig,
    /// `𝒦₀ = kappa0_ratio · 𝒦`.
    pub kappa0_ratio: f64,
    pub p0: PriorStrength,
    pub outer_iterations: usize,
    /// Appearance/mesh sweeps per time point within one outer iteration.
    pub inner_sweeps: usize,
    pub x0: LbfgsConfig,
}

impl Default for LongConfig {
    fn default() -> Self {
        Self {
            cross: FitConfig::default(),
            kappa0_ratio: 20.0,
            p0: PriorStrength::Ratio(0.5),
            outer_iterations: 5,
            inner_sweeps: 3,
            x0: LbfgsConfig::default(),
        }
    }
}

impl LongConfig {
    pub fn kappa0(&self) -> f64 {
        self.kappa0_ratio * self.cross.kappa
    }
}

/// Voxelwise median over time points (mean of the middle pair for even T).
/// The mask is the intersection of the input masks.
pub fn build_median_template(vols: &[MultiContrastVolume]) -> Result<MultiContrastVolume> {
    let first = vols
        .first()
        .ok_or_else(|| Error::InvalidArgument("no input volumes".into()))?;
    for (t, v) in vols.iter().enumerate() {
        if !v.grid.same_shape(&first.grid) || v.n_contrasts != first.n_contrasts {
            return Err(Error::Shape(format!(
                "volume {t} does not match the grid of volume 0"
            )));
        }
        if v.log_transformed != first.log_transformed {
            return Err(Error::State(format!(
                "volume {t} differs in log transform state"
            )));
        }
    }
    let n = first.data.len();
    let mut data = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(vols.len());
    for i in 0..n {
        buf.clear();
        buf.extend(vols.iter().map(|v| v.data[i]));
        data.push(median_f32(&mut buf));
    }
    let mask = (0..first.grid.n_voxels())
        .map(|v| vols.iter().all(|vol| vol.mask[v]))
        .collect();
    let mut out =
        MultiContrastVolume::with_mask(first.grid.clone(), first.n_contrasts, data, mask)?;
    out.log_transformed = first.log_transformed;
    Ok(out)
}

fn median_f32(v: &mut [f32]) -> f32 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        ((v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0) as f32
    }
}

/// Initializes every time point and the latents from the template fit.
/// `N_k` are the template label counts of the atlas classes.
pub fn init_longitudinal(
    template_fit: &CrossFitResult,
    template_labels: &LabelVolume,
    n_atlas_classes: usize,
    n_timepoints: usize,
    strength: &PriorStrength,
) -> Result<(SubjectLatents, NiwHyper, Vec<TimepointState>)> {
    let n_contrasts = template_fit.gauss.n_contrasts();
    let n_k: Vec<f64> = (1..=n_atlas_classes as u32)
        .map(|k| template_labels.count(k) as f64)
        .collect();
    let hyper = match strength {
        PriorStrength::Ratio(r) => NiwHyper::from_counts(n_k, *r, n_contrasts),
        PriorStrength::Fixed(p0) => {
            if p0.len() != n_atlas_classes {
                return Err(Error::Shape(format!(
                    "{} P0 values for {n_atlas_classes} classes",
                    p0.len()
                )));
            }
            NiwHyper {
                p0: p0.clone(),
                n_k,
            }
        }
    };
    hyper.validate(n_contrasts)?;
    let latents = SubjectLatents {
        x0: template_fit.x_hat.clone(),
        mu0: template_fit.gauss.means[..n_atlas_classes].to_vec(),
        sigma0: template_fit.gauss.covs[..n_atlas_classes].to_vec(),
    };
    let state = TimepointState {
        x: template_fit.x_hat.clone(),
        gauss: template_fit.gauss.clone(),
        bias: template_fit.bias.clone(),
    };
    Ok((latents, hyper, vec![state; n_timepoints]))
}

/// Closed-form `θ₀` update for the coupled classes; classes with `P₀ₖ = 0`
/// keep their latents.
pub fn update_theta0(
    params: &[GaussianParams],
    hyper: &NiwHyper,
    latents: &SubjectLatents,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let t = params.len();
    if t == 0 {
        return Err(Error::InvalidArgument("no time points".into()));
    }
    let mut mu0 = latents.mu0.clone();
    let mut sigma0 = latents.sigma0.clone();
    for (k, &p0) in hyper.p0.iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        let n = params[0].n_contrasts();
        let mut prec_sum = DMatrix::zeros(n, n);
        let mut weighted = DVector::zeros(n);
        for g in params {
            let prec = g.covs[k]
                .clone()
                .try_inverse()
                .ok_or(Error::NotSpd { class: k })?;
            weighted += &prec * &g.means[k];
            prec_sum += prec;
        }
        let chol = prec_sum
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("precision sum of class {}", k + 1)))?;
        mu0[k] = chol.solve(&weighted);
        let dof = p0 - n as f64 - 2.0;
        let sigma0_inv = prec_sum * (p0 / (t as f64 * dof));
        let s = sigma0_inv
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("Σ₀ of class {}", k + 1)))?;
        sigma0[k] = (&s + s.transpose()) * 0.5;
    }
    Ok((mu0, sigma0))
}

/// NIW-MAP Gaussian for one class from its weighted statistics.
pub fn niw_map(
    stats: &ClassStats,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    p0: f64,
    floor: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if p0 == 0.0 {
        let g = gaussians_ml_from_stats(std::slice::from_ref(stats), floor)?;
        return Ok((g.means[0].clone(), g.covs[0].clone()));
    }
    if stats.weight == 0.0 {
        return Ok((mu0.clone(), sigma0.clone()));
    }
    let n = stats.weight;
    let mu = (&stats.mean * n + mu0 * p0) / (n + p0);
    let dm = &stats.mean - &mu;
    let d0 = &mu - mu0;
    let scatter = &stats.scatter + &dm * dm.transpose() * n;
    let sigma = (scatter + &d0 * d0.transpose() * p0 + sigma0 * p0) / (n + p0);
    Ok((mu, floor_covariance(sigma, floor)))
}

/// `log NIW(μ, Σ | μ₀, Σ₀, P₀)` up to terms constant in `(μ, Σ, μ₀, Σ₀)`.
pub fn log_niw(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    p0: f64,
) -> Result<f64> {
    let n = mu.len() as f64;
    let nu = p0 - n - 2.0;
    let chol = sigma.clone().cholesky().ok_or(Error::NotSpd { class: 0 })?;
    let chol0 = sigma0
        .clone()
        .cholesky()
        .ok_or(Error::NotSpd { class: 0 })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet0 = 2.0 * chol0.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let d = mu - mu0;
    let maha = d.dot(&chol.solve(&d));
    let trace = chol.solve(sigma0).trace();
    Ok(-0.5 * logdet - 0.5 * p0 * maha + 0.5 * nu * logdet0
        - 0.5 * (nu + n + 1.0) * logdet
        - 0.5 * p0 * trace)
}

fn latent_term(gauss: &GaussianParams, latents: &SubjectLatents, hyper: &NiwHyper) -> Result<f64> {
    let mut total = 0.0;
    for (k, &p0) in hyper.p0.iter().enumerate() {
        if p0 > 0.0 {
            total += log_niw(
                &gauss.means[k],
                &gauss.covs[k],
                &latents.mu0[k],
                &latents.sigma0[k],
                p0,
            )
            .map_err(|_| Error::NotSpd { class: k })?;
        }
    }
    Ok(total)
}

/// Minimizes `𝒦₀ U(x₀, x_ref) + 𝒦 Σ_t U(x_t, x₀)` over `x₀`, starting from
/// `x0_init`, with bounding-box coordinates held fixed. Returns the new `x₀` and whether the line search failed.
pub fn update_x0(
    xs: &[MeshPositions],
    x0_init: &MeshPositions,
    x_ref: &MeshPositions,
    mesh: &TetrahedralMesh,
    kappa: f64,
    kappa0: f64,
    cfg: &LbfgsConfig,
    min_volume_ratio: f64,
) -> Result<(MeshPositions, bool)> {
    let frozen = mesh.boundary_coordinates();
    // Minimize per unit of total stiffness so the stopping tolerances do not
    // depend on how stiff the problem is.
    let scale = 1.0 / (kappa0 + kappa * xs.len() as f64);
    let eval = |flat: &[f64]| -> Option<(f64, Vec<f64>)> {
        let x0 = MeshPositions::from_flat(flat);
        if !(atlas::min_volume_ratio(&x0, x_ref, mesh) > min_volume_ratio) {
            return None;
        }
        let (mut f, mut grad, _) =
            atlas::energy_and_gradients(&x0, x_ref, mesh, kappa0, true, false).ok()?;
        for x in xs {
            let (e, _, gr) = atlas::energy_and_gradients(x, &x0, mesh, kappa, false, true).ok()?;
            f += e;
            for (g, r) in grad.iter_mut().zip(&gr) {
                for d in 0..3 {
                    g[d] += r[d];
                }
            }
        }
        for (g, fixed) in grad.iter_mut().zip(&frozen) {
            for d in 0..3 {
                if fixed[d] {
                    g[d] = 0.0;
                }
            }
        }
        f.is_finite().then(|| {
            (
                f * scale,
                grad.into_iter().flatten().map(|g| g * scale).collect(),
            )
        })
    };
    let out =
        lbfgs::minimize(x0_init.as_flat(), cfg, eval).ok_or(Error::InfiniteEnergy { tet: 0 })?;
    if out.line_search_failed {
        log::debug!("x0 update: line search failed, keeping previous x0");
    }
    Ok((MeshPositions::from_flat(&out.x), out.line_search_failed))
}

/// Data term of time point `t` minus its mesh penalty plus its NIW log prior.
fn timepoint_objective(
    engine: &Engine,
    state: &TimepointState,
    latents: &SubjectLatents,
    hyper: &NiwHyper,
    kappa: f64,
) -> Result<f64> {
    Ok(
        engine.objective(&state.x, &latents.x0, &state.gauss, &state.bias, kappa)?
            + latent_term(&state.gauss, latents, hyper)?,
    )
}

fn joint_objective(
    engines: &[Engine],
    states: &[TimepointState],
    latents: &SubjectLatents,
    hyper: &NiwHyper,
    mesh: &TetrahedralMesh,
    kappa: f64,
    kappa0: f64,
) -> Result<f64> {
    let per_t: Vec<f64> = engines
        .par_iter()
        .zip(states)
        .map(|(e, s)| timepoint_objective(e, s, latents, hyper, kappa))
        .collect::<Result<_>>()?;
    let prior = atlas::deformation_energy(&latents.x0, &mesh.reference, mesh)?;
    Ok(per_t.iter().sum::<f64>() - kappa0 * prior)
}

/// `sweeps` NIW-coupled appearance/mesh sweeps of one time point.
fn fit_timepoint(
    engine: &Engine,
    mut state: TimepointState,
    latents: &SubjectLatents,
    hyper: &NiwHyper,
    kappa: f64,
    sweeps: usize,
    mesh_cfg: &LbfgsConfig,
) -> Result<(TimepointState, bool)> {
    let floor = engine.vd.covariance_floor;
    let mut failed = false;
    for _ in 0..sweeps {
        let prior = engine.prior_rows(&state.x)?;
        let (gauss, bias) =
            engine.appearance_sweep(&prior, &state.gauss, &state.bias, |stats, prev| {
                engine.m_step_with(stats, prev, |k, s| {
                    let (m, c) =
                        niw_map(s, &latents.mu0[k], &latents.sigma0[k], hyper.p0[k], floor)?;
                    GaussianParams::new(vec![m], vec![c])
                })
            })?;
        let step = engine.optimize_mesh(&state.x, &latents.x0, &gauss, &bias, kappa, mesh_cfg)?;
        failed |= step.line_search_failed;
        state = TimepointState {
            x: step.x,
            gauss,
            bias,
        };
    }
    Ok((state, failed))
}

/// One time point's NIW-coupled fit, as run inside [`fit_longitudinal`].
pub fn fit_timepoint_niw(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    latents: &SubjectLatents,
    hyper: &NiwHyper,
    state: TimepointState,
    cfg: &LongConfig,
) -> Result<TimepointState> {
    let vd = VoxelData::new(vol, cfg.cross.bias_orders)?;
    let engine = Engine::new(&vd, atlas, &cfg.cross)?;
    let (state, _) = fit_timepoint(
        &engine,
        state,
        latents,
        hyper,
        cfg.cross.kappa,
        cfg.inner_sweeps,
        &cfg.cross.mesh,
    )?;
    Ok(state)
}

pub fn fit_longitudinal(
    vols: &[MultiContrastVolume],
    atlas: &TetrahedralMesh,
    cfg: &LongConfig,
) -> Result<LongFitResult> {
    let template = build_median_template(vols)?;
    let orders = cfg.cross.bias_orders;
    let template_vd = VoxelData::new(&template, orders)?;
    let vds: Vec<VoxelData> = vols
        .iter()
        .map(|v| VoxelData::new(v, orders))
        .collect::<Result<_>>()?;
    let template_fit = fit_cross_data(&template_vd, atlas, &cfg.cross)?;
    let mut warnings = template_fit.warnings.clone();
    let template_engine = Engine::new(&template_vd, atlas, &cfg.cross)?;
    let template_labels =
        template_engine.segment(&template_fit.x_hat, &template_fit.gauss, &template_fit.bias)?;

    let (mut latents, hyper, mut states) = init_longitudinal(
        &template_fit,
        &template_labels,
        atlas.n_classes,
        vols.len(),
        &cfg.p0,
    )?;
    let engines: Vec<Engine> = vds
        .iter()
        .map(|vd| Engine::new(vd, atlas, &cfg.cross))
        .collect::<Result<_>>()?;
    let kappa = cfg.cross.kappa;
    let kappa0 = cfg.kappa0();
    let objective = |states: &[TimepointState], latents: &SubjectLatents| {
        joint_objective(&engines, states, latents, &hyper, atlas, kappa, kappa0)
    };
    let mut trace = vec![objective(&states, &latents)?];

    for outer in 0..cfg.outer_iterations {
        let fitted: Vec<(TimepointState, bool)> = engines
            .par_iter()
            .zip(states)
            .map(|(e, s)| {
                fit_timepoint(
                    e,
                    s,
                    &latents,
                    &hyper,
                    kappa,
                    cfg.inner_sweeps,
                    &cfg.cross.mesh,
                )
            })
            .collect::<Result<_>>()?;
        states = Vec::with_capacity(fitted.len());
        for (t, (s, failed)) in fitted.into_iter().enumerate() {
            if failed {
                warnings.push(format!(
                    "outer {outer}, time point {t}: mesh line search failed"
                ));
            }
            states.push(s);
        }
        trace.push(objective(&states, &latents)?);

        let params: Vec<GaussianParams> = states.iter().map(|s| s.gauss.clone()).collect();
        let (mu0, sigma0) = update_theta0(&params, &hyper, &latents)?;
        latents.mu0 = mu0;
        latents.sigma0 = sigma0;
        trace.push(objective(&states, &latents)?);

        let xs: Vec<MeshPositions> = states.iter().map(|s| s.x.clone()).collect();
        let (x0, failed) = update_x0(
            &xs,
            &latents.x0,
            &atlas.reference,
            atlas,
            kappa,
            kappa0,
            &cfg.x0,
            cfg.cross.min_volume_ratio,
        )?;
        if failed {
            warnings.push(format!(
                "outer {outer}: x0 line search failed, previous x0 kept"
            ));
        }
        latents.x0 = x0;
        trace.push(objective(&states, &latents)?);
    }

    let timepoints = engines
        .par_iter()
        .zip(states)
        .map(|(engine, s)| {
            let labels = engine.segment(&s.x, &s.gauss, &s.bias)?;
            let lesion_mask = match engine.lesion {
                Some(l) => Some(lesion_mask(&labels, atlas.n_classes, l.threshold)?),
                None => None,
            };
            Ok(TimepointResult {
                x: s.x,
                gauss: s.gauss,
                bias: s.bias,
                labels,
                lesion_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LongFitResult {
        latents,
        hyper,
        timepoints,
        template: template_fit,
        trace,
        warnings,
    })
}

fn lesion_mask(labels: &LabelVolume, n_atlas_classes: usize, threshold: f64) -> Result<Vec<bool>> {
    let post = labels
        .posteriors
        .as_ref()
        .ok_or_else(|| Error::State("segmentation carries no posteriors".into()))?;
    let k = labels.n_classes;
    if k != n_atlas_classes + 1 {
        return Err(Error::State(
            "lesion class was not enabled during fitting".into(),
        ));
    }
    Ok(post
        .chunks_exact(k)
        .map(|row| row[k - 1] > threshold)
        .collect())
}

/// Lesion masks `z_t` (lesion posterior above the threshold) for every time point.
pub fn segment_lesions(
    result: &LongFitResult,
    n_atlas_classes: usize,
    cfg: &LesionConfig,
) -> Result<Vec<Vec<bool>>> {
    if !cfg.enabled {
        return Err(Error::State("lesion class disabled".into()));
    }
    cfg.validate(n_atlas_classes)?;
    result
        .timepoints
        .iter()
        .map(|tp| lesion_mask(&tp.labels, n_atlas_classes, cfg.threshold))
        .collect()
}
