//! Subject-level runs shared by the commands and the acceptance harness.

use std::collections::BTreeMap;

use longseg_core::atlas::TetrahedralMesh;
use longseg_core::longit::{self, LongConfig, LongFitResult};
use longseg_core::phantom::{self, CohortSpec, GroupSpec, PhantomSpec};
use longseg_core::volio::{
    log_transform_relative, structure_name, structure_volumes, LabelVolume, MultiContrastVolume,
    VolumeTimeSeries,
};
use longseg_core::xsect::{self, CrossFitResult, FitConfig};
use longseg_core::Result;

/// Intensities below this fraction of a contrast's maximum are clamped
/// before taking logs.
pub const LOG_FLOOR_FRACTION: f64 = 1e-4;

pub fn to_log(vol: &MultiContrastVolume) -> Result<MultiContrastVolume> {
    // The log floor would otherwise swallow NaNs silently.
    vol.validate()?;
    if vol.log_transformed {
        return Ok(vol.clone());
    }
    log_transform_relative(vol, LOG_FLOOR_FRACTION)
}

/// Volumes by structure name, as in the phantom ground-truth tables.
pub fn named_volumes(seg: &LabelVolume) -> BTreeMap<String, f64> {
    structure_volumes(seg)
        .into_iter()
        .map(|(k, v)| (structure_name(k), v))
        .collect()
}

pub fn series_from_labels(
    subject: &str,
    times: &[f64],
    labels: &[LabelVolume],
) -> Result<VolumeTimeSeries> {
    let mut s = VolumeTimeSeries::new(subject);
    for (t, seg) in times.iter().zip(labels) {
        s.push(*t, named_volumes(seg))?;
    }
    Ok(s)
}

pub struct CrossRun {
    pub fit: CrossFitResult,
    pub labels: LabelVolume,
}

pub fn run_cross(
    vol: &MultiContrastVolume,
    atlas: &TetrahedralMesh,
    cfg: &FitConfig,
) -> Result<CrossRun> {
    let vol = to_log(vol)?;
    let fit = xsect::fit_cross(&vol, atlas, cfg)?;
    let labels = xsect::segment_with(
        &vol,
        atlas,
        &fit.x_hat,
        &fit.gauss,
        &fit.bias,
        cfg.lesion.as_ref(),
    )?;
    Ok(CrossRun { fit, labels })
}

/// Independent cross-sectional fits of every time point.
pub fn cross_series(
    subject: &str,
    times: &[f64],
    vols: &[MultiContrastVolume],
    atlas: &TetrahedralMesh,
    cfg: &FitConfig,
) -> Result<(Vec<CrossRun>, VolumeTimeSeries)> {
    let runs: Vec<CrossRun> = vols
        .iter()
        .map(|v| run_cross(v, atlas, cfg))
        .collect::<Result<_>>()?;
    let labels: Vec<LabelVolume> = runs.iter().map(|r| r.labels.clone()).collect();
    let series = series_from_labels(subject, times, &labels)?;
    Ok((runs, series))
}

pub fn run_long(
    vols: &[MultiContrastVolume],
    atlas: &TetrahedralMesh,
    cfg: &LongConfig,
) -> Result<LongFitResult> {
    let logs: Vec<MultiContrastVolume> = vols.iter().map(to_log).collect::<Result<_>>()?;
    longit::fit_longitudinal(&logs, atlas, cfg)
}

pub fn long_series(
    subject: &str,
    times: &[f64],
    vols: &[MultiContrastVolume],
    atlas: &TetrahedralMesh,
    cfg: &LongConfig,
) -> Result<(LongFitResult, VolumeTimeSeries)> {
    let fit = run_long(vols, atlas, cfg)?;
    let labels: Vec<LabelVolume> = fit.timepoints.iter().map(|t| t.labels.clone()).collect();
    let series = series_from_labels(subject, times, &labels)?;
    Ok((fit, series))
}

/// Atlas built from the ground-truth labels of `n` jittered copies of `base`,
/// so that no fitted subject's own anatomy is in it.
pub fn population_atlas(
    base: &PhantomSpec,
    n: usize,
    jitter: f64,
    spacing: usize,
    seed: u64,
) -> Result<TetrahedralMesh> {
    let mut spec = base.clone();
    spec.times = vec![0.0];
    spec.lesions = None;
    let cohort = CohortSpec {
        base: spec,
        groups: vec![GroupSpec {
            name: "atlas".into(),
            rates: Vec::new(),
            rate_spread: 0.0,
        }],
        n_per_group: n,
        geometry_jitter: jitter,
        seed,
    };
    let labels: Vec<LabelVolume> = phantom::cohort_specs(&cohort)
        .into_iter()
        .map(|(_, s)| phantom::generate(&s).map(|o| o.labels[0].clone()))
        .collect::<Result<_>>()?;
    let refs: Vec<&LabelVolume> = labels.iter().collect();
    phantom::atlas_from_labels(&refs, spacing, 0.01)
}
