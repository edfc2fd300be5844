//! The five subcommands. Each returns `Ok(())` or a [`CliError`] that
//! determines the process exit code.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use longseg_core::applik::{format_params, BiasField, GaussianParams};
use longseg_core::atlas::{self, write_atlas, write_positions};
use longseg_core::longit::{LongConfig, PriorStrength};
use longseg_core::metrics::{self, GroupSample, MetricRow};
use longseg_core::phantom::{
    self, CohortSpec, GroupSpec, LesionSpec, PhantomOutput, PhantomSpec, StandardOptions,
};
use longseg_core::volio::{self, VolumeTimeSeries};
use longseg_core::Error;

use crate::config::{self, ConfigError, KeyValues, FIT_KEYS, LONG_KEYS};
use crate::pipeline;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(Error),
    Numerical(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(e) => write!(f, "input error: {e}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e)
        } else {
            CliError::Input(e)
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Input(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        CliError::Input(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn read_atlas(kv: &KeyValues) -> CliResult<atlas::TetrahedralMesh> {
    Ok(atlas::read_atlas(kv.path("atlas")?)?)
}

fn read_inputs(kv: &KeyValues, key: &str) -> CliResult<Vec<volio::MultiContrastVolume>> {
    let paths: Vec<String> = kv
        .list(key)?
        .ok_or_else(|| CliError::Usage(format!("missing required key `{key}`")))?;
    if paths.is_empty() {
        return usage(format!("`{key}` lists no volumes"));
    }
    paths
        .iter()
        .map(|p| volio::read_volume(p).map_err(CliError::from))
        .collect()
}

// ---------------------------------------------------------------------------
// fit

pub fn cmd_fit(kv: &KeyValues, out_dir: &Path) -> CliResult {
    kv.check_keys(&[FIT_KEYS, &["atlas", "input", "subject"]].concat())?;
    let cfg = config::fit_config(kv)?;
    let atlas = read_atlas(kv)?;
    if let Some(l) = &cfg.lesion {
        l.validate(atlas.n_classes)?;
    }
    let mut vols = read_inputs(kv, "input")?;
    if vols.len() != 1 {
        return usage("`fit` takes exactly one input volume");
    }
    let vol = vols.remove(0);
    let run = pipeline::run_cross(&vol, &atlas, &cfg)?;
    for w in &run.fit.warnings {
        log::warn!("{w}");
    }
    create_dir(out_dir)?;
    write_text(
        &out_dir.join("params.txt"),
        &format_params(&run.fit.gauss, &run.fit.bias),
    )?;
    write_positions(&run.fit.x_hat, out_dir.join("positions.txt"))?;
    volio::write_labels(&run.labels, out_dir.join("labels.mgv"))?;
    if let Some(l) = &cfg.lesion {
        let post = run
            .labels
            .posteriors
            .as_ref()
            .expect("segmentation has posteriors");
        let k = run.labels.n_classes;
        let mask: Vec<bool> = post
            .chunks_exact(k)
            .map(|r| r[k - 1] > l.threshold)
            .collect();
        volio::write_mask(&mask, &run.labels.grid, out_dir.join("lesion_mask.mgv"))?;
    }
    let subject = kv.str("subject").unwrap_or("subject");
    let series = pipeline::series_from_labels(subject, &[0.0], &[run.labels])?;
    volio::write_volume_table(&[series], out_dir.join("volumes.csv"))?;
    write_trace(&out_dir.join("trace.csv"), &run.fit.trace)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[f64]) -> CliResult {
    let mut text = String::from("step,objective\n");
    for (i, v) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    write_text(path, &text)
}

// ---------------------------------------------------------------------------
// fit-long

fn times(kv: &KeyValues, key: &str, n: usize) -> CliResult<Vec<f64>> {
    let t = match kv.list::<f64>(key)? {
        Some(t) => t,
        None => (0..n).map(|i| i as f64).collect(),
    };
    if t.len() != n {
        return usage(format!("{} time offsets for {n} inputs", t.len()));
    }
    Ok(t)
}

/// Effective hyperparameters of a longitudinal run.
fn format_hyper(cfg: &LongConfig, p0: &[f64], n_k: &[f64]) -> String {
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let ratio = match &cfg.p0 {
        PriorStrength::Ratio(r) => r.to_string(),
        PriorStrength::Fixed(_) => "fixed".into(),
    };
    format!(
        "HYPER 1\nKAPPA {}\nKAPPA0 {}\nP0_RATIO {ratio}\nP0 {}\nN_K {}\nEND\n",
        cfg.cross.kappa,
        cfg.kappa0(),
        join(p0),
        join(n_k)
    )
}

pub fn cmd_fit_long(kv: &KeyValues, out_dir: &Path, degenerate: bool) -> CliResult {
    kv.check_keys(
        &[
            FIT_KEYS,
            LONG_KEYS,
            &["atlas", "inputs", "times", "subject"],
        ]
        .concat(),
    )?;
    let mut cfg = config::long_config(kv)?;
    if degenerate {
        config::make_degenerate(&mut cfg);
    }
    let atlas = read_atlas(kv)?;
    if let Some(l) = &cfg.cross.lesion {
        l.validate(atlas.n_classes)?;
    }
    let vols = read_inputs(kv, "inputs")?;
    let t = times(kv, "times", vols.len())?;
    if let Some(v) = vols.iter().find(|v| !v.grid.same_shape(&vols[0].grid)) {
        return Err(CliError::Input(Error::Shape(format!(
            "input grids differ: {:?} vs {:?}",
            v.grid.dims, vols[0].grid.dims
        ))));
    }
    let subject = kv.str("subject").unwrap_or("subject");
    let (fit, series) = pipeline::long_series(subject, &t, &vols, &atlas, &cfg)?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    create_dir(out_dir)?;
    for (i, tp) in fit.timepoints.iter().enumerate() {
        let dir = out_dir.join(format!("tp{i}"));
        create_dir(&dir)?;
        write_text(&dir.join("params.txt"), &format_params(&tp.gauss, &tp.bias))?;
        write_positions(&tp.x, dir.join("positions.txt"))?;
        volio::write_labels(&tp.labels, dir.join("labels.mgv"))?;
        if let Some(mask) = &tp.lesion_mask {
            volio::write_mask(mask, &tp.labels.grid, dir.join("lesion_mask.mgv"))?;
        }
    }
    // The latent Gaussians have no bias field of their own; an order-0 zero
    // field keeps the PARAMS layout.
    let latents = GaussianParams::new(fit.latents.mu0.clone(), fit.latents.sigma0.clone())?;
    let no_bias = BiasField::zeros(latents.n_contrasts(), [0, 0, 0]);
    write_text(
        &out_dir.join("latents.params"),
        &format_params(&latents, &no_bias),
    )?;
    write_positions(&fit.latents.x0, out_dir.join("latents.pos"))?;
    write_text(
        &out_dir.join("hyper.txt"),
        &format_hyper(&cfg, &fit.hyper.p0, &fit.hyper.n_k),
    )?;
    volio::write_volume_table(&[series], out_dir.join("volumes.csv"))?;
    write_trace(&out_dir.join("trace.csv"), &fit.trace)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics

const METRICS_KEYS: &[&str] = &[
    "table",
    "groups",
    "positive_group",
    "structures",
    "folds",
    "power",
    "alpha",
    "lesion_masks",
    "lesion_times",
    "reference_masks",
    "seed",
    "threads",
];

fn read_groups(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Input(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let mut groups = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "subject,group") {
            continue;
        }
        let Some((s, g)) = line.split_once(',') else {
            return usage(format!(
                "{}: line {}: expected `subject,group`",
                path.display(),
                n + 1
            ));
        };
        groups.insert(s.trim().to_string(), g.trim().to_string());
    }
    Ok(groups)
}

fn row(metric: &str, subject: &str, structure: &str, value: f64) -> MetricRow {
    MetricRow {
        metric: metric.into(),
        subject: subject.into(),
        structure: structure.into(),
        value,
    }
}

/// Per-subject, per-structure rows: SPC/ASPC of the first two time points and
/// APC over all of them.
pub fn series_metrics(
    series: &[VolumeTimeSeries],
    structures: &[String],
) -> CliResult<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for s in series {
        if s.entries.len() < 2 {
            continue;
        }
        for name in structures {
            let v = s.structure(name).ok_or_else(|| {
                CliError::Input(Error::Validation(format!(
                    "{} lacks structure {name}",
                    s.subject_id
                )))
            })?;
            if v.iter().all(|x| *x == 0.0) {
                log::warn!(
                    "{}: {name} is empty at every time point, skipped",
                    s.subject_id
                );
                continue;
            }
            rows.push(row("spc", &s.subject_id, name, metrics::spc(v[0], v[1])?));
            rows.push(row("aspc", &s.subject_id, name, metrics::aspc(v[0], v[1])?));
            rows.push(row("apc", &s.subject_id, name, metrics::apc(s, name)?));
        }
    }
    Ok(rows)
}

pub fn cmd_metrics(kv: &KeyValues, out_dir: &Path) -> CliResult {
    kv.check_keys(METRICS_KEYS)?;
    if !kv.contains("table") && !kv.contains("lesion_masks") {
        return usage("`metrics` needs `table` or `lesion_masks`");
    }
    let mut rows = Vec::new();
    let mut roc = None;
    if kv.contains("table") {
        let series = volio::read_volume_table(kv.path("table")?)?;
        if series.is_empty() {
            return Err(CliError::Input(Error::Validation(
                "volume table has no rows".into(),
            )));
        }
        let structures: Vec<String> = match kv.list::<String>("structures")? {
            Some(s) => s,
            None => series[0]
                .structures()
                .into_iter()
                .filter(|s| s != &volio::structure_name(1))
                .collect(),
        };
        let per_subject = series_metrics(&series, &structures)?;
        if kv.contains("groups") {
            let groups = read_groups(&kv.path("groups")?)?;
            let names: Vec<String> = {
                let mut g: Vec<String> = groups.values().cloned().collect();
                g.sort();
                g.dedup();
                g
            };
            if names.len() != 2 {
                return usage(format!("expected two groups, found {}", names.len()));
            }
            let positive = kv.str("positive_group").unwrap_or(&names[1]).to_string();
            if !names.contains(&positive) {
                return usage(format!(
                    "positive group `{positive}` not in the groups file"
                ));
            }
            let negative = names.iter().find(|n| **n != positive).unwrap().clone();
            let apc_of = |subject: &str, structure: &str| {
                per_subject
                    .iter()
                    .find(|r| r.metric == "apc" && r.subject == subject && r.structure == structure)
                    .map(|r| r.value)
            };
            let subjects: Vec<&VolumeTimeSeries> = series
                .iter()
                .filter(|s| groups.contains_key(&s.subject_id) && s.entries.len() >= 2)
                .collect();
            let power = kv.get_or("power", 0.8)?;
            let alpha = kv.get_or("alpha", 0.05)?;
            for name in &structures {
                let sample = |g: &str| {
                    GroupSample::new(
                        g,
                        subjects
                            .iter()
                            .filter(|s| groups[&s.subject_id] == g)
                            .filter_map(|s| apc_of(&s.subject_id, name))
                            .collect(),
                    )
                };
                let (pos, neg) = (sample(&positive), sample(&negative));
                let d = match metrics::cohens_d(&pos, &neg) {
                    Ok(d) => d,
                    Err(e) => {
                        log::warn!("Cohen's d of {name} undefined: {e}");
                        continue;
                    }
                };
                rows.push(row("cohens_d", "all", name, d));
                if let Ok(n) = metrics::sample_size_for_effect(d, power, alpha) {
                    rows.push(row("required_n", "all", name, n as f64));
                }
            }
            let features: Vec<Vec<f64>> = subjects
                .iter()
                .map(|s| {
                    structures
                        .iter()
                        .map(|n| apc_of(&s.subject_id, n).unwrap_or(f64::NAN))
                        .collect()
                })
                .collect();
            let labels: Vec<bool> = subjects
                .iter()
                .map(|s| groups[&s.subject_id] == positive)
                .collect();
            let folds = kv.get_or("folds", 5usize)?;
            let seed = kv.get_or("seed", 0u64)?;
            let r = metrics::lda_roc(&features, &labels, folds, seed)?;
            rows.push(row("auc", "all", "all", r.auc));
            roc = Some(r.mean_curve);
        }
        rows.extend(per_subject);
    }
    if kv.contains("lesion_masks") {
        let paths: Vec<String> = kv.list("lesion_masks")?.unwrap_or_default();
        let masks: Vec<(volio::VoxelGrid, Vec<bool>)> = paths
            .iter()
            .map(|p| volio::read_mask(p).map_err(CliError::from))
            .collect::<CliResult<_>>()?;
        let t = times(kv, "lesion_times", masks.len())?;
        if masks.len() >= 2 {
            let pairs: Vec<(&[bool], f64)> = masks
                .iter()
                .zip(&t)
                .map(|((_, m), t)| (m.as_slice(), *t))
                .collect();
            let (inc, dec) = metrics::lesion_rates(&pairs)?;
            rows.push(row("les_i", "all", "lesion", inc));
            rows.push(row("les_d", "all", "lesion", dec));
        }
        if let Some(refs) = kv.list::<String>("reference_masks")? {
            if refs.len() != masks.len() {
                return usage("`reference_masks` and `lesion_masks` differ in length");
            }
            for (i, (p, (_, m))) in refs.iter().zip(&masks).enumerate() {
                let (_, r) = volio::read_mask(p)?;
                rows.push(row(
                    "dice",
                    &format!("tp{i}"),
                    "lesion",
                    metrics::dice(m, &r)?,
                ));
            }
        }
    }
    create_dir(out_dir)?;
    metrics::write_metrics_csv(&rows, out_dir.join("metrics.csv"))?;
    if let Some(curve) = roc {
        metrics::write_roc_csv(&curve, out_dir.join("roc.csv"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// phantom

const PHANTOM_KEYS: &[&str] = &[
    "size",
    "n_contrasts",
    "noise",
    "bias_amplitude",
    "seed",
    "times",
    "rate.",
    "lesion_count",
    "lesion_radius",
    "lesion_offset",
    "lesion_host",
    "lesion_growth",
    "groups",
    "atrophy_class",
    "rate_spread",
    "geometry_jitter",
    "atlas_spacing",
    "atlas_subjects",
    "threads",
];

pub fn phantom_spec(kv: &KeyValues) -> CliResult<PhantomSpec> {
    let size: usize = kv.get_or("size", 32)?;
    if size < 8 {
        return usage("`size` must be at least 8");
    }
    let mut spec = phantom::standard_spec(StandardOptions {
        size,
        n_contrasts: kv.get_or("n_contrasts", 1)?,
        noise: kv.positive("noise", StandardOptions::default().noise)?,
        bias_amplitude: kv.non_negative("bias_amplitude", 0.1)?,
        seed: kv.get_or("seed", 1)?,
    })?;
    if let Some(t) = kv.list::<f64>("times")? {
        spec.times = t;
    }
    for key in kv.keys().filter(|k| k.starts_with("rate.")) {
        let class: u32 = key["rate.".len()..]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad class in `{key}`")))?;
        let rate: f64 = kv.get(key)?.expect("key is present");
        let mut found = false;
        for s in spec.structures.iter_mut().filter(|s| s.class == class) {
            s.rate = rate;
            found = true;
        }
        if !found {
            return usage(format!("no phantom structure has class {class}"));
        }
    }
    let count: usize = kv.get_or("lesion_count", 0)?;
    if count > 0 {
        let radius = kv.list::<f64>("lesion_radius")?.unwrap_or(vec![1.5, 2.5]);
        if radius.len() != 2 {
            return usage("`lesion_radius` takes `min, max`");
        }
        let offset = kv
            .list::<f64>("lesion_offset")?
            .unwrap_or_else(|| vec![0.8; spec.appearance.n_contrasts()]);
        spec.lesions = Some(LesionSpec {
            count,
            radius_range: (radius[0], radius[1]),
            intensity_offset: offset,
            host_class: kv.get_or("lesion_host", 4)?,
            growth: kv.get_or("lesion_growth", 0.0)?,
        });
    }
    spec.validate()?;
    Ok(spec)
}

/// `name:rate` pairs, e.g. `control:0, patient:-2`.
fn cohort_groups(kv: &KeyValues) -> CliResult<Vec<GroupSpec>> {
    let class: u32 = kv.get_or("atrophy_class", 3)?;
    let spread = kv.non_negative("rate_spread", 0.5)?;
    let text = kv.str("groups").unwrap_or("control:0");
    text.split(',')
        .map(|g| {
            let (name, rate) = g
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("group `{g}` is not `name:rate`")))?;
            let rate: f64 = rate
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad rate in group `{g}`")))?;
            Ok(GroupSpec {
                name: name.trim().to_string(),
                rates: vec![(class, rate)],
                rate_spread: spread,
            })
        })
        .collect()
}

pub fn cohort_spec(kv: &KeyValues, n_per_group: usize) -> CliResult<CohortSpec> {
    let base = phantom_spec(kv)?;
    let size = base.grid.dims[0] as f64;
    Ok(CohortSpec {
        groups: cohort_groups(kv)?,
        n_per_group,
        geometry_jitter: kv.non_negative("geometry_jitter", size / 64.0)?,
        seed: base.seed,
        base,
    })
}

/// Population atlas for phantoms like `spec`, from subjects not in any cohort.
pub fn phantom_atlas(kv: &KeyValues, spec: &PhantomSpec) -> CliResult<atlas::TetrahedralMesh> {
    let size = spec.grid.dims[0] as f64;
    Ok(pipeline::population_atlas(
        spec,
        kv.get_or("atlas_subjects", 8)?,
        kv.non_negative("geometry_jitter", size / 64.0)?,
        kv.get_or("atlas_spacing", 4)?,
        spec.seed ^ 0x9e37_79b9_7f4a_7c15,
    )?)
}

fn write_phantom(out: &PhantomOutput, dir: &Path) -> CliResult {
    create_dir(dir)?;
    for (t, (vol, seg)) in out.volumes.iter().zip(&out.labels).enumerate() {
        volio::write_volume(vol, dir.join(format!("tp{t}.mgv")))?;
        volio::write_labels(seg, dir.join(format!("labels_tp{t}.mgv")))?;
        if let Some(masks) = &out.lesion_masks {
            volio::write_mask(&masks[t], &seg.grid, dir.join(format!("lesion_tp{t}.mgv")))?;
        }
    }
    volio::write_volume_table(std::slice::from_ref(&out.table), dir.join("volumes.csv"))?;
    Ok(())
}

pub fn cmd_phantom(kv: &KeyValues, out_dir: &Path, cohort: Option<usize>) -> CliResult {
    kv.check_keys(PHANTOM_KEYS)?;
    create_dir(out_dir)?;
    match cohort {
        None => {
            let spec = phantom_spec(kv)?;
            let out = phantom::generate(&spec)?;
            write_phantom(&out, out_dir)?;
            write_atlas(&phantom_atlas(kv, &spec)?, out_dir.join("atlas.txt"))?;
        }
        Some(n) => {
            let cs = cohort_spec(kv, n)?;
            let subjects = phantom::generate_cohort(&cs)?;
            let mut groups = String::from("subject,group\n");
            let mut tables = Vec::new();
            for s in &subjects {
                let id = &s.output.table.subject_id;
                write_phantom(&s.output, &out_dir.join(id))?;
                groups.push_str(&format!("{id},{}\n", s.group));
                tables.push(s.output.table.clone());
            }
            write_text(&out_dir.join("groups.csv"), &groups)?;
            volio::write_volume_table(&tables, out_dir.join("volumes.csv"))?;
            write_atlas(&phantom_atlas(kv, &cs.base)?, out_dir.join("atlas.txt"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid-search

/// Stiffness ratios `𝒦₀/𝒦` searched by default.
pub const KAPPA0_GRID: [f64; 5] = [5.0, 10.0, 14.0, 15.0, 20.0];
/// Prior strength ratios `P₀ₖ/N_k` searched by default.
pub const P0_GRID: [f64; 5] = [0.25, 0.5, 0.75, 1.0, 1.25];

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub kappa0_ratio: f64,
    pub p0_ratio: f64,
    /// Median ASPC over subjects and structures of the retest pairs.
    pub median_aspc: f64,
    /// Cohen's d of the atrophying structure's APC, first group minus second
    /// (controls minus patients with the default groups).
    pub cohens_d: f64,
    pub status: String,
}

/// One cohort subject prepared for the grid: its scans, a same-day retest
/// of the baseline, and its group.
pub struct GridSubject {
    pub group: String,
    pub times: Vec<f64>,
    pub scans: Vec<volio::MultiContrastVolume>,
    pub retest: [volio::MultiContrastVolume; 2],
}

pub fn grid_subjects(cs: &CohortSpec) -> CliResult<Vec<GridSubject>> {
    phantom::generate_cohort(cs)?
        .into_iter()
        .map(|s| {
            let mut retest_spec = s.spec.clone();
            retest_spec.times = vec![0.0];
            retest_spec.seed = s.spec.seed.wrapping_add(0x5eed);
            let retest = phantom::generate(&retest_spec)?.volumes.remove(0);
            Ok(GridSubject {
                group: s.group,
                times: s.spec.times.clone(),
                retest: [s.output.volumes[0].clone(), retest],
                scans: s.output.volumes,
            })
        })
        .collect()
}

pub fn evaluate_cell(
    subjects: &[GridSubject],
    atlas: &atlas::TetrahedralMesh,
    cfg: &LongConfig,
    structure: &str,
    groups: (&str, &str),
) -> CliResult<(f64, f64)> {
    let mut aspc = Vec::new();
    let mut apc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        let id = format!("s{i}");
        let (_, retest) = pipeline::long_series(&id, &[0.0, 1.0], &s.retest, atlas, cfg)?;
        for name in retest.structures() {
            if name == volio::structure_name(1) {
                continue;
            }
            let v = retest.structure(&name).expect("listed structure");
            if v[0] + v[1] == 0.0 {
                continue;
            }
            aspc.push(metrics::aspc(v[0], v[1])?);
        }
        let (_, series) = pipeline::long_series(&id, &s.times, &s.scans, atlas, cfg)?;
        apc.entry(s.group.as_str())
            .or_default()
            .push(metrics::apc(&series, structure)?);
    }
    let median = metrics::median(&aspc)
        .ok_or_else(|| CliError::Input(Error::Validation("cohort is empty".into())))?;
    let sample = |g: &str| GroupSample::new(g, apc.get(g).cloned().unwrap_or_default());
    let d = metrics::cohens_d(&sample(groups.0), &sample(groups.1))?;
    Ok((median, d))
}

pub fn write_grid_csv(cells: &[GridCell], path: &Path) -> CliResult {
    let mut text = String::from("kappa0_ratio,p0_ratio,median_aspc,cohens_d,status\n");
    for c in cells {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            c.kappa0_ratio, c.p0_ratio, c.median_aspc, c.cohens_d, c.status
        ));
    }
    write_text(path, &text)
}

const GRID_KEYS: &[&str] = &["kappa0_grid", "p0_grid", "n_per_group"];

pub fn cmd_grid_search(kv: &KeyValues, out_dir: &Path) -> CliResult {
    let mut keys = [FIT_KEYS, LONG_KEYS, PHANTOM_KEYS, GRID_KEYS, &["atlas"]].concat();
    keys.retain(|k| *k != "kappa0_ratio" && *k != "p0_ratio");
    kv.check_keys(&keys)?;
    let mut kv = kv.clone();
    if !kv.contains("groups") {
        kv.set("groups", "control:0, patient:-2");
    }
    if !kv.contains("times") {
        kv.set("times", "0, 1, 2");
    }
    let n_per_group = kv.get_or("n_per_group", 3usize)?;
    let cs = cohort_spec(&kv, n_per_group)?;
    if cs.groups.len() != 2 {
        return usage("grid search compares exactly two groups");
    }
    let structure = volio::structure_name(kv.get_or("atrophy_class", 3)?);
    let kappa0s = kv
        .list::<f64>("kappa0_grid")?
        .unwrap_or(KAPPA0_GRID.to_vec());
    let p0s = kv.list::<f64>("p0_grid")?.unwrap_or(P0_GRID.to_vec());
    let atlas = match kv.str("atlas") {
        Some(_) => read_atlas(&kv)?,
        None => phantom_atlas(&kv, &cs.base)?,
    };
    let base_cfg = config::long_config(&kv)?;
    let subjects = grid_subjects(&cs)?;
    let (g0, g1) = (cs.groups[0].name.clone(), cs.groups[1].name.clone());
    let mut cells = Vec::new();
    for &k0 in &kappa0s {
        for &p0 in &p0s {
            let cfg = LongConfig {
                kappa0_ratio: k0,
                p0: PriorStrength::Ratio(p0),
                ..base_cfg.clone()
            };
            let cell = match evaluate_cell(&subjects, &atlas, &cfg, &structure, (&g0, &g1)) {
                Ok((aspc, d)) => GridCell {
                    kappa0_ratio: k0,
                    p0_ratio: p0,
                    median_aspc: aspc,
                    cohens_d: d,
                    status: "ok".into(),
                },
                Err(e) => {
                    log::warn!("grid cell ({k0}, {p0}) failed: {e}");
                    GridCell {
                        kappa0_ratio: k0,
                        p0_ratio: p0,
                        median_aspc: f64::NAN,
                        cohens_d: f64::NAN,
                        status: format!("error: {}", e.to_string().replace(',', ";")),
                    }
                }
            };
            log::info!("grid cell {cell:?}");
            cells.push(cell);
        }
    }
    create_dir(out_dir)?;
    write_grid_csv(&cells, &out_dir.join("grid.csv"))
}

/// Path of a config file given on the command line, if any.
pub fn load_config(path: Option<&PathBuf>) -> CliResult<KeyValues> {
    match path {
        Some(p) => Ok(KeyValues::read(p)?),
        None => Ok(KeyValues::default()),
    }
}
