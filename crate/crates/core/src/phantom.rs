//! Synthetic longitudinal phantoms: nested ellipsoids with per-structure
//! atrophy, class Gaussians in log space, a smooth multiplicative bias field,
//! and optional hyperintense lesions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::applik::{eval_basis, n_basis, BasisOrders, GaussianParams};
use crate::atlas::{build_grid_atlas, TetrahedralMesh};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volio::{
    structure_name, structure_volumes, LabelVolume, MultiContrastVolume, VolumeTimeSeries,
    VoxelGrid,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3], scale: f64) -> bool {
        let mut s = 0.0;
        for d in 0..3 {
            let u = (p[d] - self.center[d]) / (self.radii[d] * scale);
            s += u * u;
        }
        s <= 1.0
    }
}

/// One labelled structure, painted over everything listed before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    /// 1-based class label.
    pub class: u32,
    pub parts: Vec<Ellipsoid>,
    /// Annual volume change in percent.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    pub orders: BasisOrders,
    /// `N × P` coefficients of the log bias at every time point.
    pub coeffs: DMatrix<f64>,
    /// Standard deviation of per-time-point perturbations of the non-constant
    /// coefficients.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    pub count: usize,
    pub radius_range: (f64, f64),
    /// Log-space offset per contrast added to the host intensities.
    pub intensity_offset: Vec<f64>,
    /// Class the lesions are placed in.
    pub host_class: u32,
    /// Annual growth of each lesion's volume in percent.
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: VoxelGrid,
    pub n_classes: usize,
    /// Painted in order; voxels outside every structure are class 1.
    pub structures: Vec<Structure>,
    /// Log-space class Gaussians.
    pub appearance: GaussianParams,
    pub bias: Option<BiasSpec>,
    pub seed: u64,
    pub times: Vec<f64>,
    pub lesions: Option<LesionSpec>,
}

#[derive(Debug, Clone)]
pub struct PhantomOutput {
    /// Raw-scale intensities (not log-transformed).
    pub volumes: Vec<MultiContrastVolume>,
    pub labels: Vec<LabelVolume>,
    pub lesion_masks: Option<Vec<Vec<bool>>>,
    pub table: VolumeTimeSeries,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes;
        if self.appearance.n_classes() != k {
            return Err(Error::Shape(format!(
                "{} class Gaussians for {k} classes",
                self.appearance.n_classes()
            )));
        }
        self.appearance.validate()?;
        if self.times.is_empty() {
            return Err(Error::InvalidArgument(
                "phantom needs at least one time point".into(),
            ));
        }
        for s in &self.structures {
            if s.class == 0 || s.class as usize > k {
                return Err(Error::InvalidArgument(format!(
                    "structure class {} exceeds K = {k}",
                    s.class
                )));
            }
            if !(s.rate > -100.0) {
                return Err(Error::InvalidArgument(format!(
                    "rate {} must exceed -100",
                    s.rate
                )));
            }
            for e in &s.parts {
                for d in 0..3 {
                    let lo = e.center[d] - e.radii[d];
                    let hi = e.center[d] + e.radii[d];
                    if !(e.radii[d] > 0.0) || lo < -0.5 || hi > self.grid.dims[d] as f64 - 0.5 {
                        return Err(Error::InvalidArgument(format!(
                            "structure {} overflows the grid along axis {d}",
                            s.class
                        )));
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            if b.coeffs.nrows() != self.appearance.n_contrasts()
                || b.coeffs.ncols() != n_basis(b.orders)
            {
                return Err(Error::Shape(
                    "bias coefficients do not match contrasts and orders".into(),
                ));
            }
        }
        if let Some(l) = &self.lesions {
            if l.intensity_offset.len() != self.appearance.n_contrasts() {
                return Err(Error::Shape(
                    "lesion offset needs one value per contrast".into(),
                ));
            }
            if l.host_class == 0 || l.host_class as usize > k {
                return Err(Error::InvalidArgument(
                    "lesion host class out of range".into(),
                ));
            }
        }
        Ok(())
    }
}

fn voxel_centre(grid: &VoxelGrid, v: usize) -> [f64; 3] {
    grid.coords(v).map(|c| c as f64)
}

fn paint(grid: &VoxelGrid, structures: &[Structure], scales: &[f64]) -> Vec<u32> {
    let mut labels = vec![1u32; grid.n_voxels()];
    for (s, &scale) in structures.iter().zip(scales) {
        let (lo, hi) = bounding_box(grid, s, scale);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64, y as f64, z as f64];
                    if s.parts.iter().any(|e| e.contains(p, scale)) {
                        labels[grid.index(x, y, z)] = s.class;
                    }
                }
            }
        }
    }
    labels
}

fn bounding_box(grid: &VoxelGrid, s: &Structure, scale: f64) -> ([usize; 3], [usize; 3]) {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for e in &s.parts {
        for d in 0..3 {
            let a = (e.center[d] - e.radii[d] * scale).floor().max(0.0) as usize;
            let b = ((e.center[d] + e.radii[d] * scale).ceil() as usize).min(grid.dims[d] - 1);
            lo[d] = lo[d].min(a);
            hi[d] = hi[d].max(b);
        }
    }
    (lo, hi)
}

/// Per-structure scale factors so that each structure's own label count
/// follows `v₀ (1 + rate·t/100)`. Structures painted later (children) are
/// calibrated first; each count is monotone in its own scale once later
/// structures are fixed.
fn calibrate_scales(spec: &PhantomSpec, t: f64) -> Vec<f64> {
    let n = spec.structures.len();
    let base = paint(&spec.grid, &spec.structures, &vec![1.0; n]);
    let mut scales = vec![1.0; n];
    for i in (0..n).rev() {
        let s = &spec.structures[i];
        if s.rate == 0.0 || t == 0.0 {
            continue;
        }
        let count_of = |labels: &[u32]| labels.iter().filter(|&&l| l == s.class).count() as f64;
        let target = count_of(&base) * (1.0 + s.rate * t / 100.0);
        let (mut lo, mut hi) = (0.2, 3.0);
        let mut best = (f64::INFINITY, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            scales[i] = mid;
            let c = count_of(&paint(&spec.grid, &spec.structures, &scales));
            if (c - target).abs() < best.0 {
                best = ((c - target).abs(), mid);
            }
            if c < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scales[i] = best.1;
    }
    scales
}

/// Grid voxels whose centres lie inside `e`.
fn voxels_in<'a>(grid: &'a VoxelGrid, e: &'a Ellipsoid) -> impl Iterator<Item = usize> + 'a {
    let s = Structure {
        class: 1,
        parts: vec![e.clone()],
        rate: 0.0,
    };
    let (lo, hi) = bounding_box(grid, &s, 1.0);
    (lo[2]..=hi[2])
        .flat_map(move |z| {
            (lo[1]..=hi[1]).flat_map(move |y| (lo[0]..=hi[0]).map(move |x| grid.index(x, y, z)))
        })
        .filter(move |&v| e.contains(voxel_centre(grid, v), 1.0))
}

fn planted_lesions(spec: &PhantomSpec, base: &[u32], rng: &mut SplitMix64) -> Vec<Ellipsoid> {
    let Some(l) = &spec.lesions else {
        return Vec::new();
    };
    let grid = &spec.grid;
    let candidates: Vec<usize> = (0..grid.n_voxels())
        .filter(|&v| base[v] == l.host_class)
        .collect();
    let mut out: Vec<Ellipsoid> = Vec::new();
    let mut attempts = 0;
    while out.len() < l.count && attempts < 10_000 && !candidates.is_empty() {
        attempts += 1;
        let r = rng.uniform(l.radius_range.0, l.radius_range.1);
        let c = voxel_centre(grid, candidates[rng.below(candidates.len())]);
        let c = [
            c[0] + rng.uniform(-0.4, 0.4),
            c[1] + rng.uniform(-0.4, 0.4),
            c[2] + rng.uniform(-0.4, 0.4),
        ];
        // Keep the grown lesion inside the host and apart from the others.
        let grown = r
            * (1.0 + l.growth.max(0.0) / 100.0 * spec.times.last().copied().unwrap_or(0.0)).cbrt();
        let e = Ellipsoid {
            center: c,
            radii: [grown + 1.0; 3],
        };
        let inside = voxels_in(grid, &e).all(|v| base[v] == l.host_class);
        let apart = out.iter().all(|o| {
            let d: f64 = (0..3)
                .map(|k| (o.center[k] - c[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            d > o.radii[0] + grown + 2.0
        });
        if inside && apart {
            out.push(Ellipsoid {
                center: c,
                radii: [r; 3],
            });
        }
    }
    out
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomOutput> {
    spec.validate()?;
    let grid = &spec.grid;
    let n_vox = grid.n_voxels();
    let n_contrasts = spec.appearance.n_contrasts();
    let base = paint(grid, &spec.structures, &vec![1.0; spec.structures.len()]);
    let mut geometry_rng = SplitMix64::derive(spec.seed, 0);
    let lesions = planted_lesions(spec, &base, &mut geometry_rng);
    if let Some(l) = &spec.lesions {
        if lesions.len() < l.count {
            return Err(Error::InvalidArgument(format!(
                "only {} of {} lesions fit inside class {}",
                lesions.len(),
                l.count,
                l.host_class
            )));
        }
    }
    let chols: Vec<DMatrix<f64>> = spec
        .appearance
        .covs
        .iter()
        .map(|c| {
            c.clone()
                .cholesky()
                .map(|ch| ch.l())
                .ok_or(Error::NotSpd { class: 0 })
        })
        .collect::<Result<_>>()?;
    let basis = spec.bias.as_ref().map(|b| eval_basis(grid, b.orders));

    let mut out = PhantomOutput {
        volumes: Vec::new(),
        labels: Vec::new(),
        lesion_masks: spec.lesions.as_ref().map(|_| Vec::new()),
        table: VolumeTimeSeries::new(format!("phantom-{}", spec.seed)),
    };
    for (ti, &t) in spec.times.iter().enumerate() {
        let scales = calibrate_scales(spec, t);
        let labels = paint(grid, &spec.structures, &scales);
        let mut lesion_mask = vec![false; n_vox];
        if let Some(l) = &spec.lesions {
            let s = (1.0 + l.growth / 100.0 * t).max(0.0).cbrt();
            for e in &lesions {
                let grown = Ellipsoid {
                    center: e.center,
                    radii: e.radii.map(|r| r * s),
                };
                for v in voxels_in(grid, &grown) {
                    if labels[v] == l.host_class {
                        lesion_mask[v] = true;
                    }
                }
            }
        }

        let mut bias_coeffs = spec.bias.as_ref().map(|b| b.coeffs.clone());
        let mut noise = SplitMix64::derive(spec.seed, 1 + ti as u64);
        if let (Some(b), Some(c)) = (&spec.bias, bias_coeffs.as_mut()) {
            for n in 0..c.nrows() {
                for p in 1..c.ncols() {
                    c[(n, p)] += noise.normal(0.0, b.jitter);
                }
            }
        }
        let mut data = vec![0f32; n_vox * n_contrasts];
        let mut z = DVector::zeros(n_contrasts);
        for v in 0..n_vox {
            let k = labels[v] as usize - 1;
            for zi in z.iter_mut() {
                *zi = noise.standard_normal();
            }
            let mut sample = &spec.appearance.means[k] + &chols[k] * &z;
            if lesion_mask[v] {
                for (s, off) in sample.iter_mut().zip(
                    &spec
                        .lesions
                        .as_ref()
                        .expect("lesions planted")
                        .intensity_offset,
                ) {
                    *s += off;
                }
            }
            if let (Some(c), Some(b)) = (&bias_coeffs, &basis) {
                let row = b.row(v);
                for n in 0..n_contrasts {
                    sample[n] += (0..row.len()).map(|p| c[(n, p)] * row[p]).sum::<f64>();
                }
            }
            for n in 0..n_contrasts {
                data[n * n_vox + v] = sample[n].exp() as f32;
            }
        }
        let seg = LabelVolume::new(grid.clone(), spec.n_classes, labels)?;
        let volumes: BTreeMap<String, f64> = structure_volumes(&seg)
            .into_iter()
            .map(|(k, v)| (structure_name(k), v))
            .collect();
        out.table.push(t, volumes)?;
        out.volumes
            .push(MultiContrastVolume::new(grid.clone(), n_contrasts, data)?);
        out.labels.push(seg);
        if let Some(masks) = out.lesion_masks.as_mut() {
            masks.push(lesion_mask);
        }
    }
    Ok(out)
}

/// Group of cohort subjects sharing nominal atrophy rates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    /// Nominal annual rate per structure class; unlisted classes keep the
    /// base spec's rate.
    pub rates: Vec<(u32, f64)>,
    /// Standard deviation of per-subject rate jitter (percent per year).
    pub rate_spread: f64,
}

/// Cohort generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub base: PhantomSpec,
    pub groups: Vec<GroupSpec>,
    pub n_per_group: usize,
    /// Standard deviation of per-subject geometry jitter in voxels.
    pub geometry_jitter: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CohortSubject {
    pub group: String,
    pub spec: PhantomSpec,
    pub output: PhantomOutput,
}

/// Per-subject specs of a cohort (without generating images).
pub fn cohort_specs(cohort: &CohortSpec) -> Vec<(String, PhantomSpec)> {
    let mut specs = Vec::new();
    let mut index = 0u64;
    for group in &cohort.groups {
        for _ in 0..cohort.n_per_group {
            let mut rng = SplitMix64::derive(cohort.seed, index);
            let mut spec = cohort.base.clone();
            spec.seed = SplitMix64::derive(cohort.seed, 1_000_000 + index).next_u64();
            for s in &mut spec.structures {
                if let Some(&(_, rate)) = group.rates.iter().find(|(c, _)| *c == s.class) {
                    s.rate = rate + rng.normal(0.0, group.rate_spread);
                }
            }
            let shift = [0, 1, 2].map(|_| rng.normal(0.0, cohort.geometry_jitter));
            let stretch = rng.normal(0.0, cohort.geometry_jitter * 0.01).exp();
            for s in &mut spec.structures {
                for e in &mut s.parts {
                    for d in 0..3 {
                        e.center[d] += shift[d];
                        e.radii[d] *= stretch;
                    }
                }
            }
            specs.push((group.name.clone(), spec));
            index += 1;
        }
    }
    specs
}

pub fn generate_cohort(cohort: &CohortSpec) -> Result<Vec<CohortSubject>> {
    cohort_specs(cohort)
        .into_iter()
        .enumerate()
        .map(|(i, (group, spec))| {
            let mut output = generate(&spec)?;
            output.table.subject_id = format!("subject{:03}", i + 1);
            Ok(CohortSubject {
                group,
                spec,
                output,
            })
        })
        .collect()
}

/// Grid atlas whose node priors are smoothed label frequencies of `labels`
/// (tent-weighted over the neighbouring cells), mixed with `floor` mass per
/// class.
pub fn atlas_from_labels(
    labels: &[&LabelVolume],
    spacing: usize,
    floor: f64,
) -> Result<TetrahedralMesh> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no label volumes".into()))?;
    let k = first.n_classes;
    let grid = &first.grid;
    let mut mesh = build_grid_atlas(grid, spacing, k, &vec![1.0 / k as f64; k])?;
    let h = spacing as f64;
    for node in 0..mesh.n_nodes() {
        let p = mesh.reference.0[node];
        let mut counts = vec![0.0; k];
        let lo = p.map(|c| (c - h).ceil().max(0.0) as usize);
        let hi: Vec<usize> = (0..3)
            .map(|d| ((p[d] + h).floor().max(0.0) as usize).min(grid.dims[d] - 1))
            .collect();
        for seg in labels {
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let w = (1.0 - (x as f64 - p[0]).abs() / h).max(0.0)
                            * (1.0 - (y as f64 - p[1]).abs() / h).max(0.0)
                            * (1.0 - (z as f64 - p[2]).abs() / h).max(0.0);
                        counts[seg.labels[grid.index(x, y, z)] as usize - 1] += w;
                    }
                }
            }
        }
        let total: f64 = counts.iter().sum();
        let row = &mut mesh.alphas[node * k..(node + 1) * k];
        for c in 0..k {
            let freq = if total > 0.0 {
                counts[c] / total
            } else {
                if c == 0 {
                    1.0
                } else {
                    0.0
                }
            };
            row[c] = (freq + floor) / (1.0 + k as f64 * floor);
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Noise level and contrast count of [`standard_spec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardOptions {
    pub size: usize,
    pub n_contrasts: usize,
    /// Standard deviation of log intensities within a class.
    pub noise: f64,
    /// Peak log amplitude of the planted bias field (0 disables it).
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl Default for StandardOptions {
    fn default() -> Self {
        Self {
            size: 32,
            n_contrasts: 1,
            noise: 0.08,
            bias_amplitude: 0.1,
            seed: 1,
        }
    }
}

/// Log means per class (background, CSF, cortex, white matter, deep nucleus)
/// for a T1-like and a FLAIR-like contrast.
const STANDARD_MEANS: [[f64; 5]; 2] = [[0.3, 1.3, 2.4, 3.1, 2.75], [0.3, 0.9, 2.6, 2.2, 2.45]];

/// Five-class head phantom: CSF shell, cortex, white matter and two deep
/// nuclei of one class. Times default to a single baseline.
pub fn standard_spec(opts: StandardOptions) -> Result<PhantomSpec> {
    if opts.n_contrasts == 0 || opts.n_contrasts > 2 {
        return Err(Error::InvalidArgument(
            "standard phantom has one or two contrasts".into(),
        ));
    }
    let n = opts.size as f64;
    let c = [n / 2.0 - 0.37, n / 2.0 - 0.21, n / 2.0 - 0.13];
    let shell = |f: [f64; 3]| Ellipsoid {
        center: c,
        radii: f.map(|x| x * n),
    };
    let nucleus = |dx: f64| Ellipsoid {
        center: [c[0] + dx * n, c[1] + 0.04 * n, c[2]],
        radii: [0.075 * n, 0.1 * n, 0.07 * n],
    };
    let structures = vec![
        Structure {
            class: 2,
            parts: vec![shell([0.44, 0.42, 0.40])],
            rate: 0.0,
        },
        Structure {
            class: 3,
            parts: vec![shell([0.38, 0.36, 0.34])],
            rate: 0.0,
        },
        Structure {
            class: 4,
            parts: vec![shell([0.29, 0.27, 0.25])],
            rate: 0.0,
        },
        Structure {
            class: 5,
            parts: vec![nucleus(-0.12), nucleus(0.12)],
            rate: 0.0,
        },
    ];
    let nc = opts.n_contrasts;
    let means = (0..5)
        .map(|k| DVector::from_fn(nc, |i, _| STANDARD_MEANS[i][k]))
        .collect();
    let covs = (0..5)
        .map(|_| DMatrix::identity(nc, nc) * opts.noise.powi(2))
        .collect();
    let orders = [2, 2, 2];
    let mut coeffs = DMatrix::zeros(nc, n_basis(orders));
    if opts.bias_amplitude > 0.0 {
        let mut rng = SplitMix64::derive(opts.seed, 77);
        for i in 0..nc {
            for p in 1..coeffs.ncols() {
                coeffs[(i, p)] = rng.normal(0.0, opts.bias_amplitude / 3.0);
            }
        }
    }
    Ok(PhantomSpec {
        grid: VoxelGrid::cube(opts.size),
        n_classes: 5,
        structures,
        appearance: GaussianParams::new(means, covs)?,
        bias: (opts.bias_amplitude > 0.0).then_some(BiasSpec {
            orders,
            coeffs,
            jitter: opts.bias_amplitude / 10.0,
        }),
        seed: opts.seed,
        times: vec![0.0],
        lesions: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::applik::{self, VoxelData};
    use crate::metrics;
    use crate::volio::log_transform;

    fn spec(size: usize, seed: u64) -> PhantomSpec {
        standard_spec(StandardOptions {
            size,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_rate_keeps_labels() {
        let mut s = spec(24, 1);
        s.times = vec![0.0, 1.0, 2.0];
        let out = generate(&s).unwrap();
        assert_eq!(out.labels[0], out.labels[1]);
        assert_eq!(out.labels[0], out.labels[2]);
        assert_ne!(out.volumes[0].data, out.volumes[1].data);
    }

    #[test]
    fn atrophy_follows_nominal_rate() {
        let mut s = spec(32, 2);
        s.times = vec![0.0, 1.0, 2.0];
        s.structures[1].rate = -2.0;
        let out = generate(&s).unwrap();
        let v = out.table.structure("label3").unwrap();
        for (t, vt) in [1.0, 2.0].iter().zip(&v[1..]) {
            let target = v[0] * (1.0 - 0.02 * t);
            // One shell of voxels changes the count by far more than this.
            assert!((vt - target).abs() <= 0.002 * v[0], "{vt} vs {target}");
        }
        let others = out.table.structure("label4").unwrap();
        assert!(others.iter().all(|x| *x == others[0]));
        // The table is the label count of each volume.
        for (seg, (_, vols)) in out.labels.iter().zip(&out.table.entries) {
            assert_eq!(vols["label3"], seg.count(3) as f64);
        }
    }

    #[test]
    fn ground_truth_apc_at_64() {
        let mut s = spec(64, 3);
        s.times = vec![0.0, 1.0, 2.0];
        s.structures[1].rate = -2.0;
        let out = generate(&s).unwrap();
        let apc = metrics::apc(&out.table, "label3").unwrap();
        assert!((apc + 2.0).abs() < 0.3, "apc {apc}");
    }

    #[test]
    fn deterministic_and_seeded() {
        let s = spec(16, 4);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.volumes[0].data, b.volumes[0].data);
        let mut s2 = s.clone();
        s2.seed = 5;
        assert_ne!(generate(&s2).unwrap().volumes[0].data, a.volumes[0].data);
    }

    #[test]
    fn planted_bias_is_in_basis_span() {
        let s = standard_spec(StandardOptions {
            size: 16,
            noise: 1e-4,
            bias_amplitude: 0.2,
            seed: 6,
            ..Default::default()
        })
        .unwrap();
        let out = generate(&s).unwrap();
        let vol = log_transform(&out.volumes[0], 1e-6).unwrap();
        let vd = VoxelData::new(&vol, [2, 2, 2]).unwrap();
        // Remove the class means with the true labels; the remainder is the bias
        // plus noise and must be reproduced by least squares on the basis.
        let resid: Vec<f64> = (0..vd.len())
            .map(|i| vd.sample(i)[0] - s.appearance.means[out.labels[0].labels[i] as usize - 1][0])
            .collect();
        let p = vd.basis.n_basis;
        let a = DMatrix::from_fn(vd.len(), p, |i, j| vd.basis.row(i)[j]);
        let coef = a
            .clone()
            .svd(true, true)
            .solve(&DVector::from_vec(resid.clone()), 1e-12)
            .unwrap();
        let fit = &a * coef;
        let worst = resid
            .iter()
            .zip(fit.iter())
            .map(|(r, f)| (r - f).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "residual {worst}");
        let _ = applik::n_basis([2, 2, 2]);
    }

    fn cohort(n: usize, seed: u64) -> CohortSpec {
        let mut base = spec(32, 0);
        base.times = vec![0.0, 1.0, 2.0];
        CohortSpec {
            base,
            groups: vec![
                GroupSpec {
                    name: "control".into(),
                    rates: vec![(3, 0.0)],
                    rate_spread: 0.5,
                },
                GroupSpec {
                    name: "patient".into(),
                    rates: vec![(3, -2.0)],
                    rate_spread: 0.5,
                },
            ],
            n_per_group: n,
            geometry_jitter: 0.5,
            seed,
        }
    }

    #[test]
    fn cohort_group_means_match_nominal_rates() {
        let subjects = generate_cohort(&cohort(15, 11)).unwrap();
        assert_eq!(subjects.len(), 30);
        for (group, nominal) in [("control", 0.0), ("patient", -2.0)] {
            let apcs: Vec<f64> = subjects
                .iter()
                .filter(|s| s.group == group)
                .map(|s| metrics::apc(&s.output.table, "label3").unwrap())
                .collect();
            let mean = apcs.iter().sum::<f64>() / apcs.len() as f64;
            assert!((mean - nominal).abs() < 0.2, "{group}: {mean}");
        }
        assert!(generate_cohort(&cohort(0, 11)).unwrap().is_empty());
        let a = cohort_specs(&cohort(1, 1));
        let b = cohort_specs(&cohort(1, 2));
        assert_ne!(a[0].1.seed, b[0].1.seed);
    }

    #[test]
    fn lesions_are_planted_inside_host_and_grow() {
        let mut s = standard_spec(StandardOptions {
            size: 32,
            n_contrasts: 2,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        s.times = vec![0.0, 1.0];
        s.lesions = Some(LesionSpec {
            count: 4,
            radius_range: (1.5, 2.5),
            intensity_offset: vec![0.0, 0.8],
            host_class: 4,
            growth: 30.0,
        });
        let out = generate(&s).unwrap();
        let masks = out.lesion_masks.unwrap();
        let n0 = masks[0].iter().filter(|m| **m).count();
        let n1 = masks[1].iter().filter(|m| **m).count();
        assert!(n0 > 0 && n1 > n0);
        for (v, &m) in masks[0].iter().enumerate() {
            if m {
                assert_eq!(out.labels[0].labels[v], 4);
            }
        }
    }

    #[test]
    fn atlas_from_labels_is_a_valid_prior() {
        let out = generate(&spec(16, 9)).unwrap();
        let mesh = atlas_from_labels(&[&out.labels[0]], 4, 0.01).unwrap();
        let prior =
            crate::atlas::rasterize_prior(&mesh.reference, &mesh, &out.labels[0].grid).unwrap();
        let centre = out.labels[0].grid.index(8, 8, 8);
        assert!(prior[centre * 5 + 3] > 0.5);
        assert!(prior[0] > 0.9);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(16, 1);
        s.structures[0].parts[0].radii = [20.0; 3];
        assert!(generate(&s).is_err());
        let mut s = spec(16, 1);
        s.structures[0].rate = -150.0;
        assert!(generate(&s).is_err());
    }
}
