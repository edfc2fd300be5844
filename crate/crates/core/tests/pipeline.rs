use longseg_core::atlas;
use longseg_core::longit::{self, LongConfig};
use longseg_core::phantom::{self, StandardOptions};
use longseg_core::volio::{self, MultiContrastVolume};
use longseg_core::xsect::{self, FitConfig};

fn spec(size: usize, seed: u64) -> phantom::PhantomSpec {
    phantom::standard_spec(StandardOptions {
        size,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn log(vol: &MultiContrastVolume) -> MultiContrastVolume {
    volio::log_transform_relative(vol, 1e-4).unwrap()
}

fn agreement(a: &[u32], b: &[u32]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[test]
fn cross_fit_recovers_phantom_labels() {
    let s = spec(24, 2);
    let out = phantom::generate(&s).unwrap();
    let others: Vec<_> = (0..3)
        .map(|i| {
            let mut o = spec(24, 50 + i);
            o.structures = s.structures.clone();
            phantom::generate(&o).unwrap().labels.remove(0)
        })
        .collect();
    let refs: Vec<_> = others.iter().collect();
    let mesh = phantom::atlas_from_labels(&refs, 4, 0.01).unwrap();

    let vol = log(&out.volumes[0]);
    let fit = xsect::fit_cross(&vol, &mesh, &FitConfig::default()).unwrap();
    let seg = xsect::segment(&vol, &mesh, &fit.x_hat, &fit.gauss, &fit.bias).unwrap();
    let score = agreement(&seg.labels, &out.labels[0].labels);
    assert!(score > 0.9, "label agreement {score}");
}

#[test]
fn longitudinal_fit_tracks_every_time_point() {
    let mut s = spec(16, 5);
    s.times = vec![0.0, 1.0, 2.0];
    let out = phantom::generate(&s).unwrap();
    let refs: Vec<_> = out.labels.iter().take(1).collect();
    let mesh = phantom::atlas_from_labels(&refs, 4, 0.01).unwrap();
    let vols: Vec<_> = out.volumes.iter().map(log).collect();
    let fit = longit::fit_longitudinal(&vols, &mesh, &LongConfig::default()).unwrap();
    assert_eq!(fit.timepoints.len(), 3);
    for (tp, truth) in fit.timepoints.iter().zip(&out.labels) {
        let score = agreement(&tp.labels.labels, &truth.labels);
        assert!(score > 0.9, "label agreement {score}");
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(12, 1);
    let out = phantom::generate(&s).unwrap();
    let refs: Vec<_> = out.labels.iter().collect();
    let mesh = phantom::atlas_from_labels(&refs, 4, 0.01).unwrap();

    let vpath = dir.path().join("v.mgv");
    volio::write_volume(&out.volumes[0], &vpath).unwrap();
    let back = volio::read_volume(&vpath).unwrap();
    assert_eq!(back.data, out.volumes[0].data);

    let lpath = dir.path().join("l.mgv");
    volio::write_labels(&out.labels[0], &lpath).unwrap();
    let labels = volio::read_labels(&lpath, Some(s.n_classes)).unwrap();
    assert_eq!(labels.labels, out.labels[0].labels);

    let apath = dir.path().join("atlas.txt");
    atlas::write_atlas(&mesh, &apath).unwrap();
    let m = atlas::read_atlas(&apath).unwrap();
    assert_eq!(m.tets, mesh.tets);
    assert_eq!(m.reference.0, mesh.reference.0);
    assert_eq!(m.alphas, mesh.alphas);

    let tpath = dir.path().join("t.csv");
    volio::write_volume_table(std::slice::from_ref(&out.table), &tpath).unwrap();
    let table = volio::read_volume_table(&tpath).unwrap();
    assert_eq!(table[0].structures(), out.table.structures());
    assert_eq!(table[0].structure("label3"), out.table.structure("label3"));
}
