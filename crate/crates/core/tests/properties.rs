mod common;

use common::*;
use motion4d::bspline::{self, ControlGrid};
use motion4d::mcir;
use motion4d::metrics;
use motion4d::surrmodel::{self, MotionModel, SurrogateMatrix};
use motion4d::volgrid::{self, Grid3, Mask, Volume};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Grid3> {
    (2usize..7, 2usize..6, 2usize..6, 0.5f64..3.0, 0.5f64..3.0, 1.0f64..4.0)
        .prop_map(|(nx, ny, nz, sx, sy, sz)| Grid3::new([nx, ny, nz], [sx, sy, sz], [0.0, 1.0, -2.0]).unwrap())
}

fn volume_for(g: Grid3, seed: u64) -> Volume {
    smooth_volume(g, seed, 500.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extract_insert_round_trip(g in grid_strategy(), seed in 0u64..1000, a in 0usize..6, b in 0usize..6) {
        let vol = volume_for(g, seed);
        let nz = g.dims[2];
        let (lo, hi) = ((a % nz).min(b % nz), (a % nz).max(b % nz));
        let seg = volgrid::extract_segment(&vol, lo, hi, 3).unwrap();
        for z in lo..=hi {
            prop_assert_eq!(&seg.values[(z - lo) * g.slice_len()..(z - lo + 1) * g.slice_len()], vol.slice(z));
        }
        let mut other = vol.clone();
        volgrid::insert_segment(&mut other, &seg).unwrap();
        prop_assert_eq!(other, vol);
    }

    #[test]
    fn basis_is_partition_of_unity(u in 0.0f64..1.0) {
        let w = bspline::basis_weights(u).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn dsc_symmetric_and_bounded(g in grid_strategy(), seed in 0u64..1000) {
        let a = Mask::from_threshold(g, &volume_for(g, seed).values.iter().map(|&v| v as f64).collect::<Vec<_>>(), 0.0);
        let b = Mask::from_threshold(g, &volume_for(g, seed + 1).values.iter().map(|&v| v as f64).collect::<Vec<_>>(), 0.0);
        let ab = metrics::dsc(&a, &b).unwrap();
        prop_assert_eq!(ab, metrics::dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn rmse_triangle(g in grid_strategy(), seed in 0u64..1000) {
        let (a, b, c) = (volume_for(g, seed), volume_for(g, seed + 1), volume_for(g, seed + 2));
        let ac = metrics::rmse(&a, &c, None).unwrap();
        let ab = metrics::rmse(&a, &b, None).unwrap();
        let bc = metrics::rmse(&b, &c, None).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn warp_extract_and_scatter_are_adjoint(g in grid_strategy(), seed in 0u64..1000, cs in 2.0f64..8.0, amp in 0.0f64..4.0) {
        let x = volume_for(g, seed);
        let lat = ControlGrid::zeros(g, [cs, cs, cs * 1.5], g.origin).unwrap();
        let cg = random_grid(&lat, seed + 7, amp);
        let y = volgrid::extract_segment(&volume_for(g, seed + 3), 0, g.dims[2] - 1, 0).unwrap();
        let ax = bspline::warp_slab(&x, &cg, y.z_lo, y.z_hi, 0.0).unwrap();
        let lhs: f64 = ax.iter().zip(&y.values).map(|(a, b)| a * *b as f64).sum();
        let mut acc = vec![0.0; g.len()];
        let mut w = vec![0.0; g.len()];
        mcir::adjoint_scatter(&y, &cg, &mut acc, &mut w).unwrap();
        let rhs: f64 = acc.iter().zip(&x.values).map(|(a, b)| a * *b as f64).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * scale, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn zero_field_warp_is_identity(g in grid_strategy(), seed in 0u64..1000) {
        let vol = volume_for(g, seed);
        let cg = ControlGrid::zeros(g, [4.0, 4.0, 6.0], g.origin).unwrap();
        prop_assert_eq!(bspline::warp_volume(&vol, &cg).unwrap(), vol);
    }

    #[test]
    fn integer_translation_is_exact(seed in 0u64..1000, sx in -2i64..3, sy in -2i64..3, sz in -1i64..2) {
        let g = Grid3::new([7, 6, 5], [2.0, 1.5, 3.0], [0.0; 3]).unwrap();
        let vol = volume_for(g, seed);
        let mut cg = ControlGrid::zeros(g, [4.0, 4.0, 6.0], g.origin).unwrap();
        let d = [sx as f64 * 2.0, sy as f64 * 1.5, sz as f64 * 3.0];
        cg.disp.iter_mut().for_each(|v| *v = d);
        let out = bspline::warp_volume(&vol, &cg).unwrap();
        for z in 0..5i64 {
            for y in 0..6i64 {
                for x in 0..7i64 {
                    let (qx, qy, qz) = (x + sx, y + sy, z + sz);
                    if (0..7).contains(&qx) && (0..6).contains(&qy) && (0..5).contains(&qz) {
                        prop_assert_eq!(out.at(x as usize, y as usize, z as usize), vol.at(qx as usize, qy as usize, qz as usize));
                    }
                }
            }
        }
    }

    #[test]
    fn objective_invariant_under_signal_rescaling(seed in 0u64..1000, k in 0.2f64..5.0) {
        let g = Grid3::new([8, 7, 6], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let vol = volume_for(g, seed);
        let lat = ControlGrid::zeros(g, [6.0, 6.0, 9.0], g.origin).unwrap();
        let c = MotionModel::new(vec![random_grid(&lat, seed + 1, 1.5)]).unwrap();
        let s = SurrogateMatrix::from_rows(&[vec![0.4, -1.2]]).unwrap();
        let segs = vec![
            volgrid::extract_segment(&volume_for(g, seed + 2), 0, 2, 0).unwrap(),
            volgrid::extract_segment(&volume_for(g, seed + 3), 3, 5, 1).unwrap(),
        ];
        let f = surrmodel::objective(&vol, &s, &c, &segs).unwrap();
        let s2 = SurrogateMatrix::from_rows(&[vec![0.4 * k, -1.2 * k]]).unwrap();
        let mut c2 = c.clone();
        c2.c[0].scale(1.0 / k);
        let f2 = surrmodel::objective(&vol, &s2, &c2, &segs).unwrap();
        prop_assert!((f - f2).abs() <= 1e-9 * f.max(1.0));
    }

    #[test]
    fn surrogate_csv_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 6)) {
        let s = SurrogateMatrix::new(2, 3, vals).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        prop_assert_eq!(SurrogateMatrix::read_csv(&p).unwrap(), s);
    }
}

#[test]
fn sse_is_local_to_knot_support() {
    let g = Grid3::new([16, 12, 16], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
    let vol = volume_for(g, 1);
    let lat = ControlGrid::zeros(g, [6.0, 6.0, 6.0], g.origin).unwrap();
    let cg = random_grid(&lat, 2, 1.0);
    let seg = volgrid::extract_segment(&volume_for(g, 3), 0, 1, 0).unwrap();
    let f = bspline::segment_sse(&vol, &cg, &seg).unwrap();
    // knots whose support starts above the slab's top slice (z = 3 mm)
    for k in 0..lat.cdims[2] {
        let kz = lat.knot_position(0, 0, k)[2];
        if kz - 2.0 * lat.cspacing[2] >= 3.0 {
            let mut p = cg.clone();
            for j in 0..lat.cdims[1] {
                for i in 0..lat.cdims[0] {
                    p.disp[lat.index(i, j, k)][2] += 5.0;
                }
            }
            assert_eq!(bspline::segment_sse(&vol, &p, &seg).unwrap(), f);
        }
    }
}

#[test]
fn mcir_leaves_unobserved_voxels_alone() {
    let g = Grid3::new([6, 5, 8], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
    let truth = volume_for(g, 4);
    let start = volume_for(g, 5);
    let lat = ControlGrid::zeros(g, [6.0, 6.0, 9.0], g.origin).unwrap();
    let c = MotionModel::zeros(&lat, 1).unwrap();
    let s = SurrogateMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let segs = vec![
        volgrid::extract_segment(&truth, 0, 2, 0).unwrap(),
        volgrid::extract_segment(&truth, 3, 4, 1).unwrap(),
    ];
    let (out, st) = mcir::mcir_run(&start, &s, &c, &segs, 5, 0.0, &Default::default()).unwrap();
    assert!(st.history.windows(2).all(|w| w[1] <= w[0]));
    for z in 5..8 {
        assert_eq!(out.slice(z), start.slice(z));
    }
    let cov = mcir::coverage(&start, &s, &c, &segs).unwrap();
    assert_eq!(cov.count(), 5 * g.slice_len());
}
