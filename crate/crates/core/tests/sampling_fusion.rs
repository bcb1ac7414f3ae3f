mod common;

use std::sync::Arc;

use common::{grad_check, random_tensor};
use poifusion_core::autodiff::{Tape, Var};
use poifusion_core::fusion::{FusionBlock, FusionMode};
use poifusion_core::geometry::{ring_rig, BevGrid};
use poifusion_core::nn::ParamStore;
use poifusion_core::poi::PoiLayout;
use poifusion_core::sampling::{bilinear, sample_bev, sample_image, select_views, ViewSelection};
use poifusion_core::scene::{generate_scene, BevFields, OracleEncoder, LEVEL_STRIDES};
use poifusion_core::tensor::Tensor;
use poifusion_core::SceneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_grid() -> BevGrid {
    BevGrid { x_min: -4.8, y_min: -4.8, x_max: 4.8, y_max: 4.8, voxel_x: 0.15, voxel_y: 0.15, downsample: 8 }
}

fn points(rows: &[[f64; 3]]) -> Tensor {
    Tensor::matrix(rows.len(), 3, rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn plain_bilinear_lattice_and_affine() {
    let mut r = rng(1);
    let map = random_tensor(&[3, 5, 6], &mut r, 1.0);
    for (u, v) in [(0usize, 0usize), (5, 4), (2, 3)] {
        let s = bilinear(&map, u as f64, v as f64);
        for c in 0..3 {
            assert_eq!(s[c], map.at3(c, v, u));
        }
    }
    let affine =
        Tensor::new(&[1, 6, 6], (0..36).map(|i| 2.0 * (i % 6) as f64 + 3.0 * (i / 6) as f64).collect()).unwrap();
    assert!((bilinear(&affine, 1.5, 2.25)[0] - 9.75).abs() < 1e-9);
    assert_eq!(bilinear(&affine, -3.0, 2.0), vec![0.0]);
    assert_eq!(bilinear(&affine, 2.0, 9.0), vec![0.0]);
}

#[test]
fn bev_sampling_constant_map_and_padding() {
    let g = small_grid();
    let layout = PoiLayout { queries: 1, groups: 2, anchors: 2 };
    let mut t = Tape::new();
    let bev = t.constant(Tensor::full(&[4, 8, 8], 0.7));
    // range origin and a point far outside
    let pts = t.constant(points(&[[-4.8, -4.8, 0.0], [30.0, 0.0, 0.0], [-4.8, -4.8, 1.0], [0.0, -40.0, 0.0]]));
    let s = sample_bev(&mut t, bev, pts, &g, &layout).unwrap();
    let v = t.value(s);
    assert_eq!(v.shape(), &[4, 2]);
    assert_eq!(v.row(0), &[0.7, 0.7]);
    assert_eq!(v.row(1), &[0.0, 0.0]);
    assert_eq!(v.row(2), &[0.7, 0.7]);
    assert_eq!(v.row(3), &[0.0, 0.0]);
}

#[test]
fn bev_groups_read_their_channel_slice() {
    let g = small_grid();
    let layout = PoiLayout { queries: 1, groups: 2, anchors: 1 };
    let data: Vec<f64> = (0..4).flat_map(|c| vec![c as f64; 64]).collect();
    let mut t = Tape::new();
    let bev = t.constant(Tensor::new(&[4, 8, 8], data).unwrap());
    let pts = t.constant(points(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]));
    let s = sample_bev(&mut t, bev, pts, &g, &layout).unwrap();
    assert_eq!(t.value(s).data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn bev_ramp_recovers_metric_x() {
    let mut cfg = SceneConfig::default();
    cfg.features.channels = 32;
    let scene = generate_scene(&cfg, 4).unwrap();
    let enc = OracleEncoder::new(&cfg);
    let atlas = enc.encode(&scene).unwrap();
    let layout = PoiLayout { queries: 1, groups: 1, anchors: 1 };
    let mut r = rng(2);
    let (cell, _) = cfg.grid.cell_size();
    for _ in 0..50 {
        // interior of the sampled lattice
        let (x, y) = (r.random_range(-14.4..14.4 - cell), r.random_range(-14.4..14.4 - cell));
        let mut t = Tape::new();
        let bev = t.shared(Arc::clone(&atlas.bev), false);
        let p = t.constant(points(&[[x, y, 0.5]]));
        let s = sample_bev(&mut t, bev, p, &cfg.grid, &layout).unwrap();
        let fields = enc.unlift_bev(t.value(s).data());
        // the ramp is affine, so interpolation error is far below half a cell
        assert!((fields[BevFields::X] - x).abs() < 1e-9 && (fields[BevFields::Y] - y).abs() < 1e-9);
    }
}

fn image_setup() -> (Vec<poifusion_core::CameraModel>, Vec<Tensor>) {
    let rig = ring_rig(1, 110.0, 64, 64, [0.0, 0.0, 1.6]);
    let mut r = rng(7);
    let levels = LEVEL_STRIDES
        .iter()
        .map(|&s| {
            let n = (64.0 / s) as usize;
            random_tensor(&[4, n, n], &mut r, 1.0)
        })
        .collect();
    (rig, levels)
}

fn run_image(
    rig: &[poifusion_core::CameraModel],
    levels: &[Tensor],
    pt: [f64; 3],
    logits: [f64; 4],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let layout = PoiLayout { queries: 1, groups: 1, anchors: 1 };
    let mut t = Tape::new();
    let pyr: Vec<Vec<Var>> = vec![levels.iter().map(|l| t.constant(l.clone())).collect()];
    let p = t.constant(points(&[pt]));
    let sel = select_views(t.value(p), rig, ViewSelection::Deterministic, &mut rng(0));
    let lg = t.constant(Tensor::matrix(1, 4, logits.to_vec()).unwrap());
    let out = sample_image(&mut t, &pyr, rig, p, &sel, lg, &layout, 4).unwrap();
    let per_level = match sel[0] {
        Some(c) => {
            let pr = rig[c].project(pt).unwrap();
            levels.iter().zip(LEVEL_STRIDES).map(|(l, s)| bilinear(l, pr.u / s, pr.v / s)).collect()
        }
        None => vec![],
    };
    (t.value(out).data().to_vec(), per_level)
}

#[test]
fn equal_scale_logits_average_levels() {
    let (rig, levels) = image_setup();
    let (out, per) = run_image(&rig, &levels, [8.0, 1.0, 1.0], [0.3; 4]);
    for c in 0..4 {
        let mean = per.iter().map(|l| l[c]).sum::<f64>() / 4.0;
        assert!((out[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn saturated_logit_selects_one_level() {
    let (rig, levels) = image_setup();
    let (out, per) = run_image(&rig, &levels, [8.0, -1.0, 0.5], [0.0, 0.0, 20.0, 0.0]);
    for c in 0..4 {
        assert!((out[c] - per[2][c]).abs() < 1e-6);
    }
}

#[test]
fn invisible_points_read_zeros() {
    let (rig, levels) = image_setup();
    let (out, per) = run_image(&rig, &levels, [-8.0, 0.0, 1.0], [1.0, 2.0, 3.0, 4.0]);
    assert!(per.is_empty());
    assert_eq!(out, vec![0.0; 4]);
}

#[test]
fn view_selection_modes() {
    let rig = ring_rig(4, 120.0, 160, 96, [0.0, 0.0, 1.6]);
    let pts = points(&[[10.0, 10.0, 1.6], [-10.0, 0.0, 1.0], [0.0, 0.0, 40.0]]);
    let det = select_views(&pts, &rig, ViewSelection::Deterministic, &mut rng(0));
    assert_eq!(det, vec![Some(0), Some(2), None]);
    let mut seen = [false; 4];
    for s in 0..64 {
        let a = select_views(&pts, &rig, ViewSelection::Random, &mut rng(s));
        assert_eq!(a, select_views(&pts, &rig, ViewSelection::Random, &mut rng(s)));
        let v = a[0].unwrap();
        assert!(v == 0 || v == 1);
        seen[v] = true;
        assert_eq!(a[1], Some(2));
        assert_eq!(a[2], None);
    }
    assert!(seen[0] && seen[1]);
}

#[test]
fn image_sampling_gradient_wrt_points_and_logits() {
    let (rig, levels) = image_setup();
    let layout = PoiLayout { queries: 1, groups: 2, anchors: 1 };
    let pts = points(&[[8.0, 1.3, 1.1], [7.3, -2.1, 0.4]]);
    let logits = random_tensor(&[2, 4], &mut rng(3), 1.0);
    let sel = select_views(&pts, &rig, ViewSelection::Deterministic, &mut rng(0));
    let worst = grad_check(&[pts, logits], &|t: &mut Tape, v: &[Var]| {
        let pyr: Vec<Vec<Var>> = vec![levels.iter().map(|l| t.constant(l.clone())).collect()];
        sample_image(t, &pyr, &rig, v[0], &sel, v[1], &layout, 2).unwrap()
    });
    assert!(worst < 1e-4, "worst {worst}");
}

fn fusion(c: usize, g: usize, a: usize, mode: FusionMode) -> (ParamStore, FusionBlock) {
    let mut store = ParamStore::new();
    let f = FusionBlock::new(&mut store, c, g, a, mode, &mut rng(11)).unwrap();
    (store, f)
}

fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty());
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn fuse_values(
    store: &ParamStore,
    f: &FusionBlock,
    feat: &Tensor,
    fp: &Tensor,
    fi: &Tensor,
    layout: &PoiLayout,
) -> Tensor {
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let (a, b, c) = (t.constant(feat.clone()), t.constant(fp.clone()), t.constant(fi.clone()));
    let out = f.fuse(&mut t, &p, a, b, c, layout).unwrap();
    t.value(out).clone()
}

#[test]
fn zero_generated_layers_cascade_to_zero() {
    let (mut store, f) = fusion(8, 2, 3, FusionMode::Dynamic);
    zero_params(&mut store, "fusion.hyper_");
    let layout = PoiLayout { queries: 2, groups: 2, anchors: 3 };
    let mut r = rng(4);
    let out = fuse_values(
        &store,
        &f,
        &random_tensor(&[2, 8], &mut r, 1.0),
        &random_tensor(&[12, 4], &mut r, 1.0),
        &random_tensor(&[12, 4], &mut r, 1.0),
        &layout,
    );
    assert_eq!(out.shape(), &[4, 3, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_aggregation_is_residual_identity() {
    let (mut store, f) = fusion(8, 2, 3, FusionMode::Dynamic);
    zero_params(&mut store, "fusion.aggregate");
    let mut r = rng(5);
    let feat = random_tensor(&[2, 8], &mut r, 1.0);
    let fused = random_tensor(&[4, 3, 4], &mut r, 1.0);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let (a, b) = (t.constant(fused), t.constant(feat.clone()));
    let out = f.aggregate(&mut t, &p, a, b).unwrap();
    assert_eq!(t.value(out), &feat);
}

#[test]
fn aggregation_is_order_sensitive() {
    let (store, f) = fusion(8, 2, 3, FusionMode::Dynamic);
    let mut r = rng(6);
    let feat = random_tensor(&[1, 8], &mut r, 1.0);
    let fused = random_tensor(&[2, 3, 4], &mut r, 1.0);
    let mut swapped = fused.clone();
    // exchange PoIs 0 and 1 of the first group
    for c in 0..4 {
        swapped.data_mut().swap(c, 4 + c);
    }
    let run = |x: &Tensor| {
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let (a, b) = (t.constant(x.clone()), t.constant(feat.clone()));
        let o = f.aggregate(&mut t, &p, a, b).unwrap();
        t.value(o).clone()
    };
    let (o1, o2) = (run(&fused), run(&swapped));
    let diff: f64 = o1.data().iter().zip(o2.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn center_only_concat_width() {
    let (_, f) = fusion(256, 4, 1, FusionMode::Dynamic);
    assert_eq!(f.aggregate.fan_in, 256);
    let (_, f) = fusion(256, 4, 9, FusionMode::Dynamic);
    assert_eq!(f.aggregate.fan_in, 4 * 9 * 64);
}

#[test]
fn static_fusion_has_no_generating_heads() {
    let (store, f) = fusion(8, 2, 3, FusionMode::Static);
    let names: Vec<&str> = store.ids().map(|id| store.name(id)).collect();
    assert!(names.iter().all(|n| !n.starts_with("fusion.hyper")));
    assert!(names.contains(&"fusion.static_w1"));
    // shared weights: identical PoI inputs under different query features fuse identically
    let layout = PoiLayout { queries: 2, groups: 2, anchors: 3 };
    let mut r = rng(8);
    let one = random_tensor(&[6, 4], &mut r, 1.0);
    let fp = Tensor::matrix(12, 4, [one.data(), one.data()].concat()).unwrap();
    let fi = fp.clone();
    let out = fuse_values(&store, &f, &random_tensor(&[2, 8], &mut r, 1.0), &fp, &fi, &layout);
    assert_eq!(&out.data()[..24], &out.data()[24..]);
}

#[test]
fn fusion_gradient_wrt_generating_heads() {
    let (store, f) = fusion(6, 2, 2, FusionMode::Dynamic);
    let layout = PoiLayout { queries: 2, groups: 2, anchors: 2 };
    let hyper = store.by_name("fusion.hyper_w1.weight").unwrap();
    let mut r = rng(9);
    // larger generating weights so the generated layers are far from zero
    let w = random_tensor(store.get(hyper).shape(), &mut r, 0.5);
    let feat = random_tensor(&[2, 6], &mut r, 1.0);
    let fp = random_tensor(&[8, 3], &mut r, 1.0);
    let fi = random_tensor(&[8, 3], &mut r, 1.0);
    let worst = grad_check(&[w, feat, fp, fi], &|t: &mut Tape, v: &[Var]| {
        let mut s = store.clone();
        s.set(hyper, t.value(v[0]).clone()).unwrap();
        let p = s.bind(t);
        // route the generating weight through the tape input
        let p = p.with(hyper, v[0]);
        let fused = f.fuse(t, &p, v[1], v[2], v[3], &layout).unwrap();
        f.aggregate(t, &p, fused, v[1]).unwrap()
    });
    assert!(worst < 1e-4, "worst {worst}");
}
