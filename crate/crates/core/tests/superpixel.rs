mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarline::superpixel::{
    adherence_dice, adherence_sweep, assign, grid_seeds, maps_from_label_volume, mask_slice,
    slic_distance, slic_kmeans, slic_segment, slic_volume, superpixel_label_volume, Center,
    SlicParams, Slice, SuperpixelMap,
};
use scarline::volume::{labels, make_phantom, PhantomSpec, ScarArc, Shell};

fn random_slice(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Slice {
    Slice::new(
        w,
        h,
        (0..w * h).map(|_| rng.random_range(0.0..100.0)).collect(),
    )
    .unwrap()
}

fn pixel(s: &Slice, i: usize) -> Center {
    Center {
        x: (i % s.width) as f64,
        y: (i / s.width) as f64,
        intensity: s.data[i],
    }
}

/// Every pixel scans every centre; a centre competes if the pixel lies
/// within S of it on both axes. `incumbent` gives each pixel's current
/// centre, which competes wherever it is.
fn brute_assign(
    s: &Slice,
    centers: &[Center],
    p: &SlicParams,
    incumbent: Option<&[u32]>,
) -> Vec<u32> {
    (0..s.data.len())
        .map(|i| {
            let px = pixel(s, i);
            let mut best = match incumbent {
                Some(l) => (l[i], slic_distance(px, centers[l[i] as usize], p.s, p.m)),
                None => (u32::MAX, f64::INFINITY),
            };
            for (k, c) in centers.iter().enumerate() {
                let reach = p.s as f64;
                if (px.x - c.x).abs() <= reach && (px.y - c.y).abs() <= reach {
                    let d = slic_distance(px, *c, p.s, p.m);
                    if d < best.1 {
                        best = (k as u32, d);
                    }
                }
            }
            best.0
        })
        .collect()
}

fn is_four_connected(map: &SuperpixelMap) -> bool {
    let members = map.members();
    members.iter().all(|pix| {
        let set: std::collections::HashSet<usize> = pix.iter().copied().collect();
        let mut seen = std::collections::HashSet::from([pix[0]]);
        let mut stack = vec![pix[0]];
        while let Some(i) = stack.pop() {
            let (x, y) = (i % map.width, i / map.width);
            let mut nb = Vec::new();
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < map.width {
                nb.push(i + 1);
            }
            if y > 0 {
                nb.push(i - map.width);
            }
            if y + 1 < map.height {
                nb.push(i + map.width);
            }
            for j in nb {
                if set.contains(&j) && seen.insert(j) {
                    stack.push(j);
                }
            }
        }
        seen.len() == pix.len()
    })
}

fn wall_phantom() -> (
    scarline::volume::ScalarVolume,
    scarline::volume::LabelVolume,
) {
    let spec = PhantomSpec {
        dims: [64, 64, 5],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        background: 30.0,
        shells: vec![Shell {
            label: labels::LA,
            center: [31.5, 31.5, 2.0],
            radius: 18.0,
            wall_thickness: 3.0,
            pool_intensity: 300.0,
            wall_intensity: 90.0,
        }],
        scar_arcs: vec![ScarArc {
            shell: 0,
            start_deg: 0.0,
            extent_deg: 90.0,
            boost: 200.0,
        }],
        blobs: vec![],
        blur_sigma_mm: 0.7,
        noise_sigma: 5.0,
        seed: 4,
    };
    make_phantom(&spec).unwrap()
}

#[test]
fn distance_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let p = Center {
            x: rng.random_range(0.0..50.0),
            y: rng.random_range(0.0..50.0),
            intensity: rng.random_range(-5.0..5.0),
        };
        let c = Center {
            x: rng.random_range(0.0..50.0),
            y: rng.random_range(0.0..50.0),
            intensity: rng.random_range(-5.0..5.0),
        };
        let s = rng.random_range(2..10);
        let m = rng.random_range(0.5..40.0);
        let dc = p.intensity - c.intensity;
        let ds = ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt();
        let want = (dc * dc + (ds / s as f64).powi(2) * m * m).sqrt();
        assert!((slic_distance(p, c, s, m) - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn constant_image_gives_the_seed_grid() {
    let s = Slice::new(16, 16, vec![5.0; 256]).unwrap();
    let map = slic_segment(&s, &SlicParams::default()).unwrap();
    assert_eq!(map.len(), 16);
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(map.label_at(x, y), (x / 4 + 4 * (y / 4)) as u32);
        }
    }
    assert!(map.centroids.iter().all(|c| c.count == 16));
}

#[test]
fn vertical_edge_is_never_straddled() {
    for edge in [5, 7, 8, 11] {
        let data = (0..256)
            .map(|i| if i % 16 < edge { 10.0 } else { 200.0 })
            .collect();
        let s = Slice::new(16, 16, data).unwrap();
        let map = slic_segment(&s, &SlicParams::default()).unwrap();
        for pix in map.members() {
            let left = pix.iter().filter(|&&i| i % 16 < edge).count();
            assert!(left == 0 || left == pix.len(), "edge {edge}");
        }
        // Boundary recall: every pixel pair across the edge is split.
        for y in 0..16 {
            assert_ne!(map.label_at(edge - 1, y), map.label_at(edge, y));
        }
    }
}

#[test]
fn first_iteration_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let s = random_slice(&mut rng, 8, 8);
        let p = SlicParams {
            s: rng.random_range(2..5),
            m: rng.random_range(0.5..30.0),
            iterations: 1,
            perturb_seeds: false,
            ..Default::default()
        };
        let seeds = grid_seeds(&s, p.s);
        let trace = slic_kmeans(&s, &p).unwrap();
        assert_eq!(trace.labels, brute_assign(&s, &seeds, &p, None));
    }
}

#[test]
fn later_sweeps_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(6..20), rng.random_range(6..20));
        let s = random_slice(&mut rng, w, h);
        let p = SlicParams {
            s: rng.random_range(2..5),
            m: rng.random_range(0.5..30.0),
            ..Default::default()
        };
        // Arbitrary centres and a current labelling.
        let centers: Vec<Center> = (0..rng.random_range(1..12))
            .map(|_| Center {
                x: rng.random_range(0.0..w as f64),
                y: rng.random_range(0.0..h as f64),
                intensity: rng.random_range(0.0..100.0),
            })
            .collect();
        let current: Vec<u32> = (0..w * h)
            .map(|_| rng.random_range(0..centers.len()) as u32)
            .collect();
        let mut labels = current.clone();
        assign(&s, &centers, p.s, p.m, &mut labels, true);
        assert_eq!(labels, brute_assign(&s, &centers, &p, Some(&current)));
        // Pixels that moved went to a centre whose window holds them.
        for (i, (&a, &b)) in labels.iter().zip(&current).enumerate() {
            if a != b {
                let c = centers[a as usize];
                let px = pixel(&s, i);
                assert!((px.x - c.x).abs() <= p.s as f64 && (px.y - c.y).abs() <= p.s as f64);
            }
        }
    }
}

#[test]
fn energy_never_rises() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (img, _) = wall_phantom();
    let mut slices: Vec<Slice> = (0..5).map(|z| Slice::of_volume(&img, z)).collect();
    for _ in 0..60 {
        let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
        slices.push(random_slice(&mut rng, w, h));
    }
    for s in &slices {
        for m in [1.0, 4.0, 40.0] {
            let trace = slic_kmeans(
                s,
                &SlicParams {
                    m,
                    ..Default::default()
                },
            )
            .unwrap();
            for w in trace.energies.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn clusters_are_connected_with_exact_centroids() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (img, _) = wall_phantom();
    let mut slices = vec![Slice::of_volume(&img, 2)];
    for _ in 0..30 {
        slices.push(random_slice(&mut rng, 24, 17));
    }
    for s in &slices {
        let map = slic_segment(s, &SlicParams::default()).unwrap();
        assert!(is_four_connected(&map));
        for (c, pix) in map.centroids.iter().zip(map.members()) {
            assert_eq!(c.count, pix.len());
            let n = pix.len() as f64;
            let mx = pix.iter().map(|&i| (i % s.width) as f64).sum::<f64>() / n;
            let mv = pix.iter().map(|&i| s.data[i]).sum::<f64>() / n;
            assert!((c.x - mx).abs() < 1e-9 && (c.intensity - mv).abs() < 1e-9);
        }
        let mut ids: Vec<u32> = map.labels.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids, (0..map.len() as u32).collect::<Vec<_>>());
    }
}

#[test]
fn volume_runs_are_deterministic_and_stack_uniquely() {
    let (img, _) = wall_phantom();
    let p = SlicParams::default();
    let a = slic_volume(&img, &p).unwrap();
    assert_eq!(a, slic_volume(&img, &p).unwrap());
    let lv = superpixel_label_volume(img.geometry(), &a).unwrap();
    let total: usize = a.iter().map(|m| m.len()).sum();
    assert_eq!(lv.present_labels().len(), total);
    assert!(!lv.present_labels().contains(&0));
    // reading the stack back gives the same partition of every slice
    let back = maps_from_label_volume(&lv, Some(&img)).unwrap();
    for (m, b) in a.iter().zip(&back) {
        let mut x = m.members();
        let mut y = b.members();
        x.sort();
        y.sort();
        assert_eq!(x, y);
        for (ids, c) in b.members().iter().zip(&b.centroids) {
            assert_eq!(ids.len(), c.count);
        }
    }
}

#[test]
fn rejects_tiny_slices_and_bad_params() {
    let s = Slice::new(3, 8, vec![0.0; 24]).unwrap();
    assert!(slic_segment(&s, &SlicParams::default()).is_err());
    let ok = Slice::new(8, 8, vec![0.0; 64]).unwrap();
    for bad in [
        SlicParams {
            s: 1,
            ..Default::default()
        },
        SlicParams {
            m: 0.0,
            ..Default::default()
        },
        SlicParams {
            iterations: 0,
            ..Default::default()
        },
    ] {
        assert!(slic_segment(&ok, &bad).is_err());
    }
}

#[test]
fn adherence_of_whole_superpixels_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_slice(&mut rng, 20, 20);
    let map = slic_segment(&s, &SlicParams::default()).unwrap();
    let chosen = [0u32, 3, 7];
    let truth: Vec<bool> = map.labels.iter().map(|l| chosen.contains(l)).collect();
    assert_eq!(adherence_dice(&map, &truth, 0.2).unwrap(), 1.0);
    assert!(adherence_dice(&map, &vec![false; 400], 0.2).is_err());
    assert!(adherence_dice(&map, &truth, 0.0).is_err());
}

fn sweep_on(
    truth: &scarline::volume::Mask,
    img: &scarline::volume::ScalarVolume,
) -> Vec<(f64, f64)> {
    adherence_sweep(
        &Slice::of_volume(img, 2),
        &mask_slice(truth, 2),
        &SlicParams::default(),
        &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
        0.2,
    )
    .unwrap()
}

fn spread(sweep: &[(f64, f64)]) -> f64 {
    let lo = sweep.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = sweep.iter().map(|r| r.1).fold(0.0, f64::max);
    hi - lo
}

// Measured: blood-pool adherence is nearly flat in m, wall adherence climbs
// with m because the thin band is noise-dominated at low compactness.
#[test]
fn compactness_sweep_stays_in_band() {
    let (img, lab) = wall_phantom();
    let pool = sweep_on(&lab.mask_of(&[labels::LA]), &img);
    let wall = sweep_on(&lab.mask_of(&[labels::WALL, labels::SCAR]), &img);
    eprintln!("pool spread {:.3} {pool:?}", spread(&pool));
    eprintln!("wall spread {:.3} {wall:?}", spread(&wall));
    assert!(pool.iter().all(|r| r.1 > 0.85) && spread(&pool) < 0.15);
    assert!(wall.iter().all(|r| r.1 > 0.6) && spread(&wall) < 0.3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn segmentation_is_a_connected_partition(
        w in 4usize..24, h in 4usize..24, seed in any::<u64>(), s in 2usize..5, m in 0.5f64..50.0,
    ) {
        prop_assume!(w >= s && h >= s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_slice(&mut rng, w, h);
        let map = slic_segment(&img, &SlicParams { s, m, ..Default::default() }).unwrap();
        prop_assert_eq!(map.labels.len(), w * h);
        prop_assert_eq!(map.centroids.iter().map(|c| c.count).sum::<usize>(), w * h);
        prop_assert!(is_four_connected(&map));
    }
}
