use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarline::features::{
    discretize, extract_features, intensity_features, mrmr_select, mutual_information,
    LabeledDataset, Sample, FEATURE_NAMES, MI_BINS, N_FEATURES, WALL_OVERLAP,
};
use scarline::superpixel::{Centroid, SuperpixelMap};
use scarline::volume::{Geometry, Mask, ScalarVolume};

/// Statistics recomputed the slow way: explicit sorted ranks, two-pass moments.
fn naive(values: &[f64]) -> [f64; 16] {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let pct = |q: f64| {
        let pos = q * (n - 1) as f64;
        let i = pos as usize;
        if i + 1 >= n {
            s[n - 1]
        } else {
            s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
        }
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    let moment = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n as f64;
    let var = if n < 2 { 0.0 } else { moment(2) };
    let skew = if var > 0.0 {
        moment(3) / var.sqrt().powi(3)
    } else {
        0.0
    };
    let kurt = if var > 0.0 {
        moment(4) / var.powi(2)
    } else {
        0.0
    };
    let (lo, hi) = (s[0], s[n - 1]);
    let mut entropy = 0.0;
    if hi > lo {
        for b in 0..16 {
            let left = lo + (hi - lo) * b as f64 / 16.0;
            let right = lo + (hi - lo) * (b + 1) as f64 / 16.0;
            let c = values
                .iter()
                .filter(|&&v| v >= left && (v < right || (b == 15 && v <= hi)))
                .count();
            if c > 0 {
                let p = c as f64 / n as f64;
                entropy -= p * p.ln();
            }
        }
    }
    [
        lo,
        hi,
        mean,
        pct(0.5),
        var.sqrt(),
        var,
        hi - lo,
        pct(0.75) - pct(0.25),
        pct(0.1),
        pct(0.25),
        pct(0.75),
        pct(0.9),
        skew,
        kurt,
        values.iter().map(|v| v * v).sum::<f64>() / n as f64,
        entropy,
    ]
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn statistics_match_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..300 {
        let n = rng.random_range(1..60);
        // Mix continuous and heavily tied samples.
        let vals: Vec<f64> = if trial % 3 == 0 {
            (0..n)
                .map(|_| rng.random_range(0..5) as f64 * 0.5)
                .collect()
        } else {
            (0..n).map(|_| rng.random_range(-3.0..8.0)).collect()
        };
        let (got, deg) = intensity_features(&vals).unwrap();
        assert_eq!(deg, n < 2);
        let want = naive(&vals);
        for k in 0..N_FEATURES {
            // Bin edges are computed differently; only entropy may differ
            // for samples sitting exactly on an interior edge.
            if k == 15 {
                continue;
            }
            assert!(
                close(got[k], want[k]),
                "{} {} vs {}",
                FEATURE_NAMES[k],
                got[k],
                want[k]
            );
        }
        if trial % 3 != 0 {
            assert!(
                close(got[15], want[15]),
                "entropy {} vs {}",
                got[15],
                want[15]
            );
        }
    }
}

#[test]
fn constant_superpixel() {
    let (f, _) = intensity_features(&[2.5; 9]).unwrap();
    for name in ["min", "max", "mean", "median", "p10", "p90"] {
        assert_eq!(
            f[FEATURE_NAMES.iter().position(|&n| n == name).unwrap()],
            2.5
        );
    }
    assert_eq!(f[4], 0.0);
    assert_eq!(f[15], 0.0);
    assert!(intensity_features(&[]).is_err());
    assert!(intensity_features(&[1.0, f64::NAN]).is_err());
}

fn map_of(width: usize, height: usize, labels: Vec<u32>) -> SuperpixelMap {
    let k = *labels.iter().max().unwrap() as usize + 1;
    let mut centroids = vec![
        Centroid {
            x: 0.0,
            y: 0.0,
            intensity: 0.0,
            count: 0
        };
        k
    ];
    for &l in &labels {
        centroids[l as usize].count += 1;
    }
    SuperpixelMap {
        width,
        height,
        labels,
        centroids,
    }
}

#[test]
fn extraction_keeps_wall_superpixels_only() {
    // 10×1 slice in five 2-pixel superpixels plus one of size 5 in z=1.
    let g = Geometry::unit([10, 1, 2]).unwrap();
    let img = ScalarVolume::new(g.clone(), (0..20).map(|i| i as f64).collect()).unwrap();
    let wall = Mask::new(g, (0..20).map(|i| matches!(i, 0 | 1 | 3 | 10)).collect()).unwrap();
    let maps = vec![
        map_of(10, 1, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]),
        map_of(10, 1, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]),
    ];
    let f = extract_features(&img, &maps, &wall, WALL_OVERLAP).unwrap();
    let ids: Vec<(usize, u32)> = f.iter().map(|v| (v.slice, v.sp_id)).collect();
    // 1/5 of the z=1 superpixel is wall: exactly on the threshold.
    assert_eq!(ids, vec![(0, 0), (0, 1), (1, 0)]);
    assert_eq!(f[0].get("mean"), Some(0.5));
    assert_eq!(f[2].get("max"), Some(14.0));
    assert_eq!(f[2].count, 5);

    assert!(extract_features(&img, &maps, &wall, 0.0).is_err());
    let bad = vec![maps[0].clone()];
    assert!(extract_features(&img, &bad, &wall, WALL_OVERLAP).is_err());
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

#[test]
fn mi_of_class_indicator_is_class_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.random_range(4..200);
        let class: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let pos = class.iter().filter(|&&c| c).count();
        if pos == 0 || pos == n {
            continue;
        }
        let f: Vec<f64> = class.iter().map(|&c| c as u8 as f64).collect();
        let p = pos as f64 / n as f64;
        let h = entropy(&[p, 1.0 - p]);
        assert!((mutual_information(&f, &class, MI_BINS).unwrap() - h).abs() < 1e-12);
    }
}

#[test]
fn mi_of_hand_table() {
    // Bins with 4 samples and 2 bins: {0.1, 0.2} → bin 0, {0.3, 0.4} → bin 1.
    // Joint: (0,F) (0,T) (1,T) (1,T).
    let f = [0.1, 0.2, 0.3, 0.4];
    let c = [false, true, true, true];
    let want = 0.25 * (0.25f64 / (0.5 * 0.25)).ln()
        + 0.25 * (0.25f64 / (0.5 * 0.75)).ln()
        + 0.5 * (0.5f64 / (0.5 * 0.75)).ln();
    assert!((mutual_information(&f, &c, 2).unwrap() - want).abs() < 1e-12);
    assert_eq!(mutual_information(&[3.0; 4], &c, 8).unwrap(), 0.0);
    assert!(mutual_information(&[1.0], &[true], 8).is_err());
}

#[test]
fn independent_feature_is_below_permutation_quantile() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exceed = 0;
    for _ in 0..20 {
        let n = 300;
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let c: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let mi = mutual_information(&f, &c, MI_BINS).unwrap();
        let mut perm = c.clone();
        let mut null: Vec<f64> = (0..200)
            .map(|_| {
                perm.shuffle(&mut rng);
                mutual_information(&f, &perm, MI_BINS).unwrap()
            })
            .collect();
        null.sort_by(f64::total_cmp);
        if mi > null[189] {
            exceed += 1;
        }
        assert!(mi < 0.05);
    }
    assert!(
        exceed <= 4,
        "{exceed}/20 above the permutation 95th percentile"
    );
}

fn dataset(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> LabeledDataset {
    let mut ds = LabeledDataset::with_standard_names();
    for i in 0..n {
        let vals: Vec<f64> = (0..rng.random_range(5..30))
            .map(|_| rng.random_range(0.0..2.0))
            .collect();
        let (x, _) = intensity_features(&vals).unwrap();
        let enhanced = x[2] + rng.random_range(-noise..noise) > 1.0;
        ds.push(Sample {
            patient: format!("p{}", i % 4),
            slice: 0,
            sp_id: i as u32,
            enhanced,
            x: x.to_vec(),
        })
        .unwrap();
    }
    ds
}

/// Table-based MI over integer codes, independent of the library's map version.
fn naive_mi(a: &[usize], b: &[usize]) -> f64 {
    let (na, nb) = (a.iter().max().unwrap() + 1, b.iter().max().unwrap() + 1);
    let mut t = vec![vec![0.0; nb]; na];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1.0 / a.len() as f64;
    }
    let pa: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..nb).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            if t[x][y] > 0.0 {
                mi += t[x][y] * (t[x][y] / (pa[x] * pb[y])).ln();
            }
        }
    }
    mi
}

#[test]
fn greedy_order_matches_exhaustive_criterion() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let ds = dataset(&mut rng, 300, 0.2);
        let picks = mrmr_select(&ds, N_FEATURES).unwrap();
        let class: Vec<usize> = ds.classes().iter().map(|&c| c as usize).collect();
        let disc: Vec<Vec<usize>> = (0..N_FEATURES)
            .map(|j| discretize(&ds.column(j), MI_BINS))
            .collect();
        let rel: Vec<f64> = disc.iter().map(|d| naive_mi(d, &class)).collect();
        let mut chosen: Vec<usize> = Vec::new();
        for pick in &picks {
            let crit = |j: usize| {
                if chosen.is_empty() {
                    rel[j]
                } else if chosen.iter().any(|&s| disc[s] == disc[j]) {
                    0.0
                } else {
                    let red = chosen
                        .iter()
                        .map(|&s| naive_mi(&disc[j], &disc[s]))
                        .sum::<f64>()
                        / chosen.len() as f64;
                    rel[j] / red.max(1e-12)
                }
            };
            let best = (0..N_FEATURES)
                .filter(|j| !chosen.contains(j))
                .map(crit)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(crit(pick.index) >= best - 1e-9 * best.abs().max(1.0));
            assert!((pick.score - crit(pick.index)).abs() <= 1e-9 * best.abs().max(1.0));
            chosen.push(pick.index);
        }
        // The mean-driven class makes a location statistic the first pick.
        assert!(
            ["mean", "median", "energy", "p25", "p75"].contains(&picks[0].name.as_str()),
            "{}",
            picks[0].name
        );
    }
}

#[test]
fn single_pick_is_most_relevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = dataset(&mut rng, 200, 0.3);
    let class = ds.classes();
    let rel: Vec<f64> = (0..N_FEATURES)
        .map(|j| mutual_information(&ds.column(j), &class, MI_BINS).unwrap())
        .collect();
    let best = rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pick = &mrmr_select(&ds, 1).unwrap()[0];
    assert_eq!(rel[pick.index], best);
}

#[test]
fn duplicate_column_is_never_second() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let base = dataset(&mut rng, 200, 0.2);
        let first = mrmr_select(&base, 1).unwrap()[0].name.clone();
        let mut names: Vec<&str> = FEATURE_NAMES.to_vec();
        names.push(&first);
        let mut ds = base.select(&names).unwrap();
        ds.names[N_FEATURES] = "aaa_copy".into();
        let picks = mrmr_select(&ds, 3).unwrap();
        assert!(picks[1].name != "aaa_copy" && picks[1].name != first);
        assert!(picks[0].name == first || picks[0].name == "aaa_copy");
    }
}

#[test]
fn selection_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ds = dataset(&mut rng, 50, 0.2);
    assert!(mrmr_select(&ds, 0).is_err());
    assert!(mrmr_select(&ds, 17).is_err());
    for r in ds.rows.iter_mut() {
        r.enhanced = true;
    }
    assert!(mrmr_select(&ds, 3).is_err());
}

#[test]
fn csv_round_trip_and_rejects() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ds = dataset(&mut rng, 30, 0.2);
    let text = ds.to_csv();
    assert!(text.starts_with("patient,slice,sp_id,class,min,max,mean"));
    assert_eq!(LabeledDataset::from_csv(&text).unwrap(), ds);
    for bad in [
        "",
        "patient,slice,sp_id,class\n",
        "a,b,c,d,min\n",
        "patient,slice,sp_id,class,min\np1,0,0,maybe,1\n",
        "patient,slice,sp_id,class,min\np1,0,0,enhanced,x\n",
        "patient,slice,sp_id,class,min\np1,0,0,enhanced,1,2\n",
        "patient,slice,sp_id,class,min\n,0,0,enhanced,1\n",
        "patient,slice,sp_id,class,min\np1,-1,0,enhanced,1\n",
        "patient,slice,sp_id,class,min\np1,0,0,enhanced,inf\n",
    ] {
        assert!(LabeledDataset::from_csv(bad).is_err(), "{bad:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_are_order_free_and_consistent(
        vals in prop::collection::vec(-1e3f64..1e3, 1..80), seed in any::<u64>(),
    ) {
        let (a, _) = intensity_features(&vals).unwrap();
        let mut shuffled = vals.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (b, _) = intensity_features(&shuffled).unwrap();
        for k in 0..N_FEATURES {
            prop_assert!(close(a[k], b[k]) || (k == 12 || k == 13) && (a[k] - b[k]).abs() < 1e-6);
        }
        prop_assert!(a.iter().all(|v| v.is_finite()));
        for k in [3, 8, 9, 10, 11] {
            prop_assert!(a[0] <= a[k] && a[k] <= a[1]);
        }
        prop_assert!((a[4] * a[4] - a[5]).abs() <= 1e-9 * a[5].max(1.0));
    }

    #[test]
    fn selection_is_prefix_stable(seed in any::<u64>(), k in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = dataset(&mut rng, 120, 0.3);
        prop_assume!(ds.has_both_classes());
        let a = mrmr_select(&ds, k).unwrap();
        let b = mrmr_select(&ds, k + 1).unwrap();
        prop_assert_eq!(&a[..], &b[..k]);
    }
}
