use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scarline::features::{LabeledDataset, Sample};
use scarline::svm::{
    grid_search, rbf, roc_auc, train_xy, validate, ClassificationReport, FineGrid, GridSearchSpec,
    GridStage, Protocol, SvmModel, SvmParams,
};

fn blobs(rng: &mut ChaCha8Rng, n: usize, d: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 2 == 0;
        let shift = if c { sep / 2.0 } else { -sep / 2.0 };
        x.push(
            (0..d)
                .map(|k| noise.sample(rng) * (1.0 + k as f64) + shift)
                .collect(),
        );
        y.push(c);
    }
    (x, y)
}

fn cohort(rng: &mut ChaCha8Rng, patients: usize, per: usize, sep: f64) -> LabeledDataset {
    let mut ds = LabeledDataset::new(vec!["a".into(), "b".into(), "c".into()]);
    for p in 0..patients {
        let (x, y) = blobs(rng, per, 3, sep);
        for (i, (x, y)) in x.into_iter().zip(y).enumerate() {
            ds.push(Sample {
                patient: format!("p{p:02}"),
                slice: 0,
                sp_id: i as u32,
                enhanced: y,
                x,
            })
            .unwrap();
        }
    }
    ds
}

/// α per training row, recovered from the stored coefficients.
fn alphas(m: &SvmModel, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    for (&i, c) in m.support_index.iter().zip(&m.coef) {
        a[i] = c.abs();
    }
    a
}

#[test]
fn xor_is_shattered() {
    let x = vec![
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
    ];
    let y = [true, true, false, false];
    let m = train_xy(&x, &y, &SvmParams::new(100.0, 1.0)).unwrap();
    for (xi, &yi) in x.iter().zip(&y) {
        // Decision function evaluated from scratch.
        let z: Vec<f64> = xi
            .iter()
            .zip(&m.mean)
            .zip(&m.scale)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect();
        let f: f64 = m
            .support
            .iter()
            .zip(&m.coef)
            .map(|(sv, c)| {
                c * (-(sv.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>())).exp()
            })
            .sum::<f64>()
            + m.b;
        assert_eq!(f > 0.0, yi);
        assert_eq!(m.predict(xi).unwrap().0, yi);
    }
}

#[test]
fn kkt_conditions_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..40 {
        let (n, sep) = (rng.random_range(10..120), rng.random_range(0.0..4.0));
        let (x, y) = blobs(&mut rng, n, 3, sep);
        let p = SvmParams::new(
            2f64.powi(rng.random_range(-4..9)),
            2f64.powi(rng.random_range(-6..4)),
        );
        let m = train_xy(&x, &y, &p).unwrap();
        assert!(m.converged, "trial {trial}");
        let a = alphas(&m, x.len());
        let tol = p.tol * 1.0001;
        for (i, (xi, &yi)) in x.iter().zip(&y).enumerate() {
            assert!(a[i] >= 0.0 && a[i] <= p.rho);
            let s = if yi { 1.0 } else { -1.0 };
            let margin = s * m.decision(xi).unwrap();
            if a[i] == 0.0 {
                assert!(margin >= 1.0 - tol, "trial {trial}: α=0 margin {margin}");
            } else if a[i] >= p.rho {
                assert!(margin <= 1.0 + tol, "trial {trial}: α=ρ margin {margin}");
            } else {
                assert!(
                    (margin - 1.0).abs() <= tol,
                    "trial {trial}: free margin {margin}"
                );
            }
        }
        let sum: f64 = m.coef.iter().sum();
        assert!(sum.abs() < 1e-6 * p.rho.max(1.0), "Σαy = {sum}");
    }
}

#[test]
fn dual_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let (x, y) = blobs(&mut rng, 40, 2, 1.5);
        let p = SvmParams::new(4.0, 0.5);
        let m = train_xy(&x, &y, &p).unwrap();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&m.mean)
                    .zip(&m.scale)
                    .map(|((v, mu), s)| (v - mu) / s)
                    .collect()
            })
            .collect();
        let ys: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let dual = |a: &[f64]| {
            let mut q = 0.0;
            for i in 0..40 {
                for j in 0..40 {
                    q += a[i] * a[j] * ys[i] * ys[j] * rbf(p.gamma, &z[i], &z[j]);
                }
            }
            a.iter().sum::<f64>() - 0.5 * q
        };
        let best = dual(&alphas(&m, 40));
        assert!((best - m.dual_objective()).abs() < 1e-9 * best.abs().max(1.0));
        for _ in 0..1000 {
            let mut a: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..p.rho)).collect();
            // Shrink the heavier class so that Σ α y = 0.
            let pos: f64 = (0..40).filter(|&i| y[i]).map(|i| a[i]).sum();
            let neg: f64 = (0..40).filter(|&i| !y[i]).map(|i| a[i]).sum();
            for i in 0..40 {
                if y[i] && pos > neg {
                    a[i] *= neg / pos;
                } else if !y[i] && neg > pos {
                    a[i] *= pos / neg;
                }
            }
            assert!(dual(&a) <= best + 1e-6);
        }
    }
}

#[test]
fn decision_values_behave() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = blobs(&mut rng, 80, 3, 1.0);
    let p = SvmParams::new(2.0, 0.3);
    let m = train_xy(&x, &y, &p).unwrap();
    // Interior support vectors sit on the margin.
    let mut interior = 0;
    for (&i, c) in m.support_index.iter().zip(&m.coef) {
        if c.abs() < p.rho {
            interior += 1;
            assert!((m.decision(&x[i]).unwrap().abs() - 1.0).abs() <= p.tol * 1.0001);
        }
    }
    assert!(interior > 0);
    // Far away only the offset remains.
    assert!((m.decision(&[1e4, -1e4, 1e4]).unwrap() - m.b).abs() < 1e-12);
    let batch = m.decision_batch(&x).unwrap();
    for (xi, d) in x.iter().zip(batch) {
        assert_eq!(m.decision(xi).unwrap(), d);
    }
    assert!(m.decision(&[1.0]).is_err());
}

#[test]
fn training_rejects_bad_input() {
    let x = vec![vec![0.0], vec![1.0]];
    assert!(train_xy(&x, &[true, true], &SvmParams::default()).is_err());
    assert!(train_xy(&x, &[true], &SvmParams::default()).is_err());
    assert!(train_xy(
        &[vec![0.0], vec![f64::NAN]],
        &[true, false],
        &SvmParams::default()
    )
    .is_err());
    assert!(train_xy(
        &[vec![0.0], vec![1.0, 2.0]],
        &[true, false],
        &SvmParams::default()
    )
    .is_err());
    assert!(train_xy(&x, &[true, false], &SvmParams::new(0.0, 1.0)).is_err());
    assert!(train_xy(&x, &[true, false], &SvmParams::new(1.0, -1.0)).is_err());
}

#[test]
fn iteration_cap_returns_last_iterate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = blobs(&mut rng, 100, 3, 0.5);
    let p = SvmParams {
        max_iter: 3,
        ..SvmParams::new(100.0, 1.0)
    };
    let m = train_xy(&x, &y, &p).unwrap();
    assert!(!m.converged);
    assert_eq!(m.iterations, 3);
    assert!(m.coef.iter().sum::<f64>().abs() < 1e-9);
}

#[test]
fn model_file_rejects_garbage() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = blobs(&mut rng, 30, 2, 2.0);
    let m = train_xy(&x, &y, &SvmParams::new(1.0, 1.0)).unwrap();
    let text = m.to_text();
    let back = SvmModel::parse(&text).unwrap();
    for xi in &x {
        assert_eq!(back.decision(xi).unwrap(), m.decision(xi).unwrap());
    }
    let lines: Vec<&str> = text.lines().collect();
    assert!(SvmModel::parse("").is_err());
    assert!(SvmModel::parse(&text.replace("scarline-svm 1", "scarline-svm 2")).is_err());
    assert!(SvmModel::parse(&text.replace("gamma 1", "gamma -1")).is_err());
    assert!(SvmModel::parse(&lines[..lines.len() - 1].join("\n")).is_err());
    let extra = format!("{text}1 2 3\n");
    assert!(SvmModel::parse(&extra).is_err());
    let nan = text.replacen(&format!("b {}", m.b), "b NaN", 1);
    assert!(SvmModel::parse(&nan).is_err());
}

/// Pairwise-comparison U statistic, ties counting one half.
fn u_statistic(s: &[f64], t: &[bool]) -> f64 {
    let mut u = 0.0;
    let mut pairs = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if t[i] && !t[j] {
                pairs += 1.0;
                u += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    u / pairs
}

#[test]
fn auc_matches_u_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut done = 0;
    while done < 200 {
        let n = if done < 100 {
            20
        } else {
            rng.random_range(2..60)
        };
        // Coarse scores give plenty of ties.
        let s: Vec<f64> = (0..n)
            .map(|_| {
                if done % 2 == 0 {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if t.iter().all(|&v| v) || t.iter().all(|&v| !v) {
            assert!(roc_auc(&s, &t).is_err());
            continue;
        }
        let (pts, auc) = roc_auc(&s, &t).unwrap();
        assert!((auc - u_statistic(&s, &t)).abs() < 1e-12);
        assert_eq!(pts.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(pts
            .windows(2)
            .all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        done += 1;
    }
    let t = [true, true, false, false];
    assert_eq!(roc_auc(&[4.0, 3.0, 2.0, 1.0], &t).unwrap().1, 1.0);
    assert_eq!(roc_auc(&[1.0, 2.0, 3.0, 4.0], &t).unwrap().1, 0.0);
}

#[test]
fn grid_search_bookkeeping() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ds = cohort(&mut rng, 3, 20, 2.0);
    let single = GridSearchSpec {
        coarse_rho: vec![2.0],
        coarse_gamma: vec![0.5],
        ..GridSearchSpec::coarse_only()
    };
    let r = grid_search(&ds, &single).unwrap();
    assert_eq!((r.rho, r.gamma, r.surface.len()), (2.0, 0.5, 1));

    let r = grid_search(&ds, &GridSearchSpec::paper()).unwrap();
    let coarse = r
        .surface
        .iter()
        .filter(|c| c.stage == GridStage::Coarse)
        .count();
    assert_eq!((coarse, r.surface.len()), (121, 130));
    // Argmax with ties to smaller ρ, then γ, recomputed from the surface.
    let top = r
        .surface
        .iter()
        .map(|c| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut ties: Vec<(f64, f64)> = r
        .surface
        .iter()
        .filter(|c| c.score == top)
        .map(|c| (c.rho, c.gamma))
        .collect();
    ties.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!((r.rho, r.gamma), ties[0]);
    assert_eq!(r.score, top);
    assert!(r.surface_csv().lines().count() == 131);

    let r = grid_search(&ds, &GridSearchSpec::centered()).unwrap();
    let best_coarse = r
        .surface
        .iter()
        .filter(|c| c.stage == GridStage::Coarse)
        .fold(None::<&scarline::svm::GridCell>, |a, c| match a {
            Some(a)
                if a.score > c.score
                    || (a.score == c.score && (a.rho, a.gamma) <= (c.rho, c.gamma)) =>
            {
                Some(a)
            }
            _ => Some(c),
        })
        .unwrap();
    let fine: Vec<_> = r
        .surface
        .iter()
        .filter(|c| c.stage == GridStage::Fine)
        .collect();
    assert_eq!(fine.len(), 9);
    assert_eq!(fine[4].rho, best_coarse.rho);
    assert_eq!(fine[4].gamma, best_coarse.gamma);

    let bad = GridSearchSpec {
        fine: FineGrid::Preset {
            rho: vec![],
            gamma: vec![1.0],
        },
        ..GridSearchSpec::coarse_only()
    };
    assert!(grid_search(&ds, &bad).is_err());
}

#[test]
fn grid_choice_is_stable_across_shuffles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ds = cohort(&mut rng, 4, 40, 1.5);
    let picks: Vec<(f64, f64)> = (0..3)
        .map(|seed| {
            let r = grid_search(
                &ds,
                &GridSearchSpec {
                    seed,
                    ..GridSearchSpec::coarse_only()
                },
            )
            .unwrap();
            (r.rho.log2(), r.gamma.log2())
        })
        .collect();
    for p in &picks {
        assert!(
            (p.0 - picks[0].0).abs() <= 2.0 && (p.1 - picks[0].1).abs() <= 2.0,
            "{picks:?}"
        );
    }
}

#[test]
fn separable_cohort_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ds = cohort(&mut rng, 6, 20, 30.0);
    let p = SvmParams::new(4.0, 0.5);
    let loo = validate(&ds, &Protocol::LooPatient, &p, 0).unwrap();
    assert_eq!(loo.trainings, 6);
    assert_eq!(loo.report.n, ds.len());
    assert_eq!(
        (loo.report.accuracy, loo.report.ber, loo.report.auc),
        (1.0, 0.0, Some(1.0))
    );
    let kf = validate(&ds, &Protocol::KFold(3), &p, 1).unwrap();
    assert_eq!(kf.trainings, 3);
    assert_eq!(kf.report.accuracy, 1.0);
    let split = Protocol::Split {
        train: vec!["p00".into(), "p01".into(), "p02".into()],
        test: vec!["p04".into()],
    };
    let s = validate(&ds, &split, &p, 0).unwrap();
    assert_eq!((s.trainings, s.report.n), (1, 20));
    assert!(s.rows.iter().all(|&i| ds.rows[i].patient == "p04"));
}

#[test]
fn protocols_reject_bad_setups() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ds = cohort(&mut rng, 3, 10, 2.0);
    let p = SvmParams::default();
    assert!(validate(&ds, &Protocol::KFold(4), &p, 0).is_err());
    assert!(validate(&ds, &Protocol::KFold(1), &p, 0).is_err());
    let overlap = Protocol::Split {
        train: vec!["p00".into(), "p01".into()],
        test: vec!["p01".into()],
    };
    assert!(validate(&ds, &overlap, &p, 0).is_err());
    let unknown = Protocol::Split {
        train: vec!["p00".into()],
        test: vec!["zz".into()],
    };
    assert!(validate(&ds, &unknown, &p, 0).is_err());
}

#[test]
fn single_class_fold_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ds = cohort(&mut rng, 3, 10, 2.0);
    // Only p00 has enhanced rows, so its held-out fold trains on one class.
    for r in ds.rows.iter_mut() {
        if r.patient != "p00" {
            r.enhanced = false;
        }
    }
    let v = validate(&ds, &Protocol::LooPatient, &SvmParams::new(1.0, 1.0), 0).unwrap();
    assert_eq!(v.single_class_folds, 1);
    assert_eq!(v.trainings, 3);
}

// Labels are shuffled within each patient, half enhanced. With independent
// coin flips instead, each held-out patient's class balance shifts the
// training prior the other way and pooled LOO AUC drifts below chance.
#[test]
fn random_labels_score_at_chance() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut ds = cohort(&mut rng, 8, 50, 0.0);
        for chunk in ds.rows.chunks_mut(50) {
            let mut labels: Vec<bool> = (0..50).map(|i| i < 25).collect();
            labels.shuffle(&mut rng);
            for (r, l) in chunk.iter_mut().zip(labels) {
                r.enhanced = l;
            }
        }
        let v = validate(&ds, &Protocol::LooPatient, &SvmParams::new(1.0, 0.5), 0).unwrap();
        let auc = v.report.auc.unwrap();
        assert!((0.4..=0.6).contains(&auc), "seed {seed}: AUC {auc}");
    }
}

#[test]
fn feature_scaling_is_absorbed() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (x, y) = blobs(&mut rng, 60, 3, 1.5);
    let p = SvmParams::new(8.0, 0.4);
    let a = train_xy(&x, &y, &p).unwrap();
    let scaled: Vec<Vec<f64>> = x
        .iter()
        .map(|r| vec![r[0] * 1e3 + 7.0, r[1] * 0.01, r[2] - 50.0])
        .collect();
    let b = train_xy(&scaled, &y, &p).unwrap();
    for (xi, si) in x.iter().zip(&scaled) {
        let (da, db) = (a.decision(xi).unwrap(), b.decision(si).unwrap());
        // Both runs stop within the KKT tolerance of the same optimum.
        assert!((da - db).abs() < 2.0 * p.tol, "{da} vs {db}");
        if da.abs() > 2.0 * p.tol {
            assert_eq!(da > 0.0, db > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ber_identity_is_exact(d in prop::collection::vec(-3.0f64..3.0, 1..60), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<bool> = d.iter().map(|_| rng.random_bool(0.5)).collect();
        let r = ClassificationReport::from_decisions(d.clone(), &t).unwrap();
        let both = r.sensitivity.is_finite() && r.specificity.is_finite();
        if both {
            prop_assert_eq!(r.ber, 1.0 - (r.sensitivity + r.specificity) / 2.0);
            let auc = r.auc.unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
        prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, d.len());
        prop_assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / d.len() as f64);
    }
}
