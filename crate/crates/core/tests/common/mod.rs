#![allow(dead_code)]

use scarline::volume::{labels, make_phantom, Blob, LabelVolume, PhantomSpec, ScalarVolume, Shell};

/// Cubic phantom with one chamber and its wall, under texture that fills
/// the whole field of view: a jittered lattice of smooth blobs of random sign
/// and size. A large uniform background would bias mutual information
/// towards transforms that shrink the sampled region.
pub fn textured_spec(n: usize) -> PhantomSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let c = (n as f64 - 1.0) / 2.0;
    let s = n as f64 / 64.0;
    let step = 8.0;
    let cells = (n as f64 / step).ceil() as usize + 1;
    let mut blobs = Vec::new();
    for i in 0..cells {
        for j in 0..cells {
            for k in 0..cells {
                blobs.push(Blob {
                    center: [i, j, k].map(|v| (v as f64 - 0.5 + rng.random::<f64>()) * step),
                    sigma: rng.random_range(2.0..4.0),
                    amplitude: rng.random_range(-60.0..120.0),
                });
            }
        }
    }
    PhantomSpec {
        dims: [n; 3],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        background: 40.0,
        shells: vec![Shell {
            label: labels::LA,
            center: [c - 4.0 * s, c + 2.0 * s, c],
            radius: 10.0 * s,
            wall_thickness: 3.0 * s,
            pool_intensity: 300.0,
            wall_intensity: 100.0,
        }],
        scar_arcs: vec![],
        blobs,
        blur_sigma_mm: 1.0,
        noise_sigma: 0.0,
        seed: 1,
    }
}

pub fn textured(n: usize) -> (ScalarVolume, LabelVolume) {
    make_phantom(&textured_spec(n)).unwrap()
}

/// The same phantom with every structure moved rigidly: rotated by `deg`
/// about the z axis through `pivot`, then shifted by `t`.
pub fn moved_spec(spec: &PhantomSpec, deg: f64, pivot: [f64; 3], t: [f64; 3]) -> PhantomSpec {
    let (s, c) = deg.to_radians().sin_cos();
    let mv = |p: [f64; 3]| {
        let d = [p[0] - pivot[0], p[1] - pivot[1]];
        [
            pivot[0] + c * d[0] - s * d[1] + t[0],
            pivot[1] + s * d[0] + c * d[1] + t[1],
            p[2] + t[2],
        ]
    };
    let mut out = spec.clone();
    for sh in &mut out.shells {
        sh.center = mv(sh.center);
    }
    for arc in &mut out.scar_arcs {
        arc.start_deg += deg;
    }
    for b in &mut out.blobs {
        b.center = mv(b.center);
    }
    out
}

/// Target and perturbed "warped atlases" for label fusion: four chambers with
/// walls on a textured background. Each atlas shifts all chambers by up to
/// `jitter` mm per axis, moves each by up to half that again, changes radii
/// by up to a third, rescales intensities by up
/// to 10% and draws its own noise, mimicking imperfect registration.
pub fn fusion_trial(
    seed: u64,
    n: usize,
    n_atlases: usize,
    jitter: f64,
) -> (
    ScalarVolume,
    LabelVolume,
    Vec<scarline::fusion::WarpedAtlas>,
) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let s = n as f64 / 48.0;
    let c = (n as f64 - 1.0) / 2.0;
    let chambers = [
        (labels::LA, [c - 12.0 * s, c - 12.0 * s, c], 6.5 * s, 300.0),
        (labels::LV, [c + 12.0 * s, c - 12.0 * s, c], 6.5 * s, 240.0),
        (labels::AO, [c - 12.0 * s, c + 12.0 * s, c], 5.0 * s, 340.0),
        (labels::RA, [c + 12.0 * s, c + 12.0 * s, c], 6.0 * s, 200.0),
    ];
    let blobs: Vec<Blob> = (0..40)
        .map(|_| Blob {
            center: [0; 3].map(|_| rng.random_range(0.0..n as f64)),
            sigma: rng.random_range(2.0..5.0),
            amplitude: rng.random_range(-30.0..30.0),
        })
        .collect();
    let spec = |rng: &mut rand_chacha::ChaCha8Rng, perturb: bool| {
        let gain = if perturb {
            rng.random_range(0.9..1.1)
        } else {
            1.0
        };
        let shift = if perturb {
            [0; 3].map(|_| rng.random_range(-jitter..jitter))
        } else {
            [0.0; 3]
        };
        let shells = chambers
            .iter()
            .map(|&(label, center, radius, pool)| {
                let (dc, dr) = if perturb {
                    (
                        [0; 3].map(|_| rng.random_range(-jitter / 2.0..jitter / 2.0)),
                        rng.random_range(-jitter / 3.0..jitter / 3.0),
                    )
                } else {
                    ([0.0; 3], 0.0)
                };
                Shell {
                    label,
                    center: [0, 1, 2].map(|k| center[k] + shift[k] + dc[k]),
                    radius: radius + dr,
                    wall_thickness: 2.0 * s,
                    pool_intensity: pool * gain,
                    wall_intensity: 110.0 * gain,
                }
            })
            .collect();
        PhantomSpec {
            dims: [n; 3],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            background: 40.0 * gain,
            shells,
            scar_arcs: vec![],
            blobs: blobs.clone(),
            blur_sigma_mm: 0.8,
            noise_sigma: 8.0,
            seed: rng.random(),
        }
    };
    let (target, truth) = make_phantom(&spec(&mut rng, false)).unwrap();
    let atlases = (0..n_atlases)
        .map(|i| {
            let (intensity, labels) = make_phantom(&spec(&mut rng, true)).unwrap();
            scarline::fusion::WarpedAtlas {
                intensity,
                labels,
                id: format!("atlas{i}"),
            }
        })
        .collect();
    (target, truth, atlases)
}
