use egonav::actions::{build_action_set, kmeans, resolve_action, HeadDelta, KMeansConfig};
use egonav::body::HeadPose;
use egonav::dataset::{synth_trajectories, SynthConfig};
use egonav::math::{rotate_z, rotation_distance, yaw_pitch_of, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sse(points: &[Vec<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64).collect();
    points.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum()
}

/// Minimum within-cluster sum of squares over all 2-partitions into nonempty parts.
fn best_two_partition(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << (n - 1)) {
        let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|i| mask >> i & 1 == 1);
        let pa: Vec<Vec<f64>> = a.iter().map(|&i| points[i].clone()).collect();
        let pb: Vec<Vec<f64>> = b.iter().map(|&i| points[i].clone()).collect();
        best = best.min(sse(&pa) + sse(&pb));
    }
    best
}

#[test]
fn two_means_matches_exhaustive_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = KMeansConfig {
        k: 2,
        ..KMeansConfig::default()
    };
    for trial in 0..5000 {
        let n = rng.random_range(2..=8usize);
        let dim = rng.random_range(1..=3usize);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = kmeans(&pts, &cfg, trial).unwrap();
        let want = best_two_partition(&pts);
        assert!((r.inertia - want).abs() <= 1e-9 * want.max(1.0), "trial {trial}: {} vs {want}", r.inertia);
    }
}

#[test]
fn separated_blobs_recover_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 400;
    let sigma = 0.5;
    let centers = [[-5.0, 1.0], [5.0, -2.0]];
    let mut pts = Vec::new();
    for c in &centers {
        for _ in 0..n {
            pts.push(c.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
        }
    }
    let r = kmeans(&pts, &KMeansConfig { k: 2, ..KMeansConfig::default() }, 5).unwrap();
    for c in &centers {
        let found = r.centroids.iter().any(|k| k.iter().zip(c).all(|(a, b)| (a - b).abs() < 3.0 * sigma / (n as f64).sqrt()));
        assert!(found, "{c:?} not in {:?}", r.centroids);
    }
}

#[test]
fn more_clusters_never_worse() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worse = 0;
    for seed in 0..50 {
        let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = kmeans(&pts, &KMeansConfig { k: 4, ..KMeansConfig::default() }, seed).unwrap();
        let b = kmeans(&pts, &KMeansConfig { k: 5, ..KMeansConfig::default() }, seed).unwrap();
        if b.inertia > a.inertia {
            worse += 1;
        }
    }
    assert_eq!(worse, 0);
}

proptest! {
    #[test]
    fn resolve_is_yaw_equivariant(
        x in -5.0..5.0f64, y in -5.0..5.0f64, z in 1.3..1.8f64,
        yaw in -3.0..3.0f64, pitch in -0.6..0.6f64, phi in -3.0..3.0f64,
        tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in -0.1..0.1f64,
        dyaw in -1.0..1.0f64, dpitch in -0.3..0.3f64,
    ) {
        let a = HeadDelta { translation: [tx, ty, tz], yaw: dyaw, pitch: dpitch };
        let cur = HeadPose::from_yaw_pitch(Vec3::new(x, y, z), yaw, pitch);
        let rot = HeadPose::from_yaw_pitch(rotate_z(Vec3::new(x, y, z), phi), yaw + phi, pitch);
        let t1 = resolve_action(&cur, &a);
        let t2 = resolve_action(&rot, &a);
        prop_assert!((rotate_z(t1.translation, phi) - t2.translation).norm() < 1e-9);
        let (y1, p1) = yaw_pitch_of(&t1.rotation);
        let want = HeadPose::from_yaw_pitch(Vec3::zeros(), y1 + phi, p1);
        prop_assert!(rotation_distance(&want.rotation, &t2.rotation) < 1e-7);
    }
}

#[test]
fn synthetic_action_set_covers_basic_motions() {
    let ds = synth_trajectories(31, 40, &SynthConfig::default()).unwrap();
    let set = build_action_set(&ds, 30, &KMeansConfig::default(), 7).unwrap();
    assert_eq!(set.len(), 16);
    let templates = [
        ("forward", [1.0, 0.0, 0.0, 0.0, 0.0]),
        ("left", [0.0, 0.0, 0.0, 1.0, 0.0]),
        ("right", [0.0, 0.0, 0.0, -1.0, 0.0]),
        ("stop", [0.0, 0.0, 0.0, 0.0, 0.0]),
    ];
    for (name, t) in templates {
        let hit = set.centroids.iter().any(|c| {
            let f = c.features();
            let nearest = templates
                .iter()
                .min_by(|a, b| dist(&f, &a.1).total_cmp(&dist(&f, &b.1)))
                .unwrap();
            nearest.0 == name && dist(&f, &t) < 0.5
        });
        assert!(hit, "no {name} centroid in {:?}", set.centroids);
    }
}

fn dist(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}


