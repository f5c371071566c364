use egonav::body::{HeadPose, Pose};
use egonav::dataset::{synth_trajectories, SynthConfig};
use egonav::gait::ChunkConfig;
use egonav::math::{rng_stream, Vec2, Vec3};
use egonav::prior::{train_vae, vae_rollout, VaeTrainConfig};

#[test]
fn trained_prior_reaches_short_forward_targets() {
    let ds = synth_trajectories(11, 300, &SynthConfig::default()).unwrap();
    let t = std::time::Instant::now();
    let (vae, losses) = train_vae(&ds, &VaeTrainConfig::default(), 3).unwrap();
    eprintln!("train {:?} losses {:?}", t.elapsed(), losses);
    assert!(losses.last().unwrap() < &losses[0]);
    let cfg = ChunkConfig::default();
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = rng_stream(seed, 0);
        let p0 = Pose::standing(Vec2::zeros(), 0.0);
        let target = HeadPose::from_yaw_pitch(Vec3::new(0.5, 0.0, 1.6), 0.0, 0.0);
        let c = vae_rollout(&vae, &p0, &target, &cfg, 0.0, &mut rng).unwrap();
        if c.reached {
            hits += 1;
        } else if seed < 3 {
            let l = c.poses.last().unwrap();
            eprintln!("miss: {:?} {} {}", l.head_pos, l.head_yaw, l.head_pitch);
        }
    }
    eprintln!("reached {hits}/100");
    assert!(hits >= 90);
}
