//! Byte-level round trips for scans, poses, checkpoints and databases.

use bevloop::dataset::{
    load_poses, load_scan, load_sequence, parse_poses, write_poses, write_scan, write_sequence,
    Pose,
};
use bevloop::descriptor::GlobalDescriptor;
use bevloop::encoder::{FeatureDb, FeatureVolume};
use bevloop::retrieval::DescriptorDb;
use bevloop::tensor::{read_checkpoint, write_checkpoint, Tensor, CHECKPOINT_MAGIC};
use bevloop::voxel::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f32_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    // Values representable in f32 survive the f32 file format exactly.
    let pts = (0..n)
        .map(|_| [0; 3].map(|_: i32| rng.random_range(-80.0f32..80.0) as f64))
        .collect();
    let mut c = PointCloud::new(pts);
    c.intensity = Some(
        (0..n)
            .map(|_| rng.random_range(0.0f32..1.0) as f64)
            .collect(),
    );
    c
}

#[test]
fn scan_bin_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [0, 1, 7, 1000] {
        let cloud = f32_cloud(&mut rng, n);
        let path = dir.path().join(format!("{n}.bin"));
        write_scan(&path, &cloud).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 * n);
        let back = load_scan(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.intensity, cloud.intensity);
        write_scan(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}

#[test]
fn scan_bin_hand_decoded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.bin");
    let mut bytes = Vec::new();
    for v in [1.5f32, -2.0, 0.25, 0.75] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, &bytes).unwrap();
    let c = load_scan(&path).unwrap();
    assert_eq!(c.points, vec![[1.5, -2.0, 0.25]]);
    assert_eq!(c.intensity, Some(vec![0.75]));
    std::fs::write(&path, &bytes[..15]).unwrap();
    assert!(load_scan(&path).is_err());
}

#[test]
fn pose_parsing_matches_hand_decoded_fixture() {
    let text = "1 0 0 10.5 0 1 0 -2 0 0 1 0.25\n\
                0 -1 0 1 1 0 0 2 0 0 1 3\n";
    let poses = parse_poses(text).unwrap();
    assert_eq!(poses.len(), 2);
    assert_eq!(poses[0].position(), [10.5, -2.0, 0.25]);
    assert_eq!(poses[1].position(), [1.0, 2.0, 3.0]);
    // A 90 degree yaw maps x onto y.
    let p = poses[1].transform(&[1.0, 0.0, 0.0]);
    assert_eq!(p, [1.0, 3.0, 3.0]);
    assert!(parse_poses("1 0 0 0 0 1 0 0 0 0 1").is_err());
    assert!(parse_poses("1 0 0 0 0 1 0 0 0 0 1 x").is_err());
}

#[test]
fn pose_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poses.txt");
    let poses: Vec<Pose> = (0..20)
        .map(|i| Pose::from_yaw(i as f64 * 1.3, -0.7 * i as f64, 0.1, 0.37 * i as f64))
        .collect();
    write_poses(&path, &poses).unwrap();
    let back = load_poses(&path).unwrap();
    assert_eq!(back, poses);
}

#[test]
fn sequence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clouds: Vec<PointCloud> = (0..3).map(|i| f32_cloud(&mut rng, 10 + i)).collect();
    let poses: Vec<Pose> = (0..3)
        .map(|i| Pose::from_yaw(i as f64, 0.0, 0.0, 0.0))
        .collect();
    write_sequence(dir.path(), &clouds, &poses).unwrap();
    let (c, p) = load_sequence(dir.path()).unwrap();
    assert_eq!(p, poses);
    assert_eq!(
        c.iter().map(|c| &c.points).collect::<Vec<_>>(),
        clouds.iter().map(|c| &c.points).collect::<Vec<_>>()
    );
    let empty = tempfile::tempdir().unwrap();
    assert!(load_sequence(empty.path()).unwrap().0.is_empty());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let records = vec![
        (
            "a.w".to_string(),
            Tensor::new(
                [2, 3],
                vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0],
            )
            .unwrap(),
        ),
        ("scalar".to_string(), Tensor::scalar(std::f64::consts::PI)),
    ];
    write_checkpoint(&path, &records).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.len(), records.len());
    for ((n1, t1), (n2, t2)) in records.iter().zip(&back) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
    write_checkpoint(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_checkpoint(&path).is_err());
    std::fs::write(&path, b"NOTMAGIC").unwrap();
    assert!(read_checkpoint(&path).is_err());
}

#[test]
fn databases_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut descriptors = DescriptorDb::new();
    let mut features = FeatureDb::new();
    for id in [4u64, 0, 9] {
        descriptors
            .insert(GlobalDescriptor {
                scan_id: id,
                v: vec![id as f64 * 0.1, 1.0 / 3.0],
            })
            .unwrap();
        features
            .store(FeatureVolume {
                scan_id: id,
                f: Tensor::from_fn([2, 2, 2], |i| i as f64 * 0.7 + id as f64),
            })
            .unwrap();
    }
    descriptors.save(dir.path().join("v.bin")).unwrap();
    features.save(dir.path().join("f.bin")).unwrap();
    let dv = DescriptorDb::open(dir.path().join("v.bin")).unwrap();
    let df = FeatureDb::open(dir.path().join("f.bin")).unwrap();
    assert_eq!(
        dv.iter().collect::<Vec<_>>(),
        descriptors.iter().collect::<Vec<_>>()
    );
    for id in [0u64, 4, 9] {
        assert_eq!(df.load(id).unwrap(), features.load(id).unwrap());
    }
}
