//! KITTI odometry file formats: Velodyne `.bin` scans and pose text files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::Pose;
use crate::error::{Error, Result};
use crate::voxel::PointCloud;

const RECORD: usize = 16;

/// Little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.len() % RECORD != 0 {
        let offset = bytes.len() - bytes.len() % RECORD;
        return Err(Error::format(
            path,
            format!(
                "truncated point record at byte offset {offset} (file is {} bytes)",
                bytes.len()
            ),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    let mut intensity = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks_exact(RECORD) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

/// Writes a cloud as `f32` records; missing intensity is written as 0.
pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], inten] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_poses(&text).map_err(|msg| Error::format(path, msg))
}

/// One row-major `3 x 4` `[R | t]` per non-empty line.
pub fn parse_poses(text: &str) -> std::result::Result<Vec<Pose>, String> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| format!("line {}: {t:?}: {e}", lineno + 1))
            })
            .collect::<std::result::Result<_, _>>()?;
        let arr: [f64; 12] = vals.as_slice().try_into().map_err(|_| {
            format!(
                "line {}: expected 12 values, found {}",
                lineno + 1,
                vals.len()
            )
        })?;
        poses.push(Pose::from_row_major(&arr));
    }
    Ok(poses)
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(" ")).expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Scan file for `index` inside a sequence directory.
pub fn scan_path(dir: impl AsRef<Path>, index: usize) -> PathBuf {
    dir.as_ref()
        .join("velodyne")
        .join(format!("{index:06}.bin"))
}

/// Writes `velodyne/NNNNNN.bin` and `poses.txt` under `dir`.
pub fn write_sequence(dir: impl AsRef<Path>, clouds: &[PointCloud], poses: &[Pose]) -> Result<()> {
    let dir = dir.as_ref();
    if clouds.len() != poses.len() {
        return Err(Error::dim(
            "write_sequence",
            &[clouds.len()],
            &[poses.len()],
        ));
    }
    std::fs::create_dir_all(dir.join("velodyne"))?;
    for (i, c) in clouds.iter().enumerate() {
        write_scan(scan_path(dir, i), c)?;
    }
    write_poses(dir.join("poses.txt"), poses)
}

/// Reads a sequence directory laid out as by [`write_sequence`]. Scans
/// are read in file-name order; their count must match the pose count.
/// A missing `velodyne/` or `poses.txt` counts as zero entries.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<(Vec<PointCloud>, Vec<Pose>)> {
    let dir = dir.as_ref();
    let pose_file = dir.join("poses.txt");
    let poses = if pose_file.exists() {
        load_poses(pose_file)?
    } else {
        Vec::new()
    };
    let velodyne = dir.join("velodyne");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&velodyne) {
        Ok(entries) => entries
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    files.sort();
    if files.len() != poses.len() {
        return Err(Error::format(
            dir,
            format!("{} scans but {} poses", files.len(), poses.len()),
        ));
    }
    let clouds = files.iter().map(load_scan).collect::<Result<_>>()?;
    Ok((clouds, poses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend(v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let c = load_scan(&path).unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(c.intensity, Some(vec![0.5]));
    }

    #[test]
    fn empty_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.bin");
        std::fs::write(&empty, []).unwrap();
        assert!(load_scan(&empty).unwrap().is_empty());
        let bad = dir.path().join("b.bin");
        std::fs::write(&bad, [0u8; 17]).unwrap();
        let err = load_scan(&bad).unwrap_err().to_string();
        assert!(err.contains("byte offset 16"), "{err}");
    }

    #[test]
    fn pose_lines() {
        let p = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(p, vec![Pose::identity()]);
        let p = parse_poses("1 0 0 3.7 0 1 0 0 0 0 1 0").unwrap();
        assert_eq!(p[0].position(), [3.7, 0.0, 0.0]);
        let err = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_poses("1 0 0 0 0 1 0 0 0 0 1 x").is_err());
    }

    #[test]
    fn poses_write_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let poses = vec![Pose::from_yaw(1.25, -3.0, 0.1, 2.0), Pose::identity()];
        write_poses(&path, &poses).unwrap();
        assert_eq!(load_poses(&path).unwrap(), poses);
    }
}
