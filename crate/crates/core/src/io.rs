//! TUM trajectory text files and binary PLY point clouds.

use std::io::{BufRead, Read, Write};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::evaluation::{PointCloud, Trajectory};
use crate::geometry::{Rotation, Sim3};

/// One `timestamp tx ty tz qx qy qz qw` line per pose. Scale is not stored.
pub fn write_tum(out: &mut impl Write, traj: &Trajectory) -> Result<()> {
    for (stamp, pose) in traj.iter() {
        let t = pose.translation();
        let [qw, qx, qy, qz] = pose.rotation().wxyz();
        writeln!(
            out,
            "{stamp:.6} {:.9} {:.9} {:.9} {qx:.9} {qy:.9} {qz:.9} {qw:.9}",
            t.x, t.y, t.z
        )?;
    }
    Ok(())
}

/// Parses TUM lines; blank lines and `#` comments are skipped.
pub fn read_tum(input: impl BufRead) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    let mut offset = 0;
    for line in input.lines() {
        let line = line?;
        let at = offset;
        offset += line.len() + 1;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(at, format!("bad number: {e}")))?;
        if v.len() != 8 {
            return Err(Error::parse(at, format!("expected 8 fields, got {}", v.len())));
        }
        let q = Rotation::from_wxyz(v[7], v[4], v[5], v[6]);
        traj.push(v[0], Sim3::from_rotation_translation(q, Vector3::new(v[1], v[2], v[3])))
            .map_err(|e| Error::parse(at, e.to_string()))?;
    }
    Ok(traj)
}

const PLY_HEADER_END: &str = "end_header\n";

/// Binary little-endian PLY with float `x y z confidence` per vertex.
/// Points without confidence are written with confidence 1.
pub fn write_ply(out: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + cloud.len() * 16);
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nproperty float confidence\n{PLY_HEADER_END}",
        cloud.len()
    )?;
    for (i, p) in cloud.points.iter().enumerate() {
        let c = cloud.confidence.as_ref().map_or(1.0, |c| c[i]);
        for v in [p.x, p.y, p.z, c] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads files produced by [`write_ply`].
pub fn read_ply(input: &mut impl Read) -> Result<PointCloud> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let end = data
        .windows(PLY_HEADER_END.len())
        .position(|w| w == PLY_HEADER_END.as_bytes())
        .ok_or_else(|| Error::parse(0, "missing end_header"))?;
    let header = std::str::from_utf8(&data[..end]).map_err(|_| Error::parse(0, "header is not UTF-8"))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(Error::parse(0, "not a binary little-endian PLY"));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::parse(0, "missing vertex count"))?;
    let body = &data[end + PLY_HEADER_END.len()..];
    if body.len() != count * 16 {
        return Err(Error::parse(
            end + PLY_HEADER_END.len() + body.len().min(count * 16),
            format!("expected {} vertex bytes, got {}", count * 16, body.len()),
        ));
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap()) as f64;
    let mut points = Vec::with_capacity(count);
    let mut conf = Vec::with_capacity(count);
    for rec in body.chunks_exact(16) {
        points.push(Vector3::new(f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])));
        conf.push(f(&rec[12..16]));
    }
    Ok(PointCloud {
        points,
        confidence: Some(conf),
    })
}
