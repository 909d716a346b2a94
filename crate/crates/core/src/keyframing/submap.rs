use std::io::{Read, Write};

use super::{Keyframe, KeyframeId};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::geometry::Sim3;
use crate::pointmap::{decode_pmap, encode_pmap, CanonicalPointmap};
use crate::predictor::FrameId;

const SMAP_MAGIC: &[u8; 4] = b"SMAP";
const SMAP_VERSION: u32 = 1;
const MAX_KEYFRAMES: u32 = 1 << 20;
const MAX_FRAMES: u32 = 1 << 24;
const MAX_DESCRIPTOR: u32 = 1 << 16;

/// A tracked frame: which keyframe it was tracked against and `T_kf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: u32,
    pub keyframe_seq: u32,
    pub relative: Sim3,
}

/// Everything one agent hands to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct Submap {
    pub agent: u32,
    pub keyframes: Vec<Keyframe>,
    pub frames: Vec<FrameRecord>,
}

fn write_pose(w: &mut ByteWriter, p: &Sim3) {
    for v in p.to_array() {
        w.f64(v);
    }
}

fn read_pose(r: &mut ByteReader<'_>) -> Result<Sim3> {
    let at = r.offset();
    let mut a = [0.0; 8];
    for v in &mut a {
        *v = r.f64()?;
    }
    let p = Sim3::from_array(&a);
    if !p.is_finite() || !(p.scale() > 0.0) {
        return Err(Error::parse(at, "invalid pose"));
    }
    Ok(p)
}

pub fn encode_submap(w: &mut ByteWriter, submap: &Submap) -> Result<()> {
    w.bytes(SMAP_MAGIC);
    w.u32(SMAP_VERSION);
    w.u32(submap.agent);
    w.u32(submap.keyframes.len() as u32);
    for kf in &submap.keyframes {
        w.u32(kf.id.seq);
        w.u32(kf.frame.index);
        write_pose(w, &kf.pose);
        encode_pmap(w, &kf.canonical.points, &kf.canonical.confidence, &kf.features)?;
        w.u32(kf.descriptor.len() as u32);
        for &d in &kf.descriptor {
            w.f64(d);
        }
    }
    w.u32(submap.frames.len() as u32);
    for f in &submap.frames {
        w.u32(f.frame);
        w.u32(f.keyframe_seq);
        write_pose(w, &f.relative);
    }
    Ok(())
}

pub fn decode_submap(r: &mut ByteReader<'_>) -> Result<Submap> {
    r.expect_magic(SMAP_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != SMAP_VERSION {
        return Err(Error::parse(at, format!("unsupported SMAP version {version}")));
    }
    let agent = r.u32()?;
    let n = r.bounded_u32(MAX_KEYFRAMES, "keyframe count")?;
    let mut keyframes = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let seq = r.u32()?;
        let index = r.u32()?;
        let pose = read_pose(r)?;
        let (points, confidence, features) = decode_pmap(r)?;
        let canonical = CanonicalPointmap::new(points, confidence)?;
        let len = r.bounded_u32(MAX_DESCRIPTOR, "descriptor length")?;
        let mut descriptor = Vec::with_capacity(len as usize);
        for _ in 0..len {
            descriptor.push(r.f64()?);
        }
        keyframes.push(Keyframe {
            id: KeyframeId::new(agent, seq),
            frame: FrameId::new(agent, index),
            canonical,
            features,
            pose,
            descriptor,
        });
    }
    let m = r.bounded_u32(MAX_FRAMES, "frame count")?;
    let mut frames = Vec::with_capacity(m as usize);
    for _ in 0..m {
        let frame = r.u32()?;
        let at = r.offset();
        let keyframe_seq = r.u32()?;
        if !keyframes.iter().any(|k| k.id.seq == keyframe_seq) {
            return Err(Error::parse(at, format!("frame {frame} refers to unknown keyframe {keyframe_seq}")));
        }
        frames.push(FrameRecord {
            frame,
            keyframe_seq,
            relative: read_pose(r)?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::parse(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(Submap { agent, keyframes, frames })
}

pub fn write_submap_file(out: &mut impl Write, submap: &Submap) -> Result<()> {
    let mut w = ByteWriter::new();
    encode_submap(&mut w, submap)?;
    out.write_all(&w.into_inner())?;
    Ok(())
}

pub fn read_submap_file(input: &mut impl Read) -> Result<Submap> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    decode_submap(&mut ByteReader::new(&buf))
}
