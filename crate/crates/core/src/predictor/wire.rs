//! Binary protocol spoken between the engine and an external predictor.
//!
//! Every message travels as one frame: a little-endian `u32` byte length
//! followed by that many payload bytes.
//!
//! Request payload:
//! `"PRED" | u32 version (=1) | u32 request id | u8 op | image…`
//! where op 0 (predict) carries two images and op 1 (monocular init) one;
//! each image is `u32 H | u32 W | u8 channels | H·W·channels raw bytes`.
//!
//! Response payload:
//! `"PRSP" | u32 request id | u8 status`, then for status 0 eight grids
//! `u32 H | u32 W | u32 channels | f32 planar data` in the order
//! `X_i^i, X_i^j, C_i^i, C_i^j, D_i^i, D_i^j, Q_i^i, Q_i^j`; for a non-zero
//! status, `u32 length | UTF-8 message`.

use std::io::{Read, Write};

use nalgebra::Vector3;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::pointmap::{ConfidenceMap, FeatureMap, Pointmap, PredictionPair};

pub const REQUEST_MAGIC: &[u8; 4] = b"PRED";
pub const RESPONSE_MAGIC: &[u8; 4] = b"PRSP";
pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted frame payload.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

pub const STATUS_OK: u8 = 0;
pub const STATUS_MALFORMED: u8 = 1;
pub const STATUS_TOO_LARGE: u8 = 2;
pub const STATUS_MODEL_ERROR: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Predict = 0,
    MonocularInit = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePayload {
    pub height: u32,
    pub width: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub request_id: u32,
    pub op: Op,
    pub images: Vec<ImagePayload>,
}

/// A float grid in channel-planar layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResponseBody {
    Grids(Vec<Grid>),
    Error { status: u8, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub request_id: u32,
    pub body: ResponseBody,
}

pub fn encode_request(req: &Request) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(REQUEST_MAGIC);
    w.u32(PROTOCOL_VERSION);
    w.u32(req.request_id);
    w.u8(req.op as u8);
    for img in &req.images {
        w.u32(img.height);
        w.u32(img.width);
        w.u8(img.channels);
        w.bytes(&img.data);
    }
    w.into_inner()
}

pub fn decode_request(payload: &[u8]) -> Result<Request> {
    let mut r = ByteReader::new(payload);
    r.expect_magic(REQUEST_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != PROTOCOL_VERSION {
        return Err(Error::parse(at, format!("unsupported protocol version {version}")));
    }
    let request_id = r.u32()?;
    let at = r.offset();
    let op = match r.u8()? {
        0 => Op::Predict,
        1 => Op::MonocularInit,
        other => return Err(Error::parse(at, format!("unknown op {other}"))),
    };
    let count = if op == Op::Predict { 2 } else { 1 };
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let height = r.u32()?;
        let width = r.u32()?;
        let channels = r.u8()?;
        let n = (height as usize)
            .checked_mul(width as usize)
            .and_then(|n| n.checked_mul(channels as usize))
            .filter(|&n| n <= MAX_FRAME_BYTES)
            .ok_or_else(|| Error::parse(r.offset(), "image payload too large"))?;
        images.push(ImagePayload {
            height,
            width,
            channels,
            data: r.take(n)?.to_vec(),
        });
    }
    if r.remaining() != 0 {
        return Err(Error::parse(r.offset(), "trailing bytes after request"));
    }
    Ok(Request {
        request_id,
        op,
        images,
    })
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(RESPONSE_MAGIC);
    w.u32(resp.request_id);
    match &resp.body {
        ResponseBody::Grids(grids) => {
            w.u8(STATUS_OK);
            for g in grids {
                w.u32(g.height);
                w.u32(g.width);
                w.u32(g.channels);
                for &v in &g.data {
                    w.f32(v);
                }
            }
        }
        ResponseBody::Error { status, message } => {
            w.u8(*status);
            w.u32(message.len() as u32);
            w.bytes(message.as_bytes());
        }
    }
    w.into_inner()
}

pub fn decode_response(payload: &[u8]) -> Result<Response> {
    let mut r = ByteReader::new(payload);
    r.expect_magic(RESPONSE_MAGIC)?;
    let request_id = r.u32()?;
    let status = r.u8()?;
    if status != STATUS_OK {
        let len = r.u32()? as usize;
        let message = String::from_utf8_lossy(r.take(len)?).into_owned();
        return Ok(Response {
            request_id,
            body: ResponseBody::Error { status, message },
        });
    }
    let mut grids = Vec::with_capacity(8);
    for _ in 0..8 {
        let height = r.u32()?;
        let width = r.u32()?;
        let channels = r.u32()?;
        let n = (height as usize)
            .checked_mul(width as usize)
            .and_then(|n| n.checked_mul(channels as usize))
            .filter(|&n| n * 4 <= MAX_FRAME_BYTES)
            .ok_or_else(|| Error::parse(r.offset(), "grid too large"))?;
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        grids.push(Grid {
            height,
            width,
            channels,
            data,
        });
    }
    Ok(Response {
        request_id,
        body: ResponseBody::Grids(grids),
    })
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME_BYTES {
        return Err(Error::parse(0, format!("frame of {} bytes exceeds limit", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::parse(0, format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn grid_dims(g: &Grid, channels: u32, what: &str) -> Result<(usize, usize)> {
    if g.channels != channels && channels != 0 {
        return Err(Error::parse(0, format!("{what}: expected {channels} channels, got {}", g.channels)));
    }
    if g.data.len() != (g.height * g.width * g.channels) as usize {
        return Err(Error::parse(0, format!("{what}: data length mismatch")));
    }
    Ok((g.height as usize, g.width as usize))
}

fn pointmap_from_grids(points: &Grid, conf: &Grid) -> Result<(Pointmap, ConfidenceMap)> {
    let (h, w) = grid_dims(points, 3, "pointmap")?;
    if grid_dims(conf, 1, "confidence")? != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: (h, w),
            got: (conf.height as usize, conf.width as usize),
        });
    }
    let n = h * w;
    let mut pm = Pointmap::new_masked(h, w);
    for idx in 0..n {
        let c = conf.data[idx];
        if c > 0.0 {
            let p = Vector3::new(
                points.data[idx] as f64,
                points.data[n + idx] as f64,
                points.data[2 * n + idx] as f64,
            );
            pm.set(idx, Some(p));
        }
    }
    let conf = ConfidenceMap::from_values(h, w, conf.data.iter().map(|&v| v as f64).collect()).masked_by(&pm);
    Ok((pm, conf))
}

fn features_from_grids(desc: &Grid, q: &Grid) -> Result<FeatureMap> {
    let (h, w) = grid_dims(desc, 0, "features")?;
    grid_dims(q, 1, "feature confidence")?;
    let dim = desc.channels as usize;
    let n = h * w;
    let mut fm = FeatureMap::zeros(h, w, dim);
    for idx in 0..n {
        let out = fm.descriptor_mut(idx);
        for (c, v) in out.iter_mut().enumerate() {
            *v = desc.data[c * n + idx] as f64;
        }
        fm.set_confidence(idx, q.data[idx] as f64);
    }
    Ok(fm)
}

/// Interprets the eight response grids as a prediction pair.
pub fn grids_to_prediction(grids: &[Grid]) -> Result<PredictionPair> {
    if grids.len() != 8 {
        return Err(Error::parse(0, format!("expected 8 grids, got {}", grids.len())));
    }
    let (p1, c1) = pointmap_from_grids(&grids[0], &grids[2])?;
    let (p2, c2) = pointmap_from_grids(&grids[1], &grids[3])?;
    let pair = PredictionPair {
        points_first: p1,
        points_second: p2,
        conf_first: c1,
        conf_second: c2,
        features_first: features_from_grids(&grids[4], &grids[6])?,
        features_second: features_from_grids(&grids[5], &grids[7])?,
    };
    pair.check_dims()?;
    Ok(pair)
}

fn grid_from_points(pm: &Pointmap) -> Grid {
    let n = pm.len();
    let mut data = vec![0f32; 3 * n];
    for idx in 0..n {
        if let Some(p) = pm.get(idx) {
            for c in 0..3 {
                data[c * n + idx] = p[c] as f32;
            }
        }
    }
    Grid {
        height: pm.height() as u32,
        width: pm.width() as u32,
        channels: 3,
        data,
    }
}

/// Inverse of [`grids_to_prediction`], used by mock servers and tests.
pub fn prediction_to_grids(pair: &PredictionPair) -> Vec<Grid> {
    let (h, w) = pair.dims();
    let scalar = |vals: Vec<f32>| Grid {
        height: h as u32,
        width: w as u32,
        channels: 1,
        data: vals,
    };
    let feat = |fm: &FeatureMap| {
        let n = h * w;
        let dim = fm.dim();
        let mut data = vec![0f32; dim * n];
        for idx in 0..n {
            for (c, v) in fm.descriptor(idx).iter().enumerate() {
                data[c * n + idx] = *v as f32;
            }
        }
        Grid {
            height: h as u32,
            width: w as u32,
            channels: dim as u32,
            data,
        }
    };
    vec![
        grid_from_points(&pair.points_first),
        grid_from_points(&pair.points_second),
        scalar(pair.conf_first.values().iter().map(|&v| v as f32).collect()),
        scalar(pair.conf_second.values().iter().map(|&v| v as f32).collect()),
        feat(&pair.features_first),
        feat(&pair.features_second),
        scalar((0..h * w).map(|i| pair.features_first.confidence(i) as f32).collect()),
        scalar((0..h * w).map(|i| pair.features_second.confidence(i) as f32).collect()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(h: u32, w: u32, seed: u8) -> ImagePayload {
        ImagePayload {
            height: h,
            width: w,
            channels: 3,
            data: (0..h * w * 3).map(|i| (i as u8).wrapping_mul(seed)).collect(),
        }
    }

    #[test]
    fn request_layout_is_bit_exact() {
        let req = Request {
            request_id: 7,
            op: Op::MonocularInit,
            images: vec![image(1, 2, 3)],
        };
        let bytes = encode_request(&req);
        let mut expected = b"PRED".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&7u32.to_le_bytes());
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.push(3);
        expected.extend_from_slice(&req.images[0].data);
        assert_eq!(bytes, expected);
        assert_eq!(decode_request(&bytes).unwrap(), req);
    }

    #[test]
    fn truncated_request_reports_offset() {
        let req = Request {
            request_id: 1,
            op: Op::Predict,
            images: vec![image(2, 2, 1), image(2, 2, 5)],
        };
        let bytes = encode_request(&req);
        match decode_request(&bytes[..bytes.len() - 1]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn error_response_roundtrip() {
        let resp = Response {
            request_id: 9,
            body: ResponseBody::Error {
                status: STATUS_MALFORMED,
                message: "bad magic".into(),
            },
        };
        assert_eq!(decode_response(&encode_response(&resp)).unwrap(), resp);
    }

    #[test]
    fn framing_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut cur = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap(), b"hello");
        assert_eq!(read_frame(&mut cur).unwrap(), b"");
        assert!(read_frame(&mut cur).is_err());
    }

    proptest! {
        #[test]
        fn grid_response_roundtrip(h in 1u32..5, w in 1u32..5, d in 1u32..4, seed in any::<u64>()) {
            let mut x = seed;
            let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((x >> 33) as f32) / 1e6 };
            let chans = [3, 3, 1, 1, d, d, 1, 1];
            let grids: Vec<Grid> = chans.iter().map(|&c| Grid {
                height: h, width: w, channels: c,
                data: (0..h * w * c).map(|_| next()).collect(),
            }).collect();
            let resp = Response { request_id: 3, body: ResponseBody::Grids(grids) };
            prop_assert_eq!(decode_response(&encode_response(&resp)).unwrap(), resp);
        }
    }
}
