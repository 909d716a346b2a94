use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{self, ImagePayload, Op, Request, ResponseBody};
use super::{FrameId, MonocularPrediction, Predictor};
use crate::error::{Error, Result};
use crate::pointmap::PredictionPair;

/// Supplies raw RGB images for frame ids.
pub trait ImageSource: Send + Sync {
    fn image(&self, frame: FrameId) -> Result<ImagePayload>;
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u32,
}

/// Predictor backed by an external process speaking the wire protocol over TCP.
pub struct BridgeClient {
    conn: Mutex<Connection>,
    images: Box<dyn ImageSource>,
}

impl BridgeClient {
    pub fn connect(
        addr: impl ToSocketAddrs,
        timeout: Duration,
        images: Box<dyn ImageSource>,
    ) -> Result<Self> {
        let unavailable = |e: std::io::Error| Error::PredictorUnavailable(e.to_string());
        let addr = addr
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| Error::PredictorUnavailable("no address".into()))?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(unavailable)?;
        stream.set_read_timeout(Some(timeout)).map_err(unavailable)?;
        stream.set_write_timeout(Some(timeout)).map_err(unavailable)?;
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(stream.try_clone().map_err(unavailable)?);
        Ok(Self {
            conn: Mutex::new(Connection {
                reader,
                writer: BufWriter::new(stream),
                next_id: 1,
            }),
            images,
        })
    }

    fn call(&self, op: Op, frames: &[FrameId]) -> Result<PredictionPair> {
        let images = frames
            .iter()
            .map(|&f| self.images.image(f))
            .collect::<Result<Vec<_>>>()?;
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let request_id = conn.next_id;
        conn.next_id = conn.next_id.wrapping_add(1);
        let payload = wire::encode_request(&Request {
            request_id,
            op,
            images,
        });
        let io = |e: Error| match e {
            Error::Io(e) => Error::PredictorUnavailable(e.to_string()),
            other => other,
        };
        wire::write_frame(&mut conn.writer, &payload).map_err(io)?;
        let reply = wire::read_frame(&mut conn.reader).map_err(io)?;
        let resp = wire::decode_response(&reply)?;
        if resp.request_id != request_id {
            return Err(Error::PredictorUnavailable(format!(
                "response id {} does not match request {request_id}",
                resp.request_id
            )));
        }
        match resp.body {
            ResponseBody::Grids(grids) => wire::grids_to_prediction(&grids),
            ResponseBody::Error { status, message } => Err(Error::PredictorUnavailable(format!(
                "predictor returned status {status}: {message}"
            ))),
        }
    }
}

impl Predictor for BridgeClient {
    fn predict(&self, first: FrameId, second: FrameId) -> Result<PredictionPair> {
        self.call(Op::Predict, &[first, second])
    }

    fn monocular_init(&self, frame: FrameId) -> Result<MonocularPrediction> {
        let pair = self.call(Op::MonocularInit, &[frame])?;
        Ok(MonocularPrediction {
            points: pair.points_first,
            confidence: pair.conf_first,
            features: pair.features_first,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{NoiseModel, OraclePredictor, SceneConfig, SyntheticScene};
    use std::net::TcpListener;
    use std::sync::Arc;

    struct Blank;

    impl ImageSource for Blank {
        fn image(&self, frame: FrameId) -> Result<ImagePayload> {
            Ok(ImagePayload {
                height: 2,
                width: 2,
                channels: 3,
                data: vec![frame.index as u8; 12],
            })
        }
    }

    fn mock_server(oracle: OraclePredictor, fail_second: bool) -> std::net::SocketAddr {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut w = BufWriter::new(stream);
            let mut served = 0;
            while let Ok(frame) = wire::read_frame(&mut r) {
                let req = wire::decode_request(&frame).unwrap();
                let index = |k: usize| req.images[k].data[0] as u32;
                let first = FrameId::new(0, index(0));
                let second = if req.op == Op::Predict {
                    FrameId::new(0, index(1))
                } else {
                    first
                };
                served += 1;
                let body = if fail_second && served == 2 {
                    ResponseBody::Error {
                        status: wire::STATUS_MODEL_ERROR,
                        message: "out of memory".into(),
                    }
                } else {
                    ResponseBody::Grids(wire::prediction_to_grids(&oracle.predict(first, second).unwrap()))
                };
                let resp = wire::Response {
                    request_id: req.request_id,
                    body,
                };
                wire::write_frame(&mut w, &wire::encode_response(&resp)).unwrap();
            }
        });
        addr
    }

    fn oracle() -> OraclePredictor {
        let scene = SyntheticScene::build(&SceneConfig::demo_loop(8)).unwrap();
        OraclePredictor::new(Arc::new(scene), NoiseModel::default(), 3)
    }

    #[test]
    fn bridge_matches_in_process_predictor() {
        let local = oracle();
        let addr = mock_server(oracle(), false);
        let client = BridgeClient::connect(addr, Duration::from_secs(5), Box::new(Blank)).unwrap();
        let (a, b) = (FrameId::new(0, 1), FrameId::new(0, 2));
        let remote = client.predict(a, b).unwrap();
        let expected = local.predict(a, b).unwrap();
        assert_eq!(remote.points_second.mask(), expected.points_second.mask());
        for idx in 0..remote.points_second.len() {
            if let Some(p) = expected.points_second.get(idx) {
                let q = remote.points_second.point(idx);
                assert!((p - q).norm() < 1e-5 * (1.0 + p.norm()));
            }
        }
        let mono = client.monocular_init(a).unwrap();
        assert_eq!(mono.points.mask(), expected.points_first.mask());
    }

    #[test]
    fn error_status_becomes_unavailable() {
        let addr = mock_server(oracle(), true);
        let client = BridgeClient::connect(addr, Duration::from_secs(5), Box::new(Blank)).unwrap();
        let f = FrameId::new(0, 0);
        assert!(client.predict(f, f).is_ok());
        match client.predict(f, f) {
            Err(Error::PredictorUnavailable(msg)) => assert!(msg.contains("out of memory")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_server_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let r = BridgeClient::connect(addr, Duration::from_millis(200), Box::new(Blank));
        assert!(matches!(r, Err(Error::PredictorUnavailable(_))));
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let _keep = std::thread::spawn(move || {
            let (_s, _) = listener.accept().unwrap();
            std::thread::sleep(Duration::from_secs(2));
        });
        let client = BridgeClient::connect(addr, Duration::from_millis(200), Box::new(Blank)).unwrap();
        let f = FrameId::new(0, 0);
        assert!(matches!(client.predict(f, f), Err(Error::PredictorUnavailable(_))));
    }
}
