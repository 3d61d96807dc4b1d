//! Serves any [`Detector`] over the wire protocol. Used as a reference
//! implementation and in tests.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use tiny_http::{Header, Method, Request, Response, Server};

use super::{DetectRequest, Detector, DetectorError, WireResponse};

pub struct DetectorServer {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl DetectorServer {
    /// Binds `addr` (port 0 picks a free port) and serves with `workers`
    /// threads.
    pub fn start(
        detector: Arc<dyn Detector>,
        addr: &str,
        workers: usize,
    ) -> Result<Self, DetectorError> {
        let server =
            Server::http(addr).map_err(|e| DetectorError::Config(format!("bind {addr}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| DetectorError::Config("not an IP listener".into()))?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let detector = Arc::clone(&detector);
                thread::spawn(move || {
                    while let Ok(rq) = server.recv() {
                        handle(rq, detector.as_ref());
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            addr,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until interrupted.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for DetectorServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    let header =
        Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    Response::from_string(body)
        .with_status_code(status)
        .with_header(header)
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn handle(mut rq: Request, detector: &dyn Detector) {
    let (status, body) = if rq.url() != "/detect" {
        (404, error_body("not found"))
    } else if rq.method() != &Method::Post {
        (405, error_body("use POST"))
    } else {
        let mut text = String::new();
        match rq.as_reader().read_to_string(&mut text) {
            Err(e) => (400, error_body(&e.to_string())),
            Ok(_) => match serde_json::from_str::<DetectRequest>(&text) {
                Err(e) => (400, error_body(&format!("bad request body: {e}"))),
                Ok(req) => match detector.detect(&req) {
                    Ok(dets) => (
                        200,
                        serde_json::to_string(&WireResponse::from_detections(&dets))
                            .expect("serializable"),
                    ),
                    Err(DetectorError::InvalidRequest(m)) => (400, error_body(&m)),
                    Err(
                        e @ (DetectorError::UnknownImage(_) | DetectorError::MissingFixture(_)),
                    ) => (404, error_body(&e.to_string())),
                    Err(e) => (500, error_body(&e.to_string())),
                },
            },
        }
    };
    if let Err(e) = rq.respond(json_response(status, body)) {
        log::warn!("failed to send response: {e}");
    }
}
