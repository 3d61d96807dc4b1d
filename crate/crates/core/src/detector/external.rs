//! Blocking HTTP client for a remote detection server.

use std::thread;
use std::time::Duration;

use rand::Rng;
use serde_json::Value;

use super::{validate_response, DetectRequest, Detector, DetectorError};
use crate::geometry::BBox;
use crate::postprocess::Detection;

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalConfig {
    pub timeout: Duration,
    /// Attempts after the first one.
    pub retries: u32,
    /// First backoff delay; doubles per attempt, jittered by ±50 %.
    pub backoff: Duration,
    pub max_idle_connections: usize,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(10),
            retries: 2,
            backoff: Duration::from_millis(200),
            max_idle_connections: 8,
        }
    }
}

pub struct ExternalDetector {
    agent: ureq::Agent,
    endpoint: String,
    cfg: ExternalConfig,
}

enum Attempt {
    Done(Result<Vec<Detection>, DetectorError>),
    Retry(DetectorError),
}

impl ExternalDetector {
    /// `base_url` is the server root; requests go to `{base_url}/detect`.
    pub fn new(base_url: &str, cfg: ExternalConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .max_idle_connections_per_host(cfg.max_idle_connections)
            .build()
            .into();
        Self {
            agent,
            endpoint: format!("{}/detect", base_url.trim_end_matches('/')),
            cfg,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, req: &DetectRequest, n: u32) -> Attempt {
        let boxed = || Box::new(req.clone());
        let mut resp = match self.agent.post(&self.endpoint).send_json(req) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(DetectorError::Transport {
                    request: boxed(),
                    attempts: n,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        if status != 200 {
            let err = DetectorError::Status {
                request: boxed(),
                status,
            };
            return if status >= 500 || status == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Done(Err(err))
            };
        }
        let body: Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(e) => {
                return Attempt::Done(Err(DetectorError::Schema {
                    request: boxed(),
                    message: format!("body is not JSON: {e}"),
                }))
            }
        };
        let schema = |message: String| DetectorError::Schema {
            request: boxed(),
            message,
        };
        let parsed = validate_response(&body)
            .and_then(|w| w.into_detections(&req.image_ref))
            .map_err(schema)
            .and_then(|dets| clip_to_target(dets, req.target_size).map_err(schema))
            .map(|dets| {
                dets.into_iter()
                    .filter(|d| d.score >= req.conf_floor)
                    .collect()
            });
        Attempt::Done(parsed)
    }
}

/// Clips boxes to the target frame; a box entirely outside is an error.
fn clip_to_target(dets: Vec<Detection>, target: [u32; 2]) -> Result<Vec<Detection>, String> {
    let frame = BBox::from_corners(0.0, 0.0, f64::from(target[0]), f64::from(target[1]))
        .expect("validated target size");
    dets.into_iter()
        .enumerate()
        .map(|(i, mut d)| {
            d.bbox = d
                .bbox
                .intersection(&frame)
                .ok_or(format!("detections[{i}] lies outside the {target:?} frame"))?;
            Ok(d)
        })
        .collect()
}

impl Detector for ExternalDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError> {
        req.validate()?;
        let mut rng = rand::rng();
        let mut last = None;
        for n in 0..=self.cfg.retries {
            if n > 0 {
                let base = self.cfg.backoff.as_secs_f64() * f64::from(1u32 << (n - 1).min(16));
                thread::sleep(Duration::from_secs_f64(base * rng.random_range(0.5..1.5)));
            }
            match self.attempt(req, n + 1) {
                Attempt::Done(r) => return r,
                Attempt::Retry(e) => {
                    log::warn!("detector request attempt {} failed: {e}", n + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
