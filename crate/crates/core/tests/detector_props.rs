use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use uavdet_core::detector::conformance::{self, conformance_model, SCENE_IMAGE};
use uavdet_core::detector::external::ExternalConfig;
use uavdet_core::detector::server::DetectorServer;
use uavdet_core::detector::synthetic::{generate_suite, suite_image_path, SuiteSpec};
use uavdet_core::detector::{
    DetectRequest, Detector, DetectorError, ExternalDetector, FixtureDetector, SceneObject,
    SyntheticDetector, SyntheticScene, SyntheticSceneModel,
};
use uavdet_core::geometry::{BBox, CropWindow};

fn quick() -> ExternalConfig {
    ExternalConfig {
        timeout: Duration::from_secs(5),
        retries: 2,
        backoff: Duration::from_millis(1),
        max_idle_connections: 2,
    }
}

fn one_object_model(noise: f64) -> SyntheticSceneModel {
    let scene = SyntheticScene {
        width: 800,
        height: 600,
        objects: vec![SceneObject {
            bbox: BBox::from_corners(300.0, 200.0, 320.0, 216.0).unwrap(),
            class_id: 1,
        }],
        clutter: vec![],
    };
    SyntheticSceneModel {
        base_conf: 0.05,
        area_gain: 25.0,
        noise_sigma: noise,
        seed: 3,
        min_visibility: 0.3,
        scenes: BTreeMap::from([("scene".to_string(), scene)]),
    }
}

#[test]
fn synthetic_is_pure() {
    let d = SyntheticDetector::new(generate_suite(&SuiteSpec {
        noise_sigma: 0.05,
        ..SuiteSpec::default()
    }))
    .unwrap();
    let req = DetectRequest {
        image_ref: suite_image_path(4),
        window: Some([100, 80, 420, 400]),
        target_size: [640, 640],
        conf_floor: 0.0,
    };
    let a = serde_json::to_string(&d.detect(&req).unwrap()).unwrap();
    let b = serde_json::to_string(&d.detect(&req).unwrap()).unwrap();
    assert_eq!(a, b);
    let whole = DetectRequest::whole(suite_image_path(4), [640, 640], 0.0);
    assert!(!d.detect(&whole).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn noise_free_confidence_grows_with_zoom(half in 10u32..200, shrink in 1u32..100) {
        let d = SyntheticDetector::new(one_object_model(0.0)).unwrap();
        let (cx, cy) = (310u32, 208u32);
        let window = |h: u32| Some([cx.saturating_sub(h), cy.saturating_sub(h), (cx + h).min(800), (cy + h).min(600)]);
        let score = |h: u32| {
            let req = DetectRequest { image_ref: "scene".into(), window: window(h), target_size: [640, 640], conf_floor: 0.0 };
            d.detect(&req).unwrap()[0].score
        };
        let small = half.saturating_sub(shrink).max(10);
        prop_assert!(score(small) >= score(half));
    }

    #[test]
    fn boxes_stay_in_target_frame(x0 in 0u32..700, y0 in 0u32..500, w in 8u32..400, h in 8u32..400, tw in 32u32..1024, th in 32u32..1024) {
        let d = SyntheticDetector::new(generate_suite(&SuiteSpec { n_images: 2, ..SuiteSpec::default() })).unwrap();
        let req = DetectRequest {
            image_ref: suite_image_path(1),
            window: Some([x0, y0, (x0 + w).min(1280), (y0 + h).min(960)]),
            target_size: [tw, th],
            conf_floor: 0.0,
        };
        for det in d.detect(&req).unwrap() {
            let [a, b, c, e] = det.bbox.corners();
            prop_assert!(a >= 0.0 && b >= 0.0 && c <= f64::from(tw) && e <= f64::from(th));
            prop_assert!((0.0..=1.0).contains(&det.score));
        }
    }
}

#[test]
fn synthetic_rejects_bad_requests() {
    let d = SyntheticDetector::new(one_object_model(0.0)).unwrap();
    let unknown = DetectRequest::whole("nope", [64, 64], 0.0);
    assert!(matches!(
        d.detect(&unknown),
        Err(DetectorError::UnknownImage(_))
    ));
    for req in [
        DetectRequest::whole("scene", [0, 64], 0.0),
        DetectRequest::whole("scene", [64, 64], 1.5),
        DetectRequest {
            window: Some([10, 10, 10, 20]),
            ..DetectRequest::whole("scene", [64, 64], 0.0)
        },
        DetectRequest {
            window: Some([10, 10, 900, 20]),
            ..DetectRequest::whole("scene", [64, 64], 0.0)
        },
    ] {
        let e = d.detect(&req).unwrap_err();
        assert!(matches!(e, DetectorError::InvalidRequest(_)), "{e}");
        assert!(!e.is_backend_failure());
    }
}

#[test]
fn fixture_replays_recorded_answers() {
    let live = SyntheticDetector::new(one_object_model(0.1)).unwrap();
    let win = CropWindow::new(250, 150, 370, 270, 800, 600).unwrap();
    let requests = vec![
        DetectRequest::whole("scene", [640, 640], 0.0),
        DetectRequest::for_window("scene", &win, [640, 640], 0.0),
    ];
    let file = FixtureDetector::record(&live, &requests).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.json");
    std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    let replay = FixtureDetector::load(&path).unwrap();
    assert_eq!(replay.len(), 2);
    for r in &requests {
        assert_eq!(replay.detect(r).unwrap(), live.detect(r).unwrap());
    }
    // Windows within the key grid hit the same entry.
    let near = DetectRequest {
        window: Some([251, 149, 369, 268]),
        ..requests[1].clone()
    };
    assert_eq!(
        replay.detect(&near).unwrap(),
        live.detect(&requests[1]).unwrap()
    );
    let far = DetectRequest {
        window: Some([0, 0, 100, 100]),
        ..requests[1].clone()
    };
    assert!(matches!(
        replay.detect(&far),
        Err(DetectorError::MissingFixture(_))
    ));

    let mut dup = file.clone();
    dup.entries.push(file.entries[0].clone());
    assert!(FixtureDetector::from_file(dup).is_err());
}

#[test]
fn server_and_client_round_trip() {
    let backend = SyntheticDetector::new(one_object_model(0.05)).unwrap();
    let server = DetectorServer::start(Arc::new(backend.clone()), "127.0.0.1:0", 2).unwrap();
    let client = ExternalDetector::new(&server.url(), quick());
    let reqs = [
        DetectRequest::whole("scene", [640, 640], 0.0),
        DetectRequest {
            window: Some([280, 180, 340, 240]),
            ..DetectRequest::whole("scene", [320, 320], 0.0)
        },
    ];
    for r in &reqs {
        let got = client.detect(r).unwrap();
        let want = backend.detect(r).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.class_id, w.class_id);
            assert!((g.score - w.score).abs() < 1e-12);
            for (a, b) in g.bbox.corners().iter().zip(w.bbox.corners()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
    let e = client
        .detect(&DetectRequest::whole("missing", [64, 64], 0.0))
        .unwrap_err();
    assert!(
        matches!(e, DetectorError::Status { status: 404, .. }),
        "{e}"
    );
    server.shutdown();
}

#[test]
fn conformance_passes_against_reference_server() {
    let backend = SyntheticDetector::new(conformance_model()).unwrap();
    assert!(conformance::check(&backend).passed);
    let server = DetectorServer::start(Arc::new(backend), "127.0.0.1:0", 2).unwrap();
    let client = ExternalDetector::new(&server.url(), quick());
    let report = conformance::check(&client);
    assert!(report.passed, "{report:?}");
    assert!(!report.cases.is_empty());
    server.shutdown();
}

#[test]
fn conformance_flags_wrong_answers() {
    let mut model = conformance_model();
    model.scenes.get_mut(SCENE_IMAGE).unwrap().objects.pop();
    let report = conformance::check(&SyntheticDetector::new(model).unwrap());
    assert!(!report.passed);
    assert!(!report.backend_failed());
}

/// Answers with `bodies[i]` for the i-th request, repeating the last one.
fn mock_server(bodies: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let count = Arc::clone(&hits);
    thread::spawn(move || {
        for rq in server.incoming_requests() {
            let n = count.fetch_add(1, Ordering::SeqCst);
            let (status, body) = bodies[n.min(bodies.len() - 1)];
            let _ = rq.respond(tiny_http::Response::from_string(body).with_status_code(status));
        }
    });
    (url, hits)
}

const GOOD: &str = r#"{"detections":[{"bbox_xyxy":[1,2,30,40],"score":0.8,"class_id":0}]}"#;

#[test]
fn client_retries_server_errors() {
    let (url, hits) = mock_server(vec![(503, "busy"), (500, "{}"), (200, GOOD)]);
    let got = ExternalDetector::new(&url, quick())
        .detect(&DetectRequest::whole("a", [64, 64], 0.0))
        .unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].bbox.corners(), [1.0, 2.0, 30.0, 40.0]);
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let (url, hits) = mock_server(vec![(503, "busy")]);
    let e = ExternalDetector::new(&url, quick())
        .detect(&DetectRequest::whole("a", [64, 64], 0.0))
        .unwrap_err();
    assert!(matches!(e, DetectorError::Status { status: 503, .. }));
    assert!(e.is_backend_failure());
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let (url, hits) = mock_server(vec![(400, r#"{"error":"no"}"#)]);
    let e = ExternalDetector::new(&url, quick())
        .detect(&DetectRequest::whole("a", [64, 64], 0.0))
        .unwrap_err();
    assert!(matches!(e, DetectorError::Status { status: 400, .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn client_rejects_malformed_responses() {
    for body in [
        "not json",
        r#"{"boxes":[]}"#,
        r#"{"detections":[{"bbox_xyxy":[1,2,3],"score":0.5,"class_id":0}]}"#,
        r#"{"detections":[{"bbox_xyxy":[5,2,3,4],"score":0.5,"class_id":0}]}"#,
        r#"{"detections":[{"bbox_xyxy":[1,2,3,4],"score":1.5,"class_id":0}]}"#,
        r#"{"detections":[{"bbox_xyxy":[100,100,120,120],"score":0.5,"class_id":0}]}"#,
    ] {
        let (url, hits) = mock_server(vec![(200, body)]);
        let e = ExternalDetector::new(&url, quick())
            .detect(&DetectRequest::whole("a", [64, 64], 0.0))
            .unwrap_err();
        assert!(matches!(e, DetectorError::Schema { .. }), "{body}: {e}");
        assert!(e.is_backend_failure());
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }
}

#[test]
fn client_clips_and_filters() {
    let (url, _) = mock_server(vec![(
        200,
        r#"{"detections":[{"bbox_xyxy":[50,50,80,70],"score":0.6,"class_id":1},{"bbox_xyxy":[1,1,5,5],"score":0.1,"class_id":0}]}"#,
    )]);
    let got = ExternalDetector::new(&url, quick())
        .detect(&DetectRequest::whole("a", [64, 64], 0.2))
        .unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].bbox.corners(), [50.0, 50.0, 64.0, 64.0]);
}

#[test]
fn unreachable_backend_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client = ExternalDetector::new(&format!("http://127.0.0.1:{port}"), quick());
    let e = client
        .detect(&DetectRequest::whole("a", [64, 64], 0.0))
        .unwrap_err();
    match &e {
        DetectorError::Transport { attempts, .. } => assert_eq!(*attempts, 3),
        other => panic!("{other}"),
    }
    assert!(e.is_backend_failure());
}
