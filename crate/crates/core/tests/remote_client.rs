use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use diffuforge_core::backend::synthetic::synthetic_generate;
use diffuforge_core::backend::wire::{encode_f32_le, encode_response, WireHeatmap, WireRequest, WireResponse};
use diffuforge_core::backend::{
    generate, BackendErrorKind, GenerationRequest, RemoteBackend, RemoteOptions,
};
use diffuforge_core::templating::ExpandedPrompt;

type Handler = dyn Fn(WireRequest) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    hits: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<Vec<u8>> {
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(body)
}

fn serve(handler: Arc<Handler>, delay: Duration) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (h, a, p) = (hits.clone(), active.clone(), peak.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, h, a, p) = (handler.clone(), h.clone(), a.clone(), p.clone());
            std::thread::spawn(move || {
                let Some(body) = read_request(&mut stream) else { return };
                h.fetch_add(1, Ordering::SeqCst);
                let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(delay);
                let req: WireRequest = serde_json::from_slice(&body).unwrap();
                let (status, payload) = handler(req);
                a.fetch_sub(1, Ordering::SeqCst);
                let head = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                    payload.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(payload.as_bytes());
            });
        }
    });
    Mock { url, hits, peak }
}

fn request(tokens: &[&str], seed: u64) -> GenerationRequest {
    let prompt = ExpandedPrompt {
        template_id: "remote-tpl".into(),
        text: "a photo".into(),
        negative_text: None,
        bindings: Default::default(),
        tokens_of_interest: tokens.iter().map(|s| s.to_string()).collect(),
    };
    GenerationRequest::text_to_image(prompt, seed, 64, 64)
}

/// Answers like a real server would, using the synthetic renderer.
fn synthetic_server(w: WireRequest) -> WireResponse {
    let mut req = request(&[], w.seed);
    req.prompt.text = w.prompt;
    req.prompt.tokens_of_interest = w.tokens_of_interest;
    req.width = w.width;
    req.height = w.height;
    encode_response(&synthetic_generate(&req, "mock-sd")).unwrap()
}

fn json(r: &WireResponse) -> String {
    serde_json::to_string(r).unwrap()
}

fn options(timeout_s: u64, concurrency: usize) -> RemoteOptions {
    RemoteOptions {
        timeout_s,
        concurrency,
    }
}

#[test]
fn success_matches_local_rendering() {
    let mock = serve(Arc::new(|w| (200, json(&synthetic_server(w)))), Duration::ZERO);
    let backend = RemoteBackend::new(&mock.url, RemoteOptions::default()).unwrap();
    let req = request(&["car", "dog"], 11);
    let got = generate(&backend, &req).unwrap();
    let local = synthetic_generate(&req, "mock-sd");
    assert_eq!(got.image, local.image);
    assert_eq!(got.backend_id, "mock-sd");
    assert_eq!(got.heatmaps.keys().collect::<Vec<_>>(), vec!["car", "dog"]);
    for (token, h) in &got.heatmaps {
        let want = &local.heatmaps[token];
        assert!(h.values().iter().zip(want.values()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn raw_maps_are_aggregated() {
    let mock = serve(
        Arc::new(|w: WireRequest| {
            let mut r = synthetic_server(w);
            let token = r.heatmaps[0].token.clone();
            // Two coarse layers peaking in opposite corners.
            r.heatmaps = [(0.0f32, 1.0f32), (1.0, 0.0)]
                .iter()
                .map(|&(a, b)| WireHeatmap {
                    token: token.clone(),
                    width: 2,
                    height: 2,
                    data_b64: encode_f32_le(&[a, 0.5, 0.5, b]),
                    pre_aggregated: false,
                })
                .collect();
            (200, json(&r))
        }),
        Duration::ZERO,
    );
    let backend = RemoteBackend::new(&mock.url, RemoteOptions::default()).unwrap();
    let got = generate(&backend, &request(&["car"], 1)).unwrap();
    let h = &got.heatmaps["car"];
    assert_eq!((h.width(), h.height()), (64, 64));
    // The layers sum to a constant map, which normalizes to zeros.
    assert!(h.is_degenerate());
}

#[test]
fn status_and_protocol_errors_are_not_retried() {
    let mock = serve(Arc::new(|_| (503, "overloaded".into())), Duration::ZERO);
    let backend = RemoteBackend::new(&mock.url, RemoteOptions::default()).unwrap();
    let err = generate(&backend, &request(&["car"], 4)).unwrap_err();
    assert!(matches!(err.kind, BackendErrorKind::Status { status: 503, .. }), "{err}");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);

    let mock = serve(
        Arc::new(|w| {
            let mut r = synthetic_server(w);
            r.heatmaps[0].data_b64 = encode_f32_le(&[0.5; 10]);
            (200, json(&r))
        }),
        Duration::ZERO,
    );
    let backend = RemoteBackend::new(&mock.url, RemoteOptions::default()).unwrap();
    let err = generate(&backend, &request(&["car"], 4)).unwrap_err();
    match &err.kind {
        BackendErrorKind::Protocol { field, .. } => assert_eq!(field, "heatmaps[0].data_b64"),
        other => panic!("{other:?}"),
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn missing_heatmap_is_rejected() {
    let mock = serve(
        Arc::new(|w| {
            let mut r = synthetic_server(w);
            r.heatmaps.clear();
            (200, json(&r))
        }),
        Duration::ZERO,
    );
    let backend = RemoteBackend::new(&mock.url, RemoteOptions::default()).unwrap();
    let err = generate(&backend, &request(&["car"], 2)).unwrap_err();
    assert!(matches!(err.kind, BackendErrorKind::MissingHeatmap(_)), "{err}");
}

#[test]
fn unreachable_endpoint_reports_request_identity() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let backend = RemoteBackend::new(&format!("http://127.0.0.1:{port}"), options(5, 1)).unwrap();
    let err = generate(&backend, &request(&["car"], 77)).unwrap_err();
    assert!(err.is_transport());
    let msg = err.to_string();
    assert!(msg.contains("remote-tpl") && msg.contains("77"), "{msg}");
}

#[test]
fn timeout_is_retried_once() {
    let mock = serve(Arc::new(|w| (200, json(&synthetic_server(w)))), Duration::from_millis(2500));
    let backend = RemoteBackend::new(&mock.url, options(1, 1)).unwrap();
    let err = generate(&backend, &request(&["car"], 3)).unwrap_err();
    assert!(matches!(err.kind, BackendErrorKind::Timeout(1)), "{err}");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn concurrency_cap_holds() {
    let mock = serve(Arc::new(|w| (200, json(&synthetic_server(w)))), Duration::from_millis(100));
    let backend = Arc::new(RemoteBackend::new(&mock.url, options(30, 2)).unwrap());
    let handles: Vec<_> = (0..6)
        .map(|seed| {
            let b = backend.clone();
            std::thread::spawn(move || generate(b.as_ref(), &request(&["car"], seed)).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 6);
    assert!(mock.peak.load(Ordering::SeqCst) <= 2);
}
