#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;

use base64::Engine;
use maskguide::codec::encode_mask;
use maskguide::{toytask, ClassVocabulary};
use maskguide_service::{JobEvent, Service, ServiceConfig};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub struct Server {
    pub addr: SocketAddr,
    pub service: Service,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub async fn start(storage: &Path) -> Self {
        Self::start_with(config(storage)).await
    }

    pub async fn start_with(config: ServiceConfig) -> Self {
        let service = Service::open(config).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (stop, stopped) = oneshot::channel();
        let handle = tokio::spawn(maskguide_service::http::serve(listener, service.clone(), async {
            let _ = stopped.await;
        }));
        Self {
            addr,
            service,
            stop: Some(stop),
            handle: Some(handle),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.take().unwrap().await.unwrap().unwrap();
    }

    pub async fn submit(&self, spec: &Value) -> (u16, Value) {
        let resp = reqwest::Client::new()
            .post(self.url("/jobs"))
            .json(spec)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    pub async fn get_json(&self, path: &str) -> (u16, Value) {
        let resp = reqwest::get(self.url(path)).await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    pub async fn artifact(&self, id: &str) -> (u16, Vec<u8>) {
        let resp = reqwest::get(self.url(&format!("/artifacts/{id}"))).await.unwrap();
        (resp.status().as_u16(), resp.bytes().await.unwrap().to_vec())
    }

    /// Reads the event stream to its end (the job's terminal event).
    pub async fn events(&self, id: &str, last_event_id: Option<u64>) -> Vec<SseFrame> {
        let mut req = reqwest::Client::new().get(self.url(&format!("/jobs/{id}/events")));
        if let Some(last) = last_event_id {
            req = req.header("Last-Event-ID", last.to_string());
        }
        let resp = req.send().await.unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        parse_sse(&resp.text().await.unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct SseFrame {
    pub id: u64,
    pub event: String,
    pub data: JobEvent,
}

pub fn parse_sse(text: &str) -> Vec<SseFrame> {
    let mut frames = Vec::new();
    for block in text.split("\n\n") {
        let (mut id, mut event, mut data) = (None, None, String::new());
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse().unwrap());
            } else if let Some(v) = line.strip_prefix("event:") {
                event = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if let (Some(id), Some(event)) = (id, event) {
            frames.push(SseFrame {
                id,
                event,
                data: serde_json::from_str(&data).unwrap(),
            });
        }
    }
    frames
}

pub fn config(storage: &Path) -> ServiceConfig {
    ServiceConfig {
        storage_root: storage.to_path_buf(),
        backends: toytask::backend_config(),
        ..ServiceConfig::default()
    }
}

pub fn mask_b64() -> String {
    let enc = encode_mask(&toytask::target::<f64>(), &ClassVocabulary::toy()).unwrap();
    base64::engine::general_purpose::STANDARD.encode(enc.png)
}

pub fn spec(max_steps: usize) -> Value {
    json!({
        "prompt": toytask::PROMPT,
        "mask_png_base64": mask_b64(),
        "weights": {"alpha_clip": 1.0, "alpha_seg": [toytask::ALPHA_SEG]},
        "optimizer": {"max_steps": max_steps, "step_size": 0.1, "momentum": 0.9, "init_scale": 1.7},
        "seed": 11,
    })
}
