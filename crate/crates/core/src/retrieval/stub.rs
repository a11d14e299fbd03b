use std::fs::OpenOptions;
use std::io::{Cursor, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

/// A 1×1 grey PNG.
pub fn tiny_png() -> Vec<u8> {
    let img = image::RgbImage::from_pixel(1, 1, image::Rgb([128, 128, 128]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("encoding a 1x1 PNG in memory cannot fail");
    out.into_inner()
}

#[derive(Clone, Debug, Default)]
pub struct StubOptions {
    /// Answer 500 when the prompt contains this text.
    pub fail_when_prompt_contains: Option<String>,
    /// Append each raw request body as one line to this file.
    pub log_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StubRequest {
    pub body: String,
    pub prompt: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
struct Body {
    prompt: String,
    seed: Option<u64>,
}

/// Local stand-in for the image generator: answers every POST with
/// [`tiny_png`] and records what it received.
pub struct StubServer {
    url: String,
    server: Arc<tiny_http::Server>,
    log: Arc<Mutex<Vec<StubRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves in a
    /// background thread until dropped.
    pub fn start(addr: &str, options: StubOptions) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Transport {
            endpoint: addr.to_string(),
            message: e.to_string(),
        })?;
        let local = server.server_addr().to_ip().ok_or_else(|| Error::Transport {
            endpoint: addr.to_string(),
            message: "stub server has no IP address".into(),
        })?;
        let server = Arc::new(server);
        let log = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let png = tiny_png();
        let handle = {
            let (server, log, stop) = (server.clone(), log.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let mut req = match server.recv_timeout(Duration::from_millis(100)) {
                        Ok(Some(r)) => r,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let parsed: Option<Body> = serde_json::from_str(&body).ok();
                    if let Some(path) = &options.log_path {
                        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
                            let _ = writeln!(f, "{body}");
                        }
                    }
                    let fail = match (&parsed, &options.fail_when_prompt_contains) {
                        (None, _) => Some((400, "body is not {\"prompt\": string}")),
                        (Some(b), Some(pat)) if b.prompt.contains(pat.as_str()) => Some((500, "planted failure")),
                        _ => None,
                    };
                    log.lock().unwrap().push(StubRequest {
                        body: body.clone(),
                        prompt: parsed.as_ref().map(|b| b.prompt.clone()),
                        seed: parsed.as_ref().and_then(|b| b.seed),
                    });
                    let response = match fail {
                        Some((code, msg)) => tiny_http::Response::from_string(msg).with_status_code(code).boxed(),
                        None => tiny_http::Response::from_data(png.clone())
                            .with_header(
                                tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"image/png"[..])
                                    .expect("static header is valid"),
                            )
                            .boxed(),
                    };
                    let _ = req.respond(response);
                }
            })
        };
        Ok(Self {
            url: format!("http://{local}/generate"),
            server,
            log,
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.log.lock().unwrap().clone()
    }

    /// Blocks the calling thread while the server keeps running.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
