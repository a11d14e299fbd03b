use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

use super::PromptBundle;
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_CONCURRENCY: usize = 4;
const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const MAX_BODY: u64 = 64 << 20;

#[derive(Clone, Debug)]
pub struct Endpoint {
    pub url: String,
    pub timeout: Duration,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    fn transport(&self, message: impl Into<String>) -> Error {
        Error::Transport {
            endpoint: self.url.clone(),
            message: message.into(),
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// POSTs `{"prompt": .., "seed": ..}` and returns the PNG response body.
pub fn dispatch_prompt(bundle: &PromptBundle, endpoint: &Endpoint, seed: Option<u64>) -> Result<Vec<u8>> {
    let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
    let body = serde_json::to_string(&Request {
        prompt: &bundle.prompt,
        seed,
    })?;
    let response = match agent
        .post(&endpoint.url)
        .set("Content-Type", "application/json")
        .send_string(&body)
    {
        Ok(r) => r,
        Err(ureq::Error::Status(code, r)) => {
            let text = r.into_string().unwrap_or_default();
            return Err(endpoint.transport(format!("status {code}: {text}")));
        }
        Err(e) => return Err(endpoint.transport(e.to_string())),
    };
    let mut bytes = Vec::new();
    response
        .into_reader()
        .take(MAX_BODY)
        .read_to_end(&mut bytes)
        .map_err(|e| endpoint.transport(e.to_string()))?;
    if !bytes.starts_with(PNG_MAGIC) {
        return Err(endpoint.transport(format!("response of {} bytes is not a PNG", bytes.len())));
    }
    Ok(bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DispatchOutcome {
    pub epoch: usize,
    pub image: Option<PathBuf>,
    pub error: Option<String>,
}

/// Sends every bundle with at most `concurrency` requests in flight and
/// saves `epoch_XXXXX.png` into `out_dir`. Failures are recorded per epoch
/// and never stop the batch. Outcomes come back in bundle order.
pub fn dispatch_all(
    bundles: &[PromptBundle],
    endpoint: &Endpoint,
    out_dir: &Path,
    concurrency: usize,
    seed: Option<u64>,
) -> Result<Vec<DispatchOutcome>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<DispatchOutcome>>> = bundles.iter().map(|_| Mutex::new(None)).collect();
    let workers = concurrency.max(1).min(bundles.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(bundle) = bundles.get(i) else { break };
                let outcome = match dispatch_prompt(bundle, endpoint, seed).and_then(|png| {
                    let path = out_dir.join(format!("epoch_{:05}.png", bundle.epoch));
                    std::fs::write(&path, png).map_err(|e| Error::file(&path, e))?;
                    Ok(path)
                }) {
                    Ok(path) => DispatchOutcome {
                        epoch: bundle.epoch,
                        image: Some(path),
                        error: None,
                    },
                    Err(e) => DispatchOutcome {
                        epoch: bundle.epoch,
                        image: None,
                        error: Some(e.to_string()),
                    },
                };
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every bundle is dispatched"))
        .collect())
}
