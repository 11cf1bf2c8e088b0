use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use rustls::ClientConfig;

use super::Callback;
use crate::identity::{sign_body, SIGNATURE_HEADER};
use crate::net::{block_on, HttpClient};

pub const CALLBACK_ATTEMPTS: u32 = 3;

/// Delivery outcome counters.
#[derive(Debug, Default)]
pub struct CallbackStats {
    pub delivered: AtomicU64,
    pub failed: AtomicU64,
}

/// POSTs one callback, signed with `secret`, retrying with doubling delays.
/// Returns the number of attempts made, or the last error.
pub fn deliver(
    client: &HttpClient,
    url: &str,
    secret: &str,
    cb: &Callback,
    attempts: u32,
    base: Duration,
) -> Result<u32, String> {
    let body = serde_json::to_vec(cb).expect("callback serialises");
    let sig = sign_body(secret.as_bytes(), &body);
    let mut last = String::new();
    for k in 0..attempts {
        if k > 0 {
            std::thread::sleep(base * (1 << (k - 1)));
        }
        let r = block_on(client.request(
            hyper::Method::POST,
            url,
            &[("content-type", "application/json"), (SIGNATURE_HEADER, &sig)],
            Some(body.clone()),
        ));
        match r {
            Ok(resp) if resp.is_success() => return Ok(k + 1),
            Ok(resp) => last = format!("HTTP {}: {}", resp.status, resp.text()),
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}

struct Job {
    url: String,
    secret: String,
    cb: Callback,
}

/// Sends callbacks from a background thread, in submission order, so a slow
/// receiver never holds up a job.
#[derive(Clone)]
pub struct Notifier {
    tx: Sender<Job>,
    pending: Arc<(Mutex<usize>, Condvar)>,
    pub stats: Arc<CallbackStats>,
}

impl Notifier {
    pub fn new(tls: Option<Arc<ClientConfig>>, retry_base: Duration) -> Self {
        let (tx, rx) = channel::<Job>();
        let pending = Arc::new((Mutex::new(0usize), Condvar::new()));
        let stats = Arc::new(CallbackStats::default());
        let (p, st) = (pending.clone(), stats.clone());
        std::thread::Builder::new()
            .name("callbacks".into())
            .spawn(move || {
                let client = match tls {
                    Some(c) => HttpClient::with_tls(c),
                    None => HttpClient::plain(),
                }
                .timeout(Duration::from_secs(5));
                for job in rx {
                    match deliver(&client, &job.url, &job.secret, &job.cb, CALLBACK_ATTEMPTS, retry_base) {
                        Ok(_) => {
                            st.delivered.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => {
                            st.failed.fetch_add(1, Ordering::Relaxed);
                            tracing::warn!(
                                "callback for job {} ({}) to {} failed after {CALLBACK_ATTEMPTS} attempts: {e}",
                                job.cb.jobid,
                                job.cb.state,
                                job.url
                            );
                        }
                    }
                    let (m, cv) = &*p;
                    *m.lock() -= 1;
                    cv.notify_all();
                }
            })
            .expect("spawn callback thread");
        Notifier { tx, pending, stats }
    }

    pub fn send(&self, url: &str, secret: &str, cb: Callback) {
        *self.pending.0.lock() += 1;
        let job = Job {
            url: url.to_string(),
            secret: secret.to_string(),
            cb,
        };
        if self.tx.send(job).is_err() {
            *self.pending.0.lock() -= 1;
        }
    }

    /// Waits until every queued callback has been attempted.
    pub fn flush(&self, timeout: Duration) -> bool {
        let (m, cv) = &*self.pending;
        let mut n = m.lock();
        let deadline = std::time::Instant::now() + timeout;
        while *n > 0 {
            if cv.wait_until(&mut n, deadline).timed_out() {
                return *n == 0;
            }
        }
        true
    }
}
