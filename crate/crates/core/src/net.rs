//! Shared plumbing for the HTTPS provider clients.

use std::io::Read;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::{Error, Result};

/// Delays between attempts; one initial attempt plus one retry per delay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub delays: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { delays: [1, 4, 16].map(Duration::from_secs).to_vec() }
    }
}

impl RetryPolicy {
    /// Same attempt count as the default with no waiting; for tests.
    pub fn immediate() -> Self {
        Self { delays: vec![Duration::ZERO; 3] }
    }

    pub fn attempts(&self) -> usize {
        self.delays.len() + 1
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delays = self.delays.iter();
        loop {
            match op() {
                Err(e) if e.is_retryable() => match delays.next() {
                    Some(delay) => {
                        tracing::debug!(error = %e, ?delay, "retrying provider call");
                        std::thread::sleep(*delay);
                    }
                    None => return Err(e),
                },
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight provider requests.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self { available: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.freed.wait(available).unwrap();
        }
        *available -= 1;
        Permit { limiter: self }
    }
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().unwrap() += 1;
        self.limiter.freed.notify_one();
    }
}

/// Maps a ureq failure onto the provider error taxonomy: throttling, server
/// faults and connection problems are retryable, other statuses are not.
pub(crate) fn classify(err: ureq::Error) -> Error {
    match err {
        ureq::Error::Status(408, _) => Error::ProviderTimeout,
        ureq::Error::Status(code, _) if code == 429 || code >= 500 => {
            Error::ProviderUnavailable(format!("status {code}"))
        }
        ureq::Error::Status(code, _) => Error::ProviderBadResponse(format!("status {code}")),
        ureq::Error::Transport(t) => {
            let message = t.to_string();
            if message.contains("timed out") {
                Error::ProviderTimeout
            } else {
                Error::ProviderUnavailable(message)
            }
        }
    }
}

/// Reads a response body, failing once it passes `cap` bytes.
pub(crate) fn read_capped(response: ureq::Response, cap: u64) -> Result<String> {
    let mut body = Vec::new();
    response
        .into_reader()
        .take(cap + 1)
        .read_to_end(&mut body)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::TimedOut || e.kind() == std::io::ErrorKind::WouldBlock {
                Error::ProviderTimeout
            } else {
                Error::ProviderUnavailable(e.to_string())
            }
        })?;
    if body.len() as u64 > cap {
        return Err(Error::ProviderBadResponse(format!("response exceeds {cap} bytes")));
    }
    String::from_utf8(body).map_err(|_| Error::ProviderBadResponse("response is not UTF-8".into()))
}

/// Runs `f` over every item with at most `limit` in flight, returning results
/// in input order.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = limit.max(1).min(items.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every slot filled")).collect()
}
