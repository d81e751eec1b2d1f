use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

/// Token bucket shared by every caller of one backend instance.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<Bucket>,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    refilled: Instant,
}

impl RateLimiter {
    /// Allows `requests_per_minute` on average with bursts of up to one
    /// second's worth of requests (at least one).
    pub fn per_minute(requests_per_minute: u32) -> Self {
        let per_second = f64::from(requests_per_minute.max(1)) / 60.0;
        let capacity = per_second.max(1.0);
        RateLimiter {
            per_second,
            capacity,
            state: Mutex::new(Bucket { tokens: capacity, refilled: Instant::now() }),
        }
    }

    /// Blocks until a request slot is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut b = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let now = Instant::now();
                let elapsed = now.duration_since(b.refilled).as_secs_f64();
                b.tokens = (b.tokens + elapsed * self.per_second).min(self.capacity);
                b.refilled = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - b.tokens) / self.per_second)
            };
            thread::sleep(wait);
        }
    }
}
