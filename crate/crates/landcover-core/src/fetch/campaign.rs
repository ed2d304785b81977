//! The campaign runner: cache-first single-tile fetches with retry, a
//! strict request pacer, and a bounded worker pool that turns a record list
//! into a complete ledger.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::service::{ServiceError, TileService};
use super::{
    CampaignConfig, FailureReason, FetchError, FetchLedger, FetchResult, PropertyRecord,
};

/// Retry policy for retryable service errors. Bad addresses are terminal on
/// the first response; transient and rate-limit errors back off
/// exponentially from `base_delay`.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Zero-delay variant for tests and stub campaigns.
    pub fn immediate() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::ZERO,
        }
    }
}

/// Paces requests so consecutive permits are at least 1/rate apart, which
/// bounds any sliding one-second window at rate + 1 requests.
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64) -> Self {
        assert!(rate_per_sec > 0.0, "rate must be positive");
        Self {
            interval: Duration::from_secs_f64(1.0 / rate_per_sec),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    /// Blocks until a request slot is available.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next_slot.lock().expect("limiter lock");
            let now = Instant::now();
            let wait = next.saturating_duration_since(now);
            *next = (*next).max(now) + self.interval;
            wait
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Cache-first tile fetcher for a single service and cache directory.
pub struct Fetcher<'a> {
    service: &'a dyn TileService,
    cache_dir: PathBuf,
    retry: RetryPolicy,
}

impl<'a> Fetcher<'a> {
    pub fn new(service: &'a dyn TileService, cache_dir: &Path, retry: RetryPolicy) -> Self {
        Self {
            service,
            cache_dir: cache_dir.to_path_buf(),
            retry,
        }
    }

    pub fn cache_path(&self, record_id: &str) -> PathBuf {
        // Record ids come from external CSVs; keep the file name tame.
        let safe: String = record_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.cache_dir.join(format!("{safe}.png"))
    }

    /// Fetches one tile, never propagating errors past the result: every
    /// outcome is a [`FetchResult`]. A cached decodable tile short-circuits
    /// the service entirely.
    pub fn fetch_tile(&self, record: &PropertyRecord) -> FetchResult {
        self.fetch_tile_paced(record, None)
    }

    fn fetch_tile_paced(&self, record: &PropertyRecord, limiter: Option<&RateLimiter>) -> FetchResult {
        let path = self.cache_path(&record.record_id);
        if path.is_file() && decodes_as_tile(&path) {
            return FetchResult::retrieved(&record.record_id, path);
        }
        if !record.is_fetchable() {
            return FetchResult::failed(&record.record_id, FailureReason::BadAddress);
        }

        let mut last_reason = FailureReason::HttpError;
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            if let Some(limiter) = limiter {
                limiter.acquire();
            }
            match self.service.fetch(record) {
                Ok(bytes) => {
                    return match validate_and_store(&bytes, &path) {
                        Ok(()) => FetchResult::retrieved(&record.record_id, path),
                        Err(()) => FetchResult::failed(&record.record_id, FailureReason::DecodeError),
                    };
                }
                Err(ServiceError::BadAddress(_)) => {
                    return FetchResult::failed(&record.record_id, FailureReason::BadAddress);
                }
                Err(ServiceError::Transient(_)) => last_reason = FailureReason::HttpError,
                Err(ServiceError::RateLimited) => last_reason = FailureReason::RateLimitedExhausted,
            }
        }
        FetchResult::failed(&record.record_id, last_reason)
    }
}

fn decodes_as_tile(path: &Path) -> bool {
    match image::open(path) {
        Ok(img) => {
            let rgb = img.to_rgb8();
            rgb.dimensions() == (super::TILE_SIZE, super::TILE_SIZE)
        }
        Err(_) => false,
    }
}

fn validate_and_store(bytes: &[u8], path: &Path) -> Result<(), ()> {
    let img = image::load_from_memory(bytes).map_err(|_| ())?.to_rgb8();
    if img.dimensions() != (super::TILE_SIZE, super::TILE_SIZE) {
        return Err(());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|_| ())?;
    }
    std::fs::write(path, bytes).map_err(|_| ())?;
    Ok(())
}

/// Runs the whole campaign: a bounded worker pool pulls records off a
/// shared queue, pacing every service call through one rate limiter.
/// Individual failures never abort the run; the ledger covers every record
/// exactly once, in input order.
pub fn run_fetch_campaign(
    records: &[PropertyRecord],
    service: &dyn TileService,
    cache_dir: &Path,
    retry: RetryPolicy,
    parallelism: usize,
    rate_limit_per_sec: f64,
) -> Result<FetchLedger, FetchError> {
    if parallelism == 0 {
        return Err(FetchError::InvalidArgument(
            "parallelism must be at least 1".into(),
        ));
    }
    if rate_limit_per_sec <= 0.0 {
        return Err(FetchError::InvalidArgument(
            "rate limit must be positive".into(),
        ));
    }
    std::fs::create_dir_all(cache_dir).map_err(|source| FetchError::Io {
        path: cache_dir.to_path_buf(),
        source,
    })?;

    let fetcher = Fetcher::new(service, cache_dir, retry);
    let limiter = RateLimiter::new(rate_limit_per_sec);
    let next_index = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Mutex<Option<FetchResult>>> =
        records.iter().map(|_| Mutex::new(None)).collect();

    let workers = parallelism.min(records.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next_index.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                let result = fetcher.fetch_tile_paced(&records[i], Some(&limiter));
                *results[i].lock().expect("result slot") = Some(result);
            });
        }
    });

    let results: Vec<FetchResult> = results
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
        .collect();
    debug_assert_eq!(results.len(), records.len());

    Ok(FetchLedger {
        campaign_config: CampaignConfig {
            service: service.name().to_owned(),
            parallelism,
            rate_limit_per_sec,
            ..CampaignConfig::default()
        },
        results,
    })
}
