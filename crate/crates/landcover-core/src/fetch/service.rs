//! The tile-service seam. Campaigns talk to a [`TileService`]; production
//! uses the HTTP static-map client, tests and the toy pipeline use the
//! deterministic stub.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{PropertyRecord, TILE_SIZE};

/// Errors a service can report for one request. The campaign maps them to
/// ledger failure reasons; `BadAddress` is terminal, the others retryable.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("service rejected the address: {0}")]
    BadAddress(String),
    #[error("transient service error: {0}")]
    Transient(String),
    #[error("service rate limit hit")]
    RateLimited,
}

pub trait TileService: Send + Sync {
    /// Fetches the raw tile image bytes for one record.
    fn fetch(&self, record: &PropertyRecord) -> Result<Vec<u8>, ServiceError>;

    /// Short name recorded in the campaign config.
    fn name(&self) -> &'static str;
}

// ── HTTP static-map client ───────────────────────────────────────────────────

/// Client for a static-map HTTP service. One GET per tile with
/// center/zoom/size/maptype/key query parameters; the key comes from the
/// environment and is never logged or serialized.
pub struct HttpTileService {
    base_url: String,
    api_key: String,
    zoom: u32,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpTileService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTileService")
            .field("base_url", &self.base_url)
            .field("zoom", &self.zoom)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

impl HttpTileService {
    pub fn new(base_url: &str, api_key: &str, zoom: u32) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("reqwest client");
        Self {
            base_url: base_url.to_owned(),
            api_key: api_key.to_owned(),
            zoom,
            client,
        }
    }

    /// Reads the API key from the named environment variable.
    pub fn from_env(base_url: &str, key_env: &str, zoom: u32) -> Result<Self, ServiceError> {
        let api_key = std::env::var(key_env).map_err(|_| {
            ServiceError::BadAddress(format!("environment variable {key_env} is not set"))
        })?;
        Ok(Self::new(base_url, &api_key, zoom))
    }
}

impl TileService for HttpTileService {
    fn fetch(&self, record: &PropertyRecord) -> Result<Vec<u8>, ServiceError> {
        let response = self
            .client
            .get(&self.base_url)
            .query(&[
                ("center", record.address_query()),
                ("zoom", self.zoom.to_string()),
                ("size", format!("{TILE_SIZE}x{TILE_SIZE}")),
                ("maptype", "satellite".to_owned()),
                ("key", self.api_key.clone()),
            ])
            .send()
            .map_err(|e| ServiceError::Transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(ServiceError::RateLimited);
        }
        if status.is_client_error() {
            return Err(ServiceError::BadAddress(format!("http {status}")));
        }
        if !status.is_success() {
            return Err(ServiceError::Transient(format!("http {status}")));
        }
        response
            .bytes()
            .map(|b| b.to_vec())
            .map_err(|e| ServiceError::Transient(e.to_string()))
    }

    fn name(&self) -> &'static str {
        "static_map_http"
    }
}

// ── deterministic stub ───────────────────────────────────────────────────────

/// In-process stand-in for the map service. Addresses containing the fail
/// marker are rejected as bad addresses; everything else gets a synthetic
/// tile derived deterministically from the record id. Every call is
/// instrumented with a timestamp so tests can audit request pacing.
pub struct StubTileService {
    fail_marker: String,
    tile_size: u32,
    calls: AtomicUsize,
    timestamps: Mutex<Vec<Instant>>,
}

impl Default for StubTileService {
    fn default() -> Self {
        Self::new("INVALID")
    }
}

impl StubTileService {
    pub fn new(fail_marker: &str) -> Self {
        Self {
            fail_marker: fail_marker.to_owned(),
            tile_size: TILE_SIZE,
            calls: AtomicUsize::new(0),
            timestamps: Mutex::new(Vec::new()),
        }
    }

    /// Stub emitting tiles of a non-standard size (for decode-error paths).
    pub fn with_tile_size(fail_marker: &str, tile_size: u32) -> Self {
        Self {
            tile_size,
            ..Self::new(fail_marker)
        }
    }

    /// Number of service calls made so far (cache hits never reach here).
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn call_timestamps(&self) -> Vec<Instant> {
        self.timestamps.lock().expect("stub lock").clone()
    }

    /// Largest number of calls falling inside any sliding window of the
    /// given width.
    pub fn max_calls_in_window(&self, window: Duration) -> usize {
        let stamps = self.call_timestamps();
        let mut max = 0;
        for (i, &start) in stamps.iter().enumerate() {
            let end = start + window;
            let count = stamps[i..].iter().take_while(|&&t| t < end).count();
            max = max.max(count);
        }
        max
    }
}

impl TileService for StubTileService {
    fn fetch(&self, record: &PropertyRecord) -> Result<Vec<u8>, ServiceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.timestamps
            .lock()
            .expect("stub lock")
            .push(Instant::now());
        if record.address_line.contains(&self.fail_marker) {
            return Err(ServiceError::BadAddress(format!(
                "unknown address {:?}",
                record.address_line
            )));
        }
        let tile = crate::synthetic::generate_tile(&record.record_id, self.tile_size);
        let mut bytes = Vec::new();
        tile.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .expect("png encode");
        Ok(bytes)
    }

    fn name(&self) -> &'static str {
        "stub"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, address: &str) -> PropertyRecord {
        PropertyRecord {
            record_id: id.to_owned(),
            address_line: address.to_owned(),
            city: "Town".into(),
            state: "ST".into(),
            postal_code: "00000".into(),
        }
    }

    #[test]
    fn stub_returns_decodable_full_size_tiles() {
        let stub = StubTileService::default();
        let bytes = stub.fetch(&record("r1", "12 Oak St")).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (TILE_SIZE, TILE_SIZE));
        assert_eq!(stub.call_count(), 1);
    }

    #[test]
    fn stub_tiles_are_deterministic_per_record() {
        let stub = StubTileService::default();
        let a = stub.fetch(&record("r7", "1 A St")).unwrap();
        let b = stub.fetch(&record("r7", "1 A St")).unwrap();
        let c = stub.fetch(&record("r8", "1 A St")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stub_rejects_marked_addresses() {
        let stub = StubTileService::default();
        let err = stub.fetch(&record("r2", "INVALID 99")).unwrap_err();
        assert!(matches!(err, ServiceError::BadAddress(_)));
    }

    // A minimal single-threaded HTTP server good for a handful of requests.
    fn serve_responses(responses: Vec<(u16, Vec<u8>)>) -> (std::net::SocketAddr, std::thread::JoinHandle<()>) {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let reason = match status {
                    200 => "OK",
                    400 => "Bad Request",
                    429 => "Too Many Requests",
                    _ => "Internal Server Error",
                };
                let header = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                stream.write_all(header.as_bytes()).unwrap();
                stream.write_all(&body).unwrap();
            }
        });
        (addr, handle)
    }

    #[test]
    fn http_client_fetches_bytes_and_maps_statuses() {
        let png = {
            let img = image::RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3]));
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .unwrap();
            bytes
        };
        let (addr, handle) = serve_responses(vec![
            (200, png.clone()),
            (400, b"bad".to_vec()),
            (429, b"slow down".to_vec()),
            (500, b"boom".to_vec()),
        ]);
        let service = HttpTileService::new(&format!("http://{addr}/map"), "test-key", 18);
        let rec = record("r1", "12 Oak St");

        assert_eq!(service.fetch(&rec).unwrap(), png);
        assert!(matches!(service.fetch(&rec), Err(ServiceError::BadAddress(_))));
        assert!(matches!(service.fetch(&rec), Err(ServiceError::RateLimited)));
        assert!(matches!(service.fetch(&rec), Err(ServiceError::Transient(_))));
        handle.join().unwrap();
    }

    #[test]
    fn debug_output_redacts_the_key() {
        let service = HttpTileService::new("http://example.invalid", "secret-key", 18);
        let debug = format!("{service:?}");
        assert!(!debug.contains("secret-key"));
        assert!(debug.contains("<redacted>"));
    }
}
