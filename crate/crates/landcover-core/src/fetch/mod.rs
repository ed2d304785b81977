//! Turning property-address records into cached 640x640 satellite tiles:
//! CSV record loading, the tile-service seam (real HTTP client and a
//! deterministic stub), and the rate-limited, resumable fetch campaign
//! whose every outcome lands in a ledger.

mod campaign;
mod service;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use campaign::{run_fetch_campaign, Fetcher, RateLimiter, RetryPolicy};
pub use service::{HttpTileService, ServiceError, StubTileService, TileService};

/// Expected tile side in pixels.
pub const TILE_SIZE: u32 = 640;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("address csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("address csv is missing mapped column {0:?}")]
    MissingColumn(String),
    #[error("duplicate record id {0:?} in address csv")]
    DuplicateRecord(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("ledger file {path}: {message}")]
    Ledger { path: PathBuf, message: String },
}

/// One address row from the property export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub record_id: String,
    pub address_line: String,
    pub city: String,
    pub state: String,
    pub postal_code: String,
}

impl PropertyRecord {
    /// A record without an address line can never be geocoded; it is kept
    /// in the campaign but fails immediately as a bad address.
    pub fn is_fetchable(&self) -> bool {
        !self.address_line.trim().is_empty()
    }

    /// The query string sent to the map service.
    pub fn address_query(&self) -> String {
        let mut parts = vec![self.address_line.trim().to_owned()];
        if !self.city.trim().is_empty() {
            parts.push(self.city.trim().to_owned());
        }
        let state_zip = format!("{} {}", self.state.trim(), self.postal_code.trim());
        let state_zip = state_zip.trim().to_owned();
        if !state_zip.is_empty() {
            parts.push(state_zip);
        }
        parts.join(", ")
    }
}

/// Maps the caller's CSV column names onto record fields; the export's
/// column names vary by vintage, so nothing is hardcoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub record_id: String,
    pub address_line: String,
    pub city: Option<String>,
    pub state: Option<String>,
    pub postal_code: Option<String>,
}

/// Reads one record per data row. Rows with an empty mapped address line
/// are kept (they surface later as bad-address failures).
pub fn load_property_records(
    csv_path: &Path,
    columns: &ColumnMap,
) -> Result<Vec<PropertyRecord>, FetchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|source| FetchError::Csv {
            path: csv_path.to_path_buf(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| FetchError::Csv {
            path: csv_path.to_path_buf(),
            source,
        })?
        .clone();
    let find = |name: &str| -> Result<usize, FetchError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FetchError::MissingColumn(name.to_owned()))
    };
    let id_col = find(&columns.record_id)?;
    let addr_col = find(&columns.address_line)?;
    let city_col = columns.city.as_deref().map(find).transpose()?;
    let state_col = columns.state.as_deref().map(find).transpose()?;
    let postal_col = columns.postal_code.as_deref().map(find).transpose()?;

    let cell = |record: &csv::StringRecord, col: Option<usize>| -> String {
        col.and_then(|c| record.get(c))
            .unwrap_or_default()
            .trim()
            .to_owned()
    };

    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|source| FetchError::Csv {
            path: csv_path.to_path_buf(),
            source,
        })?;
        let record_id = cell(&row, Some(id_col));
        if !seen.insert(record_id.clone()) {
            return Err(FetchError::DuplicateRecord(record_id));
        }
        out.push(PropertyRecord {
            record_id,
            address_line: cell(&row, Some(addr_col)),
            city: cell(&row, city_col),
            state: cell(&row, state_col),
            postal_code: cell(&row, postal_col),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Retrieved,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    BadAddress,
    HttpError,
    DecodeError,
    RateLimitedExhausted,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::BadAddress => "bad_address",
            FailureReason::HttpError => "http_error",
            FailureReason::DecodeError => "decode_error",
            FailureReason::RateLimitedExhausted => "rate_limited_exhausted",
        }
    }
}

/// Outcome for a single record: either a cached, decodable tile or a
/// failure with its reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchResult {
    pub record_id: String,
    pub status: FetchStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_reason: Option<FailureReason>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tile_path: Option<PathBuf>,
}

impl FetchResult {
    pub fn retrieved(record_id: &str, tile_path: PathBuf) -> Self {
        Self {
            record_id: record_id.to_owned(),
            status: FetchStatus::Retrieved,
            failure_reason: None,
            tile_path: Some(tile_path),
        }
    }

    pub fn failed(record_id: &str, reason: FailureReason) -> Self {
        Self {
            record_id: record_id.to_owned(),
            status: FetchStatus::Failed,
            failure_reason: Some(reason),
            tile_path: None,
        }
    }
}

/// Service parameters frozen into the ledger so a report can state exactly
/// how its tiles were captured. The API key itself never appears here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub service: String,
    pub zoom: u32,
    pub tile_size: u32,
    pub maptype: String,
    pub parallelism: usize,
    pub rate_limit_per_sec: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            service: "stub".to_owned(),
            zoom: 18,
            tile_size: TILE_SIZE,
            maptype: "satellite".to_owned(),
            parallelism: 4,
            rate_limit_per_sec: 10.0,
        }
    }
}

/// Every record's outcome plus the campaign configuration snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchLedger {
    pub campaign_config: CampaignConfig,
    pub results: Vec<FetchResult>,
}

impl FetchLedger {
    pub fn save(&self, path: &Path) -> Result<(), FetchError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| FetchError::Ledger {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, json).map_err(|source| FetchError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FetchError> {
        let text = std::fs::read_to_string(path).map_err(|source| FetchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| FetchError::Ledger {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn retrieved(&self) -> impl Iterator<Item = &FetchResult> {
        self.results
            .iter()
            .filter(|r| r.status == FetchStatus::Retrieved)
    }
}

/// Totals over a ledger, consistent by construction with its invariant
/// retrieved + failed = total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub total: usize,
    pub retrieved: usize,
    pub failed: usize,
    pub by_reason: BTreeMap<String, usize>,
}

pub fn ledger_summary(ledger: &FetchLedger) -> LedgerSummary {
    let mut summary = LedgerSummary {
        total: ledger.results.len(),
        retrieved: 0,
        failed: 0,
        by_reason: BTreeMap::new(),
    };
    for result in &ledger.results {
        match result.status {
            FetchStatus::Retrieved => summary.retrieved += 1,
            FetchStatus::Failed => {
                summary.failed += 1;
                if let Some(reason) = result.failure_reason {
                    *summary
                        .by_reason
                        .entry(reason.as_str().to_owned())
                        .or_insert(0) += 1;
                }
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn columns() -> ColumnMap {
        ColumnMap {
            record_id: "id".into(),
            address_line: "address".into(),
            city: Some("city".into()),
            state: Some("state".into()),
            postal_code: Some("zip".into()),
        }
    }

    #[test]
    fn loads_records_through_column_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("addr.csv");
        std::fs::write(
            &path,
            "id,address,city,state,zip\n\
             r1,12 Oak St,Springfield,IL,62701\n\
             r2,9 Pine Rd,Dover,DE,19901\n\
             r3,101 Elm Ave,Austin,TX,73301\n",
        )
        .unwrap();
        let records = load_property_records(&path, &columns()).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].record_id, "r1");
        assert_eq!(records[0].address_query(), "12 Oak St, Springfield, IL 62701");
        assert!(records.iter().all(PropertyRecord::is_fetchable));
    }

    #[test]
    fn empty_address_is_kept_but_unfetchable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("addr.csv");
        std::fs::write(&path, "id,address\nr1,12 Oak St\nr2,\n").unwrap();
        let map = ColumnMap {
            record_id: "id".into(),
            address_line: "address".into(),
            city: None,
            state: None,
            postal_code: None,
        };
        let records = load_property_records(&path, &map).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].is_fetchable());
        assert!(!records[1].is_fetchable());
    }

    #[test]
    fn missing_mapped_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("addr.csv");
        std::fs::write(&path, "id,street\nr1,12 Oak St\n").unwrap();
        let err = load_property_records(&path, &columns()).unwrap_err();
        assert!(matches!(err, FetchError::MissingColumn(col) if col == "address"));
    }

    #[test]
    fn summary_of_empty_ledger_is_all_zero() {
        let ledger = FetchLedger {
            campaign_config: CampaignConfig::default(),
            results: vec![],
        };
        let s = ledger_summary(&ledger);
        assert_eq!((s.total, s.retrieved, s.failed), (0, 0, 0));
        assert!(s.by_reason.is_empty());
    }

    #[test]
    fn summary_counts_reasons() {
        let ledger = FetchLedger {
            campaign_config: CampaignConfig::default(),
            results: vec![
                FetchResult::retrieved("a", "a.png".into()),
                FetchResult::retrieved("b", "b.png".into()),
                FetchResult::retrieved("c", "c.png".into()),
                FetchResult::failed("d", FailureReason::BadAddress),
                FetchResult::failed("e", FailureReason::HttpError),
            ],
        };
        let s = ledger_summary(&ledger);
        assert_eq!((s.total, s.retrieved, s.failed), (5, 3, 2));
        assert_eq!(s.by_reason["bad_address"], 1);
        assert_eq!(s.by_reason["http_error"], 1);
    }

    #[test]
    fn summary_matches_recount_oracle_on_fuzzed_ledger() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let reasons = [
            FailureReason::BadAddress,
            FailureReason::HttpError,
            FailureReason::DecodeError,
            FailureReason::RateLimitedExhausted,
        ];
        let results: Vec<FetchResult> = (0..500)
            .map(|i| {
                if rng.random_bool(0.8) {
                    FetchResult::retrieved(&format!("r{i}"), format!("r{i}.png").into())
                } else {
                    FetchResult::failed(&format!("r{i}"), reasons[rng.random_range(0..4)])
                }
            })
            .collect();
        let ledger = FetchLedger {
            campaign_config: CampaignConfig::default(),
            results,
        };
        let s = ledger_summary(&ledger);
        let retrieved_oracle = ledger
            .results
            .iter()
            .filter(|r| r.status == FetchStatus::Retrieved)
            .count();
        assert_eq!(s.retrieved, retrieved_oracle);
        assert_eq!(s.failed, 500 - retrieved_oracle);
        assert_eq!(s.retrieved + s.failed, s.total);
        for reason in reasons {
            let oracle = ledger
                .results
                .iter()
                .filter(|r| r.failure_reason == Some(reason))
                .count();
            assert_eq!(s.by_reason.get(reason.as_str()).copied().unwrap_or(0), oracle);
        }
    }

    #[test]
    fn ledger_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.json");
        let ledger = FetchLedger {
            campaign_config: CampaignConfig::default(),
            results: vec![
                FetchResult::retrieved("a", "tiles/a.png".into()),
                FetchResult::failed("b", FailureReason::DecodeError),
            ],
        };
        ledger.save(&path).unwrap();
        assert_eq!(FetchLedger::load(&path).unwrap(), ledger);
    }
}
