//! DNS over HTTPS exchange (RFC 8484).

use std::error::Error as StdError;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use parking_lot::Mutex;
use thiserror::Error;
use url::Url;

use crate::config::{FailoverMode, HttpMethod, ResolverPool, RecursorSpec};
use crate::wire::{self, DnsMessage, WireError};

pub const DNS_MESSAGE: &str = "application/dns-message";
/// Attempts per recursor, i.e. one try plus two retries.
pub const MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_PROBE_NAME: &str = "example.com";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DohRequest {
    pub method: HttpMethod,
    pub url: Url,
    pub headers: Vec<(&'static str, &'static str)>,
    pub body: Option<Vec<u8>>,
}

#[derive(Debug, Error)]
pub enum RequestError {
    #[error("recursor url already carries a dns parameter")]
    DnsParamPresent,
    #[error("invalid recursor url: {0}")]
    BadUrl(#[from] url::ParseError),
    #[error("query is not a DNS message")]
    ShortQuery,
}

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("deadline exceeded")]
    Timeout,
    #[error("TLS failure: {0}")]
    Tls(String),
    #[error("connection failure: {0}")]
    Connect(String),
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("unexpected content-type {0:?}")]
    ContentType(String),
    #[error("undecodable response: {0}")]
    Decode(#[from] WireError),
    #[error(transparent)]
    Request(#[from] RequestError),
}

impl ExchangeError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, ExchangeError::Timeout)
    }
}

/// Builds the HTTP request for one wire-format query. GET requests carry the
/// query in a `dns` parameter with the message id forced to zero.
pub fn build_doh_request(query: &[u8], recursor: &RecursorSpec) -> Result<DohRequest, RequestError> {
    if query.len() < wire::HEADER_LEN {
        return Err(RequestError::ShortQuery);
    }
    let mut url = Url::parse(&recursor.url)?;
    if url.query_pairs().any(|(k, _)| k == "dns") {
        return Err(RequestError::DnsParamPresent);
    }
    match recursor.method {
        HttpMethod::Post => Ok(DohRequest {
            method: HttpMethod::Post,
            url,
            headers: vec![("content-type", DNS_MESSAGE), ("accept", DNS_MESSAGE)],
            body: Some(query.to_vec()),
        }),
        HttpMethod::Get => {
            let mut zeroed = query.to_vec();
            zeroed[0] = 0;
            zeroed[1] = 0;
            url.query_pairs_mut()
                .append_pair("dns", &URL_SAFE_NO_PAD.encode(&zeroed));
            Ok(DohRequest {
                method: HttpMethod::Get,
                url,
                headers: vec![("accept", DNS_MESSAGE)],
                body: None,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpstreamResult {
    pub recursor_index: usize,
    pub rtt_ms: f64,
    pub message: DnsMessage,
    pub http_status: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthStatus {
    pub recursor_index: usize,
    pub reachable: bool,
    pub last_probe_rtt_ms: Option<f64>,
    pub consecutive_failures: u32,
}

impl HealthStatus {
    fn new(recursor_index: usize) -> Self {
        HealthStatus {
            recursor_index,
            reachable: true,
            last_probe_rtt_ms: None,
            consecutive_failures: 0,
        }
    }
}

/// Shared HTTPS client. Certificate validation is always on; extra roots
/// can be added for private deployments.
#[derive(Debug, Clone)]
pub struct DohClient {
    http: reqwest::Client,
}

impl DohClient {
    pub fn new(extra_roots_der: &[Vec<u8>]) -> Result<Self, ExchangeError> {
        let mut roots = Vec::new();
        for der in extra_roots_der {
            roots.push(
                reqwest::Certificate::from_der(der).map_err(|e| ExchangeError::Tls(e.to_string()))?,
            );
        }
        let http = reqwest::Client::builder()
            .https_only(true)
            .tls_certs_merge(roots)
            .pool_idle_timeout(Duration::from_secs(90))
            .connect_timeout(Duration::from_secs(10))
            .user_agent(concat!("kresolver/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| ExchangeError::Connect(e.to_string()))?;
        Ok(DohClient { http })
    }

    /// One attempt, bounded by `deadline`.
    async fn attempt(
        &self,
        request: &DohRequest,
        deadline: Duration,
    ) -> Result<(DnsMessage, u16, f64), ExchangeError> {
        let mut builder = match request.method {
            HttpMethod::Get => self.http.get(request.url.clone()),
            HttpMethod::Post => self.http.post(request.url.clone()),
        };
        for (name, value) in &request.headers {
            builder = builder.header(*name, *value);
        }
        if let Some(body) = &request.body {
            builder = builder.body(body.clone());
        }
        let started = Instant::now();
        let fut = async {
            let response = builder.send().await.map_err(classify_reqwest)?;
            let status = response.status().as_u16();
            let content_type = response
                .headers()
                .get(reqwest::header::CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .unwrap_or("")
                .to_string();
            let body = response.bytes().await.map_err(classify_reqwest)?;
            Ok::<_, ExchangeError>((status, content_type, body))
        };
        let (status, content_type, body) = tokio::time::timeout(deadline, fut)
            .await
            .map_err(|_| ExchangeError::Timeout)??;
        let rtt_ms = started.elapsed().as_secs_f64() * 1000.0;
        if status != 200 {
            return Err(ExchangeError::HttpStatus(status));
        }
        let media = content_type.split(';').next().unwrap_or("").trim();
        if !media.eq_ignore_ascii_case(DNS_MESSAGE) {
            return Err(ExchangeError::ContentType(content_type));
        }
        let message = wire::decode_message(&body)?;
        Ok((message, status, rtt_ms))
    }

    /// Sends `request` to a single recursor, retrying up to
    /// [`MAX_ATTEMPTS`] times in total within `deadline`. Never contacts any
    /// other recursor.
    pub async fn exchange(
        &self,
        recursor_index: usize,
        request: &DohRequest,
        deadline: Duration,
    ) -> Result<UpstreamResult, ExchangeError> {
        let start = Instant::now();
        let mut last_err = ExchangeError::Timeout;
        for _ in 0..MAX_ATTEMPTS {
            let Some(remaining) = deadline.checked_sub(start.elapsed()).filter(|d| !d.is_zero()) else {
                return Err(ExchangeError::Timeout);
            };
            match self.attempt(request, remaining).await {
                Ok((message, http_status, rtt_ms)) => {
                    return Ok(UpstreamResult {
                        recursor_index,
                        rtt_ms,
                        message,
                        http_status,
                    })
                }
                Err(ExchangeError::Timeout) => return Err(ExchangeError::Timeout),
                Err(e) => {
                    tracing::debug!(recursor_index, error = %e, "upstream attempt failed");
                    last_err = e;
                }
            }
        }
        Err(last_err)
    }
}

fn classify_reqwest(err: reqwest::Error) -> ExchangeError {
    if err.is_timeout() {
        return ExchangeError::Timeout;
    }
    if chain_has_tls_error(&err) {
        return ExchangeError::Tls(chain_to_string(&err));
    }
    ExchangeError::Connect(chain_to_string(&err))
}

/// Looks for a rustls error anywhere in the chain. Boxed errors and
/// `io::Error` report their inner error's source rather than the inner error
/// itself, so both are unwrapped explicitly.
fn chain_has_tls_error(e: &(dyn StdError + 'static)) -> bool {
    if e.downcast_ref::<tokio_rustls::rustls::Error>().is_some() {
        return true;
    }
    if let Some(inner) = e.downcast_ref::<std::io::Error>().and_then(|io| io.get_ref()) {
        if chain_has_tls_error(inner) {
            return true;
        }
    }
    e.source().is_some_and(chain_has_tls_error)
}

fn chain_to_string(err: &dyn StdError) -> String {
    let mut out = err.to_string();
    let mut source = err.source();
    while let Some(e) = source {
        out.push_str(": ");
        out.push_str(&e.to_string());
        source = e.source();
    }
    out
}

/// Outcome of resolving through the pool, including any failover.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub result: UpstreamResult,
    /// Set when relaxed failover answered from a recursor other than the
    /// assigned one; holds the assigned index.
    pub failover_from: Option<usize>,
}

/// The pool plus per-recursor health state.
#[derive(Debug)]
pub struct Upstreams {
    pool: ResolverPool,
    client: DohClient,
    health: Vec<Mutex<HealthStatus>>,
    probe_name: String,
}

impl Upstreams {
    pub fn new(pool: ResolverPool, client: DohClient) -> Self {
        let health = (0..pool.k()).map(|i| Mutex::new(HealthStatus::new(i))).collect();
        Upstreams {
            pool,
            client,
            health,
            probe_name: DEFAULT_PROBE_NAME.to_string(),
        }
    }

    pub fn with_probe_name(mut self, name: &str) -> Self {
        self.probe_name = name.to_string();
        self
    }

    pub fn pool(&self) -> &ResolverPool {
        &self.pool
    }

    pub fn health(&self, index: usize) -> HealthStatus {
        self.health[index].lock().clone()
    }

    /// Resolves `query` via the recursor at `index`. In relaxed mode a failure
    /// is retried once against `index + 1 mod K`.
    pub async fn resolve(
        &self,
        index: usize,
        query: &[u8],
        mode: FailoverMode,
        deadline: Duration,
    ) -> Result<Resolution, ExchangeError> {
        let start = Instant::now();
        let first = self.exchange_with(index, query, deadline).await;
        match (first, mode) {
            (Ok(result), _) => Ok(Resolution {
                result,
                failover_from: None,
            }),
            (Err(e), FailoverMode::Strict) => Err(e),
            (Err(e), FailoverMode::Relaxed) => {
                let next = (index + 1) % self.pool.k();
                let remaining = deadline.saturating_sub(start.elapsed());
                if next == index || remaining.is_zero() {
                    return Err(e);
                }
                tracing::warn!(from = index, to = next, error = %e, "relaxed failover");
                let result = self.exchange_with(next, query, remaining).await?;
                Ok(Resolution {
                    result,
                    failover_from: Some(index),
                })
            }
        }
    }

    async fn exchange_with(
        &self,
        index: usize,
        query: &[u8],
        deadline: Duration,
    ) -> Result<UpstreamResult, ExchangeError> {
        let recursor = self.pool.get(index).expect("index within pool");
        let request = build_doh_request(query, recursor)?;
        self.client.exchange(index, &request, deadline).await
    }

    /// Sends the probe query to one recursor and records the outcome.
    pub async fn probe_health(&self, index: usize, deadline: Duration) -> HealthStatus {
        let query = wire::encode_query(&self.probe_name, wire::TYPE_A, 0, true)
            .expect("probe name is a valid DNS name");
        let outcome = self.exchange_with(index, &query, deadline).await;
        let mut status = self.health[index].lock();
        match outcome {
            Ok(result) => {
                status.reachable = true;
                status.consecutive_failures = 0;
                status.last_probe_rtt_ms = Some(result.rtt_ms);
            }
            Err(e) => {
                tracing::debug!(index, error = %e, "health probe failed");
                status.reachable = false;
                status.consecutive_failures += 1;
                status.last_probe_rtt_ms = None;
            }
        }
        status.clone()
    }
}
