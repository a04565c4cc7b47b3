//! Resolution-time harness: replays page visits (a parent name followed by
//! its subresource names) against a resolver and summarizes the timings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, TcpStream, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicU16, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::assignment::{assign_recursor, RegistrableDomain};
use crate::config::Salt;
use crate::querylog::Outcome;
use crate::suffix::SuffixRules;
use crate::wire;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("endpoint {addr} unreachable: {source}")]
    Unreachable { addr: SocketAddr, source: io::Error },
    #[error("control channel: {0}")]
    Control(String),
    #[error("bad name {0:?}")]
    Name(String),
    #[error("visits line {line}: {message}")]
    Visits { line: usize, message: String },
    #[error("no records to summarize")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Milliseconds from an arbitrary origin.
pub trait Clock: Sync {
    fn now_ms(&self) -> f64;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1000.0
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(Mutex<f64>);

impl ManualClock {
    pub fn advance(&self, ms: f64) {
        *self.0.lock() += ms;
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> f64 {
        *self.0.lock()
    }
}

/// Something that resolves names for the harness.
pub trait Endpoint: Sync {
    /// Clears resolver-side caches before a repetition.
    fn clear_cache(&self) -> Result<(), BenchError> {
        Ok(())
    }

    /// Announces the page about to be loaded.
    fn begin_visit(&self, _parent: &RegistrableDomain) -> Result<(), BenchError> {
        Ok(())
    }

    /// Resolves one name. `Err` means the endpoint could not be reached at all;
    /// DNS-level failures and timeouts come back as an [`Outcome`].
    fn resolve(&self, qname: &str) -> Result<Outcome, BenchError>;

    /// Recursor that serves queries of the page `parent`, when known.
    fn recursor_for(&self, _parent: &RegistrableDomain) -> Option<usize> {
        None
    }
}

/// Derives recursor indices from the proxy's salt and pool size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecursorLocator {
    pub salt: Salt,
    pub k: usize,
}

impl RecursorLocator {
    pub fn locate(&self, parent: &RegistrableDomain) -> usize {
        assign_recursor(parent, &self.salt, self.k)
    }
}

/// A DNS server reached over UDP, optionally with the proxy's control socket
/// for page tagging and cache flushes.
#[derive(Debug)]
pub struct UdpEndpoint {
    dns: SocketAddr,
    control: Option<SocketAddr>,
    source: IpAddr,
    timeout: Duration,
    locator: Option<RecursorLocator>,
    next_id: AtomicU16,
}

impl UdpEndpoint {
    pub fn new(dns: SocketAddr) -> Self {
        let source = match dns.ip() {
            IpAddr::V4(ip) if ip.is_loopback() => IpAddr::V4(Ipv4Addr::LOCALHOST),
            IpAddr::V4(_) => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            IpAddr::V6(ip) if ip.is_loopback() => IpAddr::V6(Ipv6Addr::LOCALHOST),
            IpAddr::V6(_) => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
        };
        UdpEndpoint {
            dns,
            control: None,
            source,
            timeout: Duration::from_secs(5),
            locator: None,
            next_id: AtomicU16::new(1),
        }
    }

    pub fn with_control(mut self, control: SocketAddr) -> Self {
        self.control = Some(control);
        self
    }

    /// Local address queries are sent from; it is also the client id given
    /// to the control socket.
    pub fn with_source(mut self, source: IpAddr) -> Self {
        self.source = source;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_locator(mut self, locator: RecursorLocator) -> Self {
        self.locator = Some(locator);
        self
    }

    fn command(&self, line: &str) -> Result<(), BenchError> {
        let Some(control) = self.control else {
            return Ok(());
        };
        let mut stream = TcpStream::connect_timeout(&control, self.timeout).map_err(|source| {
            BenchError::Unreachable {
                addr: control,
                source,
            }
        })?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.write_all(format!("{line}\n").as_bytes())?;
        let mut reply = String::new();
        BufReader::new(&stream).read_line(&mut reply)?;
        match reply.trim_end() {
            "OK" => Ok(()),
            other => Err(BenchError::Control(format!("{line:?} -> {other:?}"))),
        }
    }
}

impl Endpoint for UdpEndpoint {
    fn clear_cache(&self) -> Result<(), BenchError> {
        if self.control.is_none() {
            tracing::warn!("no control address; resolver cache is not flushed between repetitions");
        }
        self.command("FLUSH")
    }

    fn begin_visit(&self, parent: &RegistrableDomain) -> Result<(), BenchError> {
        self.command(&format!("TAG {} {}", self.source, parent))
    }

    fn resolve(&self, qname: &str) -> Result<Outcome, BenchError> {
        let unreachable = |source| BenchError::Unreachable {
            addr: self.dns,
            source,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let query = wire::encode_query(qname, wire::TYPE_A, id, true)
            .map_err(|_| BenchError::Name(qname.to_string()))?;
        let socket = UdpSocket::bind(SocketAddr::new(self.source, 0))?;
        socket.connect(self.dns).map_err(unreachable)?;
        socket.send(&query).map_err(unreachable)?;
        let deadline = Instant::now() + self.timeout;
        let mut buf = [0u8; 4096];
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(Outcome::Timeout);
            }
            socket.set_read_timeout(Some(left))?;
            match socket.recv(&mut buf) {
                Ok(n) => {
                    let Ok(reply) = wire::decode_message(&buf[..n]) else {
                        continue;
                    };
                    if reply.header.id != id || !reply.header.qr {
                        continue;
                    }
                    return Ok(match reply.header.rcode {
                        wire::RCODE_NOERROR | wire::RCODE_NXDOMAIN => Outcome::Ok,
                        wire::RCODE_FORMERR => Outcome::Formerr,
                        wire::RCODE_NOTIMP => Outcome::Notimp,
                        _ => Outcome::Servfail,
                    });
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(Outcome::Timeout)
                }
                Err(e) => return Err(unreachable(e)),
            }
        }
    }

    fn recursor_for(&self, parent: &RegistrableDomain) -> Option<usize> {
        self.locator.map(|l| l.locate(parent))
    }
}

/// Offline endpoint: each recursor answers after a fixed latency on a
/// [`ManualClock`], so timings are exact.
#[derive(Debug)]
pub struct SimulatedEndpoint<'a> {
    clock: &'a ManualClock,
    latencies_ms: Vec<f64>,
    locator: RecursorLocator,
    current: Mutex<Option<RegistrableDomain>>,
}

impl<'a> SimulatedEndpoint<'a> {
    pub fn new(clock: &'a ManualClock, latencies_ms: Vec<f64>, salt: Salt) -> Self {
        let k = latencies_ms.len();
        SimulatedEndpoint {
            clock,
            latencies_ms,
            locator: RecursorLocator { salt, k },
            current: Mutex::new(None),
        }
    }
}

impl Endpoint for SimulatedEndpoint<'_> {
    fn begin_visit(&self, parent: &RegistrableDomain) -> Result<(), BenchError> {
        *self.current.lock() = Some(parent.clone());
        Ok(())
    }

    fn resolve(&self, qname: &str) -> Result<Outcome, BenchError> {
        let current = self.current.lock().clone();
        let domain = match current {
            Some(d) => d,
            None => RegistrableDomain::from_name(qname, SuffixRules::bundled())
                .map_err(|_| BenchError::Name(qname.to_string()))?,
        };
        self.clock.advance(self.latencies_ms[self.locator.locate(&domain)]);
        Ok(Outcome::Ok)
    }

    fn recursor_for(&self, parent: &RegistrableDomain) -> Option<usize> {
        Some(self.locator.locate(parent))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitQuery {
    pub qname: String,
    pub recursor_index: Option<usize>,
    pub rtt_ms: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageVisitRecord {
    pub parent: RegistrableDomain,
    pub repetition: usize,
    pub queries: Vec<VisitQuery>,
    /// Some query failed to get any answer.
    pub partial: bool,
}

impl PageVisitRecord {
    pub fn total_ms(&self) -> f64 {
        self.queries.iter().map(|q| q.rtt_ms).sum()
    }
}

/// A page: the name the user navigated to and the names it pulls in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub parent: String,
    pub subresources: Vec<String>,
}

/// One visit per line: `parent,sub1,sub2,...`. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_visits(text: &str) -> Result<Vec<Visit>, BenchError> {
    let mut visits = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut names = line.split(',').map(str::trim);
        let parent = names.next().unwrap_or_default().to_string();
        let subresources: Vec<String> = names.filter(|n| !n.is_empty()).map(String::from).collect();
        for name in std::iter::once(&parent).chain(&subresources) {
            if name.is_empty() || wire::name_to_labels(name).is_err() {
                return Err(BenchError::Visits {
                    line: i + 1,
                    message: format!("bad name {name:?}"),
                });
            }
        }
        visits.push(Visit { parent, subresources });
    }
    Ok(visits)
}

/// Loads `visit.parent` then each subresource through `endpoint`,
/// `repetitions` times with the resolver cache cleared before each one.
/// Queries are sequential unless `parallel` is set, in which case the
/// subresources go out concurrently after the parent.
pub fn run_visit(
    visit: &Visit,
    endpoint: &dyn Endpoint,
    clock: &dyn Clock,
    repetitions: usize,
    parallel: bool,
) -> Result<Vec<PageVisitRecord>, BenchError> {
    let parent = RegistrableDomain::from_name(&visit.parent, SuffixRules::bundled())
        .map_err(|_| BenchError::Name(visit.parent.clone()))?;
    let recursor_index = endpoint.recursor_for(&parent);
    let timed = |qname: &str| -> Result<VisitQuery, BenchError> {
        let start = clock.now_ms();
        let outcome = endpoint.resolve(qname)?;
        Ok(VisitQuery {
            qname: qname.to_string(),
            recursor_index,
            rtt_ms: (clock.now_ms() - start).max(0.0),
            outcome,
        })
    };

    let mut records = Vec::with_capacity(repetitions);
    for repetition in 0..repetitions {
        endpoint.clear_cache()?;
        endpoint.begin_visit(&parent)?;
        let first = match timed(&visit.parent) {
            Ok(q) => q,
            // nothing answered yet: the endpoint is down, not the visit
            Err(e) if records.is_empty() => return Err(e),
            Err(e) => {
                tracing::warn!(parent = %parent, error = %e, "visit failed");
                failed(&visit.parent, recursor_index)
            }
        };
        let mut queries = vec![first];
        let rest: Vec<Result<VisitQuery, BenchError>> = if parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = visit
                    .subresources
                    .iter()
                    .map(|name| s.spawn(|| timed(name)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("query thread panicked"))
                    .collect()
            })
        } else {
            visit.subresources.iter().map(|name| timed(name)).collect()
        };
        for (name, q) in visit.subresources.iter().zip(rest) {
            queries.push(q.unwrap_or_else(|e| {
                tracing::warn!(qname = %name, error = %e, "query failed");
                failed(name, recursor_index)
            }));
        }
        let partial = queries.iter().any(|q| q.outcome == Outcome::Timeout);
        records.push(PageVisitRecord {
            parent: parent.clone(),
            repetition,
            queries,
            partial,
        });
    }
    Ok(records)
}

fn failed(qname: &str, recursor_index: Option<usize>) -> VisitQuery {
    VisitQuery {
        qname: qname.to_string(),
        recursor_index,
        rtt_ms: 0.0,
        outcome: Outcome::Timeout,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursorStats {
    pub samples: Vec<f64>,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsSummary {
    /// Total resolution time per visit, ascending.
    pub visit_totals_ms: Vec<f64>,
    /// Every individual query time, ascending.
    pub query_rtts_ms: Vec<f64>,
    pub mean_query_ms: f64,
    /// Answered queries grouped by recursor, samples ascending.
    pub per_recursor: BTreeMap<usize, RecursorStats>,
}

/// Lower-middle median of a sorted, nonempty slice.
pub fn median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

pub fn summarize(records: &[PageVisitRecord]) -> Result<StatsSummary, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let visit_totals_ms = sorted(records.iter().map(PageVisitRecord::total_ms).collect());
    let query_rtts_ms = sorted(records.iter().flat_map(|r| r.queries.iter().map(|q| q.rtt_ms)).collect());
    if query_rtts_ms.is_empty() {
        return Err(BenchError::Empty);
    }
    let mean_query_ms = query_rtts_ms.iter().sum::<f64>() / query_rtts_ms.len() as f64;
    let mut grouped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for q in records.iter().flat_map(|r| &r.queries) {
        if let (Some(i), Outcome::Ok) = (q.recursor_index, q.outcome) {
            grouped.entry(i).or_default().push(q.rtt_ms);
        }
    }
    let per_recursor = grouped
        .into_iter()
        .map(|(i, samples)| {
            let samples = sorted(samples);
            let median_ms = median(&samples);
            (i, RecursorStats { samples, median_ms })
        })
        .collect();
    Ok(StatsSummary {
        visit_totals_ms,
        query_rtts_ms,
        mean_query_ms,
        per_recursor,
    })
}

/// Writes the empirical CDF of `values`: header `value_ms,cumulative_fraction`,
/// then the i-th smallest value with fraction i/N.
pub fn export_cdf(values: &[f64], path: &Path) -> Result<(), BenchError> {
    if values.is_empty() {
        return Err(BenchError::Empty);
    }
    let values = sorted(values.to_vec());
    let n = values.len() as f64;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "value_ms,cumulative_fraction")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{v},{:?}", (i + 1) as f64 / n)?;
    }
    out.flush()?;
    Ok(())
}

/// `parent,repetition,qname,recursor_index,rtt_ms,outcome,partial`
pub fn write_visits_csv(records: &[PageVisitRecord], path: &Path) -> Result<(), BenchError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "parent,repetition,qname,recursor_index,rtt_ms,outcome,partial")?;
    for r in records {
        for q in &r.queries {
            let index = q.recursor_index.map(|i| i.to_string()).unwrap_or_default();
            let outcome = format!("{:?}", q.outcome).to_lowercase();
            writeln!(
                out,
                "{},{},{},{index},{},{outcome},{}",
                r.parent, r.repetition, q.qname, q.rtt_ms, r.partial
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `scope,key,samples,mean_ms,median_ms` with one row for visit totals, one
/// for individual queries and one per recursor.
pub fn write_summary_csv(summary: &StatsSummary, path: &Path) -> Result<(), BenchError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "scope,key,samples,mean_ms,median_ms")?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let t = &summary.visit_totals_ms;
    writeln!(out, "visit_total,,{},{},{}", t.len(), mean(t), median(t))?;
    let q = &summary.query_rtts_ms;
    writeln!(out, "query,,{},{},{}", q.len(), summary.mean_query_ms, median(q))?;
    for (i, s) in &summary.per_recursor {
        writeln!(out, "recursor,{i},{},{},{}", s.samples.len(), mean(&s.samples), s.median_ms)?;
    }
    out.flush()?;
    Ok(())
}
