//! The resolution pipeline: decode, attribute, assign, cache, forward, log.

use std::io;
use std::net::IpAddr;
use std::time::{Duration, Instant};

use crate::assignment::{assign_recursor, canonicalize_qname};
use crate::attribution::{Millis, SessionTable};
use crate::cache::{DnsCache, QueryKey};
use crate::config::ProxyConfig;
use crate::doh::{DohClient, Upstreams};
use crate::querylog::{Outcome, QueryLog, QueryLogRecord, Via};
use crate::suffix::SuffixRules;
use crate::wire::{self, DnsMessage};

/// A reply before transport framing.
#[derive(Debug, Clone)]
pub enum Reply {
    Message { msg: DnsMessage, udp_limit: usize },
    /// Pre-encoded header-only reply for queries that did not decode.
    Raw(Vec<u8>),
}

impl Reply {
    /// Encoding for TCP (no size limit).
    pub fn into_bytes(self) -> Vec<u8> {
        match self {
            Reply::Message { msg, .. } => msg
                .to_bytes()
                .unwrap_or_else(|_| servfail_bytes(&msg)),
            Reply::Raw(bytes) => bytes,
        }
    }

    /// Encoding for UDP, truncated with TC=1 past the client's payload limit.
    pub fn into_udp_bytes(self) -> Vec<u8> {
        match self {
            Reply::Message { msg, udp_limit } => wire::encode_for_udp(&msg, udp_limit)
                .unwrap_or_else(|_| servfail_bytes(&msg)),
            Reply::Raw(bytes) => bytes,
        }
    }
}

fn servfail_bytes(msg: &DnsMessage) -> Vec<u8> {
    let mut header = msg.header;
    header.tc = false;
    header.rcode = wire::RCODE_SERVFAIL;
    let mut out = Vec::with_capacity(wire::HEADER_LEN);
    out.extend_from_slice(&header.id.to_be_bytes());
    out.extend_from_slice(&header.flags().to_be_bytes());
    out.extend_from_slice(&[0; 8]);
    out
}

/// Shared state of a running proxy.
#[derive(Debug)]
pub struct Proxy {
    config: ProxyConfig,
    rules: &'static SuffixRules,
    sessions: SessionTable,
    cache: DnsCache,
    upstreams: Upstreams,
    log: QueryLog,
    epoch: Instant,
}

impl Proxy {
    pub fn new(config: ProxyConfig, client: DohClient) -> io::Result<Self> {
        let log = QueryLog::open(&config.log_path)?;
        Ok(Proxy {
            rules: SuffixRules::bundled(),
            sessions: SessionTable::new(),
            cache: DnsCache::new(config.cache_capacity, config.cache_max_ttl_s),
            upstreams: Upstreams::new(config.pool.clone(), client),
            log,
            epoch: Instant::now(),
            config,
        })
    }

    /// Milliseconds since the proxy started; the clock used for sessions and
    /// cache expiry by the network listeners.
    pub fn now(&self) -> Millis {
        u64::try_from(self.epoch.elapsed().as_millis()).unwrap_or(u64::MAX)
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn cache(&self) -> &DnsCache {
        &self.cache
    }

    pub fn upstreams(&self) -> &Upstreams {
        &self.upstreams
    }

    pub fn rules(&self) -> &'static SuffixRules {
        self.rules
    }

    pub fn log(&self) -> &QueryLog {
        &self.log
    }

    /// Handles one wire-format query and returns the response without TCP framing.
    pub async fn handle_query(&self, raw: &[u8], client: IpAddr, now: Millis) -> Vec<u8> {
        self.process(raw, client, now).await.into_bytes()
    }

    /// Runs the pipeline and appends exactly one log record.
    pub async fn process(&self, raw: &[u8], client: IpAddr, now: Millis) -> Reply {
        let started = Instant::now();
        let query = match wire::decode_message(raw) {
            Ok(q) if !q.header.qr => q,
            Ok(_) | Err(_) => {
                let mut record = QueryLogRecord::new(client, "", "");
                record.outcome = Outcome::Formerr;
                self.append(&record);
                return Reply::Raw(wire::header_only_response(raw, wire::RCODE_FORMERR));
            }
        };
        let udp_limit = query.udp_payload_limit();
        let reply = |msg| Reply::Message { msg, udp_limit };

        let qname = match canonicalize_qname(&query.question.name) {
            Ok(name) => name,
            Err(_) => {
                let mut record = QueryLogRecord::new(client, &query.question.name, "");
                record.outcome = Outcome::Formerr;
                self.append(&record);
                return reply(wire::error_response(&query, wire::RCODE_FORMERR));
            }
        };
        if query.header.opcode != 0 {
            let mut record = QueryLogRecord::new(client, &qname, "");
            record.outcome = Outcome::Notimp;
            self.append(&record);
            return reply(wire::error_response(&query, wire::RCODE_NOTIMP));
        }

        // Attribution runs for cache hits too, so a cached parent still
        // opens the session its subresources belong to.
        let (_, domain) = self.sessions.classify(
            client,
            &qname,
            now,
            &self.config.attribution,
            self.rules,
        );
        let mut record = QueryLogRecord::new(client, &qname, domain.as_str());
        let key = QueryKey::new(&qname, query.question.qtype);

        if let Some(entry) = self.cache.get(&key, now) {
            let mut msg = entry.aged_response(now);
            msg.header.id = query.header.id;
            msg.question = query.question.clone();
            record.recursor_index = Via::Cache;
            record.cache_hit = true;
            record.rtt_ms = started.elapsed().as_secs_f64() * 1000.0;
            self.append(&record);
            return reply(msg);
        }

        let index = assign_recursor(&domain, &self.config.salt, self.config.pool.k());
        let deadline = Duration::from_millis(self.config.query_timeout_ms);
        let resolution = self
            .upstreams
            .resolve(index, raw, self.config.failover_mode, deadline)
            .await;
        match resolution {
            Ok(resolution) => {
                let result = resolution.result;
                let mut msg = result.message;
                msg.header.id = query.header.id;
                msg.question = query.question.clone();
                record.recursor_index = Via::Recursor(result.recursor_index);
                record.rtt_ms = result.rtt_ms;
                record.failover_from = resolution.failover_from;
                if msg.header.rcode == wire::RCODE_SERVFAIL {
                    record.outcome = Outcome::Servfail;
                }
                self.cache.put(key, msg.clone(), now, result.recursor_index);
                self.append(&record);
                reply(msg)
            }
            Err(e) => {
                tracing::debug!(qname = %qname, index, error = %e, "upstream failure");
                record.recursor_index = Via::Recursor(index);
                record.rtt_ms = started.elapsed().as_secs_f64() * 1000.0;
                record.outcome = if e.is_timeout() {
                    Outcome::Timeout
                } else {
                    Outcome::Servfail
                };
                self.append(&record);
                reply(wire::error_response(&query, wire::RCODE_SERVFAIL))
            }
        }
    }

    fn append(&self, record: &QueryLogRecord) {
        if let Err(e) = self.log.append(record) {
            tracing::error!(error = %e, "query log write failed");
        }
    }

    /// Executes one control-channel line and returns the reply line.
    pub fn control(&self, line: &str, now: Millis) -> String {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("TAG"), Some(ip), Some(domain), None) => {
                let Ok(ip) = ip.parse::<IpAddr>() else {
                    return format!("ERR bad client address {ip:?}\n");
                };
                match self.sessions.tag_parent(ip, domain, now, self.rules) {
                    Ok(_) => "OK\n".to_string(),
                    Err(e) => format!("ERR {e}\n"),
                }
            }
            (Some("TAG"), ..) => "ERR usage: TAG <client-ip> <domain>\n".to_string(),
            (Some("FLUSH"), None, ..) => {
                self.cache.clear();
                "OK\n".to_string()
            }
            (Some(cmd), ..) => format!("ERR unknown command {cmd:?}\n"),
            (None, ..) => "ERR empty command\n".to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FailoverMode, RecursorSpec, ResolverPool, Salt};
    use crate::attribution::AttributionPolicy;
    use crate::querylog::read_log;
    use std::path::Path;

    fn config(log: &Path) -> ProxyConfig {
        ProxyConfig {
            listen_address: "127.0.0.1:0".parse().unwrap(),
            control_address: "127.0.0.1:0".parse().unwrap(),
            // unroutable; these tests never reach an upstream successfully
            pool: ResolverPool::new(vec![RecursorSpec::new("r0", "https://127.0.0.1:9/dns-query")]).unwrap(),
            salt: Salt([1; 16]),
            attribution: AttributionPolicy::default(),
            cache_max_ttl_s: 300,
            cache_capacity: 100,
            query_timeout_ms: 2000,
            failover_mode: FailoverMode::Strict,
            log_path: log.to_path_buf(),
        }
    }

    fn proxy(dir: &tempfile::TempDir) -> Proxy {
        Proxy::new(config(&dir.path().join("log.csv")), DohClient::new(&[]).unwrap()).unwrap()
    }

    fn client() -> IpAddr {
        "127.0.0.1".parse().unwrap()
    }

    #[tokio::test]
    async fn malformed_query_gets_formerr_and_log_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = proxy(&dir);
        let out = p.handle_query(&[0xbe, 0xef, 1, 0, 0, 9], client(), 0).await;
        assert_eq!(&out[..2], &[0xbe, 0xef]);
        assert_eq!(out[3] & 0x0f, wire::RCODE_FORMERR);
        assert!(out[2] & 0x80 != 0);
        p.log().flush().unwrap();
        let log = read_log(p.log().path()).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].outcome, Outcome::Formerr);
    }

    #[tokio::test]
    async fn non_query_opcode_is_notimp() {
        let dir = tempfile::tempdir().unwrap();
        let p = proxy(&dir);
        let mut q = DnsMessage::query("a.com", wire::TYPE_A, 7, true);
        q.header.opcode = 2;
        let out = wire::decode_message(&p.handle_query(&q.to_bytes().unwrap(), client(), 0).await).unwrap();
        assert_eq!(out.header.rcode, wire::RCODE_NOTIMP);
        assert_eq!(out.header.id, 7);
    }

    #[tokio::test]
    async fn response_packets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = proxy(&dir);
        let mut q = DnsMessage::query("a.com", wire::TYPE_A, 7, true);
        q.header.qr = true;
        let out = p.handle_query(&q.to_bytes().unwrap(), client(), 0).await;
        assert_eq!(out[3] & 0x0f, wire::RCODE_FORMERR);
    }

    #[test]
    fn control_commands() {
        let dir = tempfile::tempdir().unwrap();
        let p = proxy(&dir);
        assert_eq!(p.control("TAG 10.0.0.5 www.bank.com", 0), "OK\n");
        assert_eq!(p.sessions().get(&"10.0.0.5".parse().unwrap()).unwrap().parent.as_str(), "bank.com");
        assert!(p.control("TAG nonsense a.com", 0).starts_with("ERR "));
        assert!(p.control("TAG 10.0.0.5", 0).starts_with("ERR "));
        assert!(p.control("TAG 10.0.0.5 a..b", 0).starts_with("ERR "));
        assert!(p.control("HELLO", 0).starts_with("ERR "));
        assert!(p.control("", 0).starts_with("ERR "));
        assert_eq!(p.control("FLUSH", 0), "OK\n");
    }

    #[test]
    fn oversized_reply_truncates_over_udp() {
        let q = DnsMessage::query("big.example", wire::TYPE_A, 3, true);
        let mut msg = wire::error_response(&q, wire::RCODE_NOERROR);
        for i in 0..60u8 {
            msg.answers.push(wire::Record {
                name: "big.example".into(),
                rtype: wire::TYPE_A,
                class: wire::CLASS_IN,
                ttl: 60,
                data: wire::RData::A([10, 0, 0, i].into()),
            });
        }
        let full = Reply::Message { msg: msg.clone(), udp_limit: 512 }.into_bytes();
        assert!(full.len() > 512);
        let udp = Reply::Message { msg, udp_limit: 512 }.into_udp_bytes();
        let decoded = wire::decode_message(&udp).unwrap();
        assert!(decoded.header.tc);
        assert!(udp.len() <= 512);
    }
}
