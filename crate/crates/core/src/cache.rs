//! Response cache keyed by (qname, qtype), with per-entry expiry and LRU
//! eviction at capacity.

use std::num::NonZeroUsize;

use lru::LruCache;
use parking_lot::Mutex;

use crate::attribution::Millis;
use crate::wire::{self, DnsMessage};

/// Lifetime for NXDOMAIN and empty-answer responses.
pub const NEGATIVE_TTL_S: u32 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryKey {
    pub qname: String,
    pub qtype: u16,
}

impl QueryKey {
    pub fn new(qname: &str, qtype: u16) -> Self {
        QueryKey {
            qname: qname.to_string(),
            qtype,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub key: QueryKey,
    pub response: DnsMessage,
    pub inserted_at: Millis,
    pub expires_at: Millis,
    pub resolved_via: usize,
}

impl CacheEntry {
    /// The stored response with TTLs reduced by the whole seconds elapsed
    /// since insertion.
    pub fn aged_response(&self, now: Millis) -> DnsMessage {
        let elapsed = u32::try_from(now.saturating_sub(self.inserted_at) / 1000).unwrap_or(u32::MAX);
        let mut msg = self.response.clone();
        for record in msg.records_mut() {
            if record.rtype != wire::TYPE_OPT {
                record.ttl = record.ttl.saturating_sub(elapsed);
            }
        }
        msg
    }
}

/// TTL a response would be cached for before clamping, or `None` if it must
/// not be cached at all (server failures and the like).
pub fn response_ttl(msg: &DnsMessage) -> Option<u32> {
    match msg.header.rcode {
        wire::RCODE_NXDOMAIN => Some(NEGATIVE_TTL_S),
        wire::RCODE_NOERROR if msg.answers.is_empty() => Some(NEGATIVE_TTL_S),
        wire::RCODE_NOERROR => wire::min_ttl(msg).ok(),
        _ => None,
    }
}

#[derive(Debug)]
pub struct DnsCache {
    entries: Mutex<LruCache<QueryKey, CacheEntry>>,
    max_ttl_s: u32,
}

impl DnsCache {
    pub fn new(capacity: usize, max_ttl_s: u32) -> Self {
        let capacity = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        DnsCache {
            entries: Mutex::new(LruCache::new(capacity)),
            max_ttl_s: max_ttl_s.max(1),
        }
    }

    /// Returns an unexpired entry and marks it recently used; expired entries
    /// are dropped on the way.
    pub fn get(&self, key: &QueryKey, now: Millis) -> Option<CacheEntry> {
        let mut entries = self.entries.lock();
        match entries.get(key) {
            Some(entry) if now < entry.expires_at => Some(entry.clone()),
            Some(_) => {
                entries.pop(key);
                None
            }
            None => None,
        }
    }

    /// Stores `response` if it is cacheable, with its TTL clamped to
    /// `[1, max_ttl_s]`. Returns the TTL used.
    pub fn put(&self, key: QueryKey, response: DnsMessage, now: Millis, resolved_via: usize) -> Option<u32> {
        let ttl = response_ttl(&response)?.clamp(1, self.max_ttl_s);
        let entry = CacheEntry {
            key: key.clone(),
            response,
            inserted_at: now,
            expires_at: now + u64::from(ttl) * 1000,
            resolved_via,
        };
        self.entries.lock().put(key, entry);
        Some(ttl)
    }

    pub fn clear(&self) {
        self.entries.lock().clear();
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{RData, Record, CLASS_IN, TYPE_A};
    use std::net::Ipv4Addr;

    fn response(name: &str, ttls: &[u32]) -> DnsMessage {
        let mut msg = wire::error_response(&DnsMessage::query(name, TYPE_A, 1, true), wire::RCODE_NOERROR);
        for &ttl in ttls {
            msg.answers.push(Record {
                name: name.into(),
                rtype: TYPE_A,
                class: CLASS_IN,
                ttl,
                data: RData::A(Ipv4Addr::new(192, 0, 2, 1)),
            });
        }
        msg
    }

    #[test]
    fn put_then_get() {
        let cache = DnsCache::new(10, 300);
        let key = QueryKey::new("a.com", TYPE_A);
        assert_eq!(cache.put(key.clone(), response("a.com", &[120]), 0, 3), Some(120));
        let entry = cache.get(&key, 1000).unwrap();
        assert_eq!(entry.resolved_via, 3);
    }

    #[test]
    fn expiry_follows_min_ttl() {
        let cache = DnsCache::new(10, 300);
        let key = QueryKey::new("a.com", TYPE_A);
        cache.put(key.clone(), response("a.com", &[60, 600]), 0, 0);
        assert!(cache.get(&key, 59_999).is_some());
        assert!(cache.get(&key, 61_000).is_none());
        assert!(cache.is_empty());
    }

    #[test]
    fn ttl_is_clamped() {
        let cache = DnsCache::new(10, 300);
        assert_eq!(cache.put(QueryKey::new("z.com", TYPE_A), response("z.com", &[0]), 0, 0), Some(1));
        assert_eq!(cache.put(QueryKey::new("l.com", TYPE_A), response("l.com", &[86_400]), 0, 0), Some(300));
    }

    #[test]
    fn lru_evicts_least_recently_used() {
        let cache = DnsCache::new(2, 300);
        let (a, b, c) = (QueryKey::new("a.com", 1), QueryKey::new("b.com", 1), QueryKey::new("c.com", 1));
        cache.put(a.clone(), response("a.com", &[100]), 0, 0);
        cache.put(b.clone(), response("b.com", &[100]), 0, 0);
        cache.put(c.clone(), response("c.com", &[100]), 0, 0);
        assert!(cache.get(&a, 1).is_none());
        assert!(cache.get(&b, 1).is_some());
        assert!(cache.get(&c, 1).is_some());

        // touching b makes c the eviction candidate
        cache.get(&b, 2);
        cache.put(a.clone(), response("a.com", &[100]), 3, 0);
        assert!(cache.get(&c, 4).is_none());
        assert!(cache.get(&b, 4).is_some());
    }

    #[test]
    fn negative_and_failure_responses() {
        let cache = DnsCache::new(10, 300);
        let mut nx = response("nx.com", &[]);
        nx.header.rcode = wire::RCODE_NXDOMAIN;
        assert_eq!(cache.put(QueryKey::new("nx.com", 1), nx, 0, 0), Some(NEGATIVE_TTL_S));
        let mut fail = response("f.com", &[]);
        fail.header.rcode = wire::RCODE_SERVFAIL;
        assert_eq!(cache.put(QueryKey::new("f.com", 1), fail, 0, 0), None);
        let small = DnsCache::new(10, 10);
        let mut nx = response("nx.com", &[]);
        nx.header.rcode = wire::RCODE_NXDOMAIN;
        assert_eq!(small.put(QueryKey::new("nx.com", 1), nx, 0, 0), Some(10));
    }

    #[test]
    fn aged_response_decrements_ttls() {
        let cache = DnsCache::new(10, 300);
        let key = QueryKey::new("a.com", TYPE_A);
        cache.put(key.clone(), response("a.com", &[100, 250]), 5_000, 0);
        let aged = cache.get(&key, 47_900).unwrap().aged_response(47_900);
        let ttls: Vec<_> = aged.answers.iter().map(|r| r.ttl).collect();
        assert_eq!(ttls, [58, 208]);
    }
}
