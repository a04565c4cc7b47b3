//! Page-context reconstruction: which parent domain governs each query.
//!
//! A query opens a new session (and becomes its parent) when the client has
//! no session, has been idle longer than `t_idle_ms`, or its session is older
//! than `w_max_ms`. Any other query is a subresource of the current parent and
//! is hashed under the parent's registrable domain.

use std::net::IpAddr;

use dashmap::DashMap;

use crate::assignment::{registrable_domain, NameError, RegistrableDomain};
use crate::suffix::SuffixRules;

/// Milliseconds on a monotonic clock.
pub type Millis = u64;

pub const DEFAULT_T_IDLE_MS: u64 = 2000;
pub const DEFAULT_W_MAX_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributionPolicy {
    pub t_idle_ms: u64,
    pub w_max_ms: u64,
}

impl Default for AttributionPolicy {
    fn default() -> Self {
        AttributionPolicy {
            t_idle_ms: DEFAULT_T_IDLE_MS,
            w_max_ms: DEFAULT_W_MAX_MS,
        }
    }
}

impl AttributionPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.t_idle_ms == 0 || self.t_idle_ms > self.w_max_ms {
            return Err(format!(
                "attribution requires 0 < t_idle_ms <= w_max_ms (got {} / {})",
                self.t_idle_ms, self.w_max_ms
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSession {
    pub client_id: IpAddr,
    pub parent: RegistrableDomain,
    pub started_at: Millis,
    pub last_activity: Millis,
}

impl ClientSession {
    fn fresh(client_id: IpAddr, parent: RegistrableDomain, now: Millis) -> Self {
        ClientSession {
            client_id,
            parent,
            started_at: now,
            last_activity: now,
        }
    }

    fn is_live(&self, now: Millis, policy: &AttributionPolicy) -> bool {
        now.saturating_sub(self.last_activity) <= policy.t_idle_ms
            && now.saturating_sub(self.started_at) <= policy.w_max_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Classification {
    Parent,
    Subresource(RegistrableDomain),
}

/// Classifies `qname` for `client_id` and updates the session in place.
pub fn classify_query(
    session: &mut Option<ClientSession>,
    client_id: IpAddr,
    qname: &str,
    now: Millis,
    policy: &AttributionPolicy,
    rules: &SuffixRules,
) -> Classification {
    match session {
        Some(s) if s.is_live(now, policy) => {
            s.last_activity = now.max(s.last_activity);
            Classification::Subresource(s.parent.clone())
        }
        _ => {
            *session = Some(ClientSession::fresh(
                client_id,
                registrable_domain(qname, rules),
                now,
            ));
            Classification::Parent
        }
    }
}

/// The registrable domain whose assignment governs this query.
pub fn assignment_domain(
    classification: &Classification,
    qname: &str,
    rules: &SuffixRules,
) -> RegistrableDomain {
    match classification {
        Classification::Parent => registrable_domain(qname, rules),
        Classification::Subresource(parent) => parent.clone(),
    }
}

/// Concurrent per-client session table keyed by source IP.
#[derive(Debug, Default)]
pub struct SessionTable {
    sessions: DashMap<IpAddr, ClientSession>,
}

impl SessionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Classifies a query and returns it together with the assignment domain.
    /// Holds the client's entry lock for the whole update.
    pub fn classify(
        &self,
        client_id: IpAddr,
        qname: &str,
        now: Millis,
        policy: &AttributionPolicy,
        rules: &SuffixRules,
    ) -> (Classification, RegistrableDomain) {
        let mut entry = self.sessions.entry(client_id);
        let mut slot = match &mut entry {
            dashmap::Entry::Occupied(o) => Some(o.get().clone()),
            dashmap::Entry::Vacant(_) => None,
        };
        let classification = classify_query(&mut slot, client_id, qname, now, policy, rules);
        let domain = assignment_domain(&classification, qname, rules);
        let session = slot.expect("classify_query always leaves a session");
        match entry {
            dashmap::Entry::Occupied(mut o) => {
                o.insert(session);
            }
            dashmap::Entry::Vacant(v) => {
                v.insert(session);
            }
        }
        (classification, domain)
    }

    /// Explicitly sets the parent for `client_id`, e.g. from a browser
    /// extension that knows the page being loaded.
    pub fn tag_parent(
        &self,
        client_id: IpAddr,
        domain: &str,
        now: Millis,
        rules: &SuffixRules,
    ) -> Result<ClientSession, NameError> {
        let parent = RegistrableDomain::from_name(domain, rules)?;
        if parent.as_str().is_empty() {
            return Err(NameError {
                name: domain.to_string(),
                source: crate::wire::WireError::EmptyLabel,
            });
        }
        let session = ClientSession::fresh(client_id, parent, now);
        self.sessions.insert(client_id, session.clone());
        Ok(session)
    }

    pub fn get(&self, client_id: &IpAddr) -> Option<ClientSession> {
        self.sessions.get(client_id).map(|s| s.clone())
    }

    /// Drops sessions idle for longer than `w_max_ms`.
    pub fn expire_sessions(&self, now: Millis, policy: &AttributionPolicy) {
        self.sessions
            .retain(|_, s| now.saturating_sub(s.last_activity) <= policy.w_max_ms);
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}
