//! Salted bucket hashing of registrable domains onto recursor indices.
//!
//! `index = u64_be(SHA-256(domain ‖ 0x00 ‖ salt)[..8]) mod k`

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Salt;
use crate::suffix::SuffixRules;
use crate::wire::{self, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed name {name:?}: {source}")]
pub struct NameError {
    pub name: String,
    #[source]
    pub source: WireError,
}

/// Lowercases ASCII, strips the root dot and checks RFC 1035 length limits.
/// Punycode labels pass through unchanged.
pub fn canonicalize_qname(raw: &str) -> Result<String, NameError> {
    let fail = |source| NameError {
        name: raw.to_string(),
        source,
    };
    if raw == "." || raw.is_empty() {
        return Ok(String::new());
    }
    wire::name_to_labels(raw).map_err(fail)?;
    let trimmed = raw.strip_suffix('.').unwrap_or(raw);
    Ok(trimmed.to_ascii_lowercase())
}

/// Public suffix plus one label: the unit that is pinned to a recursor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegistrableDomain(String);

impl RegistrableDomain {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Canonicalizes and reduces `name` in one step.
    pub fn from_name(name: &str, rules: &SuffixRules) -> Result<Self, NameError> {
        let canonical = canonicalize_qname(name)?;
        Ok(registrable_domain(&canonical, rules))
    }
}

impl fmt::Display for RegistrableDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reduces a canonical name to its registrable domain. Names that are
/// themselves a public suffix, or that match no rule at all, are returned
/// unchanged.
pub fn registrable_domain(name: &str, rules: &SuffixRules) -> RegistrableDomain {
    let label_count = if name.is_empty() { 0 } else { name.split('.').count() };
    match rules.suffix_label_count(name) {
        Some(suffix) if suffix < label_count => {
            let keep = suffix + 1;
            let start = name
                .rmatch_indices('.')
                .nth(keep - 1)
                .map_or(0, |(i, _)| i + 1);
            RegistrableDomain(name[start..].to_string())
        }
        _ => RegistrableDomain(name.to_string()),
    }
}

pub fn bucket_hash(domain: &RegistrableDomain, salt: &Salt) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Index of the recursor responsible for `domain`. Panics if `k == 0`.
pub fn assign_recursor(domain: &RegistrableDomain, salt: &Salt, k: usize) -> usize {
    assert!(k > 0, "recursor pool must not be empty");
    (bucket_hash(domain, salt) % k as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentRecord {
    pub domain: RegistrableDomain,
    pub salt: Salt,
    pub k: usize,
    pub index: usize,
}

impl AssignmentRecord {
    pub fn compute(domain: RegistrableDomain, salt: Salt, k: usize) -> Self {
        let index = assign_recursor(&domain, &salt, k);
        AssignmentRecord {
            domain,
            salt,
            k,
            index,
        }
    }

    /// True when the stored index still matches a fresh computation.
    pub fn verify(&self) -> bool {
        assign_recursor(&self.domain, &self.salt, self.k) == self.index
    }
}
