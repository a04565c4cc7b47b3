//! proptest strategies for well-formed DNS messages.

use std::fmt::Write;
use std::net::{Ipv4Addr, Ipv6Addr};

use kresolver::wire::{self, DnsMessage, Header, Question, RData, Record};
use proptest::collection::vec;
use proptest::prelude::*;

fn label() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        4 => "[a-z0-9-]{1,20}".prop_map(String::into_bytes),
        1 => vec(any::<u8>(), 1..=63),
    ]
}

fn label_text(label: &[u8]) -> String {
    let mut out = String::new();
    for &b in label {
        match b {
            b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'-' | b'_' => out.push(char::from(b)),
            _ => {
                let _ = write!(out, "\\{b:03}");
            }
        }
    }
    out
}

/// Presentation-form names that fit in 255 wire octets, root included.
pub fn name() -> impl Strategy<Value = String> {
    vec(label(), 0..6).prop_map(|mut labels| {
        while labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1 > wire::MAX_NAME_LEN {
            labels.pop();
        }
        labels.iter().map(|l| label_text(l)).collect::<Vec<_>>().join(".")
    })
}

// Types whose rdata the decoder keeps as opaque bytes.
const OPAQUE_TYPES: [u16; 6] = [wire::TYPE_TXT, 10, 13, 33, 99, 65280];

fn record() -> impl Strategy<Value = Record> {
    let data = prop_oneof![
        any::<[u8; 4]>().prop_map(|o| (wire::TYPE_A, RData::A(Ipv4Addr::from(o)))),
        any::<[u8; 16]>().prop_map(|o| (wire::TYPE_AAAA, RData::Aaaa(Ipv6Addr::from(o)))),
        name().prop_map(|n| (wire::TYPE_CNAME, RData::Cname(n))),
        (prop::sample::select(OPAQUE_TYPES.to_vec()), vec(any::<u8>(), 0..64))
            .prop_map(|(t, b)| (t, RData::Opaque(b))),
    ];
    (name(), data, any::<u16>(), any::<u32>()).prop_map(|(name, (rtype, data), class, ttl)| Record {
        name,
        rtype,
        class,
        ttl,
        data,
    })
}

fn header() -> impl Strategy<Value = Header> {
    (any::<u16>(), any::<[bool; 8]>(), 0u8..16, 0u8..16).prop_map(|(id, f, opcode, rcode)| Header {
        id,
        qr: f[0],
        opcode,
        aa: f[1],
        tc: f[2],
        rd: f[3],
        ra: f[4],
        z: f[5],
        ad: f[6],
        cd: f[7],
        rcode,
    })
}

pub fn message() -> impl Strategy<Value = DnsMessage> {
    (
        header(),
        name(),
        any::<u16>(),
        any::<u16>(),
        vec(record(), 0..4),
        vec(record(), 0..3),
        vec(record(), 0..3),
    )
        .prop_map(|(header, qname, qtype, qclass, answers, authority, additional)| DnsMessage {
            header,
            question: Question {
                name: qname,
                qtype,
                qclass,
            },
            answers,
            authority,
            additional,
        })
}

/// encode, decode, re-encode: the second encoding must equal the first and
/// decode to the same message.
pub fn check_round_trip(m0: &DnsMessage) -> Result<(), String> {
    let b0 = m0.to_bytes().map_err(|e| format!("encode: {e}"))?;
    let m1 = wire::decode_message(&b0).map_err(|e| format!("decode: {e}"))?;
    let b1 = m1.to_bytes().map_err(|e| format!("re-encode: {e}"))?;
    if b0 != b1 {
        return Err("re-encoded bytes differ".into());
    }
    let m2 = wire::decode_message(&b1).map_err(|e| format!("second decode: {e}"))?;
    if m1 != m2 {
        return Err("second decode differs".into());
    }
    if m1.header != m0.header || m1.answers.len() != m0.answers.len() {
        return Err("header or section sizes changed".into());
    }
    Ok(())
}
