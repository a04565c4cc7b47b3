//! RFC 1035 wire format codec.
//!
//! Names are carried in presentation form without the trailing root dot
//! (the root itself is the empty string). Label bytes outside the printable
//! ASCII range, as well as `.` and `\`, are escaped (`\DDD` / `\.`), so any
//! on-the-wire label survives a decode/encode cycle.
//!
//! Only A, AAAA and CNAME rdata are interpreted. For the other RFC 1035 types
//! that may carry compressed names (NS, SOA, MX, PTR, ...) the embedded names
//! are decompressed so the rdata stays valid once detached from the original
//! message; all other rdata is passed through untouched.

use std::fmt;
use std::net::{Ipv4Addr, Ipv6Addr};

use thiserror::Error;

pub const HEADER_LEN: usize = 12;
pub const MAX_NAME_LEN: usize = 255;
pub const MAX_LABEL_LEN: usize = 63;
/// Classic UDP payload limit when the query carries no EDNS0 OPT record.
pub const UDP_DEFAULT_PAYLOAD: usize = 512;

pub const TYPE_A: u16 = 1;
pub const TYPE_NS: u16 = 2;
pub const TYPE_CNAME: u16 = 5;
pub const TYPE_SOA: u16 = 6;
pub const TYPE_PTR: u16 = 12;
pub const TYPE_MINFO: u16 = 14;
pub const TYPE_MX: u16 = 15;
pub const TYPE_TXT: u16 = 16;
pub const TYPE_AAAA: u16 = 28;
pub const TYPE_OPT: u16 = 41;
pub const CLASS_IN: u16 = 1;

pub const RCODE_NOERROR: u8 = 0;
pub const RCODE_FORMERR: u8 = 1;
pub const RCODE_SERVFAIL: u8 = 2;
pub const RCODE_NXDOMAIN: u8 = 3;
pub const RCODE_NOTIMP: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed message at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("compression pointer loop at offset {offset}")]
    PointerLoop { offset: usize },
    #[error("section counts do not match message contents ({0})")]
    CountMismatch(&'static str),
    #[error("unsupported question count {0}, exactly one is required")]
    QuestionCount(u16),
    #[error("name exceeds 255 octets")]
    NameTooLong,
    #[error("label exceeds 63 octets")]
    LabelTooLong,
    #[error("empty label in name")]
    EmptyLabel,
    #[error("invalid escape sequence in name")]
    BadEscape,
    #[error("rdata exceeds 65535 octets")]
    RdataTooLong,
    #[error("message has no answer records")]
    NoAnswers,
}

fn malformed(offset: usize, reason: &'static str) -> WireError {
    WireError::Malformed { offset, reason }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Header {
    pub id: u16,
    pub qr: bool,
    pub opcode: u8,
    pub aa: bool,
    pub tc: bool,
    pub rd: bool,
    pub ra: bool,
    pub z: bool,
    pub ad: bool,
    pub cd: bool,
    pub rcode: u8,
}

impl Header {
    pub fn flags(&self) -> u16 {
        (u16::from(self.qr) << 15)
            | (u16::from(self.opcode & 0x0f) << 11)
            | (u16::from(self.aa) << 10)
            | (u16::from(self.tc) << 9)
            | (u16::from(self.rd) << 8)
            | (u16::from(self.ra) << 7)
            | (u16::from(self.z) << 6)
            | (u16::from(self.ad) << 5)
            | (u16::from(self.cd) << 4)
            | u16::from(self.rcode & 0x0f)
    }

    fn from_parts(id: u16, flags: u16) -> Self {
        Header {
            id,
            qr: flags & 0x8000 != 0,
            opcode: ((flags >> 11) & 0x0f) as u8,
            aa: flags & 0x0400 != 0,
            tc: flags & 0x0200 != 0,
            rd: flags & 0x0100 != 0,
            ra: flags & 0x0080 != 0,
            z: flags & 0x0040 != 0,
            ad: flags & 0x0020 != 0,
            cd: flags & 0x0010 != 0,
            rcode: (flags & 0x0f) as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: String,
    pub qtype: u16,
    pub qclass: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RData {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Cname(String),
    Opaque(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub rtype: u16,
    pub class: u16,
    pub ttl: u32,
    pub data: RData,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsMessage {
    pub header: Header,
    pub question: Question,
    pub answers: Vec<Record>,
    pub authority: Vec<Record>,
    pub additional: Vec<Record>,
}

impl DnsMessage {
    pub fn query(name: &str, qtype: u16, id: u16, rd: bool) -> Self {
        DnsMessage {
            header: Header {
                id,
                rd,
                ..Header::default()
            },
            question: Question {
                name: name.to_string(),
                qtype,
                qclass: CLASS_IN,
            },
            answers: Vec::new(),
            authority: Vec::new(),
            additional: Vec::new(),
        }
    }

    pub fn records_mut(&mut self) -> impl Iterator<Item = &mut Record> {
        self.answers
            .iter_mut()
            .chain(self.authority.iter_mut())
            .chain(self.additional.iter_mut())
    }

    /// The EDNS0 OPT pseudo-record, if present.
    pub fn edns(&self) -> Option<&Record> {
        self.additional.iter().find(|r| r.rtype == TYPE_OPT)
    }

    /// Largest response the sender of this query accepts over UDP.
    pub fn udp_payload_limit(&self) -> usize {
        self.edns()
            .map(|opt| usize::from(opt.class).max(UDP_DEFAULT_PAYLOAD))
            .unwrap_or(UDP_DEFAULT_PAYLOAD)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(128);
        out.extend_from_slice(&self.header.id.to_be_bytes());
        out.extend_from_slice(&self.header.flags().to_be_bytes());
        for count in [
            1,
            self.answers.len(),
            self.authority.len(),
            self.additional.len(),
        ] {
            let count = u16::try_from(count).map_err(|_| WireError::CountMismatch("section too large"))?;
            out.extend_from_slice(&count.to_be_bytes());
        }
        write_name(&mut out, &self.question.name)?;
        out.extend_from_slice(&self.question.qtype.to_be_bytes());
        out.extend_from_slice(&self.question.qclass.to_be_bytes());
        for record in self
            .answers
            .iter()
            .chain(&self.authority)
            .chain(&self.additional)
        {
            write_record(&mut out, record)?;
        }
        Ok(out)
    }
}

/// Encodes a single-question query without compression or EDNS.
pub fn encode_query(qname: &str, qtype: u16, id: u16, rd: bool) -> Result<Vec<u8>, WireError> {
    DnsMessage::query(qname, qtype, id, rd).to_bytes()
}

pub fn decode_message(buf: &[u8]) -> Result<DnsMessage, WireError> {
    let mut reader = Reader { buf, pos: 0 };
    let id = reader.u16()?;
    let flags = reader.u16()?;
    let qdcount = reader.u16()?;
    let ancount = reader.u16()?;
    let nscount = reader.u16()?;
    let arcount = reader.u16()?;
    if qdcount != 1 {
        return Err(WireError::QuestionCount(qdcount));
    }
    let name = reader.name()?;
    let qtype = reader.u16()?;
    let qclass = reader.u16()?;
    let question = Question {
        name,
        qtype,
        qclass,
    };
    let answers = reader.records(ancount)?;
    let authority = reader.records(nscount)?;
    let additional = reader.records(arcount)?;
    if reader.pos != buf.len() {
        return Err(WireError::CountMismatch("trailing bytes after last record"));
    }
    Ok(DnsMessage {
        header: Header::from_parts(id, flags),
        question,
        answers,
        authority,
        additional,
    })
}

/// Minimum TTL across the answer section.
pub fn min_ttl(msg: &DnsMessage) -> Result<u32, WireError> {
    msg.answers
        .iter()
        .map(|r| r.ttl)
        .min()
        .ok_or(WireError::NoAnswers)
}

/// A bare header-only reply, used when the query cannot be decoded far enough
/// to echo its question.
pub fn header_only_response(query: &[u8], rcode: u8) -> Vec<u8> {
    let (id, rd, opcode) = if query.len() >= 4 {
        let flags = u16::from_be_bytes([query[2], query[3]]);
        (
            u16::from_be_bytes([query[0], query[1]]),
            flags & 0x0100 != 0,
            ((flags >> 11) & 0x0f) as u8,
        )
    } else if query.len() >= 2 {
        (u16::from_be_bytes([query[0], query[1]]), false, 0)
    } else {
        (0, false, 0)
    };
    let header = Header {
        id,
        qr: true,
        opcode,
        rd,
        rcode,
        ..Header::default()
    };
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&header.id.to_be_bytes());
    out.extend_from_slice(&header.flags().to_be_bytes());
    out.extend_from_slice(&[0; 8]);
    out
}

/// Reply to `query` with the given rcode and no records, echoing the question.
pub fn error_response(query: &DnsMessage, rcode: u8) -> DnsMessage {
    DnsMessage {
        header: Header {
            id: query.header.id,
            qr: true,
            opcode: query.header.opcode,
            rd: query.header.rd,
            ra: true,
            cd: query.header.cd,
            rcode,
            ..Header::default()
        },
        question: query.question.clone(),
        answers: Vec::new(),
        authority: Vec::new(),
        additional: Vec::new(),
    }
}

/// Encodes `msg` for a UDP reply of at most `limit` bytes, falling back to an
/// empty TC=1 reply (client retries over TCP) when it does not fit.
pub fn encode_for_udp(msg: &DnsMessage, limit: usize) -> Result<Vec<u8>, WireError> {
    let full = msg.to_bytes()?;
    if full.len() <= limit {
        return Ok(full);
    }
    let mut truncated = msg.clone();
    truncated.header.tc = true;
    truncated.answers.clear();
    truncated.authority.clear();
    truncated.additional.clear();
    truncated.to_bytes()
}

/// Splits a presentation-form name into raw labels, resolving escapes.
pub fn name_to_labels(name: &str) -> Result<Vec<Vec<u8>>, WireError> {
    // a trailing "\." is an escaped dot inside the last label, not the root
    let name = match name.strip_suffix('.') {
        Some(rest) if rest.bytes().rev().take_while(|&b| b == b'\\').count() % 2 == 0 => rest,
        _ => name,
    };
    if name.is_empty() {
        return Ok(Vec::new());
    }
    let mut labels = Vec::new();
    let mut current = Vec::new();
    let bytes = name.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'.' => {
                if current.is_empty() {
                    return Err(WireError::EmptyLabel);
                }
                labels.push(std::mem::take(&mut current));
                i += 1;
            }
            b'\\' => {
                let rest = &bytes[i + 1..];
                if rest.len() >= 3 && rest[..3].iter().all(u8::is_ascii_digit) {
                    let value = u16::from(rest[0] - b'0') * 100
                        + u16::from(rest[1] - b'0') * 10
                        + u16::from(rest[2] - b'0');
                    current.push(u8::try_from(value).map_err(|_| WireError::BadEscape)?);
                    i += 4;
                } else if let Some(&c) = rest.first() {
                    current.push(c);
                    i += 2;
                } else {
                    return Err(WireError::BadEscape);
                }
            }
            c => {
                current.push(c);
                i += 1;
            }
        }
        if current.len() > MAX_LABEL_LEN {
            return Err(WireError::LabelTooLong);
        }
    }
    if current.is_empty() {
        return Err(WireError::EmptyLabel);
    }
    labels.push(current);
    let wire_len: usize = labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1;
    if wire_len > MAX_NAME_LEN {
        return Err(WireError::NameTooLong);
    }
    Ok(labels)
}

fn push_label_text(out: &mut String, label: &[u8]) {
    for &b in label {
        match b {
            b'.' | b'\\' => {
                out.push('\\');
                out.push(char::from(b));
            }
            0x21..=0x7e => out.push(char::from(b)),
            _ => {
                use fmt::Write;
                let _ = write!(out, "\\{b:03}");
            }
        }
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<(), WireError> {
    for label in name_to_labels(name)? {
        out.push(label.len() as u8);
        out.extend_from_slice(&label);
    }
    out.push(0);
    Ok(())
}

fn write_record(out: &mut Vec<u8>, record: &Record) -> Result<(), WireError> {
    write_name(out, &record.name)?;
    out.extend_from_slice(&record.rtype.to_be_bytes());
    out.extend_from_slice(&record.class.to_be_bytes());
    out.extend_from_slice(&record.ttl.to_be_bytes());
    let rdata = match &record.data {
        RData::A(addr) => addr.octets().to_vec(),
        RData::Aaaa(addr) => addr.octets().to_vec(),
        RData::Cname(target) => {
            let mut buf = Vec::new();
            write_name(&mut buf, target)?;
            buf
        }
        RData::Opaque(bytes) => bytes.clone(),
    };
    let len = u16::try_from(rdata.len()).map_err(|_| WireError::RdataTooLong)?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&rdata);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or(malformed(self.pos, "truncated"))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn name(&mut self) -> Result<String, WireError> {
        let (labels, next) = read_labels(self.buf, self.pos)?;
        self.pos = next;
        Ok(labels_to_text(&labels))
    }

    fn records(&mut self, count: u16) -> Result<Vec<Record>, WireError> {
        let mut records = Vec::with_capacity(usize::from(count).min(64));
        for _ in 0..count {
            records.push(self.record()?);
        }
        Ok(records)
    }

    fn record(&mut self) -> Result<Record, WireError> {
        let name = self.name()?;
        let rtype = self.u16()?;
        let class = self.u16()?;
        let ttl = self.u32()?;
        let rdlength = usize::from(self.u16()?);
        let start = self.pos;
        let raw = self.take(rdlength)?;
        let end = start + rdlength;
        let data = match rtype {
            TYPE_A => RData::A(Ipv4Addr::from(
                <[u8; 4]>::try_from(raw).map_err(|_| malformed(start, "A rdata must be 4 octets"))?,
            )),
            TYPE_AAAA => RData::Aaaa(Ipv6Addr::from(
                <[u8; 16]>::try_from(raw)
                    .map_err(|_| malformed(start, "AAAA rdata must be 16 octets"))?,
            )),
            TYPE_CNAME => {
                let (labels, next) = read_labels(self.buf, start)?;
                if next != end {
                    return Err(malformed(start, "CNAME rdata length mismatch"));
                }
                RData::Cname(labels_to_text(&labels))
            }
            _ => RData::Opaque(decompress_rdata(self.buf, rtype, start, end)?),
        };
        Ok(Record {
            name,
            rtype,
            class,
            ttl,
            data,
        })
    }
}

/// Rewrites rdata of name-bearing RFC 1035 types with uncompressed names.
fn decompress_rdata(buf: &[u8], rtype: u16, start: usize, end: usize) -> Result<Vec<u8>, WireError> {
    // (leading fixed octets, number of names, trailing fixed octets)
    let layout = match rtype {
        TYPE_NS | 3 | 4 | 7 | 8 | 9 | TYPE_PTR => (0, 1, 0),
        TYPE_SOA => (0, 2, 20),
        TYPE_MINFO => (0, 2, 0),
        TYPE_MX => (2, 1, 0),
        _ => return Ok(buf[start..end].to_vec()),
    };
    let (lead, names, trail) = layout;
    let mut out = Vec::with_capacity(end - start);
    let mut pos = start;
    if pos + lead > end {
        return Err(malformed(pos, "rdata too short"));
    }
    out.extend_from_slice(&buf[pos..pos + lead]);
    pos += lead;
    for _ in 0..names {
        let (labels, next) = read_labels(&buf[..end], pos)?;
        for label in &labels {
            out.push(label.len() as u8);
            out.extend_from_slice(label);
        }
        out.push(0);
        pos = next;
    }
    if pos + trail != end {
        return Err(malformed(pos, "rdata length mismatch"));
    }
    out.extend_from_slice(&buf[pos..end]);
    Ok(out)
}

/// Reads a possibly compressed name starting at `start`. Returns the labels
/// and the offset just past the name's in-place encoding.
///
/// Compression pointers must point strictly backwards from where they occur,
/// which bounds the walk and rejects loops.
fn read_labels(buf: &[u8], start: usize) -> Result<(Vec<Vec<u8>>, usize), WireError> {
    let mut labels = Vec::new();
    let mut pos = start;
    let mut resume = None;
    let mut wire_len = 1;
    loop {
        let len = *buf.get(pos).ok_or(malformed(pos, "truncated name"))?;
        match len & 0xc0 {
            0x00 => {
                if len == 0 {
                    pos += 1;
                    break;
                }
                let len = usize::from(len);
                let label = buf
                    .get(pos + 1..pos + 1 + len)
                    .ok_or(malformed(pos, "truncated label"))?;
                wire_len += len + 1;
                if wire_len > MAX_NAME_LEN {
                    return Err(malformed(pos, "name exceeds 255 octets"));
                }
                labels.push(label.to_vec());
                pos += 1 + len;
            }
            0xc0 => {
                let low = *buf.get(pos + 1).ok_or(malformed(pos, "truncated pointer"))?;
                let target = (usize::from(len & 0x3f) << 8) | usize::from(low);
                if target >= pos {
                    return Err(WireError::PointerLoop { offset: pos });
                }
                resume.get_or_insert(pos + 2);
                pos = target;
            }
            _ => return Err(malformed(pos, "reserved label type")),
        }
    }
    Ok((labels, resume.unwrap_or(pos)))
}

fn labels_to_text(labels: &[Vec<u8>]) -> String {
    let mut out = String::new();
    for (i, label) in labels.iter().enumerate() {
        if i > 0 {
            out.push('.');
        }
        push_label_text(&mut out, label);
    }
    out
}
