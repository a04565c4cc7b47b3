//! Append-only CSV log with one record per handled query.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub const HEADER: [&str; 9] = [
    "wall_time",
    "client_id",
    "qname",
    "assignment_domain",
    "recursor_index",
    "rtt_ms",
    "cache_hit",
    "outcome",
    "failover_from",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Servfail,
    Timeout,
    Formerr,
    Notimp,
}

/// Where an answer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Via {
    Recursor(usize),
    Cache,
    /// No resolution attempted (malformed or unsupported query).
    None,
}

impl fmt::Display for Via {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Via::Recursor(i) => write!(f, "{i}"),
            Via::Cache => f.write_str("cache"),
            Via::None => f.write_str("-"),
        }
    }
}

impl FromStr for Via {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cache" => Ok(Via::Cache),
            "-" => Ok(Via::None),
            n => n.parse().map(Via::Recursor).map_err(|_| format!("bad recursor_index {n:?}")),
        }
    }
}

impl Serialize for Via {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Via {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogRecord {
    pub wall_time: String,
    pub client_id: String,
    pub qname: String,
    pub assignment_domain: String,
    pub recursor_index: Via,
    pub rtt_ms: f64,
    pub cache_hit: bool,
    pub outcome: Outcome,
    /// Assigned index when relaxed failover sent the query elsewhere.
    pub failover_from: Option<usize>,
}

impl QueryLogRecord {
    pub fn new(client: IpAddr, qname: &str, assignment_domain: &str) -> Self {
        QueryLogRecord {
            wall_time: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            client_id: client.to_string(),
            qname: qname.to_string(),
            assignment_domain: assignment_domain.to_string(),
            recursor_index: Via::None,
            rtt_ms: 0.0,
            cache_hit: false,
            outcome: Outcome::Ok,
            failover_from: None,
        }
    }
}

/// Serialized appender. Every record is formatted in full before it reaches
/// the buffered file writer, so the file only ever holds complete lines.
#[derive(Debug)]
pub struct QueryLog {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl QueryLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            out.write_all(&format_row(&HEADER)?)?;
            out.flush()?;
        }
        Ok(QueryLog {
            path: path.to_path_buf(),
            out: Mutex::new(out),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &QueryLogRecord) -> io::Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        writer.serialize(record).map_err(io::Error::other)?;
        let line = writer.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        self.out.lock().write_all(&line)
    }

    pub fn flush(&self) -> io::Result<()> {
        self.out.lock().flush()
    }
}

fn format_row(fields: &[&str]) -> io::Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(fields).map_err(io::Error::other)?;
    writer.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

/// Reads a log file back into records.
pub fn read_log(path: &Path) -> io::Result<Vec<QueryLogRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(io::Error::other)?;
    reader
        .deserialize()
        .map(|r| r.map_err(io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let log = QueryLog::open(&path).unwrap();
        let client: IpAddr = "127.0.0.1".parse().unwrap();
        let mut a = QueryLogRecord::new(client, "www.news.com", "news.com");
        a.recursor_index = Via::Recursor(4);
        a.rtt_ms = 12.5;
        let mut b = QueryLogRecord::new(client, "www.news.com", "news.com");
        b.recursor_index = Via::Cache;
        b.cache_hit = true;
        let mut c = QueryLogRecord::new(client, "x,y.com", "");
        c.outcome = Outcome::Servfail;
        c.failover_from = Some(2);
        for r in [&a, &b, &c] {
            log.append(r).unwrap();
        }
        log.flush().unwrap();
        drop(log);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("wall_time,client_id,qname,assignment_domain,recursor_index,rtt_ms,cache_hit,outcome,failover_from\n"));
        assert_eq!(read_log(&path).unwrap(), vec![a.clone(), b, c]);

        // reopening appends without a second header
        let log = QueryLog::open(&path).unwrap();
        log.append(&a).unwrap();
        log.flush().unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 4);
    }
}
