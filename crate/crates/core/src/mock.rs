//! Loopback DoH upstream for tests and offline benchmarks.
//!
//! Every mock serves HTTPS with a certificate for `localhost` signed by a
//! process-wide self-signed authority, so clients keep full certificate
//! validation by trusting [`MockAuthority::ca_der`]. Each mock counts TCP
//! accepts and HTTP requests and remembers the query names it saw.

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio_rustls::rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use tokio_rustls::rustls::ServerConfig;
use tokio_rustls::TlsAcceptor;

use crate::wire::{self, DnsMessage, RData, Record};

/// Self-signed CA plus a leaf certificate for `localhost` / 127.0.0.1.
pub struct MockAuthority {
    ca_der: Vec<u8>,
    tls: Arc<ServerConfig>,
}

impl MockAuthority {
    pub fn shared() -> &'static MockAuthority {
        static AUTHORITY: OnceLock<MockAuthority> = OnceLock::new();
        AUTHORITY.get_or_init(|| MockAuthority::generate().expect("mock certificate generation"))
    }

    fn generate() -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        use rcgen::{BasicConstraints, CertificateParams, IsCa, KeyPair};

        let ca_key = KeyPair::generate()?;
        let mut ca_params = CertificateParams::new(Vec::<String>::new())?;
        ca_params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        ca_params
            .distinguished_name
            .push(rcgen::DnType::CommonName, "mock doh authority");
        let ca = ca_params.self_signed(&ca_key)?;

        let leaf_key = KeyPair::generate()?;
        let leaf_params = CertificateParams::new(vec!["localhost".to_string(), "127.0.0.1".to_string()])?;
        let leaf = leaf_params.signed_by(&leaf_key, &ca, &ca_key)?;

        let chain = vec![
            CertificateDer::from(leaf.der().to_vec()),
            CertificateDer::from(ca.der().to_vec()),
        ];
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(leaf_key.serialize_der()));
        let mut tls = ServerConfig::builder()
            .with_no_client_auth()
            .with_single_cert(chain, key)?;
        tls.alpn_protocols = vec![b"http/1.1".to_vec()];
        Ok(MockAuthority {
            ca_der: ca.der().to_vec(),
            tls: Arc::new(tls),
        })
    }

    /// DER of the authority certificate, for [`crate::doh::DohClient::new`].
    pub fn ca_der(&self) -> Vec<u8> {
        self.ca_der.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockMode {
    /// Answer every A query with one address derived from the name.
    Answer { ttl: u32 },
    /// Reply NXDOMAIN.
    NxDomain,
    HttpStatus(u16),
    WrongContentType,
    /// Accept the request and never reply.
    Silent,
    /// 200 with a body that is not a DNS message.
    Garbage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockBehavior {
    pub latency: Duration,
    pub mode: MockMode,
}

impl Default for MockBehavior {
    fn default() -> Self {
        MockBehavior {
            latency: Duration::ZERO,
            mode: MockMode::Answer { ttl: 300 },
        }
    }
}

#[derive(Default)]
struct MockState {
    accepts: AtomicUsize,
    requests: AtomicUsize,
    qnames: Mutex<Vec<String>>,
    behavior: Mutex<MockBehavior>,
}

pub struct MockUpstream {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: watch::Sender<bool>,
}

impl MockUpstream {
    pub async fn start(behavior: MockBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            behavior: Mutex::new(behavior),
            ..MockState::default()
        });
        let (shutdown, mut stop) = watch::channel(false);
        let acceptor = TlsAcceptor::from(MockAuthority::shared().tls.clone());
        let accept_state = state.clone();
        tokio::spawn(async move {
            loop {
                let stream = tokio::select! {
                    _ = stop.changed() => break,
                    accepted = listener.accept() => match accepted {
                        Ok((stream, _)) => stream,
                        Err(_) => continue,
                    },
                };
                accept_state.accepts.fetch_add(1, Ordering::SeqCst);
                let acceptor = acceptor.clone();
                let conn_state = accept_state.clone();
                let mut conn_stop = stop.clone();
                tokio::spawn(async move {
                    let Ok(tls) = acceptor.accept(stream).await else {
                        return;
                    };
                    let service = service_fn(move |req| handle(conn_state.clone(), req));
                    let conn = hyper::server::conn::http1::Builder::new()
                        .serve_connection(TokioIo::new(tls), service);
                    tokio::select! {
                        _ = conn => {}
                        _ = conn_stop.changed() => {}
                    }
                });
            }
        });
        Ok(MockUpstream {
            addr,
            state,
            shutdown,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `https://localhost:<port>/dns-query`
    pub fn url(&self) -> String {
        format!("https://localhost:{}/dns-query", self.addr.port())
    }

    pub fn accepts(&self) -> usize {
        self.state.accepts.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn qnames(&self) -> Vec<String> {
        self.state.qnames.lock().clone()
    }

    pub fn set_behavior(&self, behavior: MockBehavior) {
        *self.state.behavior.lock() = behavior;
    }

    pub fn stop(&self) {
        let _ = self.shutdown.send(true);
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        self.stop();
    }
}

/// The address a mock answers for `name`: 198.18.x.y from a hash of the name.
pub fn mock_address(name: &str) -> Ipv4Addr {
    let digest = Sha256::digest(name.to_ascii_lowercase().as_bytes());
    Ipv4Addr::new(198, 18, digest[0], digest[1])
}

type MockResponse = Response<Full<Bytes>>;

async fn handle(state: Arc<MockState>, req: Request<Incoming>) -> Result<MockResponse, hyper::Error> {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let query_bytes = match *req.method() {
        Method::GET => req
            .uri()
            .query()
            .and_then(|q| {
                url::form_urlencoded::parse(q.as_bytes())
                    .find(|(k, _)| k == "dns")
                    .map(|(_, v)| v.into_owned())
            })
            .and_then(|v| URL_SAFE_NO_PAD.decode(v).ok()),
        Method::POST => Some(req.into_body().collect().await?.to_bytes().to_vec()),
        _ => None,
    };
    let behavior = state.behavior.lock().clone();
    if !behavior.latency.is_zero() {
        tokio::time::sleep(behavior.latency).await;
    }
    let Some(query) = query_bytes.and_then(|b| wire::decode_message(&b).ok()) else {
        return Ok(plain(StatusCode::BAD_REQUEST, "text/plain", b"bad query".to_vec()));
    };
    state.qnames.lock().push(query.question.name.to_ascii_lowercase());

    Ok(match behavior.mode {
        MockMode::Answer { ttl } => dns_response(answer(&query, ttl, wire::RCODE_NOERROR)),
        MockMode::NxDomain => dns_response(answer(&query, 0, wire::RCODE_NXDOMAIN)),
        MockMode::HttpStatus(code) => plain(
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            "text/plain",
            b"mock failure".to_vec(),
        ),
        MockMode::WrongContentType => plain(StatusCode::OK, "text/html", b"<html></html>".to_vec()),
        MockMode::Garbage => plain(StatusCode::OK, wire_media(), vec![1, 2, 3]),
        MockMode::Silent => {
            std::future::pending::<()>().await;
            unreachable!()
        }
    })
}

fn wire_media() -> &'static str {
    crate::doh::DNS_MESSAGE
}

fn answer(query: &DnsMessage, ttl: u32, rcode: u8) -> DnsMessage {
    let mut response = wire::error_response(query, rcode);
    response.header.aa = false;
    if rcode == wire::RCODE_NOERROR && query.question.qtype == wire::TYPE_A {
        response.answers.push(Record {
            name: query.question.name.clone(),
            rtype: wire::TYPE_A,
            class: wire::CLASS_IN,
            ttl,
            data: RData::A(mock_address(&query.question.name)),
        });
    }
    response
}

fn dns_response(msg: DnsMessage) -> MockResponse {
    plain(StatusCode::OK, wire_media(), msg.to_bytes().unwrap_or_default())
}

fn plain(status: StatusCode, content_type: &str, body: Vec<u8>) -> MockResponse {
    Response::builder()
        .status(status)
        .header("content-type", content_type)
        .body(Full::new(Bytes::from(body)))
        .expect("static response parts")
}
