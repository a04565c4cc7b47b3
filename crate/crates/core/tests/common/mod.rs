#![allow(dead_code)]

use std::net::{IpAddr, SocketAddr};
use std::path::Path;
use std::time::Duration;

use kresolver::attribution::AttributionPolicy;
use kresolver::config::{FailoverMode, HttpMethod, ProxyConfig, RecursorSpec, ResolverPool, Salt};
use kresolver::doh::DohClient;
use kresolver::mock::{MockAuthority, MockBehavior, MockUpstream};
use kresolver::server::Server;
use kresolver::wire::{self, DnsMessage};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpStream, UdpSocket};

pub mod wire_gen;

pub async fn start_mocks(n: usize, behavior: MockBehavior) -> Vec<MockUpstream> {
    let mut mocks = Vec::with_capacity(n);
    for _ in 0..n {
        mocks.push(MockUpstream::start(behavior.clone()).await.expect("mock upstream"));
    }
    mocks
}

pub fn pool_for(mocks: &[MockUpstream], method: HttpMethod) -> ResolverPool {
    ResolverPool::new(
        mocks
            .iter()
            .enumerate()
            .map(|(i, m)| RecursorSpec {
                method,
                ..RecursorSpec::new(&format!("mock{i}"), &m.url())
            })
            .collect(),
    )
    .unwrap()
}

pub fn mock_client() -> DohClient {
    DohClient::new(&[MockAuthority::shared().ca_der()]).unwrap()
}

pub fn proxy_config(pool: ResolverPool, log_dir: &Path, salt: Salt) -> ProxyConfig {
    ProxyConfig {
        listen_address: "127.0.0.1:0".parse().unwrap(),
        control_address: "127.0.0.1:0".parse().unwrap(),
        pool,
        salt,
        attribution: AttributionPolicy::default(),
        cache_max_ttl_s: 300,
        cache_capacity: 10_000,
        query_timeout_ms: 3000,
        failover_mode: FailoverMode::Strict,
        log_path: log_dir.join("queries.csv"),
    }
}

pub async fn start_server(config: ProxyConfig) -> Server {
    Server::start(config, mock_client()).await.expect("server start")
}

pub async fn udp_query(server: SocketAddr, source: IpAddr, name: &str, qtype: u16, id: u16) -> DnsMessage {
    let socket = UdpSocket::bind(SocketAddr::new(source, 0)).await.unwrap();
    let query = wire::encode_query(name, qtype, id, true).unwrap();
    socket.send_to(&query, server).await.unwrap();
    let mut buf = vec![0u8; 4096];
    let (n, _) = tokio::time::timeout(Duration::from_secs(10), socket.recv_from(&mut buf))
        .await
        .expect("udp reply in time")
        .unwrap();
    wire::decode_message(&buf[..n]).unwrap()
}

pub async fn tcp_exchange(stream: &mut TcpStream, query: &[u8]) -> Vec<u8> {
    let mut framed = (query.len() as u16).to_be_bytes().to_vec();
    framed.extend_from_slice(query);
    stream.write_all(&framed).await.unwrap();
    let mut len = [0u8; 2];
    stream.read_exact(&mut len).await.unwrap();
    let mut reply = vec![0u8; usize::from(u16::from_be_bytes(len))];
    stream.read_exact(&mut reply).await.unwrap();
    reply
}

pub async fn control(addr: SocketAddr, line: &str) -> String {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    stream.write_all(format!("{line}\n").as_bytes()).await.unwrap();
    let mut reply = Vec::new();
    let mut byte = [0u8; 1];
    while stream.read_exact(&mut byte).await.is_ok() {
        reply.push(byte[0]);
        if byte[0] == b'\n' {
            break;
        }
    }
    String::from_utf8(reply).unwrap()
}
