//! Network front end: DNS over UDP and TCP on one port, plus the local
//! control socket.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::config::ProxyConfig;
use crate::doh::DohClient;
use crate::proxy::Proxy;

const MAX_UDP_QUERY: usize = 4096;
const TCP_IDLE: Duration = Duration::from_secs(10);
const MAX_CONTROL_LINE: u64 = 1024;
/// How long shutdown waits for in-flight queries.
const DRAIN_GRACE: Duration = Duration::from_secs(10);

pub struct Server {
    proxy: Arc<Proxy>,
    dns_addr: SocketAddr,
    control_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    tasks: JoinSet<()>,
}

impl Server {
    /// Binds all sockets and starts serving. A listen port of 0 picks a free
    /// port shared by UDP and TCP.
    pub async fn start(config: ProxyConfig, client: DohClient) -> io::Result<Server> {
        let (udp, tcp) = bind_dns(config.listen_address).await?;
        let control = TcpListener::bind(config.control_address).await?;
        let dns_addr = udp.local_addr()?;
        let control_addr = control.local_addr()?;
        let proxy = Arc::new(Proxy::new(config, client)?);
        let (shutdown, stop) = watch::channel(false);

        let mut tasks = JoinSet::new();
        tasks.spawn(udp_loop(proxy.clone(), Arc::new(udp), stop.clone()));
        tasks.spawn(tcp_loop(proxy.clone(), tcp, stop.clone()));
        tasks.spawn(control_loop(proxy.clone(), control, stop.clone()));
        tasks.spawn(session_sweeper(proxy.clone(), stop));
        tracing::info!(%dns_addr, %control_addr, k = proxy.config().pool.k(), "serving");
        Ok(Server {
            proxy,
            dns_addr,
            control_addr,
            shutdown,
            tasks,
        })
    }

    pub fn dns_addr(&self) -> SocketAddr {
        self.dns_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn proxy(&self) -> &Arc<Proxy> {
        &self.proxy
    }

    /// Stops accepting, lets in-flight queries finish, then flushes the log.
    pub async fn shutdown(mut self) -> io::Result<()> {
        let _ = self.shutdown.send(true);
        let drain = async { while self.tasks.join_next().await.is_some() {} };
        if tokio::time::timeout(DRAIN_GRACE, drain).await.is_err() {
            tracing::warn!("in-flight queries abandoned at shutdown");
            self.tasks.abort_all();
        }
        self.proxy.log().flush()
    }

    /// Serves until `signal` completes, then shuts down.
    pub async fn run_until(self, signal: impl Future<Output = ()>) -> io::Result<()> {
        signal.await;
        tracing::info!("shutting down");
        self.shutdown().await
    }
}

/// Runs the proxy until Ctrl-C.
pub async fn serve(config: ProxyConfig) -> io::Result<()> {
    let client = DohClient::new(&[]).map_err(io::Error::other)?;
    let server = Server::start(config, client).await?;
    server
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn bind_dns(addr: SocketAddr) -> io::Result<(UdpSocket, TcpListener)> {
    let attempts = if addr.port() == 0 { 16 } else { 1 };
    let mut last_err = None;
    for _ in 0..attempts {
        let udp = UdpSocket::bind(addr).await?;
        let bound = udp.local_addr()?;
        match TcpListener::bind(bound).await {
            Ok(tcp) => return Ok((udp, tcp)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

async fn udp_loop(proxy: Arc<Proxy>, socket: Arc<UdpSocket>, mut stop: watch::Receiver<bool>) {
    let mut inflight = JoinSet::new();
    let mut buf = vec![0u8; MAX_UDP_QUERY];
    loop {
        let (len, peer) = tokio::select! {
            _ = stop.changed() => break,
            received = socket.recv_from(&mut buf) => match received {
                Ok(r) => r,
                Err(e) => {
                    tracing::debug!(error = %e, "udp receive failed");
                    continue;
                }
            },
        };
        let query = buf[..len].to_vec();
        let proxy = proxy.clone();
        let socket = socket.clone();
        inflight.spawn(async move {
            let reply = proxy.process(&query, peer.ip(), proxy.now()).await;
            if let Err(e) = socket.send_to(&reply.into_udp_bytes(), peer).await {
                tracing::debug!(%peer, error = %e, "udp send failed");
            }
        });
        while inflight.try_join_next().is_some() {}
    }
    while inflight.join_next().await.is_some() {}
}

async fn tcp_loop(proxy: Arc<Proxy>, listener: TcpListener, mut stop: watch::Receiver<bool>) {
    let mut conns = JoinSet::new();
    loop {
        let (stream, peer) = tokio::select! {
            _ = stop.changed() => break,
            accepted = listener.accept() => match accepted {
                Ok(a) => a,
                Err(e) => {
                    tracing::debug!(error = %e, "tcp accept failed");
                    continue;
                }
            },
        };
        conns.spawn(tcp_connection(proxy.clone(), stream, peer, stop.clone()));
        while conns.try_join_next().is_some() {}
    }
    while conns.join_next().await.is_some() {}
}

/// Length-prefixed queries, answered in order, until EOF, idle timeout or
/// shutdown. A query already read is always answered.
async fn tcp_connection(
    proxy: Arc<Proxy>,
    mut stream: TcpStream,
    peer: SocketAddr,
    mut stop: watch::Receiver<bool>,
) {
    loop {
        let mut len = [0u8; 2];
        let read = tokio::select! {
            _ = stop.changed() => return,
            r = tokio::time::timeout(TCP_IDLE, stream.read_exact(&mut len)) => r,
        };
        if !matches!(read, Ok(Ok(_))) {
            return;
        }
        let mut query = vec![0u8; usize::from(u16::from_be_bytes(len))];
        if !matches!(tokio::time::timeout(TCP_IDLE, stream.read_exact(&mut query)).await, Ok(Ok(_))) {
            return;
        }
        let mut reply = proxy.process(&query, peer.ip(), proxy.now()).await.into_bytes();
        reply.truncate(usize::from(u16::MAX));
        let mut framed = Vec::with_capacity(reply.len() + 2);
        framed.extend_from_slice(&(reply.len() as u16).to_be_bytes());
        framed.extend_from_slice(&reply);
        if stream.write_all(&framed).await.is_err() {
            return;
        }
    }
}

async fn control_loop(proxy: Arc<Proxy>, listener: TcpListener, mut stop: watch::Receiver<bool>) {
    loop {
        let stream = tokio::select! {
            _ = stop.changed() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => stream,
                Err(_) => continue,
            },
        };
        let proxy = proxy.clone();
        tokio::spawn(async move {
            if let Err(e) = control_connection(&proxy, stream).await {
                tracing::debug!(error = %e, "control connection closed");
            }
        });
    }
}

async fn control_connection(proxy: &Proxy, stream: TcpStream) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = (&mut reader).take(MAX_CONTROL_LINE).read_until(b'\n', &mut line).await?;
        if n == 0 {
            return Ok(());
        }
        if line.last() != Some(&b'\n') && n as u64 == MAX_CONTROL_LINE {
            write.write_all(b"ERR line too long\n").await?;
            return Ok(());
        }
        let reply = match std::str::from_utf8(&line) {
            Ok(text) => proxy.control(text.trim_end_matches(['\r', '\n']), proxy.now()),
            Err(_) => "ERR not utf-8\n".to_string(),
        };
        write.write_all(reply.as_bytes()).await?;
    }
}

async fn session_sweeper(proxy: Arc<Proxy>, mut stop: watch::Receiver<bool>) {
    let policy = proxy.config().attribution;
    let period = Duration::from_millis(policy.w_max_ms.max(1000));
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            _ = tokio::time::sleep(period) => proxy.sessions().expire_sessions(proxy.now(), &policy),
        }
    }
}
