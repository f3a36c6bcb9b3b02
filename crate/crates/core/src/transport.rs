//! Mutual-TLS transport: certificate tooling, CRC-checked length-prefixed
//! frames, and the `Channel` implementation the federation runs over.
//!
//! Both sides present certificates chaining to the federation root; the
//! server exposes the client certificate's common name as the peer
//! identity. Nothing on the application layer runs before the handshake
//! finishes, so an unauthorized peer never gets a frame processed.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName};
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, ClientConnection, RootCertStore, ServerConfig, ServerConnection, StreamOwned};

use crate::error::{Error, Result};
pub use crate::protocol::{decode_weights, encode_weights};
use crate::protocol::{Channel, Message, FRAME_OVERHEAD};

pub const FRAME_VERSION: u8 = 1;
/// Default payload ceiling: the full model is well under 1 MiB at paper
/// dimensions, so 64 MiB leaves room for much larger configurations.
pub const DEFAULT_MAX_FRAME: u32 = 64 * 1024 * 1024;

/// One wire record. The length prefix counts payload bytes only; the CRC32
/// covers the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub version: u8,
    pub kind: u8,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn wire_size(&self) -> u64 {
        FRAME_OVERHEAD + self.payload.len() as u64
    }
}

/// Serialize one frame; returns the wire byte count.
pub fn write_frame(w: &mut (impl Write + ?Sized), kind: u8, round: u32, payload: &[u8]) -> Result<u64> {
    if payload.len() > u32::MAX as usize {
        return Err(Error::Protocol("payload exceeds u32 length".into()));
    }
    let crc = crc32fast::hash(payload);
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(&[FRAME_VERSION, kind])?;
    w.write_all(&round.to_le_bytes())?;
    w.write_all(payload)?;
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(FRAME_OVERHEAD + payload.len() as u64)
}

/// Read and validate one frame. The declared length is checked against
/// `max_payload` before any payload buffer is allocated.
pub fn read_frame(r: &mut (impl Read + ?Sized), max_payload: u32) -> Result<Frame> {
    let mut header = [0u8; 10];
    r.read_exact(&mut header)?;
    let length = u32::from_le_bytes(header[..4].try_into().unwrap());
    let version = header[4];
    let kind = header[5];
    let round = u32::from_le_bytes(header[6..10].try_into().unwrap());
    if length > max_payload {
        return Err(Error::Protocol(format!(
            "frame declares {length} payload bytes, limit is {max_payload}"
        )));
    }
    if version != FRAME_VERSION {
        return Err(Error::Protocol(format!("unsupported version {version}")));
    }
    let mut payload = vec![0u8; length as usize];
    r.read_exact(&mut payload)?;
    let mut crc_bytes = [0u8; 4];
    r.read_exact(&mut crc_bytes)?;
    let crc = u32::from_le_bytes(crc_bytes);
    if crc != crc32fast::hash(&payload) {
        return Err(Error::Protocol("frame CRC mismatch".into()));
    }
    Ok(Frame {
        version,
        kind,
        round,
        payload,
    })
}

/// Certificate material locating one peer's identity and the shared root.
#[derive(Clone, Debug)]
pub struct TrustConfig {
    pub root_cert: PathBuf,
    pub cert: PathBuf,
    pub key: PathBuf,
}

fn load_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Auth(format!("cannot open certificate {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let certs: std::io::Result<Vec<_>> = rustls_pemfile::certs(&mut reader).collect();
    let certs = certs.map_err(|e| Error::Auth(format!("bad PEM in {}: {e}", path.display())))?;
    if certs.is_empty() {
        return Err(Error::Auth(format!(
            "no certificates found in {}",
            path.display()
        )));
    }
    Ok(certs)
}

fn load_key(path: &Path) -> Result<PrivateKeyDer<'static>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Auth(format!("cannot open key {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    rustls_pemfile::private_key(&mut reader)
        .map_err(|e| Error::Auth(format!("bad key PEM in {}: {e}", path.display())))?
        .ok_or_else(|| Error::Auth(format!("no private key in {}", path.display())))
}

fn load_root_store(path: &Path) -> Result<RootCertStore> {
    let mut store = RootCertStore::empty();
    for cert in load_certs(path)? {
        store
            .add(cert)
            .map_err(|e| Error::Auth(format!("invalid root certificate: {e}")))?;
    }
    Ok(store)
}

/// Common name from the leaf certificate's subject.
fn peer_common_name(cert: &CertificateDer<'_>) -> Result<String> {
    let (_, parsed) = x509_parser::parse_x509_certificate(cert.as_ref())
        .map_err(|e| Error::Auth(format!("unparseable peer certificate: {e}")))?;
    let cn = parsed
        .subject()
        .iter_common_name()
        .next()
        .and_then(|cn| cn.as_str().ok())
        .map(str::to_string);
    cn.ok_or_else(|| Error::Auth("peer certificate has no common name".into()))
}

enum Session {
    Server(StreamOwned<ServerConnection, TcpStream>),
    Client(StreamOwned<ClientConnection, TcpStream>),
}

impl Session {
    fn io(&mut self) -> &mut dyn ReadWrite {
        match self {
            Session::Server(s) => s,
            Session::Client(s) => s,
        }
    }
}

trait ReadWrite: Read + Write {}
impl<T: Read + Write> ReadWrite for T {}

/// An authenticated mutual-TLS session carrying frames.
pub struct TlsChannel {
    session: Session,
    peer: String,
    max_payload: u32,
    sent: u64,
    received: u64,
}

impl TlsChannel {
    pub fn set_max_payload(&mut self, max: u32) {
        self.max_payload = max;
    }
}

impl Channel for TlsChannel {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let payload = msg.encode_payload()?;
        self.sent += write_frame(self.session.io(), msg.kind(), msg.round(), &payload)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = read_frame(self.session.io(), self.max_payload)?;
        self.received += frame.wire_size();
        Message::decode(frame.kind, frame.round, &frame.payload)
    }

    fn peer_name(&self) -> &str {
        &self.peer
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}

/// Listening side of the federation.
pub struct TlsServer {
    listener: TcpListener,
    config: Arc<ServerConfig>,
}

impl TlsServer {
    /// Bind and require client certificates chaining to the federation root.
    pub fn bind(addr: &str, trust: &TrustConfig) -> Result<TlsServer> {
        let roots = load_root_store(&trust.root_cert)?;
        let verifier = WebPkiClientVerifier::builder(Arc::new(roots))
            .build()
            .map_err(|e| Error::Auth(format!("cannot build client verifier: {e}")))?;
        let config = ServerConfig::builder()
            .with_client_cert_verifier(verifier)
            .with_single_cert(load_certs(&trust.cert)?, load_key(&trust.key)?)
            .map_err(|e| Error::Auth(format!("bad server identity: {e}")))?;
        let listener = TcpListener::bind(addr)?;
        Ok(TlsServer {
            listener,
            config: Arc::new(config),
        })
    }

    pub fn local_addr(&self) -> Result<std::net::SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept one TCP connection and complete the mutual handshake. A peer
    /// that cannot authenticate yields an `Auth` error and no channel; the
    /// listener itself stays usable for further accepts.
    pub fn accept(&self, io_timeout: Duration) -> Result<TlsChannel> {
        let (tcp, _) = self.listener.accept()?;
        tcp.set_read_timeout(Some(io_timeout))?;
        tcp.set_write_timeout(Some(io_timeout))?;
        tcp.set_nodelay(true)?;
        let mut conn = ServerConnection::new(self.config.clone())
            .map_err(|e| Error::Auth(format!("tls setup: {e}")))?;
        let mut tcp = tcp;
        while conn.is_handshaking() {
            conn.complete_io(&mut tcp)
                .map_err(|e| Error::Auth(format!("handshake failed: {e}")))?;
        }
        let peer = match conn.peer_certificates() {
            Some([leaf, ..]) => peer_common_name(leaf)?,
            _ => return Err(Error::Auth("client presented no certificate".into())),
        };
        Ok(TlsChannel {
            session: Session::Server(StreamOwned::new(conn, tcp)),
            peer,
            max_payload: DEFAULT_MAX_FRAME,
            sent: 0,
            received: 0,
        })
    }
}

/// Connect to the server, verifying its certificate against the federation
/// root and presenting our client identity.
pub fn connect(endpoint: &str, trust: &TrustConfig, io_timeout: Duration) -> Result<TlsChannel> {
    let host = endpoint
        .rsplit_once(':')
        .map(|(h, _)| h)
        .unwrap_or(endpoint)
        .trim_matches(['[', ']']);
    let server_name = ServerName::try_from(host.to_string())
        .map_err(|e| Error::Config(format!("bad server name '{host}': {e}")))?;
    let roots = load_root_store(&trust.root_cert)?;
    let config = ClientConfig::builder()
        .with_root_certificates(roots)
        .with_client_auth_cert(load_certs(&trust.cert)?, load_key(&trust.key)?)
        .map_err(|e| Error::Auth(format!("bad client identity: {e}")))?;
    let addr = endpoint
        .to_socket_addrs()
        .map_err(|e| Error::Config(format!("cannot resolve '{endpoint}': {e}")))?
        .next()
        .ok_or_else(|| Error::Config(format!("'{endpoint}' resolves to nothing")))?;
    let tcp = TcpStream::connect_timeout(&addr, io_timeout)?;
    tcp.set_read_timeout(Some(io_timeout))?;
    tcp.set_write_timeout(Some(io_timeout))?;
    tcp.set_nodelay(true)?;
    let mut conn = ClientConnection::new(Arc::new(config), server_name)
        .map_err(|e| Error::Auth(format!("tls setup: {e}")))?;
    let mut tcp = tcp;
    while conn.is_handshaking() {
        conn.complete_io(&mut tcp)
            .map_err(|e| Error::Auth(format!("handshake failed: {e}")))?;
    }
    let peer = match conn.peer_certificates() {
        Some([leaf, ..]) => peer_common_name(leaf)?,
        _ => "server".to_string(),
    };
    Ok(TlsChannel {
        session: Session::Client(StreamOwned::new(conn, tcp)),
        peer,
        max_payload: DEFAULT_MAX_FRAME,
        sent: 0,
        received: 0,
    })
}

// ---------------------------------------------------------------------------
// Certificate generation.

/// Files produced by `generate_federation_certs`.
#[derive(Clone, Debug)]
pub struct GeneratedCerts {
    pub root_cert: PathBuf,
    pub root_key: PathBuf,
    pub server: TrustConfig,
    pub clients: Vec<TrustConfig>,
}

/// Emit a federation root, a server identity valid for `hosts`, and one
/// identity per client (common names `client-0..`), all PEM-encoded.
pub fn generate_federation_certs(
    out_dir: &Path,
    hosts: &[&str],
    num_clients: usize,
) -> Result<GeneratedCerts> {
    use rcgen::{
        BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose,
        Issuer, IsCa, KeyPair, KeyUsagePurpose,
    };
    fs::create_dir_all(out_dir)?;
    let gen_err = |e: rcgen::Error| Error::Auth(format!("certificate generation failed: {e}"));

    let mut root_params = CertificateParams::default();
    let mut root_dn = DistinguishedName::new();
    root_dn.push(DnType::CommonName, "federation root");
    root_params.distinguished_name = root_dn;
    root_params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    root_params.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign];
    let root_key = KeyPair::generate().map_err(gen_err)?;
    let root_cert = root_params.self_signed(&root_key).map_err(gen_err)?;
    let root_cert_path = out_dir.join("root-ca.pem");
    let root_key_path = out_dir.join("root-ca.key");
    fs::write(&root_cert_path, root_cert.pem())?;
    fs::write(&root_key_path, root_key.serialize_pem())?;
    let issuer = Issuer::new(root_params, root_key);

    let issue = |name: &str, sans: &[&str], eku: ExtendedKeyUsagePurpose| -> Result<TrustConfig> {
        let mut params = CertificateParams::new(sans.iter().map(|s| s.to_string()).collect::<Vec<_>>())
            .map_err(gen_err)?;
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, name);
        params.distinguished_name = dn;
        params.extended_key_usages = vec![eku];
        let key = KeyPair::generate().map_err(gen_err)?;
        let cert = params.signed_by(&key, &issuer).map_err(gen_err)?;
        let cert_path = out_dir.join(format!("{name}.pem"));
        let key_path = out_dir.join(format!("{name}.key"));
        fs::write(&cert_path, cert.pem())?;
        fs::write(&key_path, key.serialize_pem())?;
        Ok(TrustConfig {
            root_cert: root_cert_path.clone(),
            cert: cert_path,
            key: key_path,
        })
    };

    let mut server_sans: Vec<&str> = vec!["localhost", "127.0.0.1"];
    for h in hosts {
        if !server_sans.contains(h) {
            server_sans.push(h);
        }
    }
    let server = issue("server", &server_sans, ExtendedKeyUsagePurpose::ServerAuth)?;
    let mut clients = Vec::with_capacity(num_clients);
    for i in 0..num_clients {
        clients.push(issue(
            &format!("client-{i}"),
            &[],
            ExtendedKeyUsagePurpose::ClientAuth,
        )?);
    }
    Ok(GeneratedCerts {
        root_cert: root_cert_path,
        root_key: root_key_path,
        server,
        clients,
    })
}
