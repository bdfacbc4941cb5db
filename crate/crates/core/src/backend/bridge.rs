//! Client (and a small reference server loop) for the bridge protocol.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{self, Frame, Hello, PROTOCOL_VERSION};
use super::{Backend, BackendError, BackendFactory, BackendRequest, BackendResponse};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// What the server announced during the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerInfo {
    pub version: u32,
    /// `(h, w)`
    pub latent: Option<(usize, usize)>,
    pub capabilities: Vec<String>,
}

impl ServerInfo {
    fn hello(&self) -> Frame {
        Frame::Hello(Hello {
            version: self.version,
            latent: self.latent.map(|(h, w)| [h, w]),
            capabilities: Some(self.capabilities.clone()),
        })
    }
}

/// One connection; one request in flight at a time.
///
/// A timeout or a malformed frame leaves the stream in an unknown position,
/// so the client refuses further requests after either.
pub struct BridgeClient {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    info: ServerInfo,
    broken: bool,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("info", &self.info)
            .field("broken", &self.broken)
            .finish_non_exhaustive()
    }
}

impl BridgeClient {
    /// Performs the handshake over an arbitrary stream pair.
    pub fn handshake(
        mut reader: Box<dyn BufRead + Send>,
        mut writer: Box<dyn Write + Send>,
    ) -> Result<Self, BackendError> {
        let hello = Frame::Hello(Hello {
            version: PROTOCOL_VERSION,
            latent: None,
            capabilities: None,
        });
        wire::write_frame(&mut writer, &hello)?;
        let info = match wire::read_frame(&mut reader)? {
            Some(Frame::Hello(h)) => {
                if h.version != PROTOCOL_VERSION {
                    return Err(BackendError::InvariantViolation(format!(
                        "server speaks protocol {}, expected {PROTOCOL_VERSION}",
                        h.version
                    )));
                }
                ServerInfo {
                    version: h.version,
                    latent: h.latent.map(|[a, b]| (a, b)),
                    capabilities: h.capabilities.unwrap_or_default(),
                }
            }
            Some(Frame::Error { message }) => return Err(BackendError::Remote(message)),
            Some(other) => {
                return Err(BackendError::MalformedFrame(format!(
                    "expected hello, got {other:?}"
                )))
            }
            None => return Err(BackendError::MalformedFrame("server closed before hello".into())),
        };
        Ok(BridgeClient {
            reader,
            writer,
            info,
            broken: false,
        })
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, BackendError> {
        let addrs = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::Spec(format!("{addr}: {e}")))?;
        let mut last = None;
        for sa in addrs {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout)).map_err(BackendError::Transport)?;
                    stream.set_write_timeout(Some(timeout)).map_err(BackendError::Transport)?;
                    stream.set_nodelay(true).map_err(BackendError::Transport)?;
                    let reader = BufReader::new(stream.try_clone().map_err(BackendError::Transport)?);
                    return Self::handshake(Box::new(reader), Box::new(stream));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.map(wire::io_error).unwrap_or_else(|| {
            BackendError::Spec(format!("{addr} resolved to no addresses"))
        }))
    }

    /// Frames over this process's own stdin and stdout.
    ///
    /// No timeout applies here; stdin has no portable read deadline.
    pub fn stdio() -> Result<Self, BackendError> {
        Self::handshake(
            Box::new(BufReader::new(io::stdin())),
            Box::new(io::stdout()),
        )
    }

    pub fn info(&self) -> &ServerInfo {
        &self.info
    }

    fn exchange(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        wire::write_frame(&mut self.writer, &wire::request_frame(request))?;
        match wire::read_frame(&mut self.reader)? {
            Some(Frame::Result(r)) => {
                let response = wire::response_from_frame(&r)?;
                response.validate(request)?;
                Ok(response)
            }
            Some(Frame::Error { message }) => Err(BackendError::Remote(message)),
            Some(other) => Err(BackendError::MalformedFrame(format!(
                "expected result, got {}",
                frame_kind(&other)
            ))),
            None => Err(BackendError::MalformedFrame("server closed the stream".into())),
        }
    }
}

fn frame_kind(frame: &Frame) -> &'static str {
    match frame {
        Frame::Hello(_) => "hello",
        Frame::Forward(_) => "forward",
        Frame::Result(_) => "result",
        Frame::Error { .. } => "error",
    }
}

impl Backend for BridgeClient {
    fn latent_grid(&mut self, _image: &str) -> Result<(usize, usize), BackendError> {
        self.info.latent.ok_or_else(|| {
            BackendError::InvariantViolation("server did not advertise a latent grid".into())
        })
    }

    fn forward(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        if self.broken {
            return Err(BackendError::Transport(io::Error::new(
                io::ErrorKind::BrokenPipe,
                "connection abandoned after an earlier protocol failure",
            )));
        }
        let out = self.exchange(request);
        if matches!(
            out,
            Err(BackendError::Timeout | BackendError::MalformedFrame(_) | BackendError::Transport(_))
        ) {
            self.broken = true;
        }
        out
    }
}

enum Target {
    Tcp(String),
    Stdio(Mutex<bool>),
}

/// Opens bridge connections for pipeline workers.
pub struct BridgeFactory {
    target: Target,
    timeout: Duration,
}

impl BridgeFactory {
    pub fn tcp(addr: impl Into<String>, timeout: Duration) -> Self {
        BridgeFactory {
            target: Target::Tcp(addr.into()),
            timeout,
        }
    }

    pub fn stdio() -> Self {
        BridgeFactory {
            target: Target::Stdio(Mutex::new(false)),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl BackendFactory for BridgeFactory {
    fn connect(&self) -> Result<Box<dyn Backend + Send>, BackendError> {
        match &self.target {
            Target::Tcp(addr) => Ok(Box::new(BridgeClient::connect_tcp(addr, self.timeout)?)),
            Target::Stdio(used) => {
                let mut used = used.lock().unwrap_or_else(|p| p.into_inner());
                if *used {
                    return Err(BackendError::Spec("bridge:stdio allows a single connection".into()));
                }
                *used = true;
                Ok(Box::new(BridgeClient::stdio()?))
            }
        }
    }

    fn max_connections(&self) -> Option<usize> {
        match self.target {
            Target::Tcp(_) => None,
            Target::Stdio(_) => Some(1),
        }
    }
}

/// Serves `backend` over one stream until the client hangs up.
///
/// Bad requests are answered with error frames; the loop only stops on end
/// of stream or a transport failure.
pub fn serve<R: BufRead, W: Write>(
    backend: &mut dyn Backend,
    info: &ServerInfo,
    mut reader: R,
    mut writer: W,
) -> Result<(), BackendError> {
    loop {
        let frame = match wire::read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(BackendError::MalformedFrame(m)) => {
                wire::write_frame(&mut writer, &Frame::Error { message: m })?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let reply = match frame {
            Frame::Hello(_) => info.hello(),
            Frame::Forward(f) => match wire::request_from_frame(&f).and_then(|r| backend.forward(&r)) {
                Ok(resp) => wire::result_frame(&resp),
                Err(e) => Frame::Error { message: e.to_string() },
            },
            other => Frame::Error {
                message: format!("unexpected {} frame", frame_kind(&other)),
            },
        };
        wire::write_frame(&mut writer, &reply)?;
    }
}
