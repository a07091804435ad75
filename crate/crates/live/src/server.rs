//! WebSocket transport. One thread owns the [`Session`]; each connection
//! thread only forwards parsed messages in and serialized frames out.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use tungstenite::{Message, WebSocket};

use crate::protocol::{ClientMsg, ServerMsg};
use crate::session::{RecordedRun, Session, SessionConfig};
use crate::{Error, Result};

const POLL: Duration = Duration::from_millis(1);
const READ_TIMEOUT: Duration = Duration::from_millis(2);

enum Inbound {
    Connect(Sender<ServerMsg>),
    Message(ClientMsg),
    Disconnect,
}

pub struct Server {
    listener: TcpListener,
    session: Session,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: SessionConfig) -> Result<Self> {
        let session = Session::new(1, config)?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener, session })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        let (in_tx, in_rx) = crossbeam_channel::unbounded();
        let (done_tx, done_rx) = crossbeam_channel::unbounded();
        let world = {
            let stop = stop.clone();
            let session = self.session;
            thread::spawn(move || world_loop(session, in_rx, done_tx, stop))
        };
        let accept = {
            let stop = stop.clone();
            let listener = self.listener;
            thread::spawn(move || accept_loop(listener, in_tx, stop))
        };
        ServerHandle {
            addr,
            stop,
            finished: done_rx,
            threads: vec![world, accept],
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    finished: Receiver<RecordedRun>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs that completed or aborted, in order.
    pub fn finished_runs(&self) -> &Receiver<RecordedRun> {
        &self.finished
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

fn world_loop(mut session: Session, inbound: Receiver<Inbound>, finished: Sender<RecordedRun>, stop: Arc<AtomicBool>) {
    let mut client: Option<Sender<ServerMsg>> = None;
    let mut ever_started = false;
    let send = |client: &Option<Sender<ServerMsg>>, msgs: Vec<ServerMsg>| {
        if let Some(tx) = client {
            for m in msgs {
                let _ = tx.send(m);
            }
        }
    };
    while !stop.load(Ordering::SeqCst) {
        let mut pending = Vec::new();
        match inbound.recv_timeout(POLL) {
            Ok(m) => pending.push(m),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        pending.extend(inbound.try_iter());
        for m in pending {
            let now = Instant::now();
            match m {
                Inbound::Connect(tx) => {
                    client = Some(tx);
                    let mut replies = Vec::new();
                    if !ever_started {
                        if let Err(e) = session.start(None, None, now) {
                            replies.push(ServerMsg::error(&e));
                        }
                        ever_started = true;
                    }
                    replies.push(session.hello());
                    send(&client, replies);
                }
                Inbound::Message(msg) => {
                    let replies = session.handle(msg, now);
                    send(&client, replies);
                }
                Inbound::Disconnect => client = None,
            }
        }
        if let Some(frame) = session.tick(Instant::now()) {
            send(&client, vec![frame]);
        }
        for run in session.take_finished() {
            let _ = finished.send(run);
        }
    }
}

fn accept_loop(listener: TcpListener, inbound: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let busy = Arc::new(AtomicBool::new(false));
    let mut clients = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("connection from {peer}");
                let (inbound, busy, stop) = (inbound.clone(), busy.clone(), stop.clone());
                clients.push(thread::spawn(move || {
                    if let Err(e) = serve_client(stream, &inbound, &busy, &stop) {
                        log::warn!("connection from {peer}: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    for c in clients {
        let _ = c.join();
    }
}

fn send_frame(ws: &mut WebSocket<TcpStream>, msg: &ServerMsg) -> Result<()> {
    ws.send(Message::text(msg.to_text())).map_err(ws_error)
}

fn ws_error(e: tungstenite::Error) -> Error {
    match e {
        tungstenite::Error::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(other)),
    }
}

fn serve_client(stream: TcpStream, inbound: &Sender<Inbound>, busy: &AtomicBool, stop: &AtomicBool) -> Result<()> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    if busy.swap(true, Ordering::SeqCst) {
        send_frame(&mut ws, &ServerMsg::error(&Error::Busy))?;
        let _ = ws.close(None);
        let _ = ws.flush();
        return Ok(());
    }
    let (tx, rx) = crossbeam_channel::unbounded();
    let result = (|| {
        inbound.send(Inbound::Connect(tx)).map_err(|_| Error::NoActiveRun)?;
        ws.get_ref().set_read_timeout(Some(READ_TIMEOUT))?;
        loop {
            if stop.load(Ordering::SeqCst) {
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ok(());
            }
            match ws.read() {
                Ok(Message::Text(text)) => match ClientMsg::parse(&text) {
                    Ok(msg) => {
                        let _ = inbound.send(Inbound::Message(msg));
                    }
                    Err(e) => send_frame(&mut ws, &ServerMsg::error(&e))?,
                },
                Ok(Message::Binary(_)) => send_frame(
                    &mut ws,
                    &ServerMsg::error(&Error::Malformed("binary frames are not accepted".into())),
                )?,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(ws_error(e)),
            }
            for msg in rx.try_iter() {
                send_frame(&mut ws, &msg)?;
            }
        }
    })();
    let _ = inbound.send(Inbound::Disconnect);
    busy.store(false, Ordering::SeqCst);
    result
}
