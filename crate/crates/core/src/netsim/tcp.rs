use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::frame::{read_frame, write_frame};
use super::{Context, Message, RequestChannel, Role, TransportError};

const TICK: Duration = Duration::from_millis(5);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

type Conn = Arc<Mutex<TcpStream>>;

struct Shared {
    role: Mutex<Box<dyn Role>>,
    /// Inbound connections as `conn:N`, outbound ones by the address dialled.
    conns: Mutex<HashMap<String, Conn>>,
    timers: Mutex<BinaryHeap<Reverse<(u64, u64, u64)>>>,
    timer_seq: AtomicU64,
    next_conn: AtomicU64,
    shutdown: AtomicBool,
    /// Reader threads with a handle on their socket, for shutdown.
    threads: Mutex<Vec<(JoinHandle<()>, TcpStream)>>,
}

struct TcpCtx {
    now_ms: u64,
    sends: Vec<(String, Message)>,
    timers: Vec<(u64, u64)>,
}

impl Context for TcpCtx {
    fn now_ms(&self) -> u64 {
        self.now_ms
    }

    fn send(&mut self, to: &str, msg: Message) {
        self.sends.push((to.to_string(), msg));
    }

    fn set_timer(&mut self, delay_ms: u64, timer_id: u64) {
        self.timers.push((delay_ms, timer_id));
    }
}

impl Shared {
    fn run_handler(self: &Arc<Self>, f: impl FnOnce(&mut dyn Role, &mut TcpCtx)) {
        let mut ctx = TcpCtx {
            now_ms: wall_ms(),
            sends: Vec::new(),
            timers: Vec::new(),
        };
        {
            let mut role = lock(&self.role);
            f(role.as_mut(), &mut ctx);
        }
        for (delay, id) in ctx.timers {
            let seq = self.timer_seq.fetch_add(1, Ordering::Relaxed);
            lock(&self.timers).push(Reverse((ctx.now_ms + delay, seq, id)));
        }
        for (to, msg) in ctx.sends {
            if let Err(e) = self.send(&to, &msg) {
                log::warn!("send {} to {to} failed: {e}", msg.msg_type().name());
            }
        }
    }

    fn send(self: &Arc<Self>, to: &str, msg: &Message) -> io::Result<()> {
        let frame = msg
            .to_frame()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        // Bind first: a guard in the match scrutinee would live through dial.
        let existing = lock(&self.conns).get(to).cloned();
        let conn = match existing {
            Some(c) => c,
            None => self.dial(to)?,
        };
        let result = write_frame(&mut *lock(&conn), &frame);
        if result.is_err() {
            lock(&self.conns).remove(to);
        }
        result
    }

    fn dial(self: &Arc<Self>, to: &str) -> io::Result<Conn> {
        if to.starts_with("conn:") {
            return Err(io::Error::new(
                io::ErrorKind::NotConnected,
                format!("{to} has disconnected"),
            ));
        }
        let stream = TcpStream::connect_timeout(&resolve(to)?, CONNECT_TIMEOUT)?;
        stream.set_nodelay(true).ok();
        let conn = self.register(to.to_string(), stream)?;
        Ok(conn)
    }

    fn register(self: &Arc<Self>, name: String, stream: TcpStream) -> io::Result<Conn> {
        let reader = stream.try_clone()?;
        let closer = stream.try_clone()?;
        let conn = Arc::new(Mutex::new(stream));
        lock(&self.conns).insert(name.clone(), conn.clone());
        let shared = self.clone();
        let handle = thread::spawn(move || shared.read_loop(name, reader));
        lock(&self.threads).push((handle, closer));
        Ok(conn)
    }

    fn read_loop(self: Arc<Self>, name: String, mut reader: TcpStream) {
        loop {
            match read_frame(&mut reader) {
                Ok(Some((raw_type, payload))) => match Message::from_payload(raw_type, &payload) {
                    Ok(msg) => self.run_handler(|role, ctx| role.on_message(ctx, &name, msg)),
                    Err(e) => log::warn!("dropping frame from {name}: {e}"),
                },
                Ok(None) => break,
                Err(e) => {
                    if !self.shutdown.load(Ordering::Relaxed) {
                        log::debug!("connection {name} closed: {e}");
                    }
                    break;
                }
            }
        }
        lock(&self.conns).remove(&name);
    }

    fn fire_due_timers(self: &Arc<Self>) {
        let now = wall_ms();
        loop {
            let due = {
                let mut timers = lock(&self.timers);
                match timers.peek() {
                    Some(Reverse((t, _, _))) if *t <= now => timers.pop().map(|r| r.0 .2),
                    _ => None,
                }
            };
            match due {
                Some(id) => self.run_handler(|role, ctx| role.on_timer(ctx, id)),
                None => break,
            }
        }
    }
}

/// A role served over TCP.
pub struct TcpNode;

impl TcpNode {
    pub fn spawn(listen: &str, role: Box<dyn Role>) -> io::Result<TcpNodeHandle> {
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let shared = Arc::new(Shared {
            role: Mutex::new(role),
            conns: Mutex::new(HashMap::new()),
            timers: Mutex::new(BinaryHeap::new()),
            timer_seq: AtomicU64::new(0),
            next_conn: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
        });
        let s = shared.clone();
        let acceptor = thread::spawn(move || {
            while !s.shutdown.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        stream.set_nonblocking(false).ok();
                        stream.set_nodelay(true).ok();
                        let n = s.next_conn.fetch_add(1, Ordering::Relaxed);
                        if let Err(e) = s.register(format!("conn:{n}"), stream) {
                            log::warn!("accept failed: {e}");
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        s.fire_due_timers();
                        thread::sleep(TICK);
                    }
                    Err(e) => {
                        log::warn!("accept error: {e}");
                        thread::sleep(TICK);
                    }
                }
            }
        });
        Ok(TcpNodeHandle {
            addr: local,
            shared,
            acceptor: Some(acceptor),
        })
    }
}

pub struct TcpNodeHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpNodeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state_json(&self) -> Option<serde_json::Value> {
        lock(&self.shared.role).state_json()
    }

    pub fn with_role<T: 'static, R>(&self, f: impl FnOnce(&mut T) -> R) -> Option<R> {
        let mut role = lock(&self.shared.role);
        role.as_any_mut().downcast_mut::<T>().map(f)
    }

    /// Stop accepting, close every connection and wait for the threads.
    pub fn shutdown(mut self) -> Option<serde_json::Value> {
        self.stop();
        self.state_json()
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            a.join().ok();
        }
        // A handler may dial while we wait, so drain until nothing is left.
        loop {
            let threads: Vec<_> = lock(&self.shared.threads).drain(..).collect();
            if threads.is_empty() {
                break;
            }
            for (_, sock) in &threads {
                sock.shutdown(Shutdown::Both).ok();
            }
            for (t, _) in threads {
                t.join().ok();
            }
        }
    }
}

impl Drop for TcpNodeHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Blocking request/response over TCP, one connection per server address.
pub struct TcpChannel {
    timeout: Duration,
    conns: HashMap<String, TcpStream>,
}

impl TcpChannel {
    pub fn new(timeout: Duration) -> Self {
        Self {
            timeout,
            conns: HashMap::new(),
        }
    }

    fn conn(&mut self, to: &str) -> Result<&mut TcpStream, TransportError> {
        if !self.conns.contains_key(to) {
            let unreachable = |e: io::Error| TransportError::Unreachable {
                to: to.to_string(),
                detail: e.to_string(),
            };
            let stream =
                TcpStream::connect_timeout(&resolve(to).map_err(unreachable)?, CONNECT_TIMEOUT)
                    .map_err(unreachable)?;
            stream.set_nodelay(true).ok();
            self.conns.insert(to.to_string(), stream);
        }
        Ok(self.conns.get_mut(to).expect("inserted above"))
    }
}

impl RequestChannel for TcpChannel {
    fn request(&mut self, to: &str, msg: Message) -> Result<Message, TransportError> {
        let frame = msg
            .to_frame()
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let timeout = self.timeout;
        let result = (|| {
            let stream = self.conn(to)?;
            let io_err = |e: io::Error| TransportError::Unreachable {
                to: to.to_string(),
                detail: e.to_string(),
            };
            write_frame(stream, &frame).map_err(io_err)?;
            stream.set_read_timeout(Some(timeout)).map_err(io_err)?;
            loop {
                match read_frame(stream) {
                    Ok(Some((raw_type, payload))) => {
                        match Message::from_payload(raw_type, &payload) {
                            Ok(reply) => return Ok(reply),
                            Err(e) => log::warn!("skipping frame from {to}: {e}"),
                        }
                    }
                    Ok(None) => {
                        return Err(TransportError::Unreachable {
                            to: to.to_string(),
                            detail: "connection closed".into(),
                        })
                    }
                    Err(e)
                        if matches!(
                            e.kind(),
                            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                        ) =>
                    {
                        return Err(TransportError::Timeout {
                            to: to.to_string(),
                            waited_ms: timeout.as_millis() as u64,
                        })
                    }
                    Err(e) => return Err(io_err(e)),
                }
            }
        })();
        if result.is_err() {
            self.conns.remove(to);
        }
        result
    }
}
