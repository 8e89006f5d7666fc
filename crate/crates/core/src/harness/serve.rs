//! Line-delimited JSON evaluation service.
//!
//! A client opens a session with `{"act":"START","id":i,"system":s,"k":k}`,
//! then alternates `{"act":"READ"}` and `{"act":"WRITE","token":t}`. Text
//! sessions reveal one source token per READ (`{"token":..}`) and finally
//! `{"eos":true}`; speech sessions reveal one audio block per READ
//! (`{"block_ms":..,"words":[..]}`). Writing `</s>` ends the session, which
//! is then scored on the server from the observed actions. `SCORE` returns
//! the corpus-level record for a `(system, k)` pair over its finished
//! sessions, `SHUTDOWN` stops the server.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::Deserialize;
use serde_json::{json, Value};

use crate::cascade::{stream_duration_ms, TimedWord};
use crate::data::{Vocabulary, EOS};
use crate::metrics::{aggregate, score_sentence, ScoredSentence, TradeoffRecord};
use crate::online::{ActionTrace, Ensemble, OnlinePolicy, StepModel};
use crate::training::{wait_k_z, WaitK};
use crate::{Error, Result, TokenId};

const EOS_STR: &str = "</s>";

/// What the server streams to clients.
#[derive(Debug, Clone)]
pub enum ServeTestSet {
    /// Source token strings (without an end marker) and reference texts.
    Text {
        sources: Vec<Vec<String>>,
        references: Vec<String>,
    },
    Speech {
        streams: Vec<Vec<TimedWord>>,
        references: Vec<String>,
        block_ms: f64,
    },
}

impl ServeTestSet {
    fn len(&self) -> usize {
        match self {
            ServeTestSet::Text { sources, .. } => sources.len(),
            ServeTestSet::Speech { streams, .. } => streams.len(),
        }
    }

    fn reference(&self, id: usize) -> &str {
        match self {
            ServeTestSet::Text { references, .. } | ServeTestSet::Speech { references, .. } => {
                &references[id]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Finished {
    system: String,
    k: WaitK,
    id: usize,
    scored: ScoredSentence,
}

struct Shared {
    testset: ServeTestSet,
    target_vocab: Vocabulary,
    store: Mutex<Vec<Finished>>,
    log: Option<Mutex<std::fs::File>>,
    stop: AtomicBool,
}

struct Session {
    id: usize,
    system: String,
    k: WaitK,
    cursor: usize,
    consumed_ms: f64,
    eos_sent: bool,
    trace: ActionTrace,
    written: Vec<TokenId>,
}

#[derive(Deserialize)]
#[serde(tag = "act", rename_all = "UPPERCASE", deny_unknown_fields)]
enum Request {
    Start { id: usize, system: String, k: WaitK },
    Read,
    Write { token: String },
    Score { system: String, k: WaitK },
    Shutdown,
}

/// Running server; dropping the handle does not stop it.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Number of sessions scored so far.
    pub fn finished_sessions(&self) -> usize {
        self.shared.store.lock().map(|s| s.len()).unwrap_or(0)
    }

    pub fn shutdown(mut self) {
        stop(&self.shared, self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until a client sends `SHUTDOWN`.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn stop(shared: &Shared, addr: SocketAddr) {
    shared.stop.store(true, Ordering::SeqCst);
    let _ = TcpStream::connect(addr);
}

/// Binds `addr` and serves sessions on background threads. Completed
/// sessions are appended to `log` as JSON lines when given.
pub fn serve_eval(
    addr: impl ToSocketAddrs,
    testset: ServeTestSet,
    target_vocab: Vocabulary,
    log: Option<&std::path::Path>,
) -> Result<ServerHandle> {
    let n_refs = match &testset {
        ServeTestSet::Text { references, .. } | ServeTestSet::Speech { references, .. } => {
            references.len()
        }
    };
    if testset.len() == 0 || testset.len() != n_refs {
        return Err(Error::invalid(
            "test set must be non-empty with one reference per source",
        ));
    }
    if let ServeTestSet::Speech { block_ms, .. } = &testset {
        if !(*block_ms > 0.0) {
            return Err(Error::invalid("block_ms must be positive"));
        }
    }
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let log = match log {
        Some(p) => Some(Mutex::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)?,
        )),
        None => None,
    };
    let shared = Arc::new(Shared {
        testset,
        target_vocab,
        store: Mutex::new(Vec::new()),
        log,
        stop: AtomicBool::new(false),
    });
    let sh = Arc::clone(&shared);
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if sh.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let sh = Arc::clone(&sh);
            thread::spawn(move || {
                if let Err(e) = handle_connection(&sh, stream, local) {
                    log::debug!("connection closed: {e}");
                }
            });
        }
    });
    log::info!("evaluation server listening on {local}");
    Ok(ServerHandle {
        addr: local,
        shared,
        thread: Some(thread),
    })
}

fn send(w: &mut TcpStream, v: &Value) -> Result<()> {
    let mut line = serde_json::to_string(v)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    Ok(())
}

fn handle_connection(shared: &Shared, stream: TcpStream, local: SocketAddr) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    let mut session: Option<Session> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match respond(shared, &mut session, &line) {
            Ok(Some(reply)) => send(&mut writer, &reply)?,
            Ok(None) => {
                send(&mut writer, &json!({"ok": true}))?;
                stop(shared, local);
                break;
            }
            Err(e) => {
                send(&mut writer, &json!({"error": e.to_string()}))?;
                let _ = writer.shutdown(Shutdown::Both);
                return Err(e);
            }
        }
    }
    Ok(())
}

/// `Ok(None)` asks the server to stop.
fn respond(shared: &Shared, session: &mut Option<Session>, line: &str) -> Result<Option<Value>> {
    let req: Request =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
    match req {
        Request::Start { id, system, k } => {
            if session.is_some() {
                return Err(Error::Protocol("session already active".into()));
            }
            if id >= shared.testset.len() {
                return Err(Error::Protocol(format!("no test item {id}")));
            }
            *session = Some(Session {
                id,
                system,
                k,
                cursor: 0,
                consumed_ms: 0.0,
                eos_sent: false,
                trace: ActionTrace::new(),
                written: Vec::new(),
            });
            Ok(Some(json!({"ok": true})))
        }
        Request::Read => {
            let s = session
                .as_mut()
                .ok_or_else(|| Error::Protocol("READ outside a session".into()))?;
            Ok(Some(read_reply(&shared.testset, s)))
        }
        Request::Write { token } => {
            let s = session
                .as_mut()
                .ok_or_else(|| Error::Protocol("WRITE outside a session".into()))?;
            let ms = matches!(shared.testset, ServeTestSet::Speech { .. }).then_some(s.consumed_ms);
            let id = shared.target_vocab.id_or_unk(&token);
            s.trace.write(id, ms);
            if token != EOS_STR {
                s.written.push(id);
                return Ok(Some(json!({"ok": true})));
            }
            let s = session.take().expect("active session");
            let done = finish(shared, s)?;
            Ok(Some(
                json!({"ok": true, "done": true, "al_words": done.scored.al_words, "al_ms": done.scored.al_ms}),
            ))
        }
        Request::Score { system, k } => {
            let store = shared
                .store
                .lock()
                .map_err(|_| Error::Protocol("store poisoned".into()))?;
            let mut mine: Vec<&Finished> = store
                .iter()
                .filter(|f| f.system == system && f.k == k)
                .collect();
            mine.sort_by_key(|f| f.id);
            let sentences: Vec<ScoredSentence> = mine.iter().map(|f| f.scored.clone()).collect();
            let rec = aggregate(&system, k, &sentences)?;
            Ok(Some(json!({ "record": rec })))
        }
        Request::Shutdown => Ok(None),
    }
}

fn read_reply(testset: &ServeTestSet, s: &mut Session) -> Value {
    match testset {
        ServeTestSet::Text { sources, .. } => {
            let src = &sources[s.id];
            if s.cursor < src.len() {
                s.cursor += 1;
                s.trace.read(None);
                json!({"token": src[s.cursor - 1]})
            } else {
                if !s.eos_sent {
                    s.eos_sent = true;
                    s.trace.read(None);
                }
                json!({"eos": true})
            }
        }
        ServeTestSet::Speech {
            streams, block_ms, ..
        } => {
            let words = &streams[s.id];
            let total = stream_duration_ms(words);
            if s.consumed_ms >= total {
                if !s.eos_sent {
                    s.eos_sent = true;
                    s.trace.read(Some(s.consumed_ms));
                }
                return json!({"eos": true});
            }
            s.consumed_ms = (s.consumed_ms + block_ms).min(total);
            let start = s.cursor;
            while words
                .get(s.cursor)
                .is_some_and(|w| w.end_ms() <= s.consumed_ms)
            {
                s.cursor += 1;
                s.trace.read(Some(s.consumed_ms));
            }
            json!({"block_ms": block_ms, "words": &words[start..s.cursor]})
        }
    }
}

fn finish(shared: &Shared, s: Session) -> Result<Finished> {
    let (src_len, total_ms) = match &shared.testset {
        ServeTestSet::Text { sources, .. } => (sources[s.id].len() + 1, None),
        ServeTestSet::Speech { streams, .. } => {
            let ms = stream_duration_ms(&streams[s.id]);
            (streams[s.id].len() + 1, (ms > 0.0).then_some(ms))
        }
    };
    let hyp = shared.target_vocab.detokenize(&s.written);
    let scored = score_sentence(
        &hyp,
        shared.testset.reference(s.id),
        &s.trace,
        src_len,
        total_ms,
    )?;
    let done = Finished {
        system: s.system,
        k: s.k,
        id: s.id,
        scored,
    };
    if let Some(log) = &shared.log {
        let entry = json!({
            "system": done.system,
            "k": done.k,
            "id": done.id,
            "hypothesis": hyp,
            "trace": s.trace.entries(),
            "al_words": done.scored.al_words,
            "al_ms": done.scored.al_ms,
        });
        let mut f = log
            .lock()
            .map_err(|_| Error::Protocol("log poisoned".into()))?;
        writeln!(f, "{entry}")?;
    }
    shared
        .store
        .lock()
        .map_err(|_| Error::Protocol("store poisoned".into()))?
        .push(done.clone());
    Ok(done)
}

/// Blocking client for the evaluation protocol.
pub struct EvalClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl EvalClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(EvalClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    /// Sends one frame and returns the reply; `{"error":..}` becomes `Err`.
    pub fn request(&mut self, frame: &Value) -> Result<Value> {
        send(&mut self.writer, frame)?;
        self.request_raw_reply()
    }

    /// Sends a raw line (possibly malformed) and returns the reply.
    pub fn send_line(&mut self, line: &str) -> Result<Value> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.request_raw_reply()
    }

    fn request_raw_reply(&mut self) -> Result<Value> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(Error::Protocol("server closed the connection".into()));
        }
        let v: Value = serde_json::from_str(&line)?;
        if let Some(e) = v.get("error") {
            return Err(Error::Protocol(e.as_str().unwrap_or("error").to_string()));
        }
        Ok(v)
    }

    pub fn start(&mut self, id: usize, system: &str, k: WaitK) -> Result<()> {
        self.request(&json!({"act": "START", "id": id, "system": system, "k": k}))
            .map(|_| ())
    }

    /// Next source token, or `None` once the source is exhausted.
    pub fn read_token(&mut self) -> Result<Option<String>> {
        let v = self.request(&json!({"act": "READ"}))?;
        if v.get("eos").and_then(Value::as_bool) == Some(true) {
            return Ok(None);
        }
        v.get("token")
            .and_then(Value::as_str)
            .map(|s| Some(s.to_string()))
            .ok_or_else(|| Error::Protocol(format!("unexpected reply {v}")))
    }

    pub fn write_token(&mut self, token: &str) -> Result<Value> {
        self.request(&json!({"act": "WRITE", "token": token}))
    }

    pub fn score(&mut self, system: &str, k: WaitK) -> Result<TradeoffRecord> {
        let v = self.request(&json!({"act": "SCORE", "system": system, "k": k}))?;
        Ok(serde_json::from_value(
            v.get("record").cloned().unwrap_or(Value::Null),
        )?)
    }

    pub fn shutdown_server(&mut self) -> Result<()> {
        self.request(&json!({"act": "SHUTDOWN"})).map(|_| ())
    }
}

/// Drives one text session with a wait-k decoder. The length cap is applied
/// once the end of the source has been observed.
pub fn drive_waitk_text<M: StepModel>(
    client: &mut EvalClient,
    models: &[M],
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    id: usize,
    system: &str,
    policy: &OnlinePolicy,
) -> Result<()> {
    client.start(id, system, policy.k_eval)?;
    let mut ens = Ensemble::new(models)?;
    let mut read = 0usize;
    let mut src_len: Option<usize> = None;
    let mut written = 0usize;
    loop {
        let t = written + 1;
        let want = match (policy.k_eval, src_len) {
            (_, Some(n)) => wait_k_z(policy.k_eval, t, n),
            (WaitK::Finite(k), None) => k + t - 1,
            (WaitK::Infinite, None) => usize::MAX,
        };
        while read < want && src_len.is_none() {
            let tok = match client.read_token()? {
                Some(s) => source_vocab.id_or_unk(&s),
                None => {
                    src_len = Some(read + 1);
                    EOS
                }
            };
            ens.read(&[tok])?;
            read += 1;
        }
        if src_len.is_some_and(|n| written >= policy.max_len(n)) {
            client.write_token(EOS_STR)?;
            return Ok(());
        }
        let tok = ens.predict(read.min(want))?;
        let s = target_vocab.token(tok).unwrap_or("<unk>");
        client.write_token(s)?;
        if tok == EOS {
            return Ok(());
        }
        written += 1;
    }
}
