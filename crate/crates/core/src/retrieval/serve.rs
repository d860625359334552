//! Line-delimited JSON serving over any reader/writer pair or TCP.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BehaviorEvent, UserInput, UserProfile};

use super::pipeline::{FusedResult, SearchMode, ServingState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub profile: UserProfile,
    /// Chronological; the last `n_max` events are used.
    #[serde(default)]
    pub history: Vec<BehaviorEvent>,
    pub q_total: usize,
    #[serde(default)]
    pub mode: SearchMode,
}

#[derive(Serialize)]
struct ErrorResponse {
    error: String,
}

impl ServingState {
    pub fn handle(&self, req: &Request) -> Result<FusedResult> {
        let k = self.model.config.k;
        if req.q_total < k {
            return Err(Error::invalid(format!("q_total {} is below K = {k}", req.q_total)));
        }
        let user = UserInput::new(req.profile, req.history.clone());
        self.retrieve(&user, req.q_total, req.mode)
    }

    /// Answers one request line with one response line.
    pub fn handle_line(&self, line: &str) -> String {
        let out = serde_json::from_str::<Request>(line)
            .map_err(Error::from)
            .and_then(|r| self.handle(&r));
        match out {
            Ok(res) => serde_json::to_string(&res),
            Err(e) => serde_json::to_string(&ErrorResponse { error: e.to_string() }),
        }
        .expect("responses serialize")
    }
}

/// Serves until `reader` ends; returns the number of requests answered.
pub fn serve_lines<R: BufRead, W: Write>(state: &ServingState, reader: R, mut writer: W) -> Result<usize> {
    let mut n = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = state.handle_line(&line);
        writer
            .write_all(resp.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io("<output>", e))?;
        n += 1;
    }
    Ok(n)
}

/// Accepts connections on `listener`, one thread per connection. Stops
/// after `max_connections` if given.
pub fn serve_listener(state: Arc<ServingState>, listener: TcpListener, max_connections: Option<usize>) -> Result<()> {
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream.map_err(|e| Error::io("<tcp>", e))?;
        let state = Arc::clone(&state);
        handles.push(std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return log::warn!("connection dropped: {e}"),
            };
            if let Err(e) = serve_lines(&state, reader, stream) {
                log::warn!("connection ended with error: {e}");
            }
        }));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

pub fn serve_tcp(state: Arc<ServingState>, addr: impl ToSocketAddrs) -> Result<()> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::io("<tcp bind>", e))?;
    log::info!("listening on {:?}", listener.local_addr().ok());
    serve_listener(state, listener, None)
}
