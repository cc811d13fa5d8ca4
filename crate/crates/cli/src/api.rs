//! Session API: a human plays the user against a trained agent.
//!
//! [`Service::handle_request`] is transport-free; the HTTP server and the
//! terminal chat both route through it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use cochpl::agent::AgentParams;
use cochpl::catalog::LabelKind;
use cochpl::env::{reset_human_session, Choice, ChoiceChain, EpisodeLog, EpisodeStatus, OptionKind, SessionState};
use cochpl::eval::{episode_rng, Policy};
use cochpl::training::{AgentPolicy, Variant, Workspace};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

pub const API_VERSION: u32 = 1;

/// Human stand-in for the simulator's user id.
const HUMAN_USER: usize = 0;

#[derive(Debug)]
pub struct ApiSession {
    pub state: SessionState,
    pub pending: Option<ChoiceChain>,
    rng: ChaCha8Rng,
    pub created_at: Instant,
    pub last_active: Instant,
}

/// Shared model snapshot plus the live sessions.
pub struct Service {
    workspace: Arc<Workspace>,
    params: Arc<AgentParams>,
    t_max: usize,
    seed: u64,
    ttl: Duration,
    created: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Mutex<ApiSession>>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    initial_attribute_id: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponsesBody {
    accepted: Vec<bool>,
}

fn error(status: u16, message: impl Into<String>) -> (u16, Value) {
    (status, json!({ "api_version": API_VERSION, "error": message.into() }))
}

fn parse<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, (u16, Value)> {
    serde_json::from_slice(body).map_err(|e| error(400, format!("malformed body: {e}")))
}

impl Service {
    pub fn new(workspace: Arc<Workspace>, params: Arc<AgentParams>, t_max: usize, seed: u64, ttl: Duration) -> Self {
        Self {
            workspace,
            params,
            t_max,
            seed,
            ttl,
            created: AtomicU64::new(0),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    /// Drops sessions idle for longer than the TTL as of `now`.
    pub fn purge_expired(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, s| {
            let s = s.lock().expect("session poisoned");
            now.saturating_duration_since(s.last_active) <= self.ttl
        });
        before - map.len()
    }

    /// Routes one request; returns the status code and JSON body.
    pub fn handle_request(&self, method: &str, path: &str, body: &[u8]) -> (u16, Value) {
        let now = Instant::now();
        self.purge_expired(now);
        let parts: Vec<&str> = path.trim_end_matches('/').split('/').skip(1).collect();
        let result = match (method, parts.as_slice()) {
            ("POST", ["api", "sessions"]) => self.create(body, now),
            ("GET", ["api", "sessions", id]) => self.with_session(id, now, |s| Ok(self.summary(id, s))),
            ("POST", ["api", "sessions", id, "responses"]) => {
                parse::<ResponsesBody>(body).and_then(|b| self.with_session(id, now, |s| self.respond(id, s, &b.accepted)))
            }
            ("DELETE", ["api", "sessions", id]) => self.close(id),
            (_, ["api", "sessions"]) | (_, ["api", "sessions", _]) | (_, ["api", "sessions", _, "responses"]) => {
                Err(error(405, format!("method {method} not allowed on {path}")))
            }
            _ => Err(error(404, format!("no route for {path}"))),
        };
        result.unwrap_or_else(|e| e)
    }

    fn lookup(&self, id: &str) -> Option<Arc<Mutex<ApiSession>>> {
        self.sessions.lock().expect("session map poisoned").get(id).cloned()
    }

    /// Runs `f` with the session locked, so requests on one session are serialized.
    fn with_session(
        &self,
        id: &str,
        now: Instant,
        f: impl FnOnce(&mut ApiSession) -> Result<(u16, Value), (u16, Value)>,
    ) -> Result<(u16, Value), (u16, Value)> {
        let handle = self.lookup(id).ok_or_else(|| error(404, format!("unknown session {id}")))?;
        let mut s = handle.lock().expect("session poisoned");
        s.last_active = now;
        f(&mut s)
    }

    fn create(&self, body: &[u8], now: Instant) -> Result<(u16, Value), (u16, Value)> {
        let b: CreateBody = parse(body)?;
        let c = &self.workspace.catalog;
        if b.initial_attribute_id >= c.num_attributes() {
            return Err(error(422, format!("unknown attribute id {}", b.initial_attribute_id)));
        }
        let state = reset_human_session(c, HUMAN_USER, b.initial_attribute_id).map_err(|e| error(422, e.to_string()))?;
        let index = self.created.fetch_add(1, Ordering::SeqCst);
        let mut session = ApiSession {
            state,
            pending: None,
            rng: episode_rng(self.seed, index as usize),
            created_at: now,
            last_active: now,
        };
        self.advance(&mut session).map_err(|e| error(500, e.to_string()))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut body = self.turn_payload(&id, &session);
        body["session_id"] = json!(id);
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok((201, body))
    }

    fn close(&self, id: &str) -> Result<(u16, Value), (u16, Value)> {
        let removed = self.sessions.lock().expect("session map poisoned").remove(id);
        match removed {
            Some(_) => Ok((200, json!({ "api_version": API_VERSION, "session_id": id, "status": "closed" }))),
            None => Err(error(404, format!("unknown session {id}"))),
        }
    }

    fn respond(&self, id: &str, s: &mut ApiSession, accepted: &[bool]) -> Result<(u16, Value), (u16, Value)> {
        let Some(chain) = s.pending.take() else {
            return Err(error(409, "session has terminated"));
        };
        if accepted.len() != chain.len() {
            let msg = format!("{} responses for a chain of {}", accepted.len(), chain.len());
            s.pending = Some(chain);
            return Err(error(409, msg));
        }
        let c = &self.workspace.catalog;
        for (&choice, &ok) in chain.choices.iter().zip(accepted) {
            if s.state.success.is_some() {
                break;
            }
            s.state.record_presented(c, choice, ok).map_err(|e| error(500, e.to_string()))?;
        }
        s.state.close_turn(c);
        self.advance(s).map_err(|e| error(500, e.to_string()))?;
        Ok((200, self.turn_payload(id, s)))
    }

    /// Generates the next question unless the session has ended.
    fn advance(&self, s: &mut ApiSession) -> cochpl::Result<()> {
        let c = &self.workspace.catalog;
        if s.state.status(self.t_max) == EpisodeStatus::Ongoing && s.state.candidates(c).is_exhausted() {
            s.state.exhausted = true;
        }
        if s.state.status(self.t_max) != EpisodeStatus::Ongoing {
            s.pending = None;
            return Ok(());
        }
        let policy = AgentPolicy {
            params: &self.params,
            ctx: self.workspace.ctx(),
            variant: Variant::Full,
        };
        s.pending = Some(policy.next_chain(&s.state, &mut s.rng)?);
        Ok(())
    }

    fn label(&self, choice: Choice) -> String {
        let (kind, name) = match choice {
            Choice::Attribute(_) => (LabelKind::Attribute, "attribute"),
            Choice::Item(_) => (LabelKind::Item, "item"),
        };
        self.workspace
            .catalog
            .label(kind, choice.id())
            .map_or_else(|| format!("{name} {}", choice.id()), str::to_owned)
    }

    fn question(&self, chain: &ChoiceChain) -> Value {
        let choices: Vec<Value> = chain
            .choices
            .iter()
            .map(|&ch| json!({ "id": ch.id(), "label": self.label(ch) }))
            .collect();
        json!({ "option": chain.option, "choices": choices })
    }

    fn status(&self, s: &ApiSession) -> EpisodeStatus {
        s.state.status(self.t_max)
    }

    /// Reply after create or a response: the next question, or the outcome.
    fn turn_payload(&self, id: &str, s: &ApiSession) -> Value {
        let mut body = json!({
            "api_version": API_VERSION,
            "session_id": id,
            "status": self.status(s),
            "turn": s.state.turn,
        });
        match (&s.pending, s.state.success) {
            (Some(chain), _) => body["question"] = self.question(chain),
            (None, Some(hit)) => {
                body["turn"] = json!(hit.turn);
                body["rank"] = json!(hit.rank);
            }
            (None, None) => {}
        }
        body
    }

    fn summary(&self, id: &str, s: &ApiSession) -> (u16, Value) {
        let c = &self.workspace.catalog;
        let cand = s.state.candidates(c);
        let log = EpisodeLog::from_state(0, &s.state, self.t_max);
        let transcript: Vec<Value> = log
            .turns
            .iter()
            .map(|t| {
                let choices: Vec<Value> = t
                    .choices
                    .iter()
                    .map(|&id| {
                        let ch = t.option.choice(id);
                        json!({ "id": id, "label": self.label(ch) })
                    })
                    .collect();
                json!({ "option": t.option, "choices": choices, "accepted": t.accepted })
            })
            .collect();
        let mut body = json!({
            "api_version": API_VERSION,
            "session_id": id,
            "status": self.status(s),
            "turn": s.state.turn,
            "initial_attribute_id": s.state.acc_attrs.first(),
            "accepted_attributes": s.state.acc_attrs.len(),
            "rejected_attributes": s.state.rej_attrs.len(),
            "rejected_items": s.state.rej_items.len(),
            "candidate_items": cand.items.len(),
            "candidate_attributes": cand.attributes.len(),
            "transcript": transcript,
            "log": log,
            "question": s.pending.as_ref().map(|ch| self.question(ch)),
        });
        if let Some(hit) = s.state.success {
            body["rank"] = json!(hit.rank);
            body["success_turn"] = json!(hit.turn);
        }
        (200, body)
    }
}

/// The option of a question payload, for clients.
pub fn question_option(q: &Value) -> Option<OptionKind> {
    serde_json::from_value(q.get("option")?.clone()).ok()
}
