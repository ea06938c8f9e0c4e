//! One client's session: protocol messages in, replies out. No I/O.

use std::sync::Arc;

use miditune::engine::{CorrectionConfig, EngineError, LatencyClock, Session};
use miditune::midi::NoteEvent;
use miditune::neural::LstmModel;
use miditune::theory::MusicalContext;

use crate::protocol::{parse_client, ClientMessage, ErrorCode, ServerMessage};

/// Session resolution: one tick per millisecond at 120 beats per minute.
pub const WIRE_TICKS_PER_BEAT: u32 = 500;

pub struct Connection {
    session: Session,
    last_t_ms: Option<f64>,
}

impl Connection {
    pub fn new(model: Option<Arc<LstmModel>>, defaults: CorrectionConfig, clock: LatencyClock) -> Result<Self, EngineError> {
        let session = Session::new(defaults, model, WIRE_TICKS_PER_BEAT)?.with_clock(clock);
        Ok(Connection { session, last_t_ms: None })
    }

    pub fn config(&self) -> &CorrectionConfig {
        self.session.config()
    }

    /// Milliseconds since the previous note event, clamped at zero when the
    /// client's clock runs backwards.
    fn delta_ticks(&mut self, t_ms: f64) -> u32 {
        let delta = self.last_t_ms.map_or(0.0, |last| (t_ms - last).max(0.0));
        self.last_t_ms = Some(t_ms);
        delta.round().min(f64::from(u32::MAX)) as u32
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Config { backend, aid_level, threshold, key, mode } => {
                let mut cfg = *self.session.config();
                if let Some(b) = backend {
                    cfg.backend = b;
                }
                if let Some(a) = aid_level {
                    cfg.aid_level = a;
                }
                if let Some(t) = threshold {
                    cfg.detection_threshold = t;
                }
                if key.is_some() || mode.is_some() {
                    let current = cfg.context;
                    let key = key.or(current.map(|c| c.key()));
                    let mode = mode.or(current.map(|c| c.mode()));
                    match (key, mode) {
                        (Some(k), Some(m)) => match MusicalContext::new(k, m) {
                            Ok(ctx) => cfg.context = Some(ctx),
                            Err(e) => return vec![ServerMessage::error(ErrorCode::BadConfig, e.to_string())],
                        },
                        _ => return vec![ServerMessage::error(ErrorCode::BadConfig, "`key` and `mode` must be set together")],
                    }
                }
                match self.session.set_config(cfg) {
                    Ok(()) => vec![ServerMessage::ack("config")],
                    Err(e) => vec![ServerMessage::error(ErrorCode::BadConfig, e.to_string())],
                }
            }
            ClientMessage::NoteOn { pitch, velocity, t_ms } => {
                let delta = self.delta_ticks(t_ms);
                match self.session.process_event(NoteEvent::on(pitch, velocity, delta)) {
                    Ok(d) => vec![ServerMessage::decision(&d)],
                    Err(e) => vec![ServerMessage::error(ErrorCode::BadNote, e.to_string())],
                }
            }
            ClientMessage::NoteOff { pitch, t_ms } => {
                let delta = self.delta_ticks(t_ms);
                match self.session.process_event(NoteEvent::off(pitch, 0, delta)) {
                    Ok(_) => Vec::new(),
                    Err(e) => vec![ServerMessage::error(ErrorCode::BadNote, e.to_string())],
                }
            }
            ClientMessage::Reset => {
                self.session.reset();
                self.last_t_ms = None;
                vec![ServerMessage::ack("reset")]
            }
        }
    }

    /// Text frame in, serialized replies out.
    pub fn handle_text(&mut self, text: &str) -> Vec<String> {
        let replies = match parse_client(text) {
            Ok(msg) => self.handle(msg),
            Err(err) => vec![err],
        };
        replies.iter().map(ServerMessage::to_json).collect()
    }
}
