//! Real-time correction sessions, offline file correction and the
//! error-injection evaluation harness.
//!
//! A [`Session`] consumes note events one at a time. With the model backend
//! it keeps the recurrent state of the network over everything sounded so
//! far and, for each note-on, compares the played pitch with its neighbours
//! under the distribution predicted *before* the note arrived:
//!
//! * the note is flagged when `P[played] < threshold`;
//! * it is overridden by the most probable neighbour `c` within `max_shift`
//!   semitones when `aid_level * P[c] > P[played]`.
//!
//! The emitted pitch, not the played one, is then fed back into the model.
//! Note-offs follow their note-on, so an overridden note is released at the
//! pitch that was actually sounded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiTrack, NoteEvent, NoteKind};
use crate::neural::{LstmModel, NeuralError, RecurrentState, Workspace};
use crate::representation::{
    bucket_delta, bucket_velocity, encode_event, EncodingScheme, TokenizedEvent, HIGHEST_KEY, LOWEST_KEY,
};
use crate::theory::MusicalContext;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the model backend needs a loaded model")]
    NoModel,
    #[error("model input width {0} matches no encoding for its level")]
    UnknownLayout(usize),
    #[error("track needs at least {needed} note-ons, has {found}")]
    TooFewNotes { needed: usize, found: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Model,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub backend: Backend,
    /// Aid level λ in [0, 1].
    pub aid_level: f64,
    /// Detection threshold τ in [0, 1].
    pub detection_threshold: f64,
    pub max_shift: u8,
    pub context: Option<MusicalContext>,
    /// Model-consumed events before the model may override.
    pub warmup: usize,
    /// Longest history, in model events, the prediction conditions on.
    /// 0 keeps the whole stream in one recurrent state.
    #[serde(default)]
    pub history: usize,
}

pub const DEFAULT_AID_LEVEL: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.02;
pub const DEFAULT_MAX_SHIFT: u8 = 3;

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            backend: Backend::Model,
            aid_level: DEFAULT_AID_LEVEL,
            detection_threshold: DEFAULT_THRESHOLD,
            max_shift: DEFAULT_MAX_SHIFT,
            context: None,
            warmup: 64,
            history: 64,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.aid_level) {
            return Err(EngineError::Config(format!("aid level {} outside [0, 1]", self.aid_level)));
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return Err(EngineError::Config(format!("threshold {} outside [0, 1]", self.detection_threshold)));
        }
        if !(1..=11).contains(&self.max_shift) {
            return Err(EngineError::Config(format!("max shift {} outside 1..=11", self.max_shift)));
        }
        if self.backend == Backend::Context && self.context.is_none() {
            return Err(EngineError::Config("the context backend needs a key and mode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: NoteKind,
    pub original_pitch: u8,
    pub emitted_pitch: u8,
    pub overridden: bool,
    pub flagged_error: bool,
    pub p_original: Option<f64>,
    pub p_emitted: Option<f64>,
    pub latency_us: u64,
}

/// How decisions report latency. `Fixed` makes transcripts reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyClock {
    Measured,
    Fixed(u64),
}

/// Two recurrent states restarted `history` events apart, offset by half
/// that, so the older one has always seen between `history / 2` and
/// `history` events. With `history == 0` only the first state is used and
/// never restarted.
struct ModelRuntime {
    model: Arc<LstmModel>,
    scheme: EncodingScheme,
    states: [RecurrentState; 2],
    ws: Workspace,
    history: usize,
    /// Distribution over the next key, absent until an event was consumed.
    next: Option<Vec<f64>>,
    consumed: usize,
}

impl ModelRuntime {
    fn new(model: Arc<LstmModel>, history: usize) -> Result<Self, EngineError> {
        let scheme = model.scheme().ok_or(EngineError::UnknownLayout(model.input_width))?;
        let states = [RecurrentState::zeros(&model), RecurrentState::zeros(&model)];
        let ws = Workspace::new(&model);
        Ok(ModelRuntime { model, scheme, states, ws, history, next: None, consumed: 0 })
    }

    fn reset(&mut self) {
        for s in &mut self.states {
            s.reset();
        }
        self.next = None;
        self.consumed = 0;
    }

    fn set_history(&mut self, history: usize) {
        if history != self.history {
            self.history = history;
            self.reset();
        }
    }

    /// Events the given state has consumed after the next event, or `None`
    /// while it is not yet running.
    fn age_after_next(&self, i: usize) -> Option<usize> {
        let n = self.consumed;
        if self.history == 0 {
            return (i == 0).then_some(n + 1);
        }
        let offset = i * (self.history / 2).max(1);
        (n >= offset).then(|| (n - offset) % self.history + 1)
    }

    fn consume(&mut self, kind: NoteKind, pitch: u8, velocity: u8, delta_ticks: u64, ticks_per_beat: u32) -> Result<(), EngineError> {
        let level = self.model.level;
        let ev = TokenizedEvent {
            kind,
            key: pitch - LOWEST_KEY,
            velocity_bucket: level.has_velocity().then(|| bucket_velocity(u32::from(velocity.min(127))).unwrap_or(0)),
            delta_bucket: level.has_delta().then(|| bucket_delta(delta_ticks, ticks_per_beat).unwrap_or(0)),
        };
        let x = encode_event(&ev, self.scheme, level).map_err(|e| EngineError::Config(e.to_string()))?;
        let mut best: Option<(usize, Vec<f64>)> = None;
        for i in 0..self.states.len() {
            let Some(age) = self.age_after_next(i) else { continue };
            if age == 1 {
                self.states[i].reset();
            }
            let probs = self.model.forward_streaming(&mut self.states[i], &x, &mut self.ws)?;
            if best.as_ref().is_none_or(|(a, _)| age > *a) {
                best = Some((age, probs));
            }
        }
        self.next = best.map(|(_, p)| p);
        self.consumed += 1;
        Ok(())
    }
}

fn in_piano_range(pitch: u8) -> bool {
    (LOWEST_KEY..=HIGHEST_KEY).contains(&pitch)
}

/// Most probable neighbour within `max_shift` semitones of `pitch`, scanning
/// outward and below-first so that ties go to the nearer, lower pitch.
pub fn best_neighbour(probs: &[f64], pitch: u8, max_shift: u8) -> Option<u8> {
    let mut best: Option<(u8, f64)> = None;
    for d in 1..=i16::from(max_shift) {
        for cand in [i16::from(pitch) - d, i16::from(pitch) + d] {
            if cand < i16::from(LOWEST_KEY) || cand > i16::from(HIGHEST_KEY) {
                continue;
            }
            let p = probs[(cand - i16::from(LOWEST_KEY)) as usize];
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((cand as u8, p));
            }
        }
    }
    best.map(|(c, _)| c)
}

/// Pure override rule applied to one note-on given the predicted
/// distribution over the 88 keys.
pub fn decide(probs: &[f64], pitch: u8, cfg: &CorrectionConfig) -> (u8, bool, bool, f64, f64) {
    let key = usize::from(pitch - LOWEST_KEY);
    let p_orig = probs[key];
    let flagged = p_orig < cfg.detection_threshold;
    match best_neighbour(probs, pitch, cfg.max_shift) {
        Some(c) => {
            let p_c = probs[usize::from(c - LOWEST_KEY)];
            if cfg.aid_level * p_c > p_orig {
                (c, true, flagged, p_orig, p_c)
            } else {
                (pitch, false, flagged, p_orig, p_orig)
            }
        }
        None => (pitch, false, flagged, p_orig, p_orig),
    }
}

/// One performer's correction session.
pub struct Session {
    cfg: CorrectionConfig,
    runtime: Option<ModelRuntime>,
    ticks_per_beat: u32,
    /// Ticks since the last event the model consumed.
    carried_ticks: u64,
    /// Emitted pitches of sounding notes, per played pitch.
    open: Vec<Vec<u8>>,
    clock: LatencyClock,
}

impl Session {
    pub fn new(cfg: CorrectionConfig, model: Option<Arc<LstmModel>>, ticks_per_beat: u32) -> Result<Self, EngineError> {
        cfg.validate()?;
        if cfg.backend == Backend::Model && model.is_none() {
            return Err(EngineError::NoModel);
        }
        if ticks_per_beat == 0 {
            return Err(EngineError::Config("ticks_per_beat must be positive".into()));
        }
        let runtime = model.map(|m| ModelRuntime::new(m, cfg.history)).transpose()?;
        Ok(Session { cfg, runtime, ticks_per_beat, carried_ticks: 0, open: vec![Vec::new(); 128], clock: LatencyClock::Measured })
    }

    pub fn with_clock(mut self, clock: LatencyClock) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &CorrectionConfig {
        &self.cfg
    }

    pub fn has_model(&self) -> bool {
        self.runtime.is_some()
    }

    pub fn ticks_per_beat(&self) -> u32 {
        self.ticks_per_beat
    }

    /// Replaces the configuration from the next event on. Model state is
    /// kept unless the history length changes.
    pub fn set_config(&mut self, cfg: CorrectionConfig) -> Result<(), EngineError> {
        cfg.validate()?;
        if cfg.backend == Backend::Model && self.runtime.is_none() {
            return Err(EngineError::NoModel);
        }
        if let Some(rt) = self.runtime.as_mut() {
            rt.set_history(cfg.history);
        }
        self.cfg = cfg;
        Ok(())
    }

    pub fn set_aid_level(&mut self, aid_level: f64) -> Result<(), EngineError> {
        self.set_config(CorrectionConfig { aid_level, ..self.cfg })
    }

    /// Zeroes the recurrent state and restarts warmup. Sounding notes keep
    /// their emitted pitch so their note-offs still match.
    pub fn reset(&mut self) {
        if let Some(rt) = self.runtime.as_mut() {
            rt.reset();
        }
        self.carried_ticks = 0;
    }

    /// Next-key distribution the session would judge the next note-on by.
    pub fn next_distribution(&self) -> Option<&[f64]> {
        self.runtime.as_ref().and_then(|rt| rt.next.as_deref())
    }

    pub fn process_event(&mut self, ev: NoteEvent) -> Result<Decision, EngineError> {
        let start = Instant::now();
        self.carried_ticks += u64::from(ev.delta_ticks);
        let mut decision = match ev.kind {
            NoteKind::NoteOn => self.note_on(ev)?,
            NoteKind::NoteOff => self.note_off(ev)?,
        };
        decision.latency_us = match self.clock {
            LatencyClock::Measured => start.elapsed().as_micros() as u64,
            LatencyClock::Fixed(v) => v,
        };
        Ok(decision)
    }

    fn note_on(&mut self, ev: NoteEvent) -> Result<Decision, EngineError> {
        let pitch = ev.pitch;
        let mut d = Decision {
            kind: NoteKind::NoteOn,
            original_pitch: pitch,
            emitted_pitch: pitch,
            overridden: false,
            flagged_error: false,
            p_original: None,
            p_emitted: None,
            latency_us: 0,
        };
        match self.cfg.backend {
            Backend::Context => {
                if let Some(ctx) = self.cfg.context {
                    d.emitted_pitch = ctx.snap_to_scale(pitch);
                    d.flagged_error = !ctx.in_scale(pitch);
                    d.overridden = d.emitted_pitch != pitch;
                }
            }
            Backend::Model => {
                let warm = self.runtime.as_ref().is_some_and(|rt| rt.consumed >= self.cfg.warmup);
                if let (true, Some(probs)) = (in_piano_range(pitch), self.next_distribution()) {
                    if warm {
                        let (out, overridden, flagged, p_orig, p_out) = decide(probs, pitch, &self.cfg);
                        d.emitted_pitch = out;
                        d.overridden = overridden;
                        d.flagged_error = flagged;
                        d.p_original = Some(p_orig);
                        d.p_emitted = Some(p_out);
                    } else {
                        let p = probs[usize::from(pitch - LOWEST_KEY)];
                        d.p_original = Some(p);
                        d.p_emitted = Some(p);
                    }
                }
            }
        }
        self.open[usize::from(pitch & 0x7f)].push(d.emitted_pitch);
        self.feed(NoteKind::NoteOn, d.emitted_pitch, ev.velocity)?;
        Ok(d)
    }

    fn note_off(&mut self, ev: NoteEvent) -> Result<Decision, EngineError> {
        let emitted = self.open[usize::from(ev.pitch & 0x7f)].pop().unwrap_or(ev.pitch);
        if self.runtime.as_ref().is_some_and(|rt| rt.model.level.has_kind()) {
            self.feed(NoteKind::NoteOff, emitted, ev.velocity)?;
        }
        Ok(Decision {
            kind: NoteKind::NoteOff,
            original_pitch: ev.pitch,
            emitted_pitch: emitted,
            overridden: emitted != ev.pitch,
            flagged_error: false,
            p_original: None,
            p_emitted: None,
            latency_us: 0,
        })
    }

    fn feed(&mut self, kind: NoteKind, pitch: u8, velocity: u8) -> Result<(), EngineError> {
        if !in_piano_range(pitch) {
            return Ok(());
        }
        if let Some(rt) = self.runtime.as_mut() {
            rt.consume(kind, pitch, velocity, self.carried_ticks, self.ticks_per_beat)?;
            self.carried_ticks = 0;
        }
        Ok(())
    }
}

/// Runs a fresh session over a whole track. The corrected track differs from
/// the input only in the pitches of overridden notes and their note-offs.
pub fn correct_file(
    track: &MidiTrack,
    cfg: &CorrectionConfig,
    model: Option<Arc<LstmModel>>,
) -> Result<(MidiTrack, Vec<Decision>), EngineError> {
    let mut session = Session::new(*cfg, model, u32::from(track.ticks_per_beat))?;
    let mut events = Vec::with_capacity(track.events.len());
    let mut decisions = Vec::with_capacity(track.events.len());
    for &ev in &track.events {
        let d = session.process_event(ev)?;
        events.push(NoteEvent { pitch: d.emitted_pitch, ..ev });
        decisions.push(d);
    }
    Ok((MidiTrack::new(track.ticks_per_beat, events), decisions))
}

/// A corrupted copy of a track and the indices (into `events`) of the
/// altered note-ons with their original pitches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub corrupted: MidiTrack,
    pub labels: BTreeMap<usize, u8>,
}

/// Fraction of note-ons at each end of a track that is never corrupted.
pub const INJECTION_MARGIN: f64 = 0.05;
pub const MIN_INJECTION_NOTES: usize = 10;

/// Index of the note-off closing each note-on (LIFO per pitch, as in parsing).
fn note_off_partners(events: &[NoteEvent]) -> Vec<Option<usize>> {
    let mut partner = vec![None; events.len()];
    let mut open: Vec<Vec<usize>> = vec![Vec::new(); 128];
    for (i, e) in events.iter().enumerate() {
        let stack = &mut open[usize::from(e.pitch & 0x7f)];
        match e.kind {
            NoteKind::NoteOn => stack.push(i),
            NoteKind::NoteOff => {
                if let Some(on) = stack.pop() {
                    partner[on] = Some(i);
                }
            }
        }
    }
    partner
}

/// Shifts interior note-ons by 1..=`max_shift` semitones (either direction)
/// with probability `rate` each, re-pitching their note-offs to match.
pub fn inject_errors(track: &MidiTrack, rate: f64, max_shift: u8, seed: u64) -> Result<InjectionReport, EngineError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(EngineError::Config(format!("injection rate {rate} outside [0, 1]")));
    }
    if max_shift == 0 {
        return Err(EngineError::Config("max shift must be positive".into()));
    }
    let ons: Vec<usize> = track.events.iter().enumerate().filter(|(_, e)| e.is_on()).map(|(i, _)| i).collect();
    if ons.len() < MIN_INJECTION_NOTES {
        return Err(EngineError::TooFewNotes { needed: MIN_INJECTION_NOTES, found: ons.len() });
    }
    let margin = (ons.len() as f64 * INJECTION_MARGIN).ceil() as usize;
    let partners = note_off_partners(&track.events);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = track.events.clone();
    let mut labels = BTreeMap::new();
    for &i in &ons[margin..ons.len() - margin] {
        // Draw for every eligible note so the pattern does not depend on pitch.
        let hit = rng.gen::<f64>() < rate;
        let original = events[i].pitch;
        if !hit || !in_piano_range(original) {
            continue;
        }
        let shifted = loop {
            let magnitude = rng.gen_range(1..=i16::from(max_shift));
            let signed = if rng.gen::<bool>() { magnitude } else { -magnitude };
            let p = i16::from(original) + signed;
            if (i16::from(LOWEST_KEY)..=i16::from(HIGHEST_KEY)).contains(&p) {
                break p as u8;
            }
        };
        events[i].pitch = shifted;
        if let Some(off) = partners[i] {
            events[off].pitch = shifted;
        }
        labels.insert(i, original);
    }
    Ok(InjectionReport { corrupted: MidiTrack::new(track.ticks_per_beat, events), labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub note_ons: usize,
    pub injected: usize,
    pub flagged: usize,
    pub true_positives: usize,
    pub detection_precision: f64,
    pub detection_recall: f64,
    pub overrides: usize,
    /// Overrides that restored the pre-injection pitch.
    pub correct_overrides: usize,
    /// `correct_overrides / overrides`; 0 when nothing was overridden.
    pub correction_accuracy: f64,
    /// Injected notes whose emitted pitch equals the original.
    pub restored: usize,
    pub clean_note_ons: usize,
    pub false_overrides: usize,
    pub false_override_rate: f64,
    pub latency_mean_us: f64,
    pub latency_p50_us: u64,
    pub latency_p99_us: u64,
    pub latency_max_us: u64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[u64], pct: f64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Scores per-event decisions on a corrupted track against the injection
/// labels. `original` is the clean track the corruption started from.
pub fn score(original: &MidiTrack, report: &InjectionReport, decisions: &[Decision]) -> EvalMetrics {
    let mut m = EvalMetrics {
        note_ons: 0,
        injected: report.labels.len(),
        flagged: 0,
        true_positives: 0,
        detection_precision: 0.0,
        detection_recall: 0.0,
        overrides: 0,
        correct_overrides: 0,
        correction_accuracy: 0.0,
        restored: 0,
        clean_note_ons: 0,
        false_overrides: 0,
        false_override_rate: 0.0,
        latency_mean_us: 0.0,
        latency_p50_us: 0,
        latency_p99_us: 0,
        latency_max_us: 0,
    };
    let mut latencies = Vec::new();
    for (i, d) in decisions.iter().enumerate() {
        if d.kind != NoteKind::NoteOn {
            continue;
        }
        m.note_ons += 1;
        latencies.push(d.latency_us);
        let injected = report.labels.contains_key(&i);
        let clean_pitch = original.events[i].pitch;
        if d.flagged_error {
            m.flagged += 1;
            m.true_positives += usize::from(injected);
        }
        if d.overridden {
            m.overrides += 1;
            m.correct_overrides += usize::from(d.emitted_pitch == clean_pitch);
        }
        if injected {
            m.restored += usize::from(d.emitted_pitch == clean_pitch);
        } else {
            m.clean_note_ons += 1;
            m.false_overrides += usize::from(d.overridden);
        }
    }
    m.detection_precision = ratio(m.true_positives, m.flagged);
    m.detection_recall = ratio(m.true_positives, m.injected);
    m.correction_accuracy = ratio(m.correct_overrides, m.overrides);
    m.false_override_rate = ratio(m.false_overrides, m.clean_note_ons);
    if !latencies.is_empty() {
        m.latency_mean_us = latencies.iter().sum::<u64>() as f64 / latencies.len() as f64;
        m.latency_p50_us = percentile(&latencies, 50.0);
        m.latency_p99_us = percentile(&latencies, 99.0);
        m.latency_max_us = latencies.iter().copied().max().unwrap_or(0);
    }
    m
}

/// Injects errors into `track`, corrects the corrupted stream from a zero
/// state and scores the result.
pub fn evaluate(
    track: &MidiTrack,
    cfg: &CorrectionConfig,
    model: Option<Arc<LstmModel>>,
    rate: f64,
    seed: u64,
) -> Result<(EvalMetrics, InjectionReport, Vec<Decision>), EngineError> {
    let report = inject_errors(track, rate, cfg.max_shift, seed)?;
    let (_, decisions) = correct_file(&report.corrupted, cfg, model)?;
    let metrics = score(track, &report, &decisions);
    Ok((metrics, report, decisions))
}

impl EvalMetrics {
    /// Two-column CSV, `metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let rows: [(&str, String); 18] = [
            ("note_ons", self.note_ons.to_string()),
            ("injected", self.injected.to_string()),
            ("flagged", self.flagged.to_string()),
            ("true_positives", self.true_positives.to_string()),
            ("detection_precision", format!("{:.6}", self.detection_precision)),
            ("detection_recall", format!("{:.6}", self.detection_recall)),
            ("overrides", self.overrides.to_string()),
            ("correct_overrides", self.correct_overrides.to_string()),
            ("correction_accuracy", format!("{:.6}", self.correction_accuracy)),
            ("restored", self.restored.to_string()),
            ("clean_note_ons", self.clean_note_ons.to_string()),
            ("false_overrides", self.false_overrides.to_string()),
            ("false_override_rate", format!("{:.6}", self.false_override_rate)),
            ("latency_mean_us", format!("{:.3}", self.latency_mean_us)),
            ("latency_p50_us", self.latency_p50_us.to_string()),
            ("latency_p99_us", self.latency_p99_us.to_string()),
            ("latency_max_us", self.latency_max_us.to_string()),
            ("detection_f1", format!("{:.6}", f1(self.detection_precision, self.detection_recall))),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
