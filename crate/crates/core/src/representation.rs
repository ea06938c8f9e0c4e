//! Dataset representations: bucketized note tokens, training windows,
//! feature encodings and the `MTDS` dataset container.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiTrack, NoteKind};

/// Number of piano keys; the model's output alphabet.
pub const PIANO_KEYS: usize = 88;
/// MIDI number of the lowest piano key (A0).
pub const LOWEST_KEY: u8 = 21;
/// MIDI number of the highest piano key (C8).
pub const HIGHEST_KEY: u8 = 108;
pub const VELOCITY_BUCKETS: usize = 8;
pub const DELTA_BUCKETS: usize = 12;
/// Resolution every delta is rescaled to before bucketing.
pub const REFERENCE_TICKS_PER_BEAT: u32 = 480;

/// Lower bounds of velocity buckets 1..=7; bucket 0 starts at 0.
const VELOCITY_BOUNDS: [u8; 7] = [40, 50, 58, 65, 71, 78, 86];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReprError {
    #[error("velocity {0} out of range 0..=127")]
    VelocityOutOfRange(u32),
    #[error("ticks_per_beat must be positive")]
    ZeroTicksPerBeat,
    #[error("event {index}: {reason}")]
    Contract { index: usize, reason: String },
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error("dataset io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ReprError {
    fn from(e: std::io::Error) -> Self {
        ReprError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Basic,
    Velocity,
    BasicDelta,
    Full,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Basic, Level::Velocity, Level::BasicDelta, Level::Full];

    pub fn has_kind(self) -> bool {
        self == Level::Full
    }

    pub fn has_velocity(self) -> bool {
        matches!(self, Level::Velocity | Level::Full)
    }

    pub fn has_delta(self) -> bool {
        matches!(self, Level::BasicDelta | Level::Full)
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Level> {
        Level::ALL.get(usize::from(tag)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Basic => "basic",
            Level::Velocity => "velocity",
            Level::BasicDelta => "basic-delta",
            Level::Full => "full",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown level '{s}' (expected basic, velocity, basic-delta or full)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingScheme {
    OneHotBoth,
    OrdinalInOneHotOut,
    OrdinalBoth,
}

impl EncodingScheme {
    pub const ALL: [EncodingScheme; 3] =
        [EncodingScheme::OneHotBoth, EncodingScheme::OrdinalInOneHotOut, EncodingScheme::OrdinalBoth];

    pub fn one_hot_input(self) -> bool {
        self == EncodingScheme::OneHotBoth
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<EncodingScheme> {
        EncodingScheme::ALL.get(usize::from(tag)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EncodingScheme::OneHotBoth => "one-hot",
            EncodingScheme::OrdinalInOneHotOut => "ordinal-in",
            EncodingScheme::OrdinalBoth => "ordinal",
        }
    }

    /// Width of one encoded timestep.
    pub fn input_width(self, level: Level) -> usize {
        let (kind, pitch, vel, delta) = if self.one_hot_input() { (2, PIANO_KEYS, VELOCITY_BUCKETS, DELTA_BUCKETS) } else { (1, 1, 1, 1) };
        pitch
            + if level.has_kind() { kind } else { 0 }
            + if level.has_velocity() { vel } else { 0 }
            + if level.has_delta() { delta } else { 0 }
    }

    /// Recovers the input layout from a model's input width. The two ordinal
    /// input schemes share a layout, so `OrdinalBoth` stands for both.
    pub fn for_input_width(level: Level, width: usize) -> Option<EncodingScheme> {
        [EncodingScheme::OneHotBoth, EncodingScheme::OrdinalBoth].into_iter().find(|s| s.input_width(level) == width)
    }
}

impl fmt::Display for EncodingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EncodingScheme::ALL
            .into_iter()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown encoding '{s}' (expected one-hot, ordinal-in or ordinal)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedEvent {
    pub kind: NoteKind,
    /// Piano key index, MIDI pitch minus 21.
    pub key: u8,
    pub velocity_bucket: Option<u8>,
    pub delta_bucket: Option<u8>,
}

impl TokenizedEvent {
    pub fn pitch(&self) -> u8 {
        self.key + LOWEST_KEY
    }

    /// Checks that the attributes present match `level`.
    pub fn check(&self, level: Level) -> Result<(), String> {
        if usize::from(self.key) >= PIANO_KEYS {
            return Err(format!("key index {} out of range", self.key));
        }
        if !level.has_kind() && self.kind != NoteKind::NoteOn {
            return Err(format!("note-off token at level {level}"));
        }
        match (level.has_velocity(), self.velocity_bucket) {
            (true, None) => return Err(format!("missing velocity bucket at level {level}")),
            (false, Some(_)) => return Err(format!("unexpected velocity bucket at level {level}")),
            (true, Some(v)) if usize::from(v) >= VELOCITY_BUCKETS => return Err(format!("velocity bucket {v} out of range")),
            _ => {}
        }
        match (level.has_delta(), self.delta_bucket) {
            (true, None) => Err(format!("missing delta bucket at level {level}")),
            (false, Some(_)) => Err(format!("unexpected delta bucket at level {level}")),
            (true, Some(d)) if usize::from(d) >= DELTA_BUCKETS => Err(format!("delta bucket {d} out of range")),
            _ => Ok(()),
        }
    }
}

pub fn bucket_velocity(velocity: u32) -> Result<u8, ReprError> {
    if velocity > 127 {
        return Err(ReprError::VelocityOutOfRange(velocity));
    }
    Ok(VELOCITY_BOUNDS.iter().take_while(|&&b| velocity >= u32::from(b)).count() as u8)
}

/// Rescales a delta to [`REFERENCE_TICKS_PER_BEAT`], rounding half up.
pub fn normalize_delta(delta_ticks: u64, ticks_per_beat: u32) -> Result<u64, ReprError> {
    if ticks_per_beat == 0 {
        return Err(ReprError::ZeroTicksPerBeat);
    }
    let tpb = u128::from(ticks_per_beat);
    let scaled = (2 * u128::from(delta_ticks) * u128::from(REFERENCE_TICKS_PER_BEAT) + tpb) / (2 * tpb);
    Ok(u64::try_from(scaled).unwrap_or(u64::MAX))
}

/// Logarithmic bucket of an already-normalized delta: 0 for 0, otherwise
/// `floor(log2 d) + 1`, saturating at 11.
pub fn bucket_normalized_delta(normalized: u64) -> u8 {
    if normalized == 0 {
        return 0;
    }
    let bits = 64 - normalized.leading_zeros();
    bits.min(DELTA_BUCKETS as u32 - 1) as u8
}

pub fn bucket_delta(delta_ticks: u64, ticks_per_beat: u32) -> Result<u8, ReprError> {
    Ok(bucket_normalized_delta(normalize_delta(delta_ticks, ticks_per_beat)?))
}

/// Counts of events left out while tokenizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeReport {
    pub dropped_note_offs: usize,
    pub dropped_out_of_range: usize,
}

/// Converts a note stream to tokens at `level`.
///
/// Below `Full`, note-offs are dropped and deltas measure the time between
/// kept events, so a dropped event's delta carries over to the next token.
pub fn tokenize(track: &MidiTrack, level: Level) -> (Vec<TokenizedEvent>, TokenizeReport) {
    let mut report = TokenizeReport::default();
    let mut out = Vec::new();
    let mut carried = 0u64;
    let tpb = u32::from(track.ticks_per_beat.max(1));
    for e in &track.events {
        carried += u64::from(e.delta_ticks);
        if e.kind == NoteKind::NoteOff && !level.has_kind() {
            report.dropped_note_offs += 1;
            continue;
        }
        if !(LOWEST_KEY..=HIGHEST_KEY).contains(&e.pitch) {
            report.dropped_out_of_range += 1;
            continue;
        }
        out.push(TokenizedEvent {
            kind: e.kind,
            key: e.pitch - LOWEST_KEY,
            velocity_bucket: level.has_velocity().then(|| bucket_velocity(u32::from(e.velocity.min(127))).unwrap_or(0)),
            delta_bucket: level.has_delta().then(|| bucket_delta(carried, tpb).unwrap_or(0)),
        });
        carried = 0;
    }
    (out, report)
}

/// Fixed-length training windows, each paired with the key index of the
/// event that follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetWindowSet {
    pub level: Level,
    pub scheme: EncodingScheme,
    pub sequence_length: usize,
    pub inputs: Vec<Vec<TokenizedEvent>>,
    pub targets: Vec<u8>,
}

impl DatasetWindowSet {
    pub fn empty(level: Level, scheme: EncodingScheme, sequence_length: usize) -> Self {
        DatasetWindowSet { level, scheme, sequence_length, inputs: Vec::new(), targets: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn extend(&mut self, other: DatasetWindowSet) {
        debug_assert_eq!(self.sequence_length, other.sequence_length);
        self.inputs.extend(other.inputs);
        self.targets.extend(other.targets);
    }
}

/// Slides a window of `sequence_length` tokens over `events` with `stride`.
/// Streams too short to hold a window and its target yield an empty set.
pub fn build_windows(
    events: &[TokenizedEvent],
    level: Level,
    scheme: EncodingScheme,
    sequence_length: usize,
    stride: usize,
) -> DatasetWindowSet {
    let mut set = DatasetWindowSet::empty(level, scheme, sequence_length);
    if sequence_length == 0 || stride == 0 || events.len() <= sequence_length {
        return set;
    }
    for start in (0..events.len() - sequence_length).step_by(stride) {
        set.inputs.push(events[start..start + sequence_length].to_vec());
        set.targets.push(events[start + sequence_length].key);
    }
    set
}

/// Row-major feature matrix, one row per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Appends the features of one token. Ordinal attributes are scaled to
/// `[0, 1]` by their cardinality so every input has a comparable range.
pub fn encode_event_into(
    out: &mut Vec<f64>,
    ev: &TokenizedEvent,
    scheme: EncodingScheme,
    level: Level,
) -> Result<(), String> {
    ev.check(level)?;
    let kind_index = usize::from(ev.kind == NoteKind::NoteOn);
    let mut push = |value: usize, cardinality: usize| {
        if scheme.one_hot_input() {
            let start = out.len();
            out.resize(start + cardinality, 0.0);
            out[start + value] = 1.0;
        } else {
            out.push(value as f64 / (cardinality - 1) as f64);
        }
    };
    if level.has_kind() {
        push(kind_index, 2);
    }
    push(usize::from(ev.key), PIANO_KEYS);
    if let Some(v) = ev.velocity_bucket {
        push(usize::from(v), VELOCITY_BUCKETS);
    }
    if let Some(d) = ev.delta_bucket {
        push(usize::from(d), DELTA_BUCKETS);
    }
    Ok(())
}

pub fn encode_event(ev: &TokenizedEvent, scheme: EncodingScheme, level: Level) -> Result<Vec<f64>, ReprError> {
    let mut out = Vec::with_capacity(scheme.input_width(level));
    encode_event_into(&mut out, ev, scheme, level).map_err(|reason| ReprError::Contract { index: 0, reason })?;
    Ok(out)
}

pub fn encode(window: &[TokenizedEvent], scheme: EncodingScheme, level: Level) -> Result<FeatureMatrix, ReprError> {
    let width = scheme.input_width(level);
    let mut data = Vec::with_capacity(width * window.len());
    for (index, ev) in window.iter().enumerate() {
        encode_event_into(&mut data, ev, scheme, level).map_err(|reason| ReprError::Contract { index, reason })?;
    }
    Ok(FeatureMatrix { width, data })
}

/// The integer attribute tuple of a token: (kind?, key, velocity?, delta?).
pub fn ordinal_tuple(ev: &TokenizedEvent, level: Level) -> Vec<u8> {
    let mut t = Vec::with_capacity(4);
    if level.has_kind() {
        t.push(u8::from(ev.kind == NoteKind::NoteOn));
    }
    t.push(ev.key);
    t.extend(ev.velocity_bucket);
    t.extend(ev.delta_bucket);
    t
}

/// Inverts [`encode`] for either input layout.
pub fn decode(features: &FeatureMatrix, scheme: EncodingScheme, level: Level) -> Result<Vec<TokenizedEvent>, ReprError> {
    if features.width != scheme.input_width(level) {
        return Err(ReprError::Contract { index: 0, reason: format!("width {} does not match {level}/{scheme}", features.width) });
    }
    let mut attrs: Vec<usize> = Vec::new();
    if level.has_kind() {
        attrs.push(2);
    }
    attrs.push(PIANO_KEYS);
    if level.has_velocity() {
        attrs.push(VELOCITY_BUCKETS);
    }
    if level.has_delta() {
        attrs.push(DELTA_BUCKETS);
    }
    (0..features.rows())
        .map(|r| {
            let row = features.row(r);
            let mut at = 0;
            let mut values = Vec::with_capacity(attrs.len());
            for &card in &attrs {
                let v = if scheme.one_hot_input() {
                    let seg = &row[at..at + card];
                    at += card;
                    let hot: Vec<usize> = seg.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(i, _)| i).collect();
                    match hot.as_slice() {
                        [i] if seg[*i] == 1.0 => *i,
                        _ => return Err(ReprError::Contract { index: r, reason: "not a one-hot segment".into() }),
                    }
                } else {
                    let x = row[at] * (card - 1) as f64;
                    at += 1;
                    let i = x.round();
                    if !(0.0..card as f64).contains(&i) || (x - i).abs() > 1e-9 {
                        return Err(ReprError::Contract { index: r, reason: format!("ordinal value {} off grid", row[at - 1]) });
                    }
                    i as usize
                };
                values.push(v as u8);
            }
            let mut it = values.into_iter();
            let kind = if level.has_kind() {
                if it.next() == Some(1) {
                    NoteKind::NoteOn
                } else {
                    NoteKind::NoteOff
                }
            } else {
                NoteKind::NoteOn
            };
            let key = it.next().unwrap_or(0);
            let velocity_bucket = if level.has_velocity() { it.next() } else { None };
            let delta_bucket = if level.has_delta() { it.next() } else { None };
            Ok(TokenizedEvent { kind, key, velocity_bucket, delta_bucket })
        })
        .collect()
}

const DATASET_MAGIC: &[u8; 4] = b"MTDS";
pub const DATASET_VERSION: u16 = 1;

/// Writes the `MTDS` container: header, then per window `sequence_length`
/// tokens of u8 fields (kind?, key, velocity?, delta?) followed by a u8
/// target.
pub fn write_dataset<W: Write>(set: &DatasetWindowSet, mut w: W) -> Result<(), ReprError> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&[set.level.tag(), set.scheme.tag()])?;
    w.write_all(&(set.sequence_length as u32).to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for (window, &target) in set.inputs.iter().zip(&set.targets) {
        buf.clear();
        for ev in window {
            buf.extend(ordinal_tuple(ev, set.level));
        }
        buf.push(target);
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<DatasetWindowSet, ReprError> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|_| ReprError::Format("truncated header".into()))?;
    if &head[0..4] != DATASET_MAGIC {
        return Err(ReprError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != DATASET_VERSION {
        return Err(ReprError::Format(format!("unsupported version {version}")));
    }
    let level = Level::from_tag(head[6]).ok_or_else(|| ReprError::Format(format!("bad level tag {}", head[6])))?;
    let scheme = EncodingScheme::from_tag(head[7]).ok_or_else(|| ReprError::Format(format!("bad scheme tag {}", head[7])))?;
    let sequence_length = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
    let fields = 1 + usize::from(level.has_kind()) + usize::from(level.has_velocity()) + usize::from(level.has_delta());
    let record = sequence_length * fields + 1;
    let mut set = DatasetWindowSet::empty(level, scheme, sequence_length);
    let mut buf = vec![0u8; record];
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| ReprError::Format(format!("truncated at window {i}")))?;
        let mut window = Vec::with_capacity(sequence_length);
        for chunk in buf[..record - 1].chunks(fields) {
            let mut it = chunk.iter().copied();
            let kind = if level.has_kind() {
                if it.next() == Some(1) {
                    NoteKind::NoteOn
                } else {
                    NoteKind::NoteOff
                }
            } else {
                NoteKind::NoteOn
            };
            let ev = TokenizedEvent {
                kind,
                key: it.next().unwrap_or(0),
                velocity_bucket: if level.has_velocity() { it.next() } else { None },
                delta_bucket: if level.has_delta() { it.next() } else { None },
            };
            ev.check(level).map_err(|e| ReprError::Format(format!("window {i}: {e}")))?;
            window.push(ev);
        }
        let target = buf[record - 1];
        if usize::from(target) >= PIANO_KEYS {
            return Err(ReprError::Format(format!("window {i}: target {target} out of range")));
        }
        set.inputs.push(window);
        set.targets.push(target);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ReprError::Format("trailing bytes after last window".into()));
    }
    Ok(set)
}

/// JSON sidecar written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub level: Level,
    pub scheme: EncodingScheme,
    pub sequence_length: usize,
    pub stride: usize,
    pub files: usize,
    pub tokens: usize,
    pub windows: usize,
    pub dropped_note_offs: usize,
    pub dropped_out_of_range: usize,
    pub target_occupancy: Vec<usize>,
    pub velocity_bucket_occupancy: Vec<usize>,
    pub delta_bucket_occupancy: Vec<usize>,
}

impl DatasetSummary {
    pub fn new(level: Level, scheme: EncodingScheme, sequence_length: usize, stride: usize) -> Self {
        DatasetSummary {
            level,
            scheme,
            sequence_length,
            stride,
            files: 0,
            tokens: 0,
            windows: 0,
            dropped_note_offs: 0,
            dropped_out_of_range: 0,
            target_occupancy: vec![0; PIANO_KEYS],
            velocity_bucket_occupancy: vec![0; VELOCITY_BUCKETS],
            delta_bucket_occupancy: vec![0; DELTA_BUCKETS],
        }
    }

    pub fn add_file(&mut self, tokens: &[TokenizedEvent], report: TokenizeReport, windows: &DatasetWindowSet) {
        self.files += 1;
        self.tokens += tokens.len();
        self.windows += windows.len();
        self.dropped_note_offs += report.dropped_note_offs;
        self.dropped_out_of_range += report.dropped_out_of_range;
        for t in tokens {
            if let Some(v) = t.velocity_bucket {
                self.velocity_bucket_occupancy[usize::from(v)] += 1;
            }
            if let Some(d) = t.delta_bucket {
                self.delta_bucket_occupancy[usize::from(d)] += 1;
            }
        }
        for &t in &windows.targets {
            self.target_occupancy[usize::from(t)] += 1;
        }
    }
}

/// Number of log2 bins used for the raw and normalized delta histograms:
/// bin 0 holds zero, bin k holds `[2^(k-1), 2^k)`.
pub const DELTA_LOG_BINS: usize = 34;

/// Corpus-wide distributions of note-on velocities and inter-onset deltas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub tracks: usize,
    pub note_ons: usize,
    pub velocity: Vec<u64>,
    pub raw_delta_log2: Vec<u64>,
    pub normalized_delta_log2: Vec<u64>,
    pub velocity_buckets: Vec<u64>,
    pub delta_buckets: Vec<u64>,
}

fn log2_bin(d: u64) -> usize {
    (64 - d.leading_zeros()) as usize
}

/// Histograms over note-on events. Deltas are onset-to-onset (note-offs do
/// not reset them), measured before and after rescaling to 480 ticks per
/// beat.
pub fn compute_stats(tracks: &[MidiTrack]) -> CorpusStats {
    let mut s = CorpusStats {
        tracks: tracks.len(),
        note_ons: 0,
        velocity: vec![0; 128],
        raw_delta_log2: vec![0; DELTA_LOG_BINS],
        normalized_delta_log2: vec![0; DELTA_LOG_BINS],
        velocity_buckets: vec![0; VELOCITY_BUCKETS],
        delta_buckets: vec![0; DELTA_BUCKETS],
    };
    for track in tracks {
        let tpb = u32::from(track.ticks_per_beat.max(1));
        let mut carried = 0u64;
        for e in &track.events {
            carried += u64::from(e.delta_ticks);
            if !e.is_on() {
                continue;
            }
            let v = e.velocity.min(127);
            s.note_ons += 1;
            s.velocity[usize::from(v)] += 1;
            s.velocity_buckets[usize::from(bucket_velocity(u32::from(v)).unwrap_or(0))] += 1;
            let norm = normalize_delta(carried, tpb).unwrap_or(0);
            s.raw_delta_log2[log2_bin(carried)] += 1;
            s.normalized_delta_log2[log2_bin(norm)] += 1;
            s.delta_buckets[usize::from(bucket_normalized_delta(norm))] += 1;
            carried = 0;
        }
    }
    s
}

impl CorpusStats {
    /// CSV with columns `section,bin,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,bin,count\n");
        out.push_str(&format!("tracks,0,{}\nnote_ons,0,{}\n", self.tracks, self.note_ons));
        let sections: [(&str, &Vec<u64>); 5] = [
            ("velocity", &self.velocity),
            ("velocity_bucket", &self.velocity_buckets),
            ("delta_raw_log2", &self.raw_delta_log2),
            ("delta_normalized_log2", &self.normalized_delta_log2),
            ("delta_bucket", &self.delta_buckets),
        ];
        for (name, hist) in sections {
            for (bin, count) in hist.iter().enumerate() {
                out.push_str(&format!("{name},{bin},{count}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::NoteEvent;

    #[test]
    fn velocity_bucket_examples() {
        assert_eq!(bucket_velocity(90).unwrap(), 7);
        assert_eq!(bucket_velocity(0).unwrap(), 0);
        assert_eq!(bucket_velocity(57).unwrap(), 2);
        assert_eq!(bucket_velocity(127).unwrap(), 7);
        assert_eq!(bucket_velocity(128), Err(ReprError::VelocityOutOfRange(128)));
    }

    #[test]
    fn delta_bucket_examples() {
        assert_eq!(bucket_delta(0, 480).unwrap(), 0);
        assert_eq!(bucket_delta(100, 480).unwrap(), 7);
        assert_eq!(bucket_delta(2048, 480).unwrap(), 11);
        assert_eq!(bucket_delta(1, 0), Err(ReprError::ZeroTicksPerBeat));
        // 96 tpb: 20 ticks -> 100 reference ticks.
        assert_eq!(normalize_delta(20, 96).unwrap(), 100);
        // Rounds half up: 1 tick at 960 tpb is exactly 0.5.
        assert_eq!(normalize_delta(1, 960).unwrap(), 1);
        assert_eq!(normalize_delta(1, 961).unwrap(), 0);
    }

    fn track(events: Vec<NoteEvent>) -> MidiTrack {
        MidiTrack::new(480, events)
    }

    #[test]
    fn tokenize_levels() {
        let t = track(vec![
            NoteEvent::on(60, 90, 0),
            NoteEvent::off(60, 0, 100),
            NoteEvent::on(10, 90, 0),
            NoteEvent::on(62, 45, 20),
            NoteEvent::off(10, 0, 0),
            NoteEvent::off(62, 0, 8),
        ]);
        let (basic, rep) = tokenize(&t, Level::Basic);
        assert_eq!(basic.iter().map(|e| e.key).collect::<Vec<_>>(), vec![39, 41]);
        assert_eq!(rep, TokenizeReport { dropped_note_offs: 3, dropped_out_of_range: 1 });
        assert!(basic.iter().all(|e| e.velocity_bucket.is_none() && e.delta_bucket.is_none()));

        let (vel, _) = tokenize(&t, Level::Velocity);
        assert_eq!(vel.iter().map(|e| e.velocity_bucket).collect::<Vec<_>>(), vec![Some(7), Some(1)]);

        // Delta of the second onset spans the dropped off and the dropped
        // out-of-range note: 100 + 0 + 20.
        let (bd, _) = tokenize(&t, Level::BasicDelta);
        assert_eq!(bd.iter().map(|e| e.delta_bucket).collect::<Vec<_>>(), vec![Some(0), Some(7)]);

        let (full, rep) = tokenize(&t, Level::Full);
        assert_eq!(rep.dropped_note_offs, 0);
        assert_eq!(rep.dropped_out_of_range, 2);
        let kinds: Vec<_> = full.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![NoteKind::NoteOn, NoteKind::NoteOff, NoteKind::NoteOn, NoteKind::NoteOff]);
        assert_eq!(full.iter().map(|e| e.delta_bucket).collect::<Vec<_>>(), vec![Some(0), Some(7), Some(5), Some(4)]);
    }

    fn tokens(n: usize) -> Vec<TokenizedEvent> {
        (0..n)
            .map(|i| TokenizedEvent { kind: NoteKind::NoteOn, key: i as u8, velocity_bucket: None, delta_bucket: None })
            .collect()
    }

    #[test]
    fn window_counts() {
        let s = build_windows(&tokens(10), Level::Basic, EncodingScheme::OneHotBoth, 4, 1);
        assert_eq!(s.len(), 6);
        assert!(s.inputs.iter().all(|w| w.len() == 4));
        assert_eq!(s.targets, vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(build_windows(&tokens(5), Level::Basic, EncodingScheme::OneHotBoth, 5, 1).len(), 0);
        assert_eq!(build_windows(&tokens(10), Level::Basic, EncodingScheme::OneHotBoth, 4, 3).targets, vec![4, 7]);
    }

    #[test]
    fn encode_widths_and_layout() {
        assert_eq!(EncodingScheme::OneHotBoth.input_width(Level::Basic), 88);
        assert_eq!(EncodingScheme::OneHotBoth.input_width(Level::Full), 110);
        assert_eq!(EncodingScheme::OrdinalBoth.input_width(Level::Full), 4);
        assert_eq!(EncodingScheme::for_input_width(Level::Full, 110), Some(EncodingScheme::OneHotBoth));
        assert_eq!(EncodingScheme::for_input_width(Level::Velocity, 2), Some(EncodingScheme::OrdinalBoth));
        assert_eq!(EncodingScheme::for_input_width(Level::Basic, 5), None);

        let ev = TokenizedEvent { kind: NoteKind::NoteOff, key: 3, velocity_bucket: Some(2), delta_bucket: Some(11) };
        let f = encode(&[ev], EncodingScheme::OneHotBoth, Level::Full).unwrap();
        let hot: Vec<usize> = f.data.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![0, 2 + 3, 90 + 2, 98 + 11]);

        let f = encode(&[ev], EncodingScheme::OrdinalBoth, Level::Full).unwrap();
        assert_eq!(f.data, vec![0.0, 3.0 / 87.0, 2.0 / 7.0, 1.0]);
        assert_eq!(ordinal_tuple(&ev, Level::Full), vec![0, 3, 2, 11]);
    }

    #[test]
    fn encode_rejects_attribute_mismatch() {
        let ev = TokenizedEvent { kind: NoteKind::NoteOn, key: 3, velocity_bucket: Some(2), delta_bucket: None };
        assert!(matches!(encode(&[ev], EncodingScheme::OneHotBoth, Level::Basic), Err(ReprError::Contract { index: 0, .. })));
        assert!(encode(&[ev], EncodingScheme::OneHotBoth, Level::Full).is_err());
        assert!(encode(&[ev], EncodingScheme::OneHotBoth, Level::Velocity).is_ok());
        let off = TokenizedEvent { kind: NoteKind::NoteOff, ..ev };
        assert!(encode(&[ev, off], EncodingScheme::OrdinalBoth, Level::Velocity).is_err());
    }

    #[test]
    fn stats_edge_cases() {
        let empty = compute_stats(&[]);
        assert!(empty.velocity.iter().chain(&empty.delta_buckets).all(|&c| c == 0));
        let one = compute_stats(&[track(vec![NoteEvent::on(60, 64, 0), NoteEvent::off(60, 0, 10)])]);
        assert_eq!(one.velocity[64], 1);
        assert_eq!(one.velocity.iter().sum::<u64>(), 1);
        assert_eq!(one.velocity_buckets[3], 1);
        let csv = one.to_csv();
        assert!(csv.starts_with("section,bin,count\n"));
        assert!(csv.contains("velocity,64,1\n"));
    }

    #[test]
    fn dataset_file_rejects_garbage() {
        assert!(matches!(read_dataset(&b"MTDX"[..]), Err(ReprError::Format(_))));
        let set = build_windows(&tokens(6), Level::Basic, EncodingScheme::OrdinalBoth, 2, 1);
        let mut bytes = Vec::new();
        write_dataset(&set, &mut bytes).unwrap();
        assert_eq!(read_dataset(&bytes[..]).unwrap(), set);
        assert!(read_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_dataset(&extra[..]).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(read_dataset(&bad_version[..]).is_err());
    }
}
