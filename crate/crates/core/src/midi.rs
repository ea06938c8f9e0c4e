//! Standard MIDI File codec.
//!
//! Parsing keeps only note events. All tracks (and all channels) are merged
//! into a single time-ordered stream, velocity-0 note-ons become note-offs and
//! note pairing is repaired: unpaired note-offs are dropped and notes still
//! sounding at the end of the file get a synthesized note-off.
//!
//! Serialization always emits a format-0 file with a single channel-0 track
//! and never uses running status.


use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest valid MIDI data value (pitch and velocity).
pub const MAX_DATA: u8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteKind {
    NoteOff,
    NoteOn,
}

/// One timed note event. `delta_ticks` is relative to the previous event of
/// the same stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub kind: NoteKind,
    pub pitch: u8,
    pub velocity: u8,
    pub delta_ticks: u32,
}

impl NoteEvent {
    pub fn on(pitch: u8, velocity: u8, delta_ticks: u32) -> Self {
        NoteEvent { kind: NoteKind::NoteOn, pitch, velocity, delta_ticks }
    }

    pub fn off(pitch: u8, velocity: u8, delta_ticks: u32) -> Self {
        NoteEvent { kind: NoteKind::NoteOff, pitch, velocity, delta_ticks }
    }

    pub fn is_on(&self) -> bool {
        self.kind == NoteKind::NoteOn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MidiTrack {
    pub ticks_per_beat: u16,
    pub events: Vec<NoteEvent>,
}

impl MidiTrack {
    pub fn new(ticks_per_beat: u16, events: Vec<NoteEvent>) -> Self {
        MidiTrack { ticks_per_beat, events }
    }

    pub fn note_on_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_on()).count()
    }

    /// Absolute tick of every event.
    pub fn absolute_ticks(&self) -> Vec<u64> {
        let mut now = 0u64;
        self.events
            .iter()
            .map(|e| {
                now += u64::from(e.delta_ticks);
                now
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("bad chunk magic at byte {offset}: expected {expected}")]
    BadMagic { offset: usize, expected: &'static str },
    #[error("truncated data at byte {offset}")]
    Truncated { offset: usize },
    #[error("undefined status byte 0x{status:02x} at byte {offset}")]
    BadStatus { offset: usize, status: u8 },
    #[error("data byte without running status at byte {offset}")]
    MissingStatus { offset: usize },
    #[error("unsupported SMF format {format} at byte {offset}")]
    UnsupportedFormat { offset: usize, format: u16 },
    #[error("unsupported time division 0x{division:04x} at byte {offset}")]
    UnsupportedDivision { offset: usize, division: u16 },
    #[error("variable-length quantity longer than 4 bytes at byte {offset}")]
    BadVarLen { offset: usize },
    #[error("invalid track: {0}")]
    InvalidTrack(String),
}

impl MidiError {
    /// Byte offset the error refers to, when there is one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            MidiError::BadMagic { offset, .. }
            | MidiError::Truncated { offset }
            | MidiError::BadStatus { offset, .. }
            | MidiError::MissingStatus { offset }
            | MidiError::UnsupportedFormat { offset, .. }
            | MidiError::UnsupportedDivision { offset, .. }
            | MidiError::BadVarLen { offset } => Some(*offset),
            MidiError::InvalidTrack(_) => None,
        }
    }
}

/// Counters for the repairs made while normalizing a parsed file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub tracks: u16,
    pub dropped_note_offs: usize,
    pub synthesized_note_offs: usize,
}

/// A note event on an absolute time axis, as produced by a single track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedEvent {
    pub tick: u64,
    pub kind: NoteKind,
    pub pitch: u8,
    pub velocity: u8,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Cursor { bytes, pos }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self.bytes.get(self.pos).ok_or(MidiError::Truncated { offset: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Result<u8, MidiError> {
        self.bytes.get(self.pos).copied().ok_or(MidiError::Truncated { offset: self.pos })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MidiError::Truncated { offset: self.bytes.len() }),
        }
    }

    fn u16_be(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32_be(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn var_len(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::BadVarLen { offset: start })
    }
}

/// Appends `value` as a variable-length quantity. Values above 0x0FFF_FFFF
/// do not fit in four bytes and are split by the caller.
pub fn write_var_len(out: &mut Vec<u8>, value: u32) {
    debug_assert!(value <= 0x0fff_ffff);
    let mut buf = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | cont);
    }
}

/// Parses an SMF (format 0 or 1) into a merged, normalized note stream.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiTrack, MidiError> {
    parse_smf_with_report(bytes).map(|(t, _)| t)
}

pub fn parse_smf_with_report(bytes: &[u8]) -> Result<(MidiTrack, ParseReport), MidiError> {
    let mut cur = Cursor::new(bytes, 0);
    if cur.take(4).map_err(|_| MidiError::BadMagic { offset: 0, expected: "MThd" })? != b"MThd" {
        return Err(MidiError::BadMagic { offset: 0, expected: "MThd" });
    }
    let header_len = cur.u32_be()? as usize;
    if header_len < 6 {
        return Err(MidiError::Truncated { offset: cur.pos });
    }
    let header_start = cur.pos;
    let format = cur.u16_be()?;
    let ntracks = cur.u16_be()?;
    let division = cur.u16_be()?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat { offset: header_start, format });
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(MidiError::UnsupportedDivision { offset: header_start + 4, division });
    }
    cur.take(header_len - 6)?;

    let mut tracks = Vec::with_capacity(usize::from(ntracks));
    while tracks.len() < usize::from(ntracks) {
        if cur.at_end() {
            return Err(MidiError::Truncated { offset: cur.pos });
        }
        let magic_at = cur.pos;
        let magic = cur.take(4)?;
        let len = cur.u32_be()? as usize;
        let body_start = cur.pos;
        if body_start + len > bytes.len() {
            return Err(MidiError::Truncated { offset: bytes.len() });
        }
        match magic {
            b"MTrk" => {
                tracks.push(parse_track(&bytes[..body_start + len], body_start)?);
            }
            // Alien chunks are skipped per the SMF rules, but a missing
            // MTrk where the header promises one is reported.
            m if m.iter().all(|b| b.is_ascii_graphic()) => {}
            _ => return Err(MidiError::BadMagic { offset: magic_at, expected: "MTrk" }),
        }
        cur.pos = body_start + len;
    }

    let mut report = ParseReport::default();
    let repaired = tracks.into_iter().map(|(events, last)| repair_track(events, last, &mut report)).collect();
    let events = to_deltas(&merge_and_order(repaired));
    report.tracks = ntracks;
    Ok((MidiTrack::new(division, events), report))
}

/// Parses one MTrk body into absolute-time note events. `bytes` ends at the
/// end of the chunk. Returns the events and the final tick of the track.
fn parse_track(bytes: &[u8], start: usize) -> Result<(Vec<TimedEvent>, u64), MidiError> {
    let mut cur = Cursor::new(bytes, start);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut out = Vec::new();
    while !cur.at_end() {
        tick += u64::from(cur.var_len()?);
        let status_at = cur.pos;
        let first = cur.peek()?;
        let status = if first & 0x80 != 0 {
            cur.pos += 1;
            first
        } else {
            running.ok_or(MidiError::MissingStatus { offset: status_at })?
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let d1 = data_byte(&mut cur)?;
                let d2 = match status & 0xf0 {
                    0xc0 | 0xd0 => 0,
                    _ => data_byte(&mut cur)?,
                };
                match status & 0xf0 {
                    0x90 if d2 > 0 => out.push(TimedEvent { tick, kind: NoteKind::NoteOn, pitch: d1, velocity: d2 }),
                    0x90 => out.push(TimedEvent { tick, kind: NoteKind::NoteOff, pitch: d1, velocity: 0 }),
                    0x80 => out.push(TimedEvent { tick, kind: NoteKind::NoteOff, pitch: d1, velocity: d2 }),
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = cur.var_len()? as usize;
                cur.take(len)?;
            }
            0xff => {
                let kind = cur.u8()?;
                let len = cur.var_len()? as usize;
                cur.take(len)?;
                if kind == 0x2f {
                    return Ok((out, tick));
                }
            }
            other => return Err(MidiError::BadStatus { offset: status_at, status: other }),
        }
    }
    Ok((out, tick))
}

fn data_byte(cur: &mut Cursor<'_>) -> Result<u8, MidiError> {
    let at = cur.pos;
    let b = cur.u8()?;
    if b & 0x80 != 0 {
        return Err(MidiError::BadStatus { offset: at, status: b });
    }
    Ok(b)
}

/// Sort rank of an event among events sharing its tick: note-offs that
/// close an earlier note, then note-ons, then note-offs closing a note that
/// started on this same tick (zero-length notes).
fn tie_ranks(events: &[TimedEvent]) -> Vec<u8> {
    let mut open: Vec<Vec<u64>> = vec![Vec::new(); 128];
    events
        .iter()
        .map(|e| {
            let stack = &mut open[usize::from(e.pitch & 0x7f)];
            match e.kind {
                NoteKind::NoteOn => {
                    stack.push(e.tick);
                    1
                }
                NoteKind::NoteOff => match stack.pop() {
                    Some(on_tick) if on_tick == e.tick => 2,
                    _ => 0,
                },
            }
        })
        .collect()
}

/// Merges per-track absolute-time event lists into one stream ordered by
/// tick, then note-off before note-on, then pitch ascending. The one
/// exception to off-before-on is a note-off closing a note that began on the
/// same tick, which stays after it. Equal keys keep track order.
pub fn merge_and_order(tracks: Vec<Vec<TimedEvent>>) -> Vec<TimedEvent> {
    let mut keyed: Vec<((u64, u8, u8), TimedEvent)> = Vec::new();
    for track in tracks {
        let ranks = tie_ranks(&track);
        keyed.extend(track.into_iter().zip(ranks).map(|(e, r)| ((e.tick, r, e.pitch), e)));
    }
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, e)| e).collect()
}

/// Restores note pairing within one track: a note-off closes the most recent
/// open note of its pitch, unpaired note-offs are dropped and notes still open
/// at `end_tick` are closed there.
fn repair_track(events: Vec<TimedEvent>, end_tick: u64, report: &mut ParseReport) -> Vec<TimedEvent> {
    let mut open = [0usize; 128];
    let mut kept = Vec::with_capacity(events.len());
    for e in events {
        let slot = &mut open[usize::from(e.pitch & 0x7f)];
        match e.kind {
            NoteKind::NoteOn => {
                *slot += 1;
                kept.push(e);
            }
            NoteKind::NoteOff if *slot > 0 => {
                *slot -= 1;
                kept.push(e);
            }
            NoteKind::NoteOff => report.dropped_note_offs += 1,
        }
    }
    let last = kept.last().map_or(0, |e| e.tick).max(end_tick);
    for (pitch, &n) in open.iter().enumerate() {
        for _ in 0..n {
            kept.push(TimedEvent { tick: last, kind: NoteKind::NoteOff, pitch: pitch as u8, velocity: 0 });
            report.synthesized_note_offs += 1;
        }
    }
    kept
}

/// Canonicalizes absolute-time tracks into a [`MidiTrack`] exactly as
/// [`parse_smf`] does after decoding the bytes.
pub fn normalize(ticks_per_beat: u16, tracks: Vec<Vec<TimedEvent>>) -> (MidiTrack, ParseReport) {
    let mut report = ParseReport { tracks: tracks.len() as u16, ..Default::default() };
    let repaired = tracks
        .into_iter()
        .map(|events| {
            let end = events.last().map_or(0, |e| e.tick);
            repair_track(events, end, &mut report)
        })
        .collect();
    (MidiTrack::new(ticks_per_beat, to_deltas(&merge_and_order(repaired))), report)
}

fn to_deltas(events: &[TimedEvent]) -> Vec<NoteEvent> {
    let mut prev = 0u64;
    events
        .iter()
        .map(|e| {
            let delta = u32::try_from(e.tick - prev).unwrap_or(u32::MAX);
            prev = e.tick;
            NoteEvent { kind: e.kind, pitch: e.pitch, velocity: e.velocity, delta_ticks: delta }
        })
        .collect()
}

/// Checks the [`MidiTrack`] invariants: data ranges, no velocity-0 note-on,
/// positive resolution and well-formed note pairing.
pub fn validate(track: &MidiTrack) -> Result<(), MidiError> {
    if track.ticks_per_beat == 0 || track.ticks_per_beat & 0x8000 != 0 {
        return Err(MidiError::InvalidTrack(format!("ticks_per_beat {} out of range", track.ticks_per_beat)));
    }
    let mut open = [0usize; 128];
    for (i, e) in track.events.iter().enumerate() {
        if e.pitch > MAX_DATA || e.velocity > MAX_DATA {
            return Err(MidiError::InvalidTrack(format!("event {i}: data byte out of range")));
        }
        match e.kind {
            NoteKind::NoteOn if e.velocity == 0 => {
                return Err(MidiError::InvalidTrack(format!("event {i}: note-on with velocity 0")));
            }
            NoteKind::NoteOn => open[usize::from(e.pitch)] += 1,
            NoteKind::NoteOff => {
                let slot = &mut open[usize::from(e.pitch)];
                if *slot == 0 {
                    return Err(MidiError::InvalidTrack(format!("event {i}: note-off without open note {}", e.pitch)));
                }
                *slot -= 1;
            }
        }
    }
    Ok(())
}

/// Serializes a track as a format-0 SMF on channel 0, without running status.
///
/// Deltas too large for one variable-length quantity are carried by empty
/// text meta events, which the parser ignores.
pub fn serialize_smf(track: &MidiTrack) -> Vec<u8> {
    let mut body = Vec::with_capacity(track.events.len() * 4 + 4);
    for e in &track.events {
        let mut delta = e.delta_ticks;
        while delta > 0x0fff_ffff {
            write_var_len(&mut body, 0x0fff_ffff);
            body.extend_from_slice(&[0xff, 0x01, 0x00]);
            delta -= 0x0fff_ffff;
        }
        write_var_len(&mut body, delta);
        let status = match e.kind {
            NoteKind::NoteOn => 0x90,
            NoteKind::NoteOff => 0x80,
        };
        body.extend_from_slice(&[status, e.pitch & 0x7f, e.velocity & 0x7f]);
    }
    body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(body.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&track.ticks_per_beat.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}
