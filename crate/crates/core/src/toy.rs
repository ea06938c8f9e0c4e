//! Deterministic toy material: the scale/arpeggio training corpus and a set
//! of small SMF files exercising the corners of the file format.

use crate::midi::{write_var_len, MidiTrack, NoteEvent};

/// Keys in circle-of-fifths order, the order the scale corpus visits them.
pub const CIRCLE_OF_FIFTHS: [u8; 12] = [0, 7, 2, 9, 4, 11, 6, 1, 8, 3, 10, 5];
const MAJOR: [u8; 8] = [0, 2, 4, 5, 7, 9, 11, 12];
const MINOR: [u8; 8] = [0, 2, 3, 5, 7, 8, 10, 12];

/// One pass through a key: ascending and descending scale, then a broken
/// triad back down to the tonic.
pub fn key_phrase(tonic: u8, intervals: &[u8; 8]) -> Vec<u8> {
    let up: Vec<u8> = intervals.iter().map(|i| tonic + i).collect();
    let down: Vec<u8> = up.iter().rev().skip(1).copied().collect();
    let third = intervals[2];
    let arp = [third, 7, 12, 7, third, 0].map(|i| tonic + i);
    up.into_iter().chain(down).chain(arp).collect()
}

/// Pitch sequence of the scale corpus: `cycles` passes over all twelve major
/// keys with tonics between C3 and B3.
pub fn scale_corpus_pitches(cycles: usize) -> Vec<u8> {
    (0..cycles).flat_map(|_| CIRCLE_OF_FIFTHS.iter().flat_map(|&k| key_phrase(48 + k, &MAJOR))).collect()
}

/// Monophonic eighth-note rendering of a pitch sequence at 480 ticks per
/// beat, with a four-step accent pattern on velocity.
pub fn melody_track(pitches: &[u8]) -> MidiTrack {
    const STEP: u32 = 240;
    const HOLD: u32 = 200;
    let mut events = Vec::with_capacity(pitches.len() * 2);
    for (i, &p) in pitches.iter().enumerate() {
        let velocity = [88, 60, 72, 60][i % 4];
        let delta = if i == 0 { 0 } else { STEP - HOLD };
        events.push(NoteEvent::on(p, velocity, delta));
        events.push(NoteEvent::off(p, 0, HOLD));
    }
    MidiTrack::new(480, events)
}

/// The scale corpus used for training and evaluation: 20 cycles, 5040 notes.
pub fn scale_corpus() -> MidiTrack {
    melody_track(&scale_corpus_pitches(20))
}

/// A raw track event for the file builder.
#[derive(Debug, Clone)]
enum Raw {
    On(u8, u8, u8),
    Off(u8, u8, u8),
    Control(u8, u8, u8),
    Program(u8, u8),
    Bend(u8, u16),
    Meta(u8, Vec<u8>),
    Sysex(Vec<u8>),
}

impl Raw {
    fn status(&self) -> Option<u8> {
        match *self {
            Raw::On(ch, ..) => Some(0x90 | ch),
            Raw::Off(ch, ..) => Some(0x80 | ch),
            Raw::Control(ch, ..) => Some(0xb0 | ch),
            Raw::Program(ch, _) => Some(0xc0 | ch),
            Raw::Bend(ch, _) => Some(0xe0 | ch),
            Raw::Meta(..) | Raw::Sysex(_) => None,
        }
    }
}

struct FileBuilder {
    division: u16,
    running_status: bool,
    header_padding: usize,
    tracks: Vec<Vec<(u32, Raw)>>,
    /// Chunks inserted before the track with the given index.
    alien: Vec<(usize, [u8; 4], Vec<u8>)>,
    format: Option<u16>,
}

impl FileBuilder {
    fn new(division: u16) -> Self {
        FileBuilder { division, running_status: false, header_padding: 0, tracks: Vec::new(), alien: Vec::new(), format: None }
    }

    fn running(mut self) -> Self {
        self.running_status = true;
        self
    }

    fn track(mut self, events: Vec<(u32, Raw)>) -> Self {
        self.tracks.push(events);
        self
    }

    fn build(&self) -> Vec<u8> {
        let format = self.format.unwrap_or(if self.tracks.len() > 1 { 1 } else { 0 });
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&(6 + self.header_padding as u32).to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(self.tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.division.to_be_bytes());
        out.extend(std::iter::repeat_n(0, self.header_padding));
        for (ti, track) in self.tracks.iter().enumerate() {
            for (_, magic, body) in self.alien.iter().filter(|(at, ..)| *at == ti) {
                out.extend_from_slice(magic);
                out.extend_from_slice(&(body.len() as u32).to_be_bytes());
                out.extend_from_slice(body);
            }
            let mut body = Vec::new();
            let mut last_status = None;
            for (delta, ev) in track {
                write_var_len(&mut body, *delta);
                if let Some(status) = ev.status() {
                    if !(self.running_status && last_status == Some(status)) {
                        body.push(status);
                    }
                    last_status = Some(status);
                }
                match ev {
                    Raw::On(_, p, v) | Raw::Off(_, p, v) | Raw::Control(_, p, v) => body.extend_from_slice(&[*p, *v]),
                    Raw::Program(_, p) => body.push(*p),
                    Raw::Bend(_, b) => body.extend_from_slice(&[(b & 0x7f) as u8, (b >> 7) as u8 & 0x7f]),
                    Raw::Meta(kind, data) => {
                        body.extend_from_slice(&[0xff, *kind]);
                        write_var_len(&mut body, data.len() as u32);
                        body.extend_from_slice(data);
                    }
                    Raw::Sysex(data) => {
                        body.push(0xf0);
                        write_var_len(&mut body, data.len() as u32);
                        body.extend_from_slice(data);
                    }
                }
            }
            body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend_from_slice(&body);
        }
        out
    }
}

/// Note on/off pairs for a monophonic line; `zero_off` writes note-offs as
/// velocity-0 note-ons.
fn line(ch: u8, pitches: &[u8], step: u32, hold: u32, velocity: u8, zero_off: bool) -> Vec<(u32, Raw)> {
    let mut out = Vec::new();
    for (i, &p) in pitches.iter().enumerate() {
        out.push((if i == 0 { 0 } else { step - hold }, Raw::On(ch, p, velocity)));
        out.push((hold, if zero_off { Raw::On(ch, p, 0) } else { Raw::Off(ch, p, 64) }));
    }
    out
}

fn tempo(bpm: u32) -> Raw {
    let us = 60_000_000 / bpm;
    Raw::Meta(0x51, vec![(us >> 16) as u8, (us >> 8) as u8, us as u8])
}

fn name(s: &str) -> Raw {
    Raw::Meta(0x03, s.as_bytes().to_vec())
}

/// Small SMF files covering format 0 and 1, running status, velocity-0
/// note-offs, meta/sysex/controller noise, several resolutions and the
/// pairing repairs. Returned as (file name, bytes).
pub fn bundled_corpus() -> Vec<(String, Vec<u8>)> {
    let c_major = key_phrase(60, &MAJOR);
    let a_minor = key_phrase(57, &MINOR);
    let mut files: Vec<(&str, FileBuilder)> = Vec::new();

    files.push(("01_c_major_format0.mid", FileBuilder::new(480).track(line(0, &c_major, 240, 200, 80, false))));
    files.push(("02_running_status.mid", FileBuilder::new(480).running().track(line(0, &c_major, 240, 200, 70, true))));
    files.push((
        "03_format1_melody_bass.mid",
        FileBuilder::new(480)
            .track(line(0, &c_major, 240, 220, 90, false))
            .track(line(1, &[36, 43, 41, 43], 960, 900, 60, false)),
    ));
    files.push((
        "04_format1_conductor_track.mid",
        FileBuilder::new(384)
            .running()
            .track(vec![(0, name("conductor")), (0, tempo(96)), (0, Raw::Meta(0x58, vec![4, 2, 24, 8])), (1536, tempo(120))])
            .track(line(0, &a_minor, 192, 150, 75, true))
            .track(line(2, &[45, 52, 57], 768, 700, 55, true)),
    ));
    files.push(("05_tpb96.mid", FileBuilder::new(96).track(line(0, &a_minor, 48, 40, 66, false))));
    files.push(("06_tpb960.mid", FileBuilder::new(960).running().track(line(0, &c_major, 480, 400, 100, true))));
    files.push(("07_tpb220.mid", FileBuilder::new(220).track(line(0, &key_phrase(62, &MAJOR), 110, 100, 47, false))));

    let mut pedal = vec![(0, Raw::Program(0, 0)), (0, Raw::Control(0, 64, 127))];
    pedal.extend(line(0, &c_major[..8], 240, 200, 64, false));
    pedal.push((0, Raw::Control(0, 64, 0)));
    files.push(("08_sustain_and_program.mid", FileBuilder::new(480).track(pedal)));

    let mut noisy = vec![(0, Raw::Sysex(vec![0x7e, 0x7f, 0x09, 0x01, 0xf7]))];
    for (i, (d, ev)) in line(0, &a_minor, 240, 200, 58, false).into_iter().enumerate() {
        if i % 3 == 0 {
            noisy.push((d, Raw::Bend(0, 8192 + 64 * i as u16)));
            noisy.push((0, ev));
        } else {
            noisy.push((d, ev));
        }
    }
    files.push(("09_sysex_and_bend.mid", FileBuilder::new(480).running().track(noisy)));

    let mut unclosed = line(0, &c_major[..6], 240, 200, 77, false);
    unclosed.push((40, Raw::On(0, 72, 77)));
    unclosed.push((0, Raw::On(0, 76, 77)));
    unclosed.push((480, Raw::Meta(0x01, b"end".to_vec())));
    files.push(("10_unclosed_notes.mid", FileBuilder::new(480).track(unclosed)));

    let mut stray = vec![(0, Raw::Off(0, 50, 0))];
    stray.extend(line(0, &c_major[..8], 240, 200, 81, false));
    stray.push((10, Raw::Off(0, 60, 0)));
    files.push(("11_unpaired_note_off.mid", FileBuilder::new(480).track(stray)));

    let mut zero_len = Vec::new();
    for (i, &p) in c_major[..8].iter().enumerate() {
        zero_len.push((if i == 0 { 0 } else { 120 }, Raw::On(9, p, 100)));
        zero_len.push((0, Raw::Off(9, p, 0)));
    }
    files.push(("12_zero_length_notes.mid", FileBuilder::new(480).track(zero_len)));

    let mut chords = Vec::new();
    for (i, root) in [60u8, 65, 67, 60].into_iter().enumerate() {
        let notes = [root, root + 4, root + 7];
        for (j, &n) in notes.iter().enumerate() {
            chords.push((if i > 0 && j == 0 { 60 } else { 0 }, Raw::On(0, n, 70 + 5 * j as u8)));
        }
        for (j, &n) in notes.iter().enumerate().rev() {
            chords.push((if j == 2 { 420 } else { 0 }, Raw::Off(0, n, 0)));
        }
    }
    files.push(("13_chords.mid", FileBuilder::new(480).running().track(chords)));

    let mut multi = Vec::new();
    for (i, &p) in c_major[..10].iter().enumerate() {
        let ch = (i % 3) as u8;
        multi.push((if i == 0 { 0 } else { 120 }, Raw::On(ch, p, 64)));
        multi.push((0, Raw::On((ch + 1) % 3, p - 12, 50)));
        multi.push((100, Raw::Off(ch, p, 0)));
        multi.push((0, Raw::On((ch + 1) % 3, p - 12, 0)));
    }
    files.push(("14_multichannel_single_track.mid", FileBuilder::new(480).running().track(multi)));

    files.push(("15_out_of_piano_range.mid", FileBuilder::new(480).track(line(0, &[12, 21, 60, 108, 115, 127, 0], 240, 200, 90, false))));
    files.push(("16_long_deltas.mid", FileBuilder::new(480).track(line(0, &[60, 62, 64], 300_000, 20_000, 72, false))));

    let minor_keys: Vec<u8> = [57u8, 52, 59, 54].iter().flat_map(|&t| key_phrase(t, &MINOR)).collect();
    files.push(("17_minor_arpeggios.mid", FileBuilder::new(480).running().track(line(0, &minor_keys, 240, 230, 68, true))));

    let mut alien = FileBuilder::new(480).track(line(0, &c_major[..5], 240, 200, 80, false)).track(line(1, &a_minor[..5], 240, 200, 80, false));
    alien.alien.push((1, *b"XFIH", vec![1, 2, 3, 4, 5]));
    files.push(("18_alien_chunk.mid", alien));

    let mut padded = FileBuilder::new(480).track(line(0, &a_minor[..9], 240, 200, 61, false));
    padded.header_padding = 4;
    files.push(("19_long_header.mid", padded));

    let mut across_meta = Vec::new();
    for (i, &p) in c_major[..8].iter().enumerate() {
        across_meta.push((if i == 0 { 0 } else { 40 }, Raw::On(0, p, 90)));
        across_meta.push((0, Raw::Meta(0x06, format!("m{i}").into_bytes())));
        across_meta.push((200, Raw::On(0, p, 0)));
    }
    files.push(("20_running_status_across_meta.mid", FileBuilder::new(480).running().track(across_meta)));

    files.push((
        "21_format1_with_empty_track.mid",
        FileBuilder::new(480).track(vec![(0, name("empty"))]).track(line(0, &c_major[..12], 240, 200, 95, false)),
    ));

    let mut single = FileBuilder::new(480).track(line(0, &[60, 64, 67], 480, 400, 64, false));
    single.format = Some(1);
    files.push(("22_format1_single_track.mid", single));

    let mut out: Vec<(String, Vec<u8>)> = files.into_iter().map(|(n, b)| (n.to_string(), b.build())).collect();
    out.push(("23_scale_corpus.mid".to_string(), crate::midi::serialize_smf(&scale_corpus())));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::parse_smf;

    #[test]
    fn phrase_shape() {
        assert_eq!(key_phrase(60, &MAJOR), vec![60, 62, 64, 65, 67, 69, 71, 72, 71, 69, 67, 65, 64, 62, 60, 64, 67, 72, 67, 64, 60]);
    }

    #[test]
    fn scale_corpus_size() {
        let t = scale_corpus();
        assert_eq!(t.note_on_count(), 5040);
        assert_eq!(parse_smf(&crate::midi::serialize_smf(&t)).unwrap(), t);
    }

    #[test]
    fn bundled_files_parse() {
        let files = bundled_corpus();
        assert!(files.len() >= 20);
        for (name, bytes) in files {
            let t = parse_smf(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(t.note_on_count() > 0, "{name}");
        }
    }
}
