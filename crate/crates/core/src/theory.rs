//! Key/mode context and the scale-snapping corrector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ionian interval pattern; every diatonic mode is a rotation of it.
const IONIAN: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

const KEY_NAMES: [&str; 12] = ["c", "c#", "d", "d#", "e", "f", "f#", "g", "g#", "a", "a#", "b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ionian,
    Dorian,
    Phrygian,
    Lydian,
    Mixolydian,
    Aeolian,
    Locrian,
}

impl Mode {
    pub const ALL: [Mode; 7] =
        [Mode::Ionian, Mode::Dorian, Mode::Phrygian, Mode::Lydian, Mode::Mixolydian, Mode::Aeolian, Mode::Locrian];

    /// Scale degree of the Ionian pattern this mode starts on.
    pub fn degree(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Mode> {
        Mode::ALL.get(usize::from(i)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ionian => "ionian",
            Mode::Dorian => "dorian",
            Mode::Phrygian => "phrygian",
            Mode::Lydian => "lydian",
            Mode::Mixolydian => "mixolydian",
            Mode::Aeolian => "aeolian",
            Mode::Locrian => "locrian",
        }
    }

    /// Semitone offsets of the mode above its own root.
    pub fn intervals(self) -> [u8; 7] {
        let d = self.degree();
        let root = IONIAN[d];
        let mut out = [0u8; 7];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = (IONIAN[(d + i) % 7] + 12 - root) % 12;
        }
        out
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TheoryError {
    #[error("key {0} out of range 0..=11")]
    KeyOutOfRange(u8),
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("unknown mode '{0}'")]
    UnknownMode(String),
    #[error("context must look like KEY:MODE, got '{0}'")]
    BadContext(String),
}

impl FromStr for Mode {
    type Err = TheoryError;

    /// Accepts mode names (`dorian`, also `major`/`minor`) or indices `0`–`6`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if let Ok(i) = lower.parse::<u8>() {
            return Mode::from_index(i).ok_or_else(|| TheoryError::UnknownMode(s.to_string()));
        }
        match lower.as_str() {
            "major" => return Ok(Mode::Ionian),
            "minor" => return Ok(Mode::Aeolian),
            _ => {}
        }
        Mode::ALL.into_iter().find(|m| m.name() == lower).ok_or_else(|| TheoryError::UnknownMode(s.to_string()))
    }
}

/// Parses a key given as a number `0`–`11` or a name such as `c`, `F#`, `bb`.
pub fn parse_key(s: &str) -> Result<u8, TheoryError> {
    let lower = s.trim().to_ascii_lowercase();
    if let Ok(k) = lower.parse::<u8>() {
        return if k < 12 { Ok(k) } else { Err(TheoryError::KeyOutOfRange(k)) };
    }
    if let Some(k) = KEY_NAMES.iter().position(|n| *n == lower) {
        return Ok(k as u8);
    }
    if let Some(letter) = lower.strip_suffix('b') {
        if let Some(k) = KEY_NAMES.iter().position(|n| *n == letter) {
            return Ok(((k + 11) % 12) as u8);
        }
    }
    Err(TheoryError::UnknownKey(s.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MusicalContext {
    key: u8,
    mode: Mode,
}

impl MusicalContext {
    pub fn new(key: u8, mode: Mode) -> Result<Self, TheoryError> {
        if key > 11 {
            return Err(TheoryError::KeyOutOfRange(key));
        }
        Ok(MusicalContext { key, mode })
    }

    pub fn key(&self) -> u8 {
        self.key
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The seven pitch classes of the scale, ascending.
    pub fn scale_pitch_classes(&self) -> [u8; 7] {
        let mut pcs = self.mode.intervals().map(|i| (i + self.key) % 12);
        pcs.sort_unstable();
        pcs
    }

    fn mask(&self) -> [bool; 12] {
        let mut mask = [false; 12];
        for pc in self.scale_pitch_classes() {
            mask[usize::from(pc)] = true;
        }
        mask
    }

    pub fn in_scale(&self, pitch: u8) -> bool {
        self.mask()[usize::from(pitch % 12)]
    }

    /// Nearest in-scale pitch; ties go down. Pitches already in the scale
    /// are returned unchanged.
    pub fn snap_to_scale(&self, pitch: u8) -> u8 {
        let mask = self.mask();
        let member = |p: i32| (0..=127).contains(&p) && mask[(p % 12) as usize];
        let p = i32::from(pitch);
        if member(p) {
            return pitch;
        }
        for d in 1..12 {
            if member(p - d) {
                return (p - d) as u8;
            }
            if member(p + d) {
                return (p + d) as u8;
            }
        }
        pitch
    }
}

impl fmt::Display for MusicalContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", KEY_NAMES[usize::from(self.key)], self.mode)
    }
}

impl FromStr for MusicalContext {
    type Err = TheoryError;

    /// `KEY:MODE`, e.g. `c:ionian`, `f#:dorian` or `0:0`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, mode) = s.split_once(':').ok_or_else(|| TheoryError::BadContext(s.to_string()))?;
        MusicalContext::new(parse_key(key)?, mode.parse()?)
    }
}
