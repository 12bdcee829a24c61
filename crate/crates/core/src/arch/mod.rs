//! The 31-slot architecture space: codes, slot semantics, presets, and the
//! executable auto-encoder graph they decode to.

mod encoder;
mod graph;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use encoder::{Encoder, EncoderTaps, STAGES};
pub use graph::{build_graph, DecoderPlan, FlopCount, Gradients, NetworkGraph, Site, SkipPlan, StyleCache};

pub const NUM_SLOTS: usize = 31;
const MASK: u32 = (1 << NUM_SLOTS) - 1;

/// Input height and width must be multiples of this (four 2×2 poolings).
pub const SIZE_MULTIPLE: usize = 16;

/// A 31-bit architecture code. Bit `i` switches slot `S{i}`; the string form
/// lists slot 0 first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchCode(u32);

impl ArchCode {
    pub const ZEROS: ArchCode = ArchCode(0);
    pub const ONES: ArchCode = ArchCode(MASK);

    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits & !MASK != 0 {
            return Err(Error::Input(format!("code 0x{bits:x} uses more than {NUM_SLOTS} bits")));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn get(self, slot: usize) -> bool {
        assert!(slot < NUM_SLOTS);
        self.0 >> slot & 1 == 1
    }

    pub fn with(self, slot: usize, on: bool) -> Self {
        assert!(slot < NUM_SLOTS);
        if on {
            Self(self.0 | 1 << slot)
        } else {
            Self(self.0 & !(1 << slot))
        }
    }

    pub fn flip(self, slot: usize) -> Self {
        assert!(slot < NUM_SLOTS);
        Self(self.0 ^ 1 << slot)
    }

    pub fn popcount(self) -> u32 {
        self.0.count_ones()
    }

    /// Fraction of the 31 slots switched on.
    pub fn op_fraction(self) -> f64 {
        self.popcount() as f64 / NUM_SLOTS as f64
    }

    pub fn hamming(self, other: ArchCode) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    pub fn is_subset_of(self, other: ArchCode) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn active_slots(self) -> Vec<usize> {
        (0..NUM_SLOTS).filter(|&i| self.get(i)).collect()
    }

    /// Order of the string forms ('0' < '1', slot 0 first).
    pub fn lex_cmp(self, other: ArchCode) -> Ordering {
        self.0.reverse_bits().cmp(&other.0.reverse_bits())
    }
}

impl fmt::Display for ArchCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..NUM_SLOTS).map(|i| if self.get(i) { '1' } else { '0' }).collect();
        f.write_str(&s)
    }
}

impl FromStr for ArchCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_code(s)
    }
}

/// Parses a 31-character string of '0'/'1'.
pub fn parse_code(s: &str) -> Result<ArchCode> {
    let mut bits = 0u32;
    let mut len = 0;
    for (i, ch) in s.chars().enumerate() {
        match ch {
            '0' => {}
            '1' if i < NUM_SLOTS => bits |= 1 << i,
            '1' => {}
            other => {
                return Err(Error::Parse {
                    position: i,
                    message: format!("expected '0' or '1', found {other:?}"),
                })
            }
        }
        len = i + 1;
    }
    if len != NUM_SLOTS {
        return Err(Error::Parse {
            position: len.min(NUM_SLOTS),
            message: format!("architecture code must have {NUM_SLOTS} characters, got {len}"),
        });
    }
    Ok(ArchCode(bits))
}

/// What each slot switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    /// Resized encoder stage `1..=4` features concatenated at the bottleneck.
    Bfa(usize),
    BottleneckTransfer,
    /// Instance-normalized skip link at decoder level `1..=4`.
    Skip(usize),
    SkipNorm(usize),
    SkipTransfer(usize),
    StageTransfer(usize),
    AuxConv1(usize),
    AuxConv2(usize),
    BottleneckNorm,
    Refine,
}

impl SlotKind {
    pub fn of(slot: usize) -> SlotKind {
        match slot {
            0..=3 => SlotKind::Bfa(slot + 1),
            4 => SlotKind::BottleneckTransfer,
            5..=8 => SlotKind::Skip(slot - 4),
            9..=12 => SlotKind::SkipNorm(slot - 8),
            13..=16 => SlotKind::SkipTransfer(slot - 12),
            17..=20 => SlotKind::StageTransfer(slot - 16),
            21..=24 => SlotKind::AuxConv1(slot - 20),
            25..=28 => SlotKind::AuxConv2(slot - 24),
            29 => SlotKind::BottleneckNorm,
            30 => SlotKind::Refine,
            _ => panic!("slot {slot} out of range"),
        }
    }

    /// Slot that must be on for this one to have any effect.
    pub fn parent(self) -> Option<usize> {
        match self {
            SlotKind::SkipNorm(l) | SlotKind::SkipTransfer(l) => Some(4 + l),
            _ => None,
        }
    }
}

impl fmt::Display for SlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotKind::Bfa(k) => write!(f, "bfa.stage{k}"),
            SlotKind::BottleneckTransfer => f.write_str("bottleneck.transfer"),
            SlotKind::Skip(l) => write!(f, "insl{l}"),
            SlotKind::SkipNorm(l) => write!(f, "insl{l}.norm"),
            SlotKind::SkipTransfer(l) => write!(f, "insl{l}.transfer"),
            SlotKind::StageTransfer(l) => write!(f, "dec{l}.transfer"),
            SlotKind::AuxConv1(l) => write!(f, "dec{l}.aux1"),
            SlotKind::AuxConv2(l) => write!(f, "dec{l}.aux2"),
            SlotKind::BottleneckNorm => f.write_str("bottleneck.norm"),
            SlotKind::Refine => f.write_str("refine"),
        }
    }
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    PhotoNet,
    PhotoNas,
    StyleNas5,
    StyleNas9,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::PhotoNet, Preset::PhotoNas, Preset::StyleNas5, Preset::StyleNas9];

    pub fn code(self) -> ArchCode {
        let s = match self {
            Preset::PhotoNet => return ArchCode::ONES,
            Preset::PhotoNas => PHOTONAS,
            Preset::StyleNas5 => STYLENAS_5OPT,
            Preset::StyleNas9 => STYLENAS_9OPT,
        };
        parse_code(s).expect("preset codes are valid")
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::PhotoNet => "photonet",
            Preset::PhotoNas => "photonas",
            Preset::StyleNas5 => "stylenas-5opt",
            Preset::StyleNas9 => "stylenas-9opt",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        match name.to_ascii_lowercase().as_str() {
            "photonet" => Some(Preset::PhotoNet),
            "photonas" | "stylenas-7opt" => Some(Preset::PhotoNas),
            "stylenas-5opt" => Some(Preset::StyleNas5),
            "stylenas-9opt" => Some(Preset::StyleNas9),
            _ => None,
        }
    }
}

pub const PHOTONAS: &str = "0101000000100000000000000001111";
/// Best five- and nine-op codes found by search on the desk problem.
pub const STYLENAS_5OPT: &str = "0100000001000000001000000100100";
pub const STYLENAS_9OPT: &str = "0100001001001010001000000101100";

/// A preset name or a literal 31-character code.
pub fn resolve_code(s: &str) -> Result<ArchCode> {
    match Preset::from_name(s) {
        Some(p) => Ok(p.code()),
        None => parse_code(s),
    }
}
