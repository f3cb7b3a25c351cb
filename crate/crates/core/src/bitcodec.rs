//! Fixed-width MSB-first index codes and heap-numbered tree addressing.
//!
//! Writing the codes of `0..2^b` as columns gives a complete binary tree of
//! depth `b`: the root holds every index, and the node reached by a bit prefix
//! holds exactly the indices sharing that prefix. Nodes are numbered
//! top-to-bottom, left-to-right from 0, so node `j` has children `2j+1`
//! (next bit 0) and `2j+2` (next bit 1).

use std::ops::Range;

use crate::{Error, Result};

pub const MAX_WIDTH: u32 = 62;

/// MSB-first binary code of a database index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitCode {
    bits: Vec<u8>,
}

impl BitCode {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_WIDTH as usize {
            return Err(Error::invalid(
                "bits",
                format!("width {} outside 1..={MAX_WIDTH}", bits.len()),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("bits", "entries must be 0 or 1"));
        }
        Ok(BitCode { bits })
    }

    pub fn width(&self) -> u32 {
        self.bits.len() as u32
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Bit at 1-based `level` (level 1 is the most significant).
    pub fn level_bit(&self, level: u32) -> u8 {
        self.bits[level as usize - 1]
    }
}

impl std::fmt::Display for BitCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Smallest `b >= 1` with `n <= 2^b`.
pub fn bits_required(n: u64) -> Result<u32> {
    if n == 0 {
        return Err(Error::invalid("n", "database must hold at least one place"));
    }
    let b = if n <= 2 {
        1
    } else {
        64 - (n - 1).leading_zeros()
    };
    if b > MAX_WIDTH {
        return Err(Error::invalid("n", format!("{n} places need more than {MAX_WIDTH} bits")));
    }
    Ok(b)
}

fn check_width(width: u32) -> Result<()> {
    if width == 0 || width > MAX_WIDTH {
        return Err(Error::invalid("width", format!("{width} outside 1..={MAX_WIDTH}")));
    }
    Ok(())
}

pub fn encode_index(index: u64, width: u32) -> Result<BitCode> {
    check_width(width)?;
    if index >> width != 0 {
        return Err(Error::invalid(
            "index",
            format!("{index} does not fit in {width} bits"),
        ));
    }
    let bits = (1..=width).map(|level| bit_at(index, level, width)).collect();
    Ok(BitCode { bits })
}

pub fn decode_bits(code: &BitCode) -> u64 {
    code.bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
}

/// Bit of `index` at 1-based `level` of a `width`-bit code, without allocating.
#[inline]
pub fn bit_at(index: u64, level: u32, width: u32) -> u8 {
    ((index >> (width - level)) & 1) as u8
}

/// Position of a node in the heap-numbered tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreeAddress {
    pub node_index: u64,
}

impl TreeAddress {
    pub const ROOT: TreeAddress = TreeAddress { node_index: 0 };

    pub fn new(node_index: u64) -> Self {
        TreeAddress { node_index }
    }

    /// Depth below the root: `floor(log2(node_index + 1))`.
    pub fn level(self) -> u32 {
        63 - (self.node_index + 1).leading_zeros()
    }

    /// Root-to-node path read as a binary number.
    pub fn prefix(self) -> u64 {
        self.node_index + 1 - (1u64 << self.level())
    }

    pub fn zero_child(self) -> TreeAddress {
        TreeAddress::new(2 * self.node_index + 1)
    }

    pub fn one_child(self) -> TreeAddress {
        TreeAddress::new(2 * self.node_index + 2)
    }

    pub fn child(self, bit: u8) -> TreeAddress {
        if bit == 0 {
            self.zero_child()
        } else {
            self.one_child()
        }
    }
}

/// Indices below the node: the prefix interval intersected with `[0, n)`.
///
/// Empty ranges are returned as `start..start` clamped to `n`.
pub fn node_members(node: TreeAddress, n: u64, width: u32) -> Result<Range<u64>> {
    check_width(width)?;
    let level = node.level();
    if level > width {
        return Err(Error::invalid(
            "node",
            format!("node {} is at level {level}, below a {width}-bit tree", node.node_index),
        ));
    }
    let span = 1u64 << (width - level);
    let start = node.prefix() * span;
    let end = start + span;
    Ok(start.min(n)..end.min(n))
}
