use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A finite set of unsigned integers stored as sorted, disjoint, inclusive ranges.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ValueSet {
    ranges: Vec<(u64, u64)>,
}

impl ValueSet {
    pub fn empty() -> Self {
        Self { ranges: Vec::new() }
    }

    pub fn single(v: u64) -> Self {
        Self { ranges: vec![(v, v)] }
    }

    pub fn range(lo: u64, hi: u64) -> Self {
        if lo > hi {
            return Self::empty();
        }
        Self { ranges: vec![(lo, hi)] }
    }

    pub fn from_ranges<I: IntoIterator<Item = (u64, u64)>>(iter: I) -> Self {
        let mut ranges: Vec<(u64, u64)> = iter.into_iter().filter(|(a, b)| a <= b).collect();
        ranges.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(ranges.len());
        for (lo, hi) in ranges {
            match merged.last_mut() {
                Some(last) if lo <= last.1.saturating_add(1) => last.1 = last.1.max(hi),
                _ => merged.push((lo, hi)),
            }
        }
        Self { ranges: merged }
    }

    pub fn from_values<I: IntoIterator<Item = u64>>(iter: I) -> Self {
        Self::from_ranges(iter.into_iter().map(|v| (v, v)))
    }

    pub fn ranges(&self) -> &[(u64, u64)] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn contains(&self, v: u64) -> bool {
        // ranges are sorted, so a binary search on the lower bound is enough
        let idx = self.ranges.partition_point(|&(lo, _)| lo <= v);
        idx > 0 && v <= self.ranges[idx - 1].1
    }

    /// Number of members, saturating at `u64::MAX`.
    pub fn len(&self) -> u64 {
        self.ranges
            .iter()
            .fold(0u64, |acc, &(lo, hi)| acc.saturating_add((hi - lo).saturating_add(1)))
    }

    pub fn min(&self) -> Option<u64> {
        self.ranges.first().map(|r| r.0)
    }

    pub fn max(&self) -> Option<u64> {
        self.ranges.last().map(|r| r.1)
    }

    pub fn union(&self, other: &ValueSet) -> ValueSet {
        Self::from_ranges(self.ranges.iter().chain(other.ranges.iter()).copied())
    }

    pub fn intersect(&self, other: &ValueSet) -> ValueSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.ranges.len() && j < other.ranges.len() {
            let (a0, a1) = self.ranges[i];
            let (b0, b1) = other.ranges[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo <= hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { ranges: out }
    }

    pub fn is_disjoint(&self, other: &ValueSet) -> bool {
        self.intersect(other).is_empty()
    }

    /// Uniform draw over the members. Returns `None` for the empty set.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u64> {
        let total = self.len();
        if total == 0 {
            return None;
        }
        let mut pick = if total == u64::MAX {
            rng.gen::<u64>()
        } else {
            rng.gen_range(0..total)
        };
        for &(lo, hi) in &self.ranges {
            let span = (hi - lo).saturating_add(1);
            if pick < span {
                return Some(lo + pick);
            }
            pick -= span;
        }
        self.max()
    }

    /// Parses `v`, `a..b` or comma-joined lists of either. Integers accept `0x` hex.
    pub fn parse(text: &str) -> Result<ValueSet, String> {
        let mut ranges = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..") {
                let lo = parse_int(a)?;
                let hi = parse_int(b)?;
                if lo > hi {
                    return Err(format!("empty range `{part}`"));
                }
                ranges.push((lo, hi));
            } else {
                let v = parse_int(part)?;
                ranges.push((v, v));
            }
        }
        if ranges.is_empty() {
            return Err(format!("empty value set `{text}`"));
        }
        Ok(Self::from_ranges(ranges))
    }
}

pub fn parse_int(text: &str) -> Result<u64, String> {
    let t = text.trim();
    let parsed = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        t.parse::<u64>()
    };
    parsed.map_err(|_| format!("invalid integer `{t}`"))
}

impl fmt::Display for ValueSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            if lo == hi {
                write!(f, "{lo}")?;
            } else {
                write!(f, "{lo}..{hi}")?;
            }
        }
        Ok(())
    }
}
