//! Flat parameter vectors and the named layout that slices them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(name, shape, offset)` slots that partition `[0, dim)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    slots: Vec<ParamSlot>,
}

impl Layout {
    /// Builds a contiguous layout from `(name, shape)` pairs in order.
    pub fn from_shapes<S: Into<String>>(items: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let slots = items
            .into_iter()
            .map(|(name, shape)| {
                let slot = ParamSlot {
                    name: name.into(),
                    offset,
                    shape,
                };
                offset += slot.len();
                slot
            })
            .collect();
        Layout { slots }
    }

    /// Validates that `slots` tile `[0, dim)` without gaps or overlap.
    pub fn from_slots(slots: Vec<ParamSlot>) -> Result<Self> {
        let mut expected = 0;
        for s in &slots {
            if s.offset != expected {
                return Err(Error::LayoutMismatch(format!(
                    "slot {} starts at {} but previous slot ends at {}",
                    s.name, s.offset, expected
                )));
            }
            expected += s.len();
        }
        Ok(Layout { slots })
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    /// Model dimension `d`.
    pub fn dim(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len())
    }

    /// Text manifest: one `name<TAB>d0xd1x..<TAB>offset` line per slot.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for s in &self.slots {
            let dims: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{}\t{}\t{}\n", s.name, dims.join("x"), s.offset));
        }
        out
    }

    /// Parses [`Layout::to_manifest`] output. Lines starting with `#` are ignored.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut slots = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::LayoutMismatch(format!("manifest line {}: {:?}", lineno + 1, line));
            let mut parts = line.split('\t');
            let name = parts.next().ok_or_else(bad)?.to_string();
            let shape = parts
                .next()
                .ok_or_else(bad)?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let offset = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            slots.push(ParamSlot { name, shape, offset });
        }
        Layout::from_slots(slots)
    }
}

/// Flat gradient (or parameter) vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGradient {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl FlatGradient {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(FlatGradient { values, layout })
    }

    pub fn slice(&self, slot: &ParamSlot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn sq_distance(&self, other: &FlatGradient) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if &self.layout != layout {
            return Err(Error::LayoutMismatch(format!(
                "gradient layout of dimension {} does not match model layout of dimension {}",
                self.layout.dim(),
                layout.dim()
            )));
        }
        Ok(())
    }
}
