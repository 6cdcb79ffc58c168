//! The matrix of feature layers.
//!
//! Entry `(r, c)` (1-based) holds a feature map downsampled by
//! `base_stride * 2^(r-1)` vertically and `base_stride * 2^(c-1)`
//! horizontally. Each layer owns a height range and a width range of object
//! sizes; both double with every step down or right from the base layer.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// 1-based matrix position. `r` indexes the height scale, `c` the width scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub r: usize,
    pub c: usize,
}

impl LayerId {
    pub const fn new(r: usize, c: usize) -> Self {
        Self { r, c }
    }

    pub fn is_diagonal(&self) -> bool {
        self.r == self.c
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.r, self.c)
    }
}

/// Closed pixel interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub base_stride: usize,
    pub base_range: (f64, f64),
    /// Multipliers applied to the low and high end of every range.
    pub relax: (f64, f64),
    pub rows: usize,
    pub cols: usize,
    pub prune: BTreeSet<LayerId>,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            base_stride: 8,
            base_range: (24.0, 48.0),
            relax: (0.8, 1.3),
            rows: 5,
            cols: 5,
            prune: BTreeSet::new(),
        }
    }
}

/// Corner entries removed by the 19-layer preset on a 5x5 matrix.
pub const XNET19_PRUNE: [(usize, usize); 6] = [(1, 4), (1, 5), (2, 5), (4, 1), (5, 1), (5, 2)];

impl LatticeSpec {
    /// Named presets: `fpn5` (diagonal only), `xnet19`, `full25`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut spec = Self::default();
        match name {
            "full25" => {}
            "xnet19" => {
                spec.prune = XNET19_PRUNE.iter().map(|&(r, c)| LayerId::new(r, c)).collect();
            }
            "fpn5" => {
                for r in 1..=5 {
                    for c in 1..=5 {
                        if r != c {
                            spec.prune.insert(LayerId::new(r, c));
                        }
                    }
                }
            }
            other => return Err(Error::UnknownPreset(other.to_string())),
        }
        Ok(spec)
    }

    /// Base-layer range presets, `"16-32"` or `"24-48"`.
    pub fn with_base_range_preset(mut self, name: &str) -> Result<Self> {
        self.base_range = match name {
            "16-32" => (16.0, 32.0),
            "24-48" => (24.0, 48.0),
            other => {
                return Err(Error::Lattice(format!("unknown base range preset `{other}`")));
            }
        };
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.base_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Lattice(format!("base range [{lo}, {hi}] must satisfy 0 < lo < hi")));
        }
        let (lm, hm) = self.relax;
        if !(lm > 0.0 && lm < 1.0 && hm > 1.0 && hm.is_finite()) {
            return Err(Error::Lattice(format!(
                "relaxation ({lm}, {hm}) must satisfy 0 < lo_mult < 1 < hi_mult"
            )));
        }
        if self.base_stride == 0 {
            return Err(Error::Lattice("base stride must be positive".into()));
        }
        if self.rows == 0 || self.cols == 0 || self.rows > 16 || self.cols > 16 {
            return Err(Error::Lattice(format!("matrix size {}x{} out of range", self.rows, self.cols)));
        }
        for id in &self.prune {
            if id.r == 0 || id.c == 0 || id.r > self.rows || id.c > self.cols {
                return Err(Error::Lattice(format!("pruned layer {id} lies outside the matrix")));
            }
            if id.is_diagonal() {
                return Err(Error::Lattice(format!("diagonal layer {id} cannot be pruned")));
            }
        }
        // Off-diagonal layers are generated by repeated extension from the
        // diagonal, so every kept layer needs its predecessor kept.
        for r in 1..=self.rows {
            for c in 1..=self.cols {
                let id = LayerId::new(r, c);
                if self.prune.contains(&id) || r == c {
                    continue;
                }
                let pred = if c > r { LayerId::new(r, c - 1) } else { LayerId::new(r - 1, c) };
                if self.prune.contains(&pred) {
                    return Err(Error::Lattice(format!(
                        "layer {id} is kept but its predecessor {pred} is pruned (disconnected band)"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: LayerId,
    pub stride_w: usize,
    pub stride_h: usize,
    pub w_range: Range,
    pub h_range: Range,
    pub w_range_relaxed: Range,
    pub h_range_relaxed: Range,
}

impl Layer {
    /// Feature-map size for an input of `input_h x input_w`.
    pub fn feature_shape(&self, input_h: usize, input_w: usize) -> (usize, usize) {
        (input_h.div_ceil(self.stride_h), input_w.div_ceil(self.stride_w))
    }

    /// Whether a `w x h` object belongs to this layer under relaxed ranges.
    pub fn accepts(&self, w: f64, h: f64) -> bool {
        self.w_range_relaxed.contains(w) && self.h_range_relaxed.contains(h)
    }

    /// Cell `(y, x)` containing the pixel point, clamped to the feature map.
    pub fn cell_of(&self, x: f64, y: f64, feat: (usize, usize)) -> (usize, usize) {
        let cy = (y / self.stride_h as f64).floor().clamp(0.0, (feat.0 - 1) as f64) as usize;
        let cx = (x / self.stride_w as f64).floor().clamp(0.0, (feat.1 - 1) as f64) as usize;
        (cy, cx)
    }

    /// The cell whose center is nearest the box center, as `(cy_idx, cx_idx)`.
    pub fn center_cell(&self, b: &BBox, feat: (usize, usize)) -> (usize, usize) {
        let (cx, cy) = b.center();
        self.cell_of(cx, cy, feat)
    }

    /// Pixel coordinates `(x, y)` of a cell center.
    pub fn cell_center(&self, cy: usize, cx: usize) -> (f64, f64) {
        (
            (cx as f64 + 0.5) * self.stride_w as f64,
            (cy as f64 + 0.5) * self.stride_h as f64,
        )
    }
}

/// Rounds to 1e-9 so that products such as `24 * 0.8` land on the nearest
/// double to their decimal value.
fn snap(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// A validated, immutable set of non-pruned layers in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    spec: LatticeSpec,
    layers: Vec<Layer>,
}

impl Lattice {
    pub fn build(spec: LatticeSpec) -> Result<Self> {
        spec.validate()?;
        let (lo, hi) = spec.base_range;
        let (lm, hm) = spec.relax;
        let mut layers = Vec::new();
        for r in 1..=spec.rows {
            for c in 1..=spec.cols {
                let id = LayerId::new(r, c);
                if spec.prune.contains(&id) {
                    continue;
                }
                let sw = (1usize << (c - 1)) as f64;
                let sh = (1usize << (r - 1)) as f64;
                let w_range = Range { lo: lo * sw, hi: hi * sw };
                let h_range = Range { lo: lo * sh, hi: hi * sh };
                layers.push(Layer {
                    id,
                    stride_w: spec.base_stride << (c - 1),
                    stride_h: spec.base_stride << (r - 1),
                    w_range,
                    h_range,
                    w_range_relaxed: Range { lo: snap(w_range.lo * lm), hi: snap(w_range.hi * hm) },
                    h_range_relaxed: Range { lo: snap(h_range.lo * lm), hi: snap(h_range.hi * hm) },
                });
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::build(LatticeSpec::preset(name)?)
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Number of diagonal layers, i.e. backbone outputs.
    pub fn diagonal_len(&self) -> usize {
        self.spec.rows.min(self.spec.cols)
    }

    pub fn max_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride_w.max(l.stride_h)).max().unwrap_or(1)
    }

    /// Input size after bottom/right padding to a multiple of the largest stride.
    pub fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.max_stride();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Indices (into [`Lattice::layers`]) of every layer whose relaxed ranges
    /// contain the box. Empty when the box fits nowhere.
    pub fn assign(&self, b: &BBox) -> Vec<usize> {
        let (w, h) = (b.width(), b.height());
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.accepts(w, h))
            .map(|(i, _)| i)
            .collect()
    }

    /// Same as [`Lattice::assign`], returning matrix positions.
    pub fn assign_ids(&self, b: &BBox) -> Vec<LayerId> {
        self.assign(b).into_iter().map(|i| self.layers[i].id).collect()
    }

    /// CSV table: `r,c,stride_h,stride_w,h_lo,h_hi,w_lo,w_hi,h_lo_relaxed,h_hi_relaxed,w_lo_relaxed,w_hi_relaxed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "r,c,stride_h,stride_w,h_lo,h_hi,w_lo,w_hi,h_lo_relaxed,h_hi_relaxed,w_lo_relaxed,w_hi_relaxed\n",
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                l.id.r,
                l.id.c,
                l.stride_h,
                l.stride_w,
                l.h_range.lo,
                l.h_range.hi,
                l.w_range.lo,
                l.w_range.hi,
                l.h_range_relaxed.lo,
                l.h_range_relaxed.hi,
                l.w_range_relaxed.lo,
                l.w_range_relaxed.hi
            );
        }
        out
    }
}
