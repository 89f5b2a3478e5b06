use rand::Rng;

use crate::error::{Error, Result};
use crate::pipeline::RfEnsemble;

pub const SCALE_FLOOR: f64 = 1e-12;
pub const SCALE_PERCENTILE: f64 = 99.0;

/// Linear-interpolated percentile of `|v|` (`q` in percent).
pub fn abs_percentile(values: impl IntoIterator<Item = f64>, q: f64) -> f64 {
    let mut a: Vec<f64> = values.into_iter().map(f64::abs).collect();
    if a.is_empty() {
        return 0.0;
    }
    a.sort_unstable_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (a.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    a[lo] + (a[hi] - a[lo]) * (pos - lo as f64)
}

/// Shared normalization scale for a set of values.
pub fn robust_scale(values: impl IntoIterator<Item = f64>) -> f64 {
    abs_percentile(values, SCALE_PERCENTILE).max(SCALE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    Identity,
    /// Mirror along the lateral axis.
    FlipLateral,
    /// Mirror along the axial axis.
    FlipAxial,
    Rot180,
    Rot90,
    Rot270,
}

impl Augment {
    pub const DEFAULT_SET: [Augment; 4] = [
        Augment::Identity,
        Augment::FlipLateral,
        Augment::FlipAxial,
        Augment::Rot180,
    ];
    pub const WITH_QUARTER_TURNS: [Augment; 6] = [
        Augment::Identity,
        Augment::FlipLateral,
        Augment::FlipAxial,
        Augment::Rot180,
        Augment::Rot90,
        Augment::Rot270,
    ];

    /// Applies the transform to a row-major `h x w` patch; returns the new
    /// data and dims.
    pub fn apply(self, data: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let at = |y: usize, x: usize| data[y * w + x];
        match self {
            Augment::Identity => (data.to_vec(), h, w),
            Augment::FlipLateral => {
                let v = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(y, w - 1 - x)).collect();
                (v, h, w)
            }
            Augment::FlipAxial => {
                let v = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(h - 1 - y, x)).collect();
                (v, h, w)
            }
            Augment::Rot180 => (data.iter().rev().copied().collect(), h, w),
            // counter-clockwise quarter turn: out[y][x] = in[x][w - 1 - y]
            Augment::Rot90 => {
                let v = (0..w).flat_map(|y| (0..h).map(move |x| (y, x))).map(|(y, x)| at(x, w - 1 - y)).collect();
                (v, w, h)
            }
            Augment::Rot270 => {
                let v = (0..w).flat_map(|y| (0..h).map(move |x| (y, x))).map(|(y, x)| at(h - 1 - x, y)).collect();
                (v, w, h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Both patches were divided by this.
    pub scale: f64,
    pub frame: usize,
    /// Top-left corner `(axial, lateral)` in the source frame.
    pub offset: (usize, usize),
    pub augment: Augment,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedPatchSet {
    pub pairs: Vec<PatchPair>,
}

impl PairedPatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Number of whole tiles along an axis of length `n`.
pub fn tiles_along(n: usize, patch: usize, stride: usize) -> usize {
    if n < patch {
        0
    } else {
        (n - patch) / stride + 1
    }
}

/// Tiles every `frame_stride`-th frame of both ensembles into aligned
/// patches (partial border tiles are dropped) and normalizes each pair by a
/// shared robust scale.
pub fn build_pairs(
    y1: &RfEnsemble,
    y2: &RfEnsemble,
    patch: usize,
    stride: usize,
    frame_stride: usize,
) -> Result<PairedPatchSet> {
    if !y1.same_shape(y2) {
        return Err(Error::ShapeMismatch("Y1 and Y2 differ in shape".into()));
    }
    if patch == 0 || stride == 0 || frame_stride == 0 {
        return Err(Error::InvalidConfig("patch, stride and frame stride must be >= 1".into()));
    }
    let (na, nl) = (y1.n_axial(), y1.n_lateral());
    let tz = tiles_along(na, patch, stride);
    let tx = tiles_along(nl, patch, stride);
    if tz == 0 || tx == 0 {
        return Err(Error::InvalidConfig(format!(
            "frame {na}x{nl} is smaller than one {patch}x{patch} patch"
        )));
    }
    let mut pairs = Vec::new();
    for t in (0..y1.n_time()).step_by(frame_stride) {
        let (f1, f2) = (y1.frame(t), y2.frame(t));
        for iz in 0..tz {
            for ix in 0..tx {
                let (z0, x0) = (iz * stride, ix * stride);
                let cut = |f: &[f64]| -> Vec<f64> {
                    (z0..z0 + patch).flat_map(|z| f[z * nl + x0..z * nl + x0 + patch].iter().copied()).collect()
                };
                let (mut a, mut b) = (cut(f1), cut(f2));
                let scale = robust_scale(a.iter().chain(&b).copied());
                a.iter_mut().chain(b.iter_mut()).for_each(|v| *v /= scale);
                pairs.push(PatchPair {
                    a,
                    b,
                    height: patch,
                    width: patch,
                    scale,
                    frame: t,
                    offset: (z0, x0),
                    augment: Augment::Identity,
                });
            }
        }
    }
    Ok(PairedPatchSet { pairs })
}

/// Draws one transform and applies it to both patches of the pair.
pub fn augment<R: Rng>(pair: &PatchPair, rng: &mut R, quarter_turns: bool) -> Result<PatchPair> {
    let set: &[Augment] = if quarter_turns {
        if pair.height != pair.width {
            return Err(Error::InvalidConfig("quarter-turn augmentation needs square patches".into()));
        }
        &Augment::WITH_QUARTER_TURNS
    } else {
        &Augment::DEFAULT_SET
    };
    let op = set[rng.random_range(0..set.len())];
    Ok(apply_augment(pair, op))
}

pub fn apply_augment(pair: &PatchPair, op: Augment) -> PatchPair {
    let (a, h, w) = op.apply(&pair.a, pair.height, pair.width);
    let (b, _, _) = op.apply(&pair.b, pair.height, pair.width);
    PatchPair {
        a,
        b,
        height: h,
        width: w,
        augment: op,
        ..pair.clone()
    }
}
