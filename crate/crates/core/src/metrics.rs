//! CNR, SNR and BNP on power Doppler maps with explicit ROI masks.
//!
//! All statistics are taken on linear intensity. Maps are normalized to
//! their maximum before evaluation so BNP is relative to the brightest
//! pixel and comparable across methods.

use std::fmt::Write as _;

use crate::doppler::{DopplerMap, VelocityMap};
use crate::error::{Error, Result};

/// BNP reported when the noise region is identically zero.
pub const BNP_FLOOR_DB: f64 = -300.0;

/// Blood, background and noise-only pixel masks, `[axial][lateral]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    n_axial: usize,
    n_lateral: usize,
    blood: Vec<bool>,
    background: Vec<bool>,
    noise: Vec<bool>,
}

impl RoiSet {
    pub fn new(
        n_axial: usize,
        n_lateral: usize,
        blood: Vec<bool>,
        background: Vec<bool>,
        noise: Vec<bool>,
    ) -> Result<Self> {
        let n = n_axial * n_lateral;
        if blood.len() != n || background.len() != n || noise.len() != n {
            return Err(Error::ShapeMismatch("ROI masks must match the map".into()));
        }
        for i in 0..n {
            let hits = blood[i] as u8 + background[i] as u8 + noise[i] as u8;
            if hits > 1 {
                return Err(Error::InvalidConfig(format!(
                    "ROI masks overlap at pixel {i}"
                )));
            }
        }
        if !blood.iter().any(|&b| b) {
            return Err(Error::EmptyRoi("blood"));
        }
        if !background.iter().any(|&b| b) {
            return Err(Error::EmptyRoi("background"));
        }
        if !noise.iter().any(|&b| b) {
            return Err(Error::EmptyRoi("noise"));
        }
        Ok(Self {
            n_axial,
            n_lateral,
            blood,
            background,
            noise,
        })
    }

    pub fn n_axial(&self) -> usize {
        self.n_axial
    }
    pub fn n_lateral(&self) -> usize {
        self.n_lateral
    }
    pub fn blood(&self) -> &[bool] {
        &self.blood
    }
    pub fn background(&self) -> &[bool] {
        &self.background
    }
    pub fn noise(&self) -> &[bool] {
        &self.noise
    }
    pub fn blood_count(&self) -> usize {
        self.blood.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour lateral upsampling, matching the column layout of
    /// a `factor`-times interpolated ensemble.
    pub fn upsample_lateral(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidConfig("upsampling factor must be >= 1".into()));
        }
        let nl = self.n_lateral * factor;
        let up = |m: &[bool]| -> Vec<bool> {
            (0..self.n_axial * nl).map(|i| m[(i / nl) * self.n_lateral + (i % nl) / factor]).collect()
        };
        Self::new(self.n_axial, nl, up(&self.blood), up(&self.background), up(&self.noise))
    }
}

/// Mean squared velocity over the noise-only mask relative to `v_nyq^2`,
/// in dB; the power of spurious flow reported where none exists.
/// An all-zero region gives [`BNP_FLOOR_DB`].
pub fn spurious_velocity_db(vel: &VelocityMap, rois: &RoiSet) -> Result<f64> {
    if vel.n_axial() != rois.n_axial || vel.n_lateral() != rois.n_lateral {
        return Err(Error::ShapeMismatch(format!(
            "velocity map {}x{} vs ROI {}x{}",
            vel.n_axial(),
            vel.n_lateral(),
            rois.n_axial,
            rois.n_lateral
        )));
    }
    let v2: Vec<f64> = vel.data().iter().map(|v| (v / vel.nyquist()).powi(2)).collect();
    let m = masked_mean(&v2, &rois.noise, "noise")?;
    Ok(if m > 0.0 { 10.0 * m.log10() } else { BNP_FLOOR_DB })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStats {
    pub blood_mean: f64,
    pub background_mean: f64,
    pub noise_mean: f64,
    /// Population standard deviation over the noise mask.
    pub noise_std: f64,
}

fn masked_mean(values: &[f64], mask: &[bool], name: &'static str) -> Result<f64> {
    let (sum, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::EmptyRoi(name));
    }
    Ok(sum / n as f64)
}

pub fn roi_stats(map: &DopplerMap, rois: &RoiSet) -> Result<RoiStats> {
    if map.n_axial() != rois.n_axial || map.n_lateral() != rois.n_lateral {
        return Err(Error::ShapeMismatch(format!(
            "map {}x{} vs ROI {}x{}",
            map.n_axial(),
            map.n_lateral(),
            rois.n_axial,
            rois.n_lateral
        )));
    }
    let v = map.data();
    let noise_mean = masked_mean(v, &rois.noise, "noise")?;
    let var = masked_mean(
        &v.iter().map(|x| (x - noise_mean).powi(2)).collect::<Vec<_>>(),
        &rois.noise,
        "noise",
    )?;
    Ok(RoiStats {
        blood_mean: masked_mean(v, &rois.blood, "blood")?,
        background_mean: masked_mean(v, &rois.background, "background")?,
        noise_mean,
        noise_std: var.sqrt(),
    })
}

/// `10 log10((s_blood - s_background) / sigma_noise)`.
pub fn cnr(stats: &RoiStats) -> Result<f64> {
    if !(stats.noise_std > 0.0) {
        return Err(Error::MetricUndefined("noise standard deviation is zero"));
    }
    let contrast = stats.blood_mean - stats.background_mean;
    if !(contrast > 0.0) {
        return Err(Error::MetricUndefined("no contrast"));
    }
    Ok(10.0 * (contrast / stats.noise_std).log10())
}

/// `10 log10(s_blood / sigma_noise)`.
pub fn snr(stats: &RoiStats) -> Result<f64> {
    if !(stats.noise_std > 0.0) {
        return Err(Error::MetricUndefined("noise standard deviation is zero"));
    }
    if !(stats.blood_mean > 0.0) {
        return Err(Error::MetricUndefined("blood intensity is not positive"));
    }
    Ok(10.0 * (stats.blood_mean / stats.noise_std).log10())
}

/// `10 log10(s_noise)`; zero noise maps to [`BNP_FLOOR_DB`].
pub fn bnp(stats: &RoiStats) -> f64 {
    if stats.noise_mean > 0.0 {
        (10.0 * stats.noise_mean.log10()).max(BNP_FLOOR_DB)
    } else {
        BNP_FLOOR_DB
    }
}

/// One evaluated method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub duty_cycle: f64,
    /// `None` when the metric is undefined (no contrast or zero noise).
    pub cnr: Option<f64>,
    pub snr: Option<f64>,
    pub bnp: f64,
}

/// Normalizes the map to its maximum and evaluates all three metrics.
pub fn evaluate(method: &str, duty_cycle: f64, map: &DopplerMap, rois: &RoiSet) -> Result<MetricRow> {
    let stats = roi_stats(&map.normalized(), rois)?;
    Ok(MetricRow {
        method: method.to_string(),
        duty_cycle,
        cnr: cnr(&stats).ok(),
        snr: snr(&stats).ok(),
        bnp: bnp(&stats),
    })
}

fn fmt_db(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

/// Fixed-width plain-text table.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>6} {:>10} {:>10} {:>10}",
        "method", "dc", "CNR[dB]", "SNR[dB]", "BNP[dB]"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>6.2} {:>10} {:>10} {:>10.2}",
            r.method,
            r.duty_cycle,
            fmt_db(r.cnr),
            fmt_db(r.snr),
            r.bnp
        );
    }
    out
}

/// Comma-delimited form with full precision.
pub fn format_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("method,duty_cycle,cnr_db,snr_db,bnp_db\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9}",
            r.method,
            r.duty_cycle,
            opt(r.cnr),
            opt(r.snr),
            r.bnp
        );
    }
    out
}
