//! Reference methods: the conventional full-angle chain, angular
//! processing (AP), and spatiotemporal non-local means (ST-NLM) on
//! axial-temporal planes.

use crate::doppler::{power_doppler, power_doppler_ap, DopplerMap};
use crate::error::{Error, Result};
use crate::pipeline::{
    compound, hilbert_analytic, split_angles, svd_clutter_filter, AngleRfCube, RfEnsemble,
    SvdFilterConfig,
};

/// Power Doppler from the full-angle compounded, clutter-filtered ensemble.
pub fn conventional(cube: &AngleRfCube, cfg: &SvdFilterConfig) -> Result<DopplerMap> {
    let filtered = svd_clutter_filter(&compound(cube), cfg)?;
    Ok(power_doppler(&hilbert_analytic(&filtered)?))
}

/// Angular processing: the odd and even subsets are compounded and filtered
/// independently, and their analytic signals are conjugate-multiplied.
pub fn angular_processing(cube: &AngleRfCube, cfg: &SvdFilterConfig) -> Result<DopplerMap> {
    let (even, odd) = split_angles(cube)?;
    let iq_even = hilbert_analytic(&svd_clutter_filter(&compound(&even), cfg)?)?;
    let iq_odd = hilbert_analytic(&svd_clutter_filter(&compound(&odd), cfg)?)?;
    power_doppler_ap(&iq_odd, &iq_even)
}

/// ST-NLM window sizes are (axial pixels, temporal frames), odd.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StNlmConfig {
    pub similarity: (usize, usize),
    pub search: (usize, usize),
    /// Smoothing parameter in amplitude units; `None` uses `h_factor * sigma`.
    pub h: Option<f64>,
    pub h_factor: f64,
    /// Noise standard deviation; `None` estimates it from temporal differences.
    pub noise_sigma: Option<f64>,
}

impl Default for StNlmConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl StNlmConfig {
    /// 11x11 similarity window; the search window is twice that, rounded up
    /// to 23 so it stays centered.
    pub fn standard() -> Self {
        Self {
            similarity: (11, 11),
            search: (23, 23),
            h: None,
            h_factor: 1.0,
            noise_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (sa, st) = self.similarity;
        let (wa, wt) = self.search;
        if sa % 2 == 0 || st % 2 == 0 || wa % 2 == 0 || wt % 2 == 0 {
            return Err(Error::InvalidConfig("NLM windows must be odd-sized".into()));
        }
        if wa < sa || wt < st {
            return Err(Error::InvalidConfig(
                "search window must cover the similarity window".into(),
            ));
        }
        if let Some(h) = self.h {
            if !(h > 0.0) {
                return Err(Error::InvalidConfig("h must be positive".into()));
            }
        }
        if !(self.h_factor > 0.0) {
            return Err(Error::InvalidConfig("h factor must be positive".into()));
        }
        Ok(())
    }
}

/// Robust noise level from finest-scale temporal differences:
/// `MAD / (sqrt(2) * 0.6745)`.
pub fn estimate_noise_sigma(ens: &RfEnsemble) -> f64 {
    let fl = ens.frame_len();
    let d = ens.data();
    let mut diffs: Vec<f64> = (0..ens.n_time().saturating_sub(1))
        .flat_map(|t| (0..fl).map(move |i| d[(t + 1) * fl + i] - d[t * fl + i]))
        .collect();
    if diffs.is_empty() {
        return 0.0;
    }
    let med = median(&mut diffs);
    let mut dev: Vec<f64> = diffs.iter().map(|v| (v - med).abs()).collect();
    median(&mut dev) / (std::f64::consts::SQRT_2 * 0.6745)
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    v.sort_unstable_by(f64::total_cmp);
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Symmetric (edge-repeating) mirror index into `[0, n)`.
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Non-local means on every axial-temporal plane of the ensemble.
pub fn st_nlm(ens: &RfEnsemble, cfg: &StNlmConfig) -> Result<RfEnsemble> {
    cfg.validate()?;
    let (na, nt, nl) = (ens.n_axial(), ens.n_time(), ens.n_lateral());
    if cfg.search.0 > na || cfg.search.1 > nt {
        return Err(Error::InvalidConfig(format!(
            "search window {:?} larger than the {na}x{nt} axial-temporal plane",
            cfg.search
        )));
    }
    let sigma = cfg.noise_sigma.unwrap_or_else(|| estimate_noise_sigma(ens));
    let h = match cfg.h {
        Some(h) => h,
        None => cfg.h_factor * sigma,
    };
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(
            "estimated noise level is zero; set h explicitly".into(),
        ));
    }
    let mut out = vec![0.0; ens.data().len()];
    let mut plane = vec![0.0; na * nt];
    let fl = ens.frame_len();
    for x in 0..nl {
        for t in 0..nt {
            for z in 0..na {
                plane[z * nt + t] = ens.data()[t * fl + z * nl + x];
            }
        }
        let den = nlm_plane(&plane, na, nt, cfg, sigma, h);
        for t in 0..nt {
            for z in 0..na {
                out[t * fl + z * nl + x] = den[z * nt + t];
            }
        }
    }
    ens.with_data(out)
}

/// NLM on one `rows x cols` plane using per-offset integral images.
pub fn nlm_plane(
    plane: &[f64],
    rows: usize,
    cols: usize,
    cfg: &StNlmConfig,
    sigma: f64,
    h: f64,
) -> Vec<f64> {
    let (sr, sc) = (cfg.similarity.0 / 2, cfg.similarity.1 / 2);
    let (wr, wc) = (cfg.search.0 / 2, cfg.search.1 / 2);
    // padded plane covers output pixel +/- (search + similarity) halves
    let (pr, pc) = (wr + sr, wc + sc);
    let (prow, pcol) = (rows + 2 * pr, cols + 2 * pc);
    let mut padded = vec![0.0; prow * pcol];
    for r in 0..prow {
        let src_r = mirror(r as isize - pr as isize, rows);
        for c in 0..pcol {
            padded[r * pcol + c] = plane[src_r * cols + mirror(c as isize - pc as isize, cols)];
        }
    }
    let at = |r: isize, c: isize| padded[(r + pr as isize) as usize * pcol + (c + pc as isize) as usize];

    // patch-center region: output pixels +/- similarity halves
    let (er, ec) = (rows + 2 * sr, cols + 2 * sc);
    let mut integral = vec![0.0; (er + 1) * (ec + 1)];
    let mut num = vec![0.0; rows * cols];
    let mut den = vec![0.0; rows * cols];
    let area = (cfg.similarity.0 * cfg.similarity.1) as f64;
    let two_var = 2.0 * sigma * sigma;
    let inv_h2 = 1.0 / (h * h);
    for dr in -(wr as isize)..=(wr as isize) {
        for dc in -(wc as isize)..=(wc as isize) {
            for r in 0..er {
                let mut row_sum = 0.0;
                for c in 0..ec {
                    let (ri, ci) = (r as isize - sr as isize, c as isize - sc as isize);
                    let d = at(ri, ci) - at(ri + dr, ci + dc);
                    row_sum += d * d;
                    integral[(r + 1) * (ec + 1) + c + 1] = integral[r * (ec + 1) + c + 1] + row_sum;
                }
            }
            for r in 0..rows {
                for c in 0..cols {
                    // window rows r..r+2sr, cols c..c+2sc in integral coordinates
                    let (r0, r1) = (r, r + 2 * sr + 1);
                    let (c0, c1) = (c, c + 2 * sc + 1);
                    let s = integral[r1 * (ec + 1) + c1] - integral[r0 * (ec + 1) + c1]
                        - integral[r1 * (ec + 1) + c0]
                        + integral[r0 * (ec + 1) + c0];
                    let d2 = s / area;
                    let w = (-(d2 - two_var).max(0.0) * inv_h2).exp();
                    let i = r * cols + c;
                    num[i] += w * at(r as isize + dr, c as isize + dc);
                    den[i] += w;
                }
            }
        }
    }
    num.iter().zip(&den).map(|(n, d)| n / d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Acquisition, Provenance};
    use rand::Rng;

    /// Brute-force NLM oracle: explicit double loop over search offsets and
    /// patch pixels, mirror-indexed directly into the unpadded plane.
    fn brute_nlm(p: &[f64], rows: usize, cols: usize, cfg: &StNlmConfig, sigma: f64, h: f64) -> Vec<f64> {
        let (sr, sc) = ((cfg.similarity.0 / 2) as isize, (cfg.similarity.1 / 2) as isize);
        let (wr, wc) = ((cfg.search.0 / 2) as isize, (cfg.search.1 / 2) as isize);
        let get = |r: isize, c: isize| p[mirror(r, rows) * cols + mirror(c, cols)];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                let (mut num, mut den) = (0.0, 0.0);
                for dr in -wr..=wr {
                    for dc in -wc..=wc {
                        let mut d2 = 0.0;
                        for u in -sr..=sr {
                            for v in -sc..=sc {
                                let d = get(r + u, c + v) - get(r + dr + u, c + dc + v);
                                d2 += d * d;
                            }
                        }
                        d2 /= ((2 * sr + 1) * (2 * sc + 1)) as f64;
                        let w = (-(d2 - 2.0 * sigma * sigma).max(0.0) / (h * h)).exp();
                        num += w * get(r + dr, c + dc);
                        den += w;
                    }
                }
                out[(r as usize) * cols + c as usize] = num / den;
            }
        }
        out
    }

    fn small_cfg(h: f64) -> StNlmConfig {
        StNlmConfig {
            similarity: (5, 5),
            search: (11, 11),
            h: Some(h),
            h_factor: 1.0,
            noise_sigma: Some(0.0),
        }
    }

    #[test]
    fn constant_plane_unchanged() {
        let plane = vec![2.5; 32 * 32];
        let out = nlm_plane(&plane, 32, 32, &small_cfg(1.0), 0.0, 1.0);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn impulse_is_suppressed_and_matches_oracle() {
        let h = 0.5;
        let mut plane = vec![1.0; 32 * 32];
        plane[16 * 32 + 16] += 10.0 * h;
        let cfg = small_cfg(h);
        let fast = nlm_plane(&plane, 32, 32, &cfg, 0.0, h);
        let slow = brute_nlm(&plane, 32, 32, &cfg, 0.0, h);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9);
        }
        let residual = fast[16 * 32 + 16] - 1.0;
        assert!(residual <= 0.5 * 10.0 * h, "impulse residual {residual}");
    }

    #[test]
    fn random_plane_matches_oracle_with_noise_term() {
        let mut rng = crate::rng::stream(8, crate::rng::Domain::Noise, 0);
        let plane: Vec<f64> = (0..20 * 24).map(|_| rng.random::<f64>()).collect();
        let cfg = StNlmConfig { similarity: (3, 5), search: (7, 9), ..small_cfg(0.3) };
        let fast = nlm_plane(&plane, 20, 24, &cfg, 0.1, 0.3);
        let slow = brute_nlm(&plane, 20, 24, &cfg, 0.1, 0.3);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn output_is_convex_combination() {
        let mut rng = crate::rng::stream(9, crate::rng::Domain::Noise, 0);
        let plane: Vec<f64> = (0..24 * 24).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let cfg = small_cfg(0.7);
        let out = nlm_plane(&plane, 24, 24, &cfg, 0.0, 0.7);
        let get = |r: isize, c: isize| plane[mirror(r, 24) * 24 + mirror(c, 24)];
        for r in 0..24isize {
            for c in 0..24isize {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dr in -5..=5 {
                    for dc in -5..=5 {
                        lo = lo.min(get(r + dr, c + dc));
                        hi = hi.max(get(r + dr, c + dc));
                    }
                }
                let v = out[(r * 24 + c) as usize];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn temporal_translation_equivariance() {
        // plane is rows=axial, cols=time; shift along time by 3
        let (rows, cols, shift) = (16, 48, 3);
        let mut rng = crate::rng::stream(10, crate::rng::Domain::Noise, 0);
        let base: Vec<f64> = (0..rows * (cols + shift)).map(|_| rng.random::<f64>()).collect();
        let a: Vec<f64> = (0..rows * cols).map(|i| base[(i / cols) * (cols + shift) + i % cols]).collect();
        let b: Vec<f64> = (0..rows * cols).map(|i| base[(i / cols) * (cols + shift) + i % cols + shift]).collect();
        let cfg = StNlmConfig { similarity: (3, 3), search: (5, 5), ..small_cfg(0.4) };
        let oa = nlm_plane(&a, rows, cols, &cfg, 0.0, 0.4);
        let ob = nlm_plane(&b, rows, cols, &cfg, 0.0, 0.4);
        let margin = 4;
        for r in 0..rows {
            for c in margin + shift..cols - margin {
                assert!((oa[r * cols + c] - ob[r * cols + c - shift]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_rules() {
        assert_eq!(StNlmConfig::standard().search, (23, 23));
        assert!(StNlmConfig { similarity: (4, 5), ..small_cfg(1.0) }.validate().is_err());
        assert!(StNlmConfig { search: (3, 11), ..small_cfg(1.0) }.validate().is_err());
        let ens = RfEnsemble::new(8, 8, 2, Acquisition::default(), Provenance::Full, vec![0.0; 128]).unwrap();
        assert!(st_nlm(&ens, &small_cfg(1.0)).is_err());
    }

    #[test]
    fn noise_estimate_recovers_sigma() {
        let mut rng = crate::rng::stream(12, crate::rng::Domain::Noise, 0);
        let data: Vec<f64> = (0..64 * 32 * 32)
            .map(|_| 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let ens = RfEnsemble::new(64, 32, 32, Acquisition::default(), Provenance::Full, data).unwrap();
        assert!((estimate_noise_sigma(&ens) / 0.3 - 1.0).abs() < 0.03);
    }

    #[test]
    fn mirror_indexing() {
        assert_eq!(mirror(-1, 5), 0);
        assert_eq!(mirror(-2, 5), 1);
        assert_eq!(mirror(5, 5), 4);
        assert_eq!(mirror(6, 5), 3);
        assert_eq!(mirror(2, 5), 2);
    }
}
