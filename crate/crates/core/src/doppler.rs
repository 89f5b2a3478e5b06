//! Power Doppler and color Doppler reconstruction from IQ ensembles.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::pipeline::{Acquisition, IqEnsemble};

/// Linear power image, `[axial][lateral]`, all values finite and >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DopplerMap {
    n_axial: usize,
    n_lateral: usize,
    acq: Acquisition,
    data: Vec<f64>,
}

impl DopplerMap {
    pub fn new(n_axial: usize, n_lateral: usize, acq: Acquisition, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_axial * n_lateral {
            return Err(Error::ShapeMismatch(format!(
                "map has {} pixels, dims imply {}",
                data.len(),
                n_axial * n_lateral
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "power values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            n_axial,
            n_lateral,
            acq,
            data,
        })
    }

    pub fn n_axial(&self) -> usize {
        self.n_axial
    }
    pub fn n_lateral(&self) -> usize {
        self.n_lateral
    }
    pub fn acquisition(&self) -> &Acquisition {
        &self.acq
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Divides by the maximum; an all-zero map stays zero.
    pub fn normalized(&self) -> Self {
        let m = self.max();
        let mut out = self.clone();
        if m > 0.0 {
            out.data.iter_mut().for_each(|v| *v /= m);
        }
        out
    }
}

/// Signed axial velocity image (m/s), positive toward the transducer.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityMap {
    n_axial: usize,
    n_lateral: usize,
    v_nyq: f64,
    data: Vec<f64>,
}

impl VelocityMap {
    pub fn new(n_axial: usize, n_lateral: usize, v_nyq: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_axial * n_lateral {
            return Err(Error::ShapeMismatch(format!(
                "velocity map has {} pixels, dims imply {}",
                data.len(),
                n_axial * n_lateral
            )));
        }
        if !(v_nyq > 0.0 && v_nyq.is_finite()) || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "velocities and the Nyquist limit must be finite".into(),
            ));
        }
        Ok(Self {
            n_axial,
            n_lateral,
            v_nyq,
            data,
        })
    }

    pub fn n_axial(&self) -> usize {
        self.n_axial
    }
    pub fn n_lateral(&self) -> usize {
        self.n_lateral
    }
    pub fn nyquist(&self) -> f64 {
        self.v_nyq
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Per-pixel mean of `|s|^2` over time.
pub fn power_doppler(iq: &IqEnsemble) -> DopplerMap {
    let fl = iq.frame_len();
    let mut acc = vec![0.0; fl];
    for frame in iq.data().chunks_exact(fl) {
        for (a, s) in acc.iter_mut().zip(frame) {
            *a += s.norm_sqr();
        }
    }
    let inv = 1.0 / iq.n_time() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    DopplerMap {
        n_axial: iq.n_axial(),
        n_lateral: iq.n_lateral(),
        acq: *iq.acquisition(),
        data: acc,
    }
}

/// Lag-one autocorrelation `R1 = sum_t s(t+1) conj(s(t))` per pixel.
pub fn lag_one_autocorrelation(iq: &IqEnsemble) -> Vec<Complex64> {
    let fl = iq.frame_len();
    let d = iq.data();
    let mut r1 = vec![Complex64::new(0.0, 0.0); fl];
    for t in 0..iq.n_time().saturating_sub(1) {
        let (a, b) = (&d[t * fl..(t + 1) * fl], &d[(t + 1) * fl..(t + 2) * fl]);
        for ((r, x), y) in r1.iter_mut().zip(a).zip(b) {
            *r += y * x.conj();
        }
    }
    r1
}

/// Kasai estimator: `v = v_nyq * arg(R1) / pi`.
pub fn color_doppler(iq: &IqEnsemble) -> Result<VelocityMap> {
    if iq.n_time() < 2 {
        return Err(Error::InvalidConfig(
            "color Doppler needs at least two frames".into(),
        ));
    }
    let v_nyq = iq.acquisition().nyquist_velocity();
    let data = lag_one_autocorrelation(iq)
        .into_iter()
        .map(|r| {
            if r.norm_sqr() == 0.0 {
                0.0
            } else {
                v_nyq * r.arg() / std::f64::consts::PI
            }
        })
        .collect();
    Ok(VelocityMap {
        n_axial: iq.n_axial(),
        n_lateral: iq.n_lateral(),
        v_nyq,
        data,
    })
}

/// Zeroes velocities where the power map lies more than `threshold_db`
/// below its own maximum (`threshold_db < 0`), the usual power gate of a
/// color Doppler display.
pub fn gate_by_power(vel: &VelocityMap, power: &DopplerMap, threshold_db: f64) -> Result<VelocityMap> {
    if (vel.n_axial, vel.n_lateral) != (power.n_axial, power.n_lateral) {
        return Err(Error::ShapeMismatch(format!(
            "velocity {}x{} vs power {}x{}",
            vel.n_axial, vel.n_lateral, power.n_axial, power.n_lateral
        )));
    }
    if !(threshold_db <= 0.0) {
        return Err(Error::InvalidConfig("power gate must be <= 0 dB".into()));
    }
    let cut = power.max() * 10f64.powf(threshold_db / 10.0);
    let data = vel
        .data
        .iter()
        .zip(&power.data)
        .map(|(&v, &p)| if p > 0.0 && p >= cut { v } else { 0.0 })
        .collect();
    Ok(VelocityMap { data, ..vel.clone() })
}

/// Angular-processing power: mean over time of `Re{s_odd conj(s_even)}`,
/// clamped below at zero.
pub fn power_doppler_ap(odd: &IqEnsemble, even: &IqEnsemble) -> Result<DopplerMap> {
    let pre = cross_power(odd, even)?;
    let data = pre.into_iter().map(|v| v.max(0.0)).collect();
    DopplerMap::new(odd.n_axial(), odd.n_lateral(), *odd.acquisition(), data)
}

/// Unclamped per-pixel mean of `Re{s_odd conj(s_even)}`.
pub fn cross_power(odd: &IqEnsemble, even: &IqEnsemble) -> Result<Vec<f64>> {
    if !odd.same_shape(even) {
        return Err(Error::ShapeMismatch(format!(
            "AP inputs {}x{}x{} vs {}x{}x{}",
            odd.n_time(),
            odd.n_axial(),
            odd.n_lateral(),
            even.n_time(),
            even.n_axial(),
            even.n_lateral()
        )));
    }
    let fl = odd.frame_len();
    let mut acc = vec![0.0; fl];
    for (fo, fe) in odd.data().chunks_exact(fl).zip(even.data().chunks_exact(fl)) {
        for ((a, o), e) in acc.iter_mut().zip(fo).zip(fe) {
            *a += (o * e.conj()).re;
        }
    }
    let inv = 1.0 / odd.n_time() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Max-normalized log compression to 8-bit gray levels over `[-DR, 0]` dB.
/// An all-zero map produces an all-zero image.
pub fn log_compress(map: &DopplerMap, dynamic_range_db: f64) -> Result<GrayImage> {
    if !(dynamic_range_db > 0.0) {
        return Err(Error::InvalidConfig("dynamic range must be positive".into()));
    }
    let m = map.max();
    let pixels = map
        .data
        .iter()
        .map(|&v| {
            if m <= 0.0 || v <= 0.0 {
                return 0u8;
            }
            let db = (10.0 * (v / m).log10()).clamp(-dynamic_range_db, 0.0);
            (255.0 * (db + dynamic_range_db) / dynamic_range_db).round() as u8
        })
        .collect();
    Ok(GrayImage {
        width: map.n_lateral,
        height: map.n_axial,
        pixels,
    })
}

/// Symmetric bidirectional map: black at zero, red for positive, blue for
/// negative velocities, saturating at `v_nyq`.
pub fn velocity_colormap(map: &VelocityMap) -> RgbImage {
    let mut pixels = Vec::with_capacity(map.data.len() * 3);
    for &v in &map.data {
        let f = if map.v_nyq > 0.0 {
            (v / map.v_nyq).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let level = (255.0 * f.abs()).round() as u8;
        let tint = (255.0 * (f.abs() - 0.5).max(0.0)).round() as u8;
        if f >= 0.0 {
            pixels.extend_from_slice(&[level, tint, 0]);
        } else {
            pixels.extend_from_slice(&[0, tint, level]);
        }
    }
    RgbImage {
        width: map.n_lateral,
        height: map.n_axial,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Provenance;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn acq_500() -> Acquisition {
        Acquisition {
            prf: 500.0,
            ..Acquisition::default()
        }
    }

    fn iq(nt: usize, na: usize, nl: usize, f: impl Fn(usize, usize) -> Complex64) -> IqEnsemble {
        let data = (0..nt * na * nl).map(|i| f(i / (na * nl), i % (na * nl))).collect();
        IqEnsemble::new(nt, na, nl, acq_500(), Provenance::Full, data).unwrap()
    }

    #[test]
    fn constant_magnitude_power() {
        let pd = power_doppler(&iq(5, 2, 2, |t, _| Complex64::from_polar(3.0, t as f64)));
        assert!(pd.data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
        let pd = power_doppler(&iq(5, 2, 2, |_, _| Complex64::new(0.0, 0.0)));
        assert!(pd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn complex_gaussian_power_is_one() {
        let mut rng = crate::rng::stream(1, crate::rng::Domain::Noise, 0);
        let s = 0.5f64.sqrt();
        let data: Vec<Complex64> = (0..400 * 64)
            .map(|_| {
                Complex64::new(
                    s * rng.sample::<f64, _>(StandardNormal),
                    s * rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let e = IqEnsemble::new(400, 8, 8, acq_500(), Provenance::Full, data).unwrap();
        let pd = power_doppler(&e);
        let mean = pd.data().iter().sum::<f64>() / 64.0;
        assert!((mean - 1.0).abs() < 0.05);
        assert!(pd.data().iter().all(|&v| (v - 1.0).abs() < 0.25));
    }

    #[test]
    fn kasai_tone_gives_quarter_nyquist() {
        // PRF/8 tone: pi/4 phase per frame
        let e = iq(32, 1, 1, |t, _| Complex64::from_polar(1.0, 2.0 * PI * t as f64 / 8.0));
        let vm = color_doppler(&e).unwrap();
        let v_nyq = 1540.0 * 500.0 / (4.0 * 5.208e6);
        assert!((vm.nyquist() - v_nyq).abs() < 1e-15);
        assert!((vm.data()[0] - v_nyq / 4.0).abs() < 1e-12);
        assert!((vm.data()[0] - 9.2406e-3).abs() < 1e-6);
        // conjugating the signal flips the sign
        let c = iq(32, 1, 1, |t, _| Complex64::from_polar(1.0, -2.0 * PI * t as f64 / 8.0));
        assert!((color_doppler(&c).unwrap().data()[0] + v_nyq / 4.0).abs() < 1e-12);
    }

    #[test]
    fn kasai_constant_phase_and_zero() {
        let e = iq(10, 2, 2, |_, _| Complex64::from_polar(2.0, 0.7));
        assert!(color_doppler(&e).unwrap().data().iter().all(|&v| v.abs() < 1e-15));
        let z = iq(10, 2, 2, |_, _| Complex64::new(0.0, 0.0));
        assert!(color_doppler(&z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(color_doppler(&iq(1, 2, 2, |_, _| Complex64::new(1.0, 0.0))).is_err());
    }

    #[test]
    fn scale_equivariance_and_invariance() {
        let mut rng = crate::rng::stream(2, crate::rng::Domain::Noise, 0);
        let data: Vec<Complex64> = (0..16 * 9)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let e = IqEnsemble::new(16, 3, 3, acq_500(), Provenance::Full, data).unwrap();
        let a = 3.7;
        let s = e.scaled(a);
        for (x, y) in power_doppler(&e).data().iter().zip(power_doppler(&s).data()) {
            assert!((x * a * a - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        for (x, y) in color_doppler(&e).unwrap().data().iter().zip(color_doppler(&s).unwrap().data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_coherent_equals_power() {
        let e = iq(6, 2, 2, |t, p| Complex64::from_polar(2.0, 0.3 * t as f64 + p as f64));
        let ap = power_doppler_ap(&e, &e).unwrap();
        assert!(ap.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        let z = iq(6, 2, 2, |_, _| Complex64::new(0.0, 0.0));
        assert!(power_doppler_ap(&e, &z).unwrap().data().iter().all(|&v| v == 0.0));
        let other = iq(5, 2, 2, |_, _| Complex64::new(0.0, 0.0));
        assert!(power_doppler_ap(&e, &other).is_err());
    }

    #[test]
    fn ap_suppresses_incoherent_noise() {
        let mut rng = crate::rng::stream(3, crate::rng::Domain::Noise, 0);
        let mut gauss = || {
            let s = 0.5f64.sqrt();
            Complex64::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal))
        };
        let (nt, npx) = (64, 1024);
        let a: Vec<Complex64> = (0..nt * npx).map(|_| gauss()).collect();
        let b: Vec<Complex64> = (0..nt * npx).map(|_| gauss()).collect();
        let ea = IqEnsemble::new(nt, 32, 32, acq_500(), Provenance::Odd, a).unwrap();
        let eb = IqEnsemble::new(nt, 32, 32, acq_500(), Provenance::Even, b).unwrap();
        let pre = cross_power(&ea, &eb).unwrap();
        let pre_mean = pre.iter().sum::<f64>() / npx as f64;
        assert!(pre_mean.abs() < 0.02);
        let post = power_doppler_ap(&ea, &eb).unwrap();
        let post_mean = post.data().iter().sum::<f64>() / npx as f64;
        let conv_mean = power_doppler(&ea).data().iter().sum::<f64>() / npx as f64;
        assert!(post_mean <= 0.5 * conv_mean);
    }

    #[test]
    fn log_compression_levels() {
        let m = DopplerMap::new(1, 4, acq_500(), vec![1.0, 0.1, 1e-5, 0.0]).unwrap();
        let img = log_compress(&m, 40.0).unwrap();
        assert_eq!(img.pixels, vec![255, 191, 0, 0]);
        let z = DopplerMap::new(1, 2, acq_500(), vec![0.0, 0.0]).unwrap();
        assert_eq!(log_compress(&z, 40.0).unwrap().pixels, vec![0, 0]);
        assert!(log_compress(&m, 0.0).is_err());
    }

    #[test]
    fn log_compression_is_monotone() {
        let vals: Vec<f64> = (1..=50).map(|i| (i as f64).powi(3)).collect();
        let m = DopplerMap::new(1, 50, acq_500(), vals).unwrap();
        let img = log_compress(&m, 60.0).unwrap();
        assert!(img.pixels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn colormap_polarity() {
        let vm = VelocityMap { n_axial: 1, n_lateral: 3, v_nyq: 1.0, data: vec![-1.0, 0.0, 1.0] };
        let img = velocity_colormap(&vm);
        assert_eq!(&img.pixels[0..3], &[0, 128, 255]);
        assert_eq!(&img.pixels[3..6], &[0, 0, 0]);
        assert_eq!(&img.pixels[6..9], &[255, 128, 0]);
    }

    #[test]
    fn power_gate() {
        let vm = VelocityMap::new(1, 4, 1.0, vec![0.5, -0.5, 0.25, 0.1]).unwrap();
        let pw = DopplerMap::new(1, 4, Acquisition::default(), vec![100.0, 1.0, 0.99, 0.0]).unwrap();
        // -20 dB of 100 is exactly 1
        let g = gate_by_power(&vm, &pw, -20.0).unwrap();
        assert_eq!(g.data(), &[0.5, -0.5, 0.0, 0.0]);
        assert_eq!(gate_by_power(&vm, &pw, 0.0).unwrap().data(), &[0.5, 0.0, 0.0, 0.0]);
        assert!(gate_by_power(&vm, &pw, 3.0).is_err());
        assert!(VelocityMap::new(1, 2, 1.0, vec![0.0]).is_err());
    }
}
