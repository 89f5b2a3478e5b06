//! Synthetic per-angle beamformed RF with separately known tissue clutter,
//! clean blood signal and independent per-angle noise.
//!
//! Blood is a population of point scatterers advected along each vessel
//! axis. Every frame is rendered by evaluating a Gaussian-modulated cosine
//! pulse (axial) times a Gaussian lateral profile at each scatterer's
//! continuous position, so inter-frame displacement shows up as an exact
//! Doppler phase `2*pi*f0*(2v/c)/PRF`. Tissue is static speckle with a slow
//! multiplicative modulation; noise is white Gaussian, drawn per
//! `(angle, frame)` from keyed streams.
//!
//! Sign convention: positive velocity means motion toward the transducer
//! (decreasing depth), which yields a positive lag-1 autocorrelation phase.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::RoiSet;
use crate::pipeline::{Acquisition, AngleRfCube, Provenance, RfEnsemble};
use crate::rng::{self, Domain};

pub const MIN_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityProfile {
    Plug,
    Parabolic,
}

impl VelocityProfile {
    /// Fraction of peak velocity at normalized radial position `r` in [0, 1].
    pub fn factor(self, r: f64) -> f64 {
        match self {
            VelocityProfile::Plug => 1.0,
            VelocityProfile::Parabolic => (1.0 - r * r).max(0.0),
        }
    }
}

/// A straight vessel segment in pixel coordinates `(axial, lateral)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselSpec {
    pub start: [f64; 2],
    pub end: [f64; 2],
    /// Radius in pixels.
    pub radius: f64,
    /// Peak axial velocity component (m/s), positive toward the transducer.
    pub peak_velocity: f64,
    pub profile: VelocityProfile,
    /// RMS of the rendered blood signal inside the vessel (linear).
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub n_axial: usize,
    pub n_lateral: usize,
    pub n_frames: usize,
    /// Isotropic pixel pitch (m).
    pub pitch: f64,
    pub f0: f64,
    pub fs: f64,
    /// -6 dB fractional bandwidth of the transmit pulse.
    pub bandwidth: f64,
    pub prf: f64,
    pub c: f64,
    /// Steering angles (degrees), strictly increasing.
    pub angles: Vec<f64>,
    pub vessels: Vec<VesselSpec>,
    /// RMS of the tissue speckle over tissue rows (linear).
    pub tissue_amplitude: f64,
    pub tissue_mod_freq: f64,
    pub tissue_mod_depth: f64,
    /// Per-angle noise standard deviation.
    pub noise_sigma: f64,
    /// Exponential noise gain over the full depth, `exp(gain * z / n_axial)`;
    /// zero disables it.
    pub noise_depth_gain: f64,
    /// Duty-cycle scale on the signal components, in (0, 1].
    pub duty_cycle: f64,
    /// Lateral point-spread standard deviation (pixels).
    pub lateral_psf_sigma: f64,
    /// Blood scatterers per square pixel.
    pub scatterer_density: f64,
    /// Bottom rows holding neither tissue nor blood.
    pub noise_strip: usize,
    /// Guard band (pixels) excluded from background and noise masks.
    pub guard: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let acq = Acquisition::default();
        Self {
            n_axial: 128,
            n_lateral: 128,
            n_frames: 64,
            pitch: acq.pitch_axial,
            f0: acq.f0,
            fs: acq.fs,
            bandwidth: 0.6,
            prf: acq.prf,
            c: acq.c,
            angles: (0..10).map(|i| -9.0 + 2.0 * i as f64).collect(),
            vessels: default_vessels(),
            tissue_amplitude: 40.0,
            tissue_mod_freq: 2.0,
            tissue_mod_depth: 0.02,
            noise_sigma: 1.2,
            noise_depth_gain: 0.0,
            duty_cycle: 1.0,
            lateral_psf_sigma: 2.0,
            scatterer_density: 2.0,
            noise_strip: 24,
            guard: 8,
            seed: 1,
        }
    }
}

/// Evaluation layout: three roughly axial vessels of different calibre.
pub fn default_vessels() -> Vec<VesselSpec> {
    vec![
        VesselSpec {
            start: [-12.0, 26.0],
            end: [98.0, 38.0],
            radius: 5.0,
            peak_velocity: 0.015,
            profile: VelocityProfile::Parabolic,
            amplitude: 1.0,
        },
        VesselSpec {
            start: [-12.0, 76.0],
            end: [98.0, 64.0],
            radius: 3.5,
            peak_velocity: -0.012,
            profile: VelocityProfile::Parabolic,
            amplitude: 1.0,
        },
        VesselSpec {
            start: [-12.0, 104.0],
            end: [98.0, 112.0],
            radius: 2.5,
            peak_velocity: 0.009,
            profile: VelocityProfile::Parabolic,
            amplitude: 0.8,
        },
    ]
}

/// A different layout used for training phantoms.
pub fn training_vessels() -> Vec<VesselSpec> {
    vec![
        VesselSpec {
            start: [-12.0, 14.0],
            end: [98.0, 20.0],
            radius: 3.0,
            peak_velocity: -0.010,
            profile: VelocityProfile::Parabolic,
            amplitude: 1.0,
        },
        VesselSpec {
            start: [-12.0, 52.0],
            end: [98.0, 44.0],
            radius: 5.5,
            peak_velocity: 0.016,
            profile: VelocityProfile::Parabolic,
            amplitude: 1.0,
        },
        VesselSpec {
            start: [-12.0, 84.0],
            end: [98.0, 96.0],
            radius: 4.0,
            peak_velocity: 0.012,
            profile: VelocityProfile::Parabolic,
            amplitude: 0.9,
        },
        VesselSpec {
            start: [-12.0, 118.0],
            end: [98.0, 110.0],
            radius: 2.0,
            peak_velocity: -0.007,
            profile: VelocityProfile::Plug,
            amplitude: 0.8,
        },
    ]
}

impl PhantomSpec {
    pub fn acquisition(&self) -> Acquisition {
        Acquisition {
            f0: self.f0,
            fs: self.fs,
            prf: self.prf,
            c: self.c,
            pitch_axial: self.pitch,
            pitch_lateral: self.pitch,
        }
    }

    pub fn nyquist_velocity(&self) -> f64 {
        self.acquisition().nyquist_velocity()
    }

    /// Rows `[0, tissue_rows)` carry tissue.
    pub fn tissue_rows(&self) -> usize {
        self.n_axial.saturating_sub(self.noise_strip)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_axial < MIN_DIM || self.n_lateral < MIN_DIM {
            return bad(format!(
                "grid {}x{} below minimum {MIN_DIM}",
                self.n_axial, self.n_lateral
            ));
        }
        if self.n_frames < 2 {
            return bad("n_frames must be >= 2".into());
        }
        if !(self.fs >= 2.0 * self.f0) {
            return bad(format!("fs {} below 2*f0 {}", self.fs, 2.0 * self.f0));
        }
        if !(self.prf > 0.0 && self.c > 0.0 && self.f0 > 0.0 && self.pitch > 0.0) {
            return bad("prf, c, f0 and pitch must be positive".into());
        }
        if !(self.bandwidth > 0.0 && self.lateral_psf_sigma > 0.0) {
            return bad("bandwidth and lateral PSF width must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return bad(format!("duty cycle {} outside (0, 1]", self.duty_cycle));
        }
        if self.angles.is_empty() || self.angles.windows(2).any(|w| w[0] >= w[1]) {
            return bad("angle list must be nonempty and strictly increasing".into());
        }
        if self.noise_strip + 1 > self.n_axial {
            return bad("noise strip covers the whole field".into());
        }
        let v_nyq = self.nyquist_velocity();
        for v in &self.vessels {
            if v.radius < 1.0 {
                return bad(format!("vessel radius {} below 1 pixel", v.radius));
            }
            if v.peak_velocity.abs() >= v_nyq {
                return Err(Error::AboveNyquist {
                    velocity: v.peak_velocity,
                    nyquist: v_nyq,
                });
            }
            let geom = VesselGeometry::new(v);
            if geom.length <= 0.0 {
                return bad("vessel has zero length".into());
            }
            if v.peak_velocity != 0.0 && geom.dir[0].abs() < 0.2 {
                return bad("moving vessels must have an axial direction component".into());
            }
        }
        Ok(())
    }

    /// Same spec with noise disabled.
    pub fn noise_free(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            ..self.clone()
        }
    }
}

/// Ground-truth components of a rendered phantom.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Clean blood RF (already scaled by the duty cycle).
    pub blood: RfEnsemble,
    /// Modulated tissue RF (already scaled by the duty cycle).
    pub tissue: RfEnsemble,
    /// Axial velocity (m/s), `[axial][lateral]`; zero outside vessels.
    pub velocity: Vec<f64>,
    pub rois: RoiSet,
}

#[derive(Debug, Clone, Copy)]
struct VesselGeometry {
    origin: [f64; 2],
    dir: [f64; 2],
    normal: [f64; 2],
    length: f64,
}

impl VesselGeometry {
    fn new(v: &VesselSpec) -> Self {
        let (mut a, mut b) = (v.start, v.end);
        if b[0] < a[0] {
            std::mem::swap(&mut a, &mut b);
        }
        let d = [b[0] - a[0], b[1] - a[1]];
        let length = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let dir = if length > 0.0 {
            [d[0] / length, d[1] / length]
        } else {
            [1.0, 0.0]
        };
        Self {
            origin: a,
            dir,
            normal: [-dir[1], dir[0]],
            length,
        }
    }

    /// (along-axis, signed cross-axis) coordinates of a pixel.
    fn local(&self, z: f64, x: f64) -> (f64, f64) {
        let rz = z - self.origin[0];
        let rx = x - self.origin[1];
        (
            rz * self.dir[0] + rx * self.dir[1],
            rz * self.normal[0] + rx * self.normal[1],
        )
    }

    fn contains(&self, z: f64, x: f64, radius: f64) -> bool {
        let (s, q) = self.local(z, x);
        (0.0..=self.length).contains(&s) && q.abs() <= radius
    }
}

/// Separable pulse model: Gaussian-modulated cosine axially, Gaussian laterally.
#[derive(Debug, Clone, Copy)]
struct Psf {
    carrier: f64,
    sigma_z: f64,
    sigma_x: f64,
    reach_z: isize,
    reach_x: isize,
}

impl Psf {
    fn new(spec: &PhantomSpec) -> Self {
        let carrier = spec.acquisition().carrier_cycles_per_pixel();
        // -6 dB full bandwidth B*k  <=>  spectral sigma B*k / (2 sqrt(2 ln 2))
        let sigma_k = spec.bandwidth * carrier / (2.0 * (2.0 * 2f64.ln()).sqrt());
        let sigma_z = 1.0 / (2.0 * PI * sigma_k);
        Self {
            carrier,
            sigma_z,
            sigma_x: spec.lateral_psf_sigma,
            reach_z: (4.0 * sigma_z).ceil() as isize,
            reach_x: (3.0 * spec.lateral_psf_sigma).ceil() as isize,
        }
    }

    fn axial(&self, dz: f64) -> f64 {
        (-dz * dz / (2.0 * self.sigma_z * self.sigma_z)).exp() * (2.0 * PI * self.carrier * dz).cos()
    }

    fn lateral(&self, dx: f64) -> f64 {
        (-dx * dx / (2.0 * self.sigma_x * self.sigma_x)).exp()
    }

    /// Sum of squared PSF samples on the integer grid.
    fn energy(&self) -> f64 {
        let ez: f64 = (-self.reach_z..=self.reach_z)
            .map(|d| self.axial(d as f64).powi(2))
            .sum();
        let ex: f64 = (-self.reach_x..=self.reach_x)
            .map(|d| self.lateral(d as f64).powi(2))
            .sum();
        ez * ex
    }

    /// Adds `amp * psf(z - z0, x - x0)` into a frame.
    fn splat(&self, frame: &mut [f64], na: usize, nl: usize, z0: f64, x0: f64, amp: f64) {
        let zc = z0.round() as isize;
        let xc = x0.round() as isize;
        let z_lo = (zc - self.reach_z).max(0);
        let z_hi = (zc + self.reach_z).min(na as isize - 1);
        let x_lo = (xc - self.reach_x).max(0);
        let x_hi = (xc + self.reach_x).min(nl as isize - 1);
        if z_lo > z_hi || x_lo > x_hi {
            return;
        }
        let lat: Vec<f64> = (x_lo..=x_hi).map(|x| self.lateral(x as f64 - x0)).collect();
        for z in z_lo..=z_hi {
            let wz = amp * self.axial(z as f64 - z0);
            let row = &mut frame[z as usize * nl..];
            for (i, w) in lat.iter().enumerate() {
                row[(x_lo as usize) + i] += wz * w;
            }
        }
    }
}

struct Scatterer {
    s0: f64,
    q: f64,
    amp: f64,
    /// Along-axis displacement per frame (pixels).
    step: f64,
}

/// Noise-free components shared by every noise realization.
#[derive(Debug, Clone)]
pub struct CleanComponents {
    /// Clean blood, `[time][axial][lateral]`, unscaled by duty cycle.
    blood: Vec<f64>,
    /// Static tissue field, `[axial][lateral]`, unscaled.
    tissue: Vec<f64>,
    modulation: Vec<f64>,
    velocity: Vec<f64>,
    rois: RoiSet,
}

/// Renders the noise-free blood, tissue, velocity map and ROI masks.
pub fn render_clean(spec: &PhantomSpec) -> Result<CleanComponents> {
    spec.validate()?;
    let (na, nl, nt) = (spec.n_axial, spec.n_lateral, spec.n_frames);
    let psf = Psf::new(spec);
    let psf_norm = 1.0 / (spec.scatterer_density * psf.energy()).sqrt();

    // blood
    let mut blood = vec![0.0; nt * na * nl];
    for (vi, vessel) in spec.vessels.iter().enumerate() {
        let geom = VesselGeometry::new(vessel);
        let mut rng = rng::stream(spec.seed, Domain::Blood, vi as u64);
        let count = (spec.scatterer_density * geom.length * 2.0 * vessel.radius).round() as usize;
        let axial_step_per_mps = -1.0 / (spec.prf * spec.pitch);
        let scatterers: Vec<Scatterer> = (0..count)
            .map(|_| {
                let s0 = rng.random::<f64>() * geom.length;
                let q = (2.0 * rng.random::<f64>() - 1.0) * vessel.radius;
                let amp: f64 = rng.sample(StandardNormal);
                let v_ax = vessel.peak_velocity * vessel.profile.factor(q.abs() / vessel.radius);
                let step = if v_ax == 0.0 {
                    0.0
                } else {
                    v_ax * axial_step_per_mps / geom.dir[0]
                };
                Scatterer {
                    s0,
                    q,
                    amp: amp * vessel.amplitude * psf_norm,
                    step,
                }
            })
            .collect();
        for t in 0..nt {
            let frame = &mut blood[t * na * nl..(t + 1) * na * nl];
            for sc in &scatterers {
                let s = (sc.s0 + sc.step * t as f64).rem_euclid(geom.length);
                let z = geom.origin[0] + s * geom.dir[0] + sc.q * geom.normal[0];
                let x = geom.origin[1] + s * geom.dir[1] + sc.q * geom.normal[1];
                psf.splat(frame, na, nl, z, x, sc.amp);
            }
        }
    }

    // tissue: unit-density grid scatterers over tissue rows, then RMS-normalized
    let tissue_rows = spec.tissue_rows();
    let mut tissue = vec![0.0; na * nl];
    if spec.tissue_amplitude > 0.0 && tissue_rows > 0 {
        let mut rng = rng::stream(spec.seed, Domain::Tissue, 0);
        for z in 0..tissue_rows {
            for x in 0..nl {
                let a: f64 = rng.sample(StandardNormal);
                psf.splat(&mut tissue, na, nl, z as f64, x as f64, a);
            }
        }
        let rms = (tissue[..tissue_rows * nl].iter().map(|v| v * v).sum::<f64>()
            / (tissue_rows * nl) as f64)
            .sqrt();
        if rms > 0.0 {
            let k = spec.tissue_amplitude / rms;
            tissue.iter_mut().for_each(|v| *v *= k);
        }
    } else {
        tissue.iter_mut().for_each(|v| *v = 0.0);
    }
    let modulation = (0..nt)
        .map(|t| {
            1.0 + spec.tissue_mod_depth
                * (2.0 * PI * spec.tissue_mod_freq * t as f64 / spec.prf).sin()
        })
        .collect();

    // velocity map and masks
    let mut velocity = vec![0.0; na * nl];
    let mut blood_mask = vec![false; na * nl];
    let mut near_vessel = vec![false; na * nl];
    for vessel in &spec.vessels {
        let geom = VesselGeometry::new(vessel);
        let reach = vessel.radius + spec.guard as f64;
        for z in 0..na {
            for x in 0..nl {
                let (zf, xf) = (z as f64, x as f64);
                let i = z * nl + x;
                if geom.contains(zf, xf, vessel.radius) {
                    let (_, q) = geom.local(zf, xf);
                    blood_mask[i] = true;
                    velocity[i] =
                        vessel.peak_velocity * vessel.profile.factor(q.abs() / vessel.radius);
                }
                let (s, q) = geom.local(zf, xf);
                if s >= -reach && s <= geom.length + reach && q.abs() <= reach {
                    near_vessel[i] = true;
                }
            }
        }
    }
    let noise_start = (tissue_rows + spec.guard).min(na);
    let mut noise_mask = vec![false; na * nl];
    let mut background = vec![false; na * nl];
    for z in 0..na {
        for x in 0..nl {
            let i = z * nl + x;
            if near_vessel[i] {
                continue;
            }
            if z >= noise_start {
                noise_mask[i] = true;
            } else if z < tissue_rows {
                background[i] = true;
            }
        }
    }
    if blood_mask[tissue_rows * nl..].iter().any(|&b| b) {
        return Err(Error::InvalidConfig(
            "a vessel reaches into the noise-only strip".into(),
        ));
    }
    let rois = RoiSet::new(na, nl, blood_mask, background, noise_mask)?;
    Ok(CleanComponents {
        blood,
        tissue,
        modulation,
        velocity,
        rois,
    })
}

impl CleanComponents {
    pub fn rois(&self) -> &RoiSet {
        &self.rois
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn ground_truth(&self, spec: &PhantomSpec) -> Result<GroundTruth> {
        let (na, nl, nt) = (spec.n_axial, spec.n_lateral, spec.n_frames);
        let acq = spec.acquisition();
        let dc = spec.duty_cycle;
        let blood = self.blood.iter().map(|v| dc * v).collect();
        let mut tissue = Vec::with_capacity(nt * na * nl);
        for m in &self.modulation {
            tissue.extend(self.tissue.iter().map(|v| dc * m * v));
        }
        Ok(GroundTruth {
            blood: RfEnsemble::new(nt, na, nl, acq, Provenance::Full, blood)?,
            tissue: RfEnsemble::new(nt, na, nl, acq, Provenance::Full, tissue)?,
            velocity: self.velocity.clone(),
            rois: self.rois.clone(),
        })
    }

    /// Per-angle cube with noise drawn from the stream family `noise_seed`.
    pub fn cube(&self, spec: &PhantomSpec, noise_seed: u64) -> Result<AngleRfCube> {
        let (na, nl, nt) = (spec.n_axial, spec.n_lateral, spec.n_frames);
        let fl = na * nl;
        let dc = spec.duty_cycle;
        let mut signal = vec![0.0; nt * fl];
        for t in 0..nt {
            let m = self.modulation[t];
            let dst = &mut signal[t * fl..(t + 1) * fl];
            let b = &self.blood[t * fl..(t + 1) * fl];
            for ((d, tv), bv) in dst.iter_mut().zip(&self.tissue).zip(b) {
                *d = dc * (m * tv + bv);
            }
        }
        let gain: Vec<f64> = (0..na)
            .map(|z| (spec.noise_depth_gain * z as f64 / na as f64).exp())
            .collect();
        let n_angle = spec.angles.len();
        let mut data = Vec::with_capacity(n_angle * nt * fl);
        for a in 0..n_angle {
            for t in 0..nt {
                let src = &signal[t * fl..(t + 1) * fl];
                if spec.noise_sigma == 0.0 {
                    data.extend_from_slice(src);
                    continue;
                }
                let mut rng = rng::stream(noise_seed, Domain::Noise, (a * nt + t) as u64);
                for (i, s) in src.iter().enumerate() {
                    let n: f64 = rng.sample(StandardNormal);
                    data.push(s + spec.noise_sigma * gain[i / nl] * n);
                }
            }
        }
        AngleRfCube::new(spec.angles.clone(), nt, na, nl, spec.acquisition(), data)
    }
}

/// Renders the per-angle cube and its ground truth.
pub fn render_phantom(spec: &PhantomSpec) -> Result<(AngleRfCube, GroundTruth)> {
    render_phantom_with_noise_seed(spec, spec.seed)
}

pub fn render_phantom_with_noise_seed(
    spec: &PhantomSpec,
    noise_seed: u64,
) -> Result<(AngleRfCube, GroundTruth)> {
    let clean = render_clean(spec)?;
    Ok((clean.cube(spec, noise_seed)?, clean.ground_truth(spec)?))
}

/// Seed of the `index`-th noise realization.
pub fn realization_seed(spec: &PhantomSpec, index: usize) -> u64 {
    rng::derive_seed(spec.seed, index as u64)
}

/// `m` cubes sharing blood and tissue but with fresh, independent noise.
pub fn noise_realizations(spec: &PhantomSpec, m: usize) -> Result<Vec<AngleRfCube>> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one realization".into()));
    }
    let clean = render_clean(spec)?;
    (0..m)
        .map(|i| clean.cube(spec, realization_seed(spec, i)))
        .collect()
}
