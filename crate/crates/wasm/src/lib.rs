//! Browser demo: render a small phantom once, then recompute power Doppler,
//! color Doppler and the Casorati spectrum as the page's sliders move.

use wasm_bindgen::prelude::*;

use ha2ha::baselines::{angular_processing, conventional};
use ha2ha::doppler::{color_doppler, gate_by_power, log_compress, power_doppler, velocity_colormap, DopplerMap};
use ha2ha::metrics::evaluate;
use ha2ha::phantom::{render_clean, CleanComponents, PhantomSpec, VelocityProfile, VesselSpec};
use ha2ha::pipeline::{casorati_spectrum, compound, full_angle_filtered, hilbert_analytic, AngleRfCube, SvdFilterConfig};
use ha2ha::Result;

/// Small enough to recompute interactively.
pub fn demo_spec(seed: u64) -> PhantomSpec {
    let vessel = |start: [f64; 2], end: [f64; 2], radius: f64, v: f64| VesselSpec {
        start,
        end,
        radius,
        peak_velocity: v,
        profile: VelocityProfile::Parabolic,
        amplitude: 1.0,
    };
    PhantomSpec {
        n_axial: 64,
        n_lateral: 64,
        n_frames: 32,
        noise_strip: 14,
        guard: 4,
        vessels: vec![
            vessel([-6.0, 16.0], [40.0, 22.0], 4.0, 0.014),
            vessel([-6.0, 46.0], [40.0, 40.0], 2.5, -0.010),
        ],
        seed,
        ..PhantomSpec::default()
    }
}

fn gray_to_rgba(pixels: &[u8]) -> Vec<u8> {
    pixels.iter().flat_map(|&g| [g, g, g, 255]).collect()
}

fn rgb_to_rgba(pixels: &[u8]) -> Vec<u8> {
    pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

pub struct Scene {
    spec: PhantomSpec,
    clean: CleanComponents,
}

impl Scene {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = demo_spec(seed);
        let clean = render_clean(&spec)?;
        Ok(Self { spec, clean })
    }

    fn cube(&self, dc: f64) -> Result<AngleRfCube> {
        let spec = PhantomSpec {
            duty_cycle: dc,
            ..self.spec.clone()
        };
        spec.validate()?;
        self.clean.cube(&spec, spec.seed)
    }

    pub fn power_map(&self, ap: bool, dc: f64, k_low: usize) -> Result<DopplerMap> {
        let cube = self.cube(dc)?;
        let svd = SvdFilterConfig::new(k_low);
        if ap {
            angular_processing(&cube, &svd)
        } else {
            conventional(&cube, &svd)
        }
    }

    /// Log-compressed RGBA image of the power map.
    pub fn power_rgba(&self, ap: bool, dc: f64, k_low: usize, dr_db: f64) -> Result<Vec<u8>> {
        Ok(gray_to_rgba(&log_compress(&self.power_map(ap, dc, k_low)?, dr_db)?.pixels))
    }

    /// `[cnr, snr, bnp]` in dB; NaN where a metric is undefined.
    pub fn metrics(&self, ap: bool, dc: f64, k_low: usize) -> Result<Vec<f64>> {
        let row = evaluate("demo", dc, &self.power_map(ap, dc, k_low)?, self.clean.rois())?;
        Ok(vec![row.cnr.unwrap_or(f64::NAN), row.snr.unwrap_or(f64::NAN), row.bnp])
    }

    /// Power-gated Kasai velocity as an RGBA image.
    pub fn color_rgba(&self, dc: f64, k_low: usize, gate_db: f64) -> Result<Vec<u8>> {
        let ens = full_angle_filtered(&self.cube(dc)?, &SvdFilterConfig::new(k_low), 1)?;
        let iq = hilbert_analytic(&ens)?;
        let vel = gate_by_power(&color_doppler(&iq)?, &power_doppler(&iq), gate_db)?;
        Ok(rgb_to_rgba(&velocity_colormap(&vel).pixels))
    }

    /// Singular values of the compounded ensemble in dB re the largest.
    pub fn spectrum_db(&self, dc: f64) -> Result<Vec<f64>> {
        let s = casorati_spectrum(&compound(&self.cube(dc)?))?;
        let top = s.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        Ok(s.iter().map(|v| 20.0 * (v.max(f64::MIN_POSITIVE) / top).log10()).collect())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.spec.n_lateral, self.spec.n_axial)
    }
}

fn js(e: ha2ha::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            scene: Scene::new(seed as u64).map_err(js)?,
        })
    }

    pub fn width(&self) -> usize {
        self.scene.size().0
    }

    pub fn height(&self) -> usize {
        self.scene.size().1
    }

    /// `method` is "conventional" or "ap".
    pub fn power(&self, method: &str, dc: f64, k_low: usize, dr_db: f64) -> std::result::Result<Vec<u8>, JsError> {
        self.scene.power_rgba(method == "ap", dc, k_low, dr_db).map_err(js)
    }

    pub fn metrics(&self, method: &str, dc: f64, k_low: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.metrics(method == "ap", dc, k_low).map_err(js)
    }

    pub fn color(&self, dc: f64, k_low: usize, gate_db: f64) -> std::result::Result<Vec<u8>, JsError> {
        self.scene.color_rgba(dc, k_low, gate_db).map_err(js)
    }

    pub fn spectrum(&self, dc: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.spectrum_db(dc).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_have_canvas_size() {
        let s = Scene::new(3).unwrap();
        let (w, h) = s.size();
        assert_eq!(s.power_rgba(false, 1.0, 2, 40.0).unwrap().len(), w * h * 4);
        assert_eq!(s.power_rgba(true, 0.5, 2, 40.0).unwrap().len(), w * h * 4);
        assert_eq!(s.color_rgba(1.0, 2, -20.0).unwrap().len(), w * h * 4);
    }

    #[test]
    fn spectrum_starts_at_zero_db_and_falls() {
        let s = Scene::new(3).unwrap();
        let db = s.spectrum_db(1.0).unwrap();
        assert_eq!(db.len(), 32);
        assert_eq!(db[0], 0.0);
        assert!(db.windows(2).all(|w| w[1] <= w[0]));
        // tissue dominates the first component by a wide margin
        assert!(db[1] < -20.0, "{}", db[1]);
    }

    #[test]
    fn lower_duty_cycle_lowers_cnr() {
        let s = Scene::new(3).unwrap();
        let hi = s.metrics(false, 1.0, 2).unwrap()[0];
        let lo = s.metrics(false, 0.2, 2).unwrap()[0];
        assert!(hi > lo, "{hi} vs {lo}");
        assert!(s.metrics(false, 1.5, 2).is_err());
    }
}
