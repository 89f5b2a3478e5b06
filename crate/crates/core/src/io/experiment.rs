//! Experiment configuration and the end-to-end comparison run.
//!
//! One run trains the denoiser once on a training phantom, then evaluates
//! every requested method on a held-out phantom at the base duty cycle and
//! at each level of the sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::{st_nlm, StNlmConfig};
use crate::denoiser::{build_pairs, denoise_ensemble, format_loss_log, train_with, EpochRecord, TrainConfig, UNetConfig};
use crate::doppler::{color_doppler, gate_by_power, log_compress, power_doppler, power_doppler_ap, velocity_colormap, DopplerMap};
use crate::error::{Error, Result};
use crate::io::config::ConfigDoc;
use crate::io::images::{save_pgm, save_ppm, save_rois};
use crate::metrics::{evaluate, format_csv, format_table, spurious_velocity_db, MetricRow, RoiSet};
use crate::phantom::{default_vessels, render_clean, training_vessels, PhantomSpec, VelocityProfile, VesselSpec};
use crate::pipeline::{full_angle_filtered, hilbert_analytic, prepare_pair, RfEnsemble, SvdFilterConfig};

pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Conventional,
    Ap,
    StNlm,
    Ha2ha,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Conventional, Method::Ap, Method::StNlm, Method::Ha2ha];

    pub fn name(self) -> &'static str {
        match self {
            Method::Conventional => "conventional",
            Method::Ap => "ap",
            Method::StNlm => "stnlm",
            Method::Ha2ha => "ha2ha",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}' (conventional, ap, stnlm, ha2ha)")))
    }
}

/// Training settings sized for a desk run: 64 px patches, every fourth
/// frame, a faster learning rate than the full-scale default.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        frame_stride: 4,
        max_epochs: 50,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Held-out evaluation phantom; its duty cycle is the base level.
    pub phantom: PhantomSpec,
    pub train_phantom: PhantomSpec,
    pub svd: SvdFilterConfig,
    pub interp: usize,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub stnlm: StNlmConfig,
    pub out: PathBuf,
    pub methods: Vec<Method>,
    pub dc_sweep: Vec<f64>,
    pub dynamic_range_db: f64,
    /// Color Doppler power gate relative to each map's maximum.
    pub cdi_gate_db: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 1;
        Self {
            seed,
            phantom: PhantomSpec {
                seed,
                ..PhantomSpec::default()
            },
            train_phantom: PhantomSpec {
                vessels: training_vessels(),
                seed: seed + 100,
                ..PhantomSpec::default()
            },
            svd: SvdFilterConfig::new(2),
            interp: 1,
            unet: UNetConfig::default(),
            train: TrainConfig { seed, ..desk_train_config() },
            stnlm: StNlmConfig::standard(),
            out: PathBuf::from("experiment_out"),
            methods: Method::ALL.to_vec(),
            dc_sweep: vec![0.8, 0.4, 0.2, 0.1],
            dynamic_range_db: 40.0,
            cdi_gate_db: -20.0,
        }
    }
}

fn parse_profile(s: &str) -> Result<VelocityProfile> {
    match s {
        "plug" => Ok(VelocityProfile::Plug),
        "parabolic" => Ok(VelocityProfile::Parabolic),
        _ => Err(Error::InvalidConfig(format!("unknown flow profile '{s}'"))),
    }
}

fn pair(doc: &ConfigDoc, key: &str) -> Result<Option<[f64; 2]>> {
    match doc.get_list::<f64>(key)? {
        None => Ok(None),
        Some(v) if v.len() == 2 => Ok(Some([v[0], v[1]])),
        Some(_) => Err(Error::InvalidConfig(format!("'{key}' needs two values"))),
    }
}

fn window(doc: &ConfigDoc, key: &str, slot: &mut (usize, usize)) -> Result<()> {
    match doc.get_list::<usize>(key)? {
        None => Ok(()),
        Some(v) if v.len() == 2 => {
            *slot = (v[0], v[1]);
            Ok(())
        }
        Some(_) => Err(Error::InvalidConfig(format!("'{key}' needs axial, temporal sizes"))),
    }
}

/// Reads a `[section]` of phantom keys on top of `base`. Vessels come from
/// `vessels = default | training | none` and/or `[section.vessel.N]`
/// blocks; explicit blocks replace the preset.
pub fn phantom_from_doc(doc: &ConfigDoc, section: &str, base: PhantomSpec) -> Result<PhantomSpec> {
    let k = |name: &str| format!("{section}.{name}");
    let mut s = base;
    doc.read(&k("n_axial"), &mut s.n_axial)?;
    doc.read(&k("n_lateral"), &mut s.n_lateral)?;
    doc.read(&k("n_frames"), &mut s.n_frames)?;
    doc.read(&k("pitch"), &mut s.pitch)?;
    doc.read(&k("f0"), &mut s.f0)?;
    doc.read(&k("fs"), &mut s.fs)?;
    doc.read(&k("bandwidth"), &mut s.bandwidth)?;
    doc.read(&k("prf"), &mut s.prf)?;
    doc.read(&k("c"), &mut s.c)?;
    if let Some(a) = doc.get_list(&k("angles"))? {
        s.angles = a;
    }
    doc.read(&k("tissue_amplitude"), &mut s.tissue_amplitude)?;
    doc.read(&k("tissue_mod_freq"), &mut s.tissue_mod_freq)?;
    doc.read(&k("tissue_mod_depth"), &mut s.tissue_mod_depth)?;
    doc.read(&k("noise_sigma"), &mut s.noise_sigma)?;
    doc.read(&k("noise_depth_gain"), &mut s.noise_depth_gain)?;
    doc.read(&k("duty_cycle"), &mut s.duty_cycle)?;
    doc.read(&k("lateral_psf_sigma"), &mut s.lateral_psf_sigma)?;
    doc.read(&k("scatterer_density"), &mut s.scatterer_density)?;
    doc.read(&k("noise_strip"), &mut s.noise_strip)?;
    doc.read(&k("guard"), &mut s.guard)?;
    doc.read(&k("seed"), &mut s.seed)?;
    if let Some(preset) = doc.get::<String>(&k("vessels"))? {
        s.vessels = match preset.as_str() {
            "default" => default_vessels(),
            "training" => training_vessels(),
            "none" => Vec::new(),
            other => return Err(Error::InvalidConfig(format!("unknown vessel preset '{other}'"))),
        };
    }
    let blocks = doc.children(&k("vessel"));
    if !blocks.is_empty() {
        let mut vessels = Vec::with_capacity(blocks.len());
        let mut ordered: Vec<(usize, String)> = blocks
            .into_iter()
            .map(|b| b.parse::<usize>().map(|i| (i, b.clone())).map_err(|_| Error::InvalidConfig(format!("vessel block '{b}' is not an index"))))
            .collect::<Result<_>>()?;
        ordered.sort();
        for (_, b) in ordered {
            let vk = |name: &str| format!("{section}.vessel.{b}.{name}");
            let need = |key: String| Error::InvalidConfig(format!("'{key}' is required"));
            let mut v = VesselSpec {
                start: pair(doc, &vk("start"))?.ok_or_else(|| need(vk("start")))?,
                end: pair(doc, &vk("end"))?.ok_or_else(|| need(vk("end")))?,
                radius: doc.get(&vk("radius"))?.ok_or_else(|| need(vk("radius")))?,
                peak_velocity: doc.get(&vk("peak_velocity"))?.ok_or_else(|| need(vk("peak_velocity")))?,
                profile: VelocityProfile::Parabolic,
                amplitude: 1.0,
            };
            if let Some(p) = doc.get::<String>(&vk("profile"))? {
                v.profile = parse_profile(&p)?;
            }
            doc.read(&vk("amplitude"), &mut v.amplitude)?;
            vessels.push(v);
        }
        s.vessels = vessels;
    }
    Ok(s)
}

pub fn train_from_doc(doc: &ConfigDoc, base: TrainConfig) -> Result<TrainConfig> {
    let mut t = match doc.get::<String>("train.preset")?.as_deref() {
        None => base,
        Some("desk") => TrainConfig { seed: base.seed, ..desk_train_config() },
        Some("full") => TrainConfig { seed: base.seed, ..TrainConfig::full_scale() },
        Some(other) => return Err(Error::InvalidConfig(format!("unknown training preset '{other}'"))),
    };
    doc.read("train.lambda_c", &mut t.lambda_c)?;
    doc.read("train.lambda_1", &mut t.lambda_1)?;
    doc.read("train.batch_size", &mut t.batch_size)?;
    doc.read("train.lr", &mut t.lr)?;
    doc.read("train.beta1", &mut t.beta1)?;
    doc.read("train.beta2", &mut t.beta2)?;
    doc.read("train.weight_decay", &mut t.weight_decay)?;
    doc.read("train.plateau_factor", &mut t.plateau_factor)?;
    doc.read("train.patience", &mut t.patience)?;
    doc.read("train.max_epochs", &mut t.max_epochs)?;
    doc.read("train.patch", &mut t.patch)?;
    doc.read("train.stride", &mut t.stride)?;
    doc.read("train.frame_stride", &mut t.frame_stride)?;
    doc.read_bool("train.augment", &mut t.augment)?;
    doc.read_bool("train.quarter_turns", &mut t.quarter_turns)?;
    doc.read("train.seed", &mut t.seed)?;
    Ok(t)
}

impl ExperimentConfig {
    /// Builds the configuration from a parsed document and rejects keys it
    /// does not know. The top-level `seed` seeds the evaluation phantom,
    /// the training phantom (`seed + 100`) and the network unless those
    /// sections set their own.
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        doc.read("seed", &mut cfg.seed)?;
        let seed = cfg.seed;
        cfg.phantom = phantom_from_doc(doc, "phantom", PhantomSpec { seed, ..PhantomSpec::default() })?;
        let train_base = PhantomSpec {
            vessels: training_vessels(),
            seed: seed.wrapping_add(100),
            ..cfg.phantom.clone()
        };
        cfg.train_phantom = phantom_from_doc(doc, "train_phantom", train_base)?;

        doc.read("svd.k_low", &mut cfg.svd.k_low)?;
        if let Some(v) = doc.get::<String>("svd.k_high")? {
            cfg.svd.k_high = match v.as_str() {
                "none" => None,
                n => Some(n.parse().map_err(|_| Error::InvalidConfig(format!("bad svd.k_high '{n}'")))?),
            };
        }
        doc.read("pipeline.interp", &mut cfg.interp)?;

        doc.read("unet.levels", &mut cfg.unet.levels)?;
        doc.read("unet.base_channels", &mut cfg.unet.base_channels)?;
        doc.read("unet.leaky_slope", &mut cfg.unet.leaky_slope)?;
        cfg.train = train_from_doc(doc, TrainConfig { seed, ..desk_train_config() })?;

        window(doc, "stnlm.similarity", &mut cfg.stnlm.similarity)?;
        window(doc, "stnlm.search", &mut cfg.stnlm.search)?;
        if let Some(h) = doc.get("stnlm.h")? {
            cfg.stnlm.h = Some(h);
        }
        doc.read("stnlm.h_factor", &mut cfg.stnlm.h_factor)?;
        if let Some(s) = doc.get("stnlm.noise_sigma")? {
            cfg.stnlm.noise_sigma = Some(s);
        }

        if let Some(out) = doc.get::<String>("experiment.out")? {
            cfg.out = PathBuf::from(out);
        }
        if let Some(m) = doc.get_list::<Method>("experiment.methods")? {
            cfg.methods = m;
        }
        if let Some(d) = doc.get_list("experiment.dc_sweep")? {
            cfg.dc_sweep = d;
        }
        doc.read("experiment.dynamic_range_db", &mut cfg.dynamic_range_db)?;
        doc.read("experiment.cdi_gate_db", &mut cfg.cdi_gate_db)?;
        doc.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train_phantom.validate()?;
        self.svd.validate(self.phantom.n_frames, self.phantom.n_axial * self.phantom.n_lateral)?;
        self.unet.validate()?;
        self.train.validate()?;
        self.stnlm.validate()?;
        if self.interp == 0 {
            return Err(Error::InvalidConfig("interpolation factor must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods selected".into()));
        }
        if let Some(d) = self.dc_sweep.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return Err(Error::InvalidConfig(format!("duty cycle {d} outside (0, 1]")));
        }
        if !(self.dynamic_range_db > 0.0) {
            return Err(Error::InvalidConfig("dynamic range must be positive".into()));
        }
        if !(self.cdi_gate_db <= 0.0) {
            return Err(Error::InvalidConfig("CDI gate must be <= 0 dB".into()));
        }
        Ok(())
    }

    /// Base duty cycle followed by the sweep, without repeats.
    pub fn duty_cycles(&self) -> Vec<f64> {
        let mut out = vec![self.phantom.duty_cycle];
        for &d in &self.dc_sweep {
            if !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }

    fn uses(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

/// Spurious flow power in the noise-only region of a gated color map.
#[derive(Debug, Clone, PartialEq)]
pub struct CdiRow {
    pub method: String,
    pub spurious_db: f64,
}

/// Agreement of the noisy and denoised ensembles with the filtered
/// noise-free reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub ncc_noisy: f64,
    pub ncc_denoised: f64,
    pub mse_noisy: f64,
    pub mse_denoised: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<MetricRow>,
    pub cdi: Vec<CdiRow>,
    pub fidelity: Option<Fidelity>,
    pub history: Vec<EpochRecord>,
}

impl ExperimentReport {
    pub fn row(&self, method: Method, dc: f64) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method.name() && r.duty_cycle == dc)
    }

    pub fn cdi_db(&self, method: Method) -> Option<f64> {
        self.cdi.iter().find(|r| r.method == method.name()).map(|r| r.spurious_db)
    }

    /// CDI and fidelity summary as plain text.
    pub fn summary(&self) -> String {
        let mut s = String::from("# color Doppler: spurious velocity power in the noise region [dB re v_nyq^2]\n");
        for r in &self.cdi {
            let _ = writeln!(s, "{:<14} {:>10.2}", r.method, r.spurious_db);
        }
        if let Some(f) = self.fidelity {
            let _ = writeln!(s, "# fidelity to the filtered noise-free reference");
            let _ = writeln!(s, "ncc noisy {:.6} denoised {:.6}", f.ncc_noisy, f.ncc_denoised);
            let _ = writeln!(s, "mse noisy {:.6e} denoised {:.6e}", f.mse_noisy, f.mse_denoised);
        }
        s
    }
}

pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

fn dc_tag(dc: f64) -> String {
    format!("{dc:.2}")
}

struct Outputs<'a> {
    dir: &'a Path,
    dr: f64,
}

impl Outputs<'_> {
    fn power(&self, method: Method, dc: f64, map: &DopplerMap) -> Result<()> {
        let img = log_compress(map, self.dr)?;
        save_pgm(self.dir.join(format!("pd_{}_dc{}.pgm", method.name(), dc_tag(dc))), &img)
    }
}

/// Runs the comparison and writes its artifacts into `cfg.out`; `log`
/// receives one progress line per stage.
pub fn run_experiment_with(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let marker = cfg.out.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_inner(cfg, &mut log);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n"))?;
    }
    result
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, |_| {})
}

fn run_inner(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    let out = Outputs {
        dir: &cfg.out,
        dr: cfg.dynamic_range_db,
    };
    let mut history = Vec::new();
    let model = if cfg.uses(Method::Ha2ha) {
        log("rendering training phantom");
        let clean = render_clean(&cfg.train_phantom)?;
        let cube = clean.cube(&cfg.train_phantom, cfg.train_phantom.seed)?;
        let (y1, y2) = prepare_pair(&cube, &cfg.svd, cfg.interp)?;
        let set = build_pairs(&y1, &y2, cfg.train.patch, cfg.train.stride, cfg.train.frame_stride)?;
        log(&format!("training on {} patch pairs", set.len()));
        let loss_path = cfg.out.join("loss.log");
        let trained = train_with(&set, cfg.unet, &cfg.train, |r| {
            history.push(*r);
            // the log on disk grows epoch by epoch
            let _ = fs::write(&loss_path, format_loss_log(&history));
            log(&format!("epoch {} lr {:e} loss {:.6} data {:.6}", r.epoch, r.lr, r.loss, r.data_loss));
        })?;
        fs::write(&loss_path, format_loss_log(&trained.history))?;
        let mut f = fs::File::create(cfg.out.join("model.ckpt"))?;
        trained.params.write_checkpoint(&mut f)?;
        history = trained.history.clone();
        Some(trained)
    } else {
        None
    };

    log("rendering evaluation phantom");
    let clean = render_clean(&cfg.phantom)?;
    let rois: RoiSet = clean.rois().upsample_lateral(cfg.interp)?;
    save_rois(cfg.out.join("rois"), &rois)?;

    let mut rows = Vec::new();
    let mut cdi = Vec::new();
    let mut fidelity = None;
    for (level, dc) in cfg.duty_cycles().into_iter().enumerate() {
        let spec = PhantomSpec {
            duty_cycle: dc,
            ..cfg.phantom.clone()
        };
        let cube = clean.cube(&spec, spec.seed)?;
        let full = full_angle_filtered(&cube, &cfg.svd, cfg.interp)?;
        // (method, ensemble) pairs that support color Doppler at the base level
        let mut ensembles: Vec<(Method, RfEnsemble)> = Vec::new();
        for &m in &cfg.methods {
            log(&format!("dc {} {}", dc_tag(dc), m.name()));
            let map = match m {
                Method::Conventional => {
                    ensembles.push((m, full.clone()));
                    power_doppler(&hilbert_analytic(&full)?)
                }
                Method::Ap => {
                    let (y_even, y_odd) = prepare_pair(&cube, &cfg.svd, cfg.interp)?;
                    power_doppler_ap(&hilbert_analytic(&y_odd)?, &hilbert_analytic(&y_even)?)?
                }
                Method::StNlm => {
                    let den = st_nlm(&full, &cfg.stnlm)?;
                    let map = power_doppler(&hilbert_analytic(&den)?);
                    ensembles.push((m, den));
                    map
                }
                Method::Ha2ha => {
                    let t = model.as_ref().expect("trained when selected");
                    let den = denoise_ensemble(&t.net, &t.params, &full)?;
                    let map = power_doppler(&hilbert_analytic(&den)?);
                    ensembles.push((m, den));
                    map
                }
            };
            out.power(m, dc, &map)?;
            rows.push(evaluate(m.name(), dc, &map, &rois)?);
        }
        if level == 0 {
            for (m, ens) in &ensembles {
                let iq = hilbert_analytic(ens)?;
                let gated = gate_by_power(&color_doppler(&iq)?, &power_doppler(&iq), cfg.cdi_gate_db)?;
                save_ppm(cfg.out.join(format!("cdi_{}.ppm", m.name())), &velocity_colormap(&gated))?;
                cdi.push(CdiRow {
                    method: m.name().to_string(),
                    spurious_db: spurious_velocity_db(&gated, &rois)?,
                });
            }
            if let Some((_, den)) = ensembles.iter().find(|(m, _)| *m == Method::Ha2ha) {
                let reference = full_angle_filtered(&clean.cube(&spec.noise_free(), spec.seed)?, &cfg.svd, cfg.interp)?;
                fidelity = Some(Fidelity {
                    ncc_noisy: ncc(full.data(), reference.data()),
                    ncc_denoised: ncc(den.data(), reference.data()),
                    mse_noisy: mse(full.data(), reference.data()),
                    mse_denoised: mse(den.data(), reference.data()),
                });
            }
        }
        // flushed per level so a failure later keeps what is done
        fs::write(cfg.out.join("metrics.txt"), format_table(&rows))?;
        fs::write(cfg.out.join("metrics.csv"), format_csv(&rows))?;
    }
    let report = ExperimentReport {
        rows,
        cdi,
        fidelity,
        history,
    };
    fs::write(cfg.out.join("report.txt"), report.summary())?;
    Ok(report)
}
