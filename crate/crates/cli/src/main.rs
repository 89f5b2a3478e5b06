//! `ha2ha` command-line tool.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ha2ha::autodiff::ParamStore;
use ha2ha::baselines::{angular_processing, conventional, st_nlm};
use ha2ha::denoiser::{build_pairs, denoise_ensemble, format_loss_log, train_with, UNet};
use ha2ha::doppler::{color_doppler, gate_by_power, log_compress, power_doppler, velocity_colormap, DopplerMap, VelocityMap};
use ha2ha::io::experiment::run_experiment_with;
use ha2ha::io::images::{load_rois, save_pgm, save_ppm, save_rois};
use ha2ha::io::urfc::{load_urfc, save_urfc, Urfc};
use ha2ha::io::{ConfigDoc, ExperimentConfig};
use ha2ha::metrics::{evaluate, format_csv, format_table};
use ha2ha::phantom::render_phantom;
use ha2ha::pipeline::{
    compound, full_angle_filtered, hilbert_analytic, lateral_interpolate, split_angles, svd_clutter_filter, AngleRfCube,
    IqEnsemble, Provenance, RfEnsemble,
};
use ha2ha::Error;

#[derive(Parser)]
#[command(name = "ha2ha", version, about = "Self-supervised denoising of split-angle Doppler ensembles")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file (`key = value` lines, `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a phantom to an angle cube.
    Simulate(Simulate),
    /// Compound, interpolate and clutter-filter a cube into an RF ensemble.
    Pipeline(Pipeline),
    /// Train the denoiser on the even/odd pair of a cube.
    Train(Train),
    /// Denoise a filtered RF ensemble frame by frame.
    Denoise(Denoise),
    /// Power or color Doppler from an ensemble.
    #[command(subcommand)]
    Doppler(DopplerCmd),
    /// Reference methods.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// CNR, SNR and BNP of a power map.
    Metrics(Metrics),
    /// Full comparison: train once, evaluate every method and duty cycle.
    Experiment(Experiment),
}

#[derive(Args)]
struct Simulate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Directory for ROI masks of the rendered phantom.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Duty cycle in (0, 1].
    #[arg(long)]
    dc: Option<f64>,
    /// Render the training phantom instead of the evaluation phantom.
    #[arg(long)]
    training: bool,
    #[arg(long)]
    noise_free: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Full,
    Even,
    Odd,
}

#[derive(Args)]
struct Pipeline {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    subset: Subset,
    #[arg(long)]
    k_low: Option<usize>,
    #[arg(long)]
    interp: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Angle cube to train on; renders the configured training phantom if
    /// omitted.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct Denoise {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DopplerCmd {
    /// Mean power per pixel; writes a one-frame URFC map.
    Power(DopplerArgs),
    /// Kasai axial velocity; writes a one-frame URFC map in m/s.
    Color(DopplerArgs),
}

#[derive(Args)]
struct DopplerArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Log-compressed PGM (power) or color PPM (velocity).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Display dynamic range in dB (power).
    #[arg(long)]
    dr: Option<f64>,
    /// Zero velocities where power is below this many dB under the
    /// maximum (color, e.g. -20).
    #[arg(long, allow_hyphen_values = true)]
    gate_db: Option<f64>,
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Full-angle power Doppler from a cube.
    Conventional(BaselineArgs),
    /// Angular processing power Doppler from a cube.
    Ap(BaselineArgs),
    /// Spatiotemporal non-local means on a filtered ensemble.
    Stnlm(BaselineArgs),
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    k_low: Option<usize>,
    #[arg(long)]
    dr: Option<f64>,
}

#[derive(Args)]
struct Metrics {
    #[command(flatten)]
    common: Common,
    /// One-frame URFC power map.
    #[arg(long)]
    map: PathBuf,
    /// Directory with blood.pgm, background.pgm and noise.pgm.
    #[arg(long)]
    rois: PathBuf,
    #[arg(long, default_value = "map")]
    method: String,
    #[arg(long, default_value_t = 1.0)]
    dc: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Experiment {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated subset of conventional, ap, stnlm, ha2ha.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    dr: Option<f64>,
}

/// Errors from the user's inputs exit with 2, everything else with 1.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::Parse { .. } => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn usage_error(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

/// Reads the config file (if any), applies overrides, returns the full
/// experiment configuration every subcommand draws from.
fn load_config(common: &Common, overrides: &[(&str, Option<String>)]) -> Res<ExperimentConfig> {
    let mut doc = match &common.config {
        Some(p) if !p.is_file() => return Err(usage_error(format!("config file {} not found", p.display()))),
        Some(p) => ConfigDoc::load(p)?,
        None => ConfigDoc::default(),
    };
    for pair in &common.set {
        doc.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        doc.set("seed", &s.to_string())?;
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            doc.set(key, v)?;
        }
    }
    Ok(ExperimentConfig::from_doc(&doc)?)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn power_to_urfc(map: &DopplerMap) -> Res<Urfc> {
    Ok(Urfc::Rf(RfEnsemble::new(
        1,
        map.n_axial(),
        map.n_lateral(),
        *map.acquisition(),
        Provenance::Full,
        map.data().to_vec(),
    )?))
}

fn velocity_to_urfc(v: &VelocityMap, like: &IqEnsemble) -> Res<Urfc> {
    Ok(Urfc::Rf(RfEnsemble::new(
        1,
        v.n_axial(),
        v.n_lateral(),
        *like.acquisition(),
        Provenance::Full,
        v.data().to_vec(),
    )?))
}

fn load_power_map(path: &Path) -> Res<DopplerMap> {
    let e = load_urfc(path)?.into_rf()?;
    if e.n_time() != 1 {
        return Err(usage_error(format!("{} holds {} frames, expected a one-frame map", path.display(), e.n_time())));
    }
    Ok(DopplerMap::new(e.n_axial(), e.n_lateral(), *e.acquisition(), e.data().to_vec())?)
}

/// RF ensembles go through the Hilbert transform; IQ ensembles are used
/// as they are.
fn load_iq(path: &Path) -> Res<IqEnsemble> {
    Ok(match load_urfc(path)? {
        Urfc::Rf(e) => hilbert_analytic(&e)?,
        Urfc::Iq(e) => e,
        Urfc::Cube(_) => return Err(usage_error(format!("{} is an angle cube; run `pipeline` first", path.display()))),
    })
}

fn load_cube(path: &Path) -> Res<AngleRfCube> {
    Ok(load_urfc(path)?.into_cube()?)
}

fn simulate(a: &Simulate) -> Res<()> {
    let cfg = load_config(&a.common, &[])?;
    let mut spec = if a.training { cfg.train_phantom } else { cfg.phantom };
    if let Some(dc) = a.dc {
        spec.duty_cycle = dc;
    }
    if a.noise_free {
        spec = spec.noise_free();
    }
    spec.validate()?;
    let (cube, truth) = render_phantom(&spec)?;
    save_urfc(&a.out, &Urfc::Cube(cube))?;
    if let Some(dir) = &a.truth {
        save_rois(dir, &truth.rois)?;
    }
    Ok(())
}

fn pipeline(a: &Pipeline) -> Res<()> {
    let cfg = load_config(&a.common, &[("svd.k_low", opt(&a.k_low)), ("pipeline.interp", opt(&a.interp))])?;
    let cube = load_cube(&a.input)?;
    let ens = match a.subset {
        Subset::Full => full_angle_filtered(&cube, &cfg.svd, cfg.interp)?,
        Subset::Even | Subset::Odd => {
            let (even, odd) = split_angles(&cube)?;
            let part = if matches!(a.subset, Subset::Even) { even } else { odd };
            svd_clutter_filter(&lateral_interpolate(&compound(&part), cfg.interp)?, &cfg.svd)?
        }
    };
    save_urfc(&a.out, &Urfc::Rf(ens))?;
    Ok(())
}

fn train(a: &Train) -> Res<()> {
    let cfg = load_config(&a.common, &[("train.max_epochs", opt(&a.epochs)), ("train.lr", opt(&a.lr))])?;
    let cube = match &a.input {
        Some(p) => load_cube(p)?,
        None => render_phantom(&cfg.train_phantom)?.0,
    };
    let (y1, y2) = ha2ha::pipeline::prepare_pair(&cube, &cfg.svd, cfg.interp)?;
    let set = build_pairs(&y1, &y2, cfg.train.patch, cfg.train.stride, cfg.train.frame_stride)?;
    eprintln!("training on {} patch pairs", set.len());
    let trained = train_with(&set, cfg.unet, &cfg.train, |r| {
        eprintln!("epoch {} lr {:e} loss {:.6} data {:.6}", r.epoch, r.lr, r.loss, r.data_loss);
    })?;
    trained.params.write_checkpoint(BufWriter::new(File::create(&a.out).map_err(Error::from)?))?;
    if let Some(log) = &a.log {
        fs::write(log, format_loss_log(&trained.history)).map_err(Error::from)?;
    }
    Ok(())
}

fn denoise(a: &Denoise) -> Res<()> {
    let cfg = load_config(&a.common, &[])?;
    let params = ParamStore::read_checkpoint(File::open(&a.model).map_err(Error::from)?)?;
    let net = UNet::from_checkpoint(&params, cfg.unet.leaky_slope)?;
    let ens = load_urfc(&a.input)?.into_rf()?;
    save_urfc(&a.out, &Urfc::Rf(denoise_ensemble(&net, &params, &ens)?))?;
    Ok(())
}

fn doppler(cmd: &DopplerCmd) -> Res<()> {
    match cmd {
        DopplerCmd::Power(a) => {
            let cfg = load_config(&a.common, &[("experiment.dynamic_range_db", opt(&a.dr))])?;
            let map = power_doppler(&load_iq(&a.input)?);
            save_urfc(&a.out, &power_to_urfc(&map)?)?;
            if let Some(img) = &a.image {
                save_pgm(img, &log_compress(&map, cfg.dynamic_range_db)?)?;
            }
        }
        DopplerCmd::Color(a) => {
            load_config(&a.common, &[])?;
            let iq = load_iq(&a.input)?;
            let mut vel = color_doppler(&iq)?;
            if let Some(db) = a.gate_db {
                vel = gate_by_power(&vel, &power_doppler(&iq), db)?;
            }
            save_urfc(&a.out, &velocity_to_urfc(&vel, &iq)?)?;
            if let Some(img) = &a.image {
                save_ppm(img, &velocity_colormap(&vel))?;
            }
        }
    }
    Ok(())
}

fn baseline(cmd: &BaselineCmd) -> Res<()> {
    let (a, kind) = match cmd {
        BaselineCmd::Conventional(a) => (a, 0),
        BaselineCmd::Ap(a) => (a, 1),
        BaselineCmd::Stnlm(a) => (a, 2),
    };
    let cfg = load_config(&a.common, &[("svd.k_low", opt(&a.k_low)), ("experiment.dynamic_range_db", opt(&a.dr))])?;
    if kind == 2 {
        let ens = load_urfc(&a.input)?.into_rf()?;
        let den = st_nlm(&ens, &cfg.stnlm)?;
        if let Some(img) = &a.image {
            save_pgm(img, &log_compress(&power_doppler(&hilbert_analytic(&den)?), cfg.dynamic_range_db)?)?;
        }
        save_urfc(&a.out, &Urfc::Rf(den))?;
        return Ok(());
    }
    let cube = load_cube(&a.input)?;
    let map = if kind == 0 { conventional(&cube, &cfg.svd)? } else { angular_processing(&cube, &cfg.svd)? };
    save_urfc(&a.out, &power_to_urfc(&map)?)?;
    if let Some(img) = &a.image {
        save_pgm(img, &log_compress(&map, cfg.dynamic_range_db)?)?;
    }
    Ok(())
}

fn metrics(a: &Metrics) -> Res<()> {
    load_config(&a.common, &[])?;
    let map = load_power_map(&a.map)?;
    let rois = load_rois(&a.rois)?;
    let row = evaluate(&a.method, a.dc, &map, &rois)?;
    print!("{}", format_table(std::slice::from_ref(&row)));
    if let Some(csv) = &a.csv {
        fs::write(csv, format_csv(&[row])).map_err(Error::from)?;
    }
    Ok(())
}

fn experiment(a: &Experiment) -> Res<()> {
    let out = a.out.as_ref().map(|p| p.display().to_string());
    let cfg = load_config(
        &a.common,
        &[
            ("experiment.out", out),
            ("train.max_epochs", opt(&a.epochs)),
            ("experiment.methods", a.methods.clone()),
            ("experiment.dynamic_range_db", opt(&a.dr)),
        ],
    )?;
    let report = run_experiment_with(&cfg, |line| eprintln!("{line}"))?;
    print!("{}", format_table(&report.rows));
    print!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match &cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Pipeline(a) => pipeline(a),
        Cmd::Train(a) => train(a),
        Cmd::Denoise(a) => denoise(a),
        Cmd::Doppler(c) => doppler(c),
        Cmd::Baseline(c) => baseline(c),
        Cmd::Metrics(a) => metrics(a),
        Cmd::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
