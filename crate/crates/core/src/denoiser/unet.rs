use rand::Rng;

use crate::autodiff::{BnParams, Mode, ParamId, ParamKind, ParamStore, Tape, Tensor4, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    /// Number of pooling steps.
    pub levels: usize,
    /// Channels of the first encoder level; doubled at every level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            leaky_slope: 0.1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidConfig("unet levels must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::InvalidConfig("unet channel counts must be >= 1".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::InvalidConfig("leaky slope must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Spatial dims must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    conv1: Conv,
    bn1: BnParams,
    conv2: Conv,
    bn2: BnParams,
}

/// Layer handles into a [`ParamStore`]; the weights themselves live in the
/// store.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Index `i` is the decoder stage that produces level `i`.
    decoder: Vec<DoubleConv>,
    head: Conv,
}

/// Parameter names and shapes in creation order.
fn layout(cfg: &UNetConfig) -> Vec<(String, ParamKind, [usize; 4])> {
    let mut out = Vec::new();
    let mut double = |prefix: &str, cin: usize, cout: usize| {
        for (i, cin) in [(1, cin), (2, cout)] {
            out.push((format!("{prefix}.conv{i}.weight"), ParamKind::Weight, [cout, cin, 3, 3]));
            out.push((format!("{prefix}.conv{i}.bias"), ParamKind::Bias, [1, cout, 1, 1]));
            out.push((format!("{prefix}.bn{i}.gamma"), ParamKind::BnScale, [1, cout, 1, 1]));
            out.push((format!("{prefix}.bn{i}.beta"), ParamKind::BnShift, [1, cout, 1, 1]));
            out.push((format!("{prefix}.bn{i}.running_mean"), ParamKind::RunningMean, [1, cout, 1, 1]));
            out.push((format!("{prefix}.bn{i}.running_var"), ParamKind::RunningVar, [1, cout, 1, 1]));
            out.push((format!("{prefix}.bn{i}.steps"), ParamKind::BnSteps, [1, 1, 1, 1]));
        }
    };
    let mut cin = cfg.in_channels;
    for l in 0..cfg.levels {
        double(&format!("enc{l}"), cin, cfg.width(l));
        cin = cfg.width(l);
    }
    double("bottleneck", cin, cfg.width(cfg.levels));
    for l in (0..cfg.levels).rev() {
        double(&format!("dec{l}"), cfg.width(l + 1) + cfg.width(l), cfg.width(l));
    }
    out.push(("head.weight".into(), ParamKind::Weight, [cfg.out_channels, cfg.width(0), 1, 1]));
    out.push(("head.bias".into(), ParamKind::Bias, [1, cfg.out_channels, 1, 1]));
    out
}

impl UNet {
    /// Creates a freshly initialized parameter set: kernels uniform in
    /// `+-1/sqrt(fan_in)`, biases and batch-norm shifts zero, scales one.
    pub fn init(cfg: UNetConfig, seed: u64) -> Result<(UNet, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        for (i, (name, kind, shape)) in layout(&cfg).into_iter().enumerate() {
            let value = match kind {
                ParamKind::Weight => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let mut rng = stream(seed, Domain::Init, i as u64);
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor4::from_vec(shape, data)?
                }
                ParamKind::BnScale | ParamKind::RunningVar => Tensor4::filled(shape, 1.0),
                _ => Tensor4::zeros(shape),
            };
            store.add(name, kind, value);
        }
        let net = UNet::bind(cfg, &store)?;
        Ok((net, store))
    }

    /// Binds to an existing store (e.g. a loaded checkpoint), checking every
    /// expected parameter is present with the right kind and shape.
    pub fn bind(cfg: UNetConfig, store: &ParamStore) -> Result<UNet> {
        cfg.validate()?;
        for (name, kind, shape) in layout(&cfg) {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks '{name}'")))?;
            let p = store.get(id);
            if p.kind != kind || p.value.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "'{name}': expected {kind:?} {shape:?}, found {:?} {:?}",
                    p.kind,
                    p.value.shape()
                )));
            }
        }
        let get = |n: String| store.find(&n).expect("checked above");
        let conv = |p: &str| Conv {
            weight: get(format!("{p}.weight")),
            bias: get(format!("{p}.bias")),
        };
        let bn = |p: &str| BnParams {
            gamma: get(format!("{p}.gamma")),
            beta: get(format!("{p}.beta")),
            running_mean: get(format!("{p}.running_mean")),
            running_var: get(format!("{p}.running_var")),
            steps: get(format!("{p}.steps")),
        };
        let double = |p: &str| DoubleConv {
            conv1: conv(&format!("{p}.conv1")),
            bn1: bn(&format!("{p}.bn1")),
            conv2: conv(&format!("{p}.conv2")),
            bn2: bn(&format!("{p}.bn2")),
        };
        Ok(UNet {
            cfg,
            encoder: (0..cfg.levels).map(|l| double(&format!("enc{l}"))).collect(),
            bottleneck: double("bottleneck"),
            decoder: (0..cfg.levels).map(|l| double(&format!("dec{l}"))).collect(),
            head: conv("head"),
        })
    }

    /// Recovers depth and widths from the parameter names and shapes of a
    /// checkpoint, then binds. The leaky slope is not stored and must be
    /// supplied.
    pub fn from_checkpoint(store: &ParamStore, leaky_slope: f64) -> Result<UNet> {
        let shape = |n: &str| {
            store
                .find(n)
                .map(|id| store.value(id).shape())
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks '{n}'")))
        };
        let levels = (0..).take_while(|l| store.find(&format!("enc{l}.conv1.weight")).is_some()).count();
        let enc0 = shape("enc0.conv1.weight")?;
        let head = shape("head.weight")?;
        let cfg = UNetConfig {
            levels,
            base_channels: enc0[0],
            in_channels: enc0[1],
            out_channels: head[0],
            leaky_slope,
        };
        UNet::bind(cfg, store)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn conv(&self, tape: &mut Tape, store: &ParamStore, x: Var, c: Conv) -> Result<Var> {
        let w = tape.param(store, c.weight);
        let b = tape.param(store, c.bias);
        tape.conv2d(x, w, Some(b))
    }

    fn double(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        d: DoubleConv,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        for (c, bn) in [(d.conv1, d.bn1), (d.conv2, d.bn2)] {
            h = self.conv(tape, store, h, c)?;
            h = tape.batch_norm(store, h, bn, mode)?;
            h = tape.leaky_relu(h, self.cfg.leaky_slope);
        }
        Ok(h)
    }

    /// Forward pass. Train mode updates batch-norm running statistics in
    /// `store`.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).shape();
        let d = self.cfg.divisor();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "unet expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % d != 0 || w % d != 0 {
            return Err(Error::ShapeMismatch(format!(
                "unet input {h}x{w} not divisible by {d}"
            )));
        }
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut cur = x;
        for l in 0..self.cfg.levels {
            let e = self.double(tape, store, cur, self.encoder[l], mode)?;
            skips.push(e);
            cur = tape.max_pool2(e)?;
        }
        cur = self.double(tape, store, cur, self.bottleneck, mode)?;
        for l in (0..self.cfg.levels).rev() {
            let up = tape.bilinear_up2(cur);
            let cat = tape.concat_channels(skips[l], up)?;
            cur = self.double(tape, store, cat, self.decoder[l], mode)?;
        }
        self.conv(tape, store, cur, self.head)
    }

    /// Convenience wrapper: forward a plain tensor and return the output.
    pub fn apply(&self, store: &mut ParamStore, x: Tensor4, mode: Mode) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = self.forward(&mut tape, store, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Whether every batch-norm layer has running statistics.
    pub fn is_trained(&self, store: &ParamStore) -> bool {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.decoder)
            .flat_map(|d| [d.bn1, d.bn2])
            .all(|bn| store.value(bn.steps).item() >= 1.0)
    }
}
