//! The deterministic signal chain shared by training and evaluation:
//! angle subset selection, coherent compounding, lateral interpolation,
//! SVD clutter filtering and analytic-signal conversion.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Acquisition metadata carried alongside every data block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    /// Transmit center frequency (Hz).
    pub f0: f64,
    /// RF sampling frequency (Hz).
    pub fs: f64,
    /// Effective (compounded) frame rate (Hz).
    pub prf: f64,
    /// Speed of sound (m/s).
    pub c: f64,
    /// Axial pixel pitch (m).
    pub pitch_axial: f64,
    /// Lateral pixel pitch (m).
    pub pitch_lateral: f64,
}

impl Acquisition {
    pub fn wavelength(&self) -> f64 {
        self.c / self.f0
    }

    /// Largest unambiguous axial velocity, `c * PRF / (4 f0)`.
    pub fn nyquist_velocity(&self) -> f64 {
        self.c * self.prf / (4.0 * self.f0)
    }

    /// Axial carrier frequency of beamformed RF in cycles per axial pixel
    /// (round trip doubles the spatial frequency).
    pub fn carrier_cycles_per_pixel(&self) -> f64 {
        2.0 * self.f0 * self.pitch_axial / self.c
    }
}

impl Default for Acquisition {
    fn default() -> Self {
        let f0 = 5.208e6;
        let c = 1540.0;
        let pitch = c / f0 / 8.0;
        Self {
            f0,
            fs: 20.832e6,
            prf: 500.0,
            c,
            pitch_axial: pitch,
            pitch_lateral: pitch,
        }
    }
}

/// Which angle subset a compounded block came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Full,
    Even,
    Odd,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Full => "full",
            Provenance::Even => "even",
            Provenance::Odd => "odd",
        }
    }
}

/// Per-angle beamformed RF, indexed `[angle][time][axial][lateral]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleRfCube {
    n_time: usize,
    n_axial: usize,
    n_lateral: usize,
    angles: Vec<f64>,
    acq: Acquisition,
    subset: Provenance,
    data: Vec<f64>,
}

impl AngleRfCube {
    pub fn new(
        angles: Vec<f64>,
        n_time: usize,
        n_axial: usize,
        n_lateral: usize,
        acq: Acquisition,
        data: Vec<f64>,
    ) -> Result<Self> {
        if angles.is_empty() || n_time == 0 || n_axial == 0 || n_lateral == 0 {
            return Err(Error::InvalidConfig("cube dimensions must be >= 1".into()));
        }
        if angles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "angle list must be strictly increasing".into(),
            ));
        }
        let expected = angles.len() * n_time * n_axial * n_lateral;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "cube payload has {} samples, dims imply {expected}",
                data.len()
            )));
        }
        Ok(Self {
            n_time,
            n_axial,
            n_lateral,
            angles,
            acq,
            subset: Provenance::Full,
            data,
        })
    }

    pub fn zeros(
        angles: Vec<f64>,
        n_time: usize,
        n_axial: usize,
        n_lateral: usize,
        acq: Acquisition,
    ) -> Result<Self> {
        let len = angles.len() * n_time * n_axial * n_lateral;
        Self::new(angles, n_time, n_axial, n_lateral, acq, vec![0.0; len])
    }

    pub fn n_angle(&self) -> usize {
        self.angles.len()
    }
    pub fn n_time(&self) -> usize {
        self.n_time
    }
    pub fn n_axial(&self) -> usize {
        self.n_axial
    }
    pub fn n_lateral(&self) -> usize {
        self.n_lateral
    }
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
    pub fn acquisition(&self) -> &Acquisition {
        &self.acq
    }
    pub fn subset(&self) -> Provenance {
        self.subset
    }
    pub fn with_subset(mut self, subset: Provenance) -> Self {
        self.subset = subset;
        self
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn frame_len(&self) -> usize {
        self.n_axial * self.n_lateral
    }

    /// Samples of one angle, `[time][axial][lateral]`.
    pub fn angle(&self, a: usize) -> &[f64] {
        let len = self.n_time * self.frame_len();
        &self.data[a * len..(a + 1) * len]
    }

    pub fn angle_mut(&mut self, a: usize) -> &mut [f64] {
        let len = self.n_time * self.frame_len();
        &mut self.data[a * len..(a + 1) * len]
    }

    pub fn frame(&self, a: usize, t: usize) -> &[f64] {
        let fl = self.frame_len();
        let off = (a * self.n_time + t) * fl;
        &self.data[off..off + fl]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }
}

/// Compounded real RF ensemble, `[time][axial][lateral]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfEnsemble {
    n_time: usize,
    n_axial: usize,
    n_lateral: usize,
    acq: Acquisition,
    provenance: Provenance,
    data: Vec<f64>,
}

impl RfEnsemble {
    pub fn new(
        n_time: usize,
        n_axial: usize,
        n_lateral: usize,
        acq: Acquisition,
        provenance: Provenance,
        data: Vec<f64>,
    ) -> Result<Self> {
        if n_time == 0 || n_axial == 0 || n_lateral == 0 {
            return Err(Error::InvalidConfig(
                "ensemble dimensions must be >= 1".into(),
            ));
        }
        if data.len() != n_time * n_axial * n_lateral {
            return Err(Error::ShapeMismatch(format!(
                "ensemble payload has {} samples, dims imply {}",
                data.len(),
                n_time * n_axial * n_lateral
            )));
        }
        Ok(Self {
            n_time,
            n_axial,
            n_lateral,
            acq,
            provenance,
            data,
        })
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }
    pub fn n_axial(&self) -> usize {
        self.n_axial
    }
    pub fn n_lateral(&self) -> usize {
        self.n_lateral
    }
    pub fn frame_len(&self) -> usize {
        self.n_axial * self.n_lateral
    }
    pub fn acquisition(&self) -> &Acquisition {
        &self.acq
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn frame(&self, t: usize) -> &[f64] {
        let fl = self.frame_len();
        &self.data[t * fl..(t + 1) * fl]
    }
    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let fl = self.frame_len();
        &mut self.data[t * fl..(t + 1) * fl]
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Same dims and metadata, new samples.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_time,
            self.n_axial,
            self.n_lateral,
            self.acq,
            self.provenance,
            data,
        )
    }

    pub fn same_shape(&self, other: &RfEnsemble) -> bool {
        self.n_time == other.n_time
            && self.n_axial == other.n_axial
            && self.n_lateral == other.n_lateral
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Complex analytic-signal ensemble, `[time][axial][lateral]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqEnsemble {
    n_time: usize,
    n_axial: usize,
    n_lateral: usize,
    acq: Acquisition,
    provenance: Provenance,
    data: Vec<Complex64>,
}

impl IqEnsemble {
    /// Builds an IQ ensemble directly. Pipeline code obtains these from
    /// [`hilbert_analytic`]; this constructor exists for file readers and
    /// synthetic test signals.
    pub fn new(
        n_time: usize,
        n_axial: usize,
        n_lateral: usize,
        acq: Acquisition,
        provenance: Provenance,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if n_time == 0 || n_axial == 0 || n_lateral == 0 {
            return Err(Error::InvalidConfig(
                "ensemble dimensions must be >= 1".into(),
            ));
        }
        if data.len() != n_time * n_axial * n_lateral {
            return Err(Error::ShapeMismatch(format!(
                "IQ payload has {} samples, dims imply {}",
                data.len(),
                n_time * n_axial * n_lateral
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidConfig("IQ samples must be finite".into()));
        }
        Ok(Self {
            n_time,
            n_axial,
            n_lateral,
            acq,
            provenance,
            data,
        })
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }
    pub fn n_axial(&self) -> usize {
        self.n_axial
    }
    pub fn n_lateral(&self) -> usize {
        self.n_lateral
    }
    pub fn frame_len(&self) -> usize {
        self.n_axial * self.n_lateral
    }
    pub fn acquisition(&self) -> &Acquisition {
        &self.acq
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
    pub fn same_shape(&self, other: &IqEnsemble) -> bool {
        self.n_time == other.n_time
            && self.n_axial == other.n_axial
            && self.n_lateral == other.n_lateral
    }
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }
}

/// Splits a cube into its even-indexed (0, 2, 4, ...) and odd-indexed
/// (1, 3, 5, ...) angle subsets.
pub fn split_angles(cube: &AngleRfCube) -> Result<(AngleRfCube, AngleRfCube)> {
    let n = cube.n_angle();
    if n < 2 {
        return Err(Error::TooFewAngles(n));
    }
    let pick = |parity: usize, subset: Provenance| -> Result<AngleRfCube> {
        let idx: Vec<usize> = (parity..n).step_by(2).collect();
        let angles = idx.iter().map(|&a| cube.angles[a]).collect();
        let mut data = Vec::with_capacity(idx.len() * cube.angle(0).len());
        for &a in &idx {
            data.extend_from_slice(cube.angle(a));
        }
        Ok(AngleRfCube::new(
            angles,
            cube.n_time,
            cube.n_axial,
            cube.n_lateral,
            cube.acq,
            data,
        )?
        .with_subset(subset))
    };
    Ok((pick(0, Provenance::Even)?, pick(1, Provenance::Odd)?))
}

/// Coherent compounding: pixelwise mean over the angle axis.
pub fn compound(cube: &AngleRfCube) -> RfEnsemble {
    let per_angle = cube.angle(0).len();
    let mut out = vec![0.0; per_angle];
    for a in 0..cube.n_angle() {
        for (o, v) in out.iter_mut().zip(cube.angle(a)) {
            *o += v;
        }
    }
    let inv = 1.0 / cube.n_angle() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    RfEnsemble {
        n_time: cube.n_time,
        n_axial: cube.n_axial,
        n_lateral: cube.n_lateral,
        acq: cube.acq,
        provenance: cube.subset,
        data: out,
    }
}

/// Linear interpolation along the lateral axis. Output column `j` samples
/// input position `j / factor`; positions past the last column replicate it.
pub fn lateral_interpolate(ens: &RfEnsemble, factor: usize) -> Result<RfEnsemble> {
    if factor == 0 {
        return Err(Error::InvalidConfig(
            "interpolation factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(ens.clone());
    }
    let nl = ens.n_lateral;
    let out_nl = nl * factor;
    let rows = ens.n_time * ens.n_axial;
    let mut out = vec![0.0; rows * out_nl];
    for r in 0..rows {
        let src = &ens.data[r * nl..(r + 1) * nl];
        let dst = &mut out[r * out_nl..(r + 1) * out_nl];
        for (j, d) in dst.iter_mut().enumerate() {
            let left = j / factor;
            let frac = (j % factor) as f64 / factor as f64;
            *d = if left + 1 < nl {
                src[left] * (1.0 - frac) + src[left + 1] * frac
            } else {
                src[nl - 1]
            };
        }
    }
    let mut acq = ens.acq;
    acq.pitch_lateral /= factor as f64;
    RfEnsemble::new(ens.n_time, ens.n_axial, out_nl, acq, ens.provenance, out)
}

/// Singular-component cutoffs for the clutter filter.
///
/// Components are ranked by descending singular value. Indices `< k_low`
/// (tissue) and, when set, `>= k_high` (noise) are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvdFilterConfig {
    pub k_low: usize,
    pub k_high: Option<usize>,
}

impl SvdFilterConfig {
    pub fn new(k_low: usize) -> Self {
        Self { k_low, k_high: None }
    }

    pub fn validate(&self, n_time: usize, n_pixels: usize) -> Result<()> {
        let rank = n_time.min(n_pixels);
        if self.k_low >= rank {
            return Err(Error::InvalidConfig(format!(
                "k_low {} must be below min(n_time, n_pixels) = {rank}",
                self.k_low
            )));
        }
        if let Some(kh) = self.k_high {
            if kh <= self.k_low {
                return Err(Error::InvalidConfig(format!(
                    "k_high {kh} must exceed k_low {}",
                    self.k_low
                )));
            }
        }
        Ok(())
    }

    fn removes(&self, rank_index: usize) -> bool {
        rank_index < self.k_low || self.k_high.is_some_and(|kh| rank_index >= kh)
    }
}

/// A temporal projector fitted to one ensemble.
///
/// The Casorati matrix has pixels as rows and frames as columns, so the
/// filter is `M -> M (I - V_r V_r^T)` with `V_r` the right singular vectors
/// of the removed components.
#[derive(Debug, Clone)]
pub struct ClutterProjector {
    projector: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl ClutterProjector {
    pub fn fit(ens: &RfEnsemble, cfg: &SvdFilterConfig) -> Result<Self> {
        let n_t = ens.n_time;
        let n_pix = ens.frame_len();
        cfg.validate(n_t, n_pix)?;
        // [time][pixel] row-major is the column-major layout of the
        // pixels x time Casorati matrix.
        let casorati = DMatrix::from_column_slice(n_pix, n_t, &ens.data);
        let rank = n_t.min(n_pix);
        let svd = casorati
            .try_svd(false, true, f64::EPSILON, 200 * rank.max(10))
            .ok_or(Error::SvdNoConvergence {
                rows: n_pix,
                cols: n_t,
            })?;
        let v_t = svd.v_t.as_ref().ok_or(Error::SvdNoConvergence {
            rows: n_pix,
            cols: n_t,
        })?;
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

        let mut projector = DMatrix::<f64>::identity(n_t, n_t);
        for (rank_index, &comp) in order.iter().enumerate() {
            if !cfg.removes(rank_index) {
                continue;
            }
            let v = v_t.row(comp);
            for i in 0..n_t {
                for j in 0..n_t {
                    projector[(i, j)] -= v[i] * v[j];
                }
            }
        }
        Ok(Self {
            projector,
            singular_values: order.iter().map(|&i| sv[i]).collect(),
        })
    }

    /// Singular values of the fitted ensemble, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn apply(&self, ens: &RfEnsemble) -> Result<RfEnsemble> {
        let n_t = self.projector.nrows();
        if ens.n_time != n_t {
            return Err(Error::ShapeMismatch(format!(
                "projector fitted on {n_t} frames, ensemble has {}",
                ens.n_time
            )));
        }
        let n_pix = ens.frame_len();
        let mut out = vec![0.0; ens.data.len()];
        // out[:, j] = sum_i M[:, i] * P[i, j]
        for j in 0..n_t {
            let dst = &mut out[j * n_pix..(j + 1) * n_pix];
            for i in 0..n_t {
                let p = self.projector[(i, j)];
                if p == 0.0 {
                    continue;
                }
                let src = &ens.data[i * n_pix..(i + 1) * n_pix];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += p * s;
                }
            }
        }
        ens.with_data(out)
    }
}

/// Singular values of the Casorati matrix, descending.
pub fn casorati_spectrum(ens: &RfEnsemble) -> Result<Vec<f64>> {
    Ok(ClutterProjector::fit(ens, &SvdFilterConfig::new(0))?
        .singular_values
        .clone())
}

/// SVD clutter filter over the whole ensemble.
pub fn svd_clutter_filter(ens: &RfEnsemble, cfg: &SvdFilterConfig) -> Result<RfEnsemble> {
    if cfg.k_low == 0 && cfg.k_high.is_none() {
        cfg.validate(ens.n_time, ens.frame_len())?;
        return Ok(ens.clone());
    }
    ClutterProjector::fit(ens, cfg)?.apply(ens)
}

/// Analytic signal along the axial axis of every (time, lateral) column.
pub fn hilbert_analytic(ens: &RfEnsemble) -> Result<IqEnsemble> {
    let n = ens.n_axial;
    if n < 8 {
        return Err(Error::InvalidConfig(format!(
            "hilbert_analytic needs n_axial >= 8, got {n}"
        )));
    }
    let nl = ens.n_lateral;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let weights = analytic_weights(n);
    let mut out = vec![Complex64::new(0.0, 0.0); ens.data.len()];
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len()];
    let norm = 1.0 / n as f64;
    for t in 0..ens.n_time {
        let frame = ens.frame(t);
        let base = t * ens.frame_len();
        for x in 0..nl {
            for (z, c) in col.iter_mut().enumerate() {
                *c = Complex64::new(frame[z * nl + x], 0.0);
            }
            fwd.process_with_scratch(&mut col, &mut scratch);
            for (c, w) in col.iter_mut().zip(&weights) {
                *c *= *w;
            }
            inv.process_with_scratch(&mut col, &mut scratch);
            for (z, c) in col.iter().enumerate() {
                out[base + z * nl + x] = c * norm;
            }
        }
    }
    IqEnsemble::new(ens.n_time, n, nl, ens.acq, ens.provenance, out)
}

/// Spectral weights of the one-sided analytic transform: DC and Nyquist
/// kept, positive bins doubled, negative bins zeroed.
pub fn analytic_weights(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[0] = 1.0;
    if n.is_multiple_of(2) {
        w[n / 2] = 1.0;
        w[1..n / 2].iter_mut().for_each(|v| *v = 2.0);
    } else {
        w[1..=(n - 1) / 2].iter_mut().for_each(|v| *v = 2.0);
    }
    w
}

/// Builds the complementary training pair: `Y1` from the even-indexed
/// angles, `Y2` from the odd-indexed angles, each compounded,
/// interpolated and clutter filtered on its own.
pub fn prepare_pair(
    cube: &AngleRfCube,
    cfg: &SvdFilterConfig,
    interp: usize,
) -> Result<(RfEnsemble, RfEnsemble)> {
    let (even, odd) = split_angles(cube)?;
    let y1 = svd_clutter_filter(&lateral_interpolate(&compound(&even), interp)?, cfg)?;
    let y2 = svd_clutter_filter(&lateral_interpolate(&compound(&odd), interp)?, cfg)?;
    Ok((y1, y2))
}

/// Full-angle chain up to the clutter-filtered RF ensemble.
pub fn full_angle_filtered(
    cube: &AngleRfCube,
    cfg: &SvdFilterConfig,
    interp: usize,
) -> Result<RfEnsemble> {
    svd_clutter_filter(&lateral_interpolate(&compound(cube), interp)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn acq() -> Acquisition {
        Acquisition::default()
    }

    fn cube_with_angles(angles: Vec<f64>) -> AngleRfCube {
        let n = angles.len();
        let data = (0..n * 2 * 3 * 4).map(|i| i as f64).collect();
        AngleRfCube::new(angles, 2, 3, 4, acq(), data).unwrap()
    }

    fn random_ensemble(nt: usize, na: usize, nl: usize, seed: u64) -> RfEnsemble {
        let mut rng = crate::rng::stream(seed, crate::rng::Domain::Noise, 0);
        let data = (0..nt * na * nl)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        RfEnsemble::new(nt, na, nl, acq(), Provenance::Full, data).unwrap()
    }

    #[test]
    fn split_ten_angles_alternates() {
        let angles: Vec<f64> = (0..10).map(|i| -9.0 + 2.0 * i as f64).collect();
        let (even, odd) = split_angles(&cube_with_angles(angles)).unwrap();
        assert_eq!(even.angles(), &[-9.0, -5.0, -1.0, 3.0, 7.0]);
        assert_eq!(odd.angles(), &[-7.0, -3.0, 1.0, 5.0, 9.0]);
        assert_eq!(even.subset(), Provenance::Even);
        assert_eq!(odd.subset(), Provenance::Odd);
    }

    #[test]
    fn split_six_angles_into_threes() {
        let angles = vec![-7.5, -4.5, -1.5, 1.5, 4.5, 7.5];
        let cube = cube_with_angles(angles);
        let (even, odd) = split_angles(&cube).unwrap();
        assert_eq!(even.angles(), &[-7.5, -1.5, 4.5]);
        assert_eq!(odd.angles(), &[-4.5, 1.5, 7.5]);
        assert_eq!(even.angle(1), cube.angle(2));
        assert_eq!(odd.angle(2), cube.angle(5));
    }

    #[test]
    fn split_minimal_and_single() {
        let cube = cube_with_angles(vec![-1.0, 1.0]);
        let (even, odd) = split_angles(&cube).unwrap();
        assert_eq!(even.angles(), &[-1.0]);
        assert_eq!(odd.angles(), &[1.0]);
        let single = cube_with_angles(vec![0.0]);
        assert!(matches!(split_angles(&single), Err(Error::TooFewAngles(1))));
    }

    #[test]
    fn angles_must_increase() {
        let r = AngleRfCube::new(vec![1.0, 1.0], 1, 1, 1, acq(), vec![0.0, 0.0]);
        assert!(r.is_err());
    }

    #[test]
    fn compound_of_equal_angles_is_the_frame() {
        let frame: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let data = [frame.clone(), frame.clone(), frame.clone()].concat();
        let cube = AngleRfCube::new(vec![-1.0, 0.0, 1.0], 1, 3, 4, acq(), data).unwrap();
        let ens = compound(&cube);
        for (a, b) in ens.data().iter().zip(&frame) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = AngleRfCube::new(vec![0.0], 1, 3, 4, acq(), frame.clone()).unwrap();
        assert_eq!(compound(&single).data(), &frame[..]);
    }

    #[test]
    fn compound_divides_noise_variance() {
        // Monte-Carlo variance oracle: mean of K iid unit-variance fields.
        let k = 5;
        let n = 100_000;
        let mut rng = crate::rng::stream(11, crate::rng::Domain::Noise, 0);
        let data = (0..k * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let angles = (0..k).map(|i| i as f64).collect();
        let cube = AngleRfCube::new(angles, 1, 100, 1000, acq(), data).unwrap();
        let out = compound(&cube);
        let var = out.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var * k as f64 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn compound_full_is_mean_of_halves() {
        let angles: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let mut rng = crate::rng::stream(3, crate::rng::Domain::Noise, 1);
        let data = (0..6 * 4 * 8 * 8).map(|_| rng.random::<f64>()).collect();
        let cube = AngleRfCube::new(angles, 4, 8, 8, acq(), data).unwrap();
        let (e, o) = split_angles(&cube).unwrap();
        let full = compound(&cube);
        let (ce, co) = (compound(&e), compound(&o));
        for i in 0..full.data().len() {
            let avg = 0.5 * (ce.data()[i] + co.data()[i]);
            assert!((full.data()[i] - avg).abs() <= 1e-12 * full.data()[i].abs().max(1.0));
        }
    }

    #[test]
    fn interpolation_identity_and_ramp() {
        let ens = random_ensemble(2, 3, 5, 1);
        assert_eq!(lateral_interpolate(&ens, 1).unwrap(), ens);
        assert!(lateral_interpolate(&ens, 0).is_err());

        let two = RfEnsemble::new(1, 1, 2, acq(), Provenance::Full, vec![0.0, 4.0]).unwrap();
        let out = lateral_interpolate(&two, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn interpolation_makes_pitch_isotropic() {
        let lambda = acq().wavelength();
        let mut a = acq();
        a.pitch_axial = lambda / 8.0;
        a.pitch_lateral = lambda / 2.0;
        let ens = RfEnsemble::new(1, 2, 3, a, Provenance::Full, vec![0.0; 6]).unwrap();
        let out = lateral_interpolate(&ens, 4).unwrap();
        assert_eq!(out.n_lateral(), 12);
        let p = out.acquisition();
        assert!((p.pitch_lateral - lambda / 8.0).abs() < 1e-18);
        assert!((p.pitch_axial - p.pitch_lateral).abs() < 1e-18);
    }

    #[test]
    fn svd_zero_cutoff_is_identity() {
        let ens = random_ensemble(16, 8, 8, 2);
        let out = svd_clutter_filter(&ens, &SvdFilterConfig::new(0)).unwrap();
        let diff: f64 = out
            .data()
            .iter()
            .zip(ens.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-10 * ens.frobenius());
    }

    #[test]
    fn svd_removes_rank_one_exactly() {
        let (nt, na, nl) = (20, 6, 7);
        let mut rng = crate::rng::stream(5, crate::rng::Domain::Tissue, 0);
        let space: Vec<f64> = (0..na * nl).map(|_| rng.random::<f64>() - 0.5).collect();
        let time: Vec<f64> = (0..nt).map(|_| rng.random::<f64>() + 0.5).collect();
        let data = time
            .iter()
            .flat_map(|&t| space.iter().map(move |&s| 100.0 * s * t))
            .collect();
        let ens = RfEnsemble::new(nt, na, nl, acq(), Provenance::Full, data).unwrap();
        let out = svd_clutter_filter(&ens, &SvdFilterConfig::new(1)).unwrap();
        assert!(out.frobenius() <= 1e-6 * ens.frobenius());
    }

    #[test]
    fn svd_cutoff_validation() {
        let ens = random_ensemble(4, 2, 2, 3);
        assert!(svd_clutter_filter(&ens, &SvdFilterConfig::new(4)).is_err());
        let bad = SvdFilterConfig {
            k_low: 2,
            k_high: Some(2),
        };
        assert!(svd_clutter_filter(&ens, &bad).is_err());
    }

    #[test]
    fn fitted_projector_is_idempotent() {
        let ens = random_ensemble(24, 6, 6, 4);
        let proj = ClutterProjector::fit(&ens, &SvdFilterConfig::new(3)).unwrap();
        let once = proj.apply(&ens).unwrap();
        let twice = proj.apply(&once).unwrap();
        let diff: f64 = once
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * once.frobenius());
    }

    #[test]
    fn high_cutoff_keeps_a_band() {
        let ens = random_ensemble(12, 5, 5, 9);
        let cfg = SvdFilterConfig {
            k_low: 2,
            k_high: Some(5),
        };
        let out = svd_clutter_filter(&ens, &cfg).unwrap();
        let sv = casorati_spectrum(&out).unwrap();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-9 * sv[0]).count(), 3);
    }

    fn direct_analytic(x: &[f64]) -> Vec<Complex64> {
        // O(n^2) DFT oracle, independent of rustfft.
        let n = x.len();
        let w = analytic_weights(n);
        let spec: Vec<Complex64> = (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (j, &v)| {
                    let ph = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    acc + Complex64::from_polar(v, ph)
                }) * w[k]
            })
            .collect();
        (0..n)
            .map(|j| {
                spec.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (k, &s)| {
                    let ph = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    acc + s * Complex64::from_polar(1.0, ph)
                }) / n as f64
            })
            .collect()
    }

    #[test]
    fn hilbert_matches_direct_dft() {
        for &n in &[16usize, 17] {
            let ens = random_ensemble(1, n, 1, n as u64);
            let iq = hilbert_analytic(&ens).unwrap();
            let oracle = direct_analytic(ens.data());
            for (a, b) in iq.data().iter().zip(&oracle) {
                assert!((a - b).norm() < 1e-10);
            }
            for (z, x) in iq.data().iter().zip(ens.data()) {
                assert!((z.re - x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn hilbert_tone_envelope_is_flat() {
        let n = 256;
        let f = 0.125;
        let data = (0..n)
            .map(|z| (2.0 * std::f64::consts::PI * f * z as f64).cos())
            .collect();
        let ens = RfEnsemble::new(1, n, 1, acq(), Provenance::Full, data).unwrap();
        let iq = hilbert_analytic(&ens).unwrap();
        for z in n / 10..n - n / 10 {
            assert!((iq.data()[z].norm() - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn hilbert_constant_column_is_unchanged() {
        let ens = RfEnsemble::new(1, 16, 1, acq(), Provenance::Full, vec![3.0; 16]).unwrap();
        let iq = hilbert_analytic(&ens).unwrap();
        for z in iq.data() {
            assert!((z.re - 3.0).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn hilbert_doubles_zero_mean_energy() {
        let mut ens = random_ensemble(3, 64, 4, 21);
        // remove per-column mean and the Nyquist component
        let (na, nl) = (64, 4);
        for t in 0..3 {
            let fr = ens.frame_mut(t);
            for x in 0..nl {
                let mean: f64 = (0..na).map(|z| fr[z * nl + x]).sum::<f64>() / na as f64;
                let nyq: f64 = (0..na)
                    .map(|z| fr[z * nl + x] * if z % 2 == 0 { 1.0 } else { -1.0 })
                    .sum::<f64>()
                    / na as f64;
                for z in 0..na {
                    fr[z * nl + x] -= mean + nyq * if z % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let iq = hilbert_analytic(&ens).unwrap();
        let e_in: f64 = ens.data().iter().map(|v| v * v).sum();
        let e_out: f64 = iq.data().iter().map(|z| z.norm_sqr()).sum();
        assert!((e_out / (2.0 * e_in) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hilbert_rejects_short_columns() {
        let ens = random_ensemble(1, 4, 2, 0);
        assert!(hilbert_analytic(&ens).is_err());
    }
}
