use super::dataset::robust_scale;
use super::unet::UNet;
use crate::autodiff::{Mode, ParamStore, Tensor4};
use crate::baselines::mirror;
use crate::error::{Error, Result};
use crate::pipeline::RfEnsemble;

/// Mirror-pads a row-major `h x w` image (edge samples repeated) so both
/// dims become multiples of `d`; returns the padded image, its dims and the
/// `(top, left)` offset of the original.
pub fn pad_to_multiple(img: &[f64], h: usize, w: usize, d: usize) -> (Vec<f64>, usize, usize, (usize, usize)) {
    let ph = h.div_ceil(d) * d;
    let pw = w.div_ceil(d) * d;
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = mirror(y as isize - top as isize, h);
        for x in 0..pw {
            out.push(img[sy * w + mirror(x as isize - left as isize, w)]);
        }
    }
    (out, ph, pw, (top, left))
}

/// Denoises one full `n_axial x n_lateral` frame: normalize by the frame's
/// robust scale, pad, run in inference mode, crop and restore the scale.
pub fn denoise_frame(
    net: &UNet,
    params: &ParamStore,
    frame: &[f64],
    n_axial: usize,
    n_lateral: usize,
) -> Result<Vec<f64>> {
    if frame.len() != n_axial * n_lateral {
        return Err(Error::ShapeMismatch(format!(
            "frame has {} samples, dims imply {}",
            frame.len(),
            n_axial * n_lateral
        )));
    }
    if !net.is_trained(params) {
        return Err(Error::Untrained("network has no batch-norm statistics".into()));
    }
    // inference never writes to the store; the clone keeps the API `&`
    frame_in(net, &mut params.clone(), frame, n_axial, n_lateral)
}

fn frame_in(net: &UNet, store: &mut ParamStore, frame: &[f64], n_axial: usize, n_lateral: usize) -> Result<Vec<f64>> {
    let scale = robust_scale(frame.iter().copied());
    let norm: Vec<f64> = frame.iter().map(|v| v / scale).collect();
    let (padded, ph, pw, (top, left)) = pad_to_multiple(&norm, n_axial, n_lateral, net.config().divisor());
    let x = Tensor4::from_vec([1, 1, ph, pw], padded)?;
    let y = net.apply(store, x, Mode::Infer)?;
    let yd = y.data();
    let mut out = Vec::with_capacity(frame.len());
    for z in 0..n_axial {
        let row = &yd[(z + top) * pw + left..(z + top) * pw + left + n_lateral];
        out.extend(row.iter().map(|v| v * scale));
    }
    Ok(out)
}

/// Frame-by-frame denoising of a whole ensemble.
pub fn denoise_ensemble(net: &UNet, params: &ParamStore, ens: &RfEnsemble) -> Result<RfEnsemble> {
    let (na, nl) = (ens.n_axial(), ens.n_lateral());
    if !net.is_trained(params) {
        return Err(Error::Untrained("network has no batch-norm statistics".into()));
    }
    let mut store = params.clone();
    let mut data = Vec::with_capacity(ens.data().len());
    for t in 0..ens.n_time() {
        data.extend(frame_in(net, &mut store, ens.frame(t), na, nl)?);
    }
    ens.with_data(data)
}
