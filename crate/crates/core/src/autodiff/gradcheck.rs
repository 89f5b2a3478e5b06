use rand::seq::index;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Central-difference step. Small enough that a perturbation rarely crosses a
/// kink of |x|, max-pool or leaky ReLU; large enough that f64 round-off stays
/// far below the checked tolerances.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `loss` builds the scalar loss on a fresh tape; it is called on a fresh
/// clone of `store` for every evaluation so running statistics never leak
/// between evaluations. At most `max_samples` trainable scalars are checked
/// (all of them if there are fewer), chosen with `seed`.
pub fn gradient_check<F>(
    store: &ParamStore,
    loss: F,
    max_samples: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let root = loss(&mut tape, &mut analytic)?;
    tape.backward(root, &mut analytic)?;

    let slots: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| store.get(id).kind.trainable())
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    let picks: Vec<usize> = if slots.len() <= max_samples {
        (0..slots.len()).collect()
    } else {
        let mut rng = stream(seed, Domain::GradCheck, 1);
        let mut v = index::sample(&mut rng, slots.len(), max_samples).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |id: ParamId, i: usize, delta: f64| -> Result<f64> {
        let mut s = store.clone();
        s.value_mut(id).data_mut()[i] += delta;
        let mut t = Tape::new();
        let r = loss(&mut t, &mut s)?;
        let v = t.value(r).item();
        if !v.is_finite() {
            return Err(Error::ShapeMismatch("gradient check: non-finite loss".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for &p in &picks {
        let (id, i) = slots[p];
        let fd = (eval(id, i, FD_STEP)? - eval(id, i, -FD_STEP)?) / (2.0 * FD_STEP);
        let g = analytic.grad(id).data()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: picks.len(),
    })
}
