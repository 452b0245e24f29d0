//! Central-difference verification of [`Network::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Mode;
use super::model::Network;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|)`, with both zero counting as agreement.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compare analytic and central-difference derivatives of
/// `loss(forward(images, hf))` for `count` scalar parameters drawn
/// uniformly without replacement from all trainable entries.
/// `loss` returns the value and its gradient with respect to the output.
pub fn gradcheck(
    net: &mut Network,
    images: &Tensor,
    hf: &Tensor,
    loss: &dyn Fn(&Tensor) -> (f64, Tensor),
    count: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>, NnError> {
    let out = net.forward(images, hf, Mode::Train)?;
    let (_, seed_grad) = loss(&out);
    let grads = net.backward(&seed_grad)?;

    let mut slots = Vec::new();
    for id in net.params().ids() {
        if !net.is_frozen(id) {
            slots.extend((0..net.params().value(id).len()).map(|i| (id, i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, slots.len(), count.min(slots.len()));
    let saved = net.buffers().to_vec();
    let mut entries = Vec::with_capacity(picks.len());
    for k in picks.iter() {
        let (id, i) = slots[k];
        let orig = net.params().value(id).data()[i];
        let mut eval = |v: f64| -> Result<f64, NnError> {
            net.params_mut().value_mut(id).data_mut()[i] = v;
            let y = net.forward(images, hf, Mode::Train)?;
            Ok(loss(&y).0)
        };
        let lp = eval(orig + step)?;
        let lm = eval(orig - step)?;
        net.params_mut().value_mut(id).data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = grads[id.0].data()[i];
        entries.push(GradCheckEntry {
            name: net.params().name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    // the probing forwards must not leak into the running statistics
    net.buffers_mut().clone_from_slice(&saved);
    Ok(entries)
}
