use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{forward, Primitive, Tape};
use crate::error::Result;

/// Compare the tape's adjoints for `prim` against a five-point central
/// difference with spacing `step`.
///
/// The scalar probed is `sum(out * r)` for a fixed random `r`, so every
/// output coordinate contributes. Returns the largest
/// `|analytic - numeric| / max(|analytic|, 1e-8)` over all input coordinates.
pub fn grad_check(prim: &Primitive, point: &[Array], step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = point
        .iter()
        .map(|a| tape.param(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = tape.apply(prim.clone(), &ids)?;
    let out_shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let probe_vals: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let probe = Array::new(out_shape, probe_vals)?;
    let probe_id = tape.constant(probe.clone())?;
    let weighted = tape.mul(out, probe_id)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    let objective = |inputs: &[Array]| -> Result<f64> {
        let refs: Vec<&Array> = inputs.iter().collect();
        Ok(forward(prim, &refs)?.dot(&probe))
    };

    let mut worst = 0.0_f64;
    let mut shifted = point.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        for j in 0..point[which].len() {
            let orig = point[which].data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                shifted[which].data_mut()[j] = orig + offset;
                objective(&shifted)
            };
            let (up2, up, down, down2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            shifted[which].data_mut()[j] = orig;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
        }
    }
    Ok(worst)
}
