//! Finite-difference checks against reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Ctx, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst per-tensor relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates passed over because the stencil crossed a ReLU, max-pool
    /// or gather switch, where a finite difference is not a valid oracle.
    pub skipped: usize,
}

/// Checks up to `per_tensor` coordinates of every parameter of `store` with
/// the five-point stencil of step `eps`. `loss` must rebuild the whole
/// forward pass on the context it is given.
pub fn check_params<F>(store: &ParamStore<f64>, eps: f64, per_tensor: usize, seed: u64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let (analytic, base_sig) = {
        let mut ctx = Ctx::new(store);
        let l = loss(&mut ctx)?;
        let sig = ctx.graph.branch_signature();
        (ctx.param_grads(l)?, sig)
    };
    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut ctx = Ctx::inference(s);
        let l = loss(&mut ctx)?;
        Ok((ctx.value(l).item(), ctx.graph.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheck { max_rel_err: 0.0, worst_param: String::new(), checked: 0, skipped: 0 };
    for (pi, name) in store.names().iter().enumerate() {
        let n = store.get(name).unwrap().len();
        let mut candidates: Vec<usize> = (0..n).collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(4 * per_tensor);
        let (mut diff2, mut a2, mut n2, mut used) = (0.0, 0.0, 0.0, 0);
        for c in candidates {
            if used == per_tensor {
                break;
            }
            let orig = work.get(name).unwrap().data()[c];
            let mut smooth = true;
            let mut at = |h: f64| -> Result<f64> {
                work.get_mut(name).unwrap().data_mut()[c] = orig + h;
                let (v, sig) = eval(&work)?;
                smooth &= sig == base_sig;
                Ok(v)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work.get_mut(name).unwrap().data_mut()[c] = orig;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic.grads[pi].data()[c];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            used += 1;
        }
        report.checked += used;
        let denom = (a2.sqrt() + n2.sqrt()).max(1e-6);
        let rel = diff2.sqrt() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.clone();
        }
    }
    Ok(report)
}
