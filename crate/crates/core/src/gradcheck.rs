//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    Ok(tape.value(loss).value())
}

/// Compares the tape gradient of `loss_fn` against
/// `(f(θ + eps) − f(θ − eps)) / (2 eps)` for every entry of `params`
/// (all parameters when `params` is empty).
///
/// `loss_fn` records the loss on the supplied tape and returns its node. It
/// must be deterministic; two unperturbed evaluations are compared bitwise.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Param(format!("grad_check step must be > 0, got {eps}")));
    }
    let ids: Vec<ParamId> = if params.is_empty() {
        store.ids().collect()
    } else {
        params.to_vec()
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let first = tape.value(loss).value();
    tape.backward(loss, store)?;
    drop(tape);

    let second = evaluate(store, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in ids {
        for k in 0..store.get(id).value.len() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + eps;
            let plus = evaluate(store, &mut loss_fn)?;
            store.get_mut(id).value.data_mut()[k] = original - eps;
            let minus = evaluate(store, &mut loss_fn)?;
            store.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[k];
            let err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    fn sum_all(tape: &mut Tape, v: Var) -> Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        let flat = tape.reshape(v, &[shape.iter().product(), 1])?;
        let ones = tape.input(Tensor::full(&[1, flat_len(&shape)], 1.0));
        tape.matmul(ones, flat)
    }

    fn flat_len(shape: &[usize]) -> usize {
        shape.iter().product()
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let id = store.insert("t", Tensor::row_vector(vec![0.3, -1.2, 4.0]));
        let report = grad_check(&mut store, &[], 1e-5, |tape, s| {
            let v = tape.param(s, id);
            sum_all(tape, v)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_loss_matches_hand_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("t", Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let report = grad_check(&mut store, &[], 1e-5, |tape, s| {
            let v = tape.param(s, id);
            // θᵀθ
            let row = tape.reshape(v, &[1, 2])?;
            tape.matmul(row, v)
        })
        .unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut store = ParamStore::new();
        let id = store.insert("t", Tensor::scalar(1.0));
        let mut rng = SeededRng::new(1);
        let err = grad_check(&mut store, &[], 1e-5, |tape, s| {
            let v = tape.param(s, id);
            let noise = tape.input(Tensor::scalar(rng.uniform()));
            tape.add(v, noise)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn every_op_passes() {
        let mut rng = SeededRng::new(17);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
        };
        let mut store = ParamStore::new();
        let a = store.insert("a", rand_t(3, 4));
        let b = store.insert("b", rand_t(4, 2));
        let bias = store.insert("bias", rand_t(1, 2));
        let target = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let recon = rand_t(1, 6);
        let weights = [0.7, 1.3];
        let report = grad_check(&mut store, &[], 1e-5, |tape, s| {
            let (va, vb, vbias) = (tape.param(s, a), tape.param(s, b), tape.param(s, bias));
            let h = tape.matmul(va, vb)?;
            let h = tape.add_row_bias(h, vbias)?;
            let r = tape.relu(h);
            let p = tape.sigmoid(h);
            let bce = tape.weighted_bce(p, &target, &weights, 1e-7)?;
            let dice = tape.weighted_dice(p, &target, &weights, 1.0)?;
            let g = tape.gather_rows(&[(r, 2), (h, 0)])?;
            let flat = tape.reshape(g, &[1, 4])?;
            let q = tape.sigmoid(flat);
            let flat6 = tape.gather_rows(&[(va, 0)])?;
            let flat6 = tape.reshape(flat6, &[1, 4])?;
            let l1 = tape.l1_mean(q, &Tensor::row_vector(recon.data()[..4].to_vec()))?;
            let l1b = tape.l1_mean(flat6, &Tensor::row_vector(recon.data()[2..].to_vec()))?;
            let s1 = tape.add(bce, dice)?;
            let s2 = tape.add(l1, l1b)?;
            let s2 = tape.scale(s2, 3.0);
            tape.add(s1, s2)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
