use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{PheError, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the tape gradient of `f` against central differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every coordinate of every
/// parameter `f` registers. The error per coordinate is
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_only(f, params, None, eps)
}

/// [`grad_check`] restricted to parameters whose names start with one of
/// `prefixes` (all registered parameters when `None`).
pub fn grad_check_only<F>(
    f: F,
    params: &ParamStore,
    prefixes: Option<&[&str]>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(PheError::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let names: Vec<String> = tape
        .param_names()
        .filter(|n| prefixes.is_none_or(|ps| ps.iter().any(|p| n.starts_with(p))))
        .map(str::to_string)
        .collect();
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let l = f(&mut t, p)?;
        Ok(t.value(l).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for name in names {
        let analytic = grads.param(&name).expect("registered parameter");
        for i in 0..analytic.len() {
            let orig = work.get(&name).expect("parameter").data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.insert(n, Tensor::seeded_uniform(&[r, c], -1.0, 1.0, &mut rng).unwrap());
        }
        s
    }

    fn check<F>(shapes: &[(&str, usize, usize)], f: F)
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        for seed in 0..3 {
            let p = rand_store(shapes, seed);
            let r = grad_check(&f, &p, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "seed {seed}: {r:?}");
            assert!(r.coordinates > 0);
        }
    }

    // Weighted sum so every output coordinate carries a distinct gradient.
    fn readout(t: &mut Tape, x: Var) -> Var {
        let v = t.value(x);
        let w = Tensor::new(
            v.shape().to_vec(),
            (0..v.len()).map(|i| 0.3 + 0.17 * i as f64).collect(),
        )
        .unwrap();
        let w = t.constant(w);
        let y = t.mul(x, w);
        t.sum(y)
    }

    fn p(t: &mut Tape, s: &ParamStore, n: &str) -> Var {
        t.param(n, s.get(n).unwrap())
    }

    #[test]
    fn quadratic_is_exact() {
        let s = rand_store(&[("theta", 6, 1)], 1);
        let r = grad_check(
            |t, s| {
                let th = p(t, s, "theta");
                let tt = t.transpose(th);
                Ok(t.matmul(tt, th))
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let s = rand_store(&[("a", 1, 1)], 0);
        let f = |t: &mut Tape, s: &ParamStore| Ok(p(t, s, "a"));
        assert!(grad_check(f, &s, 0.0).is_err());
        assert!(grad_check(f, &s, -1.0).is_err());
    }

    #[test]
    fn primitive_matmul_transpose() {
        check(&[("a", 3, 4), ("b", 4, 2)], |t, s| {
            let a = p(t, s, "a");
            let b = p(t, s, "b");
            let bt = t.transpose(b);
            let btt = t.transpose(bt);
            let y = t.matmul(a, btt);
            Ok(readout(t, y))
        });
    }

    #[test]
    fn primitive_elementwise() {
        check(&[("a", 3, 3), ("b", 3, 3)], |t, s| {
            let a = p(t, s, "a");
            let b = p(t, s, "b");
            let x = t.add(a, b);
            let y = t.mul(x, b);
            let z = t.sub(y, a);
            let z = t.scale(z, 1.7);
            let z = t.div_scalar(z, 0.6);
            Ok(readout(t, z))
        });
    }

    #[test]
    fn primitive_add_row_reshape() {
        check(&[("a", 4, 3), ("bias", 1, 3)], |t, s| {
            let a = p(t, s, "a");
            let b = p(t, s, "bias");
            let y = t.add_row(a, b);
            let y = t.reshape(y, 6, 2);
            Ok(readout(t, y))
        });
    }

    #[test]
    fn primitive_gather_scatter_concat() {
        check(&[("a", 4, 3), ("b", 2, 3), ("c", 4, 2)], |t, s| {
            let a = p(t, s, "a");
            let b = p(t, s, "b");
            let c = p(t, s, "c");
            let g = t.gather_rows(a, vec![3, 0, 0, 2]);
            let sc = t.scatter_add_rows(g, vec![1, 1, 0, 2], 3);
            let cat = t.concat_rows(vec![sc, b]);
            let cc = t.concat_cols(vec![a, c]);
            let r1 = readout(t, cat);
            let r2 = readout(t, cc);
            Ok(t.add(r1, r2))
        });
    }

    #[test]
    fn primitive_softmaxes() {
        check(&[("a", 5, 3)], |t, s| {
            let a = p(t, s, "a");
            let sm = t.softmax_rows(a);
            let seg = t.segment_softmax(a, vec![0, 1, 0, 1, 1]);
            let lsm = t.segment_log_softmax(a, vec![2, 0, 0, 2, 1]);
            let r1 = readout(t, sm);
            let r2 = readout(t, seg);
            let r3 = readout(t, lsm);
            let x = t.add(r1, r2);
            Ok(t.add(x, r3))
        });
    }

    #[test]
    fn primitive_nonlinearities() {
        check(&[("a", 3, 4)], |t, s| {
            let a = p(t, s, "a");
            let l = t.leaky_relu(a, 0.2);
            let th = t.tanh(a);
            let e = t.exp(a);
            let sq = t.mul(a, a);
            let one = t.constant(Tensor::full(3, 4, 1.0));
            let pos = t.add(sq, one);
            let ln = t.ln(pos);
            let rs = [l, th, e, ln].map(|v| readout(t, v));
            let x = t.add(rs[0], rs[1]);
            let y = t.add(rs[2], rs[3]);
            Ok(t.add(x, y))
        });
    }

    #[test]
    fn primitive_reductions_and_broadcast() {
        check(&[("a", 3, 4), ("w", 3, 1)], |t, s| {
            let a = p(t, s, "a");
            let w = p(t, s, "w");
            let b = t.broadcast_cols(w, 4);
            let m = t.mul(a, b);
            let rs = t.row_sums(m);
            let r = readout(t, rs);
            let mean = t.mean(a);
            let sum = t.sum(m);
            let x = t.add(r, mean);
            Ok(t.add(x, sum))
        });
    }
}
