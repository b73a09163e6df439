use serde::Serialize;

use super::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Relative error with a small absolute floor so that near-zero gradients
/// are not judged on noise alone.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `point`
/// against central differences with step `h`, componentwise.
pub fn gradcheck<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(t.clone())?;
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let mut g = Graph::new();
    let x = g.param(point.clone())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let mut report = GradcheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, passed: true };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradcheckReport { max_rel_error: err, worst_index: i, analytic: a, numeric, passed: true };
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(f: impl Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>, point: Tensor) {
        let r = gradcheck(f, &point, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mlp_composite() {
        let w = random(&[4, 3], 1);
        let b = random(&[3], 2);
        check(
            move |g, x| {
                let w = g.constant(w.clone())?;
                let b = g.constant(b.clone())?;
                let h = g.matmul(x, w)?;
                let h = g.add_bias(h, b)?;
                let h = g.gelu(h)?;
                let h = g.mul(h, h)?;
                g.mean(h)
            },
            random(&[5, 4], 3),
        );
    }

    #[test]
    fn weight_gradient_through_two_layers() {
        let x = random(&[6, 3], 4);
        let w2 = random(&[5, 2], 5);
        check(
            move |g, w1| {
                let x = g.constant(x.clone())?;
                let w2 = g.constant(w2.clone())?;
                let h = g.matmul(x, w1)?;
                let h = g.gelu(h)?;
                let o = g.matmul(h, w2)?;
                let o = g.scale(o, 0.7)?;
                g.sum(o)
            },
            random(&[3, 5], 6),
        );
    }

    #[test]
    fn softmax_kl_composite_both_sides() {
        let other = random(&[3, 4], 7);
        for reverse in [false, true] {
            let other = other.clone();
            check(
                move |g, x| {
                    let o = g.constant(other.clone())?;
                    let p = g.softmax(x, 1)?;
                    let q = g.softmax(o, 1)?;
                    if reverse { g.kl_div(q, p) } else { g.kl_div(p, q) }
                },
                random(&[3, 4], 8),
            );
        }
    }

    #[test]
    fn log_sub_clamp_axis0() {
        check(
            |g, x| {
                let s = g.softmax(x, 0)?;
                let c = g.clamp_min(s, 1e-12)?;
                let l = g.log(c)?;
                let d = g.sub(l, x)?;
                let sq = g.mul(d, d)?;
                g.mean(sq)
            },
            random(&[4, 3], 9),
        );
    }

    #[test]
    fn cross_entropy_gradient() {
        check(|g, x| g.cross_entropy(x, &[0, 3, 1]), random(&[3, 4], 10));
    }

    #[test]
    fn select_rows_with_repeats() {
        check(
            |g, x| {
                let r = g.select_rows(x, &[2, 0, 2])?;
                let s = g.softmax(r, 1)?;
                let q = g.softmax(x, 1)?;
                let q = g.select_rows(q, &[1, 1, 0])?;
                g.kl_div(s, q)
            },
            random(&[3, 4], 11),
        );
    }

    #[test]
    fn broken_gradient_is_reported() {
        // A graph that hides x behind detach has zero analytic gradient
        // but a non-zero numeric one.
        let r = gradcheck(
            |g, x| {
                let d = g.detach(x);
                let y = g.mul(d, d)?;
                g.sum(y)
            },
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
