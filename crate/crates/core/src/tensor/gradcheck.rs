//! Central-difference gradient checking.
//!
//! [`check`] evaluates an arbitrary graph-building function at perturbed
//! inputs and compares the finite-difference slope against the analytic
//! gradient from [`Var::backward`]. [`builtin_cases`] enumerates one case
//! per differentiable operation so the whole op set can be swept in a test.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{concat, PadMode};
use super::rng::stream;
use super::{Graph, Shape, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub ok: bool,
}

/// Relative error with a unit floor, so tiny gradients are compared
/// absolutely and large ones relatively.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Check `f`'s gradients w.r.t. every input coordinate by central
/// differences with step `h`. `f` must be a deterministic function of the
/// input values and return a scalar.
pub fn check<F>(name: &str, inputs: &[(Shape, Vec<f64>)], f: F, h: f64, tol: f64) -> CheckReport
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Vec<f64>]| -> (f64, Vec<Option<Vec<f64>>>) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| g.param(shape.clone(), Arc::new(v.clone())))
            .collect();
        let out = f(&g, &vars);
        assert_eq!(out.numel(), 1, "gradcheck target must be scalar");
        let grads = out.backward();
        let per_input = vars.iter().map(|v| grads.get(v).map(|s| s.to_vec())).collect();
        (out.item(), per_input)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (_, analytic) = eval(&base);

    let mut max_rel = 0.0f64;
    let mut coords = 0;
    for (ii, (_, vals)) in inputs.iter().enumerate() {
        let a = analytic[ii].clone().unwrap_or_else(|| vec![0.0; vals.len()]);
        for ci in 0..vals.len() {
            let mut plus = base.clone();
            plus[ii][ci] += h;
            let mut minus = base.clone();
            minus[ii][ci] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            max_rel = max_rel.max(rel_err(a[ci], fd));
            coords += 1;
        }
    }
    CheckReport { name: name.to_string(), max_rel_err: max_rel, coords_checked: coords, ok: max_rel < tol }
}

/// One ready-made gradcheck case per op.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Shape, Vec<f64>)>,
    pub build: Box<dyn Fn(&Graph, &[Var]) -> Var>,
}

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Weighted sum against a fixed random vector: a scalar objective that is
/// sensitive to every output coordinate (plain sums can hide sign errors).
fn weighted(out: &Var, g: &Graph, w: &[f64]) -> Var {
    let flat = if out.shape().rank() == 1 {
        out.clone()
    } else {
        out.reshape(&[out.numel()])
    };
    let wv = g.constant(Shape::of(&[w.len()]), w.to_vec());
    flat.mul(&wv).sum_all()
}

/// Build the full op-coverage case list. Input values are drawn from
/// `seed`, with domains restricted where an op requires it (positivity,
/// distinct maxima, and so on).
pub fn builtin_cases(seed: u64) -> Vec<Case> {
    let mut rng = stream(seed, "gradcheck-cases");
    let mut cases: Vec<Case> = Vec::new();
    let mut w6 = rand_vals(&mut rng, 6, -1.0, 1.0);
    w6.iter_mut().for_each(|v| *v += 0.1);

    macro_rules! case {
        ($name:literal, $inputs:expr, $build:expr) => {
            cases.push(Case { name: $name, inputs: $inputs, build: Box::new($build) })
        };
    }

    let m23 = Shape::of(&[2, 3]);
    let a = rand_vals(&mut rng, 6, -2.0, 2.0);
    let b = rand_vals(&mut rng, 6, -2.0, 2.0);

    {
        let w = w6.clone();
        case!("add", vec![(m23.clone(), a.clone()), (m23.clone(), b.clone())], move |g, v| {
            weighted(&v[0].add(&v[1]), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("sub", vec![(m23.clone(), a.clone()), (m23.clone(), b.clone())], move |g, v| {
            weighted(&v[0].sub(&v[1]), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("mul", vec![(m23.clone(), a.clone()), (m23.clone(), b.clone())], move |g, v| {
            weighted(&v[0].mul(&v[1]), g, &w)
        });
    }
    {
        let w = w6.clone();
        let bias = rand_vals(&mut rng, 3, -1.0, 1.0);
        case!(
            "add_bias",
            vec![(m23.clone(), a.clone()), (Shape::of(&[3]), bias)],
            move |g, v| weighted(&v[0].add_bias(&v[1]), g, &w)
        );
    }
    {
        let w = w6.clone();
        case!("scale", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].scale(-1.7), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("add_scalar", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].add_scalar(3.2), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!(
            "mul_scalar_var",
            vec![(m23.clone(), a.clone()), (Shape::of(&[1]), vec![0.7])],
            move |g, v| weighted(&v[0].mul_scalar_var(&v[1]), g, &w)
        );
    }
    {
        let w = w6.clone();
        case!("exp", vec![(m23.clone(), rand_vals(&mut rng, 6, -1.5, 1.5))], move |g, v| {
            weighted(&v[0].exp(), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("ln", vec![(m23.clone(), rand_vals(&mut rng, 6, 0.5, 3.0))], move |g, v| {
            weighted(&v[0].ln(), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("sqrt", vec![(m23.clone(), rand_vals(&mut rng, 6, 0.5, 3.0))], move |g, v| {
            weighted(&v[0].sqrt_elem(), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("powf", vec![(m23.clone(), rand_vals(&mut rng, 6, 0.5, 3.0))], move |g, v| {
            weighted(&v[0].powf_elem(1.7), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("recip", vec![(m23.clone(), rand_vals(&mut rng, 6, 0.5, 3.0))], move |g, v| {
            weighted(&v[0].recip(), g, &w)
        });
    }
    {
        let w = w6.clone();
        // keep points away from the (C1 but not C2) kink at zero
        let mut vals = rand_vals(&mut rng, 6, 0.2, 2.0);
        for (i, v) in vals.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        case!("elu", vec![(m23.clone(), vals)], move |g, v| weighted(&v[0].elu(), g, &w));
    }
    {
        let w = w6.clone();
        let bvals = rand_vals(&mut rng, 12, -1.0, 1.0);
        case!(
            "matmul",
            vec![(Shape::of(&[2, 4]), rand_vals(&mut rng, 8, -1.0, 1.0)), (Shape::of(&[4, 3]), bvals)],
            move |g, v| weighted(&v[0].matmul(&v[1]), g, &w)
        );
    }
    {
        let w = w6.clone();
        case!("transpose", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].transpose(), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("reshape", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].reshape(&[3, 2]), g, &w)
        });
    }
    {
        let w: Vec<f64> = w6[..3].to_vec();
        case!("slice_rows", vec![(Shape::of(&[4, 3]), rand_vals(&mut rng, 12, -1.0, 1.0))], move |g, v| {
            weighted(&v[0].slice_rows(1, 1), g, &w)
        });
    }
    {
        let w: Vec<f64> = w6[..4].to_vec();
        case!("slice_cols", vec![(Shape::of(&[2, 4]), rand_vals(&mut rng, 8, -1.0, 1.0))], move |g, v| {
            weighted(&v[0].slice_cols(1, 2), g, &w)
        });
    }
    {
        let w = rand_vals(&mut rng, 9, -1.0, 1.0);
        case!(
            "concat_rows",
            vec![
                (Shape::of(&[2, 3]), rand_vals(&mut rng, 6, -1.0, 1.0)),
                (Shape::of(&[1, 3]), rand_vals(&mut rng, 3, -1.0, 1.0)),
            ],
            move |g, v| weighted(&concat(&[v[0].clone(), v[1].clone()], 0), g, &w)
        );
    }
    {
        let w = rand_vals(&mut rng, 10, -1.0, 1.0);
        case!(
            "concat_cols",
            vec![
                (Shape::of(&[2, 3]), rand_vals(&mut rng, 6, -1.0, 1.0)),
                (Shape::of(&[2, 2]), rand_vals(&mut rng, 4, -1.0, 1.0)),
            ],
            move |g, v| weighted(&concat(&[v[0].clone(), v[1].clone()], 1), g, &w)
        );
    }
    {
        let w = rand_vals(&mut rng, 6, -1.0, 1.0);
        case!("gather_rows", vec![(Shape::of(&[3, 2]), rand_vals(&mut rng, 6, -1.0, 1.0))], move |g, v| {
            weighted(&v[0].gather_rows(&[2, 0, 2]), g, &w)
        });
    }
    {
        let w = rand_vals(&mut rng, 6, -1.0, 1.0);
        case!("repeat_row", vec![(Shape::of(&[2]), rand_vals(&mut rng, 2, -1.0, 1.0))], move |g, v| {
            weighted(&v[0].repeat_row(3), g, &w)
        });
    }
    {
        let w = rand_vals(&mut rng, 6, -1.0, 1.0);
        case!(
            "row_scatter_replace",
            vec![
                (Shape::of(&[3, 2]), rand_vals(&mut rng, 6, -1.0, 1.0)),
                (Shape::of(&[1, 2]), rand_vals(&mut rng, 2, -1.0, 1.0)),
            ],
            move |g, v| weighted(&v[0].row_scatter_replace(&v[1], &[1]), g, &w)
        );
    }
    case!("sum_all", vec![(m23.clone(), a.clone())], |_, v| v[0].sum_all());
    case!("mean_all", vec![(m23.clone(), a.clone())], |_, v| v[0].mean_all());
    {
        let w: Vec<f64> = w6[..3].to_vec();
        case!("sum_axis0", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].sum_axis(0), g, &w)
        });
    }
    {
        let w: Vec<f64> = w6[..2].to_vec();
        case!("sum_axis1", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].sum_axis(1), g, &w)
        });
    }
    {
        let w: Vec<f64> = w6[..3].to_vec();
        case!("mean_axis0", vec![(m23.clone(), a.clone())], move |g, v| {
            weighted(&v[0].mean_axis(0), g, &w)
        });
    }
    {
        // well-separated values so h-perturbations cannot flip the argmax
        let w: Vec<f64> = w6[..2].to_vec();
        case!("max_rows", vec![(m23.clone(), vec![0.1, 1.0, -0.7, 2.0, 0.3, -1.4])], move |g, v| {
            weighted(&v[0].max_rows(), g, &w)
        });
    }
    {
        let w = w6.clone();
        case!("softmax_rows", vec![(m23.clone(), rand_vals(&mut rng, 6, -2.0, 2.0))], move |g, v| {
            weighted(&v[0].softmax_rows(), g, &w)
        });
    }
    {
        let w = rand_vals(&mut rng, 8, -1.0, 1.0);
        case!(
            "layer_norm",
            vec![
                (Shape::of(&[2, 4]), rand_vals(&mut rng, 8, -2.0, 2.0)),
                (Shape::of(&[4]), rand_vals(&mut rng, 4, 0.5, 1.5)),
                (Shape::of(&[4]), rand_vals(&mut rng, 4, -0.5, 0.5)),
            ],
            move |g, v| weighted(&v[0].layer_norm(&v[1], &v[2], 1e-5), g, &w)
        );
    }
    {
        // mask is a deterministic function of the fixed seed, so the
        // perturbed evaluations see the same dropout pattern
        let w = rand_vals(&mut rng, 6, -1.0, 1.0);
        case!("dropout", vec![(m23.clone(), rand_vals(&mut rng, 6, -1.0, 1.0))], move |g, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(424242);
            weighted(&v[0].dropout(0.4, &mut mask_rng), g, &w)
        });
    }
    for (pname, pad) in [
        ("conv1d_zero_same", PadMode::ZeroSame),
        ("conv1d_circular", PadMode::Circular),
        ("conv1d_causal", PadMode::CausalLeft),
    ] {
        let w = rand_vals(&mut rng, 6 * 2, -1.0, 1.0);
        let x = rand_vals(&mut rng, 6 * 2, -1.0, 1.0);
        let k = rand_vals(&mut rng, 3 * 2 * 2, -1.0, 1.0);
        cases.push(Case {
            name: pname,
            inputs: vec![(Shape::of(&[6, 2]), x), (Shape::of(&[3, 2, 2]), k)],
            build: Box::new(move |g, v| weighted(&v[0].conv1d(&v[1], pad), g, &w)),
        });
    }
    {
        let w = rand_vals(&mut rng, 4, -1.0, 1.0);
        // pairwise gaps far larger than the finite-difference step
        case!(
            "max_pool1d",
            vec![(Shape::of(&[4, 2]), vec![0.9, -1.3, 0.1, 2.2, -0.6, 1.1, 1.8, 0.4])],
            move |g, v| weighted(&v[0].max_pool1d(), g, &w)
        );
    }
    {
        let w = rand_vals(&mut rng, 6, -1.0, 1.0);
        case!("embedding_lookup", vec![(Shape::of(&[4, 2]), rand_vals(&mut rng, 8, -1.0, 1.0))], move |g, v| {
            weighted(&v[0].embedding_lookup(&[3, 1, 3]), g, &w)
        });
    }
    cases
}

/// Run every builtin case; returns all reports (callers assert `ok`).
pub fn run_builtin(seed: u64, h: f64, tol: f64) -> Vec<CheckReport> {
    builtin_cases(seed)
        .iter()
        .map(|c| check(c.name, &c.inputs, |g, v| (c.build)(g, v), h, tol))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_gradcheck() {
        let reports = run_builtin(17, 1e-5, 1e-6);
        for r in &reports {
            assert!(
                r.ok,
                "gradcheck failed for {} (max rel err {:.3e} over {} coords)",
                r.name, r.max_rel_err, r.coords_checked
            );
        }
        assert!(reports.len() >= 30, "op registry lost cases: {}", reports.len());
    }

    #[test]
    fn harness_handles_inputs_used_on_multiple_paths() {
        // d/dx [ sum(2x) * 0.5 * sum(x) ] needs both paths to accumulate
        let r = check(
            "shared_input",
            &[(Shape::of(&[2]), vec![1.0, 2.0])],
            |_, v| v[0].scale(2.0).sum_all().scale(0.5).mul(&v[0].sum_all()),
            1e-5,
            1e-6,
        );
        assert!(r.ok, "harness mishandles shared inputs: {:.3e}", r.max_rel_err);
    }
}
