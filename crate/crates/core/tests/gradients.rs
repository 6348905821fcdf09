//! Finite-difference checks of every differentiable primitive.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewagg::adcore::{finite_difference_check, AdError, Tape, Tensor, Var};
use viewagg::aggregation::{aggregate_on_tape, AggregationMode, Mapping, Metric};
use viewagg::ParamStore;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=3)).collect()
}

/// `sum(out * c)` for a fixed, shape-determined `c`.
fn project<'t>(out: Var<'t>) -> Result<Var<'t>, AdError> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let c = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let c = out.tape().constant(Tensor::new(&shape, c)?);
    out.mul(c)?.sum_all()
}

fn max_error<F>(params: Vec<Tensor>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AdError>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = params
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t).unwrap())
        .collect();
    let report = finite_difference_check(&mut store, EPS, |tape, s| {
        let vars: Vec<Var<'_>> = ids.iter().map(|&id| tape.param(s, id)).collect();
        project(f(tape, &vars)?)
    })
    .unwrap();
    report.max_rel_error
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! unary_check {
    ($name:ident, $gen:expr, $op:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn $name(seed in any::<u64>()) {
                let mut r = rng(seed);
                let shape = small_shape(&mut r);
                let gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor = $gen;
                let x = gen(&mut r, &shape);
                let op: for<'t> fn(Var<'t>) -> Result<Var<'t>, AdError> = $op;
                let err = max_error(vec![x], |_, v| op(v[0]));
                prop_assert!(err < TOL, "relative error {err}");
            }
        }
    };
}

fn any_real(r: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
    uniform(r, s, -2.0, 2.0)
}

fn positive(r: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
    uniform(r, s, 0.2, 3.0)
}

unary_check!(neg, any_real, |x| x.neg());
unary_check!(exp, any_real, |x| x.exp());
unary_check!(log, positive, |x| x.log());
unary_check!(sqrt, positive, |x| x.sqrt());
unary_check!(square, any_real, |x| x.square());
unary_check!(relu, away_from_zero, |x| x.relu());
unary_check!(elu, away_from_zero, |x| x.elu());
unary_check!(sigmoid, any_real, |x| x.sigmoid());
unary_check!(softplus, any_real, |x| x.softplus());
unary_check!(scale, any_real, |x| x.scale(-1.7));
unary_check!(add_scalar, any_real, |x| x.add_scalar(0.4));
unary_check!(sum_all, any_real, |x| x.sum_all());
unary_check!(cumsum_exclusive, any_real, |x| x.cumsum_exclusive());

/// A shape broadcastable to `full`: a suffix with some axes set to 1.
fn broadcastable(r: &mut ChaCha8Rng, full: &[usize]) -> Vec<usize> {
    let drop = r.random_range(0..=full.len());
    full[drop..]
        .iter()
        .map(|&d| if r.random_bool(0.3) { 1 } else { d })
        .collect()
}

macro_rules! binary_check {
    ($name:ident, $rhs:expr, $op:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn $name(seed in any::<u64>()) {
                let mut r = rng(seed);
                let full = small_shape(&mut r);
                let other = broadcastable(&mut r, &full);
                let (a_shape, b_shape) = if r.random_bool(0.5) { (full, other) } else { (other, full) };
                let a = any_real(&mut r, &a_shape);
                let gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor = $rhs;
                let b = gen(&mut r, &b_shape);
                let op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>, AdError> = $op;
                let err = max_error(vec![a, b], |_, v| op(v[0], v[1]));
                prop_assert!(err < TOL, "relative error {err}");
            }
        }
    };
}

binary_check!(add, any_real, |a, b| a.add(b));
binary_check!(sub, any_real, |a, b| a.sub(b));
binary_check!(mul, any_real, |a, b| a.mul(b));
binary_check!(div, positive, |a, b| a.div(b));

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (b, m, k, n) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let lhs = if r.random_bool(0.5) { vec![b, m, k] } else { vec![m, k] };
        let x = any_real(&mut r, &lhs);
        let w = any_real(&mut r, &[k, n]);
        let err = max_error(vec![x, w], |_, v| v[0].matmul(v[1]));
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn sum_and_mean_axis(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = small_shape(&mut r);
        let axis = r.random_range(0..shape.len());
        let x = any_real(&mut r, &shape);
        let err = max_error(vec![x.clone()], |_, v| v[0].sum_axis(axis));
        prop_assert!(err < TOL, "sum_axis relative error {err}");
        let err = max_error(vec![x], |_, v| v[0].mean_axis(axis));
        prop_assert!(err < TOL, "mean_axis relative error {err}");
    }

    #[test]
    fn broadcast_to(seed in any::<u64>()) {
        let mut r = rng(seed);
        let full = small_shape(&mut r);
        let small = broadcastable(&mut r, &full);
        let x = any_real(&mut r, &small);
        let err = max_error(vec![x], |_, v| v[0].broadcast_to(&full));
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn reshape_and_slice(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = small_shape(&mut r);
        let n: usize = shape.iter().product();
        let axis = r.random_range(0..shape.len());
        let start = r.random_range(0..shape[axis]);
        let len = r.random_range(1..=shape[axis] - start);
        let x = any_real(&mut r, &shape);
        let err = max_error(vec![x.clone()], |_, v| v[0].reshape(&[n]));
        prop_assert!(err < TOL, "reshape relative error {err}");
        let err = max_error(vec![x], |_, v| v[0].slice(axis, start, len));
        prop_assert!(err < TOL, "slice relative error {err}");
    }

    #[test]
    fn concat(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = small_shape(&mut r);
        let axis = r.random_range(0..shape.len());
        let mut other = shape.clone();
        other[axis] = r.random_range(1..4);
        let a = any_real(&mut r, &shape);
        let b = any_real(&mut r, &other);
        let err = max_error(vec![a, b], |tape, v| tape.concat(&[v[0], v[1]], axis));
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn select(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = small_shape(&mut r);
        let n: usize = shape.iter().product();
        let mask: Rc<[bool]> = (0..n).map(|_| r.random_bool(0.5)).collect::<Vec<_>>().into();
        let a = any_real(&mut r, &shape);
        let b = any_real(&mut r, &shape);
        let err = max_error(vec![a, b], |tape, v| tape.select(mask.clone(), v[0], v[1]));
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn gather_rows(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (rows, channels, out) = (r.random_range(1..6), r.random_range(1..4), r.random_range(1..5));
        let idx: Rc<[[u32; 4]]> = (0..out)
            .map(|_| std::array::from_fn(|_| r.random_range(0..rows as u32)))
            .collect::<Vec<_>>()
            .into();
        let w: Rc<[[f64; 4]]> = (0..out)
            .map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0)))
            .collect::<Vec<_>>()
            .into();
        let table = any_real(&mut r, &[rows, channels]);
        let err = max_error(vec![table], |_, v| v[0].gather_rows(idx.clone(), w.clone()));
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn conv2d(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (b, h, w) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let (cin, cout) = (r.random_range(1..3), r.random_range(1..3));
        let k = if r.random_bool(0.5) { 1 } else { 3 };
        let x = any_real(&mut r, &[b, h, w, cin]);
        let kernel = any_real(&mut r, &[k, k, cin, cout]);
        let err = max_error(vec![x, kernel], |_, v| v[0].conv2d(v[1]));
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn aggregate(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (p, n_s, n_f, n_k) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..4), r.random_range(1..4));
        let mode = match r.random_range(0..5) {
            0 => AggregationMode::ViewWise { metric: Metric::SquaredL2, mapping: Mapping::Exp },
            1 => AggregationMode::ViewWise { metric: Metric::Cosine, mapping: Mapping::Exp },
            2 => AggregationMode::ViewWise { metric: Metric::SquaredL2, mapping: Mapping::Rational },
            3 => AggregationMode::GlobalMeanVar,
            _ => AggregationMode::GlobalMean,
        };
        let valid: Rc<[bool]> = (0..p * n_s).map(|_| r.random_bool(0.8)).collect::<Vec<_>>().into();
        let features = any_real(&mut r, &[p, n_s, n_f]);
        let mut params = vec![features];
        if mode.is_view_wise() {
            params.push(uniform(&mut r, &[n_k], -2.0, 0.7));
        }
        let err = max_error(params, |_, v| {
            aggregate_on_tape(v[0], valid.clone(), mode, v.get(1).copied(), None)
        });
        prop_assert!(err < TOL, "{mode:?}: relative error {err}");
    }
}
