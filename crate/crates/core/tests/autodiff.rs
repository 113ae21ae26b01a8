use std::rc::Rc;

use d4_core::autodiff::{grad_check, AutodiffError, ParamStore, Shape, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn positive(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(0.05..1.0)).collect())
}

/// Random fixed projection to a scalar so every output entry has a distinct weight.
fn project(v: &Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Rc<[f64]> = (0..v.value().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = v.reshape(Shape::Vector(v.value().len())).unwrap();
    flat.dot_const(w).unwrap()
}

fn check<F>(name: &str, params: ParamStore, f: F)
where
    F: Fn(&Tape) -> Result<Var, AutodiffError>,
{
    let r = grad_check(&params, EPS, |t| Ok(project(&f(t)?, 99))).unwrap();
    assert!(r.passed(TOL), "{name}: max rel error {} at {:?}", r.max_rel_error, r.worst);
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[test]
fn elementwise_and_linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Shape::Vector(5);
    let m = Shape::Matrix(3, 5);
    let p = store(vec![
        ("a", random(&mut rng, v)),
        ("b", random(&mut rng, v)),
        ("m", random(&mut rng, m)),
        ("n", random(&mut rng, Shape::Matrix(5, 4))),
        ("x", random(&mut rng, Shape::Vector(3))),
        ("s", random(&mut rng, Shape::Scalar)),
    ]);
    let va = |t: &Tape, k: &str| t.var(k);
    check("add", p.clone(), |t| va(t, "a")?.add(&va(t, "b")?));
    check("sub", p.clone(), |t| va(t, "a")?.sub(&va(t, "b")?));
    check("hadamard", p.clone(), |t| va(t, "a")?.hadamard(&va(t, "b")?));
    check("scalarmul", p.clone(), |t| va(t, "a")?.scalarmul(&va(t, "s")?));
    check("scale", p.clone(), |t| Ok(va(t, "m")?.scale(-2.5)));
    check("add_scalar", p.clone(), |t| Ok(va(t, "a")?.add_scalar(0.7).hadamard(&va(t, "a")?)?));
    check("matvec", p.clone(), |t| va(t, "m")?.matvec(&va(t, "a")?));
    check("vecmat", p.clone(), |t| va(t, "x")?.vecmat(&va(t, "m")?));
    check("matmul", p.clone(), |t| va(t, "m")?.matmul(&va(t, "n")?));
    check("outer", p.clone(), |t| va(t, "x")?.outer(&va(t, "a")?));
    check("concat", p.clone(), |t| Var::concat(&[va(t, "a")?, va(t, "s")?, va(t, "x")?]));
    check("slice", p.clone(), |t| va(t, "m")?.slice(4, 7));
    check("row", p.clone(), |t| va(t, "m")?.row(2));
    check("element", p.clone(), |t| va(t, "a")?.element(3));
    check("reshape", p.clone(), |t| va(t, "m")?.reshape(Shape::Matrix(5, 3)));
    check("sum", p.clone(), |t| Ok(va(t, "m")?.sum().scalarmul(&va(t, "s")?)?));
    check("dot", p.clone(), |t| va(t, "a")?.dot(&va(t, "b")?));
    check("scatter", p.clone(), |t| va(t, "a")?.scatter(Rc::from(vec![(0, 1), (1, 1), (4, 0), (2, 2)]), 3));
}

#[test]
fn nonlinear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = Shape::Vector(6);
    // Keep pwl inputs away from its kinks at ±0.5.
    let mut k = random(&mut rng, v);
    for x in k.data_mut() {
        if (x.abs() - 0.5).abs() < 0.05 {
            *x += 0.1;
        }
    }
    let p = store(vec![("a", random(&mut rng, v)), ("k", k), ("q", positive(&mut rng, v))]);
    check("softmax", p.clone(), |t| Ok(t.var("a")?.scale(3.0).softmax()));
    check("sigmoid", p.clone(), |t| Ok(t.var("a")?.sigmoid()));
    check("tanh", p.clone(), |t| Ok(t.var("a")?.tanh()));
    check("log", p.clone(), |t| Ok(t.var("q")?.log()));
    check("normalize", p.clone(), |t| Ok(t.var("q")?.normalize()));
    check("pwl", p.clone(), |t| Ok(t.var("k")?.pwl()));
}

#[test]
fn machine_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5;
    let p = store(vec![
        ("mem", random(&mut rng, Shape::Matrix(4, n))),
        ("x", random(&mut rng, Shape::Vector(n))),
        ("addr", positive(&mut rng, Shape::Vector(4))),
        ("a", positive(&mut rng, Shape::Vector(n))),
        ("b", positive(&mut rng, Shape::Vector(n))),
        ("p", Tensor::scalar(0.3)),
        ("w", positive(&mut rng, Shape::Vector(4))),
        ("i1", random(&mut rng, Shape::Vector(n))),
        ("i2", random(&mut rng, Shape::Vector(n))),
    ]);
    check("write", p.clone(), |t| Var::write(&t.var("mem")?, &t.var("x")?, &t.var("addr")?));
    let table: Rc<[usize]> = (0..n * n).map(|k| (k / n + k % n) % n).collect();
    check("table_op", p.clone(), move |t| Var::table_op(&t.var("a")?, &t.var("b")?, table.clone(), n));
    check("two_point", p.clone(), |t| Var::two_point(&t.var("p")?, 1, 3, 5));
    check("two_point same", p.clone(), |t| Var::two_point(&t.var("p")?, 2, 2, 5));
    check("mix", p.clone(), |t| {
        let w = t.var("w")?;
        let base = t.var("x")?;
        Var::mix(&w, Some((&base, vec![0, 3])), &[(1, t.var("i1")?), (2, t.var("i2")?)])
    });
    check("mix without base", p.clone(), |t| Var::mix(&t.var("w")?, None, &[(1, t.var("i1")?), (3, t.var("i2")?)]));
}

#[test]
fn reused_nodes_accumulate() {
    let p = store(vec![("a", Tensor::vector(vec![0.3, -0.2, 0.9]))]);
    check("reuse", p, |t| {
        let a = t.var("a")?;
        let b = a.tanh();
        b.hadamard(&b)?.add(&a.hadamard(&b)?)
    });
}

#[test]
fn backward_twice_is_an_error() {
    let p = store(vec![("a", Tensor::scalar(2.0))]);
    let mut t = Tape::from_store(&p);
    let loss = t.var("a").unwrap().tanh();
    t.backward(&loss).unwrap();
    assert_eq!(t.backward(&loss), Err(AutodiffError::BackwardTwice));
    t.rearm();
    t.backward(&loss).unwrap();
    let g = t.grad("a").unwrap().item();
    let expect = 2.0 * (1.0 - 2.0f64.tanh().powi(2));
    assert!((g - expect).abs() < 1e-12);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let p = store(vec![("a", Tensor::vector(vec![1.0, 2.0]))]);
    let mut t = Tape::from_store(&p);
    let v = t.var("a").unwrap();
    assert!(matches!(t.backward(&v), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let a = Var::constant(Tensor::vector(vec![1.0; 3]));
    let b = Var::constant(Tensor::vector(vec![1.0; 4]));
    assert!(matches!(a.add(&b), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(a.slice(2, 2).is_err());
}

#[test]
fn long_chains_drop_without_overflow() {
    let p = store(vec![("a", Tensor::scalar(0.5))]);
    let mut t = Tape::from_store(&p);
    let mut x = t.var("a").unwrap();
    for _ in 0..200_000 {
        x = x.scale(1.0);
    }
    t.backward(&x).unwrap();
    assert_eq!(t.grad("a").unwrap().item(), 1.0);
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matrix_op_grads_match((r, c, k) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = store(vec![
            ("m", random(&mut rng, Shape::Matrix(r, c))),
            ("n", random(&mut rng, Shape::Matrix(c, k))),
            ("x", random(&mut rng, Shape::Vector(c))),
            ("y", random(&mut rng, Shape::Vector(r))),
        ]);
        for (name, f) in [
            ("matmul", Box::new(|t: &Tape| t.var("m")?.matmul(&t.var("n")?)) as Box<dyn Fn(&Tape) -> Result<Var, AutodiffError>>),
            ("matvec", Box::new(|t: &Tape| t.var("m")?.matvec(&t.var("x")?.tanh()))),
            ("vecmat", Box::new(|t: &Tape| Ok(t.var("y")?.vecmat(&t.var("m")?)?.softmax().log()))),
            ("outer", Box::new(|t: &Tape| t.var("y")?.outer(&t.var("x")?.sigmoid()))),
        ] {
            let res = grad_check(&p, EPS, |t| Ok(project(&f(t)?, seed)))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(res.passed(TOL), "{} {:?}: {}", name, (r, c, k), res.max_rel_error);
        }
    }

    #[test]
    fn simplex_preserving_ops(n in 1usize..=8, rows in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let simplex = |rng: &mut ChaCha8Rng, n: usize| {
            let t = positive(rng, Shape::Vector(n));
            Var::constant(t).normalize()
        };
        let a = simplex(&mut rng, n);
        let b = simplex(&mut rng, n);
        let sum = |v: &Var| v.data().iter().sum::<f64>();
        prop_assert!((sum(&a) - 1.0).abs() < 1e-12);
        prop_assert!((sum(&Var::constant(random(&mut rng, Shape::Vector(n))).softmax()) - 1.0).abs() < 1e-12);
        let table: Rc<[usize]> = (0..n * n).map(|k| (k / n + 2 * (k % n)) % n).collect();
        prop_assert!((sum(&Var::table_op(&a, &b, table, n).unwrap()) - 1.0).abs() < 1e-12);
        let p = Var::constant(Tensor::scalar(rng.random_range(0.0..1.0)));
        prop_assert!((sum(&Var::two_point(&p, 0, n - 1, n).unwrap()) - 1.0).abs() < 1e-12);
        // A write of a distribution into a matrix of distribution rows keeps every row on the simplex.
        let mem: Vec<f64> = (0..rows).flat_map(|_| simplex(&mut rng, n).data().to_vec()).collect();
        let mem = Var::constant(Tensor::matrix(rows, n, mem));
        let addr = simplex(&mut rng, rows);
        let out = Var::write(&mem, &b, &addr).unwrap();
        for i in 0..rows {
            prop_assert!((out.row(i).unwrap().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Mixtures of distributions with simplex weights stay on the simplex.
        let w = simplex(&mut rng, 3);
        let mixed = Var::mix(&w, Some((&a, vec![0])), &[(1, b.clone()), (2, simplex(&mut rng, n))]).unwrap();
        prop_assert!((sum(&mixed) - 1.0).abs() < 1e-12);
    }
}
