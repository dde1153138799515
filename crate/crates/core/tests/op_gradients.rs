//! Every differentiable op against central differences, through the public
//! graph API. Each op output is reduced with fixed random weights so that
//! every output element reaches the loss with a distinct coefficient.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vapf::autograd::{Graph, Var};
use vapf::gradcheck::{grad_check, Coord};
use vapf::params::ParameterStore;
use vapf::tensor::{Tensor, TensorError};

const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], half: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-half..half)).collect()).unwrap()
}

/// Weighted sum of `y` with weights drawn from `seed`.
fn reduce(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn all_coords(store: &ParameterStore) -> Vec<Coord> {
    store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |index| Coord { name: name.to_string(), index }))
        .collect()
}

fn check<F>(params: Vec<(&str, Tensor)>, f: F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var, TensorError>,
{
    let mut store = ParameterStore::new();
    for (name, t) in params {
        store.insert(name, t).unwrap();
    }
    let coords = all_coords(&store);
    grad_check(f, &mut store, 1e-5, &coords).unwrap().max_rel_error
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..6, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_linear((m, k, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            ("a", random(&mut rng, &[m, k], 1.0)),
            ("w", random(&mut rng, &[k, n], 1.0)),
            ("b", random(&mut rng, &[n], 1.0)),
        ];
        let err = check(params, |g| {
            let a = g.param("a")?;
            let w = g.param("w")?;
            let b = g.param("b")?;
            let y = g.linear(a, w, Some(b))?;
            reduce(g, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn batched_matmul((m, k, n, seed) in dims(), batch in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![("a", random(&mut rng, &[batch, m, k], 1.0)), ("w", random(&mut rng, &[k, n], 1.0))];
        let err = check(params, |g| {
            let a = g.param("a")?;
            let w = g.param("w")?;
            let y = g.matmul(a, w)?;
            reduce(g, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn pointwise_and_row_broadcasts((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            ("x", random(&mut rng, &[m, n], 2.0)),
            ("y", random(&mut rng, &[m, n], 2.0)),
            ("r", random(&mut rng, &[n], 2.0)),
        ];
        let err = check(params, |g| {
            let x = g.param("x")?;
            let y = g.param("y")?;
            let r = g.param("r")?;
            let a = g.add(x, y)?;
            let s = g.sub(a, y)?;
            let p = g.mul(s, y)?;
            let q = g.add_row(p, r)?;
            let z = g.mul_row(q, r)?;
            let z = g.scale(z, -0.7);
            reduce(g, z, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn gelu((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = check(vec![("x", random(&mut rng, &[m, n], 4.0))], |g| {
            let x = g.param("x")?;
            let y = g.gelu(x);
            reduce(g, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_on_both_axes((m, n, _, seed) in dims(), axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = check(vec![("x", random(&mut rng, &[m, n], 3.0))], |g| {
            let x = g.param("x")?;
            let y = g.softmax(x, axis)?;
            reduce(g, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn layer_norm((m, n, _, seed) in dims()) {
        let n = n + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            ("x", random(&mut rng, &[m, n], 2.0)),
            ("gamma", random(&mut rng, &[n], 1.5)),
            ("beta", random(&mut rng, &[n], 1.0)),
        ];
        let err = check(params, |g| {
            let x = g.param("x")?;
            let gamma = g.param("gamma")?;
            let beta = g.param("beta")?;
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            reduce(g, y, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn shape_ops((m, n, k, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![("x", random(&mut rng, &[m, n], 1.0)), ("y", random(&mut rng, &[k, n], 1.0))];
        let index: Vec<usize> = (0..m * n).rev().chain(0..n).collect();
        let err = check(params, move |g| {
            let x = g.param("x")?;
            let y = g.param("y")?;
            let c = g.concat(&[x, y], 0)?;
            let t = g.transpose(c)?;
            let parts = g.split(t, 1, &[m, k])?;
            let s = g.slice(parts[1], 0, 0, n)?;
            let r = g.reshape(parts[0], vec![m * n])?;
            let gathered = g.gather(r, index.clone(), vec![m * n + n])?;
            let a = reduce(g, gathered, seed)?;
            let b = reduce(g, s, seed ^ 1)?;
            let sq = g.sum_squares(x);
            let mean = g.mean(y);
            let ab = g.add(a, b)?;
            let ab = g.add(ab, sq)?;
            g.add(ab, mean)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn bce_with_logits(n in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let err = check(vec![("z", random(&mut rng, &[n], 6.0))], move |g| {
            let z = g.param("z")?;
            g.bce_with_logits(z, &labels)
        });
        prop_assert!(err < TOL, "{err}");
    }
}

/// One composite graph with more than a hundred coordinates: attention
/// built from the primitive ops.
#[test]
fn attention_composite_over_many_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tokens, width) = (5, 6);
    let params = vec![
        ("x", random(&mut rng, &[tokens, width], 1.0)),
        ("wq", random(&mut rng, &[width, width], 0.5)),
        ("wk", random(&mut rng, &[width, width], 0.5)),
        ("wv", random(&mut rng, &[width, width], 0.5)),
    ];
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    assert!(total >= 100);
    let err = check(params, |g| {
        let x = g.param("x")?;
        let wq = g.param("wq")?;
        let wk = g.param("wk")?;
        let wv = g.param("wv")?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (width as f64).sqrt());
        let a = g.softmax(s, 1)?;
        let y = g.matmul(a, v)?;
        let y = g.gelu(y);
        reduce(g, y, 8)
    });
    assert!(err < TOL, "{err}");
}
