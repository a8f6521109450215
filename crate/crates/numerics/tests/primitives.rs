use mres_numerics::gradcheck::{finite_diff_check, input_check, param_check};
use mres_numerics::layers::{is_key_bias, Linear, TransformerBlock};
use mres_numerics::{bilinear_resize, ParamStore, Real, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Per-pixel bilinear reference written directly from the half-pixel rule.
fn bilinear_reference(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0).min((n_in - 1) as f64);
        let l = s.floor() as usize;
        (l, (l + 1).min(n_in - 1), s - l as f64)
    };
    Tensor::from_fn(&[oh, ow], |idx| {
        let (i, j) = (idx / ow, idx % ow);
        let (y0, y1, ty) = coord(i, h, oh);
        let (x0, x1, tx) = coord(j, w, ow);
        let top = x.at(&[y0, x0]) * (1.0 - tx) + x.at(&[y0, x1]) * tx;
        let bot = x.at(&[y1, x0]) * (1.0 - tx) + x.at(&[y1, x1]) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

#[test]
fn matmul_identity_zero_and_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 3]);
    let mut t = Tape::new();
    let i3 = t.constant(Tensor::eye(3));
    let av = t.constant(a.clone());
    let y = t.matmul(i3, av).unwrap();
    assert_eq!(t.value(y), &a);
    let z = t.constant(Tensor::zeros(&[3, 3]));
    let y = t.matmul(z, av).unwrap();
    assert_eq!(t.value(y).max_abs(), 0.0);

    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 3]);
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = t.matmul(av, bv).unwrap();
    assert!(t.value(y).max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
}

#[test]
fn softmax_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[6]).scale(4.0);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = t.softmax(xv);
    let z: f64 = x.data().iter().map(|v| (*v as f64).exp()).sum();
    for (yi, xi) in t.value(y).data().iter().zip(x.data()) {
        assert!((*yi as f64 - (*xi as f64).exp() / z).abs() < 1e-12);
    }
    assert!((t.value(y).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn bilinear_matches_reference_and_preserves_constants() {
    let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = bilinear_resize(&x, 3, 3).unwrap();
    assert_eq!(y.at(&[1, 1]), 1.5);
    assert!(y.max_abs_diff(&bilinear_reference(&x, 3, 3)) < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(h, w, oh, ow) in &[(5, 7, 3, 11), (4, 4, 9, 2), (1, 6, 3, 3), (8, 3, 8, 3)] {
        let x = random(&mut rng, &[h, w]);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        assert!(y.max_abs_diff(&bilinear_reference(&x, oh, ow)) < 1e-12);
        let c = Tensor::full(&[h, w], 2.75);
        let yc = bilinear_resize(&c, oh, ow).unwrap();
        assert!(yc.data().iter().all(|v| (v - 2.75).abs() < 1e-12));
    }
}

#[test]
fn softmax_then_pick_matches_analytic_jacobian() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[6]).scale(2.0);
        let pick = (seed as usize) % 6;
        // d softmax_pick / dx_j = p_pick (δ_pick,j − p_j)
        let z: Real = x.data().iter().map(|v| v.exp()).sum();
        let p: Vec<Real> = x.data().iter().map(|v| v.exp() / z).collect();
        let analytic: Vec<Real> = (0..6).map(|j| p[pick] * ((j == pick) as u8 as Real - p[j])).collect();

        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let y = t.softmax(xv);
        let sel = t.gather_rows(y, &[pick]).unwrap();
        let l = t.sum(sel);
        t.backward(l, &mut store).unwrap();
        for (g, a) in t.grad(xv).unwrap().data().iter().zip(&analytic) {
            assert!((g - a).abs() < 1e-12);
        }
        let r = finite_diff_check(
            |t, v| {
                let y = t.softmax(v);
                let s = t.gather_rows(y, &[pick])?;
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "seed {seed}: {}", r.max_rel_error());
    }
}

#[test]
fn backward_twice_accumulates_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut rng, "l", 4, 3, true).unwrap();
    let x = random(&mut rng, &[2, 4]);
    let mut t = Tape::new();
    let xv = t.leaf(x, true);
    let y = lin.forward(&mut t, &store, xv).unwrap();
    let y = t.gelu(y);
    let l = t.sum(y);
    t.backward(l, &mut store).unwrap();
    let once_x = t.grad(xv).unwrap().clone();
    let once_w = store.grad(lin.weight).unwrap().clone();
    t.backward(l, &mut store).unwrap();
    assert_eq!(t.grad(xv).unwrap(), &once_x.scale(2.0));
    assert_eq!(store.grad(lin.weight).unwrap(), &once_w.scale(2.0));
}

/// Weighted sum so that every output element gets a distinct cotangent.
fn probe(t: &mut Tape, y: mres_numerics::Var, seed: u64) -> mres_numerics::Result<mres_numerics::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = random(&mut rng, t.shape(y));
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn check_inputs(name: &str, x: &Tensor, seed: u64, f: impl Fn(&mut Tape, mres_numerics::Var) -> mres_numerics::Result<mres_numerics::Var>) {
    let r = finite_diff_check(|t, v| { let y = f(t, v)?; probe(t, y, seed) }, x, 1e-5).unwrap();
    assert!(r.max_rel_error() < 1e-4, "{name} seed {seed}: {}", r.max_rel_error());
}

#[test]
fn primitive_gradients_pass_finite_differences_on_ten_seeds() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random(&mut rng, &[4, 3]);
        check_inputs("matmul", &random(&mut rng, &[2, 4]), seed, |t, v| {
            let bv = t.constant(b.clone());
            t.matmul(v, bv)
        });
        check_inputs("softmax", &random(&mut rng, &[3, 5]), seed, |t, v| Ok(t.softmax(v)));
        check_inputs("gelu", &random(&mut rng, &[7]).scale(3.0), seed, |t, v| Ok(t.gelu(v)));
        check_inputs("resize", &random(&mut rng, &[2, 3, 4]), seed, |t, v| t.resize(v, 5, 2));
        check_inputs("permute", &random(&mut rng, &[2, 3, 4]), seed, |t, v| t.permute(v, &[2, 0, 1]));
        check_inputs("gather", &random(&mut rng, &[4, 3]), seed, |t, v| t.gather_rows(v, &[3, 0, 3, 1]));
        check_inputs("concat", &random(&mut rng, &[2, 3]), seed, |t, v| {
            let s = t.scale(v, 2.0);
            t.concat_rows(&[v, s, v])
        });
        let target = random(&mut rng, &[6]);
        check_inputs("masked_sse", &random(&mut rng, &[6]), seed, |t, v| {
            t.masked_sse(v, &target, &[true, false, true, true, false, true])
        });
        let g = random(&mut rng, &[5]);
        let be = random(&mut rng, &[5]);
        check_inputs("layer_norm", &random(&mut rng, &[3, 5]), seed, |t, v| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(be.clone()));
            t.layer_norm(v, gv, bv, 1e-6)
        });
        check_inputs("self_attention", &random(&mut rng, &[2 * 3, 3 * 4]), seed, |t, v| t.self_attention(v, 2, 3, 2));
        let keys = random(&mut rng, &[2 * 3, 2 * 2]);
        let values = random(&mut rng, &[2 * 3, 4]);
        let queries = random(&mut rng, &[2, 2]);
        check_inputs("master_query.keys", &keys, seed, |t, k| {
            let (v, q) = (t.constant(values.clone()), t.constant(queries.clone()));
            t.master_query_attention(k, v, q, 2, 3)
        });
        check_inputs("master_query.values", &values, seed, |t, v| {
            let (k, q) = (t.constant(keys.clone()), t.constant(queries.clone()));
            t.master_query_attention(k, v, q, 2, 3)
        });
        check_inputs("master_query.queries", &queries, seed, |t, q| {
            let (k, v) = (t.constant(keys.clone()), t.constant(values.clone()));
            t.master_query_attention(k, v, q, 2, 3)
        });
    }
}

#[test]
fn linear_and_block_parameter_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 6, 8, true).unwrap();
        let blk = TransformerBlock::new(&mut store, &mut rng, "blk", 8, 2, 2).unwrap();
        let x = random(&mut rng, &[2 * 3, 6]);
        let f = |t: &mut Tape, s: &ParamStore, v| {
            let h = lin.forward(t, s, v)?;
            let h = blk.forward(t, s, h, 2, 3)?;
            probe(t, h, seed)
        };
        let r = input_check(&mut store, &x, 1e-5, f).unwrap();
        assert!(r.max_rel_error() < 1e-4, "input seed {seed}: {}", r.max_rel_error());

        let coords: Vec<_> = store
            .iter()
            .map(|(id, p)| {
                let n = p.value.len();
                let mut i = rng.random_range(0..n);
                while is_key_bias(&p.name, n, i) {
                    i = rng.random_range(0..n);
                }
                (id, i)
            })
            .collect();
        let xc = x.clone();
        let r = param_check(&mut store, &coords, 1e-5, |t, s| {
            let v = t.constant(xc.clone());
            f(t, s, v)
        })
        .unwrap();
        let w = r.worst().unwrap();
        assert!(r.max_rel_error() < 1e-4, "params seed {seed}: {} at {:?} {:?}", r.max_rel_error(), store.get(coords[w].0).name, r.pairs[w]);
    }
}

/// Brute-force multi-head attention for one sequence.
fn attention_reference(qkv: &Tensor, seq: usize, heads: usize) -> Tensor {
    let d = qkv.shape()[1] / 3;
    let dh = d / heads;
    let mut out = Tensor::zeros(&[seq, d]);
    for h in 0..heads {
        for i in 0..seq {
            let mut scores = vec![0.0; seq];
            for (j, s) in scores.iter_mut().enumerate() {
                for p in 0..dh {
                    *s += qkv.at(&[i, h * dh + p]) * qkv.at(&[j, d + h * dh + p]);
                }
                *s /= (dh as Real).sqrt();
            }
            let m = scores.iter().cloned().fold(Real::MIN, Real::max);
            let z: Real = scores.iter().map(|s| (s - m).exp()).sum();
            for p in 0..dh {
                let v: Real = (0..seq).map(|j| (scores[j] - m).exp() / z * qkv.at(&[j, 2 * d + h * dh + p])).sum();
                out.set(&[i, h * dh + p], v);
            }
        }
    }
    out
}

#[test]
fn fused_attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let qkv = random(&mut rng, &[5, 3 * 6]);
    let mut t = Tape::new();
    let v = t.constant(qkv.clone());
    let y = t.self_attention(v, 1, 5, 3).unwrap();
    assert!(t.value(y).max_abs_diff(&attention_reference(&qkv, 5, 3)) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bilinear_is_linear(h in 1usize..6, w in 1usize..6, oh in 1usize..8, ow in 1usize..8,
                          a in -3.0f64..3.0, c in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, h, w]);
        let y = random(&mut rng, &[2, h, w]);
        let a = a as Real;
        let c = c as Real;
        let lhs = bilinear_resize(&x.scale(a).add(&y.scale(c)).unwrap(), oh, ow).unwrap();
        let rhs = bilinear_resize(&x, oh, ow).unwrap().scale(a)
            .add(&bilinear_resize(&y, oh, ow).unwrap().scale(c)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        // commutes with adding a constant
        let shifted = bilinear_resize(&x.map(|v| v + c), oh, ow).unwrap();
        let expect = bilinear_resize(&x, oh, ow).unwrap().map(|v| v + c);
        prop_assert!(shifted.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let n = vals.len();
        let x = Tensor::new(vec![n], vals.into_iter().map(|v| v as Real).collect()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax(v);
        prop_assert!((t.value(y).sum() - 1.0).abs() < 1e-12);
        prop_assert!(t.value(y).data().iter().all(|p| *p >= 0.0));
    }
}
