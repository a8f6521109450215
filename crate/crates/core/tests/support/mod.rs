//! Brute-force reference implementations written directly from the
//! defining formulas, with plain loops and no shared kernels.
#![allow(dead_code)]

use mres_core::encodings::{Category, ChannelDescriptor};
use mres_numerics::{ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [Real] {
    store.value(store.id(name).unwrap()).data()
}

/// Fills every parameter with fresh random values of moderate scale.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: Real) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn gelu(x: Real) -> Real {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// `[sin(v/ω_0), cos(v/ω_0), sin(v/ω_1), …]` with `ω_k = 10000^(2k/D)`.
pub fn sinusoid(v: f64, dim: usize) -> Vec<Real> {
    let mut out = vec![0.0; dim];
    for k in 0..dim / 2 {
        let a = v / 10000f64.powf((2 * k) as f64 / dim as f64);
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    out
}

/// `y = x·W + b` for one row, `W` stored input-major.
pub fn affine(x: &[Real], w: &[Real], b: Option<&[Real]>, out: usize) -> Vec<Real> {
    let mut y = vec![0.0; out];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate() {
            s += xi * w[i * out + j];
        }
        *yj = s + b.map_or(0.0, |b| b[j]);
    }
    y
}

pub fn linear(store: &ParamStore, name: &str, x: &[Real], out: usize) -> Vec<Real> {
    let b = store.id(&format!("{name}.bias")).ok().map(|id| store.value(id).data());
    affine(x, param(store, &format!("{name}.weight")), b, out)
}

pub fn mlp(store: &ParamStore, name: &str, x: &[Real], hidden: usize, out: usize) -> Vec<Real> {
    let h: Vec<Real> = linear(store, &format!("{name}.fc1"), x, hidden).into_iter().map(gelu).collect();
    linear(store, &format!("{name}.fc2"), &h, out)
}

pub fn softmax(x: &[Real]) -> Vec<Real> {
    let m = x.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = x.iter().map(|v| (v - m).exp()).collect();
    let s: Real = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Rows of the projection matrix, one MLP evaluation per channel.
pub fn projection_matrix(store: &ParamStore, channels: &[ChannelDescriptor], dim: usize) -> Vec<Vec<Real>> {
    let hidden = store.value(store.id("projector.optical.mlp.fc1.weight").unwrap()).shape()[1];
    channels
        .iter()
        .map(|c| match c {
            ChannelDescriptor::Optical { wavelength_nm } => {
                mlp(store, "projector.optical.mlp", &sinusoid(*wavelength_nm, dim), hidden, dim)
            }
            ChannelDescriptor::Categorical { category } => {
                let table = param(store, "projector.categories.weight");
                let row = &table[category.index() * dim..(category.index() + 1) * dim];
                let kind = if matches!(category, Category::Dsm | Category::Dtm | Category::Slope) { "elevation" } else { "radar" };
                mlp(store, &format!("projector.{kind}.mlp"), row, hidden, dim)
            }
        })
        .collect()
}

/// `y[t,d,h,w] = Σ_c x[t,c,h,w]·M[c,d]` in five nested loops.
pub fn project(x: &Tensor, m: &[Vec<Real>]) -> Tensor {
    let s = x.shape();
    let (t_n, c_n, h_n, w_n) = (s[0], s[1], s[2], s[3]);
    let d_n = m[0].len();
    let mut y = Tensor::zeros(&[t_n, d_n, h_n, w_n]);
    for t in 0..t_n {
        for d in 0..d_n {
            for h in 0..h_n {
                for w in 0..w_n {
                    let mut acc = 0.0;
                    for c in 0..c_n {
                        acc += x.at(&[t, c, h, w]) * m[c][d];
                    }
                    y.set(&[t, d, h, w], acc);
                }
            }
        }
    }
    y
}

/// Source position and weights of output sample `i` under half-pixel
/// centers with edge clamping.
fn taps(i: usize, n_in: usize, n_out: usize) -> (usize, usize, Real) {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0).min((n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of one `H × W` plane.
pub fn bilinear(x: &[Real], h: usize, w: usize, ho: usize, wo: usize) -> Vec<Real> {
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        let (y0, y1, fy) = taps(i, h, ho);
        for j in 0..wo {
            let (x0, x1, fx) = taps(j, w, wo);
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out[i * wo + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

pub fn gate(store: &ParamStore, name: &str, sigma: f64, dim: usize, n_conv: usize) -> Vec<Real> {
    let h: Vec<Real> = linear(store, &format!("{name}.gate.fc1"), &sinusoid(sigma, dim), dim / 4).into_iter().map(gelu).collect();
    softmax(&linear(store, &format!("{name}.gate.fc2"), &h, n_conv))
}

/// Resize every latent plane, then add `Σ_n w_n · (r · E_n)` at every pixel.
pub fn resample(store: &ParamStore, name: &str, x: &Tensor, ho: usize, wo: usize, sigma: f64, n_conv: usize) -> Tensor {
    let s = x.shape();
    let (t_n, d_n, h, w) = (s[0], s[1], s[2], s[3]);
    let wts = gate(store, name, sigma, d_n, n_conv);
    let experts = param(store, &format!("{name}.experts"));
    let mut r = Tensor::zeros(&[t_n, d_n, ho, wo]);
    for t in 0..t_n {
        for d in 0..d_n {
            let plane: Vec<Real> = (0..h * w).map(|i| x.at(&[t, d, i / w, i % w])).collect();
            for (i, v) in bilinear(&plane, h, w, ho, wo).into_iter().enumerate() {
                r.set(&[t, d, i / wo, i % wo], v);
            }
        }
    }
    let mut out = r.clone();
    for t in 0..t_n {
        for i in 0..ho {
            for j in 0..wo {
                for e in 0..d_n {
                    let mut acc = 0.0;
                    for (n, wn) in wts.iter().enumerate() {
                        let mut inner = 0.0;
                        for d in 0..d_n {
                            inner += r.at(&[t, d, i, j]) * experts[n * d_n * d_n + d * d_n + e];
                        }
                        acc += wn * inner;
                    }
                    out.set(&[t, e, i, j], r.at(&[t, e, i, j]) + acc);
                }
            }
        }
    }
    out
}

/// Lightweight temporal attention, one pixel and one head at a time.
pub fn ltae(store: &ParamStore, name: &str, x: &Tensor, days: &[u16], heads: usize, key_dim: usize, width: usize) -> Tensor {
    let s = x.shape();
    let (t_n, d_n, h, w) = (s[0], s[1], s[2], s[3]);
    let q = param(store, &format!("{name}.queries"));
    let dv = width / heads;
    let mut out = Tensor::zeros(&[d_n, h, w]);
    for i in 0..h {
        for j in 0..w {
            let mut values = Vec::new();
            let mut keys = Vec::new();
            for (t, &day) in days.iter().enumerate() {
                let pe = sinusoid(day as f64, d_n);
                let z: Vec<Real> = (0..d_n).map(|d| x.at(&[t, d, i, j]) + pe[d]).collect();
                let v = linear(store, &format!("{name}.value"), &z, width);
                keys.push(linear(store, &format!("{name}.key"), &v, heads * key_dim));
                values.push(v);
            }
            let mut attended = vec![0.0; width];
            for head in 0..heads {
                let scores: Vec<Real> = (0..t_n)
                    .map(|t| (0..key_dim).map(|k| q[head * key_dim + k] * keys[t][head * key_dim + k]).sum::<Real>() / (key_dim as Real).sqrt())
                    .collect();
                let a = softmax(&scores);
                for c in head * dv..(head + 1) * dv {
                    attended[c] = (0..t_n).map(|t| a[t] * values[t][c]).sum();
                }
            }
            let o = linear(store, &format!("{name}.out"), &attended, d_n);
            for (d, v) in o.into_iter().enumerate() {
                out.set(&[d, i, j], v);
            }
        }
    }
    out
}
