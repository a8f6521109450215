//! Statistical checks of the synthetic corpus and the sampling strategy.

use std::collections::{HashMap, HashSet};

use mres_core::corpus::{derive_seed, desk_datasets, generate_sample, sample_iteration, standardize, DatasetSpec, NormalizationTable};
use mres_core::sample::ModalityData;

/// Mean over dates and channels, `H × W` row-major.
fn pixel_means(m: &ModalityData) -> Vec<f64> {
    let (t, c, hw) = (m.t(), m.c(), m.h() * m.w());
    let d = m.data.data();
    (0..hw)
        .map(|p| (0..t * c).map(|k| d[k * hw + p]).sum::<f64>() / (t * c) as f64)
        .collect()
}

fn center(i: usize, size: usize, gsd: f64) -> f64 {
    (i as f64 + 0.5 - size as f64 / 2.0) * gsd
}

/// Pairs of values on the cells of the coarser modality that lie wholly
/// inside the finer one's footprint; the finer modality is block-averaged.
fn aligned(fine: &ModalityData, coarse: &ModalityData) -> Vec<(f64, f64)> {
    let (fs, cs) = (fine.h(), coarse.h());
    let half_fine = fs as f64 * fine.gsd / 2.0;
    let fv = pixel_means(fine);
    let cv = pixel_means(coarse);
    let mut out = Vec::new();
    for ci in 0..cs {
        for cj in 0..cs {
            let (y, x) = (center(ci, cs, coarse.gsd), center(cj, cs, coarse.gsd));
            let r = coarse.gsd / 2.0;
            if y.abs() + r > half_fine + 1e-9 || x.abs() + r > half_fine + 1e-9 {
                continue;
            }
            let mut acc = 0.0;
            let mut n = 0;
            for fi in 0..fs {
                for fj in 0..fs {
                    let (fy, fx) = (center(fi, fs, fine.gsd), center(fj, fs, fine.gsd));
                    if (fy - y).abs() < r && (fx - x).abs() < r {
                        acc += fv[fi * fs + fj];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                out.push((acc / n as f64, cv[ci * cs + cj]));
            }
        }
    }
    out
}

fn pearson(xy: &[(f64, f64)]) -> f64 {
    let n = xy.len() as f64;
    let (mx, my) = (xy.iter().map(|p| p.0).sum::<f64>() / n, xy.iter().map(|p| p.1).sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in xy {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn table(datasets: &[DatasetSpec]) -> NormalizationTable {
    NormalizationTable::estimate(datasets, 1, 1000).unwrap()
}

#[test]
fn standardized_channels_have_unit_moments() {
    let datasets = desk_datasets();
    let t = table(&datasets);
    for spec in &datasets {
        let mut acc: HashMap<(String, usize), (f64, f64, f64)> = HashMap::new();
        for i in 0..1000 {
            let s = standardize(&generate_sample(spec, derive_seed(99, i)).unwrap(), &t).unwrap();
            for m in &s.modalities {
                let (tt, c, hw) = (m.t(), m.c(), m.h() * m.w());
                for k in 0..tt * c {
                    let e = acc.entry((m.name.clone(), k % c)).or_default();
                    for &v in &m.data.data()[k * hw..(k + 1) * hw] {
                        e.0 += 1.0;
                        e.1 += v;
                        e.2 += v * v;
                    }
                    assert!(m.data.data()[k * hw..(k + 1) * hw].iter().all(|v| v.is_finite() && v.abs() < 6.0));
                }
            }
        }
        for ((m, c), (n, s1, s2)) in acc {
            let mean = s1 / n;
            let std = (s2 / n - mean * mean).sqrt();
            assert!(mean.abs() <= 0.05, "{}/{m}/{c}: mean {mean}", spec.name);
            assert!((std - 1.0).abs() <= 0.05, "{}/{m}/{c}: std {std}", spec.name);
        }
    }
}

#[test]
fn modalities_share_a_correlated_field() {
    let datasets = desk_datasets();
    let t = table(&datasets);
    let mut all = Vec::new();
    for spec in &datasets {
        let n = spec.modalities.len();
        for a in 0..n {
            for b in a + 1..n {
                let (ma, mb) = (&spec.modalities[a], &spec.modalities[b]);
                let (fine, coarse) = if ma.gsd <= mb.gsd { (a, b) } else { (b, a) };
                let mut pooled = Vec::new();
                let mut cells = 0;
                for i in 0..100 {
                    let s = standardize(&generate_sample(spec, derive_seed(77, i)).unwrap(), &t).unwrap();
                    let pairs = aligned(&s.modalities[fine], &s.modalities[coarse]);
                    cells = pairs.len();
                    pooled.extend(pairs);
                }
                if cells < 16 {
                    continue;
                }
                let r = pearson(&pooled);
                println!("{} {}~{}: r = {r:.3} over {cells} cells", spec.name, ma.name, mb.name);
                all.push(r);
            }
        }
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    println!("mean r = {mean:.3} over {} pairs", all.len());
    assert!(all.len() >= 5);
    assert!(mean > 0.5);
    assert!(all.iter().all(|&r| r > 0.2));
}

#[test]
fn sampling_strategy_frequencies() {
    let datasets = desk_datasets();
    let n = 50_000;
    let mut ds = vec![0usize; datasets.len()];
    let mut gsd: Vec<HashMap<u64, usize>> = vec![HashMap::new(); datasets.len()];
    let mut subsets: Vec<HashSet<Vec<usize>>> = vec![HashSet::new(); datasets.len()];
    for i in 0..n {
        let it = sample_iteration(&datasets, derive_seed(5, i)).unwrap();
        assert!(!it.modalities.is_empty());
        ds[it.dataset] += 1;
        *gsd[it.dataset].entry(it.gsd_target.to_bits()).or_default() += 1;
        subsets[it.dataset].insert(it.modalities.clone());
    }
    for (k, spec) in datasets.iter().enumerate() {
        let f = ds[k] as f64 / n as f64;
        assert!((f - 1.0 / datasets.len() as f64).abs() <= 0.02, "{} drawn with frequency {f}", spec.name);
        let grid = spec.gsd_range.grid();
        assert_eq!(gsd[k].len(), grid.len());
        for g in grid {
            let p = gsd[k][&g.to_bits()] as f64 / ds[k] as f64;
            assert!((p - 1.0 / spec.gsd_range.grid().len() as f64).abs() <= 0.01, "{} gsd {g}: {p}", spec.name);
        }
        assert_eq!(subsets[k].len(), (1 << spec.modalities.len()) - 1);
    }
}
