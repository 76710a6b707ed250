//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Each follows the textbook definition directly and
//! shares no code with the library beyond its data types.

#![allow(dead_code)]

use livecheck_core::convnet::FeatureTensor;
use livecheck_core::Image;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..w * h).map(|_| rng.random::<f64>()).collect();
    Image::new(w, h, data).unwrap()
}

/// Random image drawn from a few gray levels, so ties between neighbors
/// are frequent.
pub fn random_quantized_image(w: usize, h: usize, levels: u32, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..w * h)
        .map(|_| rng.random_range(0..levels) as f64 / (levels - 1) as f64)
        .collect();
    Image::new(w, h, data).unwrap()
}

pub fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureTensor {
    let data = (0..c * h * w)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    FeatureTensor::new(c, h, w, data).unwrap()
}

// ---------------------------------------------------------------- LBP

/// Code of the pixel at (x, y): bit 7 is the top-left neighbor, then
/// clockwise; a bit is set when the neighbor is at least the center.
pub fn naive_code(img: &Image, x: usize, y: usize) -> u8 {
    let c = img.get(x, y);
    let ring = [
        img.get(x - 1, y - 1),
        img.get(x, y - 1),
        img.get(x + 1, y - 1),
        img.get(x + 1, y),
        img.get(x + 1, y + 1),
        img.get(x, y + 1),
        img.get(x - 1, y + 1),
        img.get(x - 1, y),
    ];
    let mut code = 0u32;
    for (i, v) in ring.iter().enumerate() {
        if *v >= c {
            code += 1 << (7 - i);
        }
    }
    code as u8
}

pub fn naive_lbp_map(img: &Image) -> Vec<Vec<u8>> {
    (1..img.height() - 1)
        .map(|y| {
            (1..img.width() - 1)
                .map(|x| naive_code(img, x, y))
                .collect()
        })
        .collect()
}

pub fn naive_uniform_label(code: u8) -> usize {
    let bits: Vec<u8> = (0..8).map(|i| (code >> (7 - i)) & 1).collect();
    let transitions = (0..8).filter(|&i| bits[i] != bits[(i + 1) % 8]).count();
    if transitions <= 2 {
        bits.iter().map(|&b| b as usize).sum()
    } else {
        9
    }
}

/// Block of coordinate `i` in `n` cells split `parts` ways: equal floor
/// sized blocks with the remainder absorbed by the last.
fn block_of(i: usize, n: usize, parts: usize) -> usize {
    (i / (n / parts)).min(parts - 1)
}

pub fn naive_lbp_features(img: &Image, uniform: bool, blocks: (usize, usize)) -> Vec<f64> {
    let map = naive_lbp_map(img);
    let (h, w) = (map.len(), map[0].len());
    let bins = if uniform { 10 } else { 256 };
    let mut out = Vec::new();
    for br in 0..blocks.0 {
        for bc in 0..blocks.1 {
            let mut counts = vec![0usize; bins];
            let mut total = 0usize;
            for (y, row) in map.iter().enumerate() {
                for (x, &code) in row.iter().enumerate() {
                    if block_of(y, h, blocks.0) == br && block_of(x, w, blocks.1) == bc {
                        total += 1;
                        let bin = if uniform {
                            naive_uniform_label(code)
                        } else {
                            code as usize
                        };
                        counts[bin] += 1;
                    }
                }
            }
            out.extend(counts.iter().map(|&c| c as f64 / total as f64));
        }
    }
    out
}

// ---------------------------------------------------------------- convnet

/// Valid correlation; `weights[f][c][ky][kx]` flattened.
pub fn naive_conv(x: &FeatureTensor, weights: &[f64], filters: usize, k: usize) -> FeatureTensor {
    let (oh, ow) = (x.height - k + 1, x.width - k + 1);
    let mut data = Vec::with_capacity(filters * oh * ow);
    for f in 0..filters {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for c in 0..x.channels {
                    for p in 0..k {
                        for q in 0..k {
                            s += weights[((f * x.channels + c) * k + p) * k + q]
                                * x.at(c, i + p, j + q);
                        }
                    }
                }
                data.push(s);
            }
        }
    }
    FeatureTensor::new(filters, oh, ow, data).unwrap()
}

/// Windows start every `stride` cells, inside the map, until one reaches
/// the last cell; windows overhanging the edge keep their in-bounds part.
pub fn naive_pool(x: &FeatureTensor, pool: usize, stride: usize) -> FeatureTensor {
    let starts = |n: usize| {
        let mut s = vec![0];
        while s.last().unwrap() + pool < n && s.last().unwrap() + stride < n {
            s.push(s.last().unwrap() + stride);
        }
        s
    };
    let (ys, xs) = (starts(x.height), starts(x.width));
    let mut data = Vec::new();
    for c in 0..x.channels {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut m = f64::NEG_INFINITY;
                for y in y0..(y0 + pool).min(x.height) {
                    for xx in x0..(x0 + pool).min(x.width) {
                        m = m.max(x.at(c, y, xx));
                    }
                }
                data.push(m);
            }
        }
    }
    FeatureTensor::new(x.channels, ys.len(), xs.len(), data).unwrap()
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Gaussian window of side `size` with σ = size / 6, normalized so the
/// weights replicated over `channels` sum to one.
pub fn lcn_weights(size: usize, channels: usize) -> Vec<Vec<f64>> {
    let sigma = size as f64 / 6.0;
    let r = (size / 2) as f64;
    let raw: Vec<Vec<f64>> = (0..size)
        .map(|p| {
            (0..size)
                .map(|q| {
                    let (dy, dx) = (p as f64 - r, q as f64 - r);
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect();
    let total: f64 = raw.iter().flatten().sum::<f64>() * channels as f64;
    raw.into_iter()
        .map(|row| row.into_iter().map(|v| v / total).collect())
        .collect()
}

/// Direct-summation local contrast normalization with mirrored borders.
pub fn naive_lcn(x: &FeatureTensor, size: usize) -> FeatureTensor {
    let w = lcn_weights(size, x.channels);
    let r = (size / 2) as isize;
    let local = |t: &FeatureTensor, i: usize, j: usize, f: &dyn Fn(f64) -> f64| {
        let mut s = 0.0;
        for c in 0..t.channels {
            for p in 0..size {
                for q in 0..size {
                    let yy = mirror(i as isize + p as isize - r, t.height);
                    let xx = mirror(j as isize + q as isize - r, t.width);
                    s += w[p][q] * f(t.at(c, yy, xx));
                }
            }
        }
        s
    };
    let mut v = x.clone();
    for c in 0..x.channels {
        for i in 0..x.height {
            for j in 0..x.width {
                v.data[(c * x.height + i) * x.width + j] = x.at(c, i, j) - local(x, i, j, &|a| a);
            }
        }
    }
    let mut y = v.clone();
    for i in 0..x.height {
        for j in 0..x.width {
            let sigma = local(&v, i, j, &|a| a * a).sqrt();
            let d = sigma.max(1.0);
            for c in 0..x.channels {
                y.data[(c * x.height + i) * x.width + j] = v.at(c, i, j) / d;
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- PCA

/// `n × d` matrix with a clear gap after the leading `k` directions.
pub fn gapped_matrix(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let gauss = |rng: &mut ChaCha8Rng| {
        // Box-Muller
        let u: f64 = rng.random::<f64>().max(1e-300);
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let basis = DMatrix::from_fn(d, d, |_, _| gauss(rng)).qr().q();
    let scales: Vec<f64> = (0..d)
        .map(|i| if i < k { 10.0 - i as f64 } else { 0.05 })
        .collect();
    let offset: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| s * gauss(rng)).collect();
            (0..d)
                .map(|j| offset[j] + (0..d).map(|i| z[i] * basis[(j, i)]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn centered(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j])
}

/// Leading `k` right singular vectors (as rows) and the matching sample
/// variances, from a full SVD.
pub fn exact_pca(rows: &[Vec<f64>], k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let x = centered(rows);
    let n = x.nrows();
    let svd = x.svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let comps = DMatrix::from_fn(k, vt.ncols(), |i, j| vt[(order[i], j)]);
    let vars = order[..k]
        .iter()
        .map(|&i| svd.singular_values[i].powi(2) / (n - 1) as f64)
        .collect();
    (comps, vars)
}

/// Sine of the largest principal angle between the row spaces of two
/// matrices with orthonormal rows.
pub fn max_principal_sine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let residual = a - (a * b.transpose()) * b;
    residual.singular_values().max()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; returns
/// eigenvalues in descending order with eigenvectors as rows.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(c, order[r])]);
    (values, vectors)
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

// ---------------------------------------------------------------- SVM

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-gamma * d2).exp()
}

/// `f(x) = Σ α_i y_i k(x_i, x) + b` over every training point.
pub fn kernel_expansion(
    x: &[Vec<f64>],
    y: &[f64],
    alphas: &[f64],
    bias: f64,
    gamma: f64,
    probe: &[f64],
) -> f64 {
    x.iter()
        .zip(y)
        .zip(alphas)
        .map(|((xi, yi), a)| a * yi * rbf(xi, probe, gamma))
        .sum::<f64>()
        + bias
}

/// Largest violation of the soft-margin KKT conditions.
pub fn kkt_violation(
    x: &[Vec<f64>],
    y: &[f64],
    alphas: &[f64],
    bias: f64,
    c: f64,
    gamma: f64,
) -> f64 {
    let eps = 1e-8 * c;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let m = y[i] * kernel_expansion(x, y, alphas, bias, gamma, &x[i]);
        let v = if alphas[i] <= eps {
            (1.0 - m).max(0.0)
        } else if alphas[i] >= c - eps {
            (m - 1.0).max(0.0)
        } else {
            (m - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Four Gaussian clusters at (±1, ±1) labeled by the sign of `x·y`.
pub fn xor_fixture(per_cluster: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &(cx, cy) in &[(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
        for _ in 0..per_cluster {
            x.push(vec![
                cx + 0.3 * (rng.random::<f64>() - 0.5),
                cy + 0.3 * (rng.random::<f64>() - 0.5),
            ]);
            y.push(if cx * cy > 0.0 { 1.0 } else { -1.0 });
        }
    }
    (x, y)
}

/// Two well-separated blobs in 3-D.
pub fn blob_fixture(per_class: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (label, center) in [(1.0, 2.0), (-1.0, -2.0)] {
        for _ in 0..per_class {
            x.push((0..3).map(|_| center + rng.random::<f64>() - 0.5).collect());
            y.push(label);
        }
    }
    (x, y)
}
