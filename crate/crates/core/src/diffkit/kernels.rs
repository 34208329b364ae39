//! Forward and backward kernels for the dense layers. Batched inputs are
//! processed per sample; cross-sample reductions run in sample order so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::scalar::Scalar;

pub(crate) const K: usize = 3;
pub(crate) const K3: usize = K * K * K;

/// Spatial extent of a `[C, D, H, W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }
}

/// Lowers one `[cin, D, H, W]` sample to a `[cin*27, D*H*W]` patch matrix
/// for a 3³ kernel with zero padding 1.
fn im2col<T: Scalar>(x: &[T], cin: usize, s: Dims3, cols: &mut [T]) {
    let n = s.voxels();
    for ci in 0..cin {
        let src = &x[ci * n..(ci + 1) * n];
        for kz in 0..K {
            for ky in 0..K {
                for kx in 0..K {
                    let row = ((ci * K + kz) * K + ky) * K + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (s.w + 1 - kx).min(s.w));
                    for z in 0..s.d {
                        let sz = z as isize + kz as isize - 1;
                        for y in 0..s.h {
                            let sy = y as isize + ky as isize - 1;
                            let out_row = &mut dst[(z * s.h + y) * s.w..(z * s.h + y + 1) * s.w];
                            if sz < 0 || sz >= s.d as isize || sy < 0 || sy >= s.h as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let base = (sz as usize * s.h + sy as usize) * s.w;
                            out_row[..x_lo].fill(T::zero());
                            out_row[x_hi..].fill(T::zero());
                            let src_lo = base + x_lo + kx - 1;
                            out_row[x_lo..x_hi].copy_from_slice(&src[src_lo..src_lo + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto the sample.
fn col2im<T: Scalar>(cols: &[T], cin: usize, s: Dims3, gx: &mut [T]) {
    let n = s.voxels();
    for ci in 0..cin {
        let dst = &mut gx[ci * n..(ci + 1) * n];
        for kz in 0..K {
            for ky in 0..K {
                for kx in 0..K {
                    let row = ((ci * K + kz) * K + ky) * K + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (s.w + 1 - kx).min(s.w));
                    for z in 0..s.d {
                        let sz = z as isize + kz as isize - 1;
                        if sz < 0 || sz >= s.d as isize {
                            continue;
                        }
                        for y in 0..s.h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= s.h as isize {
                                continue;
                            }
                            let base = (sz as usize * s.h + sy as usize) * s.w;
                            let in_row = &src[(z * s.h + y) * s.w..(z * s.h + y + 1) * s.w];
                            for xx in x_lo..x_hi {
                                dst[base + xx + kx - 1] += in_row[xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3³ cross-correlation, `x: [N, cin, D, H, W]`,
/// `w: [cout, cin, 3, 3, 3]`, `b: [cout]`.
pub(crate) fn conv3d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    s: Dims3,
    w: &[T],
    b: &[T],
    cout: usize,
) -> Vec<T> {
    let vox = s.voxels();
    let rows = cin * K3;
    let mut out = vec![T::zero(); n * cout * vox];
    out.par_chunks_mut(cout * vox)
        .zip(x.par_chunks(cin * vox))
        .for_each_init(
            || vec![T::zero(); rows * vox],
            |cols, (o, xs)| {
                im2col(xs, cin, s, cols);
                for (co, chunk) in o.chunks_mut(vox).enumerate() {
                    chunk.fill(b[co]);
                }
                T::gemm(cout, rows, vox, T::one(), w, (rows, 1), cols, (vox, 1), T::one(), o, (vox, 1));
            },
        );
    out
}

pub(crate) struct ConvGrads<T> {
    pub gx: Option<Vec<T>>,
    pub gw: Vec<T>,
    pub gb: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    s: Dims3,
    w: &[T],
    cout: usize,
    gy: &[T],
    need_gx: bool,
) -> ConvGrads<T> {
    let vox = s.voxels();
    let rows = cin * K3;
    let mut gx = if need_gx { vec![T::zero(); n * cin * vox] } else { Vec::new() };

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); rows * vox], vec![T::zero(); rows * vox]),
            |(cols, gcols), i| {
                let xs = &x[i * cin * vox..(i + 1) * cin * vox];
                let g = &gy[i * cout * vox..(i + 1) * cout * vox];
                im2col(xs, cin, s, cols);
                let mut gw = vec![T::zero(); cout * rows];
                // gw = g · colsᵀ
                T::gemm(cout, vox, rows, T::one(), g, (vox, 1), cols, (1, vox), T::zero(), &mut gw, (rows, 1));
                let gb: Vec<T> = g.chunks(vox).map(|c| c.iter().copied().sum()).collect();
                if need_gx {
                    // gcols = wᵀ · g
                    T::gemm(rows, cout, vox, T::one(), w, (1, rows), g, (vox, 1), T::zero(), gcols, (vox, 1));
                }
                let mut gxs = Vec::new();
                if need_gx {
                    gxs = vec![T::zero(); cin * vox];
                    col2im(gcols, cin, s, &mut gxs);
                }
                ((gw, gb), gxs)
            },
        )
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, (wb, gxs))| {
            if need_gx {
                gx[i * cin * vox..(i + 1) * cin * vox].copy_from_slice(&gxs);
            }
            wb
        })
        .collect();

    let mut gw = vec![T::zero(); cout * rows];
    let mut gb = vec![T::zero(); cout];
    for (pw, pb) in &per_sample {
        for (a, &v) in gw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, &v) in gb.iter_mut().zip(pb) {
            *a += v;
        }
    }
    ConvGrads {
        gx: need_gx.then_some(gx),
        gw,
        gb,
    }
}

/// 2³ max pooling with stride 2 over `[N*C, D, H, W]` planes. Returns the
/// pooled values and, per output, the flat input index of the maximum
/// (first index wins ties).
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], planes: usize, s: Dims3) -> (Vec<T>, Vec<u32>) {
    let o = Dims3 {
        d: s.d / 2,
        h: s.h / 2,
        w: s.w / 2,
    };
    let ov = o.voxels();
    let mut out = vec![T::zero(); planes * ov];
    let mut arg = vec![0u32; planes * ov];
    out.par_chunks_mut(ov)
        .zip(arg.par_chunks_mut(ov))
        .enumerate()
        .for_each(|(p, (oc, ac))| {
            let base = p * s.voxels();
            for z in 0..o.d {
                for y in 0..o.h {
                    for xx in 0..o.w {
                        let mut bi = base + (2 * z * s.h + 2 * y) * s.w + 2 * xx;
                        let mut best = x[bi];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = base + ((2 * z + dz) * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
                                    let v = x[idx];
                                    if v > best {
                                        best = v;
                                        bi = idx;
                                    }
                                }
                            }
                        }
                        let oi = (z * o.h + y) * o.w + xx;
                        oc[oi] = best;
                        ac[oi] = bi as u32;
                    }
                }
            }
        });
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(gy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&g, &i) in gy.iter().zip(arg) {
        gx[i as usize] += g;
    }
    gx
}

/// Per-channel statistics cache of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

/// `x: [N, C, S]` flattened. In training mode normalizes with the biased
/// batch variance; otherwise with the supplied running statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, BnCache<T>) {
    let m = T::lit((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let train = running.is_none();
    match running {
        None => {
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += x[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
                }
                mean[ch] = acc / m;
                let mut acc = T::zero();
                for i in 0..n {
                    for &v in &x[(i * c + ch) * s..(i * c + ch + 1) * s] {
                        let d = v - mean[ch];
                        acc += d * d;
                    }
                }
                var[ch] = acc / m;
            }
        }
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for ((xh, yy), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *yy = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    )
}

/// Returns `(gx, ggamma, gbeta)`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    gy: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::lit((n * s) as f64);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for (&g, &xh) in gy[r.clone()].iter().zip(&cache.xhat[r]) {
                gb[ch] += g;
                gg[ch] += g * xh;
            }
        }
    }
    let mut gx = vec![T::zero(); gy.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            let k = gamma[ch] * cache.inv_std[ch];
            for ((o, &g), &xh) in gx[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&cache.xhat[r]) {
                *o = if cache.train {
                    k / m * (m * g - gb[ch] - xh * gg[ch])
                } else {
                    k * g
                };
            }
        }
    }
    (gx, gg, gb)
}

/// `y = x · wᵀ + b` with `x: [N, fin]`, `w: [fout, fin]`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], n: usize, fin: usize, w: &[T], b: &[T], fout: usize) -> Vec<T> {
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    T::gemm(n, fin, fout, T::one(), x, (fin, 1), w, (1, fin), T::one(), &mut y, (fout, 1));
    y
}

/// Returns `(gx, gw, gb)`.
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    n: usize,
    fin: usize,
    w: &[T],
    fout: usize,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * fin];
    T::gemm(n, fout, fin, T::one(), gy, (fout, 1), w, (fin, 1), T::zero(), &mut gx, (fin, 1));
    let mut gw = vec![T::zero(); fout * fin];
    T::gemm(fout, n, fin, T::one(), gy, (1, fout), x, (fin, 1), T::zero(), &mut gw, (fin, 1));
    let mut gb = vec![T::zero(); fout];
    for row in gy.chunks(fout) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a += g;
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-loop reference convolution for one sample.
    fn conv_reference(x: &[f64], cin: usize, s: Dims3, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * s.voxels()];
        for co in 0..cout {
            for z in 0..s.d as isize {
                for y in 0..s.h as isize {
                    for xx in 0..s.w as isize {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in -1..=1isize {
                                for ky in -1..=1isize {
                                    for kx in -1..=1isize {
                                        let (zz, yy, xq) = (z + kz, y + ky, xx + kx);
                                        if zz < 0
                                            || yy < 0
                                            || xq < 0
                                            || zz >= s.d as isize
                                            || yy >= s.h as isize
                                            || xq >= s.w as isize
                                        {
                                            continue;
                                        }
                                        let wi = (((co * cin + ci) * 3 + (kz + 1) as usize) * 3 + (ky + 1) as usize) * 3
                                            + (kx + 1) as usize;
                                        let xi = ((ci * s.d + zz as usize) * s.h + yy as usize) * s.w + xq as usize;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[((co * s.d + z as usize) * s.h + y as usize) * s.w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Dims3 { d: 4, h: 5, w: 6 };
        let (cin, cout, n) = (2, 3, 2);
        let x: Vec<f64> = (0..n * cin * s.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..cout * cin * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv3d_forward(&x, n, cin, s, &w, &b, cout);
        for i in 0..n {
            let r = conv_reference(&x[i * cin * s.voxels()..(i + 1) * cin * s.voxels()], cin, s, &w, &b, cout);
            for (a, e) in y[i * cout * s.voxels()..(i + 1) * cout * s.voxels()].iter().zip(&r) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_and_box_kernels() {
        let s = Dims3 { d: 4, h: 4, w: 4 };
        let x: Vec<f64> = (0..64).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        assert_eq!(conv3d_forward(&x, 1, 1, s, &w, &[0.0], 1), x);
        let c = vec![2.5; 64];
        let y = conv3d_forward(&c, 1, 1, s, &[1.0; 27], &[0.0], 1);
        assert_eq!(y[(16 + 4 + 1) as usize], 27.0 * 2.5);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Dims3 { d: 3, h: 4, w: 5 };
        let cin = 2;
        let x: Vec<f64> = (0..cin * s.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..cin * 27 * s.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, cin, s, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, cin, s, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_matches_blockwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Dims3 { d: 8, h: 8, w: 8 };
        let x: Vec<f64> = (0..2 * 512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, _) = maxpool_forward(&x, 2, s);
        for p in 0..2 {
            for z in 0..4 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let mut m = f64::NEG_INFINITY;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    m = m.max(x[p * 512 + ((2 * z + dz) * 8 + 2 * yy + dy) * 8 + 2 * xx + dx]);
                                }
                            }
                        }
                        assert_eq!(y[p * 64 + (z * 4 + yy) * 4 + xx], m);
                    }
                }
            }
        }
        let (c, arg) = maxpool_forward(&vec![1.5; 64], 1, Dims3 { d: 4, h: 4, w: 4 });
        assert!(c.iter().all(|&v| v == 1.5));
        // first-index tie-break
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn batchnorm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, c, s) = (3, 2, 10);
        let x: Vec<f64> = (0..n * c * s).map(|_| rng.random_range(-4.0..9.0)).collect();
        let (y, _) = batchnorm_forward(&x, n, c, s, &[1.0, 1.0], &[0.0, 0.0], None, 1e-5);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y[(i * c + ch) * s..(i * c + ch + 1) * s].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        let (y2, _) = batchnorm_forward(&x, n, c, s, &[2.0, 2.0], &[3.0, 3.0], None, 1e-5);
        for (a, b) in y2.iter().zip(&y) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-12);
        }
        let (ye, _) = batchnorm_forward(&x, n, c, s, &[1.5, 0.5], &[0.1, -0.2], Some((&[0.3, -1.0], &[2.0, 0.5])), 1e-5);
        let expect = (x[0] - 0.3) / (2.0f64 + 1e-5).sqrt() * 1.5 + 0.1;
        assert!((ye[0] - expect).abs() < 1e-12);
        let expect = (x[s] - (-1.0)) / (0.5f64 + 1e-5).sqrt() * 0.5 - 0.2;
        assert!((ye[s] - expect).abs() < 1e-12);
    }

    #[test]
    fn dense_matches_loops() {
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let w = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let b = [0.01, -0.02];
        let y = dense_forward(&x, 2, 3, &w, &b, 2);
        for i in 0..2 {
            for o in 0..2 {
                let e: f64 = (0..3).map(|k| x[i * 3 + k] * w[o * 3 + k]).sum::<f64>() + b[o];
                assert!((y[i * 2 + o] - e).abs() < 1e-12);
            }
        }
    }
}
