//! Dense NHWC kernels used by the network: 3x3 same-padded convolution
//! (im2col and shifted-product forms), 2x2 max pooling and global average
//! pooling.

use super::scalar::{gemm, Scalar};

/// Unfolds `x` (`n x s x s x c`) into rows of `9c` taps ordered `(ky, kx, c)`.
pub fn im2col<T: Scalar>(x: &[T], n: usize, s: usize, c: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n * s * s * c);
    let xp = pad1(x, n, s, c);
    let p = s + 2;
    let run = 3 * c;
    let mut col = vec![T::zero(); n * s * s * 9 * c];
    // For fixed `ky` the three `kx` taps are contiguous in the padded input.
    for (r, row) in col.chunks_exact_mut(9 * c).enumerate() {
        let (b, y, xx) = (r / (s * s), (r / s) % s, r % s);
        for ky in 0..3 {
            let src = ((b * p + y + ky) * p + xx) * c;
            row[ky * run..(ky + 1) * run].copy_from_slice(&xp[src..src + run]);
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters tap gradients back onto the input grid.
pub fn col2im<T: Scalar>(col: &[T], n: usize, s: usize, c: usize) -> Vec<T> {
    debug_assert_eq!(col.len(), n * s * s * 9 * c);
    let p = s + 2;
    let run = 3 * c;
    let mut xp = vec![T::zero(); n * p * p * c];
    for (r, row) in col.chunks_exact(9 * c).enumerate() {
        let (b, y, xx) = (r / (s * s), (r / s) % s, r % s);
        for ky in 0..3 {
            let dst = ((b * p + y + ky) * p + xx) * c;
            for (d, &g) in xp[dst..dst + run]
                .iter_mut()
                .zip(&row[ky * run..(ky + 1) * run])
            {
                *d += g;
            }
        }
    }
    unpad1(&xp, n, s, c)
}

/// Zero-pads each `s x s` image by one pixel on every side.
pub fn pad1<T: Scalar>(x: &[T], n: usize, s: usize, c: usize) -> Vec<T> {
    let p = s + 2;
    let mut out = vec![T::zero(); n * p * p * c];
    for b in 0..n {
        for y in 0..s {
            let src = (b * s + y) * s * c;
            let dst = ((b * p + y + 1) * p + 1) * c;
            out[dst..dst + s * c].copy_from_slice(&x[src..src + s * c]);
        }
    }
    out
}

/// Inverse of [`pad1`]: keeps the interior of each padded image.
pub fn unpad1<T: Scalar>(xp: &[T], n: usize, s: usize, c: usize) -> Vec<T> {
    let p = s + 2;
    let mut out = vec![T::zero(); n * s * s * c];
    for b in 0..n {
        for y in 0..s {
            let dst = (b * s + y) * s * c;
            let src = ((b * p + y + 1) * p + 1) * c;
            out[dst..dst + s * c].copy_from_slice(&xp[src..src + s * c]);
        }
    }
    out
}

/// Geometry of the shifted-product convolution on the padded grid.
///
/// Output row `q` of the padded grid receives `xpad[q + delta_t] W_t`
/// summed over the nine taps, which is the same-padded convolution at
/// interior rows. Rows `margin..margin + rows` are computed so every
/// shifted slice stays in bounds; border rows are discarded.
struct Shifted {
    margin: usize,
    rows: usize,
    offsets: [usize; 9],
}

impl Shifted {
    fn new(n: usize, s: usize) -> Self {
        let p = s + 2;
        let total = n * p * p;
        let margin = p + 1;
        let mut offsets = [0; 9];
        for (t, o) in offsets.iter_mut().enumerate() {
            *o = (t / 3) * p + t % 3;
        }
        Shifted {
            margin,
            rows: total - 2 * margin,
            offsets,
        }
    }
}

/// 3x3 same convolution of a padded input; returns the padded output grid
/// (border rows hold garbage and must be discarded by [`unpad1`]).
pub fn conv3x3_padded<T: Scalar>(
    xpad: &[T],
    n: usize,
    s: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
) -> Vec<T> {
    let g = Shifted::new(n, s);
    let mut out = vec![T::zero(); (g.rows + 2 * g.margin) * cout];
    for (t, &o) in g.offsets.iter().enumerate() {
        gemm(
            g.rows,
            cin,
            cout,
            &xpad[o * cin..(o + g.rows) * cin],
            false,
            &weight[t * cin * cout..(t + 1) * cin * cout],
            false,
            &mut out[g.margin * cout..(g.margin + g.rows) * cout],
            true,
        );
    }
    out
}

/// Accumulates the weight gradient given a padded output gradient whose
/// border rows are zero.
pub fn conv3x3_padded_weight_grad<T: Scalar>(
    xpad: &[T],
    dpad: &[T],
    n: usize,
    s: usize,
    cin: usize,
    cout: usize,
    dweight: &mut [T],
) {
    let g = Shifted::new(n, s);
    for (t, &o) in g.offsets.iter().enumerate() {
        gemm(
            cin,
            g.rows,
            cout,
            &xpad[o * cin..(o + g.rows) * cin],
            true,
            &dpad[g.margin * cout..(g.margin + g.rows) * cout],
            false,
            &mut dweight[t * cin * cout..(t + 1) * cin * cout],
            true,
        );
    }
}

/// Padded input gradient from a padded output gradient with zero borders.
pub fn conv3x3_padded_input_grad<T: Scalar>(
    dpad: &[T],
    n: usize,
    s: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
) -> Vec<T> {
    let g = Shifted::new(n, s);
    let mut dx = vec![T::zero(); (g.rows + 2 * g.margin) * cin];
    for (t, &o) in g.offsets.iter().enumerate() {
        gemm(
            g.rows,
            cout,
            cin,
            &dpad[g.margin * cout..(g.margin + g.rows) * cout],
            false,
            &weight[t * cin * cout..(t + 1) * cin * cout],
            true,
            &mut dx[o * cin..(o + g.rows) * cin],
            true,
        );
    }
    dx
}

/// 2x2 stride-2 max pool. Returns the output and, per output element, the
/// flat input index that won (first maximum on ties).
pub fn maxpool2<T: Scalar>(x: &[T], n: usize, s: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let h = s / 2;
    let mut out = vec![T::zero(); n * h * h * c];
    let mut arg = vec![0u32; out.len()];
    for (o, (cell, cell_arg)) in out
        .chunks_exact_mut(c)
        .zip(arg.chunks_exact_mut(c))
        .enumerate()
    {
        let (b, y, xx) = (o / (h * h), (o / h) % h, o % h);
        let top = ((b * s + 2 * y) * s + 2 * xx) * c;
        let taps = [top, top + c, top + s * c, top + s * c + c];
        cell.copy_from_slice(&x[taps[0]..taps[0] + c]);
        for (ch, a) in cell_arg.iter_mut().enumerate() {
            *a = (taps[0] + ch) as u32;
        }
        for &t in &taps[1..] {
            for (ch, (best, a)) in cell.iter_mut().zip(cell_arg.iter_mut()).enumerate() {
                let v = x[t + ch];
                if v > *best {
                    *best = v;
                    *a = (t + ch) as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(grad: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

/// Mean over the spatial grid: `n x s x s x c` to `n x c`.
pub fn global_avg_pool<T: Scalar>(x: &[T], n: usize, s: usize, c: usize) -> Vec<T> {
    let area = s * s;
    let scale = T::one() / T::of(area as f64);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for cell in x[b * area * c..(b + 1) * area * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &[T], n: usize, s: usize, c: usize) -> Vec<T> {
    let area = s * s;
    let scale = T::one() / T::of(area as f64);
    let mut dx = vec![T::zero(); n * area * c];
    for b in 0..n {
        let g = &grad[b * c..(b + 1) * c];
        for cell in dx[b * area * c..(b + 1) * area * c].chunks_exact_mut(c) {
            for (d, &v) in cell.iter_mut().zip(g) {
                *d = v * scale;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> = <x, col2im(y)> for arbitrary x, y.
        let (n, s, c) = (2, 5, 3);
        let x: Vec<f64> = (0..n * s * s * c).map(|i| (i as f64 * 0.7).sin()).collect();
        let col = im2col(&x, n, s, c);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, n, s, c);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_centre_tap_is_identity() {
        let (n, s, c) = (1, 4, 2);
        let x: Vec<f64> = (0..n * s * s * c).map(|i| i as f64).collect();
        let col = im2col(&x, n, s, c);
        for p in 0..s * s {
            assert_eq!(&col[p * 18 + 8..p * 18 + 10], &x[p * 2..p * 2 + 2]);
        }
        // Top-left pixel has no upper-left neighbour.
        assert!(col[..2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = vec![1.0f64, 5.0, 3.0, 2.0];
        let (out, arg) = maxpool2(&x, 1, 2, 1);
        assert_eq!(out, vec![5.0]);
        assert_eq!(maxpool2_backward(&[2.0], &arg, 4), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_round_trip() {
        let x: Vec<f64> = (0..2 * 4 * 3).map(|i| i as f64).collect();
        let g = global_avg_pool(&x, 2, 2, 3);
        assert_eq!(g[..3], [4.5, 5.5, 6.5]);
        let d = global_avg_pool_backward(&[4.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 2, 3);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn shifted_convolution_matches_im2col() {
        let (n, s, cin, cout) = (2, 5, 3, 4);
        let x: Vec<f64> = (0..n * s * s * cin)
            .map(|i| (i as f64 * 0.7).sin())
            .collect();
        let w: Vec<f64> = (0..9 * cin * cout)
            .map(|i| (i as f64 * 0.13).cos())
            .collect();
        let col = im2col(&x, n, s, cin);
        let mut want = vec![0.0; n * s * s * cout];
        gemm(
            n * s * s,
            9 * cin,
            cout,
            &col,
            false,
            &w,
            false,
            &mut want,
            false,
        );
        let xp = pad1(&x, n, s, cin);
        let got = unpad1(&conv3x3_padded(&xp, n, s, cin, &w, cout), n, s, cout);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        let dy: Vec<f64> = (0..want.len()).map(|i| (i as f64 * 0.29).sin()).collect();
        let mut dw_want = vec![0.0; w.len()];
        gemm(
            9 * cin,
            n * s * s,
            cout,
            &col,
            true,
            &dy,
            false,
            &mut dw_want,
            false,
        );
        let mut dcol = vec![0.0; col.len()];
        gemm(
            n * s * s,
            cout,
            9 * cin,
            &dy,
            false,
            &w,
            true,
            &mut dcol,
            false,
        );
        let dx_want = col2im(&dcol, n, s, cin);

        let dpad = pad1(&dy, n, s, cout);
        let mut dw = vec![0.0; w.len()];
        conv3x3_padded_weight_grad(&xp, &dpad, n, s, cin, cout, &mut dw);
        let dx = unpad1(
            &conv3x3_padded_input_grad(&dpad, n, s, cin, &w, cout),
            n,
            s,
            cin,
        );
        for (a, b) in dw.iter().zip(&dw_want) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in dx.iter().zip(&dx_want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
