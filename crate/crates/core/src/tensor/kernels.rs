// Row-major dense kernels. Loop orders are fixed so results are bit-reproducible.

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        // four rank-one updates per pass over the output row
        let mut b_quads = b.chunks_exact(4 * n);
        let mut a_quads = a_row.chunks_exact(4);
        for (aq, bq) in (&mut a_quads).zip(&mut b_quads) {
            let (b0, rest) = bq.split_at(n);
            let (b1, rest) = rest.split_at(n);
            let (b2, b3) = rest.split_at(n);
            quad_update(out_row, [aq[0], aq[1], aq[2], aq[3]], [b0, b1, b2, b3]);
        }
        let tail = k - a_quads.remainder().len();
        for (p, &av) in a_quads.remainder().iter().enumerate() {
            let b_row = &b[(tail + p) * n..(tail + p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`, used for the left-operand gradient of a product.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `a[m,k]ᵀ · b[m,n]`, used for the right-operand gradient of a product.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let quads = m / 4;
    // four input rows per pass over the output
    for q in 0..quads {
        let i = 4 * q;
        let a_rows = [
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        ];
        let (b0, b1, b2, b3) = (
            &b[i * n..(i + 1) * n],
            &b[(i + 1) * n..(i + 2) * n],
            &b[(i + 2) * n..(i + 3) * n],
            &b[(i + 3) * n..(i + 4) * n],
        );
        for p in 0..k {
            let (x0, x1, x2, x3) = (a_rows[0][p], a_rows[1][p], a_rows[2][p], a_rows[3][p]);
            quad_update(&mut out[p * n..(p + 1) * n], [x0, x1, x2, x3], [b0, b1, b2, b3]);
        }
    }
    for i in 4 * quads..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out += x0·r0 + x1·r1 + x2·r2 + x3·r3`, summed left to right.
#[inline]
fn quad_update(out: &mut [f64], x: [f64; 4], r: [&[f64]; 4]) {
    let [x0, x1, x2, x3] = x;
    let [r0, r1, r2, r3] = r;
    for ((((o, &a), &b), &c), &d) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
        *o += x0 * a + x1 * b + x2 * c + x3 * d;
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Dot product with four interleaved partial sums, combined as
/// `(s0 + s1) + (s2 + s3)` plus the tail.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
