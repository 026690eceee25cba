// Raw row-major kernels shared by the graph ops. Slices only, no shape checks.

/// `out[r×c] += a[r×k] · b[k×c]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×k] += g[r×c] · b[k×c]ᵀ`
pub(crate) fn gemm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[p * c..(p + 1) * c];
            *o += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · g[r×c]`
pub(crate) fn gemm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * c..(i + 1) * c];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * c..(p + 1) * c];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Returns (output shape, output data) of `data` with axes reordered so that
/// output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // advance the multi-index over all axes except the last
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            index[axis] += 1;
            base += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
