//! Slice-level forward and backward kernels for the temporal primitives.
//! Layout is always `[batch, channels, time]`, row-major.

use crate::tensor::Scalar;

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvGeom {
    /// Output positions `t` whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize) -> (usize, usize, isize) {
        let offset = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        let t0 = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
        let last = self.in_len as isize - 1 - offset;
        let t1 = if last < 0 { 0 } else { last / s + 1 };
        let t1 = t1.min(self.out_len as isize);
        let t0 = t0.min(t1);
        (t0 as usize, t1 as usize, offset)
    }

    fn cin_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.out_channels / self.groups
    }
}

pub fn conv_out_len(in_len: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = in_len + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

pub fn conv1d_forward<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], y: &mut [F]) {
    if g.groups == 1 {
        conv1d_forward_gemm(g, x, w, y)
    } else {
        conv1d_forward_direct(g, x, w, y)
    }
}

fn conv1d_forward_gemm<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], y: &mut [F]) {
    let (cin, cout, k_len, l, lo) = (g.in_channels, g.out_channels, g.kernel, g.in_len, g.out_len);
    assert_eq!(x.len(), g.batch * cin * l);
    assert_eq!(w.len(), cout * cin * k_len);
    assert_eq!(y.len(), g.batch * cout * lo);
    for b in 0..g.batch {
        for k in 0..k_len {
            let (t0, t1, offset) = g.valid_range(k);
            if t1 <= t0 {
                continue;
            }
            let x_start = b * cin * l + (t0 as isize * g.stride as isize + offset) as usize;
            let y_start = b * cout * lo + t0;
            // SAFETY: the A view spans w[co*cin*K + ci*K + k], the B view spans
            // x[b, ci, t*s + offset] for t in [t0, t1) which valid_range keeps in
            // bounds, and the C view spans y[b, co, t0..t1]. y is disjoint from x, w.
            unsafe {
                F::gemm(
                    cout,
                    cin,
                    t1 - t0,
                    F::one(),
                    w.as_ptr().add(k),
                    (cin * k_len) as isize,
                    k_len as isize,
                    x.as_ptr().add(x_start),
                    l as isize,
                    g.stride as isize,
                    F::one(),
                    y.as_mut_ptr().add(y_start),
                    lo as isize,
                    1,
                );
            }
        }
    }
}

fn conv1d_forward_direct<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], y: &mut [F]) {
    let (cin, cout, l, lo) = (g.in_channels, g.out_channels, g.in_len, g.out_len);
    let (cpg_in, cpg_out) = (g.cin_per_group(), g.cout_per_group());
    for b in 0..g.batch {
        for co in 0..cout {
            let grp = co / cpg_out;
            let yrow = &mut y[(b * cout + co) * lo..(b * cout + co + 1) * lo];
            for cil in 0..cpg_in {
                let ci = grp * cpg_in + cil;
                let xrow = &x[(b * cin + ci) * l..(b * cin + ci + 1) * l];
                for k in 0..g.kernel {
                    let wv = w[(co * cpg_in + cil) * g.kernel + k];
                    let (t0, t1, offset) = g.valid_range(k);
                    for t in t0..t1 {
                        let src = (t as isize * g.stride as isize + offset) as usize;
                        yrow[t] += wv * xrow[src];
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients. Either output may be skipped.
pub fn conv1d_backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    if g.groups == 1 {
        conv1d_backward_gemm(g, x, w, dy, dx, dw)
    } else {
        conv1d_backward_direct(g, x, w, dy, dx, dw)
    }
}

fn conv1d_backward_gemm<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    let (cin, cout, k_len, l, lo) = (g.in_channels, g.out_channels, g.kernel, g.in_len, g.out_len);
    for b in 0..g.batch {
        for k in 0..k_len {
            let (t0, t1, offset) = g.valid_range(k);
            if t1 <= t0 {
                continue;
            }
            let nt = t1 - t0;
            let x_start = b * cin * l + (t0 as isize * g.stride as isize + offset) as usize;
            let dy_start = b * cout * lo + t0;
            if let Some(dx) = dx.as_deref_mut() {
                // SAFETY: dx view mirrors the forward x view; w^T and dy views are
                // in bounds by the same argument as the forward pass.
                unsafe {
                    F::gemm(
                        cin,
                        cout,
                        nt,
                        F::one(),
                        w.as_ptr().add(k),
                        k_len as isize,
                        (cin * k_len) as isize,
                        dy.as_ptr().add(dy_start),
                        lo as isize,
                        1,
                        F::one(),
                        dx.as_mut_ptr().add(x_start),
                        l as isize,
                        g.stride as isize,
                    );
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                // SAFETY: dw view is w's tap-k slice; dy and x views as above.
                unsafe {
                    F::gemm(
                        cout,
                        nt,
                        cin,
                        F::one(),
                        dy.as_ptr().add(dy_start),
                        lo as isize,
                        1,
                        x.as_ptr().add(x_start),
                        g.stride as isize,
                        l as isize,
                        F::one(),
                        dw.as_mut_ptr().add(k),
                        (cin * k_len) as isize,
                        k_len as isize,
                    );
                }
            }
        }
    }
}

fn conv1d_backward_direct<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    let (cin, cout, l, lo) = (g.in_channels, g.out_channels, g.in_len, g.out_len);
    let (cpg_in, cpg_out) = (g.cin_per_group(), g.cout_per_group());
    for b in 0..g.batch {
        for co in 0..cout {
            let grp = co / cpg_out;
            let dyrow = &dy[(b * cout + co) * lo..(b * cout + co + 1) * lo];
            for cil in 0..cpg_in {
                let ci = grp * cpg_in + cil;
                let xoff = (b * cin + ci) * l;
                for k in 0..g.kernel {
                    let widx = (co * cpg_in + cil) * g.kernel + k;
                    let (t0, t1, offset) = g.valid_range(k);
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        for t in t0..t1 {
                            let src = (t as isize * g.stride as isize + offset) as usize;
                            dx[xoff + src] += wv * dyrow[t];
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = F::zero();
                        for t in t0..t1 {
                            let src = (t as isize * g.stride as isize + offset) as usize;
                            acc += x[xoff + src] * dyrow[t];
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Geometry of a 1-D pooling window with symmetric padding excluded from the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub rows: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl PoolGeom {
    fn window(&self, t: usize) -> (usize, usize) {
        let start = (t * self.stride) as isize - self.padding as isize;
        let end = (start + self.kernel as isize).min(self.in_len as isize);
        (start.max(0) as usize, end.max(0) as usize)
    }
}

/// Max pooling; returns the flat argmax index for every output element.
pub fn max_pool_forward<F: Scalar>(g: &PoolGeom, x: &[F], y: &mut [F]) -> Vec<usize> {
    let mut argmax = vec![0usize; y.len()];
    for r in 0..g.rows {
        let xrow = r * g.in_len;
        for t in 0..g.out_len {
            let (s, e) = g.window(t);
            let mut best = s;
            for i in s + 1..e {
                if x[xrow + i] > x[xrow + best] {
                    best = i;
                }
            }
            y[r * g.out_len + t] = x[xrow + best];
            argmax[r * g.out_len + t] = xrow + best;
        }
    }
    argmax
}

/// Average pooling that counts only in-range taps.
pub fn avg_pool_forward<F: Scalar>(g: &PoolGeom, x: &[F], y: &mut [F]) {
    for r in 0..g.rows {
        let xrow = &x[r * g.in_len..(r + 1) * g.in_len];
        for t in 0..g.out_len {
            let (s, e) = g.window(t);
            let sum: F = xrow[s..e].iter().copied().sum();
            y[r * g.out_len + t] = sum / F::lit((e - s) as f64);
        }
    }
}

pub fn avg_pool_backward<F: Scalar>(g: &PoolGeom, dy: &[F], dx: &mut [F]) {
    for r in 0..g.rows {
        for t in 0..g.out_len {
            let (s, e) = g.window(t);
            let share = dy[r * g.out_len + t] / F::lit((e - s) as f64);
            for v in &mut dx[r * g.in_len + s..r * g.in_len + e] {
                *v += share;
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and time.
pub fn channel_stats<F: Scalar>(x: &[F], batch: usize, channels: usize, len: usize) -> (Vec<F>, Vec<F>) {
    let n = F::lit((batch * len) as f64);
    let mut mean = vec![F::zero(); channels];
    let mut var = vec![F::zero(); channels];
    for c in 0..channels {
        let mut s = F::zero();
        for b in 0..batch {
            s += x[(b * channels + c) * len..(b * channels + c + 1) * len].iter().copied().sum::<F>();
        }
        let m = s / n;
        let mut q = F::zero();
        for b in 0..batch {
            for &v in &x[(b * channels + c) * len..(b * channels + c + 1) * len] {
                let d = v - m;
                q += d * d;
            }
        }
        mean[c] = m;
        var[c] = q / n;
    }
    (mean, var)
}
