//! Hand-differentiated layer kernels on flat channel-major buffers.
//!
//! 1D tensors are `[channels][len]`, 2D tensors `[channels][rows][cols]`.
//! Convolutions use zero "same" padding with odd kernels. Backward kernels
//! accumulate (`+=`) into their gradient outputs.

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel
    }

    pub fn forward(&self, x: &[f64], len: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cin * len);
        let pad = (self.kernel / 2) as isize;
        let mut y = vec![0.0; self.cout * len];
        for o in 0..self.cout {
            let yo = &mut y[o * len..(o + 1) * len];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..self.cin {
                let xi = &x[i * len..(i + 1) * len];
                let wk = &w[(o * self.cin + i) * self.kernel..(o * self.cin + i + 1) * self.kernel];
                for (t, out) in yo.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (k, &wv) in wk.iter().enumerate() {
                        let src = t as isize + k as isize - pad;
                        if src >= 0 && (src as usize) < len {
                            acc += wv * xi[src as usize];
                        }
                    }
                    *out += acc;
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        len: usize,
        w: &[f64],
        dy: &[f64],
        dx: Option<&mut [f64]>,
        dw: &mut [f64],
        db: &mut [f64],
    ) {
        let pad = (self.kernel / 2) as isize;
        for o in 0..self.cout {
            let dyo = &dy[o * len..(o + 1) * len];
            db[o] += dyo.iter().sum::<f64>();
            for i in 0..self.cin {
                let xi = &x[i * len..(i + 1) * len];
                let base = (o * self.cin + i) * self.kernel;
                for k in 0..self.kernel {
                    let mut acc = 0.0;
                    for (t, &g) in dyo.iter().enumerate() {
                        let src = t as isize + k as isize - pad;
                        if src >= 0 && (src as usize) < len {
                            acc += g * xi[src as usize];
                        }
                    }
                    dw[base + k] += acc;
                }
            }
        }
        if let Some(dx) = dx {
            for o in 0..self.cout {
                let dyo = &dy[o * len..(o + 1) * len];
                for i in 0..self.cin {
                    let base = (o * self.cin + i) * self.kernel;
                    let dxi = &mut dx[i * len..(i + 1) * len];
                    for (t, &g) in dyo.iter().enumerate() {
                        for k in 0..self.kernel {
                            let src = t as isize + k as isize - pad;
                            if src >= 0 && (src as usize) < len {
                                dxi[src as usize] += g * w[base + k];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Kernel-2, stride-2 max pooling. Returns the pooled buffer and, per output,
/// the source index that won (first on ties).
pub fn maxpool1d(x: &[f64], channels: usize, len: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / 2;
    let mut y = Vec::with_capacity(channels * out_len);
    let mut idx = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        for t in 0..out_len {
            let a = c * len + 2 * t;
            let (v, i) = if x[a + 1] > x[a] { (x[a + 1], a + 1) } else { (x[a], a) };
            y.push(v);
            idx.push(i);
        }
    }
    (y, idx)
}

pub fn maxpool1d_backward(dy: &[f64], idx: &[usize], dx: &mut [f64]) {
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i] += g;
    }
}

/// Fully connected layer, weight `[out][in]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        (0..self.output)
            .map(|o| {
                let row = &w[o * self.input..(o + 1) * self.input];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64], db: &mut [f64]) {
        for o in 0..self.output {
            let g = dy[o];
            db[o] += g;
            let row = &w[o * self.input..(o + 1) * self.input];
            let drow = &mut dw[o * self.input..(o + 1) * self.input];
            for j in 0..self.input {
                drow[j] += g * x[j];
                dx[j] += g * row[j];
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &[f64], rows: usize, cols: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let plane = rows * cols;
        debug_assert_eq!(x.len(), self.cin * plane);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; self.cout * plane];
        for o in 0..self.cout {
            let yo = &mut y[o * plane..(o + 1) * plane];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..self.cin {
                let xi = &x[i * plane..(i + 1) * plane];
                let wk = &w[(o * self.cin + i) * k * k..(o * self.cin + i + 1) * k * k];
                for (ky, wrow) in wk.chunks_exact(k).enumerate() {
                    let dr = ky as isize - pad;
                    for (kx, &wv) in wrow.iter().enumerate() {
                        let dc = kx as isize - pad;
                        // valid output range for this tap
                        let r0 = (-dr).max(0) as usize;
                        let r1 = (rows as isize - dr).min(rows as isize).max(0) as usize;
                        let c0 = (-dc).max(0) as usize;
                        let c1 = (cols as isize - dc).min(cols as isize).max(0) as usize;
                        for r in r0..r1 {
                            let sr = (r as isize + dr) as usize;
                            let src = &xi[sr * cols..(sr + 1) * cols];
                            let dst = &mut yo[r * cols..(r + 1) * cols];
                            for c in c0..c1 {
                                dst[c] += wv * src[(c as isize + dc) as usize];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        rows: usize,
        cols: usize,
        w: &[f64],
        dy: &[f64],
        mut dx: Option<&mut [f64]>,
        dw: &mut [f64],
        db: &mut [f64],
    ) {
        let plane = rows * cols;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        for o in 0..self.cout {
            let dyo = &dy[o * plane..(o + 1) * plane];
            db[o] += dyo.iter().sum::<f64>();
            for i in 0..self.cin {
                let xi = &x[i * plane..(i + 1) * plane];
                let base = (o * self.cin + i) * k * k;
                for ky in 0..k {
                    let dr = ky as isize - pad;
                    let r0 = (-dr).max(0) as usize;
                    let r1 = (rows as isize - dr).min(rows as isize).max(0) as usize;
                    for kx in 0..k {
                        let dc = kx as isize - pad;
                        let c0 = (-dc).max(0) as usize;
                        let c1 = (cols as isize - dc).min(cols as isize).max(0) as usize;
                        let wv = w[base + ky * k + kx];
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            let sr = (r as isize + dr) as usize;
                            let g = &dyo[r * cols..(r + 1) * cols];
                            let src = &xi[sr * cols..(sr + 1) * cols];
                            for c in c0..c1 {
                                acc += g[c] * src[(c as isize + dc) as usize];
                            }
                        }
                        dw[base + ky * k + kx] += acc;
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxi = &mut dx[i * plane..(i + 1) * plane];
                            for r in r0..r1 {
                                let sr = (r as isize + dr) as usize;
                                for c in c0..c1 {
                                    dxi[sr * cols + (c as isize + dc) as usize] += wv * dyo[r * cols + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let conv = Conv1d { cin: 1, cout: 1, kernel: 3 };
        let y = conv.forward(&[1.0, 2.0, 3.0], 3, &[0.0, 1.0, 0.0], &[0.5]);
        assert_eq!(y, vec![1.5, 2.5, 3.5]);
        let shift = conv.forward(&[1.0, 2.0, 3.0], 3, &[1.0, 0.0, 0.0], &[0.0]);
        assert_eq!(shift, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn conv2d_padding() {
        let conv = Conv2d { cin: 1, cout: 1, kernel: 3 };
        let ones = vec![1.0; 9];
        let y = conv.forward(&[1.0; 9], 3, 3, &ones, &[0.0]);
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv1d_gradients() {
        let conv = Conv1d { cin: 2, cout: 3, kernel: 5 };
        let len = 7;
        let x = pseudo(2 * len, 1);
        let w = pseudo(conv.weight_len(), 2);
        let b = pseudo(3, 3);
        let probe = pseudo(3 * len, 4);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv.forward(x, len, w, b).iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        conv.backward(&x, len, &w, &probe, Some(&mut dx), &mut dw, &mut db);
        for (a, n) in dx.iter().zip(numeric_grad(|v| loss(v, &w, &b), &x)) {
            assert!((a - n).abs() < 1e-8);
        }
        for (a, n) in dw.iter().zip(numeric_grad(|v| loss(&x, v, &b), &w)) {
            assert!((a - n).abs() < 1e-8);
        }
        for (a, n) in db.iter().zip(numeric_grad(|v| loss(&x, &w, v), &b)) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn conv2d_gradients() {
        for kernel in [1, 3] {
            let conv = Conv2d { cin: 2, cout: 3, kernel };
            let (rows, cols) = (4, 5);
            let x = pseudo(2 * rows * cols, 5);
            let w = pseudo(conv.weight_len(), 6);
            let b = pseudo(3, 7);
            let probe = pseudo(3 * rows * cols, 8);
            let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
                conv.forward(x, rows, cols, w, b).iter().zip(&probe).map(|(a, p)| a * p).sum()
            };
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 3];
            conv.backward(&x, rows, cols, &w, &probe, Some(&mut dx), &mut dw, &mut db);
            for (a, n) in dx.iter().zip(numeric_grad(|v| loss(v, &w, &b), &x)) {
                assert!((a - n).abs() < 1e-8);
            }
            for (a, n) in dw.iter().zip(numeric_grad(|v| loss(&x, v, &b), &w)) {
                assert!((a - n).abs() < 1e-8);
            }
            for (a, n) in db.iter().zip(numeric_grad(|v| loss(&x, &w, v), &b)) {
                assert!((a - n).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pool_routes_gradient_to_winner() {
        let (y, idx) = maxpool1d(&[1.0, 3.0, 2.0, 2.0, 5.0], 1, 5);
        assert_eq!(y, vec![3.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);
        let mut dx = vec![0.0; 5];
        maxpool1d_backward(&[1.0, 2.0], &idx, &mut dx);
        assert_eq!(dx, vec![0.0, 1.0, 2.0, 0.0, 0.0]);
    }
}
