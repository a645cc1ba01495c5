//! Layers and their backward passes on channel-major feature maps.

use rand::Rng;

use super::{gemm, gemm_strided, Grads, Mat, ParamId, ParamStore, Real, Strided};

/// Batch of 1D feature maps stored as `[C, B, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<T> {
    pub c: usize,
    pub b: usize,
    pub l: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(c: usize, b: usize, l: usize) -> Self {
        Self { c, b, l, data: vec![T::zero(); c * b * l] }
    }

    pub fn from_data(c: usize, b: usize, l: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * b * l);
        Self { c, b, l, data }
    }

    pub fn cols(&self) -> usize {
        self.b * self.l
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, l: usize) -> usize {
        (c * self.b + b) * self.l + l
    }

    pub fn with_data(&self, c: usize, data: Vec<T>) -> Self {
        Self::from_data(c, self.b, self.l, data)
    }

    pub fn add_assign(&mut self, other: &Feat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<T: Real, R: Rng + ?Sized>(data: &mut [T], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for x in data {
        *x = T::lit(rng.random_range(-bound..bound));
    }
}

/// Affine map applied independently to each column: `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize) -> Self {
        let w = store.add(format!("{name}.w"), &[out, inp]);
        let b = store.add(format!("{name}.b"), &[out]);
        Self { w, b, inp, out }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        init_uniform(store.get_mut(self.w), self.inp, rng);
        init_uniform(store.get_mut(self.b), self.inp, rng);
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.w).iter_mut().for_each(|x| *x = T::zero());
        store.get_mut(self.b).iter_mut().for_each(|x| *x = T::zero());
    }

    /// `x` is `[inp, cols]`.
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T], cols: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.inp * cols);
        let bias = p.get(self.b);
        let mut y = Vec::with_capacity(self.out * cols);
        for &bv in bias {
            y.extend(std::iter::repeat_n(bv, cols));
        }
        gemm(
            T::one(),
            Mat::new(p.get(self.w), self.out, self.inp),
            Mat::new(x, self.inp, cols),
            T::one(),
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx` when requested.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        cols: usize,
        dy: &[T],
        g: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        gemm(
            T::one(),
            Mat::new(dy, self.out, cols),
            Mat::new(x, self.inp, cols).t(),
            T::one(),
            g.get_mut(self.w),
        );
        let gb = g.get_mut(self.b);
        for (o, gbo) in gb.iter_mut().enumerate() {
            *gbo += dy[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); self.inp * cols];
            gemm(
                T::one(),
                Mat::new(p.get(self.w), self.out, self.inp).t(),
                Mat::new(dy, self.out, cols),
                T::zero(),
                &mut dx,
            );
            dx
        })
    }
}

/// 1D convolution along L with "same" zero padding (`k` odd).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub lin: Linear,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Self { lin: Linear::new(store, name, cin * k, cout), cin, cout, k }
    }

    /// Source/destination ranges for tap `j` on a row of length `l`.
    fn tap_ranges(&self, j: usize, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let pad = self.k / 2;
        if j >= pad {
            let s = (j - pad).min(l);
            (s..l, 0..l - s)
        } else {
            let s = (pad - j).min(l);
            (0..l - s, s..l)
        }
    }

    fn im2col<T: Real>(&self, x: &Feat<T>) -> Vec<T> {
        let (b, l, k) = (x.b, x.l, self.k);
        let cols = b * l;
        let mut col = vec![T::zero(); self.cin * k * cols];
        for ci in 0..self.cin {
            for j in 0..k {
                let (src_r, dst_r) = self.tap_ranges(j, l);
                let row = &mut col[(ci * k + j) * cols..(ci * k + j + 1) * cols];
                for bb in 0..b {
                    let base = x.idx(ci, bb, 0);
                    row[bb * l + dst_r.start..bb * l + dst_r.end]
                        .copy_from_slice(&x.data[base + src_r.start..base + src_r.end]);
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, dcol: &[T], b: usize, l: usize) -> Feat<T> {
        let k = self.k;
        let cols = b * l;
        let mut dx = Feat::zeros(self.cin, b, l);
        for ci in 0..self.cin {
            for j in 0..k {
                let (src_r, dst_r) = self.tap_ranges(j, l);
                let row = &dcol[(ci * k + j) * cols..(ci * k + j + 1) * cols];
                for bb in 0..b {
                    let base = dx.idx(ci, bb, 0);
                    let out = &mut dx.data[base + src_r.start..base + src_r.end];
                    for (o, &v) in out.iter_mut().zip(&row[bb * l + dst_r.start..bb * l + dst_r.end]) {
                        *o += v;
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer (empty for `k == 1`).
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Feat<T>) -> (Feat<T>, Vec<T>) {
        debug_assert_eq!(x.c, self.cin);
        if self.k == 1 {
            let y = self.lin.forward(p, &x.data, x.cols());
            return (x.with_data(self.cout, y), Vec::new());
        }
        let col = self.im2col(x);
        let y = self.lin.forward(p, &col, x.cols());
        (x.with_data(self.cout, y), col)
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        col: &[T],
        dy: &Feat<T>,
        g: &mut Grads<T>,
    ) -> Feat<T> {
        if self.k == 1 {
            let dx = self.lin.backward(p, &x.data, x.cols(), &dy.data, g, true).unwrap();
            return x.with_data(self.cin, dx);
        }
        let dcol = self.lin.backward(p, col, x.cols(), &dy.data, g, true).unwrap();
        self.col2im(&dcol, x.b, x.l)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU, evaluated as `x * sigmoid(2u)` with
/// `u = sqrt(2/pi) (x + 0.044715 x^3)`.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let (c2, a) = (T::lit(2.0 * GELU_C), T::lit(GELU_A));
    x.iter()
        .map(|&v| v / (T::one() + (-(c2 * (v + a * v * v * v))).fast_exp()))
        .collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let (c2, a, three, two) = (T::lit(2.0 * GELU_C), T::lit(GELU_A), T::lit(3.0), T::lit(2.0));
    let half_c2 = T::lit(GELU_C);
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = T::one() / (T::one() + (-(c2 * (v + a * v * v * v))).fast_exp());
            let dinner = half_c2 * (T::one() + three * a * v * v);
            d * (s + two * v * s * (T::one() - s) * dinner)
        })
        .collect()
}

/// Max pooling with window and stride 2 along L. Returns the argmax offsets.
pub fn maxpool2<T: Real>(x: &Feat<T>) -> (Feat<T>, Vec<u8>) {
    let lo = x.l / 2;
    let mut y = Feat::zeros(x.c, x.b, lo);
    let mut arg = vec![0u8; y.data.len()];
    for (row_in, (row_out, arg_out)) in x
        .data
        .chunks_exact(x.l)
        .zip(y.data.chunks_exact_mut(lo).zip(arg.chunks_exact_mut(lo)))
    {
        for i in 0..lo {
            let (a, b) = (row_in[2 * i], row_in[2 * i + 1]);
            if b > a {
                row_out[i] = b;
                arg_out[i] = 1;
            } else {
                row_out[i] = a;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Feat<T>, arg: &[u8]) -> Feat<T> {
    let l = dy.l * 2;
    let mut dx = Feat::zeros(dy.c, dy.b, l);
    for (r, (drow, arow)) in dy.data.chunks_exact(dy.l).zip(arg.chunks_exact(dy.l)).enumerate() {
        for i in 0..dy.l {
            dx.data[r * l + 2 * i + arow[i] as usize] += drow[i];
        }
    }
    dx
}

/// Source indices and weight for 2x linear upsampling (half-pixel centers).
fn upsample_taps(l_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * l_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(l_in - 1);
            let i1 = (i0 + 1).min(l_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Doubles L by linear interpolation.
pub fn upsample2<T: Real>(x: &Feat<T>) -> Feat<T> {
    let taps = upsample_taps(x.l);
    let lo = 2 * x.l;
    let mut y = Feat::zeros(x.c, x.b, lo);
    for (row_in, row_out) in x.data.chunks_exact(x.l).zip(y.data.chunks_exact_mut(lo)) {
        for (o, &(i0, i1, w)) in taps.iter().enumerate() {
            let w = T::lit(w);
            row_out[o] = row_in[i0] * (T::one() - w) + row_in[i1] * w;
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Feat<T>) -> Feat<T> {
    let l_in = dy.l / 2;
    let taps = upsample_taps(l_in);
    let mut dx = Feat::zeros(dy.c, dy.b, l_in);
    for (row_out, row_in) in dy.data.chunks_exact(dy.l).zip(dx.data.chunks_exact_mut(l_in)) {
        for (o, &(i0, i1, w)) in taps.iter().enumerate() {
            let w = T::lit(w);
            row_in[i0] += row_out[o] * (T::one() - w);
            row_in[i1] += row_out[o] * w;
        }
    }
    dx
}

/// Stacks `b` below `a` along the channel axis.
pub fn concat_channels<T: Real>(a: &Feat<T>, b: &Feat<T>) -> Feat<T> {
    assert_eq!((a.b, a.l), (b.b, b.l));
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Feat::from_data(a.c + b.c, a.b, a.l, data)
}

pub fn split_channels<T: Real>(x: &Feat<T>, first: usize) -> (Feat<T>, Feat<T>) {
    let cut = first * x.cols();
    (
        Feat::from_data(first, x.b, x.l, x.data[..cut].to_vec()),
        Feat::from_data(x.c - first, x.b, x.l, x.data[cut..].to_vec()),
    )
}

/// Adds a per-(channel, sample) value `v` (`[C, B]`) at every position.
pub fn broadcast_add<T: Real>(x: &mut Feat<T>, v: &[T]) {
    for (cb, row) in x.data.chunks_exact_mut(x.l).enumerate() {
        let add = v[cb];
        row.iter_mut().for_each(|e| *e += add);
    }
}

/// Adjoint of [`broadcast_add`]: sums over L.
pub fn sum_over_length<T: Real>(dy: &Feat<T>) -> Vec<T> {
    dy.data.chunks_exact(dy.l).map(|r| r.iter().copied().sum()).collect()
}

/// Multi-head self-attention over the length axis (no positional encoding).
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    qkv: Vec<T>,
    /// `[B, H, L, L]` softmax weights.
    probs: Vec<T>,
    o: Vec<T>,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, heads: usize) -> Self {
        assert!(heads >= 1 && c.is_multiple_of(heads), "channels {c} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), c, 3 * c),
            out: Linear::new(store, &format!("{name}.out"), c, c),
            heads,
            c,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.qkv.init(store, rng);
        self.out.init(store, rng);
    }

    /// Returns the attention branch output (without the residual).
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Feat<T>) -> (Feat<T>, AttnCache<T>) {
        let (c, b, l, h) = (self.c, x.b, x.l, self.heads);
        let d = c / h;
        let cols = b * l;
        let qkv = self.qkv.forward(p, &x.data, cols);
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let mut probs = vec![T::zero(); b * h * l * l];
        let mut o = vec![T::zero(); c * cols];
        for bb in 0..b {
            for hh in 0..h {
                let col0 = bb * l;
                let (q0, k0, v0) = ((hh * d) * cols + col0, (c + hh * d) * cols + col0, (2 * c + hh * d) * cols + col0);
                let pbase = (bb * h + hh) * l * l;
                let s = &mut probs[pbase..pbase + l * l];
                // S = Q^T K
                gemm_strided(
                    scale,
                    Strided::new(&qkv, q0, l, d, 1, cols),
                    Strided::new(&qkv, k0, d, l, cols, 1),
                    T::zero(),
                    s,
                    (0, l, 1),
                );
                for row in s.chunks_exact_mut(l) {
                    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        z += *v;
                    }
                    let inv = T::one() / z;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                // O^T = P V^T
                gemm_strided(
                    T::one(),
                    Strided::new(s, 0, l, l, l, 1),
                    Strided::new(&qkv, v0, l, d, 1, cols),
                    T::zero(),
                    &mut o,
                    (q0, 1, cols),
                );
            }
        }
        let y = self.out.forward(p, &o, cols);
        (x.with_data(c, y), AttnCache { qkv, probs, o })
    }

    /// Returns `dL/dx` through the attention branch only.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Feat<T>,
        cache: &AttnCache<T>,
        dy: &Feat<T>,
        g: &mut Grads<T>,
    ) -> Feat<T> {
        let (c, b, l, h) = (self.c, x.b, x.l, self.heads);
        let d = c / h;
        let cols = b * l;
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let qkv = &cache.qkv;
        let d_o = self.out.backward(p, &cache.o, cols, &dy.data, g, true).unwrap();
        let mut dqkv = vec![T::zero(); 3 * c * cols];
        let mut ds = vec![T::zero(); l * l];
        for bb in 0..b {
            for hh in 0..h {
                let col0 = bb * l;
                let (q0, k0, v0) = ((hh * d) * cols + col0, (c + hh * d) * cols + col0, (2 * c + hh * d) * cols + col0);
                let pbase = (bb * h + hh) * l * l;
                let pm = &cache.probs[pbase..pbase + l * l];
                // dP = dO^T V
                gemm_strided(
                    T::one(),
                    Strided::new(&d_o, q0, l, d, 1, cols),
                    Strided::new(qkv, v0, d, l, cols, 1),
                    T::zero(),
                    &mut ds,
                    (0, l, 1),
                );
                // dV^T += P^T dO^T
                gemm_strided(
                    T::one(),
                    Strided::new(pm, 0, l, l, 1, l),
                    Strided::new(&d_o, q0, l, d, 1, cols),
                    T::one(),
                    &mut dqkv,
                    (v0, 1, cols),
                );
                // softmax backward, scaled
                for (prow, drow) in pm.chunks_exact(l).zip(ds.chunks_exact_mut(l)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                // dQ^T += dS K^T
                gemm_strided(
                    T::one(),
                    Strided::new(&ds, 0, l, l, l, 1),
                    Strided::new(qkv, k0, l, d, 1, cols),
                    T::one(),
                    &mut dqkv,
                    (q0, 1, cols),
                );
                // dK^T += dS^T Q^T
                gemm_strided(
                    T::one(),
                    Strided::new(&ds, 0, l, l, 1, l),
                    Strided::new(qkv, q0, l, d, 1, cols),
                    T::one(),
                    &mut dqkv,
                    (k0, 1, cols),
                );
            }
        }
        let dx = self.qkv.backward(p, &x.data, cols, &dqkv, g, true).unwrap();
        x.with_data(c, dx)
    }
}
