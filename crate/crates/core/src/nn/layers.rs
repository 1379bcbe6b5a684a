use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Gradients, ParamId, ParamKind, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated by the caller.
    Train,
    /// Running statistics; the network is a fixed function of its input.
    Eval,
}

fn view2<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("parameter tensor is contiguous")
}

/// 2-D convolution over NCHW tensors, lowered to im2col + GEMM per sample.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // He-normal on fan-in.
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = ArrayD::from_shape_fn(IxDyn(&[out_channels, in_channels, kernel, kernel]), |_| {
            T::from_f64(normal.sample(rng))
        });
        let weight = store.register(format!("{name}.weight"), ParamKind::Trainable, w);
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                ParamKind::Trainable,
                ArrayD::zeros(IxDyn(&[out_channels])),
            )
        });
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let wmat = view2(store.get(self.weight), self.out_channels, self.patch_len());
        let mut y = Array4::<T>::zeros((n, self.out_channels, ho, wo));
        let mut cols = Array2::<T>::zeros((self.patch_len(), ho * wo));
        for i in 0..n {
            self.im2col(x.index_axis(Axis(0), i), ho, wo, &mut cols);
            let mut yi = y
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_channels, ho * wo))
                .expect("fresh output is contiguous");
            general_mat_mul(T::one(), &wmat, &cols, T::zero(), &mut yi);
            if let Some(b) = self.bias {
                let b = store.get(b);
                for (o, mut row) in yi.outer_iter_mut().enumerate() {
                    let bo = b[[o]];
                    row.mapv_inplace(|v| v + bo);
                }
            }
        }
        y
    }

    /// Returns dL/dx; accumulates weight and bias gradients when `grads` is given.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Array4<T> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let ckk = self.patch_len();
        let wmat = view2(store.get(self.weight), self.out_channels, ckk);
        let dy = dy.as_standard_layout();
        let mut dx = Array4::<T>::zeros(x.dim());
        let mut cols = Array2::<T>::zeros((ckk, ho * wo));
        let mut dcols = Array2::<T>::zeros((ckk, ho * wo));
        let mut dw = grads.as_ref().map(|_| Array2::<T>::zeros((self.out_channels, ckk)));
        let mut db = Array1::<T>::zeros(self.out_channels);
        for i in 0..n {
            let dyi = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_channels, ho * wo))
                .expect("standard layout");
            if let Some(dw) = dw.as_mut() {
                self.im2col(x.index_axis(Axis(0), i), ho, wo, &mut cols);
                general_mat_mul(T::one(), &dyi, &cols.t(), T::one(), dw);
                db += &dyi.sum_axis(Axis(1));
            }
            general_mat_mul(T::one(), &wmat.t(), &dyi, T::zero(), &mut dcols);
            self.col2im(&dcols, ho, wo, &mut dx, i);
        }
        if let (Some(g), Some(dw)) = (grads.as_deref_mut(), dw) {
            let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
            let dw = dw.into_shape_with_order(IxDyn(&shape)).expect("contiguous");
            g.accumulate(self.weight, &shape, dw.view());
            if let Some(b) = self.bias {
                g.accumulate(b, &[self.out_channels], db.into_dyn().view());
            }
        }
        dx
    }

    fn im2col<T: Scalar>(&self, x: ArrayView3<'_, T>, ho: usize, wo: usize, cols: &mut Array2<T>) {
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cs = cols.as_slice_mut().expect("contiguous cols");
        let plane = ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cs[row * plane..(row + 1) * plane];
                    for oh in 0..ho {
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xs[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - p;
                            *d = if iw >= 0 && iw < w as isize { src[iw as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &Array2<T>, ho: usize, wo: usize, dx: &mut Array4<T>, n: usize) {
        let (_, c, h, w) = dx.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cs = cols.as_slice().expect("contiguous cols");
        let mut dxn = dx.index_axis_mut(Axis(0), n);
        let ds = dxn.as_slice_mut().expect("standard layout");
        let plane = ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cs[row * plane..(row + 1) * plane];
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (ci * h + ih as usize) * w;
                        for ow in 0..wo {
                            let iw = (ow * s + kj) as isize - p;
                            if iw >= 0 && iw < w as isize {
                                ds[base + iw as usize] += src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    mode: Mode,
    xhat: Array4<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let ones = || ArrayD::from_elem(IxDyn(&[channels]), T::one());
        let zeros = || ArrayD::zeros(IxDyn(&[channels]));
        Self {
            gamma: store.register(format!("{name}.weight"), ParamKind::Trainable, ones()),
            beta: store.register(format!("{name}.bias"), ParamKind::Trainable, zeros()),
            running_mean: store.register(format!("{name}.running_mean"), ParamKind::Buffer, zeros()),
            running_var: store.register(format!("{name}.running_var"), ParamKind::Buffer, ones()),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch-norm channels");
        let m = T::from_usize(n * h * w);
        let eps = T::from_f64(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let plane = x.slice(s![.., ci, .., ..]);
                    let mu = plane.sum() / m;
                    let v = plane.fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                (mean, var)
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean).view().into_dimensionality().expect("1-d");
                let rv = store.get(self.running_var).view().into_dimensionality().expect("1-d");
                (rm.to_owned(), rv.to_owned())
            }
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[[ci]], beta[[ci]]);
            let xs = x.slice(s![.., ci, .., ..]);
            let mut xh = xhat.slice_mut(s![.., ci, .., ..]);
            let mut ys = y.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut xh).and(&mut ys).and(&xs).for_each(|xh, y, &xv| {
                let v = (xv - mu) * is;
                *xh = v;
                *y = g * v + b;
            });
        }
        (y, BnCache { mode, xhat, inv_std, batch_mean: mean, batch_var: var })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Array4<T>,
        grads: Option<&mut Gradients<T>>,
    ) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let m = T::from_usize(n * h * w);
        let gamma = store.get(self.gamma);
        let mut dx = Array4::<T>::zeros(dy.dim());
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        for ci in 0..c {
            let dys = dy.slice(s![.., ci, .., ..]);
            let xh = cache.xhat.slice(s![.., ci, .., ..]);
            let sum_dy = dys.sum();
            let sum_dy_xh = ndarray::Zip::from(&dys).and(&xh).fold(T::zero(), |acc, &a, &b| acc + a * b);
            dgamma[ci] = sum_dy_xh;
            dbeta[ci] = sum_dy;
            let scale = gamma[[ci]] * cache.inv_std[ci];
            let mut dxs = dx.slice_mut(s![.., ci, .., ..]);
            match cache.mode {
                Mode::Eval => ndarray::Zip::from(&mut dxs).and(&dys).for_each(|d, &g| *d = g * scale),
                Mode::Train => ndarray::Zip::from(&mut dxs).and(&dys).and(&xh).for_each(|d, &g, &x| {
                    *d = scale * (g - sum_dy / m - x * sum_dy_xh / m);
                }),
            }
        }
        if let Some(g) = grads {
            g.accumulate(self.gamma, &[c], dgamma.into_dyn().view());
            g.accumulate(self.beta, &[c], dbeta.into_dyn().view());
        }
        dx
    }

    /// Folds the batch statistics of a training forward pass into the running averages.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>, count: usize) {
        if cache.mode != Mode::Train {
            return;
        }
        let mom = T::from_f64(self.momentum);
        let unbias = if count > 1 { T::from_usize(count) / T::from_usize(count - 1) } else { T::one() };
        let rm = store.get_mut(self.running_mean);
        for (r, &b) in rm.iter_mut().zip(cache.batch_mean.iter()) {
            *r = (T::one() - mom) * *r + mom * b;
        }
        let rv = store.get_mut(self.running_var);
        for (r, &b) in rv.iter_mut().zip(cache.batch_var.iter()) {
            *r = (T::one() - mom) * *r + mom * b * unbias;
        }
    }
}

/// Fully connected layer on `(N, in)` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = ArrayD::from_shape_fn(IxDyn(&[out_features, in_features]), |_| T::from_f64(u.sample(rng)));
        let b = ArrayD::from_shape_fn(IxDyn(&[out_features]), |_| T::from_f64(u.sample(rng)));
        Self {
            weight: store.register(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: store.register(format!("{name}.bias"), ParamKind::Trainable, b),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Array2<T> {
        let w = view2(store.get(self.weight), self.out_features, self.in_features);
        let b = store.get(self.bias);
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += b[[o]];
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array2<T>,
        dy: &Array2<T>,
        grads: Option<&mut Gradients<T>>,
    ) -> Array2<T> {
        let w = view2(store.get(self.weight), self.out_features, self.in_features);
        if let Some(g) = grads {
            let dw = dy.t().dot(x);
            g.accumulate(self.weight, &[self.out_features, self.in_features], dw.into_dyn().view());
            g.accumulate(self.bias, &[self.out_features], dy.sum_axis(Axis(0)).into_dyn().view());
        }
        dy.dot(&w)
    }
}

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_dim: (usize, usize, usize, usize),
    argmax: Array4<u32>,
}

/// 3×3, stride 2, padding 1 max pooling (the residual-network stem pool).
pub fn max_pool<T: Scalar>(x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
    let (k, st, p) = (3usize, 2usize, 1isize);
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 - k) / st + 1;
    let wo = (w + 2 - k) / st + 1;
    let mut y = Array4::<T>::zeros((n, c, ho, wo));
    let mut arg = Array4::<u32>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = 0u32;
                    for ki in 0..k {
                        let ih = (oh * st + ki) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * st + kj) as isize - p;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let v = plane[[ih as usize, iw as usize]];
                            if v > best {
                                best = v;
                                bi = (ih as usize * w + iw as usize) as u32;
                            }
                        }
                    }
                    y[[ni, ci, oh, ow]] = best;
                    arg[[ni, ci, oh, ow]] = bi;
                }
            }
        }
    }
    (y, MaxPoolCache { input_dim: (n, c, h, w), argmax: arg })
}

pub fn max_pool_backward<T: Scalar>(cache: &MaxPoolCache, dy: &Array4<T>) -> Array4<T> {
    let (n, c, _, w) = cache.input_dim;
    let mut dx = Array4::<T>::zeros(cache.input_dim);
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![ni, ci, .., ..]);
            for ((oh, ow), &g) in dy.slice(s![ni, ci, .., ..]).indexed_iter() {
                let idx = cache.argmax[[ni, ci, oh, ow]] as usize;
                plane[[idx / w, idx % w]] += g;
            }
        }
    }
    dx
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len / dst_len).min(src_len - 1)
}

/// Nearest-neighbour resize of the spatial dims to `(height, width)`.
pub fn resize_nearest<T: Scalar>(x: &Array4<T>, height: usize, width: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, height, width), |(ni, ci, i, j)| {
        x[[ni, ci, nearest_index(i, h, height), nearest_index(j, w, width)]]
    })
}

pub fn resize_nearest_backward<T: Scalar>(dy: &Array4<T>, in_h: usize, in_w: usize) -> Array4<T> {
    let (n, c, height, width) = dy.dim();
    let mut dx = Array4::<T>::zeros((n, c, in_h, in_w));
    for ((ni, ci, i, j), &g) in dy.indexed_iter() {
        dx[[ni, ci, nearest_index(i, in_h, height), nearest_index(j, in_w, width)]] += g;
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels<T: Scalar>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let area = T::from_usize(h * w);
    Array2::from_shape_fn((n, c), |(ni, ci)| x.slice(s![ni, ci, .., ..]).sum() / area)
}

pub fn global_avg_pool_backward<T: Scalar>(dg: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dg.dim();
    let area = T::from_usize(h * w);
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dg[[ni, ci]] / area)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Array4::from_shape_fn(dim, |_| u.sample(rng))
    }

    /// Loss = <r, f(x)> for a fixed random r; compares analytic dL/dx with central differences.
    fn check_input_grad(f: &dyn Fn(&Array4<f64>) -> Array4<f64>, df: &dyn Fn(&Array4<f64>, &Array4<f64>) -> Array4<f64>, x: Array4<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = f(&x);
        let r = rand4(&mut rng, y.dim());
        let analytic = df(&x, &r);
        let eps = 1e-6;
        for idx in [0usize, 3, 7, x.len() / 2, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let lp: f64 = (&f(&xp) * &r).sum();
            let lm: f64 = (&f(&xm) * &r).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, true, &mut rng);
        store.get_mut(conv.bias.unwrap()).fill(0.25);
        let x = rand4(&mut rng, (1, 2, 5, 6));
        let y = conv.forward(&store, &x);
        assert_eq!(y.dim(), (1, 3, 3, 3));
        let w = store.get(conv.weight);
        for o in 0..3 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut acc = 0.25;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if ih >= 0 && ih < 5 && iw >= 0 && iw < 6 {
                                    acc += w[[o, c, ki, kj]] * x[[0, c, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, o, oh, ow]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, true, &mut rng);
        let x = rand4(&mut rng, (2, 2, 5, 4));
        check_input_grad(&|x| conv.forward(&store, x), &|x, r| conv.backward(&store, x, r, None), x, 3);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 2, 3, 2, 1, true, &mut rng);
        let x = rand4(&mut rng, (2, 2, 6, 5));
        let y = conv.forward(&store, &x);
        let r = rand4(&mut rng, y.dim());
        let mut g = Gradients::for_store(&store);
        conv.backward(&store, &x, &r, Some(&mut g));
        let dw = g.get(conv.weight).unwrap().clone();
        for idx in [0usize, 5, 17, 35] {
            let mut sp = store.clone();
            sp.get_mut(conv.weight).as_slice_mut().unwrap()[idx] += 1e-6;
            let mut sm = store.clone();
            sm.get_mut(conv.weight).as_slice_mut().unwrap()[idx] -= 1e-6;
            let fd = ((&conv.forward(&sp, &x) * &r).sum() - (&conv.forward(&sm, &x) * &r).sum()) / 2e-6;
            assert!((fd - dw.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        let db = g.get(conv.bias.unwrap()).unwrap();
        let expect: Vec<f64> = (0..2).map(|o| r.slice(s![.., o, .., ..]).sum()).collect();
        for o in 0..2 {
            assert!((db[[o]] - expect[o]).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        store.get_mut(bn.gamma).assign(&ndarray::arr1(&[0.5, 1.5, -2.0]).into_dyn());
        let x = rand4(&mut rng, (2, 3, 3, 3));
        check_input_grad(
            &|x| bn.forward(&store, x, Mode::Train).0,
            &|x, r| {
                let (_, cache) = bn.forward(&store, x, Mode::Train);
                bn.backward(&store, &cache, r, None)
            },
            x,
            6,
        );
    }

    #[test]
    fn max_pool_and_resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand4(&mut rng, (1, 2, 7, 6));
        check_input_grad(&|x| max_pool(x).0, &|x, r| max_pool_backward(&max_pool(x).1, r), x.clone(), 8);
        check_input_grad(&|x| resize_nearest(x, 13, 12), &|_, r| resize_nearest_backward(r, 7, 6), x, 9);
    }

    #[test]
    fn max_pool_halves_resolution() {
        let x = Array4::<f32>::zeros((1, 1, 64, 63));
        assert_eq!(max_pool(&x).0.dim(), (1, 1, 32, 32));
    }

    #[test]
    fn linear_and_gap_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        let x = rand4(&mut rng, (2, 3, 4, 5));
        let f = |x: &Array4<f64>| {
            let y = lin.forward(&store, &global_avg_pool(x));
            y.into_shape_with_order((2, 2, 1, 1)).unwrap()
        };
        let df = |x: &Array4<f64>, r: &Array4<f64>| {
            let g = global_avg_pool(x);
            let r2 = r.clone().into_shape_with_order((2, 2)).unwrap();
            let dg = lin.backward(&store, &g, &r2, None);
            global_avg_pool_backward(&dg, 4, 5)
        };
        check_input_grad(&f, &df, x, 11);
    }
}
