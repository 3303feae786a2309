use super::kernels::{self, ConvGeom};
use super::{Backward, Float, Mode, Tape, Tensor, Var};
use crate::error::{dim_err, param_err, Error, Result};

type Grads<T> = Result<Vec<Option<Vec<T>>>>;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Float> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    /// Number of train-mode updates so far; zero means eval mode is unusable.
    pub batches_tracked: u64,
}

impl<T: Float> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            batches_tracked: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.batches_tracked > 0
    }
}

/// Rearranges `[b, c, h, w]` into `[b, 4c, h/2, w/2]` without recording.
pub fn space_to_depth_values<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("space_to_depth needs even h and w, got {h}x{w}"));
    }
    Tensor::new(&[b, 4 * c, h / 2, w / 2], kernels::space_to_depth(x.data(), (b, c, h, w)))
}

/// Inverse of [`space_to_depth_values`].
pub fn depth_to_space_values<T: Float>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c4, h2, w2) = y.dims4()?;
    if c4 % 4 != 0 {
        return Err(dim_err!("depth_to_space needs channels divisible by 4, got {c4}"));
    }
    let dims = (b, c4 / 4, h2 * 2, w2 * 2);
    Tensor::new(&[b, c4 / 4, h2 * 2, w2 * 2], kernels::depth_to_space(y.data(), dims))
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("expected at least [b, c], got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Float> Tape<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(param_err!("conv2d stride must be positive"));
        }
        let xv = self.value(x)?;
        let wv = self.value(weight)?;
        let (b, c, h, w) = xv.dims4()?;
        let (co, ci, kh, kw) = wv.dims4()?;
        if ci != c {
            return Err(dim_err!("conv2d input has {c} channels, weight expects {ci}"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"));
        }
        let bias_data = match bias {
            Some(bv) => {
                let t = self.value(bv)?;
                if t.shape() != [co] {
                    return Err(dim_err!("conv2d bias shape {:?}, expected [{co}]", t.shape()));
                }
                Some(t.data().to_vec())
            }
            None => None,
        };
        let geom = ConvGeom {
            b,
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, xv.data(), wv.data(), bias_data.as_deref());
        let value = Tensor::new(&[b, co, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push_op("conv2d", &inputs, value, Box::new(Conv2dGrad { geom }))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(param_err!("avg_pool2d kernel and stride must be positive (k={k}, s={stride})"));
        }
        let xv = self.value(x)?;
        let dims = xv.dims4()?;
        if dims.2 < k || dims.3 < k {
            return Err(dim_err!("avg_pool2d kernel {k} larger than input {}x{}", dims.2, dims.3));
        }
        let (out, oh, ow) = kernels::avg_pool_forward(xv.data(), dims, k, stride);
        let value = Tensor::new(&[dims.0, dims.1, oh, ow], out)?;
        self.push_op("avg_pool2d", &[x], value, Box::new(AvgPoolGrad { dims, k, stride }))
    }

    /// Mean over spatial positions: `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let (b, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let out: Vec<T> = xv.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[b, c], out)?;
        self.push_op("global_avg_pool", &[x], value, Box::new(GlobalPoolGrad { hw }))
    }

    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let value = space_to_depth_values(self.value(x)?)?;
        self.push_op("space_to_depth", &[x], value, Box::new(SpaceToDepthGrad { inverse: false }))
    }

    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let value = depth_to_space_values(self.value(x)?)?;
        self.push_op("depth_to_space", &[x], value, Box::new(SpaceToDepthGrad { inverse: true }))
    }

    /// Batch norm over axis 1 of a `[b, c, ...]` tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
        eps: f64,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.batch_norm_train(x, gamma, beta, state, eps),
            Mode::Eval => self.batch_norm_eval(x, gamma, beta, state, eps),
        }
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, state: &BatchNormState<T>) -> Result<(usize, usize, usize)> {
        let (b, c, inner) = channel_layout(self.value(x)?.shape())?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v)?.shape() != [c] {
                return Err(dim_err!("batch_norm {what} shape {:?}, expected [{c}]", self.value(v)?.shape()));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(dim_err!("batch_norm state has {} channels, input has {c}", state.running_mean.len()));
        }
        Ok((b, c, inner))
    }

    /// Normalises with batch statistics and updates the running state.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, inner) = self.check_bn(x, gamma, beta, state)?;
        let xv = self.value(x)?.data();
        let g = self.value(gamma)?.data();
        let bt = self.value(beta)?.data();
        let n = b * inner;
        if n == 0 {
            return Err(dim_err!("batch_norm on empty batch"));
        }
        let inv_n = T::one() / T::lit(n as f64);
        let mean: Vec<T> = kernels::channel_sums(xv, b, c, inner).into_iter().map(|s| s * inv_n).collect();
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                var[ci] += xv[base..base + inner].iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v * inv_n);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ci]) * invstd[ci];
                    out[i] = g[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let m = state.momentum;
        let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
        for ci in 0..c {
            state.running_mean[ci] = (T::one() - m) * state.running_mean[ci] + m * mean[ci];
            state.running_var[ci] = (T::one() - m) * state.running_var[ci] + m * var[ci] * unbias;
        }
        state.batches_tracked += 1;
        let value = Tensor::new(self.value(x)?.shape(), out)?;
        self.push_op(
            "batch_norm",
            &[x, gamma, beta],
            value,
            Box::new(BatchNormGrad { b, c, inner, xhat, invstd, train: true }),
        )
    }

    /// Normalises with the running statistics. Fails before the first
    /// train-mode update.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, inner) = self.check_bn(x, gamma, beta, state)?;
        if !state.is_initialized() {
            return Err(Error::State("batch_norm running statistics are uninitialized".into()));
        }
        let xv = self.value(x)?.data();
        let g = self.value(gamma)?.data();
        let bt = self.value(beta)?.data();
        let invstd: Vec<T> = state.running_var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - state.running_mean[ci]) * invstd[ci];
                    out[i] = g[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let value = Tensor::new(self.value(x)?.shape(), out)?;
        self.push_op(
            "batch_norm",
            &[x, gamma, beta],
            value,
            Box::new(BatchNormGrad { b, c, inner, xhat, invstd, train: false }),
        )
    }

    /// `y = x` where `x >= 0`, `a * x` otherwise; `a` holds one slope or one
    /// per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let (b, c, inner) = channel_layout(xv.shape())?;
        let a = self.value(slope)?;
        let per_channel = match a.numel() {
            1 if a.rank() <= 1 => false,
            n if n == c && a.rank() == 1 => true,
            _ => return Err(dim_err!("prelu slope shape {:?} for {c} channels", a.shape())),
        };
        let out: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ai = if per_channel { a.data()[(i / inner) % c] } else { a.data()[0] };
                if v >= T::zero() { v } else { ai * v }
            })
            .collect();
        let value = Tensor::new(xv.shape(), out)?;
        self.push_op("prelu", &[x, slope], value, Box::new(PreluGrad { b, c, inner, per_channel }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.max(T::zero())).collect())?;
        self.push_op("relu", &[x], value, Box::new(ReluGrad))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let out = xv.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let value = Tensor::new(xv.shape(), out)?;
        self.push_op("sigmoid", &[x], value, Box::new(SigmoidGrad))
    }

    /// `x: [b, n]`, `weight: [m, n]`, `bias: [m]` → `x Wᵀ + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, k) = self.value(x)?.dims2()?;
        let (m, k2) = self.value(weight)?.dims2()?;
        if k != k2 {
            return Err(dim_err!("linear input has {k} features, weight expects {k2}"));
        }
        let mut out = kernels::matmul_nt(self.value(x)?.data(), self.value(weight)?.data(), n, k, m);
        if let Some(bv) = bias {
            let bt = self.value(bv)?;
            if bt.shape() != [m] {
                return Err(dim_err!("linear bias shape {:?}, expected [{m}]", bt.shape()));
            }
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bt.data()).for_each(|(o, &b)| *o += b);
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push_op("linear", &inputs, value, Box::new(LinearGrad { n, k, m }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(dim_err!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), out)?;
        self.push_op("add", &[a, b], value, Box::new(AddGrad))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), out)?;
        self.push_op("mul", &[a, b], value, Box::new(MulGrad))
    }

    /// Multiplies every `[h, w]` plane of `x: [b, c, h, w]` by `scale[b, c]`.
    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let (b, c, h, w) = xv.dims4()?;
        let sv = self.value(scale)?;
        if sv.shape() != [b, c] {
            return Err(dim_err!("scale_channels: scale {:?} for input {:?}", sv.shape(), xv.shape()));
        }
        let hw = h * w;
        let out = xv.data().iter().enumerate().map(|(i, &v)| v * sv.data()[i / hw]).collect();
        let value = Tensor::new(xv.shape(), out)?;
        self.push_op("scale_channels", &[x, scale], value, Box::new(ScaleChannelsGrad { hw }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.value(*first)?.shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v)?.shape();
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(dim_err!("concat along {axis}: {:?} vs {:?}", s, base));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                let d = self.value(v)?.data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push_op("concat", xs, value, Box::new(ConcatGrad { outer, inner, lens }))
    }

    /// `[b, ...] -> [b, product(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.shape().to_vec();
        if s.is_empty() {
            return Err(dim_err!("flatten of a scalar"));
        }
        let rest = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x)?.clone().reshape(shape)?;
        self.push_op("reshape", &[x], value, Box::new(ReshapeGrad))
    }

    /// Divides each slice along `axis` by `max(‖slice‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x)?;
        if axis >= xv.rank() {
            return Err(dim_err!("l2_normalize axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let eps = T::lit(eps);
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let ss: T = (0..len).map(|l| d[(o * len + l) * inner + i].powi(2)).sum();
                norms[o * inner + i] = ss.sqrt();
            }
        }
        let out = d
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let (o, i) = (idx / (len * inner), idx % inner);
                v / norms[o * inner + i].max(eps)
            })
            .collect();
        let value = Tensor::new(xv.shape(), out)?;
        self.push_op("l2_normalize", &[x], value, Box::new(L2NormGrad { len, inner, norms, eps }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.data().iter().copied().sum();
        self.push_op("sum", &[x], Tensor::scalar(s), Box::new(SumGrad))
    }
}

struct Conv2dGrad {
    geom: ConvGeom,
}

impl<T: Float> Backward<T> for Conv2dGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        let g_geom = &self.geom;
        let dx = needs[0].then(|| kernels::conv2d_backward_input(g_geom, inputs[1].data(), g));
        let dw = needs[1].then(|| kernels::conv2d_backward_weight(g_geom, inputs[0].data(), g));
        let mut res = vec![dx, dw];
        if inputs.len() == 3 {
            let db = needs[2].then(|| kernels::channel_sums(g, g_geom.b, g_geom.co, g_geom.oh * g_geom.ow));
            res.push(db);
        }
        Ok(res)
    }
}

struct AvgPoolGrad {
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
}

impl<T: Float> Backward<T> for AvgPoolGrad {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        Ok(vec![Some(kernels::avg_pool_backward(g, self.dims, self.k, self.stride))])
    }
}

struct GlobalPoolGrad {
    hw: usize,
}

impl<T: Float> Backward<T> for GlobalPoolGrad {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        let inv = T::one() / T::lit(self.hw as f64);
        Ok(vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, self.hw)).collect())])
    }
}

struct SpaceToDepthGrad {
    inverse: bool,
}

impl<T: Float> Backward<T> for SpaceToDepthGrad {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        let gt = Tensor::new(out.shape(), g.to_vec())?;
        let dx = if self.inverse {
            let (b, c, h, w) = inputs[0].dims4()?;
            kernels::space_to_depth(gt.data(), (b, c / 4, h * 2, w * 2))
        } else {
            kernels::depth_to_space(gt.data(), inputs[0].dims4()?)
        };
        Ok(vec![Some(dx)])
    }
}

struct BatchNormGrad<T: Float> {
    b: usize,
    c: usize,
    inner: usize,
    xhat: Vec<T>,
    invstd: Vec<T>,
    train: bool,
}

impl<T: Float> Backward<T> for BatchNormGrad<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        let (b, c, inner) = (self.b, self.c, self.inner);
        let gamma = inputs[1].data();
        let mut dbeta = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    dbeta[ci] += g[i];
                    dgamma[ci] += g[i] * self.xhat[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            let n = T::lit((b * inner) as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    let scale = gamma[ci] * self.invstd[ci];
                    for i in base..base + inner {
                        dx[i] = if self.train {
                            scale * (g[i] - dbeta[ci] / n - self.xhat[i] * dgamma[ci] / n)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            dx
        });
        Ok(vec![dx, Some(dgamma), Some(dbeta)])
    }
}

struct PreluGrad {
    b: usize,
    c: usize,
    inner: usize,
    per_channel: bool,
}

impl<T: Float> Backward<T> for PreluGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        let x = inputs[0].data();
        let a = inputs[1].data();
        let mut dx = vec![T::zero(); x.len()];
        let mut da = vec![T::zero(); a.len()];
        debug_assert_eq!(x.len(), self.b * self.c * self.inner);
        for (i, (&xi, &gi)) in x.iter().zip(g).enumerate() {
            let ch = if self.per_channel { (i / self.inner) % self.c } else { 0 };
            if xi >= T::zero() {
                dx[i] = gi;
            } else {
                dx[i] = a[ch] * gi;
                da[ch] += xi * gi;
            }
        }
        Ok(vec![Some(dx), Some(da)])
    }
}

struct ReluGrad;

impl<T: Float> Backward<T> for ReluGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        let dx = inputs[0].data().iter().zip(g).map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() }).collect();
        Ok(vec![Some(dx)])
    }
}

struct SigmoidGrad;

impl<T: Float> Backward<T> for SigmoidGrad {
    fn backward(&self, _i: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        let dx = out.data().iter().zip(g).map(|(&y, &gi)| gi * y * (T::one() - y)).collect();
        Ok(vec![Some(dx)])
    }
}

struct LinearGrad {
    n: usize,
    k: usize,
    m: usize,
}

impl<T: Float> Backward<T> for LinearGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        let (n, k, m) = (self.n, self.k, self.m);
        let dx = needs[0].then(|| kernels::matmul_nn(g, inputs[1].data(), n, m, k));
        let dw = needs[1].then(|| kernels::matmul_tn(g, inputs[0].data(), n, m, k));
        let mut res = vec![dx, dw];
        if inputs.len() == 3 {
            res.push(needs[2].then(|| kernels::channel_sums(g, n, m, 1)));
        }
        Ok(res)
    }
}

struct AddGrad;

impl<T: Float> Backward<T> for AddGrad {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        Ok(vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())])
    }
}

struct MulGrad;

impl<T: Float> Backward<T> for MulGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let da = needs[0].then(|| g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect());
        let db = needs[1].then(|| g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect());
        Ok(vec![da, db])
    }
}

struct ScaleChannelsGrad {
    hw: usize,
}

impl<T: Float> Backward<T> for ScaleChannelsGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        let (x, s) = (inputs[0].data(), inputs[1].data());
        let dx = needs[0].then(|| g.iter().enumerate().map(|(i, &gi)| gi * s[i / self.hw]).collect());
        let ds = needs[1].then(|| {
            g.chunks(self.hw)
                .zip(x.chunks(self.hw))
                .map(|(gp, xp)| kernels::dot(gp, xp))
                .collect()
        });
        Ok(vec![dx, ds])
    }
}

struct ConcatGrad {
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}

impl<T: Float> Backward<T> for ConcatGrad {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], needs: &[bool]) -> Grads<T> {
        let total: usize = self.lens.iter().sum();
        let mut parts: Vec<Vec<T>> = self.lens.iter().map(|&l| Vec::with_capacity(self.outer * l * self.inner)).collect();
        for o in 0..self.outer {
            let mut off = o * total * self.inner;
            for (p, &len) in parts.iter_mut().zip(&self.lens) {
                p.extend_from_slice(&g[off..off + len * self.inner]);
                off += len * self.inner;
            }
        }
        Ok(parts.into_iter().zip(needs).map(|(p, &n)| n.then_some(p)).collect())
    }
}

struct ReshapeGrad;

impl<T: Float> Backward<T> for ReshapeGrad {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.to_vec())])
    }
}

struct L2NormGrad<T: Float> {
    len: usize,
    inner: usize,
    norms: Vec<T>,
    eps: T,
}

impl<T: Float> Backward<T> for L2NormGrad<T> {
    fn backward(&self, _i: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        let y = out.data();
        let (len, inner) = (self.len, self.inner);
        let mut dx = vec![T::zero(); g.len()];
        for (slot, &norm) in self.norms.iter().enumerate() {
            let (o, i) = (slot / inner, slot % inner);
            let idx = |l: usize| (o * len + l) * inner + i;
            if norm > self.eps {
                let proj: T = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                for l in 0..len {
                    dx[idx(l)] = (g[idx(l)] - y[idx(l)] * proj) / norm;
                }
            } else {
                for l in 0..len {
                    dx[idx(l)] = g[idx(l)] / self.eps;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct SumGrad;

impl<T: Float> Backward<T> for SumGrad {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &[T], _n: &[bool]) -> Grads<T> {
        Ok(vec![Some(vec![g[0]; inputs[0].numel()])])
    }
}
