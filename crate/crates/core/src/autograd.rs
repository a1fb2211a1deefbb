//! A small tape-based reverse-mode autodiff engine over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Nodes that do
//! not depend on any `requires_grad` leaf are skipped entirely, which is what
//! makes parameter-efficient updates cheap: the frozen encoder below the MoE
//! site is never differentiated.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Per-sample statistics over the spatial extent (training, batch size 1).
    Batch { eps: f64 },
    /// Frozen running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// How a `[C, H, W]` map is cut into attention sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenLayout {
    /// One sequence per row (epipolar line): `[H, W, C]`.
    Rows,
    /// One sequence per column: `[W, H, C]`.
    Cols,
    /// A single sequence over every position: `[1, H*W, C]`.
    Full,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleChannels(Var, Var),
    Concat(Var, Var),
    UpsampleNearest(Var, usize),
    UpsampleBilinear(Var, usize),
    Normalize {
        x: Var,
        inv_norm: Vec<f64>,
    },
    Correlation {
        l: Var,
        r: Var,
    },
    SoftArgmax {
        logits: Var,
        probs: Vec<f64>,
        temperature: f64,
    },
    Tokens(Var, TokenLayout),
    Linear(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        scale: f64,
    },
    MeanAxis1(Var),
    MeanAxis0(Var),
    SpatialMean(Var),
    MatVec(Var, Var),
    BoxFilter3(Var),
    Warp {
        img: Var,
        disp: Var,
    },
    SmoothL1(Var, f64),
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Mean(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    attention_macs: u64,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count spent inside attention ops so far.
    pub fn attention_macs(&self) -> u64 {
        self.attention_macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------
    // convolution & normalization
    // ------------------------------------------------------------------

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv input channels");
        let (o, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![0.0; o * ho * wo];
        gemm(
            o,
            c * k * k,
            ho * wo,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
                for v in chunk {
                    *v += bias[oc];
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let keep_cols = self.requires_grad(w);
        let value = Tensor::from_vec(&[o, ho, wo], out).expect("conv shape");
        self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: if keep_cols { cols } else { Vec::new() },
            },
        )
    }

    /// Batch normalization over a single `[C, H, W]` sample.
    ///
    /// Returns the output and, for [`BnStats::Batch`], the per-channel
    /// mean and biased variance used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let (c, h, w) = self.value(x).dims3();
        let n = h * w;
        let xs = self.value(x).data();
        let (mean, var, eps, batch) = match stats {
            BnStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s = &xs[ch * n..(ch + 1) * n];
                    let m = s.iter().sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                }
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => (mean.to_vec(), var.to_vec(), eps, false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in ch * n..(ch + 1) * n {
                xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + bt[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::from_vec(&[c, h, w], out).expect("bn shape");
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
        );
        (v, batch.then_some((mean, var)))
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(va.shape(), data).expect("binary shape");
        let rg = self.rg(&[a, b]);
        self.push(value, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    /// Scales channel `i` of `x: [C, H, W]` by `g[i]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let gv = self.value(g).data();
        assert_eq!(gv.len(), c, "gate length must equal channel count");
        let n = h * w;
        let xs = self.value(x).data();
        let data = (0..c * n).map(|i| xs[i] * gv[i / n]).collect();
        let value = Tensor::from_vec(self.value(x).shape(), data).expect("scale shape");
        let rg = self.rg(&[x, g]);
        self.push(value, rg, Op::ScaleChannels(x, g))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).dims3();
        let (cb, hb, wb) = self.value(b).dims3();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(&[ca + cb, h, w], data).expect("concat shape");
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Concat(a, b))
    }

    // ------------------------------------------------------------------
    // resampling
    // ------------------------------------------------------------------

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = xs[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::from_vec(&[c, ho, wo], out).expect("upsample shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::UpsampleNearest(x, factor))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (ho, wo) = (h * factor, w * factor);
        let ys = bilinear_taps(h, factor);
        let xs_t = bilinear_taps(w, factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs_t.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                    out[(ch * ho + oy) * wo + ox] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        let value = Tensor::from_vec(&[c, ho, wo], out).expect("bilinear shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::UpsampleBilinear(x, factor))
    }

    /// Samples `img: [C, H, W]` at `(y, x - disp(y, x))` with linear
    /// interpolation along the row; coordinates are clamped to the image.
    pub fn warp_horizontal(&mut self, img: Var, disp: Var) -> Var {
        let (c, h, w) = self.value(img).dims3();
        let (_, dh, dw) = self.value(disp).dims3();
        assert_eq!((h, w), (dh, dw), "warp shape mismatch");
        let src = self.value(img).data();
        let d = self.value(disp).data();
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let (x0, x1, t, _) = warp_tap(x as f64 - d[y * w + x], w);
                for ch in 0..c {
                    let row = (ch * h + y) * w;
                    out[row + x] = src[row + x0] * (1.0 - t) + src[row + x1] * t;
                }
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out).expect("warp shape");
        let rg = self.rg(&[img, disp]);
        self.push(value, rg, Op::Warp { img, disp })
    }

    // ------------------------------------------------------------------
    // stereo matching
    // ------------------------------------------------------------------

    /// Per-pixel L2 normalization across channels of `x: [C, H, W]`.
    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let n = h * w;
        let xs = self.value(x).data();
        let mut inv_norm = vec![0.0; n];
        for (p, inv) in inv_norm.iter_mut().enumerate() {
            let sq: f64 = (0..c).map(|ch| xs[ch * n + p] * xs[ch * n + p]).sum();
            *inv = 1.0 / (sq + eps).sqrt();
        }
        let data = (0..c * n).map(|i| xs[i] * inv_norm[i % n]).collect();
        let value = Tensor::from_vec(&[c, h, w], data).expect("normalize shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Normalize { x, inv_norm })
    }

    /// Correlation volume `[D, H, W]`: entry `(d, y, x) = <l(y, x), r(y, x - d)>`.
    /// Shifts that leave the image take `fill`.
    pub fn correlation(&mut self, l: Var, r: Var, max_disp: usize, fill: f64) -> Var {
        let (c, h, w) = self.value(l).dims3();
        assert_eq!(
            self.value(r).dims3(),
            (c, h, w),
            "correlation shape mismatch"
        );
        let (ls, rs) = (self.value(l).data(), self.value(r).data());
        let n = h * w;
        let mut out = vec![fill; max_disp * n];
        for d in 0..max_disp {
            let plane = &mut out[d * n..(d + 1) * n];
            for y in 0..h {
                for x in d..w {
                    plane[y * w + x] = 0.0;
                }
            }
            for ch in 0..c {
                let lrow = &ls[ch * n..(ch + 1) * n];
                let rrow = &rs[ch * n..(ch + 1) * n];
                for y in 0..h {
                    let base = y * w;
                    for x in d..w {
                        plane[base + x] += lrow[base + x] * rrow[base + x - d];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[max_disp, h, w], out).expect("corr shape");
        let rg = self.rg(&[l, r]);
        self.push(value, rg, Op::Correlation { l, r })
    }

    /// Softmax over the leading (disparity) axis of `[D, H, W]` followed by the
    /// expectation of the disparity index; output is `[1, H, W]`.
    pub fn soft_argmax(&mut self, logits: Var, temperature: f64) -> Var {
        let (dn, h, w) = self.value(logits).dims3();
        let n = h * w;
        let ls = self.value(logits).data();
        let mut probs = vec![0.0; dn * n];
        let mut out = vec![0.0; n];
        for p in 0..n {
            let mut m = f64::NEG_INFINITY;
            for d in 0..dn {
                m = m.max(ls[d * n + p] / temperature);
            }
            let mut z = 0.0;
            for d in 0..dn {
                let e = (ls[d * n + p] / temperature - m).exp();
                probs[d * n + p] = e;
                z += e;
            }
            let mut acc = 0.0;
            for d in 0..dn {
                probs[d * n + p] /= z;
                acc += d as f64 * probs[d * n + p];
            }
            out[p] = acc;
        }
        let value = Tensor::from_vec(&[1, h, w], out).expect("soft argmax shape");
        let rg = self.requires_grad(logits);
        self.push(
            value,
            rg,
            Op::SoftArgmax {
                logits,
                probs,
                temperature,
            },
        )
    }

    // ------------------------------------------------------------------
    // attention router pieces
    // ------------------------------------------------------------------

    /// Rearranges `[C, H, W]` into attention sequences `[B, n, C]`.
    pub fn tokens(&mut self, x: Var, layout: TokenLayout) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let xs = self.value(x).data();
        let (b, n) = match layout {
            TokenLayout::Rows => (h, w),
            TokenLayout::Cols => (w, h),
            TokenLayout::Full => (1, h * w),
        };
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let (bi, ni) = token_index(layout, y, xx, w);
                    out[(bi * n + ni) * c + ch] = xs[(ch * h + y) * w + xx];
                }
            }
        }
        let value = Tensor::from_vec(&[b, n, c], out).expect("tokens shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Tokens(x, layout))
    }

    /// `x: [..., C] · w: [C, D] -> [..., D]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xshape = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let c = *xshape.last().expect("linear input rank");
        assert_eq!(ws[0], c, "linear inner dimension");
        let dout = ws[1];
        let m = self.value(x).numel() / c;
        let mut out = vec![0.0; m * dout];
        gemm(
            m,
            c,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        let mut shape = xshape;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&shape, out).expect("linear shape");
        let rg = self.rg(&[x, w]);
        self.push(value, rg, Op::Linear(x, w))
    }

    /// Scaled dot-product attention, independently per batch entry.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let qs = self.value(q).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let c = vs[2];
        assert_eq!(self.value(k).shape(), &qs[..], "attention q/k shape");
        assert_eq!(&vs[..2], &qs[..2], "attention v shape");
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; b * n * n];
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            let qb = &qd[bi * n * d..(bi + 1) * n * d];
            let kb = &kd[bi * n * d..(bi + 1) * n * d];
            let vb = &vd[bi * n * c..(bi + 1) * n * c];
            let pb = &mut probs[bi * n * n..(bi + 1) * n * n];
            gemm(n, d, n, qb, false, kb, true, pb, 0.0);
            for row in pb.chunks_mut(n) {
                let mut m = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    m = m.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            gemm(
                n,
                n,
                c,
                pb,
                false,
                vb,
                false,
                &mut out[bi * n * c..(bi + 1) * n * c],
                0.0,
            );
        }
        self.attention_macs += (b * n * n * (d + c)) as u64;
        let value = Tensor::from_vec(&[b, n, c], out).expect("attention shape");
        let rg = self.rg(&[q, k, v]);
        self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
        )
    }

    /// `[A, B, C] -> [A, C]`, averaging over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (a, b, c) = (s[0], s[1], s[2]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; a * c];
        for ai in 0..a {
            for bi in 0..b {
                for ci in 0..c {
                    out[ai * c + ci] += xs[(ai * b + bi) * c + ci];
                }
            }
        }
        for v in &mut out {
            *v /= b as f64;
        }
        let value = Tensor::from_vec(&[a, c], out).expect("mean1 shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::MeanAxis1(x))
    }

    /// `[A, C] -> [C]`, averaging over the leading axis.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (a, c) = (s[0], s[1]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c];
        for ai in 0..a {
            for ci in 0..c {
                out[ci] += xs[ai * c + ci];
            }
        }
        for v in &mut out {
            *v /= a as f64;
        }
        let value = Tensor::from_vec(&[c], out).expect("mean0 shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::MeanAxis0(x))
    }

    /// Global average pool `[C, H, W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let n = h * w;
        let xs = self.value(x).data();
        let out = (0..c)
            .map(|ch| xs[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let value = Tensor::from_vec(&[c], out).expect("gap shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::SpatialMean(x))
    }

    /// `w: [O, C] · e: [C] -> [O]`.
    pub fn matvec(&mut self, w: Var, e: Var) -> Var {
        let ws = self.value(w).shape().to_vec();
        let (o, c) = (ws[0], ws[1]);
        assert_eq!(self.value(e).numel(), c, "matvec inner dimension");
        let (wd, ed) = (self.value(w).data(), self.value(e).data());
        let out = (0..o)
            .map(|i| (0..c).map(|j| wd[i * c + j] * ed[j]).sum())
            .collect();
        let value = Tensor::from_vec(&[o], out).expect("matvec shape");
        let rg = self.rg(&[w, e]);
        self.push(value, rg, Op::MatVec(w, e))
    }

    /// 3x3 box filter with replicated borders.
    pub fn box_filter3(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for yy in box_taps(y, h) {
                        for xk in box_taps(xx, w) {
                            acc += plane[yy * w + xk];
                        }
                    }
                    out[(ch * h + y) * w + xx] = acc / 9.0;
                }
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out).expect("box shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::BoxFilter3(x))
    }

    // ------------------------------------------------------------------
    // losses & reductions
    // ------------------------------------------------------------------

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        self.unary(x, Op::SmoothL1(x, beta), |v| smooth_l1(v, beta))
    }

    /// Mean of `x` over positions where `mask` is set; 0 (with zero gradient)
    /// when the mask is empty.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Var {
        let xs = self.value(x).data();
        assert_eq!(xs.len(), mask.len(), "mask length");
        let count = mask.iter().filter(|&&m| m).count();
        let sum: f64 = xs
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.requires_grad(x);
        self.push(
            Tensor::scalar(mean),
            rg,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(self.value(v).shape(), data).expect("grad shape")
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (c, h, wd) = self.value(*x).dims3();
                let ws = self.value(*w).shape();
                let (o, k) = (ws[0], ws[2]);
                let (_, ho, wo) = node.value.dims3();
                let ckk = c * k * k;
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, ho * wo, ckk, g, false, cols, true, &mut dw, 0.0);
                    let t = self.grad_like(*w, dw);
                    self.accumulate(grads, *w, t);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = g.chunks(ho * wo).map(|ch| ch.iter().sum()).collect();
                        let t = self.grad_like(*b, db);
                        self.accumulate(grads, *b, t);
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; ckk * ho * wo];
                    gemm(
                        ckk,
                        o,
                        ho * wo,
                        self.value(*w).data(),
                        true,
                        g,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let dx = col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo);
                    let t = self.grad_like(*x, dx);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (c, h, w) = self.value(*x).dims3();
                let n = h * w;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let dg = (0..c)
                        .map(|ch| (ch * n..(ch + 1) * n).map(|i| g[i] * xhat[i]).sum())
                        .collect();
                    let t = self.grad_like(*gamma, dg);
                    self.accumulate(grads, *gamma, t);
                }
                if self.requires_grad(*beta) {
                    let db = g.chunks(n).map(|ch| ch.iter().sum()).collect();
                    let t = self.grad_like(*beta, db);
                    self.accumulate(grads, *beta, t);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; c * n];
                    for ch in 0..c {
                        let r = ch * n..(ch + 1) * n;
                        if *batch {
                            let nf = n as f64;
                            let sum_d: f64 = r.clone().map(|i| g[i] * gam[ch]).sum();
                            let sum_dx: f64 = r.clone().map(|i| g[i] * gam[ch] * xhat[i]).sum();
                            for i in r {
                                let dxh = g[i] * gam[ch];
                                dx[i] = inv_std[ch] / nf * (nf * dxh - sum_d - xhat[i] * sum_dx);
                            }
                        } else {
                            for i in r {
                                dx[i] = g[i] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    let t = self.grad_like(*x, dx);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                let d = g.iter().zip(xs).map(|(g, &v)| g * sign(v)).collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let d = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let t = self.grad_like(*a, d);
                    self.accumulate(grads, *a, t);
                }
                if self.requires_grad(*b) {
                    let d = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    let t = self.grad_like(*b, d);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let d = g.iter().zip(bv).map(|(g, b)| g / b).collect();
                    let t = self.grad_like(*a, d);
                    self.accumulate(grads, *a, t);
                }
                if self.requires_grad(*b) {
                    let d = g
                        .iter()
                        .zip(bv)
                        .zip(out)
                        .map(|((g, b), o)| -g * o / b)
                        .collect();
                    let t = self.grad_like(*b, d);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, gy.clone()),
            Op::MulScalar(x, s) => self.accumulate(grads, *x, gy.map(|v| v * s)),
            Op::ScaleChannels(x, gate) => {
                let (c, h, w) = self.value(*x).dims3();
                let n = h * w;
                let gv = self.value(*gate).data();
                if self.requires_grad(*x) {
                    let d = (0..c * n).map(|i| g[i] * gv[i / n]).collect();
                    let t = self.grad_like(*x, d);
                    self.accumulate(grads, *x, t);
                }
                if self.requires_grad(*gate) {
                    let xs = self.value(*x).data();
                    let d = (0..c)
                        .map(|ch| (ch * n..(ch + 1) * n).map(|i| g[i] * xs[i]).sum())
                        .collect();
                    let t = self.grad_like(*gate, d);
                    self.accumulate(grads, *gate, t);
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                let ta = self.grad_like(*a, g[..na].to_vec());
                let tb = self.grad_like(*b, g[na..].to_vec());
                self.accumulate(grads, *a, ta);
                self.accumulate(grads, *b, tb);
            }
            Op::UpsampleNearest(x, factor) => {
                let (c, h, w) = self.value(*x).dims3();
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(ch * h + y / factor) * w + xx / factor] +=
                                g[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::UpsampleBilinear(x, factor) => {
                let (c, h, w) = self.value(*x).dims3();
                let (ho, wo) = (h * factor, w * factor);
                let ys = bilinear_taps(h, *factor);
                let xs_t = bilinear_taps(w, *factor);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, tx)) in xs_t.iter().enumerate() {
                            let gv = g[(ch * ho + oy) * wo + ox];
                            plane[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                            plane[y0 * w + x1] += gv * (1.0 - ty) * tx;
                            plane[y1 * w + x0] += gv * ty * (1.0 - tx);
                            plane[y1 * w + x1] += gv * ty * tx;
                        }
                    }
                }
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Warp { img, disp } => {
                let (c, h, w) = self.value(*img).dims3();
                let src = self.value(*img).data();
                let dv = self.value(*disp).data();
                let mut dimg = vec![0.0; c * h * w];
                let mut ddisp = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (x0, x1, t, inside) = warp_tap(x as f64 - dv[y * w + x], w);
                        for ch in 0..c {
                            let row = (ch * h + y) * w;
                            let gv = g[row + x];
                            dimg[row + x0] += gv * (1.0 - t);
                            dimg[row + x1] += gv * t;
                            if inside {
                                // d(sample)/d(disp) = -(I[x1] - I[x0])
                                ddisp[y * w + x] -= gv * (src[row + x1] - src[row + x0]);
                            }
                        }
                    }
                }
                let t = self.grad_like(*img, dimg);
                self.accumulate(grads, *img, t);
                let t = self.grad_like(*disp, ddisp);
                self.accumulate(grads, *disp, t);
            }
            Op::Normalize { x, inv_norm } => {
                let (c, h, w) = self.value(*x).dims3();
                let n = h * w;
                let mut d = vec![0.0; c * n];
                for p in 0..n {
                    let dot: f64 = (0..c).map(|ch| out[ch * n + p] * g[ch * n + p]).sum();
                    for ch in 0..c {
                        let i = ch * n + p;
                        d[i] = (g[i] - out[i] * dot) * inv_norm[p];
                    }
                }
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Correlation { l, r } => {
                let (c, h, w) = self.value(*l).dims3();
                let (dn, _, _) = node.value.dims3();
                let n = h * w;
                let (ls, rs) = (self.value(*l).data(), self.value(*r).data());
                let want_l = self.requires_grad(*l);
                let want_r = self.requires_grad(*r);
                let mut dl = vec![0.0; if want_l { c * n } else { 0 }];
                let mut dr = vec![0.0; if want_r { c * n } else { 0 }];
                for d in 0..dn {
                    let gp = &g[d * n..(d + 1) * n];
                    for ch in 0..c {
                        let base_c = ch * n;
                        for y in 0..h {
                            let base = base_c + y * w;
                            for x in d..w {
                                let gv = gp[y * w + x];
                                if want_l {
                                    dl[base + x] += gv * rs[base + x - d];
                                }
                                if want_r {
                                    dr[base + x - d] += gv * ls[base + x];
                                }
                            }
                        }
                    }
                }
                if want_l {
                    let t = self.grad_like(*l, dl);
                    self.accumulate(grads, *l, t);
                }
                if want_r {
                    let t = self.grad_like(*r, dr);
                    self.accumulate(grads, *r, t);
                }
            }
            Op::SoftArgmax {
                logits,
                probs,
                temperature,
            } => {
                let (dn, h, w) = self.value(*logits).dims3();
                let n = h * w;
                let mut d = vec![0.0; dn * n];
                for p in 0..n {
                    for k in 0..dn {
                        d[k * n + p] = g[p] * probs[k * n + p] * (k as f64 - out[p]) / temperature;
                    }
                }
                let t = self.grad_like(*logits, d);
                self.accumulate(grads, *logits, t);
            }
            Op::Tokens(x, layout) => {
                let (c, h, w) = self.value(*x).dims3();
                let n = match layout {
                    TokenLayout::Rows => w,
                    TokenLayout::Cols => h,
                    TokenLayout::Full => h * w,
                };
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let (bi, ni) = token_index(*layout, y, xx, w);
                            d[(ch * h + y) * w + xx] = g[(bi * n + ni) * c + ch];
                        }
                    }
                }
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Linear(x, w) => {
                let ws = self.value(*w).shape();
                let (c, dout) = (ws[0], ws[1]);
                let m = self.value(*x).numel() / c;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * c];
                    gemm(
                        m,
                        dout,
                        c,
                        g,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dx,
                        0.0,
                    );
                    let t = self.grad_like(*x, dx);
                    self.accumulate(grads, *x, t);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; c * dout];
                    gemm(
                        c,
                        m,
                        dout,
                        self.value(*x).data(),
                        true,
                        g,
                        false,
                        &mut dw,
                        0.0,
                    );
                    let t = self.grad_like(*w, dw);
                    self.accumulate(grads, *w, t);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let qs = self.value(*q).shape();
                let (b, n, d) = (qs[0], qs[1], qs[2]);
                let c = self.value(*v).shape()[2];
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; b * n * d];
                let mut dk = vec![0.0; b * n * d];
                let mut dv = vec![0.0; b * n * c];
                let mut dp = vec![0.0; n * n];
                for bi in 0..b {
                    let pb = &probs[bi * n * n..(bi + 1) * n * n];
                    let gb = &g[bi * n * c..(bi + 1) * n * c];
                    let vb = &vd[bi * n * c..(bi + 1) * n * c];
                    // dV = P^T dO
                    gemm(
                        n,
                        n,
                        c,
                        pb,
                        true,
                        gb,
                        false,
                        &mut dv[bi * n * c..(bi + 1) * n * c],
                        0.0,
                    );
                    // dP = dO V^T
                    gemm(n, c, n, gb, false, vb, true, &mut dp, 0.0);
                    // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(d) scale
                    for i in 0..n {
                        let row = i * n..(i + 1) * n;
                        let dot: f64 = row.clone().map(|j| dp[j] * pb[j]).sum();
                        for j in row {
                            dp[j] = pb[j] * (dp[j] - dot) * scale;
                        }
                    }
                    let qb = &qd[bi * n * d..(bi + 1) * n * d];
                    let kb = &kd[bi * n * d..(bi + 1) * n * d];
                    gemm(
                        n,
                        n,
                        d,
                        &dp,
                        false,
                        kb,
                        false,
                        &mut dq[bi * n * d..(bi + 1) * n * d],
                        0.0,
                    );
                    gemm(
                        n,
                        n,
                        d,
                        &dp,
                        true,
                        qb,
                        false,
                        &mut dk[bi * n * d..(bi + 1) * n * d],
                        0.0,
                    );
                }
                for (var, data) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.requires_grad(var) {
                        let t = self.grad_like(var, data);
                        self.accumulate(grads, var, t);
                    }
                }
            }
            Op::MeanAxis1(x) => {
                let s = self.value(*x).shape();
                let (a, b, c) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; a * b * c];
                for ai in 0..a {
                    for bi in 0..b {
                        for ci in 0..c {
                            d[(ai * b + bi) * c + ci] = g[ai * c + ci] / b as f64;
                        }
                    }
                }
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::MeanAxis0(x) => {
                let s = self.value(*x).shape();
                let (a, c) = (s[0], s[1]);
                let d = (0..a * c).map(|i| g[i % c] / a as f64).collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::SpatialMean(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let n = h * w;
                let d = (0..c * n).map(|i| g[i / n] / n as f64).collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::MatVec(w, e) => {
                let ws = self.value(*w).shape();
                let (o, c) = (ws[0], ws[1]);
                if self.requires_grad(*w) {
                    let ed = self.value(*e).data();
                    let d = (0..o * c).map(|i| g[i / c] * ed[i % c]).collect();
                    let t = self.grad_like(*w, d);
                    self.accumulate(grads, *w, t);
                }
                if self.requires_grad(*e) {
                    let wd = self.value(*w).data();
                    let d = (0..c)
                        .map(|j| (0..o).map(|i| g[i] * wd[i * c + j]).sum())
                        .collect();
                    let t = self.grad_like(*e, d);
                    self.accumulate(grads, *e, t);
                }
            }
            Op::BoxFilter3(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g[(ch * h + y) * w + xx] / 9.0;
                            for yy in box_taps(y, h) {
                                for xk in box_taps(xx, w) {
                                    plane[yy * w + xk] += gv;
                                }
                            }
                        }
                    }
                }
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::SmoothL1(x, beta) => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(g, &v)| g * if v.abs() < *beta { v / beta } else { sign(v) })
                    .collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::MaskedMean { x, mask, count } => {
                let scale = if *count == 0 {
                    0.0
                } else {
                    g[0] / *count as f64
                };
                let d = mask.iter().map(|&m| if m { scale } else { 0.0 }).collect();
                let t = self.grad_like(*x, d);
                self.accumulate(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let t = self.grad_like(*x, vec![g[0] / n as f64; n]);
                self.accumulate(grads, *x, t);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(v: f64, beta: f64) -> f64 {
    let a = v.abs();
    if a < beta {
        0.5 * v * v / beta
    } else {
        a - 0.5 * beta
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn token_index(layout: TokenLayout, y: usize, x: usize, w: usize) -> (usize, usize) {
    match layout {
        TokenLayout::Rows => (y, x),
        TokenLayout::Cols => (x, y),
        TokenLayout::Full => (0, y * w + x),
    }
}

fn box_taps(i: usize, n: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(n - 1)]
}

fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Interpolation taps for a horizontal sample at `xs`; the flag is false when
/// the coordinate was clamped (no gradient w.r.t. the coordinate there).
fn warp_tap(xs: f64, w: usize) -> (usize, usize, f64, bool) {
    let max = (w - 1) as f64;
    if xs <= 0.0 {
        return (0, 0, 0.0, false);
    }
    if xs >= max {
        return (w - 1, w - 1, 0.0, false);
    }
    let x0 = xs.floor() as usize;
    (x0, (x0 + 1).min(w - 1), xs - x0 as f64, true)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c = a · b + beta · c` for row-major operands; `*_t` reads the stored
/// matrix transposed (`a` stored `[k, m]`, `b` stored `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
