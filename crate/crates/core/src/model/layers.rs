use super::params::{Bound, Group, Init, ParamBuilder};
use crate::numerics::Var;

/// Affine map with a `[in, out]` weight.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, group: Group, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::Normal };
        Linear {
            w: pb.add(format!("{name}.w"), &[d_in, d_out], group, init),
            b: pb.add(format!("{name}.b"), &[d_out], group, Init::Zeros),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.matmul(p.p(self.w)).add_row(p.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    g: usize,
    b: usize,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, group: Group, eps: f64) -> Self {
        LayerNorm {
            g: pb.add(format!("{name}.gain"), &[dim], group, Init::Ones),
            b: pb.add(format!("{name}.bias"), &[dim], group, Init::Zeros),
            eps,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(p.p(self.g), p.p(self.b), self.eps)
    }
}

/// 1-D convolution over `[len, channels]` signals.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        group: Group,
    ) -> Self {
        Conv {
            w: pb.add(format!("{name}.w"), &[kernel, c_in, c_out], group, Init::Normal),
            b: pb.add(format!("{name}.b"), &[c_out], group, Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.conv1d(p.p(self.w), p.p(self.b), self.stride, self.pad)
    }

    /// Transposed direction, producing `out_len` positions.
    pub fn forward_transposed<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>, out_len: usize) -> Var<'g> {
        x.conv_transpose1d(p.p(self.w), p.p(self.b), self.stride, self.pad, out_len)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    /// `kv_dim` is the width of the attended-to sequence.
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, kv_dim: usize, heads: usize, group: Group) -> Self {
        Attention {
            q: Linear::new(pb, &format!("{name}.q"), dim, dim, group, false),
            k: Linear::new(pb, &format!("{name}.k"), kv_dim, dim, group, false),
            v: Linear::new(pb, &format!("{name}.v"), kv_dim, dim, group, false),
            o: Linear::new(pb, &format!("{name}.o"), dim, dim, group, false),
            heads,
            head_dim: dim / heads,
        }
    }

    /// `x` attends to `ctx`; with `causal`, position `i` sees only `ctx[..=i]`.
    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>, ctx: Var<'g>, causal: bool) -> Var<'g> {
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, ctx);
        let v = self.v.forward(p, ctx);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (s, w) = (h * self.head_dim, self.head_dim);
                let (qh, kh, vh) = if self.heads == 1 {
                    (q, k, v)
                } else {
                    (q.cols(s, w), k.cols(s, w), v.cols(s, w))
                };
                qh.matmul_bt(kh).scale(scale).softmax(causal).matmul(vh)
            })
            .collect();
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)
        };
        self.o.forward(p, merged)
    }
}
