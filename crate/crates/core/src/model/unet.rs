//! Prior transport: a small 1-D Unet over the latent tokens, added residually
//! to its input.

use super::config::ModelConfig;
use super::layers::{Conv, LayerNorm};
use super::params::{Bound, Group, ParamBuilder};
use crate::numerics::autodiff::conv_out_len;
use crate::numerics::Var;

const G: Group = Group::Alpha;

/// Convolution, layer norm over channels, GELU.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: LayerNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, stride: usize, eps: f64) -> Self {
        ConvBlock {
            conv: Conv::new(pb, &format!("{name}.conv"), c_in, c_out, 3, stride, 1, G),
            norm: LayerNorm::new(pb, &format!("{name}.norm"), c_out, G, eps),
        }
    }

    fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        self.norm.forward(p, self.conv.forward(p, x)).gelu()
    }

    fn forward_up<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>, out_len: usize) -> Var<'g> {
        self.norm.forward(p, self.conv.forward_transposed(p, x, out_len)).gelu()
    }
}

/// Two stride-2 down blocks doubling channels, a bottleneck, and two transposed
/// up blocks each followed by a merge of the matching skip connection.
#[derive(Clone, Debug)]
pub(crate) struct Unet {
    input: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    mid: ConvBlock,
    up1: ConvBlock,
    merge1: ConvBlock,
    up2: ConvBlock,
    merge2: ConvBlock,
    output: Conv,
}

impl Unet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let (c, w, eps) = (cfg.latent_channels, cfg.unet_width, cfg.ln_eps);
        Unet {
            input: ConvBlock::new(pb, "unet.input", c, w, 1, eps),
            down1: ConvBlock::new(pb, "unet.down1", w, 2 * w, 2, eps),
            down2: ConvBlock::new(pb, "unet.down2", 2 * w, 4 * w, 2, eps),
            mid: ConvBlock::new(pb, "unet.mid", 4 * w, 4 * w, 1, eps),
            up1: ConvBlock::new(pb, "unet.up1", 4 * w, 2 * w, 2, eps),
            merge1: ConvBlock::new(pb, "unet.merge1", 4 * w, 2 * w, 1, eps),
            up2: ConvBlock::new(pb, "unet.up2", 2 * w, w, 2, eps),
            merge2: ConvBlock::new(pb, "unet.merge2", 2 * w, w, 1, eps),
            output: Conv::new(pb, "unet.output", w, c, 1, 1, 0, G),
        }
    }

    /// `x` is `[k, c]`; the result has the same shape.
    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        let len0 = x.shape()[0];
        let len1 = conv_out_len(len0, 3, 2, 1);
        let skip0 = self.input.forward(p, x);
        let skip1 = self.down1.forward(p, skip0);
        let h = self.down2.forward(p, skip1);
        let h = self.mid.forward(p, h);
        let h = self.up1.forward_up(p, h, len1);
        let h = self.merge1.forward(p, Var::concat_cols(&[h, skip1]));
        let h = self.up2.forward_up(p, h, len0);
        let h = self.merge2.forward(p, Var::concat_cols(&[h, skip0]));
        x.add(self.output.forward(p, h))
    }
}
