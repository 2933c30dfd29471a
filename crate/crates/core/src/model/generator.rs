//! Causal Transformer decoder conditioned on the latent tokens through cross-attention.
//!
//! Output classes are EOS followed by the non-reserved tokens, so PAD and BOS
//! can never be emitted. Class `c` is token id `c + 2`.

use super::config::{CrossAttention, ModelConfig};
use super::layers::{Attention, LayerNorm, Linear};
use super::params::{Bound, Group, Init, ParamBuilder};
use crate::data::{BOS, EOS};
use crate::numerics::Var;

const G: Group = Group::Beta;

pub(crate) fn id_to_class(id: u32) -> usize {
    (id - EOS) as usize
}

pub(crate) fn class_to_id(class: usize) -> u32 {
    class as u32 + EOS
}

#[derive(Clone, Debug)]
struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Generator {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear,
}

impl Generator {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let (e, eps) = (cfg.embed_dim, cfg.ln_eps);
        let tok_emb = pb.add("gen.tok_emb".into(), &[cfg.vocab_size, e], G, Init::Normal);
        let pos_emb = pb.add("gen.pos_emb".into(), &[cfg.max_len, e], G, Init::Normal);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let name = format!("gen.block{l}");
                let with_cross = match cfg.cross_attention {
                    CrossAttention::EveryBlock => true,
                    CrossAttention::FirstBlock => l == 0,
                };
                Block {
                    ln_self: LayerNorm::new(pb, &format!("{name}.ln_self"), e, G, eps),
                    self_attn: Attention::new(pb, &format!("{name}.self"), e, e, cfg.n_heads, G),
                    cross: with_cross.then(|| {
                        (
                            LayerNorm::new(pb, &format!("{name}.ln_cross"), e, G, eps),
                            Attention::new(pb, &format!("{name}.cross"), e, cfg.latent_channels, cfg.n_heads, G),
                        )
                    }),
                    ln_ffn: LayerNorm::new(pb, &format!("{name}.ln_ffn"), e, G, eps),
                    ffn_in: Linear::new(pb, &format!("{name}.ffn_in"), e, cfg.ffn_dim, G, false),
                    ffn_out: Linear::new(pb, &format!("{name}.ffn_out"), cfg.ffn_dim, e, G, false),
                }
            })
            .collect();
        Generator {
            tok_emb,
            pos_emb,
            blocks,
            ln_final: LayerNorm::new(pb, "gen.ln_final", e, G, eps),
            head: Linear::new(pb, "gen.head", e, cfg.n_classes(), G, true),
        }
    }

    /// Logits `[len(prefix) + 1, n_classes]` for the positions after BOS and
    /// after each prefix token. `latent` is `[k, c]`.
    pub fn logits<'g>(&self, p: &Bound<'g, '_>, prefix: &[u32], latent: Var<'g>) -> Var<'g> {
        let inputs: Vec<usize> = std::iter::once(BOS)
            .chain(prefix.iter().copied())
            .map(|i| i as usize)
            .collect();
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let mut h = p
            .p(self.tok_emb)
            .embedding(&inputs)
            .add(p.p(self.pos_emb).embedding(&positions));
        for b in &self.blocks {
            let n = b.ln_self.forward(p, h);
            h = h.add(b.self_attn.forward(p, n, n, true));
            if let Some((ln, attn)) = &b.cross {
                let n = ln.forward(p, h);
                h = h.add(attn.forward(p, n, latent, false));
            }
            let n = b.ln_ffn.forward(p, h);
            h = h.add(b.ffn_out.forward(p, b.ffn_in.forward(p, n).gelu()));
        }
        self.head.forward(p, self.ln_final.forward(p, h))
    }

    /// `Σ_t log p(x_t | x_<t, z)` over every id of `ids`, EOS included when present.
    pub fn log_prob<'g>(&self, p: &Bound<'g, '_>, ids: &[u32], latent: Var<'g>) -> Var<'g> {
        if ids.is_empty() {
            return p.graph().constant(crate::numerics::Tensor::scalar(0.0));
        }
        let logits = self.logits(p, &ids[..ids.len() - 1], latent);
        let targets: Vec<usize> = ids.iter().map(|&i| id_to_class(i)).collect();
        logits.log_softmax().select_sum(&targets)
    }
}
