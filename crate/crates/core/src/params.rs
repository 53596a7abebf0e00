//! Learnable parameter groups.
//!
//! Every group is generic over its leaf type: `T = Tensor` for stored
//! weights, `T = Var` once the weights are bound onto a [`Graph`]. Names are
//! dotted paths (`blocks.2.wq`) and fix the order used by checkpoints and the
//! optimizer.

use rand::Rng;

use crate::tensor::{Graph, Tensor, Var};

macro_rules! param_group {
    ($(#[$meta:meta])* pub struct $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

param_group! {
    /// Patch projections and positional embeddings.
    pub struct EmbedParams { e_z, e_x, pos_z, pos_x }
}

param_group! {
    /// One pre-norm transformer block: attention projections, 4× GELU MLP
    /// and two layer norms.
    pub struct BlockWeights {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
    }
}

param_group! {
    /// Skip construction, upsampling path, mask head and decoder-token
    /// projections. `*_w` matrices act as 1×1 convolutions on `C×(h·w)` maps.
    pub struct DecoderWeights {
        skip_up_w, skip_up_b,
        fuse_w, fuse_b,
        coarse_w, coarse_b,
        up_mid_w, skip_mid_w, mid_b,
        up_fine_w, skip_fine_w, fine_b,
        head_w, head_b,
        tok_coarse_w, tok_coarse_b,
        tok_mid_w, tok_mid_b,
        tok_fine_w, tok_fine_b,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub mem_init: T,
    pub update_blocks: Vec<BlockWeights<T>>,
    pub enhance: BlockWeights<T>,
    pub decoder: DecoderWeights<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: self.embed.map("embed.", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}."), f))
                .collect(),
            mem_init: f("mem_init", &self.mem_init),
            update_blocks: self
                .update_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("update_blocks.{i}."), f))
                .collect(),
            enhance: self.enhance.map("enhance.", f),
            decoder: self.decoder.map("decoder.", f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        self.embed.visit("embed.", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), f);
        }
        f("mem_init", &self.mem_init);
        for (i, b) in self.update_blocks.iter().enumerate() {
            b.visit(&format!("update_blocks.{i}."), f);
        }
        self.enhance.visit("enhance.", f);
        self.decoder.visit("decoder.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        self.embed.visit_mut("embed.", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), f);
        }
        f("mem_init", &mut self.mem_init);
        for (i, b) in self.update_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("update_blocks.{i}."), f);
        }
        self.enhance.visit_mut("enhance.", f);
        self.decoder.visit_mut("decoder.", f);
    }
}

impl ModelParams<Tensor> {
    /// Places every weight on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| graph.leaf(t.clone(), requires_grad))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Same structure, every tensor replaced by zeros.
    pub fn zeros_like(&self) -> ModelParams<Tensor> {
        self.map(&mut |_, t| Tensor::zeros(t.shape().to_vec()))
    }
}

/// LeCun-normal matrix `fan_in × fan_out`, entries N(0, 1/fan_in).
pub(crate) fn lecun<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl BlockWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let hidden = dim * mlp_ratio;
        BlockWeights {
            ln1_g: Tensor::full([dim], 1.0),
            ln1_b: Tensor::zeros([dim]),
            wq: lecun(dim, dim, rng),
            bq: Tensor::zeros([dim]),
            wk: lecun(dim, dim, rng),
            bk: Tensor::zeros([dim]),
            wv: lecun(dim, dim, rng),
            bv: Tensor::zeros([dim]),
            wo: lecun(dim, dim, rng),
            bo: Tensor::zeros([dim]),
            ln2_g: Tensor::full([dim], 1.0),
            ln2_b: Tensor::zeros([dim]),
            w1: lecun(dim, hidden, rng),
            b1: Tensor::zeros([hidden]),
            w2: lecun(hidden, dim, rng),
            b2: Tensor::zeros([dim]),
        }
    }
}
