//! The full per-target network: embedding, joint blocks, memory token,
//! enhancement and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, PropagationMode};
use crate::decoder::{decode, make_decoder_tokens, make_skips};
use crate::embed::{embed_tokens, interpolate_pos_embed_var, patchify, sincos_pos_table, TokenKind};
use crate::error::{Error, Result};
use crate::joint_block::{block_forward_traced, build_attention_pattern, MaskOptions, TokenLayout};
use crate::memory::{enhance_current_traced, update_with_decoder_tokens};
use crate::params::{lecun, BlockWeights, DecoderWeights, EmbedParams, ModelParams};
use crate::tensor::{AttnPattern, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let p2 = cfg.patch * cfg.patch;
        let embed = EmbedParams {
            e_z: lecun(4 * p2, d, &mut rng),
            e_x: lecun(3 * p2, d, &mut rng),
            // both tables start from the same grid code so that equal
            // positions in reference and current frames match from the start
            pos_z: sincos_pos_table(cfg.grid(), d),
            pos_x: sincos_pos_table(cfg.grid(), d),
        };
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights::init(d, cfg.mlp_ratio, &mut rng))
            .collect();
        let mem_init = Tensor::randn([1, d], 0.02, &mut rng);
        let update_blocks = (0..cfg.update_blocks)
            .map(|_| BlockWeights::init(d, cfg.mlp_ratio, &mut rng))
            .collect();
        let enhance = BlockWeights::init(d, cfg.mlp_ratio, &mut rng);
        let decoder = DecoderWeights::init(d, &mut rng);
        Ok(Model {
            cfg,
            params: ModelParams {
                embed,
                blocks,
                mem_init,
                update_blocks,
                enhance,
                decoder,
            },
        })
    }

    /// Checks that `params` has the shapes `cfg` implies.
    pub fn from_parts(cfg: ModelConfig, params: ModelParams) -> Result<Self> {
        let reference = Model::init(cfg.clone(), 0)?;
        let mut expected = Vec::new();
        reference.params.visit(&mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
        let mut got = Vec::new();
        params.visit(&mut |name, t| got.push((name.to_string(), t.shape().to_vec())));
        if expected != got {
            return Err(Error::Config("parameters do not match the model configuration".into()));
        }
        Ok(Model { cfg, params })
    }
}

/// Per-frame switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: PropagationMode,
    pub topk: Option<usize>,
    /// Memory row attends to the reference tokens inside the backbone.
    pub memory_sees_refs: bool,
    /// Keep attention nodes for inspection.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn new(mode: PropagationMode) -> Self {
        ForwardOptions {
            mode,
            topk: None,
            memory_sees_refs: true,
            trace: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `1×H×W` pre-sigmoid logits.
    pub logits: Var,
    /// `1×H×W` foreground probability.
    pub probs: Var,
    /// Memory token after the decoder-token update.
    pub memory: Option<Var>,
    pub layout: TokenLayout,
    /// Attention nodes of the backbone blocks (when tracing).
    pub attention: Vec<Var>,
    /// Enhancement gate node (when tracing with memory on).
    pub gate: Option<Var>,
}

/// One target, one frame. `refs` are `4×H×W` frame+mask pairs; `memory` is
/// the `1×D` memory token when the model uses one.
pub fn frame_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    cur: &Tensor,
    refs: &[Tensor],
    memory: Option<Var>,
    opts: &ForwardOptions,
) -> Result<FrameOutput> {
    let [c, h, w] = *cur.shape() else {
        return Err(Error::Input(format!("current frame must be 3×H×W, got {:?}", cur.shape())));
    };
    if c != 3 {
        return Err(Error::Input(format!("current frame must have 3 channels, got {c}")));
    }
    if refs.is_empty() {
        return Err(Error::Input("at least one reference pair is required".into()));
    }
    if cfg.memory != memory.is_some() {
        return Err(Error::Contract("memory token presence must match the configuration".into()));
    }
    let pp = cfg.patch;
    if h % pp != 0 || w % pp != 0 {
        return Err(Error::Input(format!("frame {h}x{w} is not divisible by patch size {pp}")));
    }
    let grid = (h / pp, w / pp);
    let n = grid.0 * grid.1;

    let mut embed = p.embed.clone();
    if grid != cfg.grid() {
        embed.pos_x = interpolate_pos_embed_var(g, p.embed.pos_x, cfg.grid(), grid)?;
        embed.pos_z = interpolate_pos_embed_var(g, p.embed.pos_z, cfg.grid(), grid)?;
    }

    let mut seq = Vec::with_capacity(refs.len() + 2);
    if let Some(m) = memory {
        seq.push(m);
    }
    for r in refs {
        if r.shape() != [4, h, w] {
            return Err(Error::dim("reference pair", r.shape(), &[4, h, w]));
        }
        let patches = g.constant(patchify(r, pp)?);
        seq.push(embed_tokens(g, patches, &embed, TokenKind::Reference)?);
    }
    let patches = g.constant(patchify(cur, pp)?);
    seq.push(embed_tokens(g, patches, &embed, TokenKind::Current)?);
    let mut x = g.concat_rows(&seq)?;

    let layout = TokenLayout::new(memory.is_some(), &vec![n; refs.len()], n)?;
    let mut patterns: [Option<AttnPattern>; 2] = [None, None];
    let mut attention = Vec::new();
    for (bw, joint) in p.blocks.iter().zip(cfg.joint_flags()) {
        let slot = &mut patterns[usize::from(joint)];
        if slot.is_none() {
            let mask = MaskOptions {
                memory_sees_refs: opts.memory_sees_refs,
                cross_frame: joint,
                topk: opts.topk,
            };
            *slot = Some(build_attention_pattern(&layout, opts.mode, &mask)?);
        }
        let pattern = slot.as_ref().expect("pattern built above");
        let (out, a) = block_forward_traced(g, x, pattern, bw, cfg.heads, cfg.ln_eps)?;
        if opts.trace {
            attention.push(a);
        }
        x = out;
    }

    let cur_tokens = g.slice_rows(x, layout.cur_span.0, n)?;
    let (enhanced, mem_after, gate) = match memory {
        Some(_) => {
            let m = g.slice_rows(x, 0, 1)?;
            let (e, gate) =
                enhance_current_traced(g, cur_tokens, m, &p.enhance, cfg.heads, cfg.ln_eps)?;
            (e, Some(m), opts.trace.then_some(gate))
        }
        None => (g.constant(Tensor::zeros([n, cfg.dim])), None, None),
    };
    let skips = make_skips(g, cur_tokens, grid, &p.decoder)?;
    let (logits, internals) = decode(g, cur_tokens, enhanced, &skips, grid, (h, w), &p.decoder)?;
    let probs = g.sigmoid(logits)?;
    let memory = match mem_after {
        Some(m) => {
            let dec = make_decoder_tokens(g, &internals, logits, grid, &p.decoder)?;
            Some(update_with_decoder_tokens(
                g,
                m,
                dec,
                &p.update_blocks,
                cfg.heads,
                cfg.ln_eps,
            )?)
        }
        None => None,
    };
    Ok(FrameOutput {
        logits,
        probs,
        memory,
        layout,
        attention,
        gate,
    })
}
