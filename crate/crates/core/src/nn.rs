//! Transformer building blocks reading their weights from a [`ParamStore`]
//! through a [`Ctx`]. Every block is addressed by a name prefix; parameter
//! names are `{prefix}.{field}`.
//!
//! Residual wiring is pre-norm: each sub-layer sees `layernorm(h)` and adds
//! its output back onto `h`. Bert-style blocks finish with an output
//! layernorm, so a block whose sub-layer outputs are all zero reduces to
//! `layernorm(x)`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, Group, ParamStore};
use crate::tensor::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub activation: Activation,
}

/// Composition rule of a Bert-style block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockWiring {
    /// Pre-norm residual sub-layers plus an output layernorm.
    Residual,
    /// Plain `ffn(xattn(attn(x), y))` with no residuals or norms.
    Bare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub cross: bool,
    pub wiring: BlockWiring,
}

impl BlockConfig {
    fn attn(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            causal: false,
        }
    }

    fn ffn(&self) -> FfnConfig {
        FfnConfig {
            d_model: self.d_model,
            d_hidden: self.d_ff,
            activation: Activation::Gelu,
        }
    }
}

fn pname(prefix: &str, field: &str) -> String {
    format!("{prefix}.{field}")
}

/// Weight matrices use `N(0, 1/fan_in)`, biases start at zero.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    group: Group,
    rng: &mut Rng,
) -> Result<()> {
    store.randn(
        pname(prefix, "w"),
        &[d_in, d_out],
        (d_in as f64).powf(-0.5),
        group,
        rng,
    )?;
    store.zeros(pname(prefix, "b"), &[d_out], group)
}

pub fn init_layernorm(store: &mut ParamStore, prefix: &str, d: usize, group: Group) -> Result<()> {
    store.ones(pname(prefix, "gamma"), &[d], group)?;
    store.zeros(pname(prefix, "beta"), &[d], group)
}

pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    group: Group,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(
            store,
            &pname(prefix, proj),
            cfg.d_model,
            cfg.d_model,
            group,
            rng,
        )?;
    }
    Ok(())
}

pub fn init_ffn(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &FfnConfig,
    group: Group,
    rng: &mut Rng,
) -> Result<()> {
    if cfg.d_hidden == 0 {
        return Err(Error::Config("ffn hidden width must be >= 1".into()));
    }
    init_linear(
        store,
        &pname(prefix, "fc1"),
        cfg.d_model,
        cfg.d_hidden,
        group,
        rng,
    )?;
    init_linear(
        store,
        &pname(prefix, "fc2"),
        cfg.d_hidden,
        cfg.d_model,
        group,
        rng,
    )
}

pub fn init_bert_block(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BlockConfig,
    group: Group,
    rng: &mut Rng,
) -> Result<()> {
    let d = cfg.d_model;
    init_attention(store, &pname(prefix, "self_attn"), &cfg.attn(), group, rng)?;
    if cfg.cross {
        init_attention(store, &pname(prefix, "cross_attn"), &cfg.attn(), group, rng)?;
    }
    init_ffn(store, &pname(prefix, "ffn"), &cfg.ffn(), group, rng)?;
    if cfg.wiring == BlockWiring::Residual {
        init_layernorm(store, &pname(prefix, "ln_self"), d, group)?;
        if cfg.cross {
            init_layernorm(store, &pname(prefix, "ln_cross"), d, group)?;
        }
        init_layernorm(store, &pname(prefix, "ln_ffn"), d, group)?;
        init_layernorm(store, &pname(prefix, "ln_out"), d, group)?;
    }
    Ok(())
}

/// `x @ {prefix}.w + {prefix}.b`
pub fn linear(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&pname(prefix, "w"))?;
    let b = ctx.param(&pname(prefix, "b"))?;
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add(y, b)
}

pub fn layernorm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let g = ctx.param(&pname(prefix, "gamma"))?;
    let b = ctx.param(&pname(prefix, "beta"))?;
    ctx.tape.layernorm(x, g, b, LN_EPS)
}

/// Multi-head attention of `x[B,L,D]` over itself, or over `kv[B,M,D]` when given.
pub fn attention(
    ctx: &mut Ctx,
    prefix: &str,
    x: Var,
    kv: Option<Var>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    cfg.validate()?;
    let xs = ctx.tape.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != cfg.d_model {
        return Err(Error::shape(format!(
            "attention input {xs:?} does not end in d_model {}",
            cfg.d_model
        )));
    }
    if let Some(kv) = kv {
        if cfg.causal {
            return Err(Error::contract("causal attention takes no key/value input"));
        }
        let ks = ctx.tape.shape(kv);
        if ks.len() != 3 || ks[2] != cfg.d_model || ks[0] != xs[0] {
            return Err(Error::shape(format!(
                "cross-attention source {ks:?} vs query {xs:?}"
            )));
        }
    }
    let src = kv.unwrap_or(x);
    let q = linear(ctx, &pname(prefix, "q"), x)?;
    let k = linear(ctx, &pname(prefix, "k"), src)?;
    let v = linear(ctx, &pname(prefix, "v"), src)?;
    let a = ctx.tape.attention(q, k, v, cfg.n_heads, cfg.causal)?;
    linear(ctx, &pname(prefix, "o"), a)
}

pub fn ffn(ctx: &mut Ctx, prefix: &str, x: Var, cfg: &FfnConfig) -> Result<Var> {
    let d = ctx.tape.value(x).last_dim();
    if d != cfg.d_model {
        return Err(Error::shape(format!(
            "ffn input width {d} != d_model {}",
            cfg.d_model
        )));
    }
    let h = linear(ctx, &pname(prefix, "fc1"), x)?;
    let h = match cfg.activation {
        Activation::Relu => ctx.tape.relu(h),
        Activation::Gelu => ctx.tape.gelu(h),
    };
    linear(ctx, &pname(prefix, "fc2"), h)
}

/// Self-attention, then cross-attention onto `y` (when configured), then FFN.
pub fn bert_block(
    ctx: &mut Ctx,
    prefix: &str,
    x: Var,
    y: Option<Var>,
    cfg: &BlockConfig,
) -> Result<Var> {
    if cfg.cross && y.is_none() {
        return Err(Error::contract(format!(
            "{prefix}: cross-attention block needs a source"
        )));
    }
    let attn = cfg.attn();
    let ffn_cfg = cfg.ffn();
    match cfg.wiring {
        BlockWiring::Residual => {
            let n = layernorm(ctx, &pname(prefix, "ln_self"), x)?;
            let a = attention(ctx, &pname(prefix, "self_attn"), n, None, &attn)?;
            let mut h = ctx.tape.add(x, a)?;
            if cfg.cross {
                let n = layernorm(ctx, &pname(prefix, "ln_cross"), h)?;
                let a = attention(ctx, &pname(prefix, "cross_attn"), n, y, &attn)?;
                h = ctx.tape.add(h, a)?;
            }
            let n = layernorm(ctx, &pname(prefix, "ln_ffn"), h)?;
            let f = ffn(ctx, &pname(prefix, "ffn"), n, &ffn_cfg)?;
            let h = ctx.tape.add(h, f)?;
            layernorm(ctx, &pname(prefix, "ln_out"), h)
        }
        BlockWiring::Bare => {
            let mut h = attention(ctx, &pname(prefix, "self_attn"), x, None, &attn)?;
            if cfg.cross {
                h = attention(ctx, &pname(prefix, "cross_attn"), h, y, &attn)?;
            }
            ffn(ctx, &pname(prefix, "ffn"), h, &ffn_cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, Tape};
    use crate::params::on_tape;
    use crate::tensor::Tensor;

    fn store_with_attention(d: usize, heads: usize, seed: u64) -> (ParamStore, AttentionConfig) {
        let cfg = AttentionConfig {
            d_model: d,
            n_heads: heads,
            causal: false,
        };
        let mut s = ParamStore::new();
        init_attention(&mut s, "a", &cfg, Group::Bridge, &mut Rng::new(seed)).unwrap();
        (s, cfg)
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let (s, cfg) = store_with_attention(4, 2, 1);
        let x = Tensor::randn(&[1, 1, 4], &mut Rng::new(2), 1.0).unwrap();
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x);
        let out = attention(&mut ctx, "a", xv, None, &cfg).unwrap();
        let v = linear(&mut ctx, "a.v", xv).unwrap();
        let expect = linear(&mut ctx, "a.o", v).unwrap();
        assert!(ctx.tape.value(out).max_abs_diff(ctx.tape.value(expect)) < 1e-14);
    }

    #[test]
    fn causal_prefix_is_unaffected_by_future_tokens() {
        let (s, mut cfg) = store_with_attention(8, 2, 3);
        cfg.causal = true;
        let x = Tensor::randn(&[1, 5, 8], &mut Rng::new(4), 1.0).unwrap();
        let run = |x: Tensor| {
            let mut ctx = Ctx::inference(&s);
            let xv = ctx.tape.constant(x);
            let o = attention(&mut ctx, "a", xv, None, &cfg).unwrap();
            ctx.tape.value(o).clone()
        };
        let base = run(x.clone());
        for t in 0..4 {
            let mut p = x.clone();
            for c in 0..8 {
                p.data_mut()[(t + 1) * 8 + c] += 0.7;
            }
            let out = run(p);
            let n = (t + 1) * 8;
            assert!(base.data()[..n]
                .iter()
                .zip(&out.data()[..n])
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(base);
        assert!(attention(&mut ctx, "a", xv, Some(xv), &cfg).is_err());
    }

    #[test]
    fn attention_grad_check_two_tokens_one_head() {
        let (s, cfg) = store_with_attention(4, 1, 5);
        let x = Tensor::randn(&[1, 2, 4], &mut Rng::new(6), 1.0).unwrap();
        let r = grad_check(
            |tape, xv| {
                on_tape(&s, tape, |ctx| {
                    let o = attention(ctx, "a", xv, None, &cfg)?;
                    let sq = ctx.tape.mul(o, o)?;
                    Ok(ctx.tape.sum(sq))
                })
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn cross_attention_rejects_width_mismatch() {
        let (s, cfg) = store_with_attention(4, 1, 5);
        let mut ctx = Ctx::inference(&s);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 2, 4]).unwrap());
        let y = ctx.tape.constant(Tensor::zeros(&[1, 2, 3]).unwrap());
        assert!(matches!(
            attention(&mut ctx, "a", x, Some(y), &cfg),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn ffn_zero_weights_and_identity() {
        let cfg = FfnConfig {
            d_model: 3,
            d_hidden: 3,
            activation: Activation::Relu,
        };
        let mut s = ParamStore::new();
        init_ffn(&mut s, "f", &cfg, Group::LmBase, &mut Rng::new(1)).unwrap();
        for n in ["f.fc1.w", "f.fc2.w"] {
            *s.get_mut(n).unwrap() = Tensor::zeros(&[3, 3]).unwrap();
        }
        let x = Tensor::new(&[1, 2, 3], vec![0.5, 1.0, 2.0, 0.0, 3.0, 0.25]).unwrap();
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x.clone());
        let y = ffn(&mut ctx, "f", xv, &cfg).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));

        for n in ["f.fc1.w", "f.fc2.w"] {
            *s.get_mut(n).unwrap() = Tensor::eye(3).unwrap();
        }
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x.clone());
        let y = ffn(&mut ctx, "f", xv, &cfg).unwrap();
        assert!(ctx.tape.value(y).bit_eq(&x));
    }

    #[test]
    fn ffn_matches_hand_composed_chain() {
        let cfg = FfnConfig {
            d_model: 3,
            d_hidden: 5,
            activation: Activation::Gelu,
        };
        let mut s = ParamStore::new();
        init_ffn(&mut s, "f", &cfg, Group::LmBase, &mut Rng::new(9)).unwrap();
        *s.get_mut("f.fc1.b").unwrap() = Tensor::randn(&[5], &mut Rng::new(10), 1.0).unwrap();
        let x = Tensor::randn(&[2, 3], &mut Rng::new(11), 1.0).unwrap();
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x.clone());
        let y = ffn(&mut ctx, "f", xv, &cfg).unwrap();

        // Independent oracle: explicit loops over the stored weights.
        let w1 = s.get("f.fc1.w").unwrap().data();
        let b1 = s.get("f.fc1.b").unwrap().data();
        let w2 = s.get("f.fc2.w").unwrap().data();
        let b2 = s.get("f.fc2.b").unwrap().data();
        let gelu = |v: f64| {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        for r in 0..2 {
            let h: Vec<f64> = (0..5)
                .map(|j| {
                    gelu(
                        (0..3)
                            .map(|i| x.data()[r * 3 + i] * w1[i * 5 + j])
                            .sum::<f64>()
                            + b1[j],
                    )
                })
                .collect();
            for c in 0..3 {
                let o = (0..5).map(|j| h[j] * w2[j * 3 + c]).sum::<f64>() + b2[c];
                assert!((o - ctx.tape.value(y).data()[r * 3 + c]).abs() < 1e-12);
            }
        }
    }

    fn block_store(wiring: BlockWiring, seed: u64) -> (ParamStore, BlockConfig) {
        let cfg = BlockConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            cross: true,
            wiring,
        };
        let mut s = ParamStore::new();
        init_bert_block(&mut s, "blk", &cfg, Group::Aggregator, &mut Rng::new(seed)).unwrap();
        (s, cfg)
    }

    #[test]
    fn bert_block_needs_cross_source() {
        let (s, cfg) = block_store(BlockWiring::Residual, 1);
        let mut ctx = Ctx::inference(&s);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 3, 8]).unwrap());
        assert!(matches!(
            bert_block(&mut ctx, "blk", x, None, &cfg),
            Err(Error::Contract(_))
        ));
        let out = bert_block(&mut ctx, "blk", x, Some(x), &cfg).unwrap();
        assert_eq!(ctx.tape.shape(out), &[1, 3, 8]);
    }

    #[test]
    fn zeroed_branches_leave_output_layernorm_of_input() {
        let (mut s, cfg) = block_store(BlockWiring::Residual, 2);
        for n in ["blk.self_attn.o.w", "blk.cross_attn.o.w"] {
            *s.get_mut(n).unwrap() = Tensor::zeros(&[8, 8]).unwrap();
        }
        *s.get_mut("blk.ffn.fc2.w").unwrap() = Tensor::zeros(&[16, 8]).unwrap();
        *s.get_mut("blk.ln_out.gamma").unwrap() =
            Tensor::randn(&[8], &mut Rng::new(3), 1.0).unwrap();
        let x = Tensor::randn(&[1, 3, 8], &mut Rng::new(4), 1.0).unwrap();
        let y = Tensor::randn(&[1, 5, 8], &mut Rng::new(5), 1.0).unwrap();
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x.clone());
        let yv = ctx.tape.constant(y);
        let out = bert_block(&mut ctx, "blk", xv, Some(yv), &cfg).unwrap();

        let gamma = s.get("blk.ln_out.gamma").unwrap().data();
        for r in 0..3 {
            let row = &x.data()[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let e = (row[c] - mean) / (var + LN_EPS).sqrt() * gamma[c];
                assert!((e - ctx.tape.value(out).data()[r * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bare_block_is_plain_composition() {
        let (s, cfg) = block_store(BlockWiring::Bare, 6);
        let x = Tensor::randn(&[1, 3, 8], &mut Rng::new(7), 1.0).unwrap();
        let y = Tensor::randn(&[1, 4, 8], &mut Rng::new(8), 1.0).unwrap();
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x);
        let yv = ctx.tape.constant(y);
        let out = bert_block(&mut ctx, "blk", xv, Some(yv), &cfg).unwrap();
        let attn = cfg.attn();
        let a = attention(&mut ctx, "blk.self_attn", xv, None, &attn).unwrap();
        let c = attention(&mut ctx, "blk.cross_attn", a, Some(yv), &attn).unwrap();
        let f = ffn(&mut ctx, "blk.ffn", c, &cfg.ffn()).unwrap();
        assert!(ctx.tape.value(out).bit_eq(ctx.tape.value(f)));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (s, cfg) = block_store(BlockWiring::Residual, 12);
        let x = Tensor::randn(&[2, 3, 8], &mut Rng::new(13), 1.0).unwrap();
        let y = Tensor::randn(&[2, 4, 8], &mut Rng::new(14), 1.0).unwrap();
        let swap = |t: &Tensor| {
            let half = t.numel() / 2;
            let mut d = t.data()[half..].to_vec();
            d.extend_from_slice(&t.data()[..half]);
            Tensor::new(t.shape(), d).unwrap()
        };
        let run = |x: Tensor, y: Tensor| {
            let mut ctx = Ctx::inference(&s);
            let xv = ctx.tape.constant(x);
            let yv = ctx.tape.constant(y);
            let o = bert_block(&mut ctx, "blk", xv, Some(yv), &cfg).unwrap();
            ctx.tape.value(o).clone()
        };
        let a = run(x.clone(), y.clone());
        let b = run(swap(&x), swap(&y));
        assert!(swap(&a).bit_eq(&b));
    }

    #[test]
    fn bert_block_grad_check() {
        for wiring in [BlockWiring::Residual, BlockWiring::Bare] {
            let (s, cfg) = block_store(wiring, 15);
            let y = Tensor::randn(&[1, 3, 8], &mut Rng::new(16), 1.0).unwrap();
            let x = Tensor::randn(&[1, 3, 8], &mut Rng::new(17), 1.0).unwrap();
            let probe = Tensor::randn(&[1, 3, 8], &mut Rng::new(18), 1.0).unwrap();
            let r = grad_check(
                |tape: &mut Tape, xv| {
                    on_tape(&s, tape, |ctx| {
                        let yv = ctx.tape.constant(y.clone());
                        let o = bert_block(ctx, "blk", xv, Some(yv), &cfg)?;
                        let p = ctx.tape.constant(probe.clone());
                        let w = ctx.tape.mul(o, p)?;
                        Ok(ctx.tape.sum(w))
                    })
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{wiring:?}: {r:?}");
        }
    }
}
