//! Multi-level vision aggregator: two cross-attention blocks that fold the
//! middle and shallow encoder layers into the deepest tapped layer,
//! `V = B2(B1(V_i; V_j); V_k)`, where the first argument of each block is the
//! query stream and the second supplies keys and values.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, BlockConfig, BlockWiring};
use crate::params::{Ctx, Group, ParamStore};
use crate::tensor::Rng;

/// Encoder layer indices feeding the aggregator, deepest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapSelection {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// `i = L-1`, `j = floor(2L/3)`, `k = floor(L/3)`.
pub fn select_taps(layers: usize) -> Result<TapSelection> {
    if layers < 6 {
        return Err(Error::TooShallowEncoder(layers));
    }
    Ok(TapSelection {
        i: layers - 1,
        j: 2 * layers / 3,
        k: layers / 3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub wiring: BlockWiring,
    /// Apply a learned linear map to each tap before the blocks.
    pub input_proj: bool,
}

impl AggregatorConfig {
    fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            cross: true,
            wiring: self.wiring,
        }
    }
}

pub fn init_aggregator(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AggregatorConfig,
    rng: &mut Rng,
) -> Result<()> {
    if cfg.input_proj {
        nn::init_linear(
            store,
            &format!("{prefix}.in_proj"),
            cfg.d_model,
            cfg.d_model,
            Group::Aggregator,
            rng,
        )?;
    }
    nn::init_bert_block(
        store,
        &format!("{prefix}.block1"),
        &cfg.block(),
        Group::Aggregator,
        rng,
    )?;
    nn::init_bert_block(
        store,
        &format!("{prefix}.block2"),
        &cfg.block(),
        Group::Aggregator,
        rng,
    )
}

pub fn aggregate(
    ctx: &mut Ctx,
    prefix: &str,
    v_i: Var,
    v_j: Var,
    v_k: Var,
    cfg: &AggregatorConfig,
) -> Result<Var> {
    let s = ctx.tape.shape(v_i).to_vec();
    if ctx.tape.shape(v_j) != s.as_slice() || ctx.tape.shape(v_k) != s.as_slice() {
        return Err(Error::shape(format!(
            "aggregator taps differ in shape: {s:?} {:?} {:?}",
            ctx.tape.shape(v_j),
            ctx.tape.shape(v_k)
        )));
    }
    let (v_i, v_j, v_k) = if cfg.input_proj {
        let p = format!("{prefix}.in_proj");
        (
            nn::linear(ctx, &p, v_i)?,
            nn::linear(ctx, &p, v_j)?,
            nn::linear(ctx, &p, v_k)?,
        )
    } else {
        (v_i, v_j, v_k)
    };
    let block = cfg.block();
    let h = nn::bert_block(ctx, &format!("{prefix}.block1"), v_i, Some(v_j), &block)?;
    nn::bert_block(ctx, &format!("{prefix}.block2"), h, Some(v_k), &block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::nn::LN_EPS;
    use crate::params::on_tape;
    use crate::tensor::Tensor;

    #[test]
    fn tap_rule() {
        assert_eq!(
            select_taps(24).unwrap(),
            TapSelection { i: 23, j: 16, k: 8 }
        );
        assert_eq!(select_taps(6).unwrap(), TapSelection { i: 5, j: 4, k: 2 });
        assert_eq!(select_taps(7).unwrap(), TapSelection { i: 6, j: 4, k: 2 });
        assert!(matches!(select_taps(5), Err(Error::TooShallowEncoder(5))));
    }

    #[test]
    fn tap_ordering_holds_for_all_depths() {
        for l in 6..200 {
            let t = select_taps(l).unwrap();
            assert!(t.k < t.j && t.j < t.i && t.i < l, "L={l}: {t:?}");
        }
    }

    fn cfg(wiring: BlockWiring) -> AggregatorConfig {
        AggregatorConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            wiring,
            input_proj: false,
        }
    }

    fn store(c: &AggregatorConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_aggregator(&mut s, "va", c, &mut Rng::new(seed)).unwrap();
        s
    }

    fn taps(n: usize, seed: u64) -> [Tensor; 3] {
        [0, 1, 2].map(|o| Tensor::randn(&[1, n, 8], &mut Rng::new(seed + o), 1.0).unwrap())
    }

    fn run(s: &ParamStore, c: &AggregatorConfig, t: &[Tensor; 3]) -> Tensor {
        let mut ctx = Ctx::inference(s);
        let [a, b, d] = t.clone().map(|x| ctx.tape.constant(x));
        let o = aggregate(&mut ctx, "va", a, b, d, c).unwrap();
        ctx.tape.value(o).clone()
    }

    #[test]
    fn single_position_shape() {
        let c = cfg(BlockWiring::Residual);
        let s = store(&c, 1);
        assert_eq!(run(&s, &c, &taps(1, 2)).shape(), &[1, 1, 8]);
    }

    #[test]
    fn mismatched_taps_are_rejected() {
        let c = cfg(BlockWiring::Residual);
        let s = store(&c, 1);
        let mut ctx = Ctx::inference(&s);
        let a = ctx.tape.constant(Tensor::zeros(&[1, 2, 8]).unwrap());
        let b = ctx.tape.constant(Tensor::zeros(&[1, 3, 8]).unwrap());
        assert!(aggregate(&mut ctx, "va", a, a, b, &c).is_err());
    }

    #[test]
    fn zeroed_branches_give_norm_cascade_of_deepest_tap() {
        let c = cfg(BlockWiring::Residual);
        let mut s = store(&c, 3);
        for b in ["block1", "block2"] {
            for a in ["self_attn", "cross_attn"] {
                *s.get_mut(&format!("va.{b}.{a}.o.w")).unwrap() = Tensor::zeros(&[8, 8]).unwrap();
            }
            *s.get_mut(&format!("va.{b}.ffn.fc2.w")).unwrap() = Tensor::zeros(&[16, 8]).unwrap();
        }
        let t = taps(3, 4);
        let out = run(&s, &c, &t);
        let norm = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + LN_EPS).sqrt()).collect()
        };
        for r in 0..3 {
            let e = norm(&norm(&t[0].data()[r * 8..(r + 1) * 8]));
            for (a, b) in e.iter().zip(&out.data()[r * 8..(r + 1) * 8]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_and_tap_sensitivity() {
        for w in [BlockWiring::Residual, BlockWiring::Bare] {
            let c = cfg(w);
            let s = store(&c, 5);
            let t = taps(4, 6);
            let base = run(&s, &c, &t);
            let swapped = run(&s, &c, &[t[0].clone(), t[2].clone(), t[1].clone()]);
            assert!(
                base.max_abs_diff(&swapped) > 1e-6,
                "{w:?}: swap of j/k had no effect"
            );
            for which in 0..3 {
                let mut p = t.clone();
                p[which].data_mut()[5] += 0.5;
                assert!(
                    base.max_abs_diff(&run(&s, &c, &p)) > 1e-6,
                    "{w:?}: tap {which} ignored"
                );
            }
        }
    }

    #[test]
    fn grad_check_inputs_and_params() {
        let c = cfg(BlockWiring::Residual);
        let s = store(&c, 7);
        let t = taps(2, 8);
        let probe = Tensor::randn(&[1, 2, 8], &mut Rng::new(11), 1.0).unwrap();
        for which in 0..3 {
            let r = grad_check(
                |tape, xv| {
                    on_tape(&s, tape, |ctx| {
                        let mut vs = t.clone().map(|x| ctx.tape.constant(x));
                        vs[which] = xv;
                        let o = aggregate(ctx, "va", vs[0], vs[1], vs[2], &c)?;
                        let p = ctx.tape.constant(probe.clone());
                        let w = ctx.tape.mul(o, p)?;
                        Ok(ctx.tape.sum(w))
                    })
                },
                &t[which],
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "tap {which}: {r:?}");
        }
        for name in [
            "va.block1.cross_attn.k.w",
            "va.block2.ffn.fc1.w",
            "va.block1.ln_out.gamma",
        ] {
            let r = grad_check(
                |tape, pv| {
                    on_tape(&s, tape, |ctx| {
                        ctx.bind(name, pv);
                        let vs = t.clone().map(|x| ctx.tape.constant(x));
                        let o = aggregate(ctx, "va", vs[0], vs[1], vs[2], &c)?;
                        let p = ctx.tape.constant(probe.clone());
                        let w = ctx.tape.mul(o, p)?;
                        Ok(ctx.tape.sum(w))
                    })
                },
                s.get(name).unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }
}
