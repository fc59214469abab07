//! AdamW with decoupled weight decay, and the warmup plus cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Learning rate at step 0 of a warmup.
pub const WARMUP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter name, plus the update count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update of every trainable parameter that has a gradient.
/// Parameters without a gradient this step are left untouched, moments
/// included. `lr_for` gives the learning rate of each group.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr_for: impl Fn(Group) -> f64,
    step: usize,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Divergence {
                step,
                param: name.clone(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let (group, trainable) = match store.param(name) {
            Some(p) => (p.group, p.trainable),
            None => {
                return Err(Error::contract(format!(
                    "gradient for unknown parameter {name}"
                )))
            }
        };
        if !trainable {
            continue;
        }
        let lr = lr_for(group);
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(g));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(g));
        let p = store.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient of {name} has shape {:?}",
                g.shape()
            )));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pi);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_init: f64,
    pub lr_min: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.lr_min <= self.lr_init) || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_min ({}) <= lr_init ({})",
                self.lr_min, self.lr_init
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 1e-8 to `lr_init`, then cosine decay that reaches
/// `lr_min` on the last step.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return WARMUP_FLOOR + (s.lr_init - WARMUP_FLOOR) * step as f64 / s.warmup_steps as f64;
    }
    let span = s.steps.saturating_sub(1).saturating_sub(s.warmup_steps);
    let progress = if span == 0 {
        if step >= s.steps.saturating_sub(1) && s.steps > 1 {
            1.0
        } else {
            0.0
        }
    } else {
        ((step - s.warmup_steps) as f64 / span as f64).min(1.0)
    };
    s.lr_min + 0.5 * (s.lr_init - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            steps: 300,
            warmup_steps: 30,
            lr_init: 1e-3,
            lr_min: 1e-5,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(lr_at(0, &s), 1e-8);
        assert_eq!(lr_at(30, &s), 1e-3);
        assert!((lr_at(299, &s) - 1e-5).abs() < 1e-12);
        let left = lr_at(29, &s);
        assert!(left < 1e-3 && 1e-3 - left < 1e-3 / 29.0);
        for k in 1..300 {
            if k > 30 {
                assert!(lr_at(k, &s) <= lr_at(k - 1, &s));
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule {
            warmup_steps: 300,
            ..sched()
        }
        .validate()
        .is_err());
        assert!(Schedule {
            lr_min: 1.0,
            ..sched()
        }
        .validate()
        .is_err());
        assert!(Schedule {
            steps: 0,
            warmup_steps: 0,
            ..sched()
        }
        .validate()
        .is_err());
        sched().validate().unwrap();
    }

    fn one(v: f64, group: Group, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![v]).unwrap(), group)
            .unwrap();
        if trainable {
            s.set_trainable_groups(&[group].into_iter().collect());
        }
        s
    }

    #[test]
    fn zero_grad_is_pure_decay() {
        let mut s = one(2.0, Group::Gates, true);
        let grads = [("w".to_string(), Tensor::from_vec(vec![0.0]).unwrap())]
            .into_iter()
            .collect();
        let mut st = AdamState::default();
        adamw_step(&mut s, &grads, &mut st, &AdamWConfig::default(), |_| 0.1, 0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0 - 0.1 * 0.05 * 2.0);
    }

    #[test]
    fn first_step_on_half_square_matches_hand_arithmetic() {
        // f(w) = w^2/2 at w = 1: g = 1, m = 0.1, v = 0.001, mhat = 1, vhat = 1
        let mut s = one(1.0, Group::Gates, true);
        let grads = [("w".to_string(), Tensor::from_vec(vec![1.0]).unwrap())]
            .into_iter()
            .collect();
        let mut st = AdamState::default();
        let cfg = AdamWConfig::default();
        adamw_step(&mut s, &grads, &mut st, &cfg, |_| 0.01, 0).unwrap();
        let expect = 1.0 - 0.01 * (1.0 / (1.0 + 1e-8) + 0.05 * 1.0);
        assert!((s.get("w").unwrap().item() - expect).abs() < 1e-15);
        assert!((st.m["w"].item() - 0.1).abs() < 1e-15);
        assert!((st.v["w"].item() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_nan() {
        let mut s = one(1.0, Group::LmBase, false);
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::from_vec(vec![1.0]).unwrap())]
                .into_iter()
                .collect();
        let mut st = AdamState::default();
        for step in 0..100 {
            adamw_step(
                &mut s,
                &grads,
                &mut st,
                &AdamWConfig::default(),
                |_| 0.1,
                step,
            )
            .unwrap();
        }
        assert_eq!(s.get("w").unwrap().item().to_bits(), 1f64.to_bits());
        let bad = [("w".to_string(), Tensor::from_vec(vec![f64::NAN]).unwrap())]
            .into_iter()
            .collect();
        match adamw_step(&mut s, &bad, &mut st, &AdamWConfig::default(), |_| 0.1, 7) {
            Err(Error::Divergence { step, param }) => assert_eq!((step, param.as_str()), (7, "w")),
            other => panic!("{other:?}"),
        }
    }
}
