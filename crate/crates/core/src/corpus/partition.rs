use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BiasType, StereoInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Stereotype,
    AntiStereotype,
    Unrelated,
}

/// A candidate text together with the context it continues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub instance_id: String,
    pub bias_type: BiasType,
    pub context: String,
    pub text: String,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub step: u64,
    pub bias_type: BiasType,
    pub swapped: bool,
}

/// Which side of each bias type is currently forgotten.
///
/// A type absent from `swapped` is in its default polarity: stereotypes are
/// forgotten, anti-stereotypes retained.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionState {
    pub swapped: BTreeMap<BiasType, bool>,
    pub swap_log: Vec<SwapEvent>,
}

impl PartitionState {
    pub fn is_swapped(&self, bias_type: BiasType) -> bool {
        self.swapped.get(&bias_type).copied().unwrap_or(false)
    }
}

/// Toggles the polarity of `bias_type` and records the event.
///
/// Several types may flip at the same probe, so log steps are non-decreasing;
/// a step earlier than the last logged one is rejected.
pub fn apply_swap(state: &PartitionState, bias_type: BiasType, step: u64) -> Result<PartitionState> {
    if let Some(last) = state.swap_log.last() {
        if step < last.step {
            return Err(Error::Config(format!(
                "swap at step {step} precedes last logged swap at step {}",
                last.step
            )));
        }
    }
    let mut next = state.clone();
    let flag = !state.is_swapped(bias_type);
    next.swapped.insert(bias_type, flag);
    next.swap_log.push(SwapEvent {
        step,
        bias_type,
        swapped: flag,
    });
    Ok(next)
}

/// Forget-side entry: the passage being forgotten plus the same instance's
/// opposite-role text, which chunk assembly may inject as an adversarial
/// member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgetEntry {
    pub primary: Passage,
    pub counterpart: Passage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partitions {
    pub forget: Vec<ForgetEntry>,
    pub retain: Vec<Passage>,
    pub unrelated: Vec<Passage>,
    pub adversarial_fraction: f64,
}

fn passage(inst: &StereoInstance, role: Role) -> Passage {
    let text = match role {
        Role::Stereotype => &inst.stereotype,
        Role::AntiStereotype => &inst.anti_stereotype,
        Role::Unrelated => &inst.unrelated,
    };
    Passage {
        instance_id: inst.id.clone(),
        bias_type: inst.bias_type,
        context: inst.context.clone(),
        text: text.clone(),
        role,
    }
}

/// Splits instances into forget / retain / unrelated pools under `state`.
pub fn build_partitions(
    instances: &[StereoInstance],
    state: &PartitionState,
    adversarial_fraction: f64,
) -> Result<Partitions> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch("build_partitions needs at least one instance"));
    }
    if !(0.0..0.5).contains(&adversarial_fraction) {
        return Err(Error::Config(format!(
            "adversarial_fraction must lie in [0, 0.5), got {adversarial_fraction}"
        )));
    }
    let mut forget = Vec::with_capacity(instances.len());
    let mut retain = Vec::with_capacity(instances.len());
    let mut unrelated = Vec::with_capacity(instances.len());
    for inst in instances {
        let (f, r) = if state.is_swapped(inst.bias_type) {
            (Role::AntiStereotype, Role::Stereotype)
        } else {
            (Role::Stereotype, Role::AntiStereotype)
        };
        forget.push(ForgetEntry {
            primary: passage(inst, f),
            counterpart: passage(inst, r),
        });
        retain.push(passage(inst, r));
        unrelated.push(passage(inst, Role::Unrelated));
    }
    Ok(Partitions {
        forget,
        retain,
        unrelated,
        adversarial_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn instances(n: usize, bias_type: BiasType) -> Vec<StereoInstance> {
        (0..n)
            .map(|i| StereoInstance {
                id: format!("{bias_type}-{i}"),
                bias_type,
                context: format!("ctx {i}"),
                stereotype: format!("stereo {i}"),
                anti_stereotype: format!("anti {i}"),
                unrelated: format!("unrel {i}"),
            })
            .collect()
    }

    #[test]
    fn default_polarity() {
        let insts = instances(10, BiasType::Gender);
        let p = build_partitions(&insts, &PartitionState::default(), 0.0).unwrap();
        assert_eq!(p.forget.len(), 10);
        assert!(p.forget.iter().all(|e| e.primary.role == Role::Stereotype));
        assert!(p.retain.iter().all(|e| e.role == Role::AntiStereotype));
        assert_eq!(p.unrelated.len(), 10);
        assert_eq!(p.forget[3].primary.text, "stereo 3");
        assert_eq!(p.retain[3].text, "anti 3");
    }

    #[test]
    fn swapped_polarity() {
        let insts = instances(10, BiasType::Gender);
        let state = apply_swap(&PartitionState::default(), BiasType::Gender, 50).unwrap();
        let p = build_partitions(&insts, &state, 0.0).unwrap();
        assert!(p.forget.iter().all(|e| e.primary.role == Role::AntiStereotype));
        assert!(p.retain.iter().all(|e| e.role == Role::Stereotype));
        assert_eq!(p.forget[0].counterpart.text, "stereo 0");
    }

    #[test]
    fn swap_only_touches_one_type() {
        let mut insts = instances(4, BiasType::Gender);
        insts.extend(instances(4, BiasType::Race));
        let state = apply_swap(&PartitionState::default(), BiasType::Gender, 1).unwrap();
        let p = build_partitions(&insts, &state, 0.0).unwrap();
        for e in &p.forget {
            let expect = match e.primary.bias_type {
                BiasType::Gender => Role::AntiStereotype,
                _ => Role::Stereotype,
            };
            assert_eq!(e.primary.role, expect);
        }
        assert!(!state.is_swapped(BiasType::Race));
    }

    #[test]
    fn toggle_twice_is_identity_and_log_grows() {
        let s0 = PartitionState::default();
        let s1 = apply_swap(&s0, BiasType::Gender, 50).unwrap();
        let s2 = apply_swap(&s1, BiasType::Gender, 100).unwrap();
        let s3 = apply_swap(&s2, BiasType::Gender, 150).unwrap();
        assert!(!s2.is_swapped(BiasType::Gender));
        assert_eq!(s3.swap_log.len(), 3);
        let steps: Vec<u64> = s3.swap_log.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![50, 100, 150]);
        assert!(apply_swap(&s3, BiasType::Race, 10).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_partitions(&[], &PartitionState::default(), 0.0).is_err());
        let insts = instances(2, BiasType::Gender);
        assert!(build_partitions(&insts, &PartitionState::default(), 0.5).is_err());
        assert!(build_partitions(&insts, &PartitionState::default(), -0.1).is_err());
    }

    proptest! {
        #[test]
        fn partition_bijective(n in 1usize..20, flips in proptest::collection::vec(0usize..4, 0..6)) {
            let mut insts = Vec::new();
            for t in BiasType::STEREOSET {
                insts.extend(instances(n, t));
            }
            let mut state = PartitionState::default();
            for (step, f) in flips.iter().enumerate() {
                state = apply_swap(&state, BiasType::STEREOSET[*f], step as u64).unwrap();
            }
            let base = build_partitions(&insts, &PartitionState::default(), 0.0).unwrap();
            let p = build_partitions(&insts, &state, 0.0).unwrap();
            prop_assert_eq!(p.forget.len(), insts.len());
            prop_assert_eq!(p.retain.len(), insts.len());
            for (i, inst) in insts.iter().enumerate() {
                prop_assert_eq!(&p.forget[i].primary.instance_id, &inst.id);
                prop_assert_eq!(&p.retain[i].instance_id, &inst.id);
                prop_assert_ne!(p.forget[i].primary.role, p.retain[i].role);
            }
            let mut a: Vec<String> = base.forget.iter().map(|e| e.primary.text.clone())
                .chain(base.retain.iter().map(|r| r.text.clone())).collect();
            let mut b: Vec<String> = p.forget.iter().map(|e| e.primary.text.clone())
                .chain(p.retain.iter().map(|r| r.text.clone())).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
