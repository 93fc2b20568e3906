//! Low-rank adapters on square attention projections.
//!
//! An adapted weight computes `W0 + A B` with `A: d x r` and `B: r x d`.
//! Adapters live in the same parameter store as the model, under
//! `lora/<weight name>/A` and `lora/<weight name>/B`; the forward pass picks
//! them up automatically (see [`crate::models::layers::linear`]).

use kd_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;

pub const PREFIX: &str = "lora/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScope {
    EncoderOnly,
    EncoderAndDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<Projection>,
    pub scope: LoraScope,
}

impl LoraConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            targets: vec![Projection::Query, Projection::Value],
            scope: LoraScope::EncoderAndDecoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(CoreError::Lora("rank must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(CoreError::Lora("no target projections".into()));
        }
        Ok(())
    }
}

/// One adapter as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub target_name: String,
    pub a: Tensor,
    pub b: Tensor,
}

impl AdapterPair {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Tensor {
        self.a.matmul(&self.b).expect("adapter factors conform")
    }
}

/// Store names of the `(A, B)` factors for a base weight.
pub fn adapter_names(target: &str) -> (String, String) {
    (format!("{PREFIX}{target}/A"), format!("{PREFIX}{target}/B"))
}

fn is_adapter(name: &str) -> bool {
    name.starts_with(PREFIX)
}

/// Base weights selected by `cfg`: q/v projections of every attention
/// layer under `encoder.`, plus `decoder.` when the scope includes it.
pub fn resolve_targets(store: &ParamStore, cfg: &LoraConfig) -> Vec<String> {
    let mut prefixes = vec!["encoder."];
    if cfg.scope == LoraScope::EncoderAndDecoder {
        prefixes.push("decoder.");
    }
    store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .filter(|n| {
            cfg.targets
                .iter()
                .any(|t| n.ends_with(&format!(".attn.{}.weight", t.short())))
        })
        .map(str::to_string)
        .collect()
}

fn square_weights(store: &ParamStore) -> Vec<String> {
    store
        .iter()
        .filter(|p| {
            !is_adapter(&p.name) && p.value.shape().len() == 2 && p.value.rows() == p.value.cols()
        })
        .map(|p| p.name.clone())
        .collect()
}

/// Attaches a rank-`rank` adapter to each named square weight. `A` is drawn
/// from N(0, 0.01²) and `B` is zero, so the adapted model initially computes
/// exactly what the base model does.
pub fn inject_named(
    store: &mut ParamStore,
    targets: &[String],
    rank: usize,
    seed: u64,
) -> Result<()> {
    if targets.is_empty() {
        return Err(CoreError::Lora("no target weights".into()));
    }
    for t in targets {
        let shape = match store.get(t) {
            Some(v) => v.shape().to_vec(),
            None => {
                return Err(CoreError::Lora(format!(
                    "no weight named `{t}`; square weights available: {}",
                    square_weights(store).join(", ")
                )))
            }
        };
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(CoreError::Lora(format!("`{t}` is not square: {shape:?}")));
        }
        let d = shape[0];
        if rank == 0 || 2 * rank > d {
            return Err(CoreError::Lora(format!(
                "rank {rank} is outside 1..={} for `{t}`",
                d / 2
            )));
        }
        let (a_name, _) = adapter_names(t);
        if store.contains(&a_name) {
            return Err(CoreError::Lora(format!("`{t}` already has an adapter")));
        }
    }
    let mut r = rng::stream(seed, "lora-init");
    for t in targets {
        let d = store.get(t).unwrap().rows();
        let (a_name, b_name) = adapter_names(t);
        let a = Tensor::matrix(d, rank, rng::normal_vec(&mut r, d * rank, 0.01)).unwrap();
        store.insert(a_name, a, true)?;
        store.insert(b_name, Tensor::zeros(&[rank, d]), true)?;
    }
    freeze_base(store);
    Ok(())
}

/// Resolves targets from `cfg` and injects adapters.
pub fn inject(store: &mut ParamStore, cfg: &LoraConfig, seed: u64) -> Result<Vec<String>> {
    cfg.validate()?;
    let targets = resolve_targets(store, cfg);
    inject_named(store, &targets, cfg.rank, seed)?;
    Ok(targets)
}

/// Freezes every non-adapter parameter except the decoder output layer,
/// which is task specific and always retrained.
pub fn freeze_base(store: &mut ParamStore) {
    let ids: Vec<(usize, bool)> = store
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                i,
                is_adapter(&p.name) || p.name.starts_with("decoder.head."),
            )
        })
        .collect();
    for (i, trainable) in ids {
        store.set_trainable(i, trainable);
    }
}

pub fn adapters(store: &ParamStore) -> Vec<AdapterPair> {
    store
        .names()
        .filter_map(|n| {
            n.strip_prefix(PREFIX)?
                .strip_suffix("/A")
                .map(str::to_string)
        })
        .filter_map(|target| {
            let (a, b) = adapter_names(&target);
            Some(AdapterPair {
                a: store.get(&a)?.clone(),
                b: store.get(&b)?.clone(),
                target_name: target,
            })
        })
        .collect()
}

pub fn has_adapters(store: &ParamStore) -> bool {
    store.names().any(is_adapter)
}

/// Folds every adapter into its base weight (`W := W0 + A B`), removes the
/// adapters and makes all parameters trainable again.
pub fn merge(store: &mut ParamStore) -> Result<usize> {
    let pairs = adapters(store);
    if pairs.is_empty() {
        return Err(CoreError::Lora("no adapters to merge".into()));
    }
    for p in &pairs {
        let mut w = store
            .get(&p.target_name)
            .ok_or_else(|| CoreError::Lora(format!("adapter target `{}` missing", p.target_name)))?
            .clone();
        w.add_assign(&p.delta());
        store.set(&p.target_name, w)?;
        let (a, b) = adapter_names(&p.target_name);
        store.remove(&a);
        store.remove(&b);
    }
    store.set_all_trainable(true);
    Ok(pairs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    /// All non-adapter parameters.
    pub base_count: usize,
    pub base_frozen_count: usize,
    pub adapter_count: usize,
    /// `adapter_count / base_count`.
    pub ratio: f64,
}

pub fn trainable_parameter_report(store: &ParamStore) -> TrainableReport {
    let (mut base, mut frozen, mut adapter) = (0, 0, 0);
    for p in store.iter() {
        let n = p.value.len();
        if is_adapter(&p.name) {
            adapter += n;
        } else {
            base += n;
            if !p.trainable {
                frozen += n;
            }
        }
    }
    TrainableReport {
        base_count: base,
        base_frozen_count: frozen,
        adapter_count: adapter,
        ratio: if base == 0 {
            0.0
        } else {
            adapter as f64 / base as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_of_unit_factors() {
        let p = AdapterPair {
            target_name: "w".into(),
            a: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            b: Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(),
        };
        assert_eq!(p.delta().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_target_lists_available() {
        let mut s = ParamStore::new();
        s.insert("x.attn.q.weight", Tensor::zeros(&[4, 4]), true)
            .unwrap();
        let err = inject_named(&mut s, &["nope".into()], 1, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("x.attn.q.weight"), "{err}");
    }

    #[test]
    fn rank_bound_enforced() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[4, 4]), true).unwrap();
        assert!(inject_named(&mut s, &["w".into()], 3, 0).is_err());
        assert!(inject_named(&mut s, &["w".into()], 2, 0).is_ok());
    }
}
