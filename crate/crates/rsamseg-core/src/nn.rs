//! Parameter storage and the neural layers shared by encoder and decoder.
//!
//! All parameters live in a [`ParamStore`] keyed by hierarchical names
//! (`encoder.block0.attn.q.weight`). Layer structs hold only names and
//! dimensions; a forward pass goes through a [`Fwd`] context that turns each
//! parameter into a tape leaf exactly once, so parameters used several times
//! (for example a projection shared across layers) accumulate gradients from
//! every use site.

use std::cell::RefCell;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Which part of the model a parameter belongs to. Drives the freeze policy
/// and the per-group counts reported by the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    AdapterScale,
    AdapterFeature,
    Decoder,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::AdapterScale => "adapter_scale",
            ParamGroup::AdapterFeature => "adapter_feature",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub value: ArrayD<S>,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: ArrayD<S>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::parameter(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                group,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar elements in one group.
    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Number of scalar elements marked trainable.
    pub fn count_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_total(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable_by_group(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.values_mut() {
            if p.group == group {
                p.trainable = trainable;
            }
        }
    }
}

/// Forward-pass context: wraps a tape and hands out one leaf per parameter.
pub struct Fwd<'a, S: Scalar> {
    pub tape: &'a Tape<S>,
    store: &'a ParamStore<S>,
    leaves: RefCell<IndexMap<String, Var>>,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(tape: &'a Tape<S>, store: &'a ParamStore<S>) -> Self {
        Fwd {
            tape,
            store,
            leaves: RefCell::new(IndexMap::new()),
        }
    }

    /// Tape leaf for a named parameter (created on first use, cached after).
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let var = self.tape.leaf(self.store.get(name).value.clone());
        self.leaves.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// All parameter leaves touched by this forward pass, in first-use order.
    pub fn touched(&self) -> Vec<(String, Var)> {
        self.leaves
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// Truncated normal: rejection-sample outside two standard deviations.
pub fn trunc_normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> ArrayD<S> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, std).expect("std must be positive and finite");
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                return S::from_f64(v);
            }
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    /// Fan-aware uniform init that keeps forward and backward signal
    /// variance near one. For `[din, dout]` weights the fans are the two
    /// axes; for `[cin, cout, kh, kw]` stride-matched deconvolution kernels
    /// they are the channel counts.
    Xavier,
    Zeros,
    Ones,
}

pub fn init_array<S: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha12Rng) -> ArrayD<S> {
    match init {
        Init::TruncNormal(std) => trunc_normal(shape, std, rng),
        Init::Xavier => {
            use rand::Rng;
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| {
                S::from_f64(rng.gen_range(-bound..bound))
            })
        }
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::ones(IxDyn(shape)),
    }
}

/// Default weight scale for fresh projections.
pub const WEIGHT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Dense layer `y = x W + b` with weight `[din, dout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        group: ParamGroup,
        name: &str,
        din: usize,
        dout: usize,
        weight_init: Init,
    ) -> Result<Linear> {
        store.insert(
            &format!("{name}.weight"),
            group,
            init_array(&[din, dout], weight_init, rng),
        )?;
        store.insert(&format!("{name}.bias"), group, init_array(&[dout], Init::Zeros, rng))?;
        Ok(Linear {
            name: name.to_string(),
            din,
            dout,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        let b = f.param(&format!("{}.bias", self.name));
        f.tape.add_bias(f.tape.matmul(x, w), b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        group: ParamGroup,
        name: &str,
        dim: usize,
    ) -> Result<LayerNorm> {
        store.insert(&format!("{name}.gamma"), group, ArrayD::ones(IxDyn(&[dim])))?;
        store.insert(&format!("{name}.beta"), group, ArrayD::zeros(IxDyn(&[dim])))?;
        Ok(LayerNorm {
            name: name.to_string(),
            dim,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var) -> Var {
        let gamma = f.param(&format!("{}.gamma", self.name));
        let beta = f.param(&format!("{}.beta", self.name));
        f.tape.layer_norm(x, gamma, beta, S::from_f64(LN_EPS))
    }
}

/// Multi-head self-attention with separate query/key/value projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        group: ParamGroup,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Attention> {
        if dim % heads != 0 {
            return Err(Error::config(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        let std = Init::Xavier;
        Ok(Attention {
            q: Linear::init(store, rng, group, &format!("{name}.q"), dim, dim, std)?,
            k: Linear::init(store, rng, group, &format!("{name}.k"), dim, dim, std)?,
            v: Linear::init(store, rng, group, &format!("{name}.v"), dim, dim, std)?,
            proj: Linear::init(store, rng, group, &format!("{name}.proj"), dim, dim, std)?,
            dim,
            heads,
        })
    }

    fn split_heads<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var, b: usize, n: usize) -> Var {
        let dh = self.dim / self.heads;
        let r = f.tape.reshape(x, &[b, n, self.heads, dh]);
        f.tape.permute(r, &[0, 2, 1, 3]) // [B, H, N, dh]
    }

    /// Self-attention over `[B, N, D]` tokens.
    pub fn forward<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var) -> Var {
        self.forward_qkv(f, x, x, x)
    }

    /// Attention with independent sources: queries from `xq` `[B, Nq, D]`,
    /// keys from `xk` and values from `xv` (both `[B, Nk, D]`). Distinct key
    /// and value sources let position encodings enter the keys without
    /// contaminating the values.
    pub fn forward_qkv<S: Scalar>(&self, f: &Fwd<'_, S>, xq: Var, xk: Var, xv: Var) -> Var {
        let qs = f.tape.shape(xq);
        let ks = f.tape.shape(xk);
        assert_eq!(ks, f.tape.shape(xv), "key/value token counts differ");
        let (b, nq, nk) = (qs[0], qs[1], ks[1]);
        let t = f.tape;
        let dh = self.dim / self.heads;
        let q = self.split_heads(f, self.q.forward(f, xq), b, nq);
        let k = self.split_heads(f, self.k.forward(f, xk), b, nk);
        let v = self.split_heads(f, self.v.forward(f, xv), b, nk);
        let scores = t.scale(
            t.bmm(q, t.transpose_last2(k)),
            S::from_f64(1.0 / (dh as f64).sqrt()),
        );
        let attn = t.softmax_last(scores);
        let ctx = t.bmm(attn, v); // [B, H, Nq, dh]
        let merged = t.reshape(t.permute(ctx, &[0, 2, 1, 3]), &[b, nq, self.dim]);
        self.proj.forward(f, merged)
    }
}

/// Two-layer MLP with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        group: ParamGroup,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Mlp> {
        let std = Init::Xavier;
        Ok(Mlp {
            fc1: Linear::init(store, rng, group, &format!("{name}.fc1"), dim, hidden, std)?,
            fc2: Linear::init(store, rng, group, &format!("{name}.fc2"), hidden, dim, std)?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var) -> Var {
        self.fc2.forward(f, f.tape.gelu(self.fc1.forward(f, x)))
    }
}

/// Bottleneck adapter: `scale * Up(ReLU(Down(x)))`. The up-projection starts
/// at zero so a fresh adapter is the zero map and the surrounding block
/// reduces to its unmodified form.
#[derive(Debug, Clone)]
pub struct AdapterScale {
    pub down: Linear,
    pub up: Linear,
    pub scale: f64,
}

impl AdapterScale {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        bottleneck: usize,
        scale: f64,
    ) -> Result<AdapterScale> {
        if bottleneck >= dim {
            return Err(Error::config(format!(
                "adapter bottleneck {bottleneck} must be smaller than width {dim}"
            )));
        }
        let group = ParamGroup::AdapterScale;
        Ok(AdapterScale {
            down: Linear::init(
                store,
                rng,
                group,
                &format!("{name}.down"),
                dim,
                bottleneck,
                Init::Xavier,
            )?,
            up: Linear::init(
                store,
                rng,
                group,
                &format!("{name}.up"),
                bottleneck,
                dim,
                Init::Zeros,
            )?,
            scale,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var) -> Var {
        let t = f.tape;
        t.scale(
            self.up.forward(f, t.relu(self.down.forward(f, x))),
            S::from_f64(self.scale),
        )
    }
}
