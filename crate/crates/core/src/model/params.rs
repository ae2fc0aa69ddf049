use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};

use super::{ModelConfig, ModelError};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Patch projection, queries, encoder blocks.
    Encoder,
    /// Mask token, decoder blocks, output projection.
    Decoder,
    /// Pooling query and classifier.
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name == "mask_token" || name.starts_with("dec.") {
            ParamGroup::Decoder
        } else if name.starts_with("pool.") || name.starts_with("head.") {
            ParamGroup::Head
        } else {
            ParamGroup::Encoder
        }
    }
}

/// Named parameter registry. Iteration order is the lexical order of names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize) {
        let (rng, normal) = (&mut self.rng, self.normal);
        let t = Tensor::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.store.params.insert(name, t);
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) {
        self.store.params.insert(name, Tensor::full(&[rows, cols], value));
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.normal(format!("{prefix}.w"), d_in, d_out);
        self.constant(format!("{prefix}.b"), 1, d_out, 0.0);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.constant(format!("{prefix}.g"), 1, d, 1.0);
        self.constant(format!("{prefix}.b"), 1, d, 0.0);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{proj}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.norm(&format!("{prefix}.ln"), d);
        self.linear(&format!("{prefix}.fc1"), d, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, d);
    }
}

impl ParamStore {
    /// Normal(0, `init_std`) weights, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ModelError::InvalidConfig {
            field: "init_std",
            reason: e.to_string(),
        })?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let (d, k) = (config.d, config.k);
        let hidden = config.ffn_hidden();
        let patch_dim = config.patch_dim();

        init.linear("embed", patch_dim, d);
        init.normal("queries".into(), k, d);
        for l in 0..config.encoder_layers {
            let p = format!("enc.{l}");
            init.norm(&format!("{p}.cross.ln_q"), d);
            init.norm(&format!("{p}.cross.ln_kv"), d);
            init.attention(&format!("{p}.cross.attn"), d);
            init.norm(&format!("{p}.self.ln"), d);
            init.attention(&format!("{p}.self.attn"), d);
            init.ffn(&format!("{p}.ffn"), d, hidden);
        }
        init.norm("enc.out_ln", d);

        init.normal("mask_token".into(), 1, d);
        for l in 0..config.decoder_layers {
            let p = format!("dec.{l}");
            init.norm(&format!("{p}.cross.ln_q"), d);
            init.norm(&format!("{p}.cross.ln_kv"), d);
            init.attention(&format!("{p}.cross.attn"), d);
            init.ffn(&format!("{p}.ffn"), d, hidden);
        }
        init.norm("dec.out_ln", d);
        init.linear("dec.out", d, patch_dim);

        init.normal("pool.query".into(), d, 1);
        init.linear("head", d, config.n_classes);
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf of `g`; those accepted by `trainable`
    /// receive gradients, the rest are constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    g.leaf(t.clone().with_grad())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Parameters recorded in one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
