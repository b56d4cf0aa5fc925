//! Parameterised layers built from graph primitives.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Standard deviation of Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;
/// Standard deviation of lookup-table initialisation, on the scale of the
/// sinusoidal position codes added to table rows.
pub const EMBED_STD: f64 = 1.0;

/// Registers parameters under a `/`-separated name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let n = self.full_name(name);
        self.store.add(n, value, true)
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::randn(shape, INIT_STD, self.rng);
        self.tensor(name, t)
    }

    /// Gaussian lookup table with [`EMBED_STD`].
    pub fn embedding(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::randn(shape, EMBED_STD, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, 1.0))
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.gaussian("w", &[d_in, d_out])?;
        let bias = if bias { Some(s.zeros("b", &[1, d_out])?) } else { None };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Zero-initialised weights and bias.
    pub fn zeroed(b: &mut Builder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.zeros("w", &[d_in, d_out])?;
        let bias = if bias { Some(s.zeros("b", &[1, d_out])?) } else { None };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.affine(x, w, b)
    }
}

/// Row layer-norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, d: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gain: s.ones("gain", &[1, d])?,
            bias: s.zeros("bias", &[1, d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm_affine(x, gain, bias)
    }
}

/// Two affine layers with GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", d_in, d_hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", d_hidden, d_out, true)?,
        })
    }

    /// Output layer starts at zero so the MLP initially emits zeros.
    pub fn zero_output(b: &mut Builder, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", d_in, d_hidden, true)?,
            fc2: Linear::zeroed(&mut s, "fc2", d_hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.fc1.d_in {
            return Err(shape_err!(
                "mlp expects width {}, got {:?}",
                self.fc1.d_in,
                g.value(x).shape()
            ));
        }
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Bidirectional multi-head self-attention (no mask).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(config_err!("width {width} not divisible by {heads} heads"));
        }
        let mut s = b.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", width, width, true)?,
            k: Linear::new(&mut s, "k", width, width, true)?,
            v: Linear::new(&mut s, "v", width, width, true)?,
            o: Linear::new(&mut s, "o", width, width, true)?,
            heads,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cat = self.mix(g, store, x)?;
        self.o.forward(g, store, cat)
    }

    fn mix(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.width {
            return Err(shape_err!(
                "attention expects width {}, got {:?}",
                self.width,
                g.value(x).shape()
            ));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        g.attention(q, k, v, self.heads)
    }

    /// Output plus the per-head `s×s` attention probabilities as constants.
    pub fn forward_with_weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let cat = self.mix(g, store, x)?;
        let weights = (0..self.heads)
            .map(|h| {
                let p = g.attention_probs(cat, h).expect("attention node");
                g.constant(p)
            })
            .collect();
        Ok((self.o.forward(g, store, cat)?, weights))
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Hidden width multiplier of block MLPs.
pub const MLP_RATIO: usize = 4;

impl Block {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", width)?,
            attn: Attention::new(&mut s, "attn", width, heads)?,
            ln2: LayerNorm::new(&mut s, "ln2", width)?,
            mlp: Mlp::new(&mut s, "mlp", width, MLP_RATIO * width, width)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}

fn code_row(pos: usize, width: usize, out: &mut [f64]) {
    for i in 0..width / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
        let a = pos as f64 * freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
}

/// Process-wide table of codes for positions `0..len`.
fn code_table(len: usize, width: usize) -> Arc<Tensor> {
    type Cache = Mutex<HashMap<(usize, usize), Arc<Tensor>>>;
    static TABLES: OnceLock<Cache> = OnceLock::new();
    let mut map = TABLES.get_or_init(Default::default).lock().expect("code table lock");
    map.entry((len, width))
        .or_insert_with(|| {
            let mut t = Tensor::zeros(&[len, width]);
            for pos in 0..len {
                code_row(pos, width, &mut t.data_mut()[pos * width..(pos + 1) * width]);
            }
            Arc::new(t)
        })
        .clone()
}

/// Fixed sinusoidal code for integer positions, `len×width`.
pub fn sinusoidal(positions: &[usize], width: usize) -> Tensor {
    let max = positions.iter().max().map_or(0, |m| m + 1);
    if max > 4096 {
        let mut t = Tensor::zeros(&[positions.len(), width]);
        for (r, &pos) in positions.iter().enumerate() {
            code_row(pos, width, &mut t.data_mut()[r * width..(r + 1) * width]);
        }
        return t;
    }
    code_table(max.next_power_of_two().max(16), width).select_rows(positions)
}
