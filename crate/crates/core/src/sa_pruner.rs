//! Spatial aggregation: zero tokens appended to the spatial stream absorb
//! context through FiLM-modulated self-attention, `(1+γ)⊙Attn(X)+β`.

use crate::error::{config_err, shape_err, Result};
use crate::numerics::nn::{Attention, Builder, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggInit {
    /// Re-zeroed every forward pass.
    Zero,
    /// Persistent learned rows.
    Learned,
}

impl AggInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AggInit::Zero),
            "learned" => Ok(AggInit::Learned),
            _ => Err(config_err!("agg_init must be zero or learned, got {s:?}")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggInit::Zero => "zero",
            AggInit::Learned => "learned",
        }
    }
}

pub fn append_agg(g: &mut Graph, tokens: Var, count: usize) -> Result<Var> {
    if count == 0 {
        return Err(config_err!("aggregation token count must be >= 1"));
    }
    let width = g.value(tokens).cols();
    let zeros = g.constant(Tensor::zeros(&[count, width]));
    g.concat_rows(&[tokens, zeros])
}

/// Last `count` rows in order.
pub fn extract_agg(g: &mut Graph, tokens: Var, count: usize) -> Result<Var> {
    let rows = g.value(tokens).rows();
    if count > rows {
        return Err(shape_err!("cannot extract {count} aggregation rows from {rows}"));
    }
    g.slice_rows(tokens, rows - count, count)
}

#[derive(Clone, Copy, Debug)]
pub struct FilmParams {
    /// `1×d`.
    pub gamma: Var,
    /// `1×d`.
    pub beta: Var,
}

/// One affine map from the pooled instruction to `[γ ; β]`.
pub fn film_params(g: &mut Graph, store: &ParamStore, film: &Linear, pooled: Var) -> Result<FilmParams> {
    if !film.d_out.is_multiple_of(2) {
        return Err(shape_err!("FiLM output width {} is odd", film.d_out));
    }
    let d = film.d_out / 2;
    let y = film.forward(g, store, pooled)?;
    Ok(FilmParams {
        gamma: g.slice_cols(y, 0, d)?,
        beta: g.slice_cols(y, d, d)?,
    })
}

/// `(1+γ)⊙x+β` broadcast over rows.
pub fn apply_film(g: &mut Graph, x: Var, film: FilmParams) -> Result<Var> {
    let scale = g.add_scalar(film.gamma, 1.0);
    let y = g.mul_row(x, scale)?;
    g.add_row(y, film.beta)
}

/// Modulated attention with a caller-supplied attention map (used to stub it).
pub fn modulated_attention_with(
    g: &mut Graph,
    tokens: Var,
    film: FilmParams,
    rounds: usize,
    attend: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    if rounds == 0 {
        return Err(config_err!("SA rounds must be >= 1"));
    }
    let mut x = tokens;
    for _ in 0..rounds {
        let a = attend(g, x)?;
        x = apply_film(g, a, film)?;
    }
    Ok(x)
}

pub fn modulated_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &Attention,
    tokens: Var,
    film: FilmParams,
    rounds: usize,
) -> Result<Var> {
    modulated_attention_with(g, tokens, film, rounds, &mut |g, x| attn.forward(g, store, x))
}

#[derive(Clone, Debug)]
pub struct SaOutput {
    /// `(N+A)×d` after the last round.
    pub tokens: Var,
    /// `A×d`.
    pub agg: Var,
    /// Per-head `(N+A)×(N+A)` probabilities of the last round.
    pub last_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SaPruner {
    pub film: Linear,
    pub attn: Attention,
    pub agg_count: usize,
    pub rounds: usize,
    pub agg_init: AggInit,
    pub agg_rows: Option<ParamId>,
}

impl SaPruner {
    pub fn new(
        b: &mut Builder,
        pooled_width: usize,
        width: usize,
        heads: usize,
        agg_count: usize,
        rounds: usize,
        agg_init: AggInit,
    ) -> Result<Self> {
        if agg_count == 0 {
            return Err(config_err!("aggregation token count must be >= 1"));
        }
        if rounds == 0 {
            return Err(config_err!("SA rounds must be >= 1"));
        }
        let mut s = b.scope("sa");
        let film = Linear::new(&mut s, "film", pooled_width, 2 * width, true)?;
        let attn = Attention::new(&mut s, "attn", width, heads)?;
        let agg_rows = match agg_init {
            AggInit::Zero => None,
            AggInit::Learned => Some(s.gaussian("agg_rows", &[agg_count, width])?),
        };
        Ok(Self {
            film,
            attn,
            agg_count,
            rounds,
            agg_init,
            agg_rows,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, spatial: Var, pooled: Var) -> Result<SaOutput> {
        let x = match self.agg_rows {
            None => append_agg(g, spatial, self.agg_count)?,
            Some(id) => {
                let rows = g.param(store, id);
                g.concat_rows(&[spatial, rows])?
            }
        };
        let film = film_params(g, store, &self.film, pooled)?;
        let mut last_weights = Vec::new();
        let tokens = modulated_attention_with(g, x, film, self.rounds, &mut |g, x| {
            let (y, w) = self.attn.forward_with_weights(g, store, x)?;
            last_weights = w;
            Ok(y)
        })?;
        let agg = extract_agg(g, tokens, self.agg_count)?;
        Ok(SaOutput {
            tokens,
            agg,
            last_weights,
        })
    }
}
