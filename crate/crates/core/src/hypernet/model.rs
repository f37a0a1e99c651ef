//! Hypernetwork parameters, episode layout and adapter generation.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterTarget, LoraAdapter};
use crate::error::{Result, SemiError};
use crate::numerics::nn::{attention_block, attention_block_plain, layer_norm_plain, AttentionVars, LN_EPS};
use crate::numerics::{rng_for, sinusoidal_pe, DenseMatrix, GradContext, Params, SemiRng, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetConfig {
    /// Token width; equals the projector input dimension.
    pub d_h: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Conditioning pairs per episode.
    pub context: usize,
    /// Number of attention blocks.
    pub depth: usize,
    pub dropout: f64,
    /// 1 generates layer-1 factors only, 2 also generates layer-2 factors.
    pub adapter_layers: usize,
    /// Add sinusoidal positions to episode tokens; off only for diagnostics.
    pub positional: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            rank: 8,
            alpha: 8.0,
            context: 8,
            depth: 1,
            dropout: 0.1,
            adapter_layers: 1,
            positional: true,
        }
    }
}

impl HypernetConfig {
    pub fn n_special(&self) -> usize {
        2 * self.adapter_layers
    }

    /// Episode length `n_special + 1 + 2 S`.
    pub fn episode_len(&self, pairs: usize) -> usize {
        self.n_special() + 1 + 2 * pairs
    }

    pub fn capacity(&self) -> usize {
        self.episode_len(self.context)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || !self.d_h.is_multiple_of(2) {
            return Err(SemiError::Config(format!("hypernet width {} must be even and positive", self.d_h)));
        }
        if self.rank == 0 || self.depth == 0 || !(1..=2).contains(&self.adapter_layers) {
            return Err(SemiError::Config(format!("invalid hypernet config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.alpha / self.rank as f64).is_finite() {
            return Err(SemiError::Config(format!("invalid hypernet config {self:?}")));
        }
        Ok(())
    }
}

/// The hypernetwork. Heads map a contextualised special token to the
/// flattened factor: `head_a: [d_h x r*d_in]`, `head_b: [d_h x d_hid*r]`,
/// and for two-layer mode `head_a2: [d_h x r*d_hid]`, `head_b2: [d_h x d_o*r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetParams {
    pub params: Params,
    pub config: HypernetConfig,
    pub d_in: usize,
    pub d_hid: usize,
    pub d_out: usize,
}

/// Interleaved conditioning: `[instruction, mod_1, txt_1, ..., mod_S, txt_S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction: Vec<f64>,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Episode {
    /// Rows after the special tokens, `[1 + 2S x d_h]`.
    pub fn rows(&self, d_h: usize) -> Result<DenseMatrix> {
        let mut rows = Vec::with_capacity(1 + 2 * self.pairs.len());
        rows.push(self.instruction.clone());
        for (m, t) in &self.pairs {
            rows.push(m.clone());
            rows.push(t.clone());
        }
        if rows.iter().any(|r| r.len() != d_h) {
            return Err(SemiError::Shape(format!("episode embeddings must have width {d_h}")));
        }
        DenseMatrix::from_rows(&rows)
    }
}

/// Generated factors for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub layer1: LoraAdapter,
    pub layer2: Option<LoraAdapter>,
}

pub struct HypernetVars {
    special: Var,
    blocks: Vec<AttentionVars>,
    heads: Vec<Var>,
}

/// Graph handles for generated factors and scaled deltas.
pub struct GeneratedVars {
    pub a: Var,
    pub b: Var,
    pub delta1: Var,
    pub delta2: Option<Var>,
}

impl HypernetParams {
    pub fn init(config: &HypernetConfig, d_in: usize, d_hid: usize, d_out: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_in != config.d_h {
            return Err(SemiError::Config(format!(
                "projector input {d_in} must equal hypernet width {}",
                config.d_h
            )));
        }
        let r = config.rank;
        if r > d_in.min(d_hid) {
            return Err(SemiError::Config(format!("rank {r} exceeds projector dims")));
        }
        let d = config.d_h;
        let mut rng = rng_for(seed, 31);
        let s = 1.0 / (d as f64).sqrt();
        let mut params = Params::new();
        params.insert("special", DenseMatrix::randn(config.n_special(), d, 1.0, &mut rng));
        for b in 0..config.depth {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("blk{b}.{w}"), DenseMatrix::randn(d, d, s, &mut rng));
            }
        }
        params.insert("head_a", DenseMatrix::randn(d, r * d_in, s / (d_in as f64).sqrt(), &mut rng));
        params.insert("head_b", DenseMatrix::zeros(d, d_hid * r));
        if config.adapter_layers == 2 {
            params.insert("head_a2", DenseMatrix::randn(d, r * d_hid, s / (d_hid as f64).sqrt(), &mut rng));
            params.insert("head_b2", DenseMatrix::zeros(d, d_out * r));
        }
        Ok(Self {
            params,
            config: config.clone(),
            d_in,
            d_hid,
            d_out,
        })
    }

    fn head_names(&self) -> &'static [&'static str] {
        if self.config.adapter_layers == 2 {
            &["head_a", "head_b", "head_a2", "head_b2"]
        } else {
            &["head_a", "head_b"]
        }
    }

    /// Factor shapes `(rows, cols)` produced by each head, in head order.
    fn factor_shapes(&self) -> Vec<(usize, usize)> {
        let r = self.config.rank;
        let mut v = vec![(r, self.d_in), (self.d_hid, r)];
        if self.config.adapter_layers == 2 {
            v.extend([(r, self.d_hid), (self.d_out, r)]);
        }
        v
    }

    /// Full token sequence `[specials; instruction; pairs] + PE`.
    pub fn build_episode(&self, episode: &Episode) -> Result<DenseMatrix> {
        let rows = self.check_episode(episode)?;
        let specials = self.params.get("special")?;
        let mut x = DenseMatrix::vstack(&[specials, &rows])?;
        if self.config.positional {
            x.add_assign(&sinusoidal_pe(x.rows(), x.cols())?)?;
        }
        Ok(x)
    }

    fn check_episode(&self, episode: &Episode) -> Result<DenseMatrix> {
        let len = self.config.episode_len(episode.pairs.len());
        if len > self.config.capacity() {
            return Err(SemiError::Config(format!(
                "episode of {len} tokens exceeds context capacity {}",
                self.config.capacity()
            )));
        }
        episode.rows(self.config.d_h)
    }

    /// Eval-mode generation.
    pub fn forward(&self, episode: &Episode) -> Result<Generated> {
        let mut x = self.build_episode(episode)?;
        for b in 0..self.config.depth {
            let g = |n: &str| self.params.get(&format!("blk{b}.{n}"));
            x = attention_block_plain(&x, g("wq")?, g("wk")?, g("wv")?, g("wo")?, false)?;
        }
        let h = layer_norm_plain(&x.slice_rows(0, self.config.n_special()));
        let mut factors = Vec::with_capacity(4);
        for (k, (name, (r, c))) in self.head_names().iter().zip(self.factor_shapes()).enumerate() {
            let f = h.slice_rows(k, k + 1).matmul(self.params.get(name)?)?.reshape(r, c)?;
            if !f.is_finite() {
                return Err(SemiError::Numeric(format!("non-finite output from {name}")));
            }
            factors.push(f);
        }
        let alpha = self.config.alpha;
        let mut it = factors.into_iter();
        let (a, b) = (it.next().expect("a"), it.next().expect("b"));
        let layer1 = LoraAdapter::new(a, b, alpha, AdapterTarget::Layer1)?;
        let layer2 = match (it.next(), it.next()) {
            (Some(a2), Some(b2)) => Some(LoraAdapter::new(a2, b2, alpha, AdapterTarget::Layer2)?),
            _ => None,
        };
        Ok(Generated { layer1, layer2 })
    }

    pub fn bind(&self, ctx: &mut GradContext, trainable: bool) -> Result<HypernetVars> {
        let mut get = |n: &str| -> Result<Var> {
            let v = self.params.get(n)?.clone();
            if trainable {
                ctx.param(&format!("hypernet.{n}"), v)
            } else {
                Ok(ctx.constant(v))
            }
        };
        let special = get("special")?;
        let mut blocks = Vec::with_capacity(self.config.depth);
        for b in 0..self.config.depth {
            blocks.push(AttentionVars {
                wq: get(&format!("blk{b}.wq"))?,
                wk: get(&format!("blk{b}.wk"))?,
                wv: get(&format!("blk{b}.wv"))?,
                wo: get(&format!("blk{b}.wo"))?,
            });
        }
        let heads = self.head_names().iter().map(|n| get(n)).collect::<Result<_>>()?;
        Ok(HypernetVars { special, blocks, heads })
    }

    /// Recorded generation. `rng` enables dropout on the attention branch.
    pub fn forward_graph(
        &self,
        ctx: &mut GradContext,
        vars: &HypernetVars,
        episode: &Episode,
        rng: Option<&mut SemiRng>,
    ) -> Result<GeneratedVars> {
        let rows = self.check_episode(episode)?;
        let rows = ctx.constant(rows);
        let mut x = ctx.concat_rows(&[vars.special, rows])?;
        if self.config.positional {
            let (l, d) = ctx.value(x).shape();
            let pe = ctx.constant(sinusoidal_pe(l, d)?);
            x = ctx.add(x, pe)?;
        }
        let mut rng = rng;
        for blk in &vars.blocks {
            let drop = match rng.as_deref_mut() {
                Some(r) if self.config.dropout > 0.0 => Some((self.config.dropout, r)),
                _ => None,
            };
            x = attention_block(ctx, x, *blk, false, drop)?;
        }
        let specials = ctx.slice_rows(x, 0, self.config.n_special())?;
        let h = ctx.layer_norm(specials, LN_EPS);
        let mut factors = Vec::with_capacity(4);
        for (k, (&head, (r, c))) in vars.heads.iter().zip(self.factor_shapes()).enumerate() {
            let s = ctx.slice_rows(h, k, k + 1)?;
            let flat = ctx.matmul(s, head)?;
            factors.push(ctx.reshape(flat, r, c)?);
        }
        let scale = self.config.alpha / self.config.rank as f64;
        let (a, b) = (factors[0], factors[1]);
        let ba = ctx.matmul(b, a)?;
        let delta1 = ctx.scale(ba, scale);
        let delta2 = if factors.len() == 4 {
            let ba2 = ctx.matmul(factors[3], factors[2])?;
            Some(ctx.scale(ba2, scale))
        } else {
            None
        };
        Ok(GeneratedVars { a, b, delta1, delta2 })
    }
}
