use rand::Rng;

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Var};
use crate::tensor::{Result, Tensor};

const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_broadcast(y, p.var(self.bias))
    }
}

/// Layer normalization with a learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let scaled = g.mul_broadcast(n, p.var(self.gain))?;
        g.add_broadcast(scaled, p.var(self.bias))
    }
}

/// Multi-head self-attention over the token axis of `[B, N, D]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let &[b, n, d] = g.value(x)?.shape() else {
            unreachable!("attention input is always [B, N, D]")
        };
        let h = self.heads;
        let dh = d / h;
        // [B, N, D] -> [B, H, N, dh]
        let split = |g: &mut Graph, lin: &Linear| -> Result<Var> {
            let y = lin.forward(g, p, x)?;
            let y = g.reshape(y, &[b, n, h, dh])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = split(g, &self.query)?;
        let k = split(g, &self.key)?;
        let v = split(g, &self.value)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        self.out.forward(g, p, ctx)
    }
}

/// Pre-norm block: `h + Attn(LN(h))` then `h + FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    norm_attn: LayerNorm,
    attn: SelfAttention,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, d_ff, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), d_ff, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let n = self.norm_attn.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n)?;
        let x = g.add(x, a)?;
        let n = self.norm_ff.forward(g, p, x)?;
        let f = self.ff_in.forward(g, p, n)?;
        let f = g.gelu(f)?;
        let f = self.ff_out.forward(g, p, f)?;
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 5, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 4, 3]));
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[2, 4, 5]);
        assert!(g.value(y).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_block_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "b", 4, 2, 6, &mut rng);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let err = check_gradients(
            |g, x| {
                let p = store.bind(g);
                let y = block.forward(g, &p, x)?;
                let y2 = g.square(y)?;
                g.mean(y2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
