//! Single-head post-norm Transformer blocks on the core tape.

use nvib_core::numerics::{Bound, Linear, ParamId, Params};
use nvib_core::{NoiseSource, Tensor, Var};

use crate::error::Result;
use crate::latent::LatentVars;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

/// Training or evaluation pass. Training passes own a noise stream for
/// dropout and latent sampling.
pub struct Pass<'n> {
    noise: Option<&'n mut NoiseSource>,
    dropout: f64,
}

impl<'n> Pass<'n> {
    pub fn train(noise: &'n mut NoiseSource, dropout: f64) -> Self {
        Pass { noise: Some(noise), dropout }
    }

    pub fn eval() -> Self {
        Pass { noise: None, dropout: 0.0 }
    }

    pub fn is_train(&self) -> bool {
        self.noise.is_some()
    }

    pub fn noise(&mut self) -> Option<&mut NoiseSource> {
        self.noise.as_deref_mut()
    }

    /// Inverted dropout; identity in evaluation or at rate 0.
    pub fn dropout<'t>(&mut self, x: Var<'t>) -> Var<'t> {
        let p = self.dropout;
        match self.noise.as_deref_mut() {
            Some(noise) if p > 0.0 => {
                let [r, c] = x.shape();
                let mask = noise.uniform_tensor(r, c).map(|u| if u < p { 0.0 } else { 1.0 / (1.0 - p) });
                x * x.tape().constant(mask)
            }
            _ => x,
        }
    }
}

pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            t.set(pos, 2 * i, angle.sin());
            t.set(pos, 2 * i + 1, angle.cos());
        }
    }
    t
}

fn causal_mask(len: usize) -> Tensor {
    let mut t = Tensor::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            t.set(i, j, MASKED);
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(params: &mut Params, name: &str, vocab: usize, dim: usize, noise: &mut NoiseSource) -> Self {
        let table = params.add(format!("{name}.table"), noise.normal_tensor(vocab, dim));
        Embedding { table, dim }
    }

    /// Token embeddings plus sinusoidal positions.
    pub fn apply<'t>(&self, bound: &Bound<'t>, ids: &[usize]) -> Var<'t> {
        let e = bound.get(self.table).select_rows(ids);
        e + e.tape().constant(positional_encoding(ids.len(), self.dim))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm_rows(LN_EPS).mul_row(bound.get(self.gain)).add_row(bound.get(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    dim: usize,
    causal: bool,
}

impl SelfAttention {
    pub fn new(params: &mut Params, name: &str, dim: usize, causal: bool, noise: &mut NoiseSource) -> Self {
        SelfAttention {
            q: Linear::new(params, &format!("{name}.q"), dim, dim, noise),
            k: Linear::new(params, &format!("{name}.k"), dim, dim, noise),
            v: Linear::new(params, &format!("{name}.v"), dim, dim, noise),
            o: Linear::new(params, &format!("{name}.o"), dim, dim, noise),
            dim,
            causal,
        }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let q = self.q.apply(bound, x);
        let k = self.k.apply(bound, x);
        let v = self.v.apply(bound, x);
        let mut logits = q.matmul_t(k).scale(1.0 / (self.dim as f64).sqrt());
        if self.causal {
            logits = logits + x.tape().constant(causal_mask(x.rows()));
        }
        self.o.apply(bound, logits.softmax_rows().matmul(v))
    }
}

/// Cross-attention whose key map is folded into the query projection, so
/// queries live in latent space and the latent is attended directly.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    q: Linear,
    o: Linear,
    dim: usize,
}

impl CrossAttention {
    pub fn new(params: &mut Params, name: &str, dim: usize, noise: &mut NoiseSource) -> Self {
        CrossAttention {
            q: Linear::new(params, &format!("{name}.q"), dim, dim, noise),
            o: Linear::new(params, &format!("{name}.o"), dim, dim, noise),
            dim,
        }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>, latent: &LatentVars<'t>) -> Result<Var<'t>> {
        let u = self.q.apply(bound, x);
        Ok(self.o.apply(bound, latent.attend(u, self.dim)?))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    a: Linear,
    b: Linear,
}

impl FeedForward {
    pub fn new(params: &mut Params, name: &str, dim: usize, hidden: usize, noise: &mut NoiseSource) -> Self {
        FeedForward {
            a: Linear::new(params, &format!("{name}.a"), dim, hidden, noise),
            b: Linear::new(params, &format!("{name}.b"), hidden, dim, noise),
        }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        self.b.apply(bound, self.a.apply(bound, x).relu())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    attn: SelfAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(params: &mut Params, name: &str, dim: usize, hidden: usize, noise: &mut NoiseSource) -> Self {
        EncoderLayer {
            attn: SelfAttention::new(params, &format!("{name}.self"), dim, false, noise),
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            ff: FeedForward::new(params, &format!("{name}.ff"), dim, hidden, noise),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
        }
    }

    pub fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>, pass: &mut Pass<'_>) -> Var<'t> {
        let a = pass.dropout(self.attn.apply(bound, x));
        let h = self.norm1.apply(bound, x + a);
        let f = pass.dropout(self.ff.apply(bound, h));
        self.norm2.apply(bound, h + f)
    }
}

/// Causal self-attention, optional cross-attention, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    attn: SelfAttention,
    norm1: LayerNorm,
    cross: Option<(CrossAttention, LayerNorm)>,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        params: &mut Params,
        name: &str,
        dim: usize,
        hidden: usize,
        with_cross: bool,
        noise: &mut NoiseSource,
    ) -> Self {
        let attn = SelfAttention::new(params, &format!("{name}.self"), dim, true, noise);
        let norm1 = LayerNorm::new(params, &format!("{name}.norm1"), dim);
        let cross = with_cross.then(|| {
            (
                CrossAttention::new(params, &format!("{name}.cross"), dim, noise),
                LayerNorm::new(params, &format!("{name}.norm2"), dim),
            )
        });
        DecoderLayer {
            attn,
            norm1,
            cross,
            ff: FeedForward::new(params, &format!("{name}.ff"), dim, hidden, noise),
            norm3: LayerNorm::new(params, &format!("{name}.norm3"), dim),
        }
    }

    pub fn apply<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        latent: Option<&LatentVars<'t>>,
        pass: &mut Pass<'_>,
    ) -> Result<Var<'t>> {
        let a = pass.dropout(self.attn.apply(bound, x));
        let mut h = self.norm1.apply(bound, x + a);
        if let (Some((cross, norm)), Some(latent)) = (&self.cross, latent) {
            let c = pass.dropout(cross.apply(bound, h, latent)?);
            h = norm.apply(bound, h + c);
        }
        let f = pass.dropout(self.ff.apply(bound, h));
        Ok(self.norm3.apply(bound, h + f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_alternate_sin_cos() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 3) - (0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn causal_mask_is_upper() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 2), MASKED);
        assert_eq!(m.get(2, 1), 0.0);
    }
}
