//! Pre-norm transformer encoder over a token sequence `[B, T, D]`.

use candle_core::{Result, Tensor};

use crate::nn::{softmax_last, LayerNorm, Linear, ParamStore, Path};

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, dh))?;
        let part = |i: usize| -> Result<Tensor> { qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous() };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.ff1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        x + self.ff2.forward(&h)?
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<Layer>,
    ln_final: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(ps: &mut ParamStore, p: &Path, num_layers: usize, heads: usize, dim: usize, ffn: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            candle_core::bail!("model_dim {dim} is not divisible by num_heads {heads}");
        }
        let layers = (0..num_layers)
            .map(|i| {
                let lp = p.sub(format!("layer{i}"));
                Ok(Layer {
                    ln1: LayerNorm::new(ps, &lp.sub("ln1"), dim)?,
                    attn: Attention {
                        qkv: Linear::new(ps, &lp.sub("qkv"), dim, 3 * dim)?,
                        out: Linear::new(ps, &lp.sub("attn_out"), dim, dim)?,
                        heads,
                    },
                    ln2: LayerNorm::new(ps, &lp.sub("ln2"), dim)?,
                    ff1: Linear::new(ps, &lp.sub("ff1"), dim, ffn)?,
                    ff2: Linear::new(ps, &lp.sub("ff2"), ffn, dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            ln_final: LayerNorm::new(ps, &p.sub("ln_final"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        self.ln_final.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn shape_and_token_permutation_equivariance() {
        let mut ps = ParamStore::new(1, Device::Cpu);
        let enc = TransformerEncoder::new(&mut ps, &Path::root("t"), 2, 4, 16, 32).unwrap();
        let x = Tensor::arange(0f32, 2.0 * 5.0 * 16.0, &Device::Cpu)
            .unwrap()
            .affine(0.01, -0.5)
            .unwrap()
            .sin()
            .unwrap()
            .reshape((2, 5, 16))
            .unwrap();
        let y = enc.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 5, 16]);
        // without positional terms, attention is permutation-equivariant
        let idx = Tensor::new(&[4u32, 2, 0, 1, 3], &Device::Cpu).unwrap();
        let yp = enc.forward(&x.index_select(&idx, 1).unwrap()).unwrap();
        let py = y.index_select(&idx, 1).unwrap();
        let diff = (yp - py).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut ps = ParamStore::new(1, Device::Cpu);
        assert!(TransformerEncoder::new(&mut ps, &Path::root("t"), 1, 3, 16, 32).is_err());
    }
}
