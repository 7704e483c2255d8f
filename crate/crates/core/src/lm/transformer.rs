//! Small pre-LayerNorm decoder-only transformer.

use super::autodiff::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::{Backend, LanguageModel, LmError};
use crate::seeds;
use crate::vocab::{TokenId, Vocab};
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            context: 64,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.context == 0 {
            return Err(LmError::Config(
                "all transformer sizes must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LmError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub(crate) fn to_text(self) -> String {
        format!(
            "d_model={}\nn_layers={}\nn_heads={}\ncontext={}\nseed={}\n",
            self.d_model, self.n_layers, self.n_heads, self.context, self.seed
        )
    }

    pub(crate) fn from_text(text: &str) -> Result<Self, LmError> {
        let mut c = TransformerConfig::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LmError::Checkpoint(format!("bad config line {line:?}")))?;
            let n: u64 = v
                .parse()
                .map_err(|_| LmError::Checkpoint(format!("bad config value {line:?}")))?;
            match k {
                "d_model" => c.d_model = n as usize,
                "n_layers" => c.n_layers = n as usize,
                "n_heads" => c.n_heads = n as usize,
                "context" => c.context = n as usize,
                "seed" => c.seed = n,
                _ => return Err(LmError::Checkpoint(format!("unknown config key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    vocab: Vocab,
    params: ParamStore,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<Layer>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

impl TransformerModel {
    pub fn new(vocab: Vocab, config: TransformerConfig) -> Result<Self, LmError> {
        config.validate()?;
        let d = config.d_model;
        let v = vocab.len();
        let mut rng = seeds::rng(config.seed, &[0x7f]);
        let mut normal = |shape: &[usize], std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape.iter().product::<usize>())
                .map(|_| n.sample(&mut rng))
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let mut p = ParamStore::new();
        let tok_emb = p.add("tok_emb", normal(&[v, d], 0.1));
        let pos_emb = p.add("pos_emb", normal(&[config.context, d], 0.1));
        let resid = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            layers.push(Layer {
                ln1_g: p.add(name("ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: p.add(name("ln1.b"), Tensor::zeros(&[d])),
                qkv_w: p.add(name("qkv.w"), normal(&[d, 3 * d], 1.0 / (d as f64).sqrt())),
                qkv_b: p.add(name("qkv.b"), Tensor::zeros(&[3 * d])),
                proj_w: p.add(name("proj.w"), normal(&[d, d], resid / (d as f64).sqrt())),
                proj_b: p.add(name("proj.b"), Tensor::zeros(&[d])),
                ln2_g: p.add(name("ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: p.add(name("ln2.b"), Tensor::zeros(&[d])),
                fc1_w: p.add(name("fc1.w"), normal(&[d, 4 * d], 1.0 / (d as f64).sqrt())),
                fc1_b: p.add(name("fc1.b"), Tensor::zeros(&[4 * d])),
                fc2_w: p.add(
                    name("fc2.w"),
                    normal(&[4 * d, d], resid / ((4 * d) as f64).sqrt()),
                ),
                fc2_b: p.add(name("fc2.b"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = p.add("lnf.g", Tensor::full(&[d], 1.0));
        let lnf_b = p.add("lnf.b", Tensor::zeros(&[d]));
        // A zero head starts every prediction at the uniform distribution.
        let out_w = p.add("out.w", Tensor::zeros(&[d, v]));
        let out_b = p.add("out.b", Tensor::zeros(&[v]));
        Ok(TransformerModel {
            config,
            vocab,
            params: p,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        })
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

impl LanguageModel for TransformerModel {
    fn backend(&self) -> Backend {
        Backend::Transformer
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seqs: &[Vec<TokenId>],
        rows: &[(usize, usize)],
    ) -> Result<Var, LmError> {
        // Causality means each sequence is only needed up to its last
        // requested position.
        let mut needed = vec![0usize; seqs.len()];
        for &(s, p) in rows {
            let seq = seqs
                .get(s)
                .ok_or_else(|| LmError::Shape(format!("no sequence {s}")))?;
            if p >= seq.len() {
                return Err(LmError::Shape(format!(
                    "position {p} outside sequence of {}",
                    seq.len()
                )));
            }
            needed[s] = needed[s].max(p + 1);
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::new();
        let mut start = vec![0usize; seqs.len()];
        for (s, &n) in needed.iter().enumerate() {
            if n == 0 {
                continue;
            }
            if n > self.config.context {
                return Err(LmError::ContextOverflow {
                    len: n,
                    max: self.config.context,
                });
            }
            start[s] = ids.len();
            segs.push((ids.len(), n));
            for (i, &t) in seqs[s][..n].iter().enumerate() {
                if t >= self.vocab.len() {
                    return Err(crate::vocab::VocabError::BadId(t).into());
                }
                ids.push(t);
                pos.push(i);
            }
        }
        let te = g.rows(params[self.tok_emb], &ids);
        let pe = g.rows(params[self.pos_emb], &pos);
        let mut x = g.add(te, pe);
        for l in &self.layers {
            let h = g.layer_norm(x, params[l.ln1_g], params[l.ln1_b]);
            let qkv = Self::linear(g, h, params[l.qkv_w], params[l.qkv_b]);
            let a = g.causal_attention(qkv, self.config.n_heads, &segs);
            let a = Self::linear(g, a, params[l.proj_w], params[l.proj_b]);
            x = g.add(x, a);
            let h = g.layer_norm(x, params[l.ln2_g], params[l.ln2_b]);
            let h = Self::linear(g, h, params[l.fc1_w], params[l.fc1_b]);
            let h = g.gelu(h);
            let h = Self::linear(g, h, params[l.fc2_w], params[l.fc2_b]);
            x = g.add(x, h);
        }
        let sel: Vec<usize> = rows.iter().map(|&(s, p)| start[s] + p).collect();
        let x = g.rows(x, &sel);
        let x = g.layer_norm(x, params[self.lnf_g], params[self.lnf_b]);
        let logits = Self::linear(g, x, params[self.out_w], params[self.out_b]);
        Ok(g.log_softmax(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::infer::eval_logprobs;

    fn model() -> TransformerModel {
        let v = Vocab::from_tokens(["<bos>", "<eos>", "a", "b", "c"]).unwrap();
        let cfg = TransformerConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context: 6,
            seed: 3,
        };
        TransformerModel::new(v, cfg).unwrap()
    }

    #[test]
    fn fresh_model_predicts_uniform() {
        let m = model();
        let lp = eval_logprobs(&m, &[vec![0, 2, 3]], &[(0, 2)]).unwrap();
        for x in lp.row(0) {
            assert!((x + 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn packing_does_not_change_predictions() {
        let mut m = model();
        let oi = m.params.index_of("out.w").unwrap();
        for (i, x) in m.params.get_mut(oi).data_mut().iter_mut().enumerate() {
            *x = ((i * 37 % 11) as f64 - 5.0) / 7.0;
        }
        let a = vec![0, 2, 3, 4];
        let b = vec![0, 4, 4];
        let alone = eval_logprobs(&m, &[a.clone()], &[(0, 3)]).unwrap();
        let packed = eval_logprobs(&m, &[b, a], &[(0, 2), (1, 3)]).unwrap();
        for (x, y) in alone.row(0).iter().zip(packed.row(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let m = model();
        let long = vec![2; 7];
        assert!(matches!(
            eval_logprobs(&m, &[long], &[(0, 6)]),
            Err(LmError::ContextOverflow { len: 7, max: 6 })
        ));
    }

    #[test]
    fn config_text_round_trip() {
        let c = TransformerConfig {
            d_model: 32,
            n_layers: 3,
            n_heads: 4,
            context: 40,
            seed: 9,
        };
        assert_eq!(TransformerConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
