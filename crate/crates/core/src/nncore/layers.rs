use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nncore::graph::{Graph, Var};
use crate::nncore::params::ParamStore;
use crate::nncore::real::{r, Real};
use crate::nncore::tensor::Tensor2D;

/// Shape and regularisation settings of one transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub dim: usize,
    pub num_heads: usize,
    /// FFN inner size as a multiple of `dim`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden dim {} is not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

const LAYER_PARAMS: [(&str, ParamKind); 16] = [
    ("attn.wq", ParamKind::Square),
    ("attn.bq", ParamKind::BiasDim),
    ("attn.wk", ParamKind::Square),
    ("attn.bk", ParamKind::BiasDim),
    ("attn.wv", ParamKind::Square),
    ("attn.bv", ParamKind::BiasDim),
    ("attn.wo", ParamKind::Square),
    ("attn.bo", ParamKind::BiasDim),
    ("ffn.w1", ParamKind::Expand),
    ("ffn.b1", ParamKind::BiasInner),
    ("ffn.w2", ParamKind::Contract),
    ("ffn.b2", ParamKind::BiasDim),
    ("ln1.gamma", ParamKind::Ones),
    ("ln1.beta", ParamKind::BiasDim),
    ("ln2.gamma", ParamKind::Ones),
    ("ln2.beta", ParamKind::BiasDim),
];

#[derive(Clone, Copy)]
enum ParamKind {
    Square,
    Expand,
    Contract,
    BiasDim,
    BiasInner,
    Ones,
}

/// Registers all parameters of one encoder layer under `prefix.` in `store`.
/// Projection weights are uniform in `+-1/sqrt(fan_in)`, biases zero,
/// layer-norm gamma one and beta zero.
pub fn init_encoder_layer<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let inner = d * cfg.ffn_mult;
    for (name, kind) in LAYER_PARAMS {
        let tensor = match kind {
            ParamKind::Square => uniform_init(d, d, rng),
            ParamKind::Expand => uniform_init(d, inner, rng),
            ParamKind::Contract => uniform_init(inner, d, rng),
            ParamKind::BiasDim => Tensor2D::zeros(1, d),
            ParamKind::BiasInner => Tensor2D::zeros(1, inner),
            ParamKind::Ones => Tensor2D::filled(1, d, R::one()),
        };
        store.insert(&format!("{prefix}.{name}"), tensor)?;
    }
    Ok(())
}

fn uniform_init<R: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D<R> {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| r::<R>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor2D::new(rows, cols, data).expect("consistent shape")
}

/// Graph handles for one encoder layer's parameters, bound either to
/// trainable store entries or to frozen leaf tensors.
#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl EncoderLayerVars {
    /// Binds trainable parameters registered by [`init_encoder_layer`].
    pub fn bind_params<R: Real>(
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        prefix: &str,
    ) -> Result<Self> {
        let mut vars = Vec::with_capacity(LAYER_PARAMS.len());
        for (name, _) in LAYER_PARAMS {
            vars.push(g.param(store, &format!("{prefix}.{name}"))?);
        }
        Ok(Self::from_slice(&vars))
    }

    /// Binds frozen weights as gradient-free leaves.
    pub fn bind_leaves<R: Real>(
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        prefix: &str,
    ) -> Result<Self> {
        let mut vars = Vec::with_capacity(LAYER_PARAMS.len());
        for (name, _) in LAYER_PARAMS {
            vars.push(g.leaf(store.get(&format!("{prefix}.{name}"))?.clone()));
        }
        Ok(Self::from_slice(&vars))
    }

    fn from_slice(v: &[Var]) -> Self {
        Self {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            ffn_w1: v[8],
            ffn_b1: v[9],
            ffn_w2: v[10],
            ffn_b2: v[11],
            ln1_gamma: v[12],
            ln1_beta: v[13],
            ln2_gamma: v[14],
            ln2_beta: v[15],
        }
    }
}

/// Scaled dot-product attention per head, concatenated and output-projected.
/// Dropout (when training) is applied to the projected output, not to the
/// attention probabilities. Residual connection and layer norm are the
/// caller's job.
pub fn multi_head_self_attention<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    vars: &EncoderLayerVars,
    num_heads: usize,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let d = g.value(x).cols();
    if num_heads == 0 || d % num_heads != 0 {
        return Err(CoreError::Config(format!(
            "hidden dim {d} is not divisible by {num_heads} heads"
        )));
    }
    let head_dim = d / num_heads;
    let scale = r::<R>(1.0 / (head_dim as f64).sqrt());

    let q = g.linear(x, vars.wq, vars.bq)?;
    let k = g.linear(x, vars.wk, vars.bk)?;
    let v = g.linear(x, vars.wv, vars.bv)?;

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let start = h * head_dim;
        let qh = g.slice_cols(q, start, head_dim);
        let kh = g.slice_cols(k, start, head_dim);
        let vh = g.slice_cols(v, start, head_dim);
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores);
        heads.push(g.matmul(probs, vh)?);
    }
    let concat = g.concat_cols(&heads)?;
    let projected = g.linear(concat, vars.wo, vars.bo)?;
    Ok(maybe_dropout(g, projected, dropout, training, rng))
}

fn feed_forward<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    vars: &EncoderLayerVars,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let h = g.linear(x, vars.ffn_w1, vars.ffn_b1)?;
    let h = g.gelu(h);
    let y = g.linear(h, vars.ffn_w2, vars.ffn_b2)?;
    Ok(maybe_dropout(g, y, dropout, training, rng))
}

fn maybe_dropout<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Var {
    if training && dropout > 0.0 {
        g.dropout(x, r(dropout), rng)
    } else {
        x
    }
}

/// Post-norm transformer encoder layer:
/// `y1 = LN(x + Dropout(MHSA(x)))`, `y = LN(y1 + Dropout(FFN(y1)))`
/// with a GELU feed-forward of width `ffn_mult * dim`.
pub fn transformer_encoder_layer<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    vars: &EncoderLayerVars,
    cfg: &EncoderConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(CoreError::Precondition(
            "encoder layer input needs at least one row".into(),
        ));
    }
    let eps = r::<R>(cfg.layer_norm_eps);
    let attn = multi_head_self_attention(g, x, vars, cfg.num_heads, cfg.dropout, training, rng)?;
    let res1 = g.add(x, attn)?;
    let y1 = g.layer_norm(res1, vars.ln1_gamma, vars.ln1_beta, eps)?;
    let ffn = feed_forward(g, y1, vars, cfg.dropout, training, rng)?;
    let res2 = g.add(y1, ffn)?;
    g.layer_norm(res2, vars.ln2_gamma, vars.ln2_beta, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::tensor::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cfg(dim: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            dim,
            num_heads: heads,
            ffn_mult: 4,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2D::new(rows, cols, data).unwrap()
    }

    fn run_attention(
        x: &Tensor2D<f64>,
        store: &ParamStore<f64>,
        heads: usize,
    ) -> Tensor2D<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let vars = EncoderLayerVars::bind_leaves(&mut g, store, "enc").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            multi_head_self_attention(&mut g, xv, &vars, heads, 0.0, false, &mut rng).unwrap();
        g.value(out).clone()
    }

    /// Explicit per-head loop oracle for scaled dot-product attention.
    fn attention_oracle(
        x: &Tensor2D<f64>,
        store: &ParamStore<f64>,
        heads: usize,
    ) -> Tensor2D<f64> {
        use crate::nncore::tensor::linear_forward;
        let q = linear_forward(x, store.get("enc.attn.wq").unwrap(), store.get("enc.attn.bq").unwrap()).unwrap();
        let k = linear_forward(x, store.get("enc.attn.wk").unwrap(), store.get("enc.attn.bk").unwrap()).unwrap();
        let v = linear_forward(x, store.get("enc.attn.wv").unwrap(), store.get("enc.attn.bv").unwrap()).unwrap();
        let d = x.cols();
        let hd = d / heads;
        let n = x.rows();
        let mut concat = Tensor2D::zeros(n, d);
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                // raw scores for query row i within this head
                let mut scores = vec![0.0; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q.get(i, off + c) * k.get(j, off + c);
                    }
                    *s = dot / (hd as f64).sqrt();
                }
                let probs = softmax_rows(&Tensor2D::row_vector(&scores));
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += probs.get(0, j) * v.get(j, off + c);
                    }
                    concat.set(i, off + c, acc);
                }
            }
        }
        linear_forward(
            &concat,
            store.get("enc.attn.wo").unwrap(),
            store.get("enc.attn.bo").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn attention_matches_per_head_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", &test_cfg(6, 2), &mut rng).unwrap();
        let x = rand_tensor(3, 6, &mut rng);
        let got = run_attention(&x, &store, 2);
        let expected = attention_oracle(&x, &store, 2);
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_single_row_is_projected_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", &test_cfg(4, 2), &mut rng).unwrap();
        let x = rand_tensor(1, 4, &mut rng);
        let got = run_attention(&x, &store, 2);
        // with one row every attention distribution is [1.0], so the output
        // is just the projection of the value row
        use crate::nncore::tensor::linear_forward;
        let v = linear_forward(&x, store.get("enc.attn.wv").unwrap(), store.get("enc.attn.bv").unwrap()).unwrap();
        let expected =
            linear_forward(&v, store.get("enc.attn.wo").unwrap(), store.get("enc.attn.bo").unwrap()).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", &test_cfg(4, 2), &mut rng).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor2D::from_rows(&[row.clone(), row]).unwrap();
        let got = run_attention(&x, &store, 2);
        assert_eq!(got.row(0), got.row(1));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", &test_cfg(4, 2), &mut rng).unwrap();
        let x = rand_tensor(2, 4, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let vars = EncoderLayerVars::bind_leaves(&mut g, &store, "enc").unwrap();
        let err = multi_head_self_attention(&mut g, xv, &vars, 3, 0.0, false, &mut rng);
        assert!(matches!(err, Err(CoreError::Config(_))));
    }

    #[test]
    fn encoder_layer_preserves_shape_and_is_deterministic_without_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = test_cfg(8, 2);
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", &cfg, &mut rng).unwrap();
        let x = rand_tensor(5, 8, &mut rng);

        let run = |training: bool, seed: u64| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let vars = EncoderLayerVars::bind_leaves(&mut g, &store, "enc").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = transformer_encoder_layer(&mut g, xv, &vars, &cfg, training, &mut rng).unwrap();
            g.value(y).clone()
        };

        let a = run(false, 1);
        assert_eq!(a.shape(), (5, 8));
        // dropout 0: training flag changes nothing, reruns bitwise equal
        assert_eq!(a, run(true, 99));
        assert_eq!(a, run(false, 1));
    }

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = EncoderConfig {
            dim: 6,
            num_heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        };
        let mut store = ParamStore::new();
        init_encoder_layer(&mut store, "enc", &cfg, &mut rng).unwrap();
        let x = rand_tensor(3, 6, &mut rng);
        let target = rand_tensor(1, 6, &mut rng);

        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.leaf(x.clone());
            let vars = EncoderLayerVars::bind_params(g, s, "enc").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let y = transformer_encoder_layer(g, xv, &vars, &cfg, false, &mut rng).unwrap();
            let pooled = g.mean_rows(y).unwrap();
            g.mse_against(pooled, &target, 1.0 / 6.0).unwrap()
        };

        let mut g = Graph::new();
        let loss = build(&mut g, &store);
        let mut grads = store.clone();
        grads.zero_grads();
        g.backward(loss, &mut grads).unwrap();

        let step = 1e-4;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            let (rows, cols) = store.get(name).unwrap().shape();
            for i in 0..rows {
                for j in 0..cols {
                    let eval = |delta: f64| {
                        let mut s = store.clone();
                        let v = s.get(name).unwrap().get(i, j);
                        s.get_mut(name).unwrap().set(i, j, v + delta);
                        let mut g = Graph::new();
                        let l = build(&mut g, &s);
                        g.scalar(l)
                    };
                    let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                    let analytic = grads.grad(name).unwrap().get(i, j);
                    let rel = (numeric - analytic).abs() / analytic.abs().max(1.0);
                    assert!(
                        rel < 1e-4,
                        "{name}[{i},{j}]: numeric {numeric} analytic {analytic} rel {rel}"
                    );
                }
            }
        }
    }
}
