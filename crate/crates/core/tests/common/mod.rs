//! Shared test oracles.
#![allow(dead_code)]

/// Plain nested-loop forward pass, written from the equations without any
/// of the library's helpers.
pub mod naive {
    use lrlm_core::mlm::{InputSequence, MaskedBatch, IGNORE};
    use lrlm_core::model::{ModelConfig, ParamSet};

    pub type Mat = Vec<Vec<f64>>;

    fn get(p: &ParamSet, name: &str) -> (Vec<usize>, Vec<f64>) {
        let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
        (t.shape.clone(), t.data.iter().map(|&x| x as f64).collect())
    }

    pub fn matrix(p: &ParamSet, name: &str) -> Mat {
        let (shape, data) = get(p, name);
        data.chunks(shape[1]).map(|c| c.to_vec()).collect()
    }

    pub fn vector(p: &ParamSet, name: &str) -> Vec<f64> {
        get(p, name).1
    }

    pub fn dense(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        x * 0.5 * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()))
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    /// Final hidden states `(n, d)` for one sequence.
    pub fn hidden(cfg: &ModelConfig, p: &ParamSet, seq: &InputSequence) -> Mat {
        let n = seq.len();
        let d = cfg.hidden_dim;
        let word = matrix(p, "embeddings.word");
        let pos = matrix(p, "embeddings.position");
        let typ = matrix(p, "embeddings.token_type");
        let emb: Mat = (0..n)
            .map(|t| {
                (0..d)
                    .map(|j| {
                        word[seq.ids[t] as usize][j] + pos[t][j] + typ[seq.type_ids[t] as usize][j]
                    })
                    .collect()
            })
            .collect();
        let eps = cfg.layer_norm_eps;
        let mut h = norm(
            &emb,
            &vector(p, "embeddings.norm.gamma"),
            &vector(p, "embeddings.norm.beta"),
            eps,
        );
        let heads = cfg.num_heads;
        let hd = d / heads;
        for l in 0..cfg.num_layers {
            let m = |s: &str| matrix(p, &format!("encoder.{l}.{s}"));
            let v = |s: &str| vector(p, &format!("encoder.{l}.{s}"));
            let q = dense(&h, &m("attention.query.weight"), &v("attention.query.bias"));
            let k = dense(&h, &m("attention.key.weight"), &v("attention.key.bias"));
            let val = dense(&h, &m("attention.value.weight"), &v("attention.value.bias"));
            let mut ctx = vec![vec![0.0; d]; n];
            for head in 0..heads {
                let off = head * hd;
                for i in 0..n {
                    let mut scores = vec![f64::NEG_INFINITY; n];
                    for j in 0..n {
                        if seq.attention_mask[j] == 1 {
                            let dot: f64 = (0..hd).map(|c| q[i][off + c] * k[j][off + c]).sum();
                            scores[j] = dot / (hd as f64).sqrt();
                        }
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..n {
                        for c in 0..hd {
                            ctx[i][off + c] += exps[j] / z * val[j][off + c];
                        }
                    }
                }
            }
            let a = dense(
                &ctx,
                &m("attention.output.weight"),
                &v("attention.output.bias"),
            );
            let h1 = norm(
                &add(&h, &a),
                &v("attention.norm.gamma"),
                &v("attention.norm.beta"),
                eps,
            );
            let inter: Mat = dense(
                &h1,
                &m("ffn.intermediate.weight"),
                &v("ffn.intermediate.bias"),
            )
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
            let f = dense(&inter, &m("ffn.output.weight"), &v("ffn.output.bias"));
            h = norm(
                &add(&h1, &f),
                &v("ffn.norm.gamma"),
                &v("ffn.norm.beta"),
                eps,
            );
        }
        h
    }

    /// Logits `(n, vocab)` for one sequence.
    pub fn logits(cfg: &ModelConfig, p: &ParamSet, seq: &InputSequence) -> Mat {
        let d = cfg.hidden_dim;
        let eps = cfg.layer_norm_eps;
        let word = matrix(p, "embeddings.word");
        let h = hidden(cfg, p, seq);
        let t: Mat = dense(
            &h,
            &matrix(p, "mlm.transform.weight"),
            &vector(p, "mlm.transform.bias"),
        )
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
        let z = norm(
            &t,
            &vector(p, "mlm.norm.gamma"),
            &vector(p, "mlm.norm.beta"),
            eps,
        );
        let bias = vector(p, "mlm.output_bias");
        z.iter()
            .map(|row| {
                (0..cfg.vocab_size)
                    .map(|v| bias[v] + (0..d).map(|j| row[j] * word[v][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn loss(cfg: &ModelConfig, p: &ParamSet, batch: &MaskedBatch) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (seq, labels) in batch.inputs.iter().zip(&batch.labels) {
            let logits = logits(cfg, p, seq);
            for (t, &y) in labels.iter().enumerate() {
                if y == IGNORE {
                    continue;
                }
                let row = &logits[t];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[y as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}
