use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::gradcheck;

type M = Vec<Vec<f64>>;

fn config(d: usize, heads: usize, layers: usize, tie: bool) -> ModelConfig {
    ModelConfig {
        d_model: d,
        heads,
        layers,
        ffn_width: 6,
        src_vocab: 7,
        trg_vocab: 8,
        max_length: 9,
        tie_weights: tie,
        scale_attention: true,
        positional_encoding: true,
    }
}

fn model(cfg: ModelConfig, seed: u64) -> Transformer<f64> {
    Transformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

// Plain nested-vector reference implementation.

fn mat(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn tr(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn layer_norm(a: &M, gamma: &[f64], beta: &[f64]) -> M {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, x)| (x - mean) / (var + 1e-6).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

fn cols(a: &M, from: usize, to: usize) -> M {
    a.iter().map(|r| r[from..to].to_vec()).collect()
}

struct Oracle<'a> {
    m: &'a Transformer<f64>,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> M {
        mat(self.m.params().get(name).unwrap())
    }

    fn v(&self, name: &str) -> Vec<f64> {
        self.m.params().get(name).unwrap().data().to_vec()
    }

    fn embed(&self, table: &str, ids: &[u32]) -> M {
        let e = self.p(table);
        let d = self.m.config().d_model;
        ids.iter()
            .enumerate()
            .map(|(pos, &t)| {
                (0..d)
                    .map(|c| {
                        let i = (c / 2 * 2) as f64;
                        let angle = pos as f64 / 10000f64.powf(i / d as f64);
                        let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                        e[t as usize][c] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    fn attention(&self, prefix: &str, xq: &M, xkv: &M, causal: bool) -> M {
        let cfg = self.m.config();
        let (a, b, c) = (
            self.p(&format!("{prefix}.A")),
            self.p(&format!("{prefix}.B")),
            self.p(&format!("{prefix}.C")),
        );
        let w = cfg.head_width();
        let mut out: M = vec![Vec::new(); xq.len()];
        for h in 0..cfg.heads {
            let (ah, bh, ch) = (cols(&a, h * w, (h + 1) * w), cols(&b, h * w, (h + 1) * w), cols(&c, h * w, (h + 1) * w));
            let logits = mm(&mm(&mm(xq, &ah), &tr(&bh)), &tr(xkv));
            let vals = mm(xkv, &ch);
            for (i, row) in logits.iter().enumerate() {
                let scaled: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        if causal && j > i {
                            f64::NEG_INFINITY
                        } else {
                            x / (w as f64).sqrt()
                        }
                    })
                    .collect();
                let p = softmax(&scaled);
                for k in 0..w {
                    out[i].push((0..vals.len()).map(|j| p[j] * vals[j][k]).sum());
                }
            }
        }
        out
    }

    fn ffn(&self, prefix: &str, x: &M) -> M {
        let b1 = self.v(&format!("{prefix}.b1"));
        let b2 = self.v(&format!("{prefix}.b2"));
        let h: M = mm(x, &self.p(&format!("{prefix}.w1")))
            .into_iter()
            .map(|r| r.iter().zip(&b1).map(|(a, b)| (a + b).max(0.0)).collect())
            .collect();
        mm(&h, &self.p(&format!("{prefix}.w2")))
            .into_iter()
            .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
            .collect()
    }

    fn next_probs(&self, source: &[u32], prefix: &[u32]) -> Vec<f64> {
        let layers = self.m.config().layers;
        let mut x = self.embed("src_embed", source);
        for l in 0..layers {
            let h = self.attention(&format!("enc.{l}.self_attn"), &x, &x, false);
            let h1 = add(
                &layer_norm(&h, &self.v(&format!("enc.{l}.norm.gamma")), &self.v(&format!("enc.{l}.norm.beta"))),
                &x,
            );
            x = add(&self.ffn(&format!("enc.{l}.ffn"), &h1), &h1);
        }
        let mut y = self.embed("trg_embed", prefix);
        for l in 0..layers {
            let h1 = add(&self.attention(&format!("dec.{l}.self_attn"), &y, &y, true), &y);
            let z = self.attention(&format!("dec.{l}.cross_attn"), &h1, &x, false);
            let n = layer_norm(
                &add(&h1, &z),
                &self.v(&format!("dec.{l}.norm.gamma")),
                &self.v(&format!("dec.{l}.norm.beta")),
            );
            y = self.ffn(&format!("dec.{l}.ffn"), &n);
        }
        let w_out = if self.m.params().is_tied() {
            tr(&self.p("trg_embed"))
        } else {
            self.p("out_proj")
        };
        let logits = mm(&y, &w_out);
        softmax(logits.last().unwrap())
    }
}

fn randomize_norms(m: &mut Transformer<f64>, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params().names().to_vec();
    for name in names {
        if name.contains("norm") || name.ends_with(".b1") || name.ends_with(".b2") {
            for x in m.params_mut().get_mut(&name).unwrap().data_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
    }
}

#[test]
fn two_by_two_single_head_attention_by_hand() {
    // One layer, d = 2, one head, identity A = B = C: the encoder attention
    // over two embedded tokens reduces to softmax(X Xᵀ / √2) X.
    let mut cfg = config(2, 1, 1, true);
    cfg.positional_encoding = false;
    let mut m = model(cfg, 1);
    let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    for n in ["enc.0.self_attn.A", "enc.0.self_attn.B", "enc.0.self_attn.C"] {
        *m.params_mut().get_mut(n).unwrap() = eye.clone();
    }
    *m.params_mut().get_mut("src_embed").unwrap() = Tensor::matrix(
        7,
        2,
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, -0.5, 1.0, 0.25, 0.0, 0.0],
    );
    let s2 = 2f64.sqrt();
    // Scaled embeddings of tokens 4 and 5.
    let x = [[0.5 * s2, -0.5 * s2], [s2, 0.25 * s2]];
    let dot = |a: [f64; 2], b: [f64; 2]| (a[0] * b[0] + a[1] * b[1]) / s2;
    let mut expected = Vec::new();
    for q in x {
        let l0 = dot(q, x[0]);
        let l1 = dot(q, x[1]);
        let p0 = 1.0 / (1.0 + (l1 - l0).exp());
        let p1 = 1.0 - p0;
        expected.push([p0 * x[0][0] + p1 * x[1][0], p0 * x[0][1] + p1 * x[1][1]]);
    }
    let mut b = Builder::new(&m, Mode::Eval, false);
    let src = Packed::new([[4u32, 5].as_slice()]);
    let e = b.embed(m.params().layout.src_embed, &src);
    let layer = m.params().layout.enc[0];
    let h = b.attention(e, e, layer.attn, self_segments(&src.spans), false);
    let got = b.g.value(h);
    for (r, row) in expected.iter().enumerate() {
        for (c, want) in row.iter().enumerate() {
            assert!((got.get2(r, c) - want).abs() < 1e-12, "{r},{c}");
        }
    }
}

#[test]
fn decode_step_matches_reference_implementation() {
    for (heads, layers, tie) in [(1, 1, true), (2, 2, true), (2, 2, false)] {
        let mut m = model(config(4, heads, layers, tie), 7 + layers as u64);
        randomize_norms(&mut m, 3);
        let oracle = Oracle { m: &m };
        let source = [4u32, 6, 5, EOS];
        for prefix in [vec![BOS], vec![BOS, 5, 7], vec![BOS, 4, 4, 6, 3]] {
            let got = m.decode_step(&source, &prefix).unwrap();
            let want = oracle.next_probs(&source, &prefix);
            assert_eq!(got.len(), 8);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn unscaled_attention_differs_from_scaled() {
    let cfg = config(4, 2, 1, true);
    let scaled = model(cfg, 5);
    let mut plain_cfg = cfg;
    plain_cfg.scale_attention = false;
    let plain = Transformer::from_params(plain_cfg, scaled.params().clone()).unwrap();
    let a = scaled.decode_step(&[4, 5, EOS], &[BOS, 6]).unwrap();
    let b = plain.decode_step(&[4, 5, EOS], &[BOS, 6]).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}

fn batch() -> Vec<TrainingPair> {
    vec![
        TrainingPair {
            source: vec![4, 5, 6, EOS],
            target: vec![6, 5, 4],
        },
        TrainingPair {
            source: vec![5, EOS],
            target: vec![7],
        },
        TrainingPair {
            source: vec![6, 6, 4, 5, 4, EOS],
            target: vec![4, 4, 7, 6],
        },
    ]
}

#[test]
fn gradients_match_finite_differences() {
    for tie in [true, false] {
        let mut m = model(config(4, 2, 2, tie), 11);
        randomize_norms(&mut m, 4);
        let b = batch();
        let analytic = m.loss_graph(&b, 0.1, Mode::Eval).unwrap().gradients();
        let params = m.params().tensors().to_vec();
        let cfg = *m.config();
        let names = m.params().names().to_vec();
        let numeric = gradcheck::numeric_gradients(&params, 1e-4, |p| {
            let named = names.iter().cloned().zip(p.iter().cloned()).collect();
            let ps = ParamSet::from_named(&cfg, named).unwrap();
            Transformer::from_params(cfg, ps).unwrap().loss(&b, 0.1).unwrap()
        });
        let report = gradcheck::compare(&analytic, &numeric);
        assert!(
            report.max_relative_error < 1e-4,
            "tie={tie}: {:?} in {}",
            report.worst,
            names[report.worst.as_ref().unwrap().tensor]
        );
    }
}

#[test]
fn packed_loss_is_token_weighted_mean_of_single_losses() {
    let m = model(config(4, 2, 2, true), 13);
    let b = batch();
    let joint = m.loss(&b, 0.1).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for p in &b {
        total += m.loss(std::slice::from_ref(p), 0.1).unwrap() * p.target_positions() as f64;
        count += p.target_positions();
    }
    assert!((joint - total / count as f64).abs() < 1e-12);
}

#[test]
fn batched_inference_matches_single() {
    let m = model(config(4, 2, 2, true), 17);
    let sources: Vec<&[u32]> = vec![&[4, 5, EOS], &[6, EOS], &[5, 5, 6, 4, EOS]];
    let enc = m.encode(&sources).unwrap();
    let queries: Vec<(usize, &[u32])> = vec![(2, &[BOS, 4]), (0, &[BOS]), (1, &[BOS, 7, 7, 5]), (2, &[BOS])];
    let joint = m.next_log_probs(&enc, &queries).unwrap();
    for (q, row) in queries.iter().zip(&joint) {
        let single = m.decode_step(sources[q.0], q.1).unwrap();
        for (a, b) in row.iter().zip(&single) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gold_log_probs_agree_with_loss_without_smoothing() {
    let m = model(config(4, 2, 1, true), 19);
    let b = batch();
    let lp = m.gold_log_probs(&b).unwrap();
    let n: usize = lp.iter().map(Vec::len).sum();
    let mean_nll = -lp.iter().flatten().sum::<f64>() / n as f64;
    assert!((mean_nll - m.loss(&b, 0.0).unwrap()).abs() < 1e-12);
}

#[test]
fn future_positions_do_not_affect_earlier_distributions() {
    let m = model(config(4, 2, 2, false), 23);
    let source = [4u32, 6, EOS];
    let enc = m.encode(&[&source]).unwrap();
    let base = m.all_log_probs(&enc, &[(0, &[BOS, 5, 6, 7])]).unwrap().remove(0);
    let changed = m.all_log_probs(&enc, &[(0, &[BOS, 5, 4, 3])]).unwrap().remove(0);
    assert_eq!(base[0], changed[0]);
    assert_eq!(base[1], changed[1]);
    assert_ne!(base[2], changed[2]);
    // Perturb the embedding of token 7, which only occurs at the last position.
    let mut p = m.clone();
    for x in p.params_mut().target_embedding_mut().row_mut(7) {
        *x += 0.3;
    }
    let enc_p = p.encode(&[&source]).unwrap();
    let perturbed = p.all_log_probs(&enc_p, &[(0, &[BOS, 5, 6, 7])]).unwrap().remove(0);
    assert_eq!(&base[..3], &perturbed[..3]);
    assert_ne!(base[3], perturbed[3]);
}

#[test]
fn tied_projection_is_embedding_transpose() {
    let m = model(config(4, 2, 1, true), 29);
    assert!(m.params().get("out_proj").is_none());
    assert_eq!(m.params().output_projection(), m.params().target_embedding().transpose());
    let untied = model(config(4, 2, 1, false), 29);
    assert_eq!(untied.params().output_projection().shape(), &[4, 8]);
}

#[test]
fn dropout_changes_training_loss_but_not_eval() {
    let m = model(config(4, 2, 1, true), 31);
    let b = batch();
    let eval = m.loss(&b, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = m
        .loss_graph(&b, 0.1, Mode::Train { dropout: 0.3, rng: &mut rng })
        .unwrap()
        .loss_value();
    assert_ne!(eval, train);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let no_drop = m
        .loss_graph(&b, 0.1, Mode::Train { dropout: 0.0, rng: &mut rng })
        .unwrap()
        .loss_value();
    assert_eq!(eval, no_drop);
}

#[test]
fn invalid_inputs_are_errors() {
    let m = model(config(4, 2, 1, true), 37);
    let long: Vec<u32> = std::iter::once(BOS).chain([4; 9]).collect();
    assert!(matches!(
        m.decode_step(&[4, EOS], &long),
        Err(Error::PrefixTooLong { len: 10, max: 9 })
    ));
    assert!(m.decode_step(&[4, EOS], &[5]).is_err());
    assert!(m.decode_step(&[40, EOS], &[BOS]).is_err());
    assert!(matches!(m.loss(&[], 0.1), Err(Error::EmptyBatch)));
    let too_long = TrainingPair {
        source: vec![4, EOS],
        target: vec![4; 9],
    };
    assert!(m.loss(&[too_long], 0.1).is_err());
}

#[test]
fn training_pair_truncates_to_fit() {
    let (p, cut) = TrainingPair::new(&[4; 12], &[5; 12], 9);
    assert!(cut);
    assert_eq!(p.source.len(), 9);
    assert_eq!(p.source.last(), Some(&EOS));
    assert_eq!(p.target_positions(), 9);
    let (q, cut) = TrainingPair::new(&[4, 5], &[6], 9);
    assert!(!cut);
    assert_eq!(q.source, vec![4, 5, EOS]);
    assert_eq!(q.target, vec![6]);
}

#[test]
fn config_validation() {
    let mut c = config(6, 4, 1, true);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.heads = 3;
    assert!(c.validate().is_ok());
    c.layers = 0;
    assert!(c.validate().is_err());
}
