use pedformer::model::{
    attention, causal_mask, embed_input, multi_head_attention, positional_encoding,
    Architecture, AttentionVars, ModelConfig, Transformer, BOX_DIM,
};
use pedformer::numerics::{AttentionLayout, AttentionMask, Segment, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn window(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..t {
        let (x, y) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.6));
        data.extend([x, y, x + rng.gen_range(0.01..0.2), y + rng.gen_range(0.05..0.4)]);
    }
    Tensor::new(vec![t, BOX_DIM], data).unwrap()
}

fn rows(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn plus_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

fn softmax_attention(q: &Mat, k: &Mat, v: &Mat, causal: bool) -> Mat {
    let scale = 1.0 / (k[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let visible = if causal { i + 1 } else { k.len() };
            let s: Vec<f64> = k[..visible]
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum())
                .collect()
        })
        .collect()
}

/// Parameter lookup by name for the reference forward.
struct Ref<'a> {
    m: &'a Transformer,
}

impl Ref<'_> {
    fn mat(&self, name: &str) -> Mat {
        rows(self.m.params().get(name).unwrap_or_else(|| panic!("{name}")))
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.m.params().get(name).unwrap().data().to_vec()
    }

    fn linear(&self, x: &Mat, prefix: &str) -> Mat {
        plus_bias(&mm(x, &self.mat(&format!("{prefix}.w"))), &self.vec(&format!("{prefix}.b")))
    }

    fn layer_norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.vec(&format!("{prefix}.gain"));
        let b = self.vec(&format!("{prefix}.bias"));
        let eps = self.m.config().layer_norm_eps;
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) / (var + eps).sqrt() * g[c] + b[c])
                    .collect()
            })
            .collect()
    }

    fn mha(&self, q_in: &Mat, kv: &Mat, prefix: &str, causal: bool) -> Mat {
        let heads: Vec<Mat> = (0..self.m.config().n_heads)
            .map(|h| {
                let q = mm(q_in, &self.mat(&format!("{prefix}.h{h}.wq")));
                let k = mm(kv, &self.mat(&format!("{prefix}.h{h}.wk")));
                let v = mm(kv, &self.mat(&format!("{prefix}.h{h}.wv")));
                softmax_attention(&q, &k, &v, causal)
            })
            .collect();
        let concat: Mat = (0..q_in.len())
            .map(|i| heads.iter().flat_map(|h| h[i].clone()).collect())
            .collect();
        mm(&concat, &self.mat(&format!("{prefix}.wo")))
    }

    fn ffn(&self, x: &Mat, prefix: &str) -> Mat {
        let h = relu(&plus_bias(
            &mm(x, &self.mat(&format!("{prefix}.w1"))),
            &self.vec(&format!("{prefix}.b1")),
        ));
        plus_bias(&mm(&h, &self.mat(&format!("{prefix}.w2"))), &self.vec(&format!("{prefix}.b2")))
    }

    fn embed(&self, x: &Tensor) -> Mat {
        let pe = rows(&positional_encoding(x.shape()[0], self.m.config().d_model));
        add(&self.linear(&rows(x), "emb"), &pe)
    }

    fn encoder(&self, x: &Tensor) -> Mat {
        let cfg = self.m.config();
        let mut h = self.embed(x);
        for l in 0..cfg.n_layers {
            let len = h.len();
            let pooled = (cfg.architecture == Architecture::Tep && len >= cfg.pool_window)
                .then(|| (len - cfg.pool_window) / cfg.pool_stride + 1)
                .filter(|&p| p >= cfg.min_pooled_len);
            let query = match pooled {
                Some(p) => (0..p)
                    .map(|i| {
                        let win = &h[i * cfg.pool_stride..i * cfg.pool_stride + cfg.pool_window];
                        (0..cfg.d_model)
                            .map(|c| win.iter().map(|r| r[c]).sum::<f64>() / win.len() as f64)
                            .collect()
                    })
                    .collect(),
                None => h.clone(),
            };
            let att = self.mha(&query, &h, &format!("enc.{l}.mha"), false);
            let h1 = self.layer_norm(&add(&query, &att), &format!("enc.{l}.ln1"));
            let ff = self.ffn(&h1, &format!("enc.{l}.ffn"));
            h = self.layer_norm(&add(&h1, &ff), &format!("enc.{l}.ln2"));
        }
        h
    }

    fn probability(&self, x: &Tensor) -> f64 {
        let h = self.encoder(x);
        let d = self.m.config().d_model;
        let mean: Vec<f64> = (0..d)
            .map(|c| h.iter().map(|r| r[c]).sum::<f64>() / h.len() as f64)
            .collect();
        let hidden = relu(&self.linear(&vec![mean], "cls.hidden"));
        let logit = self.linear(&hidden, "cls.out")[0][0];
        1.0 / (1.0 + (-logit).exp())
    }

    fn trajectory(&self, x: &Tensor, y_in: &Tensor) -> Mat {
        let memory = self.encoder(x);
        let mut h = self.embed(y_in);
        for l in 0..self.m.config().n_layers {
            let s = self.mha(&h, &h, &format!("dec.{l}.self"), true);
            h = self.layer_norm(&add(&h, &s), &format!("dec.{l}.ln1"));
            let c = self.mha(&h, &memory, &format!("dec.{l}.cross"), false);
            h = self.layer_norm(&add(&h, &c), &format!("dec.{l}.ln2"));
            let f = self.ffn(&h, &format!("dec.{l}.ffn"));
            h = self.layer_norm(&add(&h, &f), &format!("dec.{l}.ln3"));
        }
        self.linear(&h, "traj")
    }
}

fn small(arch: Architecture) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers: 4,
        d_ffn: 24,
        d_cls: Some(8),
        ..ModelConfig::new(arch)
    }
}

#[test]
fn positional_encoding_examples() {
    let pe = positional_encoding(4, 8);
    for c in 0..8 {
        assert_eq!(pe.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((pe.get(1, 0) - 0.8415).abs() < 1e-4);
    assert!((pe.get(3, 5) - (3.0 / 10000f64.powf(4.0 / 8.0)).cos()).abs() < 1e-15);
}

#[test]
fn positional_rows_are_distinct() {
    for d in [2, 4, 16, 128] {
        let pe = positional_encoding(512, d);
        for i in 0..512 {
            for j in i + 1..512 {
                assert!(pe.row(i) != pe.row(j), "d={d}: rows {i} and {j} coincide");
            }
        }
    }
}

#[test]
fn embedding_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pe = positional_encoding(16, 6);
    let x = random(&[5, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w0 = tape.constant(Tensor::zeros(&[4, 6]));
    let b0 = tape.constant(Tensor::zeros(&[6]));
    let seg = [Segment::new(0, 5)];
    let out = embed_input(&mut tape, xv, w0, b0, &pe, &seg).unwrap();
    assert_eq!(tape.value(out).data(), &pe.data()[..30]);

    let one = tape.constant(Tensor::zeros(&[1, 4]));
    let out = embed_input(&mut tape, one, w0, b0, &pe, &[Segment::new(0, 1)]).unwrap();
    assert_eq!(tape.value(out).get(0, 1), 1.0);
    assert_eq!(tape.value(out).get(0, 0), 0.0);

    let w = random(&[4, 6], &mut rng);
    let b = random(&[6], &mut rng);
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let out = embed_input(&mut tape, xv, wv, bv, &pe, &seg).unwrap();
    let expect = add(&plus_bias(&mm(&rows(&x), &rows(&w)), b.data()), &rows(&positional_encoding(5, 6)));
    for (r, e) in rows(tape.value(out)).iter().zip(&expect) {
        for (a, b) in r.iter().zip(e) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let q = tape.constant(random(&[1, 3], &mut rng));
    let k = tape.constant(random(&[1, 3], &mut rng));
    let v_t = random(&[1, 3], &mut rng);
    let v = tape.constant(v_t.clone());
    let out = attention(&mut tape, q, k, v, &Tensor::zeros(&[1, 1])).unwrap();
    assert_eq!(tape.value(out).data(), v_t.data());

    let q = tape.constant(random(&[3, 3], &mut rng));
    let krow = random(&[1, 3], &mut rng);
    let k = tape.constant(Tensor::new(vec![4, 3], krow.data().repeat(4)).unwrap());
    let v_t = random(&[4, 3], &mut rng);
    let v = tape.constant(v_t.clone());
    let out = attention(&mut tape, q, k, v, &Tensor::zeros(&[3, 4])).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            let mean = (0..4).map(|i| v_t.get(i, c)).sum::<f64>() / 4.0;
            assert!((tape.value(out).get(r, c) - mean).abs() < 1e-14);
        }
    }

    let (qt, kt, vt) = (random(&[4, 5], &mut rng), random(&[4, 5], &mut rng), random(&[4, 5], &mut rng));
    for causal in [false, true] {
        let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
        let mask = if causal { causal_mask(4) } else { Tensor::zeros(&[4, 4]) };
        let out = attention(&mut tape, q, k, v, &mask).unwrap();
        let expect = softmax_attention(&rows(&qt), &rows(&kt), &rows(&vt), causal);
        for (r, e) in rows(tape.value(out)).iter().zip(&expect) {
            for (a, b) in r.iter().zip(e) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

fn attention_vars(tape: &mut Tape, ws: &[Tensor], heads: usize, wo: &Tensor) -> AttentionVars {
    AttentionVars {
        wq: (0..heads).map(|h| tape.constant(ws[3 * h].clone())).collect(),
        wk: (0..heads).map(|h| tape.constant(ws[3 * h + 1].clone())).collect(),
        wv: (0..heads).map(|h| tape.constant(ws[3 * h + 2].clone())).collect(),
        wo: tape.constant(wo.clone()),
    }
}

#[test]
fn single_head_identity_equals_bare_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let eye = Tensor::eye(4);
    let w = attention_vars(&mut tape, &[eye.clone(), eye.clone(), eye.clone()], 1, &eye);
    let layout = AttentionLayout::self_attention(vec![Segment::new(0, 5)]);
    let out = multi_head_attention(&mut tape, xv, xv, &w, &layout, AttentionMask::None).unwrap();
    let bare = attention(&mut tape, xv, xv, xv, &Tensor::zeros(&[5, 5])).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(bare)) < 1e-14);
}

#[test]
fn two_heads_match_per_head_oracle_with_unequal_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, f, heads) = (6, 3, 2);
    let q_in = random(&[3, d], &mut rng);
    let kv_in = random(&[7, d], &mut rng);
    let ws: Vec<Tensor> = (0..3 * heads).map(|_| random(&[d, f], &mut rng)).collect();
    let wo = random(&[d, d], &mut rng);
    let mut tape = Tape::new();
    let (qv, kvv) = (tape.constant(q_in.clone()), tape.constant(kv_in.clone()));
    let w = attention_vars(&mut tape, &ws, heads, &wo);
    let layout = AttentionLayout::new(vec![Segment::new(0, 3)], vec![Segment::new(0, 7)]).unwrap();
    let out = multi_head_attention(&mut tape, qv, kvv, &w, &layout, AttentionMask::None).unwrap();

    let per_head: Vec<Mat> = (0..heads)
        .map(|h| {
            softmax_attention(
                &mm(&rows(&q_in), &rows(&ws[3 * h])),
                &mm(&rows(&kv_in), &rows(&ws[3 * h + 1])),
                &mm(&rows(&kv_in), &rows(&ws[3 * h + 2])),
                false,
            )
        })
        .collect();
    let concat: Mat = (0..3).map(|i| per_head.iter().flat_map(|h| h[i].clone()).collect()).collect();
    let expect = mm(&concat, &rows(&wo));
    let got = rows(tape.value(out));
    assert_eq!(got.len(), 3);
    for (r, e) in got.iter().zip(&expect) {
        for (a, b) in r.iter().zip(e) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}

#[test]
fn causal_mha_ignores_later_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, heads) = (8, 2);
    let ws: Vec<Tensor> = (0..3 * heads).map(|_| random(&[d, d / heads], &mut rng)).collect();
    let wo = random(&[d, d], &mut rng);
    let x = random(&[6, d], &mut rng);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = attention_vars(&mut tape, &ws, heads, &wo);
        let layout = AttentionLayout::self_attention(vec![Segment::new(0, 6)]);
        let out = multi_head_attention(&mut tape, xv, xv, &w, &layout, AttentionMask::Causal).unwrap();
        tape.value(out).clone()
    };
    let base = run(&x);
    for j in 0..6 {
        let mut y = x.clone();
        for c in 0..d {
            y.data_mut()[j * d + c] += 3.0;
        }
        let moved = run(&y);
        for i in 0..j {
            for c in 0..d {
                assert!((base.get(i, c) - moved.get(i, c)).abs() <= 1e-9);
            }
        }
        assert!((0..d).any(|c| base.get(j, c) != moved.get(j, c)));
    }
}

#[test]
fn forward_matches_reference_for_all_architectures() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for arch in [Architecture::Teo, Architecture::Tep, Architecture::Ted] {
        let m = Transformer::new(small(arch), 11).unwrap();
        let r = Ref { m: &m };
        for _ in 0..3 {
            let x = window(&mut rng, 16);
            let p = m.probability(&x).unwrap();
            assert!((p - r.probability(&x)).abs() < 1e-12, "{arch}");
        }
        if arch == Architecture::Ted {
            let x = window(&mut rng, 16);
            let y = window(&mut rng, 7);
            let (_, traj) = m.forward_ted(&x, &y).unwrap();
            for (a, b) in rows(&traj).iter().flatten().zip(r.trajectory(&x, &y).iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn head_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = window(&mut rng, 16);
    let mut m = Transformer::new(small(Architecture::Teo), 2).unwrap();
    let w = m.params().get("cls.out.w").unwrap().shape().to_vec();
    m.params_mut().set("cls.out.w", Tensor::zeros(&w)).unwrap();
    m.params_mut().set("cls.out.b", Tensor::zeros(&[1])).unwrap();
    assert_eq!(m.forward_teo(&x).unwrap(), 0.5);
    m.params_mut().set("cls.out.b", Tensor::full(&[1], 20.0)).unwrap();
    assert!(m.forward_teo(&x).unwrap() >= 1.0 - 1e-8);
}

#[test]
fn tep_pooling_schedule() {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        ..ModelConfig::new(Architecture::Tep)
    };
    assert_eq!(cfg.encoder_lengths(), vec![8, 4, 2, 2]);
    let m = Transformer::new(cfg, 0).unwrap();
    let mut tape = Tape::new();
    let b = m.params().bind(&mut tape, |_| false);
    let x = window(&mut ChaCha8Rng::seed_from_u64(8), 16);
    let out = m.forward(&mut tape, &b, &x, None, None).unwrap();
    assert_eq!(out.encoder_lengths, vec![8, 4, 2, 2]);
}

#[test]
fn ted_probability_ignores_the_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = Transformer::new(small(Architecture::Ted), 3).unwrap();
    for c in [1, 5, 30] {
        let x = window(&mut rng, 16);
        let y = window(&mut rng, c);
        let (p, traj) = m.forward_ted(&x, &y).unwrap();
        assert_eq!(p.to_bits(), m.forward_ted_encoder_only(&x).unwrap().to_bits());
        assert_eq!(traj.shape(), [c, BOX_DIM]);
    }
}

#[test]
fn ted_trajectory_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = Transformer::new(small(Architecture::Ted), 4).unwrap();
    let x = window(&mut rng, 16);
    let y = window(&mut rng, 9);
    let (_, base) = m.forward_ted(&x, &y).unwrap();
    for j in 0..9 {
        let mut y2 = y.clone();
        for c in 0..BOX_DIM {
            y2.data_mut()[j * BOX_DIM + c] += rng.gen_range(0.1..0.5);
        }
        let (_, moved) = m.forward_ted(&x, &y2).unwrap();
        for i in 0..j {
            for c in 0..BOX_DIM {
                assert!((base.get(i, c) - moved.get(i, c)).abs() <= 1e-9, "step {i} saw step {j}");
            }
        }
        assert!((0..BOX_DIM).any(|c| base.get(j, c) != moved.get(j, c)));
    }
}

#[test]
fn rollout_feeds_back_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = Transformer::new(small(Architecture::Ted), 5).unwrap();
    let x = window(&mut rng, 16);
    let roll = m.rollout_trajectory(&x, 4).unwrap();
    let mut y = x.row(15).to_vec();
    y.extend_from_slice(&roll.data()[..3 * BOX_DIM]);
    let (_, traj) = m.forward_ted(&x, &Tensor::new(vec![4, BOX_DIM], y).unwrap()).unwrap();
    assert!(traj.max_abs_diff(&roll) < 1e-12);
}

#[test]
fn swapping_frames_changes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for arch in [Architecture::Teo, Architecture::Tep, Architecture::Ted] {
        let m = Transformer::new(small(arch), 6).unwrap();
        let x = window(&mut rng, 16);
        let mut swapped = x.clone();
        let d = swapped.data_mut();
        for c in 0..BOX_DIM {
            d.swap(2 * BOX_DIM + c, 11 * BOX_DIM + c);
        }
        assert_ne!(m.probability(&x).unwrap(), m.probability(&swapped).unwrap(), "{arch}");
    }
}

#[test]
fn parameter_names_are_unique_and_stable() {
    let m = Transformer::new(small(Architecture::Ted), 0).unwrap();
    let names: Vec<&str> = m.params().names().collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    for n in ["emb.w", "enc.3.mha.h2.wq", "enc.0.ln2.gain", "dec.1.cross.wo", "traj.b", "cls.out.w"] {
        assert!(names.contains(&n), "{n}");
    }
    let again = Transformer::new(small(Architecture::Ted), 0).unwrap();
    assert_eq!(m.params(), again.params());
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        d_model: 10,
        n_heads: 4,
        ..ModelConfig::default()
    };
    assert!(Transformer::new(bad, 0).is_err());
    let zero = ModelConfig {
        n_layers: 0,
        ..ModelConfig::default()
    };
    assert!(zero.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn finite_inputs_give_finite_outputs(seed in 0u64..1000, arch in 0usize..3, scale in 0.0f64..50.0) {
        let arch = [Architecture::Teo, Architecture::Tep, Architecture::Ted][arch];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Transformer::new(small(arch), seed).unwrap();
        let x = Tensor::new(vec![16, 4], (0..64).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap();
        let p = m.probability(&x).unwrap();
        prop_assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        if arch == Architecture::Ted {
            let (_, traj) = m.forward_ted(&x, &window(&mut rng, 5)).unwrap();
            prop_assert!(traj.is_finite());
        }
    }
}
