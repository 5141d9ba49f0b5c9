use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::VideoFeatures;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_v: 5,
        d_f: 6,
        d_model: 8,
        d_hat: 8,
        heads: 2,
        levels: 2,
        text_dim: 4,
        ffn_mult: 2,
        head_layers: 2,
        temperature: 10.0,
        late_fusion_only: false,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn video(cfg: &ModelConfig, t: usize, seed: u64) -> VideoFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoFeatures::new(
        "v",
        random(&mut rng, &[t, cfg.d_v]),
        random(&mut rng, &[t, cfg.d_f]),
        vec![],
    )
    .unwrap()
}

fn table(a: usize, s: usize, seed: u64) -> ClassEmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..a)
        .map(|_| (0..s).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    ClassEmbeddingTable::from_rows(&rows).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn config_validation() {
    let mut cfg = tiny_cfg();
    cfg.d_hat = 4;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny_cfg();
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg();
    cfg.temperature = 0.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_pairs_round_trip() {
    let cfg = tiny_cfg();
    let mut back = ModelConfig::default();
    for (k, v) in cfg.to_pairs() {
        assert!(back.set(k, &v).unwrap());
    }
    assert_eq!(back, cfg);
    assert!(!back.set("nope", "1").unwrap());
}

#[test]
fn projection_zero_input_and_shapes() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 1).unwrap();
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let zero = VideoFeatures::new("z", Tensor::zeros(&[7, 5]), Tensor::zeros(&[7, 6]), vec![]).unwrap();
    let (zv, zf) = model.project_inputs(&tape, &b, &zero).unwrap();
    assert!(zv.value().data().iter().all(|&x| x == 0.0));
    assert!(zf.value().data().iter().all(|&x| x == 0.0));
    let (zv, zf) = model.project_inputs(&tape, &b, &video(&cfg, 7, 3)).unwrap();
    assert_eq!(zv.shape(), vec![7, 8]);
    assert_eq!(zf.shape(), vec![7, 8]);

    let wrong = VideoFeatures::new("w", Tensor::zeros(&[7, 4]), Tensor::zeros(&[7, 6]), vec![]).unwrap();
    assert!(matches!(model.project_inputs(&tape, &b, &wrong), Err(Error::Config(_))));
}

#[test]
fn projection_gradients() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 2).unwrap();
    let v = video(&cfg, 4, 9);
    let err = params_grad_check(&params, 1e-5, |tape, b| {
        let (zv, zf) = model.project_inputs(tape, b, &v)?;
        Ok(zv.mul(&zv)?.sum().add(&zf.sum())?)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn self_attention_single_position() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 4).unwrap();
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tape.constant(random(&mut rng, &[1, 8]));
    let att = model.self_attend(&b, 0, x, &[true]).unwrap();
    for w in &att.weights {
        assert_eq!(w.value().data(), &[1.0]);
    }
    // residual + concat_h(norm(x) W_v^h) W_o
    let normed = x
        .layer_norm(&b.get("enc.l0.sa.ln.gain").unwrap(), &b.get("enc.l0.sa.ln.bias").unwrap(), LAYER_NORM_EPS)
        .unwrap();
    let heads: Vec<_> = (0..2)
        .map(|h| normed.matmul(&b.get(&format!("enc.l0.sa.v{h}")).unwrap()).unwrap())
        .collect();
    let expect = x
        .add(&Var::concat_cols(&heads).unwrap().matmul(&b.get("enc.l0.sa.o").unwrap()).unwrap())
        .unwrap();
    assert!(close(att.out.value().data(), expect.value().data(), 1e-14));
}

#[test]
fn self_attention_uniform_on_identical_rows() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 4).unwrap();
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
    let x = tape.constant(Tensor::from_rows(&vec![row; 5]).unwrap());
    let att = model.self_attend(&b, 0, x, &[true; 5]).unwrap();
    for w in &att.weights {
        assert!(w.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[6, 8]);
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let y = model.self_attend(&b, 0, tape.constant(x), &[true; 6]).unwrap().out.value();
    let yp = model.self_attend(&b, 0, tape.constant(xp), &[true; 6]).unwrap().out.value();
    for (k, &i) in perm.iter().enumerate() {
        assert!(close(yp.row(k), y.row(i), 1e-12));
    }
}

#[test]
fn cross_attention_single_class_and_duplicates() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let zf = random(&mut rng, &[5, 8]);
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let one = table(1, 4, 10);
    let x = tape.constant(zf.clone());
    let single = model
        .cross_attend(&b, 0, x, tape.constant(one.matrix().clone()), &[true; 5])
        .unwrap();
    for w in &single.weights {
        assert!(w.value().data().iter().all(|&v| v == 1.0));
    }
    let twice = ClassEmbeddingTable::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec()]).unwrap();
    let dup = model
        .cross_attend(&b, 0, x, tape.constant(twice.matrix().clone()), &[true; 5])
        .unwrap();
    assert!(close(dup.out.value().data(), single.out.value().data(), 1e-12));

    let empty_err = model.cross_attend(&b, 0, x, tape.constant(Tensor::zeros(&[1, 3])), &[true; 5]);
    assert!(empty_err.is_err());
}

#[test]
fn cross_attention_invariant_to_class_order() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let zf = random(&mut rng, &[5, 8]);
    let t = table(4, 4, 13);
    let permuted = t.subset(&[2, 0, 3, 1]).unwrap();
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let x = tape.constant(zf);
    let a = model.cross_attend(&b, 0, x, tape.constant(t.matrix().clone()), &[true; 5]).unwrap();
    let p = model
        .cross_attend(&b, 0, x, tape.constant(permuted.matrix().clone()), &[true; 5])
        .unwrap();
    assert!(close(a.out.value().data(), p.out.value().data(), 1e-12));
}

#[test]
fn late_fusion_ignores_text_in_encoder() {
    let mut cfg = tiny_cfg();
    cfg.late_fusion_only = true;
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 14).unwrap();
    let v = video(&cfg, 8, 15);
    let run = |t: &ClassEmbeddingTable| {
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let (zv, zf) = model.project_inputs(&tape, &b, &v).unwrap();
        let zl = tape.constant(t.matrix().clone());
        let pyr = model.encode(&tape, &b, zv, zf, zl, &v.mask()).unwrap();
        pyr.levels.iter().map(|l| l.value().data().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(&table(3, 4, 1)), run(&table(5, 4, 2)));
}

#[test]
fn mixer_zero_ffn_is_passthrough() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = ModelParams::init(&cfg, 16).unwrap();
    for name in ["enc.l0.ffn.w1", "enc.l0.ffn.b1", "enc.l0.ffn.w2", "enc.l0.ffn.b2"] {
        let t = params.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let zv = tape.constant(random(&mut rng, &[4, 8]));
    let zf = tape.constant(random(&mut rng, &[4, 8]));
    let zl = tape.constant(table(3, 4, 18).matrix().clone());
    let out = model.mixer_level(&b, 0, zv, Some(zf), zl, &[true; 4]).unwrap();
    let sum = out
        .guided
        .unwrap()
        .add(&out.self_attention.out)
        .unwrap();
    assert_eq!(out.fused.value().data(), sum.value().data());
}

#[test]
fn mixer_gradients() {
    let mut cfg = tiny_cfg();
    cfg.levels = 1;
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let zv = random(&mut rng, &[4, 8]);
    let zf = random(&mut rng, &[4, 8]);
    let zl = table(3, 4, 21);
    let err = params_grad_check(&params, 1e-5, |tape, b| {
        let out = model.mixer_level(
            b,
            0,
            tape.constant(zv.clone()),
            Some(tape.constant(zf.clone())),
            tape.constant(zl.matrix().clone()),
            &[true; 4],
        )?;
        // a non-linear readout so every weight matters
        Ok(out.fused.mul(&out.fused)?.sum())
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pyramid_lengths_and_errors() {
    let mut cfg = tiny_cfg();
    cfg.levels = 3;
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 22).unwrap();
    let t = table(2, 4, 23);
    let out = predict_heads(&model, &params, &video(&cfg, 16, 24), &t).unwrap();
    let lens: Vec<usize> = out.levels.iter().map(|l| l.logits.rows()).collect();
    assert_eq!(lens, vec![16, 8, 4]);
    assert_eq!(cfg.level_lengths(16), vec![16, 8, 4]);
    assert_eq!(cfg.level_lengths(13), vec![13, 7, 4]);
    for l in &out.levels {
        assert_eq!(l.logits.cols(), 2);
        assert_eq!(l.offsets.cols(), 2);
    }
    let short = predict_heads(&model, &params, &video(&cfg, 3, 24), &t);
    assert!(matches!(short, Err(Error::Config(_))));

    cfg.levels = 1;
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 22).unwrap();
    let out = predict_heads(&model, &params, &video(&cfg, 5, 24), &t).unwrap();
    assert_eq!(out.levels.len(), 1);
    assert_eq!(out.levels[0].logits.rows(), 5);
}

#[test]
fn masked_tail_matches_truncated_input() {
    let mut cfg = tiny_cfg();
    cfg.levels = 3;
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 25).unwrap();
    let t = table(3, 4, 26);
    let short = video(&cfg, 10, 27);
    let padded = crate::datasets::pad_or_window(&short, 16).unwrap().remove(0);
    let a = predict_heads(&model, &params, &short, &t).unwrap();
    let b = predict_heads(&model, &params, &padded, &t).unwrap();
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        let n = la.logits.rows();
        assert!(lb.mask[..n].iter().all(|&m| m));
        assert!(lb.mask[n..].iter().all(|&m| !m));
        assert!(close(la.logits.data(), &lb.logits.data()[..la.logits.numel()], 1e-12));
        assert!(close(la.offsets.data(), &lb.offsets.data()[..la.offsets.numel()], 1e-12));
    }

    // padded keys carry zero attention mass at every level
    let tape = Tape::new();
    let bnd = params.bind(&tape, |_| false);
    let (zv, zf) = model.project_inputs(&tape, &bnd, &padded).unwrap();
    let zl = tape.constant(t.matrix().clone());
    let mut trace = Vec::new();
    let pyr = model
        .encode_traced(&tape, &bnd, zv, zf, zl, &padded.mask(), Some(&mut trace))
        .unwrap();
    for (out, mask) in trace.iter().zip(&pyr.masks) {
        for w in &out.self_attention.weights {
            let w = w.value();
            for r in 0..w.rows() {
                let row = w.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &m) in mask.iter().enumerate() {
                    if !m {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
        for w in &out.cross_attention.as_ref().unwrap().weights {
            let w = w.value();
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn classify_examples() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 28).unwrap();
    let v = video(&cfg, 8, 29);
    let t = table(4, 4, 30);
    let base = predict_heads(&model, &params, &v, &t).unwrap();

    // positive rescaling of a class embedding leaves its logits unchanged,
    // and swapping rows swaps logit columns; the frozen encoder input is the
    // same table so we compare through `classify` on one pyramid
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let (zv, zf) = model.project_inputs(&tape, &b, &v).unwrap();
    let zl = tape.constant(t.matrix().clone());
    let pyr = model.encode(&tape, &b, zv, zf, zl, &v.mask()).unwrap();
    let mut scaled_rows: Vec<Vec<f64>> = (0..4).map(|i| t.row(i).to_vec()).collect();
    scaled_rows[1].iter_mut().for_each(|x| *x *= 7.5);
    let scaled = ClassEmbeddingTable::from_rows(&scaled_rows).unwrap();
    let swapped = t.subset(&[0, 2, 1, 3]).unwrap();
    let l0 = model.classify(&tape, &b, &pyr, &t).unwrap();
    let l1 = model.classify(&tape, &b, &pyr, &scaled).unwrap();
    let l2 = model.classify(&tape, &b, &pyr, &swapped).unwrap();
    assert!(close(l0[0].value().data(), base.levels[0].logits.data(), 0.0));
    for lvl in 0..l0.len() {
        let (a, s, w) = (l0[lvl].value(), l1[lvl].value(), l2[lvl].value());
        assert!(close(a.data(), s.data(), 1e-9));
        for r in 0..a.rows() {
            assert_eq!(a.get(r, 1), w.get(r, 2));
            assert_eq!(a.get(r, 2), w.get(r, 1));
            assert_eq!(a.get(r, 0), w.get(r, 0));
        }
    }
}

#[test]
fn classify_argmax_by_construction() {
    // with identity maps the feature direction picks its class
    let cfg = ModelConfig { text_dim: 8, levels: 1, head_layers: 1, ..tiny_cfg() };
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = ModelParams::init(&cfg, 31).unwrap();
    params.insert("dec.cls.wl", Tensor::eye(8));
    let mut k = Tensor::zeros(&[3, 8, 8]);
    for i in 0..8 {
        k.data_mut()[(8 + i) * 8 + i] = 1.0;
    }
    params.insert("dec.cls.conv0.w", k);
    params.insert("dec.ln.gain", Tensor::full(&[8], 1.0));
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    // rows of the table are basis vectors e0, e3, e5
    let mut rows = vec![vec![0.0; 8]; 3];
    rows[0][0] = 1.0;
    rows[1][3] = 1.0;
    rows[2][5] = 1.0;
    let t = ClassEmbeddingTable::from_rows(&rows).unwrap();
    let mut feat = vec![-0.1; 8];
    feat[3] = 1.0;
    let z = tape.constant(Tensor::from_rows(&[feat]).unwrap());
    let pyr = PyramidFeatures { levels: vec![z], masks: vec![vec![true]] };
    let logits = model.classify(&tape, &b, &pyr, &t).unwrap()[0].value();
    let row = logits.row(0);
    assert!(row[1] > row[0] && row[1] > row[2]);
}

#[test]
fn regress_zero_head_gives_ln2() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = ModelParams::init(&cfg, 32).unwrap();
    params.insert("dec.reg.out.w", Tensor::zeros(&[3, 8, 2]));
    params.insert("dec.reg.out.b", Tensor::zeros(&[2]));
    let out = predict_heads(&model, &params, &video(&cfg, 8, 33), &table(2, 4, 34)).unwrap();
    for l in &out.levels {
        assert!(l.offsets.data().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }
    let params = ModelParams::init(&cfg, 35).unwrap();
    let out = predict_heads(&model, &params, &video(&cfg, 8, 36), &table(2, 4, 34)).unwrap();
    assert!(out.levels.iter().all(|l| l.offsets.data().iter().all(|&v| v > 0.0)));
}

#[test]
fn head_gradients() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 37).unwrap();
    let v = video(&cfg, 4, 38);
    let t = table(3, 4, 39);
    let err = params_grad_check(&params, 1e-5, |tape, b| {
        let out = model.forward(tape, b, &v, &t)?;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for l in &out.levels {
            total = total.add(&l.offsets.mul(&l.offsets)?.sum())?.add(&l.logits.scale(0.1).sum())?;
        }
        Ok(total)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ModelParams::init(&cfg, 40).unwrap();
    let v = video(&cfg, 8, 41);
    let t = table(3, 4, 42);
    assert_eq!(
        predict_heads(&model, &params, &v, &t).unwrap(),
        predict_heads(&model, &params, &v, &t).unwrap()
    );
    assert_eq!(ModelParams::init(&cfg, 40).unwrap(), params);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = tiny_cfg();
    let params = ModelParams::init(&cfg, 43).unwrap().to_f32_precision();
    let ck = Checkpoint { cfg: cfg.clone(), params: params.clone(), seed: 43, stage: StageTag::StageOne };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ovck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);

    let model = Model::new(cfg.clone()).unwrap();
    let v = video(&cfg, 8, 44);
    let t = table(3, 4, 45);
    assert_eq!(
        predict_heads(&model, &back.params, &v, &t).unwrap(),
        predict_heads(&model, &params, &v, &t).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

    std::fs::write(&path, &bytes).unwrap();
    let other = ModelConfig { d_model: 16, d_hat: 16, ..cfg };
    let err = Checkpoint::load_compatible(&path, &other).unwrap_err();
    assert!(err.to_string().contains("D: expected 16, found 8"), "{err}");
}
