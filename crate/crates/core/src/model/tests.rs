use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{FeatureSequence, MotionSequence};
use crate::diffcore::{check_gradients, GradCheckOptions, Tape, Tensor, MASK_VALUE};

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        audio_dim: 4,
        heads: 2,
        self_heads: 2,
        squeeze_ratio: 4,
        ff_dim: 16,
        vertices: 4,
        speakers: 3,
        max_frames: 16,
        share_transpose_codec: false,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn pair(rng: &mut ChaCha8Rng, c: &ModelConfig, t: usize) -> (FeatureSequence, MotionSequence) {
    let f = FeatureSequence::new(random(rng, t, c.audio_dim)).unwrap();
    let m = MotionSequence::from_flat(&random(rng, t, c.motion_dim()).map(|x| 0.1 * x), 30.0).unwrap();
    (f, m)
}

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, offset: Option<usize>) -> Vec<Vec<f64>> {
    let dk = q.cols();
    (0..q.rows())
        .map(|i| {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| {
                    let dot: f64 = (0..dk).map(|c| q.get2(i, c) * k.get2(j, c)).sum();
                    let masked = offset.is_some_and(|o| j > o + i);
                    dot / (dk as f64).sqrt() + if masked { MASK_VALUE } else { 0.0 }
                })
                .collect();
            let w = naive_softmax(&logits);
            (0..v.cols())
                .map(|c| (0..k.rows()).map(|j| w[j] * v.get2(j, c)).sum())
                .collect()
        })
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

#[test]
fn attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for offset in [None, Some(0)] {
        let (q, k, v) = (random(&mut rng, 3, 2), random(&mut rng, 3, 2), random(&mut rng, 3, 2));
        let mut tape = Tape::new();
        let (qn, kn, vn) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (out, w) = attention_head(&mut tape, qn, kn, vn, offset).unwrap();
        let want: Vec<f64> = naive_attention(&q, &k, &v, offset).concat();
        assert_close(tape.value(out).data(), &want, 1e-12);
        if offset.is_some() {
            // Row 0 can only see key 0.
            assert_eq!(tape.value(w).get2(0, 0), 1.0);
            assert_eq!(tape.value(w).get2(1, 2), 0.0);
        }
    }
}

#[test]
fn cross_attention_with_offset_masks_future_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // A single query at frame 1 over a 2-row context sees both rows; at
    // frame 0 it sees one.
    let (q, k, v) = (random(&mut rng, 1, 2), random(&mut rng, 2, 2), random(&mut rng, 2, 2));
    for offset in [0, 1] {
        let mut tape = Tape::new();
        let (qn, kn, vn) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (out, _) = attention_head(&mut tape, qn, kn, vn, Some(offset)).unwrap();
        let want = naive_attention(&q, &k, &v, Some(offset)).concat();
        assert_close(tape.value(out).data(), &want, 1e-12);
    }
}

#[test]
fn multi_head_is_blockwise_single_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
    let (wq, wk, wv) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4));
    let mut tape = Tape::new();
    let ids = [&x, &y, &wq, &wk, &wv].map(|t| tape.constant(t.clone()));
    let out = multi_head(&mut tape, ids[0], ids[1], ids[2], ids[3], ids[4], 2, Some(0)).unwrap();
    let proj = |a: &Tensor, w: &Tensor, col0: usize| {
        let rows: Vec<Vec<f64>> = (0..a.rows())
            .map(|i| {
                (col0..col0 + 2)
                    .map(|c| (0..4).map(|k| a.get2(i, k) * w.get2(k, c)).sum())
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    };
    let heads: Vec<Vec<Vec<f64>>> = [0, 2]
        .iter()
        .map(|&c| naive_attention(&proj(&x, &wq, c), &proj(&y, &wk, c), &proj(&y, &wv, c), Some(0)))
        .collect();
    let want: Vec<f64> = (0..3).flat_map(|i| [heads[0][i].clone(), heads[1][i].clone()].concat()).collect();
    assert_close(tape.value(out).data(), &want, 1e-12);
}

#[test]
fn speaker_gate_matches_naive_loop() {
    let model = DualTalker::with_seed(tiny_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 3, 8);
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let s = model.style_embed(&mut tape, 2).unwrap();
    let out = model.speaker_modulate(&mut tape, xn, s, Direction::Primal).unwrap();

    let p = model.params();
    let get = |n: &str| p.value(p.find(n).unwrap()).clone();
    let style = get("style_table");
    let (w1, b1) = (get("primal.speaker_gate.in.weight"), get("primal.speaker_gate.in.bias"));
    let (w2, b2) = (get("primal.speaker_gate.out.weight"), get("primal.speaker_gate.out.bias"));
    assert_eq!(w1.shape(), &[16, 4]);
    let mut want = Vec::new();
    for t in 0..3 {
        let z: Vec<f64> = style.row(2).iter().chain(x.row(t)).cloned().collect();
        let h: Vec<f64> = (0..4)
            .map(|j| (b1.data()[j] + (0..16).map(|i| z[i] * w1.get2(i, j)).sum::<f64>()).max(0.0))
            .collect();
        for c in 0..8 {
            let g = b2.data()[c] + (0..4).map(|j| h[j] * w2.get2(j, c)).sum::<f64>();
            want.push(x.get2(t, c) / (1.0 + (-g).exp()));
        }
    }
    assert_close(tape.value(out).data(), &want, 1e-12);
}

#[test]
fn encoder_adds_positions() {
    let model = DualTalker::with_seed(tiny_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, 3, 4);
    let mut tape = Tape::new();
    let an = tape.constant(a.clone());
    let x = model.encode_audio(&mut tape, an).unwrap();
    let p = model.params();
    let get = |n: &str| p.value(p.find(n).unwrap()).clone();
    let (w, b, pos) = (get("audio_encoder.weight"), get("audio_encoder.bias"), get("positional_table"));
    for t in 0..3 {
        for c in 0..8 {
            let want = (0..4).map(|k| a.get2(t, k) * w.get2(k, c)).sum::<f64>() + b.data()[c] + pos.get2(t, c);
            assert!((tape.value(x).get2(t, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn speaker_and_length_errors() {
    let model = DualTalker::with_seed(tiny_config(), 6).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(
        model.style_embed(&mut tape, 3),
        Err(ModelError::SpeakerOutOfRange { speaker: 3, speakers: 3 })
    ));
    let f = FeatureSequence::new(Tensor::zeros(&[17, 4])).unwrap();
    assert!(matches!(model.generate_motion(&f, 0), Err(ModelError::TooLong { .. })));
    let f = FeatureSequence::new(Tensor::zeros(&[2, 5])).unwrap();
    assert!(matches!(model.generate_motion(&f, 0), Err(ModelError::WidthMismatch { .. })));
}

fn primal_rows(model: &DualTalker, f: &FeatureSequence, m: &MotionSequence) -> Tensor {
    let mut tape = Tape::new();
    let out = model.forward_primal(&mut tape, f, 1, m).unwrap();
    tape.value(out.predicted).clone()
}

fn dual_rows(model: &DualTalker, f: &FeatureSequence, m: &MotionSequence) -> Tensor {
    let mut tape = Tape::new();
    let out = model.forward_dual(&mut tape, m, 1, f).unwrap();
    tape.value(out.predicted).clone()
}

#[test]
fn teacher_forcing_is_causal() {
    let c = tiny_config();
    let model = DualTalker::with_seed(c.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (f, m) = pair(&mut rng, &c, 6);
    let base_p = primal_rows(&model, &f, &m);
    let base_d = dual_rows(&model, &f, &m);
    for t in 0..6 {
        // Perturb frame t of both modalities: outputs before t must not move.
        let mut fv = f.values().clone();
        let mut mv = m.to_flat();
        for x in &mut fv.data_mut()[t * 4..(t + 1) * 4] {
            *x += 0.7;
        }
        for x in &mut mv.data_mut()[t * 12..(t + 1) * 12] {
            *x -= 0.5;
        }
        let f2 = FeatureSequence::new(fv).unwrap();
        let m2 = MotionSequence::from_flat(&mv, 30.0).unwrap();
        let p = primal_rows(&model, &f2, &m2);
        let d = dual_rows(&model, &f2, &m2);
        assert_eq!(&p.data()[..t * 12], &base_p.data()[..t * 12], "primal row < {t}");
        assert_eq!(&d.data()[..t * 4], &base_d.data()[..t * 4], "dual row < {t}");
        // Motion at frame t feeds only later primal rows; audio at t feeds row t.
        assert_eq!(
            primal_rows(&model, &f, &m2).data()[..(t + 1) * 12],
            base_p.data()[..(t + 1) * 12]
        );
        assert_ne!(p.data()[t * 12..(t + 1) * 12], base_p.data()[t * 12..(t + 1) * 12]);
    }
}

#[test]
fn generation_agrees_with_teacher_forcing_on_own_output() {
    let c = tiny_config();
    let model = DualTalker::with_seed(c.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (f, m) = pair(&mut rng, &c, 5);
    let gen_m = model.generate_motion(&f, 1).unwrap();
    assert_eq!(gen_m.frames(), 5);
    let tf = primal_rows(&model, &f, &gen_m);
    assert_close(tf.data(), gen_m.to_flat().data(), 1e-9);

    let gen_a = model.generate_audio(&m, 1).unwrap();
    let tf = dual_rows(&model, &gen_a, &m);
    assert_close(tf.data(), gen_a.values().data(), 1e-9);
}

#[test]
fn single_frame_sequences() {
    let c = tiny_config();
    let model = DualTalker::with_seed(c.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (f, m) = pair(&mut rng, &c, 1);
    let gm = model.generate_motion(&f, 0).unwrap();
    let ga = model.generate_audio(&m, 0).unwrap();
    assert_eq!((gm.frames(), ga.frames()), (1, 1));
    assert_close(primal_rows(&model, &f, &m).data(), gm.to_flat().data(), 1e-12);
    assert!(gm.displacements().is_finite() && ga.values().is_finite());
}

#[test]
fn fusion_projections_are_shared_across_tasks() {
    let model = DualTalker::with_seed(tiny_config(), 10).unwrap();
    let (pq, pk) = model.cross_query_key(Direction::Primal);
    let (dq, dk) = model.cross_query_key(Direction::Dual);
    assert_eq!((pq, pk), (dk, dq));
    let p = model.params();
    assert_eq!(p.get(pq).name, "fusion.audio_qk");
    assert_eq!(p.get(pk).name, "fusion.motion_qk");
    // Exactly one copy of each shared matrix and of each encoder.
    for name in ["fusion.audio_qk", "fusion.motion_qk", "audio_encoder.weight", "motion_encoder.weight", "style_table"] {
        assert_eq!(p.iter().filter(|(_, q)| q.name == name).count(), 1, "{name}");
    }
    assert!(p.iter().all(|(_, q)| !q.name.contains("key") || q.name.contains("self_attention")));
}

#[test]
fn either_task_alone_trains_the_shared_projections() {
    let c = tiny_config();
    let mut model = DualTalker::with_seed(c.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (f, m) = pair(&mut rng, &c, 4);
    for dir in [Direction::Primal, Direction::Dual] {
        model.params_mut().zero_grads();
        let mut tape = Tape::new();
        let out = match dir {
            Direction::Primal => model.forward_primal(&mut tape, &f, 0, &m).unwrap(),
            Direction::Dual => model.forward_dual(&mut tape, &m, 0, &f).unwrap(),
        };
        let loss = tape.mean(out.predicted).unwrap();
        tape.backward(loss, &Tensor::scalar(1.0), model.params_mut()).unwrap();
        let p = model.params();
        for name in ["fusion.audio_qk", "fusion.motion_qk", "audio_encoder.weight", "motion_encoder.weight"] {
            assert!(p.grad(p.find(name).unwrap()).max_abs() > 0.0, "{dir}: {name}");
        }
    }
}

#[test]
fn transposed_codec_ties_decoder_weights() {
    let c = ModelConfig {
        share_transpose_codec: true,
        ..tiny_config()
    };
    let model = DualTalker::with_seed(c.clone(), 12).unwrap();
    let p = model.params();
    assert!(p.find("motion_decoder.weight").is_none());
    assert!(p.find("audio_decoder.weight").is_none());
    let enc = p.value(p.find("motion_encoder.weight").unwrap());
    assert_eq!(model.motion_decoder_weight(), enc.transpose());
    let untied = DualTalker::with_seed(tiny_config(), 12).unwrap();
    let extra = c.d * c.motion_dim() + c.d * c.audio_dim;
    assert_eq!(untied.params().num_scalars() - p.num_scalars(), extra);
}

#[test]
fn joint_gradients_match_finite_differences() {
    let c = ModelConfig {
        share_transpose_codec: true,
        ..tiny_config()
    };
    let mut model = DualTalker::with_seed(c.clone(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (f, m) = pair(&mut rng, &c, 3);
    let snapshot = model.clone();
    let report = check_gradients(
        model.params_mut(),
        |tape, store| {
            let mut view = snapshot.clone();
            *view.params_mut() = store.clone();
            let (x, y) = view.encode_pair(tape, &f, &m).map_err(diff)?;
            let p = view.primal_from_latents(tape, x, y, 2).map_err(diff)?;
            let d = view.dual_from_latents(tape, y, x, 2).map_err(diff)?;
            let gt_m = tape.constant(m.to_flat());
            let gt_a = tape.constant(f.values().clone());
            let e1 = tape.sub(p.predicted, gt_m)?;
            let e1 = tape.mul(e1, e1)?;
            let e2 = tape.sub(d.predicted, gt_a)?;
            let e2 = tape.mul(e2, e2)?;
            let (l1, l2) = (tape.mean(e1)?, tape.mean(e2)?);
            tape.add(l1, l2)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    assert!(report.entries_checked() > 500);
}

fn diff(e: ModelError) -> crate::diffcore::DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => panic!("{other}"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = DualTalker::with_seed(tiny_config(), 14).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, Precision::F64, serde_json::json!({"lr": 1e-4}), &mut buf).unwrap();
    let (back, meta) = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(meta.model, *model.config());
    assert_eq!(meta.training["lr"], 1e-4);
    for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }

    let mut buf32 = Vec::new();
    write_checkpoint(&model, Precision::F32, serde_json::Value::Null, &mut buf32).unwrap();
    let (back, _) = read_checkpoint(&mut buf32.as_slice()).unwrap();
    for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
        assert_close(a.value.data(), b.value.data(), 1e-6);
    }

    for cut in [3, 10, buf.len() - 1] {
        assert!(read_checkpoint(&mut &buf[..cut]).is_err());
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint(&mut extra.as_slice()).is_err());
}
