//! Streaming causality: incremental computation over chunks reproduces the
//! full-sequence computation restricted to each prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simulstream::model::{ChunkSize, Model, ModelConfig, ModelError};
use simulstream::numerics::Tensor;
use simulstream::vocab::{EOS, FIRST_CONTENT};

const TOL: f64 = 1e-9;

fn small_config() -> ModelConfig {
    ModelConfig {
        width: 32,
        heads: 4,
        ffn_multiplier: 2,
        upsample_rate: 3,
        ..ModelConfig::default()
    }
}

fn random_frames(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Last frame (0-based, inclusive) visible to frame `i`.
fn visible_end(i: usize, c: usize, total: usize) -> usize {
    ((i / c) * c + c - 1).min(total - 1)
}

/// Encodes `x` through a sequence of calls, each a random whole number of
/// chunks, the final call taking whatever remains.
fn encode_in_pieces(model: &Model, x: &Tensor, c: usize, rng: &mut impl Rng) -> Tensor {
    let mut cache = model.encoder_cache(ChunkSize::Finite(c));
    let mut out: Option<Tensor> = None;
    let mut pos = 0;
    while pos < x.rows() {
        let take = (rng.random_range(1..=3) * c).min(x.rows() - pos);
        let h = model.encode_chunk(&mut cache, &x.slice_rows(pos, take)).unwrap();
        assert_eq!(h.rows(), take);
        match out.as_mut() {
            Some(o) => o.append_rows(&h).unwrap(),
            None => out = Some(h),
        }
        pos += take;
    }
    assert_eq!(cache.states().unwrap().max_abs_diff(out.as_ref().unwrap()), 0.0);
    out.unwrap()
}

#[test]
fn incremental_encoding_and_probes_match_prefix_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..24u64 {
        let model = Model::new(small_config(), trial).unwrap();
        let c = 1 + (trial as usize % 8);
        let len = rng.random_range(1..=40);
        let x = random_frames(&mut rng, len, model.config().frame_dim);
        let full = model.encode(&x, ChunkSize::Finite(c)).unwrap();
        let pieces = encode_in_pieces(&model, &x, c, &mut rng);
        assert!(full.max_abs_diff(&pieces) <= TOL, "C={c} |X|={len}");

        let probes = model.probe(&full).unwrap();
        for boundary in (c..=len).step_by(c) {
            let prefix = model.encode(&x.slice_rows(0, boundary), ChunkSize::Finite(c)).unwrap();
            assert!(prefix.max_abs_diff(&full.slice_rows(0, boundary)) <= TOL, "C={c} prefix {boundary}");
            let p = model.probe(&prefix).unwrap();
            assert!(p.asr.max_abs_diff(&probes.asr.slice_rows(0, boundary)) <= TOL);
            assert!(p.nar_s2tt.max_abs_diff(&probes.nar_s2tt.slice_rows(0, boundary)) <= TOL);
        }
        for r in 0..full.rows() {
            let s: f64 = probes.asr.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn infinite_chunk_equals_unmasked_encoder_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let model = Model::new(small_config(), 3).unwrap();
    for len in [1, 7, 33] {
        let x = random_frames(&mut rng, len, model.config().frame_dim);
        let inf = model.encode(&x, ChunkSize::Infinite).unwrap();
        let whole = model.encode(&x, ChunkSize::Finite(len)).unwrap();
        let larger = model.encode(&x, ChunkSize::Finite(1000)).unwrap();
        assert_eq!(inf.data(), whole.data());
        assert_eq!(inf.data(), larger.data());
    }
}

#[test]
fn attention_is_exactly_zero_outside_the_chunk_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = Model::new(small_config(), 4).unwrap();
    let len = 19;
    let x = random_frames(&mut rng, len, model.config().frame_dim);
    for c in [1, 2, 3, 5, 8] {
        let (_, weights) = model.encode_with_attention(&x, ChunkSize::Finite(c)).unwrap();
        assert_eq!(weights.len(), model.config().encoder_layers * model.config().heads);
        for w in &weights {
            assert_eq!(w.shape(), &[len, len]);
            for i in 0..len {
                let end = visible_end(i, c, len);
                for j in 0..len {
                    if j > end {
                        assert_eq!(w.get2(i, j), 0.0, "C={c} i={i} j={j}");
                    } else {
                        assert!(w.get2(i, j) > 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn chunk_example_one_indexed() {
    // With C = 2, the third frame (1-based) sees frames up to the fourth.
    assert_eq!(visible_end(2, 2, 10) + 1, 4);
}

#[test]
fn perturbing_future_frames_leaves_visible_states_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let model = Model::new(small_config(), 5).unwrap();
    let len = 24;
    let x = random_frames(&mut rng, len, model.config().frame_dim);
    for c in 1..=8 {
        let base = model.encode(&x, ChunkSize::Finite(c)).unwrap();
        for i in [0, 5, 11, 17] {
            let end = visible_end(i, c, len);
            if end + 1 >= len {
                continue;
            }
            let mut y = x.clone();
            for r in end + 1..len {
                for v in y.row_mut(r) {
                    *v += rng.random_range(-3.0..3.0);
                }
            }
            let perturbed = model.encode(&y, ChunkSize::Finite(c)).unwrap();
            for r in 0..=end {
                assert_eq!(base.row(r), perturbed.row(r), "C={c} row {r} changed");
            }
            assert!(base.max_abs_diff(&perturbed) > 0.0);
        }
    }
}

#[test]
fn closed_or_misaligned_caches_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let model = Model::new(small_config(), 6).unwrap();
    let x = random_frames(&mut rng, 10, model.config().frame_dim);

    let mut cache = model.encoder_cache(ChunkSize::Finite(4));
    model.encode_chunk(&mut cache, &x.slice_rows(0, 6)).unwrap();
    assert!(cache.is_closed());
    assert!(matches!(model.encode_chunk(&mut cache, &x.slice_rows(6, 4)), Err(ModelError::Cache(_))));

    let mut offline = model.encoder_cache(ChunkSize::Infinite);
    model.encode_chunk(&mut offline, &x).unwrap();
    assert!(model.encode_chunk(&mut offline, &x.slice_rows(0, 1)).is_err());
}

#[test]
fn masked_decoding_is_causal_in_the_speech_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for trial in 0..12u64 {
        let model = Model::new(small_config(), 100 + trial).unwrap();
        let c = 1 + (trial as usize % 8);
        let len = rng.random_range(4..=40);
        let x = random_frames(&mut rng, len, model.config().frame_dim);
        let h = model.encode(&x, ChunkSize::Finite(c)).unwrap();

        let steps = rng.random_range(1..=6);
        let vocab = model.config().target_vocab_size;
        let mut inputs = vec![EOS];
        inputs.extend((1..steps).map(|_| rng.random_range(FIRST_CONTENT..vocab)));
        let mut prefix: Vec<usize> = (0..steps).map(|_| rng.random_range(1..=len)).collect();
        prefix.sort_unstable();

        let (text_full, logp_full) = model.decode_teacher_forced(&h, &inputs, &prefix).unwrap();
        let reach = *prefix.last().unwrap();
        let (text_cut, logp_cut) = model.decode_teacher_forced(&h.slice_rows(0, reach), &inputs, &prefix).unwrap();
        assert!(logp_full.max_abs_diff(&logp_cut) <= TOL);
        assert!(text_full.max_abs_diff(&text_cut) <= TOL);

        // Step-by-step decoding with a growing memory gives the same rows.
        let mut state = model.decoder_state();
        for (i, &p) in prefix.iter().enumerate() {
            let memory = h.slice_rows(0, p);
            let row = model.decode_step(&mut state, &memory, p).unwrap();
            let diff = row.iter().zip(logp_full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= TOL, "step {i}: {diff}");
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
            let next = inputs.get(i + 1).copied().unwrap_or(EOS);
            state.push(next).unwrap();
        }
        assert!(state.text_states().unwrap().max_abs_diff(&text_full) <= TOL);
        assert_eq!(state.prefix_lengths(), prefix.as_slice());
    }
}

#[test]
fn decoder_rejects_prefix_beyond_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let model = Model::new(small_config(), 7).unwrap();
    let x = random_frames(&mut rng, 5, model.config().frame_dim);
    let h = model.encode(&x, ChunkSize::Infinite).unwrap();
    assert!(matches!(model.decode_teacher_forced(&h, &[EOS], &[6]), Err(ModelError::Mask(_))));
    assert!(matches!(model.decode_teacher_forced(&h, &[EOS], &[0]), Err(ModelError::Mask(_))));
    assert!(matches!(model.decode_teacher_forced(&h, &[EOS, 4], &[3]), Err(ModelError::Mask(_))));
    let mut state = model.decoder_state();
    assert!(model.decode_step(&mut state, &h, 6).is_err());
    assert!(state.push(4).is_err());
}

#[test]
fn streaming_units_equal_offline_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for trial in 0..10u64 {
        let model = Model::new(small_config(), 200 + trial).unwrap();
        let r = model.upsample_rate();
        let n = rng.random_range(1..=9);
        let text = random_frames(&mut rng, n, model.config().width);

        let mut offline_state = model.t2u_state();
        let offline = model.t2u_generate(&mut offline_state, Some(&text)).unwrap();
        assert_eq!(offline.log_probs.rows(), n * r);

        let mut state = model.t2u_state();
        let mut units = Vec::new();
        let mut rows: Option<Tensor> = None;
        let mut pos = 0;
        while pos < n {
            let take = rng.random_range(1..=3).min(n - pos);
            let chunk = model.t2u_generate(&mut state, Some(&text.slice_rows(pos, take))).unwrap();
            units.extend(chunk.units);
            match rows.as_mut() {
                Some(t) => t.append_rows(&chunk.log_probs).unwrap(),
                None => rows = Some(chunk.log_probs),
            }
            pos += take;
        }
        assert_eq!(units, offline.units);
        assert!(rows.unwrap().max_abs_diff(&offline.log_probs) <= TOL);
        assert_eq!(state.positions(), n);
        assert!(model.t2u_generate(&mut state, None).unwrap().units.is_empty());
    }
}

#[test]
fn one_text_position_yields_r_slots() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let model = Model::new(ModelConfig { upsample_rate: 4, ..small_config() }, 8).unwrap();
    let text = random_frames(&mut rng, 1, model.config().width);
    let lp = model.t2u_extend(&mut model.t2u_state(), &text).unwrap();
    assert_eq!(lp.rows(), 4);
}
