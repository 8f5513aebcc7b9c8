use proptest::prelude::*;

use super::*;
use crate::masking::{build_block_causal_mask, build_causal_mask, Role};
use crate::tokenizer::BOS;

pub(crate) fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_memory: 8,
        ..ModelConfig::default()
    }
}

fn input_rows(rows: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let data = (0..rows * d)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s % 2000) as f32 / 1000.0) - 1.0
        })
        .collect();
    Tensor::new(vec![rows, d], data).unwrap()
}

fn hidden_for(params: &ModelParams<f32>, input: &Tensor<f32>, masks: &[AttentionMask]) -> Tensor<f32> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(input.clone());
    let positions: Vec<usize> = (0..input.rows()).collect();
    let out = forward_ext(&mut tape, &pv, x, &positions, MaskSchedule::PerLayer(masks), None).unwrap();
    tape.value(out.hidden).clone()
}

#[test]
fn embed_lookups() {
    let params = ModelParams::<f32>::init(&tiny_config(1), 1).unwrap();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);

    let bos = embed(&mut tape, &pv, &[Segment::Tokens(&[BOS])]).unwrap();
    assert_eq!(tape.value(bos).data(), params.tok_emb.row(BOS));

    let mem = embed(&mut tape, &pv, &[Segment::Memory(0..1)]).unwrap();
    assert_eq!(tape.value(mem).data(), params.mem_emb.row(0));

    let ids = [1, 2, 3, 4, 5];
    let seq = embed(&mut tape, &pv, &[Segment::Tokens(&ids), Segment::Memory(0..2)]).unwrap();
    assert_eq!(tape.shape(seq), &[7, 8]);

    assert!(embed(&mut tape, &pv, &[Segment::Tokens(&[999])]).is_err());
    assert!(embed(&mut tape, &pv, &[Segment::Memory(0..9)]).is_err());
}

#[test]
fn config_validation() {
    let mut c = tiny_config(1);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    c.n_heads = 8; // head_dim 1, odd
    assert!(c.validate().is_err());
    assert!(tiny_config(1).validate().is_ok());
}

#[test]
fn attention_rows_are_stochastic_and_masked() {
    let params = ModelParams::<f32>::init(&tiny_config(2), 3).unwrap();
    let mask = build_block_causal_mask(8, 4).unwrap();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let ids: Vec<usize> = (0..8).map(|i| 97 + i).collect();
    let x = embed(&mut tape, &pv, &[Segment::Tokens(&ids), Segment::Memory(0..4)]).unwrap();
    let positions: Vec<usize> = (0..12).collect();
    let out = forward(&mut tape, &pv, x, &positions, &mask).unwrap();
    assert_eq!(tape.forward_passes(), 1);
    for layer in &out.attn {
        for &h in layer {
            let w = tape.value(h);
            for i in 0..12 {
                let s: f32 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for j in 0..12 {
                    if !mask.is_visible(i, j) {
                        assert_eq!(w.at(i, j).to_bits(), 0f32.to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn mask_size_mismatch_is_an_error() {
    let params = ModelParams::<f32>::init(&tiny_config(1), 3).unwrap();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(input_rows(4, 8, 0));
    let mask = build_causal_mask(5).unwrap();
    assert!(forward(&mut tape, &pv, x, &[0, 1, 2, 3], &mask).is_err());
}

#[test]
fn forward_is_bit_deterministic() {
    let params = ModelParams::<f32>::init(&tiny_config(2), 5).unwrap();
    let input = input_rows(6, 8, 9);
    let masks = vec![build_causal_mask(6).unwrap(); 2];
    assert!(hidden_for(&params, &input, &masks).bit_eq(&hidden_for(&params, &input, &masks)));
}

#[test]
fn causal_hidden_ignores_future_inputs() {
    let params = ModelParams::<f32>::init(&tiny_config(2), 5).unwrap();
    let input = input_rows(6, 8, 9);
    let masks = vec![build_causal_mask(6).unwrap(); 2];
    let base = hidden_for(&params, &input, &masks);
    for j in 0..6 {
        let mut pert = input.clone();
        pert.row_mut(j).iter_mut().for_each(|v| *v += 0.5);
        let h = hidden_for(&params, &pert, &masks);
        for i in 0..j {
            assert_eq!(base.row(i), h.row(i), "row {i} moved when input {j} changed");
        }
        assert_ne!(base.row(j), h.row(j));
    }
}

/// Which inputs can reach each output through visible edges across layers.
fn reachability(masks: &[AttentionMask], n: usize) -> Vec<Vec<bool>> {
    let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for m in masks {
        let prev = reach.clone();
        for i in 0..n {
            for j in 0..n {
                if m.is_visible(i, j) {
                    for s in 0..n {
                        reach[i][s] |= prev[j][s];
                    }
                }
            }
        }
    }
    reach
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unreachable_inputs_leave_hidden_bits_unchanged(
        depth in 1usize..4,
        n in 2usize..8,
        bits in prop::collection::vec(any::<bool>(), 3 * 64),
        seed in 0u64..1000,
    ) {
        let masks: Vec<AttentionMask> = (0..depth)
            .map(|l| AttentionMask::from_fn(n, n, vec![Role::Context; n], |i, j| {
                i == j || bits[(l * 64 + i * 8 + j) % bits.len()]
            }))
            .collect();
        let params = ModelParams::<f32>::init(&tiny_config(depth), seed).unwrap();
        let input = input_rows(n, 8, seed);
        let base = hidden_for(&params, &input, &masks);
        let reach = reachability(&masks, n);
        for j in 0..n {
            let mut pert = input.clone();
            pert.row_mut(j).iter_mut().for_each(|v| *v = -*v + 0.25);
            let h = hidden_for(&params, &pert, &masks);
            for i in 0..n {
                if !reach[i][j] {
                    let same = base.row(i).iter().zip(h.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same, "row {} depends on unreachable input {}", i, j);
                }
            }
        }
    }
}

#[test]
fn prefix_forward_matches_full_forward() {
    // Rows 0..3 are processed first; rows 3..6 then attend to them through
    // the cached layer inputs. Rows 3..6 must match a single full pass.
    let params = ModelParams::<f64>::init(&tiny_config(2), 8).unwrap();
    let input = input_rows(6, 8, 4).cast::<f64>();
    let mask = build_causal_mask(6).unwrap();

    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(input.clone());
    let full = forward(&mut tape, &pv, x, &[0, 1, 2, 3, 4, 5], &mask).unwrap();

    let head = tape.slice_rows(x, 0, 3).unwrap();
    let first = forward(&mut tape, &pv, head, &[0, 1, 2], &build_causal_mask(3).unwrap()).unwrap();
    let prefix = KvPrefix {
        layers: first.layer_inputs.clone(),
        positions: vec![0, 1, 2],
    };
    let tail = tape.slice_rows(x, 3, 3).unwrap();
    let tail_mask = AttentionMask::from_fn(3, 6, vec![Role::Context; 6], |i, j| j <= i + 3);
    let second = forward_ext(
        &mut tape,
        &pv,
        tail,
        &[3, 4, 5],
        MaskSchedule::Shared(&tail_mask),
        Some(&prefix),
    )
    .unwrap();
    let a = tape.value(full.hidden).clone();
    let b = tape.value(second.hidden).clone();
    for i in 0..3 {
        for (u, v) in a.row(i + 3).iter().zip(b.row(i)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    assert_eq!(tape.forward_passes(), 3);
}

#[test]
fn param_names_and_order_agree() {
    let mut p = ModelParams::<f32>::init(&tiny_config(2), 1).unwrap();
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 2 + 2 * 8 + 1);
    assert_eq!(names[2], "layers.0.attn_norm");
    let shapes: Vec<Vec<usize>> = p.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shapes_mut: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, shapes_mut);
    let mut tape = Tape::new();
    assert_eq!(p.register(&mut tape, true).all().len(), names.len());
}
