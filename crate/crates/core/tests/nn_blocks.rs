mod common;

use common::{jitter, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillmix_core::corpus::vocab::CLS;
use skillmix_core::nn::{self_layout, Adapter, Attention, TransformerLayer};
use skillmix_core::tape::{AttnLayout, AttnMask};
use skillmix_core::{Model, ModelConfig, ParamGroup, ParamStore, Tape, Tensor};

const D: usize = 8;

fn attention(store: &mut ParamStore, seed: u64) -> Attention {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Attention::new(store, "attn", D, 2, ParamGroup::Representation, &mut rng).unwrap()
}

fn layer(store: &mut ParamStore, seed: u64) -> TransformerLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TransformerLayer::new(store, "layer", D, 2, 12, false, ParamGroup::Representation, &mut rng).unwrap()
}

#[test]
fn heads_must_divide_d_model() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = Attention::new(&mut store, "a", 10, 3, ParamGroup::Representation, &mut rng).unwrap_err();
    assert!(matches!(err, skillmix_core::Error::Config(_)));
}

#[test]
fn singleton_attention_is_value_then_output_projection() {
    let mut store = ParamStore::new();
    let attn = attention(&mut store, 1);
    let x = random_tensor(&[1, D], 2);
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x.clone());
    let out = attn.forward(&mut tape, xv, None, self_layout(&vec![(0, 1)], false)).unwrap();
    let expected = x
        .matmul(store.tensor(attn.wv.w))
        .unwrap()
        .matmul(store.tensor(attn.wo.w))
        .unwrap();
    assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn causal_first_row_matches_singleton() {
    let mut store = ParamStore::new();
    let attn = attention(&mut store, 3);
    let x = random_tensor(&[4, D], 4);
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x.clone());
    let full = attn.forward(&mut tape, xv, None, self_layout(&vec![(0, 4)], true)).unwrap();
    let first = tape.constant(Tensor::new(vec![1, D], x.row(0).to_vec()).unwrap());
    let single = attn.forward(&mut tape, first, None, self_layout(&vec![(0, 1)], false)).unwrap();
    let a = tape.value(full).row(0).to_vec();
    let b = tape.value(single).row(0).to_vec();
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn custom_mask_blocks_keys() {
    let mut store = ParamStore::new();
    let attn = attention(&mut store, 5);
    let x = random_tensor(&[3, D], 6);
    // every query sees only key 0
    let mask = vec![true, false, false, true, false, false, true, false, false];
    let layout = AttnLayout::self_attention(vec![(0, 3)], AttnMask::Custom(mask));
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x.clone());
    let out = attn.forward(&mut tape, xv, None, layout).unwrap();
    let v0 = Tensor::new(vec![1, D], x.row(0).to_vec())
        .unwrap()
        .matmul(store.tensor(attn.wv.w))
        .unwrap()
        .matmul(store.tensor(attn.wo.w))
        .unwrap();
    for r in 0..3 {
        for (p, q) in tape.value(out).row(r).iter().zip(v0.row(0)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_is_permutation_equivariant_without_positions() {
    let mut store = ParamStore::new();
    let l = layer(&mut store, 7);
    let x = random_tensor(&[5, D], 8);
    let perm = [3, 0, 4, 1, 2];
    let mut px = Tensor::zeros(&[5, D]);
    for (i, &p) in perm.iter().enumerate() {
        px.data_mut()[i * D..(i + 1) * D].copy_from_slice(x.row(p));
    }
    let layout = self_layout(&vec![(0, 5)], false);
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x);
    let pv = tape.constant(px);
    let out = l.forward(&mut tape, xv, &layout, None, None, 1e-6).unwrap();
    let pout = l.forward(&mut tape, pv, &layout, None, None, 1e-6).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in tape.value(pout).row(i).iter().zip(tape.value(out).row(p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_with_identity_norms_is_pure_residual() {
    let mut store = ParamStore::new();
    let l = layer(&mut store, 9);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".w") || p.name.ends_with(".b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.tensor(id).shape().to_vec();
        store.assign(id, Tensor::zeros(&shape)).unwrap();
    }
    let x = random_tensor(&[4, D], 10);
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x.clone());
    let out = l.forward(&mut tape, xv, &self_layout(&vec![(0, 4)], false), None, None, 1e-6).unwrap();
    assert_eq!(tape.value(out).data(), x.data());
}

#[test]
fn zero_initialised_adapters_leave_layer_unchanged() {
    let mut store = ParamStore::new();
    let l = layer(&mut store, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pair = [0, 1].map(|s| Adapter::new(&mut store, &format!("ad{s}"), D, 3, &mut rng));
    let x = random_tensor(&[3, D], 13);
    let layout = self_layout(&vec![(0, 3)], false);
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x);
    let plain = l.forward(&mut tape, xv, &layout, None, None, 1e-6).unwrap();
    let adapted = l.forward(&mut tape, xv, &layout, None, Some(&pair), 1e-6).unwrap();
    assert_eq!(tape.value(plain).data(), tape.value(adapted).data());
}

#[test]
fn adapter_identity_at_init() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ad = Adapter::new(&mut store, "ad", D, 3, &mut rng);
    let h = random_tensor(&[2, D], 15);
    let mut tape = Tape::inference(&store);
    let hv = tape.constant(h.clone());
    let out = ad.forward(&mut tape, hv).unwrap();
    assert_eq!(tape.value(out).data(), h.data());
}

#[test]
fn adapter_hand_computed_bottleneck_one() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ad = Adapter::new(&mut store, "ad", 2, 1, &mut rng);
    store.assign(ad.down.w, Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
    store.assign(ad.down.b.unwrap(), Tensor::new(vec![1], vec![-1.0]).unwrap()).unwrap();
    store.assign(ad.up.w, Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap()).unwrap();
    store.assign(ad.up.b.unwrap(), Tensor::new(vec![2], vec![0.5, 0.0]).unwrap()).unwrap();
    let h = Tensor::from_rows(&[&[1.0, 1.0], &[-1.0, 0.0]]);
    let mut tape = Tape::inference(&store);
    let hv = tape.constant(h);
    let out = ad.forward(&mut tape, hv).unwrap();
    // row 0: down = 1 + 2 - 1 = 2, up = [6.5, -2]; row 1: down = -2 -> relu 0
    assert_eq!(tape.value(out).data(), &[7.5, -1.0, -0.5, 0.0]);
}

#[test]
fn adapter_gradient_reaches_both_projections() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let ad = Adapter::new(&mut store, "ad", D, 3, &mut rng);
    jitter(&mut store, "ad.up", 0.1, 17);
    let h = random_tensor(&[3, D], 18);
    let r = random_tensor(&[3, D], 19);
    let mut tape = Tape::with_params(&store);
    let hv = tape.constant(h);
    let rv = tape.constant(r);
    let out = ad.forward(&mut tape, hv).unwrap();
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    for id in [ad.down.w, ad.up.w] {
        assert!(g.param(id).unwrap().iter().any(|&x| x != 0.0));
    }
}

#[test]
fn embed_shapes_and_cls() {
    let mut cfg = ModelConfig::micro();
    cfg.vocab_size = 12;
    let model = Model::new(cfg, 3).unwrap();
    assert_eq!(model.encoder_input(&[]), vec![CLS]);
    for len in [0, 1, 5] {
        let ids: Vec<usize> = (0..len).map(|i| 5 + i % 7).collect();
        let seq = model.encoder_input(&ids);
        assert_eq!(seq[0], CLS);
        let mut tape = Tape::inference(&model.store);
        let (x, segs) = model.embedding.forward(&mut tape, &[seq.clone(), seq]).unwrap();
        assert_eq!(tape.value(x).shape(), &[2 * (len + 1), model.config.d_model]);
        let a = tape.value(x).row(segs[0].0 + len).to_vec();
        assert_eq!(a, tape.value(x).row(segs[1].0 + len));
    }
}

#[test]
fn long_inputs_are_truncated() {
    let model = Model::new(ModelConfig::micro(), 3).unwrap();
    let ids = vec![6; 40];
    assert_eq!(model.encoder_input(&ids).len(), model.config.max_len);
}

#[test]
fn out_of_vocab_id_is_tokenization_error() {
    let model = Model::new(ModelConfig::micro(), 3).unwrap();
    let mut tape = Tape::inference(&model.store);
    let err = model
        .encode(&mut tape, &[vec![5, 99]], &skillmix_core::encoder::RoutingMode::Learned)
        .unwrap_err();
    assert!(matches!(err, skillmix_core::Error::Tokenization { id: 99, .. }));
}
