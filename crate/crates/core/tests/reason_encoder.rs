mod common;

use common::{jitter, model_with, random_tensor, rows};
use skillmix_core::encoder::{decide, RoutingMode};
use skillmix_core::grad_check::grad_check_params;
use skillmix_core::tape::Segments;
use skillmix_core::train::{AdamConfig, Batch, Trainer};
use skillmix_core::{Model, Tape, Tensor};

const INPUTS: [&[usize]; 3] = [&[5, 6, 7], &[8, 9], &[10, 11, 5, 6, 9]];

fn inputs() -> Vec<Vec<usize>> {
    INPUTS.iter().map(|s| s.to_vec()).collect()
}

fn output(model: &Model, inputs: &[Vec<usize>], mode: &RoutingMode) -> Tensor {
    let mut tape = Tape::inference(&model.store);
    let state = model.encode(&mut tape, inputs, mode).unwrap();
    tape.value(state.output()).clone()
}

fn rm_out(model: &Model, h: &Tensor, skill: usize, step: usize) -> Tensor {
    let mut tape = Tape::inference(&model.store);
    let hv = tape.constant(h.clone());
    let segs: Segments = vec![(0, h.rows())];
    let out = model.encoder.rm_forward(&mut tape, &model.config, hv, &segs, skill, step).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_init_adapters_make_steps_identical() {
    let model = model_with(1, |c| c.depth = 3);
    let h = random_tensor(&[4, 8], 2);
    let s0 = rm_out(&model, &h, 1, 0);
    assert_eq!(s0.data(), rm_out(&model, &h, 1, 2).data());
    let mut plain = model_with(1, |c| {
        c.depth = 3;
        c.use_adapters = false;
    });
    // the adapter-free model draws a different init stream; share the layers
    let ids: Vec<_> = plain.store.ids().collect();
    for id in ids {
        let src = model.store.find(&plain.store.get(id).name).unwrap();
        plain.store.assign(id, model.store.tensor(src).clone()).unwrap();
    }
    assert_eq!(s0.data(), rm_out(&plain, &h, 1, 0).data());
}

#[test]
fn perturbing_one_step_adapter_changes_only_that_step() {
    let mut model = model_with(3, |c| c.depth = 3);
    let h = random_tensor(&[4, 8], 4);
    let before: Vec<Tensor> = (0..3).map(|s| rm_out(&model, &h, 2, s)).collect();
    jitter(&mut model.store, "rm.2.step2.", 0.2, 5);
    assert_eq!(before[0].data(), rm_out(&model, &h, 2, 0).data());
    assert_eq!(before[1].data(), rm_out(&model, &h, 2, 1).data());
    assert!(before[2].max_abs_diff(&rm_out(&model, &h, 2, 2)) > 1e-6);
}

#[test]
fn shared_layers_are_stored_once_adapters_per_step() {
    let model = model_with(0, |c| c.depth = 3);
    let names: Vec<&str> = model.store.iter().map(|(_, p)| p.name.as_str()).collect();
    for j in 0..model.config.n_skills {
        let layer = format!("rm.{j}.layer0.attn.wq.w");
        assert_eq!(names.iter().filter(|n| **n == layer).count(), 1);
        for s in 0..3 {
            let ad = format!("rm.{j}.step{s}.layer0.adapter0.up.w");
            assert_eq!(names.iter().filter(|n| **n == ad).count(), 1);
        }
        assert!(!names.iter().any(|n| n.starts_with(&format!("rm.{j}.step3"))));
    }
}

#[test]
fn shared_layer_gradient_accumulates_over_depth() {
    let mut model = model_with(6, |c| c.depth = 3);
    jitter(&mut model.store, "", 0.1, 7);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("rm.0.layer0"))
        .map(|(id, _)| id)
        .collect();
    let r = random_tensor(&[4, 8], 8);
    let m = model.clone();
    // all three steps run skill 0, so the finite difference sees every use
    let f = |tape: &mut Tape<'_>| {
        let st = m.encode(tape, &[vec![5, 6, 7]], &RoutingMode::Forced(0))?;
        let rv = tape.constant(r.clone());
        let p = tape.mul(st.output(), rv)?;
        Ok(tape.sum(p))
    };
    let report = grad_check_params(&mut model.store, &ids, 4, 1e-5, f).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");

}

#[test]
fn zero_gates_pass_previous_mixture_through() {
    let model = model_with(9, |c| c.depth = 3);
    let mut tape = Tape::inference(&model.store);
    let st = model.encode(&mut tape, &inputs(), &RoutingMode::Learned).unwrap();
    assert_eq!(st.steps.len(), 3);
    assert_eq!(tape.value(st.steps[0].gated).data(), tape.value(st.h0).data());
    for i in 1..3 {
        assert_eq!(
            tape.value(st.steps[i].gated).data(),
            tape.value(st.steps[i - 1].mixture).data()
        );
    }
}

#[test]
fn identity_gate_adds_mixture_to_base() {
    let mut model = model_with(10, |c| c.gate_hidden = 2 * c.d_model);
    let d = model.config.d_model;
    // relu(h) - relu(-h) == h
    let mut w1 = Tensor::zeros(&[d, 2 * d]);
    let mut w2 = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        w1.data_mut()[i * 2 * d + i] = 1.0;
        w1.data_mut()[i * 2 * d + d + i] = -1.0;
        w2.data_mut()[i * d + i] = 1.0;
        w2.data_mut()[(d + i) * d + i] = -1.0;
    }
    for s in 0..model.config.depth {
        let ffn = model.encoder.gates[s].ffn.clone();
        model.store.assign(ffn.w1.w, w1.clone()).unwrap();
        model.store.assign(ffn.w2.w, w2.clone()).unwrap();
        for b in [ffn.w1.b.unwrap(), ffn.w2.b.unwrap()] {
            let shape = model.store.tensor(b).shape().to_vec();
            model.store.assign(b, Tensor::zeros(&shape)).unwrap();
        }
    }
    let mut tape = Tape::inference(&model.store);
    let st = model.encode(&mut tape, &inputs(), &RoutingMode::Learned).unwrap();
    let mut base = tape.value(st.h0).clone();
    for step in &st.steps {
        let mix = tape.value(step.mixture);
        let expected: Vec<f64> = base.data().iter().zip(mix.data()).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(step.gated).data(), &expected[..]);
        base = mix.clone();
    }
}

#[test]
fn stop_gate_gradient_flows_to_both_inputs() {
    let mut model = model_with(11, |_| {});
    jitter(&mut model.store, "gate.", 0.3, 12);
    let mut tape = Tape::with_params(&model.store);
    let base = tape.leaf(random_tensor(&[3, 8], 13), true);
    let mix = tape.leaf(random_tensor(&[3, 8], 14), true);
    let out = model.encoder.stop_gate(&mut tape, base, mix, 0).unwrap();
    let loss = tape.sum(out);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(base).unwrap().iter().all(|&x| x == 1.0));
    assert!(g.wrt(mix).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn forced_single_module_equals_rm_forward() {
    let mut model = model_with(15, |_| {});
    jitter(&mut model.store, "rm.", 0.1, 16);
    let mut tape = Tape::inference(&model.store);
    let st = model.encode(&mut tape, &[vec![5, 9, 7]], &RoutingMode::Forced(1)).unwrap();
    let segs = st.segments.clone();
    let direct = model
        .encoder
        .rm_forward(&mut tape, &model.config, st.h0, &segs, 1, 0)
        .unwrap();
    assert_eq!(tape.value(st.steps[0].mixture).data(), tape.value(direct).data());
}

fn combine_with_logits(model: &Model, h: &Tensor, logits: &[f64]) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::inference(&model.store);
    let hv = tape.constant(h.clone());
    let segs: Segments = vec![(0, h.rows())];
    let lv = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap());
    let d = decide(0, logits, 2, &RoutingMode::Learned);
    assert_eq!(d.active, vec![0, 1]);
    let mix = model
        .encoder
        .combine(&mut tape, &model.config, hv, &segs, lv, &[d], 0, &RoutingMode::Learned)
        .unwrap();
    let o0 = model.encoder.rm_forward(&mut tape, &model.config, hv, &segs, 0, 0).unwrap();
    let o1 = model.encoder.rm_forward(&mut tape, &model.config, hv, &segs, 1, 0).unwrap();
    (tape.value(mix).clone(), tape.value(o0).clone(), tape.value(o1).clone())
}

#[test]
fn equal_weights_average_module_outputs() {
    let mut model = model_with(17, |_| {});
    jitter(&mut model.store, "rm.", 0.1, 18);
    let h = random_tensor(&[3, 8], 19);
    let (mix, o0, o1) = combine_with_logits(&model, &h, &[0.4, 0.4, -3.0]);
    for ((m, a), b) in mix.data().iter().zip(o0.data()).zip(o1.data()) {
        assert!((m - 0.5 * (a + b)).abs() < 1e-12);
    }
}

#[test]
fn identical_modules_are_a_fixed_point_of_the_mixture() {
    let mut model = model_with(20, |_| {});
    jitter(&mut model.store, "rm.", 0.1, 21);
    let copies: Vec<(skillmix_core::ParamId, Tensor)> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("rm.1."))
        .map(|(id, p)| {
            let src = model.store.find(&p.name.replacen("rm.1.", "rm.0.", 1)).unwrap();
            (id, model.store.tensor(src).clone())
        })
        .collect();
    for (id, t) in copies {
        model.store.assign(id, t).unwrap();
    }
    let h = random_tensor(&[3, 8], 22);
    let (mix, o0, _) = combine_with_logits(&model, &h, &[1.3, 0.2, -1.0]);
    assert!(mix.max_abs_diff(&o0) < 1e-12);
}

#[test]
fn learned_top_n_matches_full_activation() {
    let mut model = model_with(23, |c| c.top_k = c.n_skills);
    jitter(&mut model.store, "router.", 0.5, 24);
    let learned = output(&model, &inputs(), &RoutingMode::Learned);
    let full = output(&model, &inputs(), &RoutingMode::Full);
    assert_eq!(learned.data(), full.data());
}

#[test]
fn depth_one_has_one_decision() {
    let model = model_with(25, |c| c.depth = 1);
    let mut tape = Tape::inference(&model.store);
    let st = model.encode(&mut tape, &inputs(), &RoutingMode::Learned).unwrap();
    assert_eq!(st.steps.len(), 1);
    assert_eq!(st.decisions_for(2).len(), 1);
}

#[test]
fn untrained_router_is_uniform_and_ties_low() {
    let model = model_with(26, |_| {});
    let mut tape = Tape::inference(&model.store);
    let st = model.encode(&mut tape, &inputs(), &RoutingMode::Learned).unwrap();
    let n = model.config.n_skills as f64;
    for step in &st.steps {
        for d in &step.decisions {
            assert!(d.weights.iter().all(|w| (w - 1.0 / n).abs() < 1e-15));
            assert_eq!(d.active, vec![0, 1]);
        }
    }
}

#[test]
fn batched_encode_matches_per_instance() {
    let mut model = model_with(27, |c| {
        c.n_skills = 4;
        c.depth = 3;
    });
    jitter(&mut model.store, "", 0.3, 28);
    jitter(&mut model.store, "router.", 2.0, 36);
    let mut batch = inputs();
    batch.extend([vec![11, 11, 11], vec![7], vec![9, 8, 7, 6, 5, 10]]);
    let mut tape = Tape::inference(&model.store);
    let st = model.encode(&mut tape, &batch, &RoutingMode::Learned).unwrap();
    let out = tape.value(st.output()).clone();
    let mut distinct = std::collections::BTreeSet::new();
    for (i, inp) in batch.iter().enumerate() {
        let mut t1 = Tape::inference(&model.store);
        let s1 = model.encode(&mut t1, &[inp.clone()], &RoutingMode::Learned).unwrap();
        let (start, len) = st.segments[i];
        let a = rows(&out, start, len);
        let b = t1.value(s1.output()).data().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let da: Vec<_> = st.decisions_for(i).iter().map(|d| d.active.clone()).collect();
        let db: Vec<_> = s1.decisions_for(0).iter().map(|d| d.active.clone()).collect();
        assert_eq!(da, db);
        distinct.insert(da);
    }
    // the equivalence is only interesting if instances routed differently
    assert!(distinct.len() > 1, "all instances routed alike: {distinct:?}");
}

#[test]
fn inactive_modules_receive_no_gradient() {
    let mut model = model_with(29, |c| {
        c.n_skills = 4;
        c.top_k = 1;
        c.depth = 1;
    });
    jitter(&mut model.store, "", 0.3, 30);
    let mut tape = Tape::with_params(&model.store);
    let st = model.encode(&mut tape, &[vec![5, 6, 7]], &RoutingMode::Learned).unwrap();
    let active = st.steps[0].decisions[0].active.clone();
    assert_eq!(active.len(), 1);
    let rv = tape.constant(random_tensor(&[4, 8], 31));
    let p = tape.mul(st.output(), rv).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    for (id, param) in model.store.iter() {
        let Some(rest) = param.name.strip_prefix("rm.") else { continue };
        let j: usize = rest.split('.').next().unwrap().parse().unwrap();
        let nonzero = g.param(id).is_some_and(|g| g.iter().any(|&x| x != 0.0));
        if active.contains(&j) {
            if param.name.contains(".layer0.attn.wq") {
                assert!(nonzero, "{}", param.name);
            }
        } else {
            assert!(!nonzero, "{} got gradient", param.name);
        }
    }
}

#[test]
fn encode_is_deterministic_per_seed() {
    let a = model_with(32, |_| {});
    let b = model_with(32, |_| {});
    let c = model_with(33, |_| {});
    let oa = output(&a, &inputs(), &RoutingMode::Learned);
    assert_eq!(oa.data(), output(&b, &inputs(), &RoutingMode::Learned).data());
    assert_eq!(oa.data(), output(&a, &inputs(), &RoutingMode::Learned).data());
    assert!(oa.max_abs_diff(&output(&c, &inputs(), &RoutingMode::Learned)) > 1e-6);
}

#[test]
fn training_makes_step_adapters_diverge() {
    let model = model_with(34, |c| c.vocab_size = 12);
    let adam = AdamConfig {
        lr: 1e-2,
        warmup_ratio: 0.0,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::new(model, adam, 1);
    trainer.mode = RoutingMode::Forced(0);
    let batch = Batch {
        inputs: vec![vec![5, 6, 7], vec![8, 9]],
        targets: vec![vec![3, 10, 4], vec![3, 11, 4]],
        skills: vec![Some(0), Some(0)],
    };
    let h = random_tensor(&[3, 8], 35);
    assert_eq!(rm_out(&trainer.model, &h, 0, 0).data(), rm_out(&trainer.model, &h, 0, 1).data());
    trainer.adapt_step(&batch).unwrap();
    let s0 = rm_out(&trainer.model, &h, 0, 0);
    let s1 = rm_out(&trainer.model, &h, 0, 1);
    assert!(s0.max_abs_diff(&s1) > 1e-6);
}
