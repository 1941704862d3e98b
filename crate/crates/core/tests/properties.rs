use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillmix_core::corpus::{gen_downstream, gen_skill_instance, oracle_answer, DownstreamTask, Skill};
use skillmix_core::corpus::{SyntheticWorld, Vocabulary, WorldSizes};
use skillmix_core::encoder::{decide, top_k_indices, RoutingMode};
use skillmix_core::grad_check::grad_check;
use skillmix_core::{Tape, Tensor};

fn small_world(seed: u64) -> SyntheticWorld {
    let sizes = WorldSizes {
        entities: 30,
        relations: 5,
        types: 4,
        triples: 90,
    };
    SyntheticWorld::build(seed, sizes).unwrap()
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix()) {
        let t = Tensor::new(vec![r, c], data).unwrap();
        let s = t.softmax_rows();
        for i in 0..r {
            prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant((r, c, data) in matrix(), shift in -50.0f64..50.0) {
        let t = Tensor::new(vec![r, c], data.clone()).unwrap();
        let u = Tensor::new(vec![r, c], data.iter().map(|x| x + shift).collect()).unwrap();
        prop_assert!(t.softmax_rows().max_abs_diff(&u.softmax_rows()) < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardised((r, c, data) in matrix()) {
        prop_assume!(c >= 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![r, c], data).unwrap());
        let g = tape.constant(Tensor::full(&[c], 1.0));
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
        let yv = tape.value(y);
        for i in 0..r {
            let row = yv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            // constant rows normalise to zero
            prop_assert!((var - 1.0).abs() < 1e-6 || var < 1e-12);
        }
    }

    #[test]
    fn doubled_function_doubles_gradient((r, c, data) in matrix()) {
        let x = Tensor::new(vec![r, c], data).unwrap();
        let f = |tape: &mut Tape<'_>, x| {
            let s = tape.softmax_rows(x);
            let q = tape.mul(s, x).unwrap();
            tape.sum(q)
        };
        let grad = |twice: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let mut y = f(&mut tape, xv);
            if twice {
                let y2 = f(&mut tape, xv);
                y = tape.add(y, y2).unwrap();
            }
            tape.backward(y).unwrap().wrt(xv).unwrap().to_vec()
        };
        let (g1, g2) = (grad(false), grad(true));
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn routing_decisions_are_consistent(
        logits in prop::collection::vec(-8.0f64..8.0, 2..9),
        k_frac in 0.0f64..1.0,
    ) {
        let n = logits.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let d = decide(0, &logits, k, &RoutingMode::Learned);
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((d.renormalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(d.active.len(), k);
        prop_assert!(d.active.windows(2).all(|w| w[0] < w[1]));
        // every active weight is at least every inactive weight
        let min_in = d.active.iter().map(|&j| d.weights[j]).fold(f64::INFINITY, f64::min);
        let max_out = (0..n).filter(|j| !d.active.contains(j)).map(|j| d.weights[j]).fold(0.0, f64::max);
        prop_assert!(min_in >= max_out);
        // renormalised weights keep the router's proportions
        let mass: f64 = d.active.iter().map(|&j| d.weights[j]).sum();
        for (slot, &j) in d.active.iter().enumerate() {
            prop_assert!((d.renormalized[slot] - d.weights[j] / mass).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_matches_a_sort_oracle(values in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 2.0]), 1..10), k in 1usize..10) {
        let k = k.min(values.len());
        let got = top_k_indices(&values, k);
        let mut oracle: Vec<(i64, usize)> = values.iter().enumerate().map(|(i, &v)| (-(v * 2.0) as i64, i)).collect();
        oracle.sort();
        let want: Vec<usize> = oracle.iter().take(k).map(|&(_, i)| i).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn world_is_functional_and_reproducible(seed in 0u64..1000) {
        let w = small_world(seed);
        let mut keys: Vec<_> = w.triples().iter().map(|t| (t.head, t.relation)).collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), n);
        let again = small_world(seed);
        prop_assert_eq!(w.triples(), again.triples());
    }

    #[test]
    fn generated_text_round_trips_and_is_oracle_consistent(seed in 0u64..500) {
        let w = small_world(seed % 7);
        let vocab = Vocabulary::for_world(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut instances: Vec<_> = Skill::ALL.iter().map(|&s| gen_skill_instance(&w, s, &mut rng)).collect();
        for task in [DownstreamTask::Hop2Qa, DownstreamTask::LogicFact, DownstreamTask::TypedHop2] {
            instances.push(gen_downstream(&w, task, &mut rng).unwrap());
        }
        for inst in &instances {
            for text in [&inst.input, &inst.target] {
                let ids = vocab.tokenize_strict(text).unwrap();
                prop_assert_eq!(&vocab.detokenize(&ids), text);
            }
            let oracle = oracle_answer(&w, inst);
            prop_assert_eq!(oracle.as_deref(), Some(inst.target.as_str()));
        }
    }
}

#[test]
fn tokenizer_edge_cases() {
    let v = Vocabulary::from_tokens(["a", "b"]);
    assert!(v.tokenize("").is_empty());
    assert_eq!(v.tokenize("a zzz"), vec![v.id("a").unwrap(), skillmix_core::corpus::vocab::UNK]);
}

#[test]
fn quadratic_and_softmax_cross_entropy_grad_checks() {
    let x = Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[0.7, 0.1, -0.4]]);
    let quad = grad_check(
        |tape, x| {
            let q = tape.mul(x, x)?;
            Ok(tape.sum(q))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(quad.max_rel_err < 1e-6, "{quad:?}");
    let target = Tensor::from_rows(&[&[0.2, 0.3, 0.5], &[0.0, 1.0, 0.0]]);
    let ce = grad_check(|tape, x| tape.cross_entropy(x, &target), &x, 1e-5).unwrap();
    assert!(ce.max_rel_err < 1e-5, "{ce:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 6]));
    let mut one_hot = Tensor::zeros(&[1, 6]);
    one_hot.data_mut()[2] = 1.0;
    let l = tape.cross_entropy(uniform, &one_hot).unwrap();
    assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);
    let equal = tape.constant(Tensor::from_rows(&[&[0.4, 0.4]]));
    let half = Tensor::from_rows(&[&[0.5, 0.5]]);
    let l = tape.cross_entropy(equal, &half).unwrap();
    assert!((tape.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    let sharp = tape.constant(Tensor::from_rows(&[&[60.0, 0.0]]));
    let l = tape.cross_entropy(sharp, &Tensor::from_rows(&[&[1.0, 0.0]])).unwrap();
    assert!(tape.value(l).item() < 1e-20);
}

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    let c = Tensor::zeros(&[2, 3]);
    let err = c.matmul(&c).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}
