//! Central finite-difference checks against the tape's gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(abs / denom);
        self.coords += 1;
    }

    fn empty() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            coords: 0,
        }
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            coords: self.coords + other.coords,
        }
    }
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    Ok(t.item())
}

/// Checks `d f / d x` for a function of one input tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y)?;
        let g = tape.backward(y)?;
        g.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; x.numel()])
    };
    let eval = |xp: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(xp, false);
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y)
    };
    let mut report = GradCheckReport::empty();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record(analytic[i], numeric);
    }
    Ok(report)
}

/// Evenly spaced coordinate indices, at most `max` of them.
fn sample_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Checks parameter gradients of `f` for the listed parameters, probing at
/// most `max_coords` coordinates of each. `store` is restored on return.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)?;
        tape.backward(y)?.into_params()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)
    };
    let mut report = GradCheckReport::empty();
    for &id in ids {
        let n = store.tensor(id).numel();
        for i in sample_coords(n, max_coords) {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + h;
            let fp = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig - h;
            let fm = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            report.record(analytic, numeric);
        }
    }
    Ok(report)
}

/// Result of one named block check.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub block: &'static str,
    pub report: GradCheckReport,
}

/// Blocks covered by [`block_suite`], in report order.
pub const BLOCKS: [&str; 7] = [
    "attention",
    "ffn",
    "adapter",
    "router",
    "stop_gate",
    "encoder",
    "encoder_decoder_loss",
];

fn random_tensor<R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(tape: &mut Tape<'_>, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

/// Finite-difference checks of every building block on the micro config.
/// Parameters are jittered first so zero-initialised outputs (adapters,
/// gates, routers) are exercised and top-k selections are not tied.
pub fn block_suite(seed: u64, h: f64, max_coords: usize) -> Result<Vec<BlockCheck>> {
    use crate::config::ModelConfig;
    use crate::encoder::RoutingMode;
    use crate::model::Model;
    use crate::nn::self_layout;
    use crate::seq2seq::teacher_forcing_loss;
    use crate::train::{routing_loss, RoutingTarget};
    use rand::SeedableRng;

    let cfg = ModelConfig::micro();
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for &id in &ids {
        let shape = model.store.tensor(id).shape().to_vec();
        let noise = random_tensor(&shape, 0.1, &mut rng);
        for (w, e) in model.store.tensor_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *w += e;
        }
    }
    let d = cfg.d_model;
    let segments = alloc::vec![(0, 4), (4, 3)];
    let x = random_tensor(&[7, d], 1.0, &mut rng);
    let r = random_tensor(&[7, d], 1.0, &mut rng);
    let inputs = alloc::vec![alloc::vec![5, 6, 7], alloc::vec![8, 9]];
    let targets = alloc::vec![alloc::vec![3, 10, 11, 4], alloc::vec![3, 6, 4]];
    let skills = alloc::vec![Some(0), Some(2)];
    let mut router_target = Tensor::zeros(&[2, cfg.n_skills]);
    router_target.data_mut()[..cfg.n_skills].copy_from_slice(&[0.5, 0.0, 0.5]);
    router_target.data_mut()[cfg.n_skills..].copy_from_slice(&[0.0, 0.0, 1.0]);

    let with_prefix = |store: &ParamStore, prefixes: &[&str]| -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    };
    let layout = self_layout(&segments, false);
    let m = model.clone();
    let mut out = Vec::new();
    for block in BLOCKS {
        let (prefixes, coords): (&[&str], usize) = match block {
            "attention" => (&["rep.0.attn."], max_coords),
            "ffn" => (&["rep.0.ffn."], max_coords),
            "adapter" => (&["rm.0.step0.layer0.adapter0."], max_coords),
            "router" => (&["router.0."], max_coords),
            "stop_gate" => (&["gate.0."], max_coords),
            "encoder" => (&["embed.", "rep.", "rm.", "router.", "gate."], max_coords.div_ceil(4)),
            _ => (&[""], max_coords.div_ceil(4)),
        };
        let check_ids = with_prefix(&model.store, prefixes);
        let report = grad_check_params(&mut model.store, &check_ids, coords, h, |tape| {
            let enc = &m.encoder;
            match block {
                "attention" => {
                    let xv = tape.constant(x.clone());
                    let y = enc.representation[0].attn.forward(tape, xv, None, layout.clone())?;
                    project(tape, y, &r)
                }
                "ffn" => {
                    let xv = tape.constant(x.clone());
                    let y = enc.representation[0].ffn.forward(tape, xv)?;
                    project(tape, y, &r)
                }
                "adapter" => {
                    let xv = tape.constant(x.clone());
                    let y = enc.modules[0].adapters[0][0][0].forward(tape, xv)?;
                    project(tape, y, &r)
                }
                "router" => {
                    let xv = tape.constant(x.clone());
                    let (logits, _) = enc.route(tape, &cfg, xv, &segments, 0, &RoutingMode::Learned)?;
                    tape.cross_entropy(logits, &router_target)
                }
                "stop_gate" => {
                    let base = tape.constant(r.clone());
                    let xv = tape.constant(x.clone());
                    let y = enc.stop_gate(tape, base, xv, 0)?;
                    project(tape, y, &r)
                }
                "encoder" => {
                    let state = m.encode(tape, &inputs, &RoutingMode::Learned)?;
                    let rows = tape.value(state.output()).rows();
                    let rr = Tensor::new(alloc::vec![rows, d], r.data()[..rows * d].to_vec())?;
                    project(tape, state.output(), &rr)
                }
                _ => {
                    let state = m.encode(tape, &inputs, &RoutingMode::Learned)?;
                    let tf = teacher_forcing_loss(&m, tape, &state, &targets)?;
                    let rl = routing_loss(tape, &state, &skills, RoutingTarget::Split)?;
                    tape.add(tf, rl)
                }
            }
        })?;
        out.push(BlockCheck { block, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::from_rows(&[&[0.3, -1.2, 2.5, 0.0]]);
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.coords, 4);
    }

    #[test]
    fn softmax_then_cross_entropy() {
        let x = Tensor::from_rows(&[&[0.1, -0.7, 1.3], &[2.0, 0.5, -0.2]]);
        let target = Tensor::from_rows(&[&[0.2, 0.3, 0.5], &[1.0, 0.0, 0.0]]);
        let r = grad_check(|t, x| t.cross_entropy(x, &target), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn sampled_coordinates_are_spread() {
        assert_eq!(sample_coords(3, 10), alloc::vec![0, 1, 2]);
        assert_eq!(sample_coords(10, 5), alloc::vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn every_block_passes() {
        let checks = block_suite(7, 1e-5, 8).unwrap();
        assert_eq!(checks.len(), BLOCKS.len());
        for c in checks {
            assert!(c.report.coords > 0, "{}", c.block);
            assert!(c.report.passes(1e-4), "{}: {:?}", c.block, c.report);
        }
    }
}
