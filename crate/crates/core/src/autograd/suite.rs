//! Finite-difference verification of every primitive and both block types,
//! shared by the `gradcheck` command and the test suites.

use super::{grad_check, GradCheckError, Tape, Var};
use crate::blocks::{make_block, BlockSpec};
use crate::error::{Error, Result};
use crate::layers::{ActivationSpec, Mode, Module, BN_EPSILON};
use crate::tensor::{derive_seed, seeded_normal, seeded_uniform, Tensor};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const COMPONENTS: [&str; 19] = [
    "add",
    "mul",
    "sum",
    "conv2d",
    "conv2d_stride2",
    "batch_norm_train",
    "batch_norm_eval",
    "activation_relu",
    "activation_sigmoid",
    "activation_sigmoid_shifted",
    "activation_clipped",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "quotient_block",
    "quotient_block_stride2",
    "residual_block",
    "residual_block_stride2",
    "network_head",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub name: String,
    pub instances: usize,
    /// Worst relative error over all instances; infinite when a gradient
    /// was not finite.
    pub max_rel_error: f64,
    pub failure: Option<String>,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

type Build = Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Inputs and loss closure of instance `seed` of a component. The loss is
/// always a scalar; non-scalar outputs are reduced against fixed random
/// weights so that no gradient vanishes by symmetry.
fn instance(name: &str, seed: u64) -> Result<(Vec<Tensor<f64>>, Build)> {
    let s = |k: u64| derive_seed(seed, k);
    let normal = |dims: &[usize], k: u64| seeded_normal::<f64>(dims.to_vec(), 0.0, 1.0, s(k));
    let weigh = |dims: &[usize]| -> Result<Tensor<f64>> { seeded_uniform(dims.to_vec(), -1.0, 1.0, s(99)) };
    fn reduce(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
        let wv = tape.leaf(w.clone(), false);
        let p = tape.mul(y, wv)?;
        Ok(tape.sum(p))
    }
    let act = |spec: ActivationSpec| -> Result<(Vec<Tensor<f64>>, Build)> {
        let dims = [2, 3, 4, 4];
        let x = seeded_normal::<f64>(dims.to_vec(), 0.0, 2.0, s(1))?;
        let w = weigh(&dims)?;
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.activation(v[0], &spec);
                reduce(t, y, &w)
            }),
        ))
    };
    let block = |spec: BlockSpec| -> Result<(Vec<Tensor<f64>>, Build)> {
        let mut b = make_block::<f64>(spec.clone(), s(2))?;
        // Transform weights are small at init; enlarge them so every path
        // carries a visible gradient.
        let mut inputs = vec![normal(&[2, spec.in_channels, 4, 4], 1)?];
        for (k, (_, p)) in b.named_params_mut().into_iter().enumerate() {
            inputs.push(seeded_normal(p.value.dims().to_vec(), 0.0, 0.5, s(10 + k as u64))?);
        }
        let ho = 4 / spec.stride;
        let w = weigh(&[2, spec.out_channels, ho, ho])?;
        Ok((
            inputs,
            Box::new(move |t, v| {
                for ((_, p), &var) in b.named_params_mut().into_iter().zip(&v[1..]) {
                    p.bind_to(var);
                }
                let out = b.forward(t, v[0], Mode::Train)?;
                // Both the block output and its captured branch feed the loss.
                let l1 = reduce(t, out.out, &w)?;
                let l2 = reduce(t, out.branch, &w)?;
                t.add(l1, l2)
            }),
        ))
    };
    match name {
        "add" | "mul" => {
            let dims = [3, 5];
            let (a, b, w) = (normal(&dims, 1)?, normal(&dims, 2)?, weigh(&dims)?);
            let mul = name == "mul";
            Ok((
                vec![a, b],
                Box::new(move |t, v| {
                    let y = if mul { t.mul(v[0], v[1])? } else { t.add(v[0], v[1])? };
                    // Reusing an input exercises gradient accumulation.
                    let y = t.mul(y, v[0])?;
                    reduce(t, y, &w)
                }),
            ))
        }
        "sum" => {
            let x = normal(&[4, 3], 1)?;
            Ok((
                vec![x],
                Box::new(|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                }),
            ))
        }
        "conv2d" | "conv2d_stride2" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let (x, k) = (normal(&[2, 3, 5, 5], 1)?, normal(&[4, 3, 3, 3], 2)?);
            let o = (5 + 2 - 3) / stride + 1;
            let w = weigh(&[2, 4, o, o])?;
            Ok((
                vec![x, k],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], stride, 1)?;
                    reduce(t, y, &w)
                }),
            ))
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let train = name == "batch_norm_train";
            let dims = [3, 2, 3, 3];
            let x = seeded_normal::<f64>(dims.to_vec(), 0.5, 2.0, s(1))?;
            let (g, b) = (seeded_uniform::<f64>(vec![2], 0.5, 1.5, s(2))?, normal(&[2], 3)?);
            let w = weigh(&dims)?;
            let (rm, rv) = (vec![0.3, -0.2], vec![1.7, 0.6]);
            Ok((
                vec![x, g, b],
                Box::new(move |t, v| {
                    let y = if train {
                        t.batch_norm_train(v[0], v[1], v[2], BN_EPSILON)?.0
                    } else {
                        t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, BN_EPSILON)?
                    };
                    reduce(t, y, &w)
                }),
            ))
        }
        "activation_relu" => act(ActivationSpec::Relu),
        "activation_sigmoid" => act(ActivationSpec::quotient(2.0)?),
        "activation_sigmoid_shifted" => act(ActivationSpec::Sigmoid { scale: 2.0, hshift: -(9f64.ln()), vshift: -0.8 }),
        "activation_clipped" => act(ActivationSpec::clipped_linear(1.0, -0.5, 3.5)?),
        "global_avg_pool" => {
            let x = normal(&[2, 3, 4, 4], 1)?;
            let w = weigh(&[2, 3])?;
            Ok((
                vec![x],
                Box::new(move |t, v| {
                    let y = t.global_avg_pool(v[0])?;
                    reduce(t, y, &w)
                }),
            ))
        }
        "linear" => {
            let (x, k, b) = (normal(&[3, 4], 1)?, normal(&[5, 4], 2)?, normal(&[5], 3)?);
            let w = weigh(&[3, 5])?;
            Ok((
                vec![x, k, b],
                Box::new(move |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    reduce(t, y, &w)
                }),
            ))
        }
        "softmax_cross_entropy" => {
            let z = seeded_normal::<f64>(vec![4, 6], 0.0, 3.0, s(1))?;
            let labels: Vec<usize> = (0..4).map(|i| (seed as usize + 2 * i) % 6).collect();
            Ok((vec![z], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels))))
        }
        "quotient_block" => block(BlockSpec::quotient(3, 3, 1, 2.0)?),
        "quotient_block_stride2" => block(BlockSpec::quotient(2, 4, 2, 2.0)?),
        "residual_block" => block(BlockSpec::residual(3, 3, 1)),
        "residual_block_stride2" => block(BlockSpec::residual(2, 4, 2)),
        "network_head" => {
            let mut head = crate::blocks::Head::<f64>::new(3, ActivationSpec::quotient(2.0)?, true, s(2))?;
            let mut inputs = vec![normal(&[2, 3, 4, 4], 1)?];
            for (k, (_, p)) in head.named_params_mut().into_iter().enumerate() {
                inputs.push(seeded_normal(p.value.dims().to_vec(), 0.0, 0.5, s(10 + k as u64))?);
            }
            let w = weigh(&[2, 3, 4, 4])?;
            Ok((
                inputs,
                Box::new(move |t, v| {
                    for ((_, p), &var) in head.named_params_mut().into_iter().zip(&v[1..]) {
                        p.bind_to(var);
                    }
                    let y = head.forward(t, v[0], Mode::Train)?;
                    reduce(t, y, &w)
                }),
            ))
        }
        _ => Err(Error::InvalidArgument(format!("unknown gradcheck component `{name}`"))),
    }
}

/// Runs `instances` seeded instances of one component. With `fault`, the
/// loss passes through an identity node whose backward rule scales the
/// gradient by 1.5, which any sound check must flag.
pub fn check_component(name: &str, instances: usize, fault: bool) -> Result<ComponentCheck> {
    let mut check = ComponentCheck { name: name.to_string(), instances, max_rel_error: 0.0, failure: None };
    for i in 0..instances {
        let (inputs, mut f) = instance(name, 1000 + i as u64)?;
        let eval = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let loss = f(t, v)?;
            if !fault {
                return Ok(loss);
            }
            let value = t.value(loss).clone();
            Ok(t.custom(&[loss], value, Box::new(|_, g| vec![g.map(|x| 1.5 * x)])))
        };
        match grad_check(eval, &inputs, GRADCHECK_STEP) {
            Ok(r) => {
                if r.max_rel_error > check.max_rel_error {
                    check.max_rel_error = r.max_rel_error;
                }
                if r.max_rel_error >= GRADCHECK_TOLERANCE && check.failure.is_none() {
                    check.failure = Some(format!(
                        "instance {i}: relative error {:.3e} at input {} index {}",
                        r.max_rel_error, r.worst_input, r.worst_index
                    ));
                }
            }
            Err(GradCheckError::NonFinite { input, index, analytic, numeric }) => {
                check.max_rel_error = f64::INFINITY;
                check.failure.get_or_insert(format!(
                    "instance {i}: non-finite gradient at input {input} index {index} (analytic {analytic}, numeric {numeric})"
                ));
            }
            Err(GradCheckError::Eval(e)) => return Err(e),
        }
    }
    Ok(check)
}

/// Every component in [`COMPONENTS`] order; `fault` names one component
/// whose backward is deliberately corrupted.
pub fn verify_all(instances: usize, fault: Option<&str>) -> Result<Vec<ComponentCheck>> {
    if let Some(f) = fault {
        if !COMPONENTS.contains(&f) {
            return Err(Error::InvalidArgument(format!("unknown gradcheck component `{f}`")));
        }
    }
    COMPONENTS.iter().map(|&c| check_component(c, instances, fault == Some(c))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_one_instance() {
        for c in COMPONENTS {
            let r = check_component(c, 1, false).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let r = check_component("linear", 1, true).unwrap();
        assert!(!r.passed() && r.failure.is_some());
        assert!(verify_all(1, Some("nope")).is_err());
    }
}
