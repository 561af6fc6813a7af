use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::Parameterized;
use super::{Binder, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Above this many coordinates a random subset is checked instead.
    pub exhaustive_limit: usize,
    /// Size of that random subset.
    pub sample: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so exact zeros compare absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            exhaustive_limit: 10_000,
            sample: 512,
            seed: 0,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter name, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl Parameterized for Vec<Tensor> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(&super::ops::join(prefix, &i.to_string()), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&super::ops::join(prefix, &i.to_string()), t);
        }
    }
}

impl<A: Parameterized, B: Parameterized> Parameterized for (A, B) {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.0.visit(&super::ops::join(prefix, "0"), f);
        self.1.visit(&super::ops::join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.0.visit_mut(&super::ops::join(prefix, "0"), f);
        self.1.visit_mut(&super::ops::join(prefix, "1"), f);
    }
}

fn set_coord<M: Parameterized>(model: &mut M, param: usize, coord: usize, value: f64) -> f64 {
    let mut i = 0;
    let mut old = 0.0;
    model.visit_mut("", &mut |_, t| {
        if i == param {
            old = t.data()[coord];
            t.data_mut()[coord] = value;
        }
        i += 1;
    });
    old
}

/// Compares tape gradients of a scalar loss with central finite differences.
///
/// Every parameter visited by `model` is perturbed in place and restored
/// bit-for-bit afterwards.
pub fn grad_check<M, F>(model: &mut M, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: for<'t> Fn(&M, &Binder<'t>) -> Result<Var<'t>>,
{
    let mut names = Vec::new();
    let mut analytic = Vec::new();
    {
        let tape = Tape::new();
        let bx = Binder::new(&tape, true);
        let l = loss(model, &bx)?;
        let grads = tape.backward(l)?;
        model.visit("", &mut |name, t| {
            names.push(name.to_string());
            analytic.push(bx.grad_of(&grads, t));
        });
    }

    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(p, g)| (0..g.len()).map(move |c| (p, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > opts.exhaustive_limit {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, coords.len(), opts.sample.min(coords.len())).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let eval = |model: &M| -> Result<f64> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, false);
        let l = loss(model, &bx)?;
        tape.check_finite()?;
        Ok(l.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (p, c) in chosen {
        let orig = set_coord(model, p, c, 0.0);
        set_coord(model, p, c, orig + opts.step);
        let plus = eval(model);
        set_coord(model, p, c, orig - opts.step);
        let minus = eval(model);
        set_coord(model, p, c, orig);
        let numeric = (plus? - minus?) / (2.0 * opts.step);
        let a = analytic[p][c];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel;
            report.worst = Some((names[p].clone(), c, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LN_EPS;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_sum_matches_finite_differences() {
        let mut r = rng(11);
        let mut params = vec![
            Tensor::uniform(&[3, 4], 1.0, &mut r),
            Tensor::uniform(&[4, 2], 1.0, &mut r),
            Tensor::uniform(&[2], 1.0, &mut r),
        ];
        let rep = grad_check(
            &mut params,
            |p, bx| {
                let x = bx.param(&p[0]);
                Ok(x.matmul(bx.param(&p[1])).add_row(bx.param(&p[2])).sum())
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        assert_eq!(rep.checked, 12 + 8 + 2);
    }

    #[test]
    fn attention_and_layer_norm_composite() {
        let mut r = rng(12);
        let mut params = vec![
            Tensor::uniform(&[3, 4], 1.0, &mut r),
            Tensor::uniform(&[5, 4], 1.0, &mut r),
            Tensor::uniform(&[5, 4], 1.0, &mut r),
            Tensor::uniform(&[4], 1.0, &mut r),
            Tensor::uniform(&[4], 1.0, &mut r),
            Tensor::uniform(&[3, 4], 1.0, &mut r),
        ];
        let rep = grad_check(
            &mut params,
            |p, bx| {
                let a = bx.param(&p[0]).attention(bx.param(&p[1]), bx.param(&p[2]), 2);
                let n = a.layer_norm(bx.param(&p[3]), bx.param(&p[4]), LN_EPS);
                Ok(n.mul(bx.param(&p[5])).gelu().sum())
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn parameters_restored_exactly() {
        let mut r = rng(13);
        let mut params = vec![Tensor::uniform(&[2, 3], 1.0, &mut r)];
        let before = params.clone();
        grad_check(
            &mut params,
            |p, bx| Ok(bx.param(&p[0]).softmax_rows().mul(bx.param(&p[0])).sum()),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(params[0].to_le_bytes(), before[0].to_le_bytes());
    }
}
