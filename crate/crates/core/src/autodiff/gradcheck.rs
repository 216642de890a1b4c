//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst disagreement found in one input block.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub block: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "block {:>2}: max rel err {:.3e} at #{} (analytic {:.6e}, numeric {:.6e}, {} probed)",
                b.block, b.max_rel_error, b.worst_element, b.analytic, b.numeric, b.probed
            )?;
        }
        write!(
            f,
            "{} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tol
        )
    }
}

/// Finite-difference gradient checker.
///
/// The per-element error is `|a - n| / max(|a|, |n|, floor)`; `floor`
/// keeps entries whose true gradient is zero from dividing round-off noise
/// by zero.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Probe at most this many elements per block, chosen with the seed.
    pub probes: Option<(usize, u64)>,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            floor: 1e-6,
            probes: None,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_probes(mut self, per_block: usize, seed: u64) -> Self {
        self.probes = Some((per_block, seed));
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&tape, &vars)?;
            let v = tape.value(out).data()[0];
            Ok(v)
        };

        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&tape, &vars)?;
            let grads = tape.backward(out)?;
            vars.iter()
                .zip(inputs)
                .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };

        let mut rng = self.probes.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        let mut blocks = Vec::with_capacity(inputs.len());
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (b, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let elements: Vec<usize> = match (self.probes, rng.as_mut()) {
                (Some((per_block, _)), Some(rng)) if per_block < n => {
                    let mut e = sample(rng, n, per_block).into_vec();
                    e.sort_unstable();
                    e
                }
                _ => (0..n).collect(),
            };
            let mut report = BlockReport {
                block: b,
                max_rel_error: 0.0,
                worst_element: 0,
                analytic: 0.0,
                numeric: 0.0,
                probed: elements.len(),
            };
            for &e in &elements {
                let orig = input.data()[e];
                work[b].data_mut()[e] = orig + self.h;
                let plus = eval(&work)?;
                work[b].data_mut()[e] = orig - self.h;
                let minus = eval(&work)?;
                work[b].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic[b].data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                if err > report.max_rel_error || !err.is_finite() {
                    report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                    report.worst_element = e;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
            blocks.push(report);
        }
        Ok(GradCheckReport {
            blocks,
            tol: self.tol,
        })
    }
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(h, tol).run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::CustomOp;

    #[test]
    fn quadratic_form_matches_to_round_off() {
        // f(x) = x^T A x
        let a = Tensor::new(&[3, 3], vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let x = Tensor::new(&[3, 1], vec![0.7, -1.2, 0.4]).unwrap();
        let report = grad_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                let ax = tape.matmul(a, v[0])?;
                tape.sum(tape.mul(v[0], ax)?)
            },
            &[x],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    struct WrongSquare;

    impl CustomOp for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }
        fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
            // d(x^2)/dx is 2x; this deliberately drops the factor 2.
            vec![Some(inputs[0].data().iter().zip(g).map(|(x, g)| x * g).collect())]
        }
    }

    #[test]
    fn wrong_backward_rule_is_reported() {
        let x = Tensor::vector(vec![0.3, -0.8, 1.5]);
        let report = grad_check(
            |tape, v| {
                let val = tape.value(v[0]).clone();
                let sq = Tensor::vector(val.data().iter().map(|x| x * x).collect());
                let y = tape.custom(&[v[0]], sq, Box::new(WrongSquare))?;
                tape.sum(y)
            },
            &[x],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 0.5).abs() < 1e-6, "{report}");
    }
}
