//! Central finite-difference gradient checking.
//!
//! The output of the checked function is projected onto a fixed random
//! direction `r`, so the scalar under test is `L(x) = Σ r ⊙ f(x)`. Analytic
//! gradients come from seeding the reverse sweep with `r`; numeric ones from
//! `(L(x + ε e_i) − L(x − ε e_i)) / 2ε`, using forward evaluations only.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<G>(
    inputs: &[Tensor<f64>],
    build: &G,
    direction: Option<&Tensor<f64>>,
) -> Result<(f64, Tensor<f64>)>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let value = tape.value(out).clone();
    let projected = match direction {
        Some(r) => value.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    Ok((projected, value))
}

/// Compare analytic and numeric gradients of `build` w.r.t. every input.
pub fn check_gradients<G>(
    inputs: &[Tensor<f64>],
    build: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (_, out) = evaluate(inputs, &build, None)?;
    let direction = Tensor::<f64>::rand_uniform(out.shape().to_vec(), -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let grads = tape.backward_with(y, direction.clone())?;

    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape().to_vec());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.numel() => {
                let mut c = sample(&mut rng, input.numel(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.numel()).collect(),
        };
        for idx in coords {
            let x0 = input.data()[idx];
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[idx] = x0 + opts.eps;
            let (plus, _) = evaluate(&probe, &build, Some(&direction))?;
            probe[i].data_mut()[idx] = x0 - opts.eps;
            let (minus, _) = evaluate(&probe, &build, Some(&direction))?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: i,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
