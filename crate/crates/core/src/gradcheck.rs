//! Central-difference gradient checking against the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    nonlocal_block, rsa_block, sa_block, EmbeddingVars, RsaVars, SaVars, SliceAxis,
    NONLOCAL_MAX_SIDE,
};
use crate::data::DEFAULT_LESION_RATE;
use crate::error::{Error, Result};
use crate::network::{build_network, weighted_ce_loss, AttentionKind, UNetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Compares tape gradients of `f` with central differences
/// `(f(x + eps) − f(x − eps)) / (2·eps)` at every coordinate of `params`.
///
/// `f` receives a fresh tape and the parameters registered on it as trainable
/// leaves, and returns the scalar output.
pub fn gradcheck<F>(params: &[Tensor<f64>], eps: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidStep(eps));
    }
    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let first = evaluate(params)?;
    let second = evaluate(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        for i in 0..params[p].len() {
            let x = params[p].data()[i];
            probe[p].data_mut()[i] = x + eps;
            let plus = evaluate(&probe)?;
            probe[p].data_mut()[i] = x - eps;
            let minus = evaluate(&probe)?;
            probe[p].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (p, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Named gradient-check suites covering the attention blocks, the loss and a
/// small U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Sa,
    Rsa,
    NonLocal,
    Loss,
    UNet,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [
        GradTarget::Sa,
        GradTarget::Rsa,
        GradTarget::NonLocal,
        GradTarget::Loss,
        GradTarget::UNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Sa => "sa",
            GradTarget::Rsa => "rsa",
            GradTarget::NonLocal => "ncl",
            GradTarget::Loss => "loss",
            GradTarget::UNet => "unet",
        }
    }
}

impl std::str::FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown gradcheck target {s:?}")))
    }
}

/// Pass threshold for the suites.
pub const SUITE_TOLERANCE: f64 = 1e-6;
pub const SUITE_EPS: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("non-empty shape")
}

fn worst(reports: Vec<GradcheckReport>) -> GradcheckReport {
    reports
        .into_iter()
        .reduce(|a, b| {
            let coordinates = a.coordinates + b.coordinates;
            let mut w = if b.max_rel_error > a.max_rel_error {
                b
            } else {
                a
            };
            w.coordinates = coordinates;
            w
        })
        .expect("at least one report")
}

/// Embedding handles for parameters `[.., query, key, value]` starting at `at`.
fn embed_vars(v: &[Var], at: usize) -> EmbeddingVars {
    EmbeddingVars {
        query: Some(v[at]),
        key: Some(v[at + 1]),
        value: Some(v[at + 2]),
    }
}

/// Runs one suite. Attention suites draw random `[2, 3, 3, 3]`-sized maps,
/// non-zero `α`s and all three embeddings, and differentiate a random linear
/// functional of the block output.
pub fn run_target(target: GradTarget, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        GradTarget::Sa => {
            let reports = SliceAxis::ALL
                .iter()
                .map(|&axis| {
                    let params = vec![
                        uniform(&mut rng, &[2, 3, 2, 3], 1.0),
                        Tensor::scalar(rng.random_range(0.3..1.0)),
                        uniform(&mut rng, &[2, 2], 0.8),
                        uniform(&mut rng, &[2, 2], 0.8),
                        uniform(&mut rng, &[2, 2], 0.8),
                    ];
                    let probe = uniform(&mut rng, &[2, 3, 2, 3], 1.0);
                    gradcheck(&params, SUITE_EPS, |tape, v| {
                        let vars = SaVars {
                            alpha: v[1],
                            embed: Some(embed_vars(v, 2)),
                        };
                        let out = sa_block(tape, v[0], axis, &vars)?;
                        tape.dot_const(out, probe.clone())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(worst(reports))
        }
        GradTarget::Rsa => {
            let params = vec![
                uniform(&mut rng, &[2, 3, 2, 3], 1.0),
                Tensor::scalar(rng.random_range(0.3..1.0)),
                Tensor::scalar(rng.random_range(0.3..1.0)),
                Tensor::scalar(rng.random_range(0.3..1.0)),
                uniform(&mut rng, &[2, 2], 0.8),
                uniform(&mut rng, &[2, 2], 0.8),
                uniform(&mut rng, &[2, 2], 0.8),
            ];
            let probe = uniform(&mut rng, &[2, 3, 2, 3], 1.0);
            gradcheck(&params, SUITE_EPS, |tape, v| {
                let vars = RsaVars {
                    alphas: [v[1], v[2], v[3]],
                    embed: Some(embed_vars(v, 4)),
                };
                let out = rsa_block(tape, v[0], &vars)?;
                tape.dot_const(out, probe.clone())
            })
        }
        GradTarget::NonLocal => {
            let params = vec![
                uniform(&mut rng, &[2, 2, 3, 2], 1.0),
                Tensor::scalar(rng.random_range(0.3..1.0)),
                uniform(&mut rng, &[2, 2], 0.8),
                uniform(&mut rng, &[2, 2], 0.8),
                uniform(&mut rng, &[2, 2], 0.8),
            ];
            let probe = uniform(&mut rng, &[2, 2, 3, 2], 1.0);
            gradcheck(&params, SUITE_EPS, |tape, v| {
                let vars = SaVars {
                    alpha: v[1],
                    embed: Some(embed_vars(v, 2)),
                };
                let out = nonlocal_block(tape, v[0], &vars, NONLOCAL_MAX_SIDE)?;
                tape.dot_const(out, probe.clone())
            })
        }
        GradTarget::Loss => {
            let logits = uniform(&mut rng, &[2, 2, 2, 3, 3], 2.0);
            let n = 2 * 2 * 3 * 3;
            let labels = Tensor::new(
                &[2, 2, 3, 3],
                (0..n)
                    .map(|i| {
                        if i % 3 == 0 || rng.random_bool(0.2) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )?;
            gradcheck(&[logits], SUITE_EPS, |tape, v| {
                weighted_ce_loss(tape, v[0], &labels, DEFAULT_LESION_RATE)
            })
        }
        GradTarget::UNet => unet_gradcheck(seed),
    }
}

/// Configuration of the U-Net suite: two levels, two base channels, two
/// input channels and one RSA block at the bottom.
pub fn unet_suite_config(seed: u64) -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 2,
        in_channels: 2,
        seed,
        ..UNetConfig::default()
    }
    .with_blocks(AttentionKind::Rsa, "010")
    .expect("supported placement")
}

/// Gradcheck of the weighted loss of a 2-level RSA-010 U-Net on a
/// `[1, 2, 8, 8, 8]` input with respect to every network parameter.
pub fn unet_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut net = build_network::<f64>(&unet_suite_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    for p in net.params_mut() {
        if p.name.contains("alpha") {
            p.value = Tensor::scalar(rng.random_range(0.3..1.0));
        }
    }
    let input = uniform(&mut rng, &[1, 2, 8, 8, 8], 1.0);
    let labels = Tensor::new(
        &[1, 8, 8, 8],
        (0..512)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let params = net.param_values();
    gradcheck(&params, SUITE_EPS, |tape, v| {
        let x = tape.constant(input.clone());
        let logits = net.forward_with(tape, v, x)?;
        weighted_ce_loss(tape, logits, &labels, DEFAULT_LESION_RATE)
    })
}
