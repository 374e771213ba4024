//! Finite-difference verification of every differentiable op and of the
//! composite fusion block and connector, in 64-bit precision.

use crate::error::Result;
use crate::fusion::{fusion_block, FusionModule};
use crate::mllm::connector_forward;
use crate::params::{Binder, ParameterStore};
use crate::tensor::{gradcheck_many, AttentionSpec, Graph, Rng, Tensor, Var, DEFAULT_STEP, IGNORE_INDEX};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

pub const CHECKED_OPS: [&str; 17] = [
    "add",
    "add_bias",
    "mul",
    "scale",
    "sum",
    "mean",
    "matmul",
    "gelu",
    "layer_norm",
    "softmax_lastdim",
    "attention",
    "attention_causal",
    "gather_rows",
    "concat_rows",
    "cross_entropy_logits",
    "fusion_block",
    "connector",
];

/// Reduces `y` to a scalar through a fixed random weighting so every
/// output element contributes a distinct gradient.
fn probe_sum(g: &mut Graph<f64>, y: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let p = g.constant(rng.normal_tensor(shape, 1.0));
    let z = g.mul(y, p)?;
    g.sum(z)
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (2 + rng.below(3), 2 + rng.below(4))
}

fn instance(name: &str, rng: &mut Rng) -> Result<f64> {
    let (r, c) = dims(rng);
    let t = |rng: &mut Rng, s: &[usize], sd: f64| -> Tensor<f64> { rng.normal_tensor(s.to_vec(), sd) };
    let probe = Rng::new(rng.next_u64());
    let h = DEFAULT_STEP;
    match name {
        "add" | "mul" => {
            let inputs = [t(rng, &[r, c], 1.0), t(rng, &[r, c], 1.0)];
            let mul = name == "mul";
            gradcheck_many(
                |g, v| {
                    let y = if mul { g.mul(v[0], v[1])? } else { g.add(v[0], v[1])? };
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "add_bias" => {
            let inputs = [t(rng, &[r, c], 1.0), t(rng, &[c], 1.0)];
            gradcheck_many(
                |g, v| {
                    let y = g.add_bias(v[0], v[1])?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "scale" => {
            let s = rng.uniform_range(-2.0, 2.0);
            gradcheck_many(
                |g, v| {
                    let y = g.scale(v[0], s)?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &[t(rng, &[r, c], 1.0)],
                h,
            )
        }
        "sum" | "mean" => {
            let mean = name == "mean";
            gradcheck_many(
                |g, v| {
                    let y = g.mul(v[0], v[0])?;
                    if mean {
                        g.mean(y)
                    } else {
                        g.sum(y)
                    }
                },
                &[t(rng, &[r, c], 1.0)],
                h,
            )
        }
        "matmul" => {
            let k = 2 + rng.below(4);
            let inputs = [t(rng, &[r, k], 1.0), t(rng, &[k, c], 1.0)];
            gradcheck_many(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "gelu" | "softmax_lastdim" => {
            let gelu = name == "gelu";
            gradcheck_many(
                |g, v| {
                    let y = if gelu { g.gelu(v[0])? } else { g.softmax_lastdim(v[0])? };
                    probe_sum(g, y, &mut probe.clone())
                },
                &[t(rng, &[r, c], 1.5)],
                h,
            )
        }
        "layer_norm" => {
            let inputs = [t(rng, &[r, c + 1], 1.0), t(rng, &[c + 1], 1.0), t(rng, &[c + 1], 1.0)];
            gradcheck_many(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "attention" | "attention_causal" => {
            let heads = 1 + rng.below(2);
            let batch = 1 + rng.below(2);
            let (tq, tk) = if name == "attention" { (r, 2 + rng.below(3)) } else { (r, r) };
            let d = heads * (1 + rng.below(3));
            let inputs = [
                t(rng, &[batch * tq, d], 1.0),
                t(rng, &[batch * tk, d], 1.0),
                t(rng, &[batch * tk, d], 1.0),
            ];
            let spec = AttentionSpec {
                heads,
                batch,
                causal: name == "attention_causal",
            };
            gradcheck_many(
                |g, v| {
                    let y = g.attention(v[0], v[1], v[2], spec)?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "gather_rows" => {
            let index: Vec<usize> = (0..r + 2).map(|_| rng.below(r)).collect();
            gradcheck_many(
                |g, v| {
                    let y = g.gather_rows(v[0], index.clone())?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &[t(rng, &[r, c], 1.0)],
                h,
            )
        }
        "concat_rows" => {
            let extra = 1 + rng.below(3);
            let inputs = [t(rng, &[r, c], 1.0), t(rng, &[extra, c], 1.0)];
            gradcheck_many(
                |g, v| {
                    let y = g.concat_rows(v)?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "cross_entropy_logits" => {
            let mut targets: Vec<usize> = (0..r + 1).map(|_| rng.below(c)).collect();
            targets[0] = IGNORE_INDEX;
            gradcheck_many(
                |g, v| Ok(g.cross_entropy_logits(v[0], &targets)?.loss),
                &[t(rng, &[r + 1, c], 2.0)],
                h,
            )
        }
        "fusion_block" => {
            let heads = 1 + rng.below(2);
            let d = heads * (2 + rng.below(2));
            let d_aug = 2 + rng.below(4);
            let (n_a, n_g) = (2 + rng.below(4), 2 + rng.below(4));
            let inputs = [
                t(rng, &[n_a, d], 1.0),
                t(rng, &[n_g, d_aug], 1.0),
                t(rng, &[d_aug, d], 0.5),
                t(rng, &[d, d], 0.5),
                t(rng, &[d, d], 0.5),
                t(rng, &[d, d], 0.5),
                t(rng, &[d, d], 0.5),
            ];
            gradcheck_many(
                |g, v| {
                    let m = FusionModule {
                        w_proj: v[2],
                        w_q: v[3],
                        w_k: v[4],
                        w_v: v[5],
                        w_o: v[6],
                        heads,
                    };
                    let y = fusion_block(g, &m, v[0], v[1], 1)?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        "connector" => {
            let hidden = 2 + rng.below(4);
            let out = 2 + rng.below(4);
            let inputs = [
                t(rng, &[r, c], 1.0),
                t(rng, &[c, hidden], 0.5),
                t(rng, &[hidden], 0.5),
                t(rng, &[hidden, out], 0.5),
                t(rng, &[out], 0.5),
            ];
            let store = ParameterStore::new();
            gradcheck_many(
                |g, v| {
                    let mut b = Binder::frozen(&store);
                    for (n, &var) in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].iter().zip(&v[1..]) {
                        b.bind(&format!("connector.{n}"), var);
                    }
                    let y = connector_forward(g, &mut b, v[0])?;
                    probe_sum(g, y, &mut probe.clone())
                },
                &inputs,
                h,
            )
        }
        other => Err(crate::Error::Input(format!("no gradient check named {other}"))),
    }
}

/// Runs `instances` random instances of every entry in [`CHECKED_OPS`].
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    CHECKED_OPS
        .iter()
        .map(|&name| {
            let mut rng = Rng::derive(seed, name);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(instance(name, &mut rng)?);
            }
            Ok(GradCheckResult {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_each_op_once() {
        let r = gradcheck_suite(2, 3).unwrap();
        assert_eq!(r.len(), CHECKED_OPS.len());
        for x in &r {
            assert!(x.passed(), "{x:?}");
        }
    }

    #[test]
    fn unknown_name_is_error() {
        assert!(instance("nope", &mut Rng::new(0)).is_err());
    }
}
