//! Finite-difference cases for every differentiable primitive, in f64.
//! Shared by the gradient tests and the acceptance harness.
#![allow(dead_code)]

use mmfuse_autograd::{grad_check, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 50;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub type Loss = Box<dyn Fn(&mut Tape<f64>, Var) -> Var>;
pub type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor<f64>, Loss)>;

pub struct Case {
    pub group: &'static str,
    pub name: String,
    make: Maker,
}

impl Case {
    /// Worst relative error over all seeds, or the first seed past tolerance.
    pub fn run(&self) -> Result<f64, String> {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, f) = (self.make)(&mut rng);
            let err = grad_check(|t, v| f(t, v), &x, EPS).map_err(|e| format!("{}: {e}", self.name))?;
            if !(err < TOL) {
                return Err(format!("{}: seed {seed} relative error {err:e}", self.name));
            }
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

pub fn all() -> Vec<Case> {
    let registry: &[(&'static str, fn(&mut Vec<Case>))] = &[
        ("elementwise_binary", elementwise_binary),
        ("elementwise_unary", elementwise_unary),
        ("reductions", reductions),
        ("matmul_both_operands", matmul_both_operands),
        ("conv2d_all_inputs", conv2d_all_inputs),
        ("conv_transpose2d_all_inputs", conv_transpose2d_all_inputs),
        ("pooling", pooling),
        ("normalization_and_affine", normalization_and_affine),
        ("structural_ops", structural_ops),
        ("softmax_cross_entropy", softmax_cross_entropy),
        ("bilinear_resize", bilinear_resize),
        ("conv_gap_linear_composite", conv_gap_linear_composite),
        ("random_three_layer_net", random_three_layer_net),
    ];
    let mut out = Vec::new();
    for (group, register) in registry {
        let start = out.len();
        register(&mut out);
        for c in &mut out[start..] {
            c.group = group;
        }
    }
    out
}

fn add<F>(out: &mut Vec<Case>, name: String, make: F)
where
    F: Fn(&mut ChaCha8Rng) -> (Tensor<f64>, Loss) + 'static,
{
    out.push(Case {
        group: "",
        name,
        make: Box::new(make),
    });
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Reduces any value to a scalar through fixed random weights so that the
/// upstream gradient is not uniform.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w);
    tape.sum(p)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn elementwise_binary(out: &mut Vec<Case>) {
    for which in ["add", "sub", "mul"] {
        add(out, which.to_string(), move |rng| {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 5)];
            let x = rand_tensor(rng, &shape);
            let other = rand_tensor(rng, &shape);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t: &mut Tape<f64>, v: Var| {
                    let o = t.constant(other.clone());
                    let y = match which {
                        "add" => t.add(v, o),
                        "sub" => t.sub(o, v),
                        _ => t.mul(v, o),
                    };
                    project(t, y, seed)
                }),
            )
        });
    }
}

fn elementwise_unary(out: &mut Vec<Case>) {
    for which in ["scale", "add_scalar", "relu", "leaky_relu", "tanh", "abs", "square"] {
        add(out, which.to_string(), move |rng| {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 6)];
            let x = rand_tensor(rng, &shape);
            let seed = rng.gen();
            (
                x,
                Box::new(move |t: &mut Tape<f64>, v: Var| {
                    let y = match which {
                        "scale" => t.scale(v, -1.7),
                        "add_scalar" => t.add_scalar(v, 0.3),
                        "relu" => t.relu(v),
                        "leaky_relu" => t.leaky_relu(v, 0.2),
                        "tanh" => t.tanh(v),
                        "abs" => t.abs(v),
                        _ => t.square(v),
                    };
                    project(t, y, seed)
                }),
            )
        });
    }
}

fn reductions(out: &mut Vec<Case>) {
    add(out, "sum".to_string(), move |rng| {
        let x = {
            let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
            rand_tensor(rng, &s)
        };
        (x, Box::new(|t: &mut Tape<f64>, v: Var| t.sum(v)))
    });
    add(out, "mean".to_string(), move |rng| {
        let x = {
            let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
            rand_tensor(rng, &s)
        };
        (
            x,
            Box::new(|t: &mut Tape<f64>, v: Var| {
                let s = t.square(v);
                t.mean(s)
            }),
        )
    });
}

fn matmul_both_operands(out: &mut Vec<Case>) {
    add(out, "matmul.lhs".to_string(), move |rng| {
        let (n, d, k) = (dims(rng, 1, 4), dims(rng, 1, 6), dims(rng, 1, 4));
        let x = rand_tensor(rng, &[n, d]);
        let w = rand_tensor(rng, &[d, k]);
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let w = t.constant(w.clone());
                let y = t.matmul(v, w);
                project(t, y, seed)
            }),
        )
    });
    add(out, "matmul.rhs".to_string(), move |rng| {
        let (n, d, k) = (dims(rng, 1, 4), dims(rng, 1, 6), dims(rng, 1, 4));
        let a = rand_tensor(rng, &[n, d]);
        let w = rand_tensor(rng, &[d, k]);
        let seed = rng.gen();
        (
            w,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let a = t.constant(a.clone());
                let y = t.matmul(a, v);
                project(t, y, seed)
            }),
        )
    });
}

struct ConvCase {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    stride: usize,
    pad: usize,
    seed: u64,
}

fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    let (n, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = dims(rng, 1, 2);
    let pad = if k == 3 { rng.gen_range(0..2) } else { 0 };
    let side = dims(rng, 3, 6);
    ConvCase {
        x: rand_tensor(rng, &[n, c, side, side]),
        w: rand_tensor(rng, &[o, c, k, k]),
        b: rand_tensor(rng, &[o]),
        stride,
        pad,
        seed: rng.gen(),
    }
}

fn conv2d_all_inputs(out: &mut Vec<Case>) {
    for target in ["x", "w", "b"] {
        add(out, format!("conv2d.{target}"), move |rng| {
            let c = conv_case(rng);
            let start = match target {
                "x" => c.x.clone(),
                "w" => c.w.clone(),
                _ => c.b.clone(),
            };
            (
                start,
                Box::new(move |t: &mut Tape<f64>, v: Var| {
                    let x = if target == "x" { v } else { t.constant(c.x.clone()) };
                    let w = if target == "w" { v } else { t.constant(c.w.clone()) };
                    let b = if target == "b" { v } else { t.constant(c.b.clone()) };
                    let y = t.conv2d(x, w, Some(b), c.stride, c.pad);
                    project(t, y, c.seed)
                }),
            )
        });
    }
}

fn conv_transpose2d_all_inputs(out: &mut Vec<Case>) {
    for target in ["x", "w", "b"] {
        add(out, format!("conv_transpose2d.{target}"), move |rng| {
            let (n, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let side = dims(rng, 2, 4);
            let x = rand_tensor(rng, &[n, c, side, side]);
            let w = rand_tensor(rng, &[c, o, 3, 3]);
            let b = rand_tensor(rng, &[o]);
            let seed = rng.gen();
            let start = match target {
                "x" => x.clone(),
                "w" => w.clone(),
                _ => b.clone(),
            };
            (
                start,
                Box::new(move |t: &mut Tape<f64>, v: Var| {
                    let xv = if target == "x" { v } else { t.constant(x.clone()) };
                    let wv = if target == "w" { v } else { t.constant(w.clone()) };
                    let bv = if target == "b" { v } else { t.constant(b.clone()) };
                    let y = t.conv_transpose2d(xv, wv, Some(bv), 2, 1, 1);
                    project(t, y, seed)
                }),
            )
        });
    }
}

fn pooling(out: &mut Vec<Case>) {
    add(out, "max_pool2d".to_string(), move |rng| {
        let x = {
            let s = [dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 3, 7), dims(rng, 3, 7)];
            rand_tensor(rng, &s)
        };
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let y = t.max_pool2d(v, 3, 2, 1);
                project(t, y, seed)
            }),
        )
    });
    add(out, "avg_pool2d".to_string(), move |rng| {
        let s = 2 * dims(rng, 1, 3);
        let x = {
            let s = [dims(rng, 1, 2), dims(rng, 1, 3), s, s];
            rand_tensor(rng, &s)
        };
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let y = t.avg_pool2d(v, 2);
                project(t, y, seed)
            }),
        )
    });
    add(out, "global_avg_pool".to_string(), move |rng| {
        let x = {
            let s = [dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 5)];
            rand_tensor(rng, &s)
        };
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let y = t.global_avg_pool(v);
                project(t, y, seed)
            }),
        )
    });
}

fn normalization_and_affine(out: &mut Vec<Case>) {
    add(out, "normalize_channels".to_string(), move |rng| {
        let x = {
            let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 2, 4)];
            rand_tensor(rng, &s)
        };
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let (y, _) = t.normalize_channels(v, 1e-5);
                project(t, y, seed)
            }),
        )
    });
    for target in ["x", "scale", "shift"] {
        add(out, format!("channel_affine.{target}"), move |rng| {
            let c = dims(rng, 1, 4);
            let x = {
                let s = [dims(rng, 1, 3), c, dims(rng, 1, 3), dims(rng, 1, 3)];
                rand_tensor(rng, &s)
            };
            let s = rand_tensor(rng, &[c]);
            let b = rand_tensor(rng, &[c]);
            let seed = rng.gen();
            let start = match target {
                "x" => x.clone(),
                "scale" => s.clone(),
                _ => b.clone(),
            };
            (
                start,
                Box::new(move |t: &mut Tape<f64>, v: Var| {
                    let xv = if target == "x" { v } else { t.constant(x.clone()) };
                    let sv = if target == "scale" { v } else { t.constant(s.clone()) };
                    let bv = if target == "shift" { v } else { t.constant(b.clone()) };
                    let y = t.channel_affine(xv, sv, bv);
                    project(t, y, seed)
                }),
            )
        });
    }
}

fn structural_ops(out: &mut Vec<Case>) {
    add(out, "reshape".to_string(), move |rng| {
        let x = {
            let s = [2, dims(rng, 1, 3), 3];
            rand_tensor(rng, &s)
        };
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let n = t.value(v).numel();
                let y = t.reshape(v, &[n]);
                let y = t.tanh(y);
                project(t, y, seed)
            }),
        )
    });
    add(out, "concat".to_string(), move |rng| {
        let n = dims(rng, 1, 3);
        let a = {
            let s = [n, dims(rng, 1, 3), 2, 2];
            rand_tensor(rng, &s)
        };
        let other = {
            let s = [n, dims(rng, 1, 3), 2, 2];
            rand_tensor(rng, &s)
        };
        let seed = rng.gen();
        (
            a,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let o = t.constant(other.clone());
                let y = t.concat(o, v);
                let y = t.square(y);
                project(t, y, seed)
            }),
        )
    });
    add(out, "slice_rows".to_string(), move |rng| {
        let rows = dims(rng, 2, 6);
        let x = {
            let s = [rows, dims(rng, 1, 4)];
            rand_tensor(rng, &s)
        };
        let start = rng.gen_range(0..rows);
        let len = rng.gen_range(1..=rows - start);
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let y = t.slice_rows(v, start, len);
                project(t, y, seed)
            }),
        )
    });
}

fn softmax_cross_entropy(out: &mut Vec<Case>) {
    add(out, "softmax_cross_entropy".to_string(), move |rng| {
        let n = dims(rng, 1, 6);
        let x = rand_tensor(rng, &[n, 4]).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| t.softmax_cross_entropy(v, &labels)),
        )
    });
}

fn bilinear_resize(out: &mut Vec<Case>) {
    add(out, "bilinear_resize".to_string(), move |rng| {
        let x = {
            let s = [1, dims(rng, 1, 2), dims(rng, 1, 5), dims(rng, 1, 5)];
            rand_tensor(rng, &s)
        };
        let (oh, ow) = (dims(rng, 1, 9), dims(rng, 1, 9));
        let seed = rng.gen();
        (
            x,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let y = t.bilinear_resize(v, oh, ow);
                project(t, y, seed)
            }),
        )
    });
}

fn conv_gap_linear_composite(out: &mut Vec<Case>) {
    add(out, "conv+gap+linear".to_string(), move |rng| {
        let x = rand_tensor(rng, &[2, 3, 6, 6]);
        let w = rand_tensor(rng, &[4, 3, 3, 3]);
        let head = rand_tensor(rng, &[4, 4]);
        let labels = vec![rng.gen_range(0..4), rng.gen_range(0..4)];
        (
            w,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let x = t.constant(x.clone());
                let h = t.conv2d(x, v, None, 1, 1);
                let h = t.relu(h);
                let g = t.global_avg_pool(h);
                let head = t.constant(head.clone());
                let logits = t.matmul(g, head);
                t.softmax_cross_entropy(logits, &labels)
            }),
        )
    });
}

fn random_three_layer_net(out: &mut Vec<Case>) {
    add(out, "three-layer net".to_string(), move |rng| {
        let x = rand_tensor(rng, &[3, 5]);
        let w1 = rand_tensor(rng, &[5, 6]);
        let w2 = rand_tensor(rng, &[6, 6]);
        let w3 = rand_tensor(rng, &[6, 4]);
        let labels = vec![0, 2, 3];
        (
            w1,
            Box::new(move |t: &mut Tape<f64>, v: Var| {
                let x = t.constant(x.clone());
                let h = t.matmul(x, v);
                let h = t.tanh(h);
                let w2 = t.constant(w2.clone());
                let h = t.matmul(h, w2);
                let h = t.relu(h);
                let w3 = t.constant(w3.clone());
                let o = t.matmul(h, w3);
                t.softmax_cross_entropy(o, &labels)
            }),
        )
    });
}
