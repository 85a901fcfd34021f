//! Gradient-check cases shared by the gradient suite and the acceptance run.
//! Every case maps a seed to the worst relative error of one 64-bit check.

#![allow(dead_code)]

use caetf::autodiff::{Tape, Var};
use caetf::cae::{Cae, CaeConfig};
use caetf::data::SequenceFeatureMap;
use caetf::gradcheck::{grad_check, grad_check_sampled, DEFAULT_EPS};
use caetf::layers::{
    batch_norm_eval, batch_norm_train, conv2d, dense, dropout, global_avg_pool, global_max_pool, layer_norm, maxpool2d,
    upsample_nearest, Padding,
};
use caetf::losses::{cross_entropy_logits, mse_loss, smooth_labels};
use caetf::params::ParamStore;
use caetf::rng::{normal_tensor, stream, Rng};
use caetf::transformer::{
    attention_weights, encoder_block, multi_head_attention, scaled_dot_product_attention, AttentionVars, BlockVars,
    Classifier, DropoutCtx, ModelKind, Pooling, TransformerConfig,
};
use caetf::{Result, Tensor};
use rand::Rng as _;

#[derive(Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

type T = Tensor<f64>;

fn randn(rng: &mut Rng, shape: &[usize]) -> T {
    normal_tensor(shape, 1.0, rng)
}

/// Contracts `y` with fixed random weights so every output coordinate
/// reaches the scalar with a distinct coefficient.
fn reduce<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = normal_tensor(&y.shape(), 1.0, &mut stream(99, "grad.reduce"));
    Ok(y.mul(tape.constant(w))?.sum())
}

fn check<F>(f: F, inputs: &[T]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check(f, inputs, DEFAULT_EPS)
}

/// A mask over `len` rows with a random valid prefix length.
fn prefix_mask(rng: &mut Rng, len: usize) -> Vec<bool> {
    let valid = rng.random_range(1..=len);
    (0..len).map(|i| i < valid).collect()
}

macro_rules! case {
    ($name:literal, |$rng:ident| $body:expr) => {
        GradCase {
            name: $name,
            run: |seed| {
                let mut $rng = stream(seed, $name);
                $body
            },
        }
    };
}

fn elementwise() -> Vec<GradCase> {
    vec![
        case!("add", |r| check(|t, v| reduce(t, v[0].add(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])])),
        case!("sub", |r| check(|t, v| reduce(t, v[0].sub(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])])),
        case!("mul", |r| check(|t, v| reduce(t, v[0].mul(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])])),
        case!("scale", |r| check(|t, v| reduce(t, v[0].scale(-0.7)), &[randn(&mut r, &[2, 5])])),
        case!("add_row", |r| check(|t, v| reduce(t, v[0].add_row(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[4])])),
        case!("mul_row", |r| check(|t, v| reduce(t, v[0].mul_row(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[4])])),
        case!("relu", |r| check(|t, v| reduce(t, v[0].relu()), &[randn(&mut r, &[4, 5])])),
        case!("gelu", |r| check(|t, v| reduce(t, v[0].gelu()), &[randn(&mut r, &[4, 5])])),
        case!("sigmoid", |r| check(|t, v| reduce(t, v[0].sigmoid()), &[randn(&mut r, &[4, 5])])),
        case!("sum", |r| check(|_, v| Ok(v[0].sum()), &[randn(&mut r, &[3, 4])])),
        case!("mean", |r| check(|_, v| Ok(v[0].mean()), &[randn(&mut r, &[3, 4])])),
    ]
}

fn structural() -> Vec<GradCase> {
    vec![
        case!("matmul", |r| check(|t, v| reduce(t, v[0].matmul(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2])])),
        case!("matmul_t", |r| check(|t, v| reduce(t, v[0].matmul_t(v[1])?), &[randn(&mut r, &[3, 4]), randn(&mut r, &[2, 4])])),
        case!("transpose", |r| check(|t, v| reduce(t, v[0].transpose()?), &[randn(&mut r, &[3, 4])])),
        case!("reshape", |r| check(|t, v| reduce(t, v[0].reshape([2, 6])?), &[randn(&mut r, &[3, 4])])),
        case!("softmax", |r| {
            let axis = r.random_range(0..2);
            check(move |t, v| reduce(t, v[0].softmax(axis)?), &[randn(&mut r, &[3, 4])])
        }),
        case!("log_softmax", |r| {
            let axis = r.random_range(0..2);
            check(move |t, v| reduce(t, v[0].log_softmax(axis)?), &[randn(&mut r, &[3, 4])])
        }),
        case!("slice_rows", |r| check(|t, v| reduce(t, v[0].slice_rows(1, 2)?), &[randn(&mut r, &[4, 3])])),
        case!("concat_rows", |r| check(
            |t, v| reduce(t, Var::concat_rows(&[v[0], v[1]])?),
            &[randn(&mut r, &[2, 3]), randn(&mut r, &[1, 3])]
        )),
        case!("concat_cols", |r| check(
            |t, v| reduce(t, Var::concat_cols(&[v[0], v[1]])?),
            &[randn(&mut r, &[3, 2]), randn(&mut r, &[3, 1])]
        )),
    ]
}

fn layers() -> Vec<GradCase> {
    vec![
        case!("conv2d same", |r| check(
            |t, v| reduce(t, conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?),
            &[randn(&mut r, &[2, 5, 5]), randn(&mut r, &[3, 2, 3, 3]), randn(&mut r, &[3])]
        )),
        case!("conv2d valid strided", |r| check(
            |t, v| reduce(t, conv2d(v[0], v[1], None, 2, Padding::Valid)?),
            &[randn(&mut r, &[2, 7, 7]), randn(&mut r, &[2, 2, 3, 3])]
        )),
        case!("maxpool2d", |r| check(|t, v| reduce(t, maxpool2d(v[0], 2)?), &[randn(&mut r, &[2, 4, 6])])),
        case!("upsample_nearest", |r| check(|t, v| reduce(t, upsample_nearest(v[0], 2)?), &[randn(&mut r, &[2, 3, 3])])),
        case!("dense", |r| check(
            |t, v| reduce(t, dense(v[0], v[1], v[2])?),
            &[randn(&mut r, &[3, 4]), randn(&mut r, &[5, 4]), randn(&mut r, &[5])]
        )),
        case!("layer_norm", |r| check(
            |t, v| reduce(t, layer_norm(v[0], v[1], v[2], 1e-5)?),
            &[randn(&mut r, &[3, 5]), randn(&mut r, &[5]), randn(&mut r, &[5])]
        )),
        case!("dropout", |r| {
            let mask_seed = r.random();
            check(
                move |t, v| reduce(t, dropout(v[0], 0.3, true, &mut stream(mask_seed, "mask"))?),
                &[randn(&mut r, &[4, 5])],
            )
        }),
        case!("global_max_pool", |r| {
            let mask = prefix_mask(&mut r, 5);
            check(move |t, v| reduce(t, global_max_pool(v[0], &mask)?), &[randn(&mut r, &[5, 3])])
        }),
        case!("global_avg_pool", |r| {
            let mask = prefix_mask(&mut r, 5);
            check(move |t, v| reduce(t, global_avg_pool(v[0], &mask)?), &[randn(&mut r, &[5, 3])])
        }),
        case!("batch_norm_train", |r| check(
            |t, v| reduce(t, batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
            &[randn(&mut r, &[4, 3]), randn(&mut r, &[3]), randn(&mut r, &[3])]
        )),
        case!("batch_norm_eval", |r| {
            let mean = randn(&mut r, &[3]);
            let var = randn(&mut r, &[3]).map(|x| x * x + 0.1);
            check(
                move |t, v| reduce(t, batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?),
                &[randn(&mut r, &[4, 3]), randn(&mut r, &[3]), randn(&mut r, &[3])],
            )
        }),
        case!("mse_loss", |r| check(|_, v| mse_loss(v[0], v[1]), &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])])),
        case!("cross_entropy_logits", |r| {
            let rows: Vec<f64> = (0..3).flat_map(|_| {
                let t = smooth_labels::<f64>(r.random_range(0..2), 0.05, 2).unwrap();
                t.into_vec()
            })
            .collect();
            let target = Tensor::new([3, 2], rows)?;
            check(move |_, v| cross_entropy_logits(v[0], &target), &[randn(&mut r, &[3, 2])])
        }),
    ]
}

fn attention() -> Vec<GradCase> {
    vec![
        case!("attention_weights", |r| {
            let mask = prefix_mask(&mut r, 4);
            check(
                move |t, v| reduce(t, attention_weights(v[0], v[1], &mask)?),
                &[randn(&mut r, &[3, 5]), randn(&mut r, &[4, 5])],
            )
        }),
        case!("scaled_dot_product_attention", |r| {
            let mask = prefix_mask(&mut r, 4);
            check(
                move |t, v| reduce(t, scaled_dot_product_attention(v[0], v[1], v[2], &mask)?),
                &[randn(&mut r, &[2, 5]), randn(&mut r, &[4, 5]), randn(&mut r, &[4, 3])],
            )
        }),
        case!("multi_head_attention", |r| {
            let mask = prefix_mask(&mut r, 4);
            let mut inputs = vec![randn(&mut r, &[4, 6])];
            for _ in 0..2 {
                inputs.push(randn(&mut r, &[6, 3]));
                inputs.push(randn(&mut r, &[6, 3]));
                inputs.push(randn(&mut r, &[6, 2]));
            }
            inputs.push(randn(&mut r, &[4, 6]));
            check(
                move |t, v| {
                    let vars = AttentionVars {
                        wq: vec![v[1], v[4]],
                        wk: vec![v[2], v[5]],
                        wv: vec![v[3], v[6]],
                        wo: v[7],
                    };
                    reduce(t, multi_head_attention(v[0], &vars, &mask)?)
                },
                &inputs,
            )
        }),
        case!("encoder block", |r| {
            let (l, d, heads, dk, hidden) = (4, 8, 2, 4, 16);
            let mask = prefix_mask(&mut r, l);
            let with_dropout: bool = r.random();
            let drop_seed: u64 = r.random();
            let mut inputs = vec![randn(&mut r, &[l, d]), randn(&mut r, &[d]), randn(&mut r, &[d])];
            for _ in 0..3 * heads {
                inputs.push(randn(&mut r, &[d, dk]));
            }
            for shape in [&[heads * dk, d][..], &[d], &[d], &[hidden, d], &[hidden], &[d, hidden], &[d]] {
                inputs.push(randn(&mut r, shape));
            }
            grad_check(
                move |t, v| {
                    let per = |k: usize| (0..heads).map(|h| v[3 + k * heads + h]).collect::<Vec<_>>();
                    let o = 3 + 3 * heads;
                    let vars = BlockVars {
                        ln1: (v[1], v[2]),
                        attention: AttentionVars {
                            wq: per(0),
                            wk: per(1),
                            wv: per(2),
                            wo: v[o],
                        },
                        ln2: (v[o + 1], v[o + 2]),
                        fc1: (v[o + 3], v[o + 4]),
                        fc2: (v[o + 5], v[o + 6]),
                    };
                    let mut rng = stream(drop_seed, "block.dropout");
                    let mut drop = if with_dropout {
                        DropoutCtx {
                            rate: 0.2,
                            rng: Some(&mut rng),
                        }
                    } else {
                        DropoutCtx::off()
                    };
                    reduce(t, encoder_block(v[0], &vars, &mask, 1e-5, &mut drop)?)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
    ]
}

/// Checks a parameter store by rebinding every tensor to a checked input;
/// `extra` inputs come first and are passed to `loss` as well.
fn check_store<F>(store: &ParamStore<f64>, extra: Vec<T>, per_input: usize, rng: &mut Rng, loss: F) -> Result<f64>
where
    F: for<'t> Fn(&caetf::Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    grad_check_sampled(
        |t, v| {
            let mut bound = store.bind_frozen(t);
            for (i, name) in names.iter().enumerate() {
                bound.rebind(name, v[n_extra + i])?;
            }
            loss(&bound, &v[..n_extra])
        },
        &inputs,
        DEFAULT_EPS,
        per_input,
        rng,
    )
}

pub fn reduced_cae_config() -> CaeConfig {
    CaeConfig {
        input_size: 32,
        channels: vec![2, 4],
        code_dim: 6,
        kernel: 3,
    }
}

pub fn reduced_transformer_config(pooling: Pooling) -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        d_k: 4,
        d_v: 4,
        heads: 2,
        blocks: 2,
        mlp_hidden: 16,
        max_len: 5,
        head_hidden: 6,
        pooling,
        ..TransformerConfig::default()
    }
}

fn random_sequences(rng: &mut Rng, n: usize, slots: usize, d: usize) -> Vec<SequenceFeatureMap<f64>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=slots);
            let rows: Vec<T> = (0..len).map(|_| randn(rng, &[d])).collect();
            SequenceFeatureMap::from_rows(&rows, slots).unwrap()
        })
        .collect()
}

fn smoothed_targets(rng: &mut Rng, n: usize) -> Result<T> {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.extend(smooth_labels::<f64>(rng.random_range(0..2), 0.05, 2)?.into_vec());
    }
    Tensor::new([n, 2], data)
}

fn models() -> Vec<GradCase> {
    vec![
        case!("reduced CAE reconstruction", |r| {
            let cae = Cae::<f64>::build_reduced(reduced_cae_config(), r.random())?;
            let image = Tensor::from_fn([1, 32, 32], |_| r.random::<f64>());
            let mut pick = stream(r.random(), "pick");
            check_store(&cae.params, vec![image], 6, &mut pick, |bound, x| {
                let recon = cae.decode_var(bound, cae.encode_var(bound, x[0])?)?;
                mse_loss(recon, x[0])
            })
        }),
        case!("reduced transformer classifier", |r| {
            let pooling = [Pooling::Gmp, Pooling::Gap, Pooling::Concat][r.random_range(0..3)];
            let cfg = reduced_transformer_config(pooling);
            let model = Classifier::<f64>::build(ModelKind::CaeTransformer, &cfg, r.random())?;
            let seqs = random_sequences(&mut r, 3, cfg.max_len, cfg.d_model);
            let target = smoothed_targets(&mut r, 3)?;
            let drop_seed: u64 = r.random();
            let mut pick = stream(r.random(), "pick");
            check_store(model.params(), vec![], 4, &mut pick, |bound, _| {
                let batch: Vec<_> = seqs.iter().collect();
                let mut rng = stream(drop_seed, "dropout");
                let out = model.forward_batch(bound, &batch, true, Some(&mut rng))?;
                cross_entropy_logits(out.logits, &target)
            })
        }),
        case!("reduced baseline classifier", |r| {
            let kind = [ModelKind::GmpFc, ModelKind::GapFc][r.random_range(0..2)];
            let cfg = reduced_transformer_config(Pooling::Gmp);
            let model = Classifier::<f64>::build(kind, &cfg, r.random())?;
            let seqs = random_sequences(&mut r, 4, cfg.max_len, cfg.d_model);
            let target = smoothed_targets(&mut r, 4)?;
            let mut pick = stream(r.random(), "pick");
            check_store(model.params(), vec![], 6, &mut pick, |bound, _| {
                let batch: Vec<_> = seqs.iter().collect();
                let out = model.forward_batch(bound, &batch, true, None)?;
                cross_entropy_logits(out.logits, &target)
            })
        }),
    ]
}

pub fn all() -> Vec<GradCase> {
    [elementwise(), structural(), layers(), attention(), models()].concat()
}

/// Worst error of `case` over `seeds` seeds, with the seed that produced it.
pub fn worst_over_seeds(case: &GradCase, seeds: u64) -> Result<(f64, u64)> {
    let mut worst = (0.0, 0);
    for seed in 0..seeds {
        let e = (case.run)(seed)?;
        if e > worst.0 {
            worst = (e, seed);
        }
    }
    Ok(worst)
}
