//! Registry of finite-difference gradient checks: every differentiable
//! graph operation, every layer, and the encoder/fusion/head stacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{hinge, EmbeddingConfig, EmbeddingModel};
use crate::error::Result;
use crate::fusion::{
    EncoderConfig, FusionLayer, ImageProjection, TransformerEncoder, VisualEncoder,
};
use crate::heads::{Decoder, PairHead, TagHead};
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, ParamStore, Tensor};

pub const SUITE_TOLERANCE: f64 = 1e-4;

type Runner = fn(&mut ChaCha8Rng, f64) -> Result<GradCheckReport>;

pub struct GradCase {
    pub name: &'static str,
    run: Runner,
}

impl GradCase {
    pub fn run(&self, rng: &mut ChaCha8Rng, tolerance: f64) -> Result<GradCheckReport> {
        (self.run)(rng, tolerance)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub points: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal draws pushed at least 0.1 away from zero, for ops with a kink
/// there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn worse(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let checked = a.checked + b.checked;
    let mut out = if b.max_rel_err > a.max_rel_err || b.max_rel_err.is_nan() {
        b
    } else {
        a
    };
    out.checked = checked;
    out
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        dim: 4,
        heads: 2,
        fusion_heads: 2,
        layers: 2,
        ff_dim: 6,
        max_len: 6,
    }
}

const TINY_VOCAB: usize = 7;
const TINY_IMAGE: usize = 3;

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..TINY_VOCAB)).collect()
}

fn case(name: &'static str, run: Runner) -> GradCase {
    GradCase { name, run }
}

/// Every registered check, in a fixed order.
pub fn registry() -> Vec<GradCase> {
    vec![
        case("matmul", |r, t| {
            grad_check(
                |g, v| g.matmul(v[0], v[1]),
                &[randn(r, &[3, 4]), randn(r, &[4, 2])],
                t,
            )
        }),
        case("add_broadcast", |r, t| {
            grad_check(
                |g, v| g.add(v[0], v[1]),
                &[randn(r, &[3, 4]), randn(r, &[4])],
                t,
            )
        }),
        case("sub", |r, t| {
            grad_check(
                |g, v| g.sub(v[0], v[1]),
                &[randn(r, &[2, 3]), randn(r, &[2, 3])],
                t,
            )
        }),
        case("mul_broadcast", |r, t| {
            grad_check(
                |g, v| g.mul(v[0], v[1]),
                &[randn(r, &[2, 3, 4]), randn(r, &[3, 4])],
                t,
            )
        }),
        case("sigmoid", |r, t| {
            grad_check(|g, v| Ok(g.sigmoid(v[0])), &[randn(r, &[3, 3])], t)
        }),
        case("tanh", |r, t| {
            grad_check(|g, v| Ok(g.tanh(v[0])), &[randn(r, &[3, 3])], t)
        }),
        case("relu", |r, t| {
            grad_check(|g, v| Ok(g.relu(v[0])), &[off_zero(r, &[3, 3])], t)
        }),
        case("abs", |r, t| {
            grad_check(|g, v| Ok(g.abs(v[0])), &[off_zero(r, &[3, 3])], t)
        }),
        case("scale", |r, t| {
            grad_check(|g, v| Ok(g.scale(v[0], -1.7)), &[randn(r, &[2, 3])], t)
        }),
        case("add_scalar", |r, t| {
            grad_check(
                |g, v| {
                    let a = g.add_scalar(v[0], 0.3);
                    g.mul(a, a)
                },
                &[randn(r, &[2, 3])],
                t,
            )
        }),
        case("one_minus", |r, t| {
            grad_check(
                |g, v| {
                    let a = g.one_minus(v[0]);
                    g.mul(a, v[0])
                },
                &[randn(r, &[2, 3])],
                t,
            )
        }),
        case("sum", |r, t| {
            grad_check(
                |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(g.sum(sq))
                },
                &[randn(r, &[3, 2])],
                t,
            )
        }),
        case("mean", |r, t| {
            grad_check(
                |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(g.mean(sq))
                },
                &[randn(r, &[3, 2])],
                t,
            )
        }),
        case("sum_last", |r, t| {
            grad_check(|g, v| Ok(g.sum_last(v[0])), &[randn(r, &[3, 4])], t)
        }),
        case("mean_rows", |r, t| {
            grad_check(|g, v| g.mean_rows(v[0]), &[randn(r, &[3, 4])], t)
        }),
        case("concat_last", |r, t| {
            grad_check(
                |g, v| g.concat_last(&[v[0], v[1]]),
                &[randn(r, &[2, 3]), randn(r, &[2, 2])],
                t,
            )
        }),
        case("concat_rows", |r, t| {
            grad_check(
                |g, v| g.concat_rows(&[v[0], v[1]]),
                &[randn(r, &[2, 3]), randn(r, &[1, 3])],
                t,
            )
        }),
        case("transpose", |r, t| {
            grad_check(|g, v| g.transpose(v[0]), &[randn(r, &[3, 2])], t)
        }),
        case("gather", |r, t| {
            grad_check(
                |g, v| g.gather(v[0], &[4, 0, 4, 2]),
                &[randn(r, &[5, 3])],
                t,
            )
        }),
        case("slice_cols", |r, t| {
            grad_check(|g, v| g.slice_cols(v[0], 1, 4), &[randn(r, &[3, 5])], t)
        }),
        case("softmax", |r, t| {
            grad_check(|g, v| g.softmax(v[0]), &[randn(r, &[3, 4])], t)
        }),
        case("masked_softmax", |r, t| {
            let mask = vec![
                true, false, true, true, false, false, false, false, true, true, false, true,
            ];
            grad_check(
                |g, v| g.masked_softmax(v[0], Some(mask.clone())),
                &[randn(r, &[3, 4])],
                t,
            )
        }),
        case("layer_norm", |r, t| {
            grad_check(
                |g, v| g.layer_norm(v[0], v[1], v[2], LayerNorm::EPS),
                &[randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])],
                t,
            )
        }),
        case("l2_normalize_rows", |r, t| {
            grad_check(|g, v| g.l2_normalize_rows(v[0]), &[off_zero(r, &[3, 4])], t)
        }),
        case("sru_scan", |r, t| {
            grad_check(
                |g, v| g.sru_scan(v[0], v[1]),
                &[uniform(r, &[4, 3], 0.1, 0.9), randn(r, &[4, 3])],
                t,
            )
        }),
        case("cross_entropy", |r, t| {
            grad_check(
                |g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)]),
                &[randn(r, &[4, 5])],
                t,
            )
        }),
        case("triplet_hinge", |r, t| {
            grad_check(
                |g, v| {
                    let x = g.l2_normalize_rows(v[0])?;
                    let y = g.l2_normalize_rows(v[1])?;
                    hinge(g, x, y, y, &[0, 1, 2], &[1, 2, 0], 1.5)
                },
                &[off_zero(r, &[3, 4]), off_zero(r, &[3, 4])],
                t,
            )
        }),
        case("linear", |r, t| {
            let mut s = ParamStore::new();
            let lin = Linear::new(&mut s, "lin", 3, 2, true, r);
            let x = randn(r, &[4, 3]);
            grad_check_params(
                &s,
                |g, s| {
                    let x = g.constant(x.clone());
                    lin.forward(g, s, x)
                },
                t,
            )
        }),
        case("feed_forward", |r, t| {
            let mut s = ParamStore::new();
            let ff = FeedForward::new(&mut s, "ff", 3, 5, r);
            let x = randn(r, &[2, 3]);
            grad_check_params(
                &s,
                |g, s| {
                    let x = g.constant(x.clone());
                    ff.forward(g, s, x)
                },
                t,
            )
        }),
        case("multi_head_attention", |r, t| {
            let mut s = ParamStore::new();
            let att = MultiHeadAttention::new(&mut s, "att", 4, 2, r)?;
            let x = randn(r, &[3, 4]);
            let mask = causal_mask(3);
            let by_params = grad_check_params(
                &s,
                |g, s| {
                    let x = g.constant(x.clone());
                    Ok(att.forward(g, s, x, x, Some(&mask))?.output)
                },
                t,
            )?;
            let by_inputs = grad_check(
                |g, v| Ok(att.forward(g, &s, v[0], v[1], None)?.output),
                &[randn(r, &[3, 4]), randn(r, &[2, 4])],
                t,
            )?;
            Ok(worse(by_params, by_inputs))
        }),
        case("sru_text_path", |r, t| {
            let cfg = EmbeddingConfig {
                text_dim: 4,
                shared_dim: 3,
                sru_layers: 2,
                max_len: 6,
                ..EmbeddingConfig::default()
            };
            let model = EmbeddingModel::new(cfg, TINY_VOCAB, TINY_IMAGE, r)?;
            let (a, b) = (tokens(r, 4), tokens(r, 2));
            grad_check_params(
                &model.store,
                |g, s| {
                    let m = EmbeddingModel {
                        store: s.clone(),
                        ..model.clone()
                    };
                    m.text_embeddings(g, &[&a, &b])
                },
                t,
            )
        }),
        case("embedding_triplet_step", |r, t| {
            let cfg = EmbeddingConfig {
                text_dim: 4,
                shared_dim: 3,
                max_len: 6,
                ..EmbeddingConfig::default()
            };
            let model = EmbeddingModel::new(cfg, TINY_VOCAB, TINY_IMAGE, r)?;
            let texts = [tokens(r, 3), tokens(r, 2), tokens(r, 4)];
            let pooled = randn(r, &[3, TINY_IMAGE]);
            grad_check_params(
                &model.store,
                |g, s| {
                    let m = EmbeddingModel {
                        store: s.clone(),
                        ..model.clone()
                    };
                    let refs: Vec<&[usize]> = texts.iter().map(Vec::as_slice).collect();
                    let y = m.text_embeddings(g, &refs)?;
                    let px = g.constant(pooled.clone());
                    let x = m.image_embeddings(g, px)?;
                    hinge(g, x, y, y, &[0, 1, 2], &[2, 0, 1], 2.5)
                },
                t,
            )
        }),
        case("transformer_encoder", |r, t| {
            let mut s = ParamStore::new();
            let enc = TransformerEncoder::new(&mut s, "enc", TINY_VOCAB, &tiny_encoder(), r)?;
            let toks = tokens(r, 4);
            let mask = [true, true, true, false];
            grad_check_params(
                &s,
                |g, s| Ok(enc.forward(g, s, &toks, Some(&mask))?.hidden),
                t,
            )
        }),
        case("project_images", |r, t| {
            let mut s = ParamStore::new();
            let proj = ImageProjection::new(&mut s, "img", TINY_IMAGE, 4, r);
            // keep pre-activations clear of the relu kink
            s.set(
                proj.linear.bias.unwrap(),
                off_zero(r, &[4]).map(|v| 3.0 * v),
            )?;
            let e = uniform(r, &[3, TINY_IMAGE], -0.3, 0.3);
            grad_check_params(
                &s,
                |g, s| {
                    let e = g.constant(e.clone());
                    proj.forward(g, s, e)
                },
                t,
            )
        }),
        case("attend_fuse", |r, t| {
            let mut s = ParamStore::new();
            let fusion = FusionLayer::new(&mut s, "fusion", 4, 2, r)?;
            let (h, m) = (randn(r, &[3, 4]), randn(r, &[2, 4]));
            let by_params = grad_check_params(
                &s,
                |g, s| {
                    let (h, m) = (g.constant(h.clone()), g.constant(m.clone()));
                    Ok(fusion.attend(g, s, h, Some(m))?.0)
                },
                t,
            )?;
            let by_inputs = grad_check(
                |g, v| Ok(fusion.attend(g, &s, v[0], Some(v[1]))?.0),
                &[randn(r, &[3, 4]), randn(r, &[2, 4])],
                t,
            )?;
            Ok(worse(by_params, by_inputs))
        }),
        case("residual_norm_fuse", |r, t| {
            let mut s = ParamStore::new();
            let fusion = FusionLayer::new(&mut s, "fusion", 4, 2, r)?;
            s.set(fusion.mix, randn(r, &[4, 4]))?;
            s.set(fusion.mix_bias, randn(r, &[4]))?;
            let (h, hp) = (randn(r, &[3, 4]), randn(r, &[3, 4]));
            let by_params = grad_check_params(
                &s,
                |g, s| {
                    let (h, hp) = (g.constant(h.clone()), g.constant(hp.clone()));
                    fusion.fuse(g, s, h, hp)
                },
                t,
            )?;
            let by_inputs = grad_check(
                |g, v| fusion.fuse(g, &s, v[0], v[1]),
                &[h.clone(), hp.clone()],
                t,
            )?;
            Ok(worse(by_params, by_inputs))
        }),
        case("tag_head", |r, t| {
            let mut s = ParamStore::new();
            let head = TagHead::new(&mut s, "tag", 4, 3, r)?;
            let h = randn(r, &[3, 4]);
            grad_check_params(
                &s,
                |g, s| {
                    let h = g.constant(h.clone());
                    head.loss(g, s, h, &[Some(2), None, Some(0)])
                },
                t,
            )
        }),
        case("pair_head", |r, t| {
            let mut s = ParamStore::new();
            let head = PairHead::new(&mut s, "pair", 4, 3, r)?;
            let by_params = {
                let (p, q) = (randn(r, &[3, 4]), randn(r, &[2, 4]));
                grad_check_params(
                    &s,
                    |g, s| {
                        let (p, q) = (g.constant(p.clone()), g.constant(q.clone()));
                        head.logits(g, s, p, q)
                    },
                    t,
                )?
            };
            // means are kept apart so |h_p - h_h| stays differentiable
            let p = randn(r, &[3, 4]);
            let q = p.map(|v| -v - 0.5);
            let by_inputs = grad_check(|g, v| head.logits(g, &s, v[0], v[1]), &[p, q], t)?;
            Ok(worse(by_params, by_inputs))
        }),
        case("decoder", |r, t| {
            let mut s = ParamStore::new();
            let dec = Decoder::new(&mut s, "dec", 4, 2, 6, 6, 5, (0, 1), r)?;
            let memory = randn(r, &[3, 4]);
            let target: Vec<usize> = (0..3).map(|_| r.random_range(2..6)).collect();
            grad_check_params(
                &s,
                |g, s| {
                    let m = g.constant(memory.clone());
                    dec.loss(g, s, m, &target)
                },
                t,
            )
        }),
        case("stack_tagging", |r, t| {
            let mut s = ParamStore::new();
            let enc = VisualEncoder::new(&mut s, TINY_VOCAB, TINY_IMAGE, &tiny_encoder(), r)?;
            let head = TagHead::new(&mut s, "tag", 4, 3, r)?;
            let toks = tokens(r, 4);
            let images = randn(r, &[2, TINY_IMAGE]);
            let gold: Vec<Option<usize>> = (0..4).map(|_| Some(r.random_range(0..3))).collect();
            grad_check_params(
                &s,
                |g, s| {
                    let fused = enc.forward(g, s, &toks, Some(&images))?.fused;
                    head.loss(g, s, fused, &gold)
                },
                t,
            )
        }),
        case("stack_pair", |r, t| {
            let mut s = ParamStore::new();
            let enc = VisualEncoder::new(&mut s, TINY_VOCAB, TINY_IMAGE, &tiny_encoder(), r)?;
            let head = PairHead::new(&mut s, "pair", 4, 3, r)?;
            let (a, b) = (tokens(r, 3), tokens(r, 4));
            let (ia, ib) = (randn(r, &[2, TINY_IMAGE]), randn(r, &[3, TINY_IMAGE]));
            grad_check_params(
                &s,
                |g, s| {
                    let p = enc.forward(g, s, &a, Some(&ia))?.fused;
                    let h = enc.forward(g, s, &b, Some(&ib))?.fused;
                    let logits = head.logits(g, s, p, h)?;
                    g.cross_entropy(logits, &[Some(1)])
                },
                t,
            )
        }),
        case("stack_decoder", |r, t| {
            let mut s = ParamStore::new();
            let enc = VisualEncoder::new(&mut s, TINY_VOCAB, TINY_IMAGE, &tiny_encoder(), r)?;
            let dec = Decoder::new(&mut s, "dec", 4, 2, 6, 6, 5, (0, 1), r)?;
            let toks = tokens(r, 3);
            let images = randn(r, &[2, TINY_IMAGE]);
            let target: Vec<usize> = (0..3).map(|_| r.random_range(2..6)).collect();
            grad_check_params(
                &s,
                |g, s| {
                    let fused = enc.forward(g, s, &toks, Some(&images))?.fused;
                    dec.loss(g, s, fused, &target)
                },
                t,
            )
        }),
    ]
}

/// Runs every case at `points` random points (one seeded stream for the
/// whole suite) and keeps the worst error per case.
pub fn run_suite(points: usize, seed: u64, tolerance: f64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    registry()
        .iter()
        .map(|c| {
            let mut rep = CaseReport {
                name: c.name,
                points,
                checked: 0,
                max_rel_err: 0.0,
                passed: true,
            };
            for _ in 0..points {
                let r = c.run(&mut rng, tolerance)?;
                rep.checked += r.checked;
                if r.max_rel_err > rep.max_rel_err || r.max_rel_err.is_nan() {
                    rep.max_rel_err = r.max_rel_err;
                }
            }
            rep.passed = rep.max_rel_err < tolerance;
            Ok(rep)
        })
        .collect()
}
