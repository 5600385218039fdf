//! One randomized gradient check per primitive and distillation loss. Each
//! case draws its shapes and values from the seed and returns the
//! norm-wise relative error between backprop and central differences.

use cpd_core::distill::{
    batch_p2p, distill_loss, kd_cirkd, kd_cwd, kd_kl, memory_relation, CwdAxis, KdConfig, KdMethod, MemoryQueue,
};
use cpd_core::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, project, randn, randn_away_from_zero, rng};

const H: f64 = 1e-6;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn shape(r: &mut ChaCha8Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = r.random_range(min_rank..=max_rank);
    (0..rank).map(|_| r.random_range(1..=4)).collect()
}

fn unary(seed: u64, min_rank: usize, f: fn(&mut Tape, Var, &mut ChaCha8Rng) -> Var) -> f64 {
    let mut r = rng(seed);
    let x = randn(&shape(&mut r, min_rank, 4), &mut r);
    let param_seed = r.random();
    grad_check(&[x], H, |t, v| {
        let y = f(t, v[0], &mut rng(param_seed));
        project(t, y, seed)
    })
}

fn binary_same(seed: u64, f: fn(&mut Tape, Var, Var) -> Var) -> f64 {
    let mut r = rng(seed);
    let s = shape(&mut r, 1, 4);
    let (a, b) = (randn(&s, &mut r), randn(&s, &mut r));
    grad_check(&[a, b], H, |t, v| {
        let y = f(t, v[0], v[1]);
        project(t, y, seed)
    })
}

fn image(r: &mut ChaCha8Rng, mult: usize) -> Vec<usize> {
    vec![r.random_range(1..=2), r.random_range(1..=3), mult * r.random_range(1..=3), mult * r.random_range(1..=3)]
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let batch: Vec<usize> = (0..r.random_range(0..=2)).map(|_| r.random_range(1..=3)).collect();
    let (n, k, m) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
    let trans = r.random_bool(0.5);
    let shared = r.random_bool(0.3);
    let mut sa = batch.clone();
    sa.extend([n, k]);
    let mut sb = if shared { Vec::new() } else { batch };
    sb.extend(if trans { [m, k] } else { [k, m] });
    let (a, b) = (randn(&sa, &mut r), randn(&sb, &mut r));
    grad_check(&[a, b], H, |t, v| {
        let y = t.matmul(v[0], v[1], trans).unwrap();
        project(t, y, seed)
    })
}

fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let g_choice = r.random_range(0..3);
    let (groups, cin, cout) = match g_choice {
        0 => (1, r.random_range(1..=3), r.random_range(1..=3)),
        1 => (2, 2 * r.random_range(1..=2), 2 * r.random_range(1..=2)),
        _ => {
            let c = r.random_range(2..=4);
            (c, c, c)
        }
    };
    let k = r.random_range(1..=3);
    let (stride, padding) = (r.random_range(1..=2), r.random_range(0..=1));
    let (h, w) = (k + r.random_range(0..=3), k + r.random_range(0..=3));
    let x = randn(&[r.random_range(1..=2), cin, h, w], &mut r);
    let wt = randn(&[cout, cin / groups, k, k], &mut r);
    grad_check(&[x, wt], H, |t, v| {
        let y = t.conv2d(v[0], v[1], stride, padding, groups).unwrap();
        project(t, y, seed)
    })
}

fn channel_op(seed: u64, mul: bool) -> f64 {
    let mut r = rng(seed);
    let s = shape(&mut r, 1, 4);
    let axis = r.random_range(0..s.len());
    let (x, vec) = (randn(&s, &mut r), randn(&[s[axis]], &mut r));
    grad_check(&[x, vec], H, |t, v| {
        let y = if mul { t.mul_channel(v[0], v[1], axis) } else { t.add_channel(v[0], v[1], axis) }.unwrap();
        project(t, y, seed)
    })
}

fn softmax(seed: u64) -> f64 {
    unary(seed, 1, |t, x, r| {
        let axis = r.random_range(0..t.value(x).rank());
        let temp = r.random_range(0.5..3.0);
        t.softmax(x, axis, temp).unwrap()
    })
}

fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape(&mut r, 2, 4);
    let positions = s.iter().product::<usize>() / s[1];
    let labels: Vec<usize> = (0..positions).map(|_| r.random_range(0..s[1])).collect();
    grad_check(&[randn(&s, &mut r)], H, |t, v| t.cross_entropy(v[0], &labels, 1).unwrap())
}

fn kl_divergence(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape(&mut r, 1, 4);
    let axis = r.random_range(0..s.len());
    let temp = r.random_range(0.5..4.0);
    let (a, b) = (randn(&s, &mut r), randn(&s, &mut r));
    grad_check(&[a, b], H, |t, v| t.kl_divergence(v[0], v[1], axis, temp).unwrap())
}

fn avg_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = r.random_range(1..=3);
    let x = randn(&image(&mut r, k), &mut r);
    grad_check(&[x], H, |t, v| {
        let y = t.avg_pool2d(v[0], k).unwrap();
        project(t, y, seed)
    })
}

fn global_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(&image(&mut r, 1), &mut r);
    grad_check(&[x], H, |t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        project(t, y, seed)
    })
}

fn upsample(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = r.random_range(1..=3);
    let x = randn(&image(&mut r, 1), &mut r);
    grad_check(&[x], H, |t, v| {
        let y = t.upsample2d(v[0], k).unwrap();
        project(t, y, seed)
    })
}

fn reshape(seed: u64) -> f64 {
    unary(seed, 1, |t, x, _| {
        let mut s = t.value(x).shape().to_vec();
        s.reverse();
        t.reshape(x, &s).unwrap()
    })
}

fn permute(seed: u64) -> f64 {
    unary(seed, 1, |t, x, r| {
        let mut perm: Vec<usize> = (0..t.value(x).rank()).collect();
        perm.shuffle(r);
        t.permute(x, &perm).unwrap()
    })
}

fn concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape(&mut r, 1, 4);
    let axis = r.random_range(0..s.len());
    let parts: Vec<Tensor> = (0..r.random_range(1..=3))
        .map(|_| {
            let mut p = s.clone();
            p[axis] = r.random_range(1..=3);
            randn(&p, &mut r)
        })
        .collect();
    grad_check(&parts, H, |t, v| {
        let y = t.concat(v, axis).unwrap();
        project(t, y, seed)
    })
}

fn index_select(seed: u64) -> f64 {
    unary(seed, 1, |t, x, r| {
        let n = t.value(x).shape()[0];
        let rows: Vec<usize> = (0..r.random_range(1..=5)).map(|_| r.random_range(0..n)).collect();
        t.index_select(x, &rows).unwrap()
    })
}

fn kd_kl_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = shape(&mut r, 2, 4);
    let axis = r.random_range(0..s.len());
    let temp = r.random_range(0.5..4.0);
    let teacher = randn(&s, &mut r);
    grad_check(&[randn(&s, &mut r)], H, |t, v| kd_kl(t, v[0], &teacher, axis, temp).unwrap())
}

fn kd_cwd_case(seed: u64, axis: CwdAxis) -> f64 {
    let mut r = rng(seed);
    let s = image(&mut r, 1);
    let temp = r.random_range(0.5..4.0);
    let teacher = randn(&s, &mut r);
    grad_check(&[randn(&s, &mut r)], H, |t, v| kd_cwd(t, v[0], &teacher, temp, axis).unwrap())
}

fn batch_p2p_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (images, per, d) = (r.random_range(2..=3), r.random_range(1..=3), r.random_range(2..=4));
    let teacher = randn(&[images * per, d], &mut r);
    let tau = r.random_range(0.2..1.0);
    grad_check(&[randn(&[images * per, d], &mut r)], H, |t, v| batch_p2p(t, v[0], &teacher, images, tau).unwrap())
}

fn memory_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, m, d) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(2..=4));
    let teacher = randn(&[n, d], &mut r);
    let bank = randn(&[m, d], &mut r);
    let tau = r.random_range(0.2..1.0);
    grad_check(&[randn(&[n, d], &mut r)], H, |t, v| memory_relation(t, v[0], &teacher, Some(&bank), tau).unwrap())
}

/// A dense-output batch with labels and a queue warmed up by one call.
fn cirkd_setup(seed: u64) -> (Tensor, Tensor, Vec<usize>, MemoryQueue, KdConfig) {
    let mut r = rng(seed);
    let (b, c, h, w) = (r.random_range(2..=3), r.random_range(2..=3), r.random_range(1..=3), r.random_range(2..=3));
    let cfg = KdConfig {
        samples_per_step: r.random_range(2..=4),
        relation_temperature: r.random_range(0.3..1.0),
        alpha: 0.7,
        beta: 0.4,
        gamma: 0.3,
        queue_size: 8,
        ..KdConfig::default()
    };
    let teacher = randn(&[b, c, h, w], &mut r);
    let labels: Vec<usize> = (0..b * h * w).map(|_| r.random_range(0..c)).collect();
    let mut queue = MemoryQueue::new(cfg.queue_size);
    let mut tape = Tape::new();
    let warm = tape.constant(randn(&[b, c, h, w], &mut r));
    kd_cirkd(&mut tape, warm, &randn(&[b, c, h, w], &mut r), &labels, &mut queue, &cfg, &mut r).unwrap();
    (randn(&[b, c, h, w], &mut r), teacher, labels, queue, cfg)
}

fn kd_cirkd_case(seed: u64) -> f64 {
    let (student, teacher, labels, queue, cfg) = cirkd_setup(seed);
    grad_check(&[student], H, |t, v| {
        let mut q = queue.clone();
        kd_cirkd(t, v[0], &teacher, &labels, &mut q, &cfg, &mut rng(seed)).unwrap().total
    })
}

fn distill_cirkd_case(seed: u64) -> f64 {
    let (student, teacher, labels, queue, cfg) = cirkd_setup(seed);
    grad_check(&[student], H, |t, v| {
        let mut q = queue.clone();
        distill_loss(t, KdMethod::Cirkd, v[0], &teacher, &labels, &mut q, &cfg, &mut rng(seed)).unwrap().unwrap()
    })
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add", run: |s| binary_same(s, |t, a, b| t.add(a, b).unwrap()) },
        GradCase { name: "sub", run: |s| binary_same(s, |t, a, b| t.sub(a, b).unwrap()) },
        GradCase { name: "mul", run: |s| binary_same(s, |t, a, b| t.mul(a, b).unwrap()) },
        GradCase { name: "scale", run: |s| unary(s, 1, |t, x, r| t.scale(x, r.random_range(-2.0..2.0)).unwrap()) },
        GradCase { name: "matmul", run: matmul },
        GradCase { name: "conv2d", run: conv2d },
        GradCase { name: "add_channel", run: |s| channel_op(s, false) },
        GradCase { name: "mul_channel", run: |s| channel_op(s, true) },
        GradCase {
            name: "relu",
            run: |s| {
                let mut r = rng(s);
                let x = randn_away_from_zero(&shape(&mut r, 1, 4), 0.05, &mut r);
                grad_check(&[x], H, |t, v| {
                    let y = t.relu(v[0]).unwrap();
                    project(t, y, s)
                })
            },
        },
        GradCase { name: "gelu", run: |s| unary(s, 1, |t, x, _| t.gelu(x).unwrap()) },
        GradCase { name: "softmax", run: softmax },
        GradCase { name: "layer_norm", run: |s| unary(s, 1, |t, x, _| t.layer_norm(x, 1e-5).unwrap()) },
        GradCase { name: "sum", run: |s| unary(s, 1, |t, x, _| t.sum(x).unwrap()) },
        GradCase { name: "mean", run: |s| unary(s, 1, |t, x, _| t.mean(x).unwrap()) },
        GradCase { name: "cross_entropy", run: cross_entropy },
        GradCase { name: "kl_divergence", run: kl_divergence },
        GradCase { name: "avg_pool2d", run: avg_pool },
        GradCase { name: "global_avg_pool", run: global_pool },
        GradCase { name: "upsample2d", run: upsample },
        GradCase { name: "reshape", run: reshape },
        GradCase { name: "permute", run: permute },
        GradCase { name: "concat", run: concat },
        GradCase { name: "l2_normalize", run: |s| unary(s, 1, |t, x, _| t.l2_normalize(x, 1e-12).unwrap()) },
        GradCase { name: "index_select", run: index_select },
        GradCase {
            name: "broadcast_batch",
            run: |s| unary(s, 1, |t, x, r| t.broadcast_batch(x, r.random_range(1..=3)).unwrap()),
        },
    ]
}

pub fn kd_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "kd_kl", run: kd_kl_case },
        GradCase { name: "kd_cwd(spatial)", run: |s| kd_cwd_case(s, CwdAxis::Spatial) },
        GradCase { name: "kd_cwd(channel)", run: |s| kd_cwd_case(s, CwdAxis::Channel) },
        GradCase { name: "batch_p2p", run: batch_p2p_case },
        GradCase { name: "memory_relation", run: memory_case },
        GradCase { name: "kd_cirkd", run: kd_cirkd_case },
        GradCase { name: "distill_loss(cirkd)", run: distill_cirkd_case },
    ]
}

/// Worst error over `shapes` seeds of every case, by case name.
pub fn worst_errors(cases: &[GradCase], shapes: u64) -> Vec<(&'static str, f64)> {
    cases.iter().map(|c| (c.name, (0..shapes).map(|s| (c.run)(s)).fold(0.0, f64::max))).collect()
}
