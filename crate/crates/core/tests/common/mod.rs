//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

pub mod gradcases;

use std::collections::{BTreeMap, BTreeSet};

use cpd_core::combing::PruningScheme;
use cpd_core::graph::{
    ActShape, Activation, AxisSel, ComputationGraph, GraphBuilder, OpKind, ParamStore,
};
use cpd_core::importance::MaskSet;
use cpd_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Standard normal entries pushed at least `gap` away from zero.
pub fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    randn(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

// ---------------------------------------------------------------------------
// finite-difference gradient checks

/// `sum(y ⊙ R)` for a fixed random `R`, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let r = randn(tape.value(y).shape(), &mut rng(seed ^ 0x5eed));
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}

/// Norm-wise relative error between backprop gradients of the scalar
/// `f(inputs)` and central differences with step `h`, maximised over inputs.
pub fn grad_check(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).numel(), 1, "gradient check needs a scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let mut num = vec![0.0; a.numel()];
        for (i, n) in num.iter_mut().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            *n = (up - down) / (2.0 * h);
        }
        let diff = a.data().iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

// ---------------------------------------------------------------------------
// random token-layout DAGs

pub struct DagConfig {
    pub max_stops: usize,
    pub max_couplings: usize,
}

impl Default for DagConfig {
    fn default() -> Self {
        Self { max_stops: 12, max_couplings: 4 }
    }
}

struct Slot {
    id: String,
    channels: usize,
    tokens: usize,
}

/// A random graph over `tokens` activations mixing linear layers,
/// activations, norms, softmaxes, adds, channel and token concats and both
/// matmul forms.
pub fn random_dag(cfg: &DagConfig, rng: &mut impl Rng) -> ComputationGraph {
    let mut b = GraphBuilder::new();
    let mut slots: Vec<Slot> = Vec::new();
    let (c0, t0) = (rng.random_range(2..=6), rng.random_range(2..=4));
    b.node("x", OpKind::Input { shape: ActShape::tokens(c0, t0) }, &[]);
    slots.push(Slot { id: "x".into(), channels: c0, tokens: t0 });
    if rng.random_bool(0.3) {
        let c = rng.random_range(2..=6);
        b.node("p", OpKind::Parameter { shape: ActShape::tokens(c, t0) }, &[]);
        slots.push(Slot { id: "p".into(), channels: c, tokens: t0 });
    }
    let stops_target = rng.random_range(1..=cfg.max_stops);
    let couplings_target = rng.random_range(0..=cfg.max_couplings);
    let (mut stops, mut couplings) = (0, 0);
    let mut n = 0;

    let pick = |rng: &mut dyn rand::RngCore, len: usize| -> usize {
        if rng.random_bool(0.5) {
            len - 1
        } else {
            rng.random_range(0..len)
        }
    };

    for _ in 0..400 {
        if stops >= stops_target && couplings >= couplings_target {
            break;
        }
        n += 1;
        let id = format!("n{n}");
        let roll = rng.random_range(0..100);
        let a = pick(rng, slots.len());
        let (ac, at) = (slots[a].channels, slots[a].tokens);
        let aid = slots[a].id.clone();
        if roll < 35 {
            if stops >= stops_target {
                continue;
            }
            let out = rng.random_range(2..=6);
            b.node(&id, OpKind::Linear { out_features: out, bias: rng.random_bool(0.7) }, &[&aid]);
            slots.push(Slot { id, channels: out, tokens: at });
            stops += 1;
        } else if roll < 55 {
            let kind = match rng.random_range(0..3) {
                0 => OpKind::Act(Activation::Relu),
                1 => OpKind::Act(Activation::Gelu),
                _ => OpKind::Norm,
            };
            b.node(&id, kind, &[&aid]);
            slots.push(Slot { id, channels: ac, tokens: at });
        } else if roll < 60 {
            b.node(&id, OpKind::Softmax { axis: AxisSel::Last, temperature: 1.0 }, &[&aid]);
            slots.push(Slot { id, channels: ac, tokens: at });
        } else {
            if couplings >= couplings_target {
                continue;
            }
            let kind = rng.random_range(0..5);
            let mut partner = None;
            if matches!(kind, 0 | 2 | 3) && stops < cfg.max_stops && 2 * at <= 8 && rng.random_bool(0.6) {
                // a fresh linear partner, so bindings usually join stop ops
                let src = slots.iter().position(|s| s.tokens == at).unwrap();
                let pid = format!("{id}p");
                let sid = slots[src].id.clone();
                b.node(&pid, OpKind::Linear { out_features: ac, bias: true }, &[&sid]);
                slots.push(Slot { id: pid, channels: ac, tokens: at });
                stops += 1;
                partner = Some(slots.len() - 1);
            }
            let find = |pred: &dyn Fn(&Slot) -> bool, rng: &mut dyn rand::RngCore| -> Option<usize> {
                let ok: Vec<usize> = (0..slots.len()).filter(|&i| pred(&slots[i])).collect();
                (!ok.is_empty()).then(|| ok[rng.random_range(0..ok.len())])
            };
            let made = match kind {
                0 => partner.or_else(|| find(&|s: &Slot| s.channels == ac && s.tokens == at, rng)).map(|j| {
                    b.node(&id, OpKind::Add, &[&aid, &slots[j].id]);
                    (ac, at)
                }),
                1 => find(&|s: &Slot| s.tokens == at, rng).map(|j| {
                    b.node(&id, OpKind::Concat { axis: AxisSel::Channel }, &[&aid, &slots[j].id]);
                    (ac + slots[j].channels, at)
                }),
                2 => partner.or_else(|| find(&|s: &Slot| s.channels == ac && s.tokens + at <= 8, rng)).map(|j| {
                    b.node(&id, OpKind::Concat { axis: AxisSel::Token }, &[&aid, &slots[j].id]);
                    (ac, at + slots[j].tokens)
                }),
                3 => partner.or_else(|| find(&|s: &Slot| s.channels == ac, rng)).map(|j| {
                    b.node(&id, OpKind::MatMul { transpose_b: true }, &[&aid, &slots[j].id]);
                    (slots[j].tokens, at)
                }),
                _ if stops < cfg.max_stops && rng.random_bool(0.6) => {
                    // left operand projected to the right operand's token count
                    let j = rng.random_range(0..slots.len());
                    let (rt, rc, rid) = (slots[j].tokens, slots[j].channels, slots[j].id.clone());
                    let lid = format!("{id}l");
                    b.node(&lid, OpKind::Linear { out_features: rt, bias: true }, &[&aid]);
                    slots.push(Slot { id: lid.clone(), channels: rt, tokens: at });
                    stops += 1;
                    b.node(&id, OpKind::MatMul { transpose_b: false }, &[&lid, &rid]);
                    Some((rc, at))
                }
                _ => find(&|s: &Slot| s.tokens == ac, rng).map(|j| {
                    b.node(&id, OpKind::MatMul { transpose_b: false }, &[&aid, &slots[j].id]);
                    (slots[j].channels, at)
                }),
            };
            match made {
                Some((c, t)) => {
                    slots.push(Slot { id, channels: c, tokens: t });
                    couplings += 1;
                }
                None if stops < cfg.max_stops => {
                    // give the next coupling attempt a partner of equal shape
                    b.node(&id, OpKind::Linear { out_features: ac, bias: true }, &[&aid]);
                    slots.push(Slot { id, channels: ac, tokens: at });
                    stops += 1;
                }
                None => {}
            }
        }
    }
    let last = slots.last().unwrap().id.clone();
    b.node("y", OpKind::Output, &[&last]);
    b.build().expect("generated graph is valid")
}

// ---------------------------------------------------------------------------
// combing oracle: forward propagation of channel labels

/// `(origin node, channel)`; origins are stop ops, sources and `a · bᵀ`.
type Label = (String, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleGroup {
    pub producers: Vec<String>,
    pub channels: usize,
    pub prunable: bool,
    pub coupling_ops: BTreeSet<String>,
    pub consumers: BTreeSet<(String, usize, [usize; 2])>,
    pub riders: BTreeSet<(String, [usize; 2])>,
    pub granularity: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Offsets at which each origin's channels sit inside an operand.
fn placements(operand: &[BTreeSet<Label>]) -> BTreeMap<String, BTreeSet<usize>> {
    let mut out: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (pos, set) in operand.iter().enumerate() {
        for (o, i) in set {
            out.entry(o.clone()).or_default().insert(pos - i);
        }
    }
    out
}

/// Coupling groups derived independently of the library: every channel of
/// every activation carries the set of origin channels it was computed
/// from. Ops that need equal channel counts bind the origins present in
/// their operands; an origin is bound cleanly only when it fills the whole
/// operand at offset zero. Groups are then found by naive repeated set
/// merging.
pub fn oracle_groups(g: &ComputationGraph) -> Vec<OracleGroup> {
    let is_stop = |id: &str| g.node(id).unwrap().kind.is_stop();
    let width = |id: &str| g.node(id).unwrap().out_channels();
    let mut labels: BTreeMap<String, Vec<BTreeSet<Label>>> = BTreeMap::new();
    let fresh = |id: &str, c: usize| -> Vec<BTreeSet<Label>> {
        (0..c).map(|i| BTreeSet::from([(id.to_string(), i)])).collect()
    };

    let mut pinned: BTreeSet<String> = BTreeSet::new();
    let mut bonds: Vec<(Vec<String>, bool)> = Vec::new();
    let mut couplings: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut consumers: BTreeMap<String, BTreeSet<(String, usize, [usize; 2])>> = BTreeMap::new();
    let mut riders: BTreeMap<String, BTreeSet<(String, [usize; 2])>> = BTreeMap::new();
    let mut gran: BTreeMap<String, usize> = BTreeMap::new();

    for id in g.topo_order() {
        let node = g.node(id).unwrap();
        let ops: Vec<Vec<BTreeSet<Label>>> = node.inputs.iter().map(|i| labels[i].clone()).collect();
        let c = node.out_channels();

        if matches!(node.kind, OpKind::Add | OpKind::Concat { .. } | OpKind::MatMul { .. }) {
            for op in &ops {
                for o in placements(op).keys().filter(|o| is_stop(o)) {
                    couplings.entry(o.clone()).or_default().insert(id.clone());
                }
            }
        }

        // equal-channel binding across `operands`, plus `extra` members
        let mut bind = |operands: &[&Vec<BTreeSet<Label>>], extra: Option<&String>| {
            let mut clean: BTreeMap<String, bool> = BTreeMap::new();
            for op in operands {
                for (o, offs) in placements(op) {
                    let ok = offs.len() == 1 && offs.contains(&0) && width(&o) == op.len();
                    *clean.entry(o).or_insert(true) &= ok;
                }
            }
            let mut members: Vec<String> = extra.into_iter().cloned().collect();
            let mut site_pinned = false;
            for (o, ok) in clean {
                if !is_stop(&o) {
                    site_pinned = true;
                } else if ok {
                    members.push(o);
                } else {
                    pinned.insert(o);
                    site_pinned = true;
                }
            }
            bonds.push((members, site_pinned));
        };

        let out: Vec<BTreeSet<Label>> = match &node.kind {
            OpKind::Input { .. } | OpKind::Parameter { .. } => fresh(id, c),
            OpKind::Linear { .. } | OpKind::Conv { .. } => {
                for (o, offs) in placements(&ops[0]).into_iter().filter(|(o, _)| is_stop(o)) {
                    for &off in &offs {
                        consumers.entry(o.clone()).or_default().insert((id.clone(), 0, [off, off + width(&o)]));
                    }
                }
                if node.is_depthwise() {
                    bind(&[&ops[0]], Some(id));
                } else if node.channel_groups() > 1 {
                    for (o, offs) in placements(&ops[0]).into_iter().filter(|(o, _)| is_stop(o)) {
                        if offs.len() == 1 && offs.contains(&0) && width(&o) == ops[0].len() {
                            let e = gran.entry(o).or_insert(1);
                            *e = lcm(*e, node.channel_groups());
                        } else {
                            pinned.insert(o);
                        }
                    }
                }
                fresh(id, c)
            }
            OpKind::Add | OpKind::Concat { axis: AxisSel::Token } | OpKind::Concat { axis: AxisSel::Last } => {
                bind(&ops.iter().collect::<Vec<_>>(), None);
                (0..c).map(|ch| ops.iter().flat_map(|op| op[ch].iter().cloned()).collect()).collect()
            }
            OpKind::Concat { axis: AxisSel::Channel } => ops.concat(),
            OpKind::MatMul { transpose_b: true } => {
                bind(&[&ops[0], &ops[1]], None);
                fresh(id, c)
            }
            OpKind::MatMul { transpose_b: false } => {
                pinned.extend(placements(&ops[0]).into_keys().filter(|o| is_stop(o)));
                ops[1].clone()
            }
            OpKind::Softmax { .. } | OpKind::Output | OpKind::Loss => {
                pinned.extend(placements(&ops[0]).into_keys().filter(|o| is_stop(o)));
                vec![BTreeSet::new(); c]
            }
            OpKind::Norm => {
                for (o, offs) in placements(&ops[0]).into_iter().filter(|(o, _)| is_stop(o)) {
                    for &off in &offs {
                        riders.entry(o.clone()).or_default().insert((id.clone(), [off, off + width(&o)]));
                    }
                }
                ops[0].clone()
            }
            OpKind::Act(_) | OpKind::Reshape { .. } | OpKind::Transpose | OpKind::Pool(_) => ops[0].clone(),
        };
        labels.insert(id.clone(), out);
    }

    let mut sets: Vec<BTreeSet<String>> = g.stop_ops().map(|n| BTreeSet::from([n.id.clone()])).collect();
    loop {
        let mut merged = false;
        'outer: for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                let joined = bonds.iter().any(|(m, _)| {
                    m.iter().any(|x| sets[i].contains(x)) && m.iter().any(|x| sets[j].contains(x))
                });
                if joined {
                    let s = sets.remove(j);
                    sets[i].extend(s);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }

    let mut groups: Vec<OracleGroup> = sets
        .into_iter()
        .map(|set| {
            let site_pinned = bonds.iter().any(|(m, p)| *p && m.iter().any(|x| set.contains(x)));
            let producers: Vec<String> = set.iter().cloned().collect();
            let mut granularity = 1;
            for p in &producers {
                granularity = lcm(granularity, gran.get(p).copied().unwrap_or(1));
                granularity = lcm(granularity, g.node(p).unwrap().channel_groups());
            }
            OracleGroup {
                channels: width(&producers[0]),
                prunable: !site_pinned && !producers.iter().any(|p| pinned.contains(p)),
                coupling_ops: producers.iter().filter_map(|p| couplings.get(p)).flatten().cloned().collect(),
                consumers: union_over(&producers, &consumers),
                riders: union_over(&producers, &riders),
                granularity,
                producers,
            }
        })
        .collect();
    groups.sort_by(|a, b| a.producers[0].cmp(&b.producers[0]));
    groups
}

fn union_over<T: Ord + Clone>(keys: &[String], m: &BTreeMap<String, BTreeSet<T>>) -> BTreeSet<T> {
    keys.iter().filter_map(|k| m.get(k)).flatten().cloned().collect()
}

/// Library scheme in the oracle's shape.
pub fn scheme_as_oracle(s: &PruningScheme) -> Vec<OracleGroup> {
    s.groups
        .iter()
        .map(|g| OracleGroup {
            producers: g.producers.clone(),
            channels: g.channels,
            prunable: g.prunable,
            coupling_ops: g.coupling_ops.iter().cloned().collect(),
            consumers: g.consumers.iter().map(|c| (c.op.clone(), c.slot, c.slice)).collect(),
            riders: g.riders.iter().map(|r| (r.op.clone(), r.slice)).collect(),
            granularity: g.granularity,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// masks

/// Prunes a random subset of units in every prunable group, keeping at
/// least one unit alive.
pub fn random_consistent_masks(scheme: &PruningScheme, rng: &mut impl Rng) -> MaskSet {
    let mut masks = MaskSet::all_ones(scheme);
    for g in scheme.prunable_groups() {
        let units = g.unit_count();
        if units < 2 {
            continue;
        }
        let k = rng.random_range(0..units);
        for u in rand::seq::index::sample(rng, units, k).into_iter() {
            masks.prune_channels(g, &g.unit_channels(u));
        }
    }
    masks
}

// ---------------------------------------------------------------------------
// importance oracles

#[derive(Clone, Copy, Debug)]
pub enum Probe {
    Gaussian,
    Rademacher,
}

/// Per-sample, per-gate squared components of the finite-difference
/// Hessian-vector product `(∇L(g + h·z) − ∇L(g)) / h`.
pub fn hutchinson_fd(
    grad: impl Fn(&[f64]) -> Vec<f64>,
    g: &[f64],
    h: f64,
    samples: usize,
    probe: Probe,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let base = grad(g);
    (0..samples)
        .map(|_| {
            let z: Vec<f64> = (0..g.len())
                .map(|_| match probe {
                    Probe::Gaussian => StandardNormal.sample(rng),
                    Probe::Rademacher => {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                })
                .collect();
            let moved: Vec<f64> = g.iter().zip(&z).map(|(a, b)| a + h * b).collect();
            grad(&moved).iter().zip(&base).map(|(a, b)| ((a - b) / h).powi(2)).collect()
        })
        .collect()
}

pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Fully connected ReLU network with a softmax cross-entropy loss, written
/// without the tape. `layers` names linear nodes in order.
pub fn mlp_loss(params: &ParamStore, layers: &[&str], x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in x.iter().zip(labels) {
        let mut a = row.clone();
        for (k, l) in layers.iter().enumerate() {
            let w = params.get(&format!("{l}.weight")).unwrap();
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let bias = params.get(&format!("{l}.bias"));
            let mut z: Vec<f64> = (0..out)
                .map(|o| {
                    let dot: f64 = (0..inp).map(|i| w.data()[o * inp + i] * a[i]).sum();
                    dot + bias.map_or(0.0, |b| b.data()[o])
                })
                .collect();
            if k + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[label];
    }
    total / x.len() as f64
}

/// Central-difference gradient of `loss` with respect to one parameter.
pub fn fd_param_grad(params: &ParamStore, name: &str, h: f64, loss: impl Fn(&ParamStore) -> f64) -> Tensor {
    let mut p = params.clone();
    let n = p.get(name).unwrap().numel();
    let mut g = vec![0.0; n];
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = p.get(name).unwrap().data()[i];
        p.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let up = loss(&p);
        p.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let down = loss(&p);
        p.get_mut(name).unwrap().data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    Tensor::new(params.get(name).unwrap().shape().to_vec(), g).unwrap()
}

// ---------------------------------------------------------------------------
// criterion-level checks shared with the acceptance suite

pub const MLP: &str = "\
x = input() {channels=6, layout=flat}
fc1 = linear(x) {out=8}
r1 = relu(fc1)
fc2 = linear(r1) {out=8}
r2 = relu(fc2)
head = linear(r2) {out=3}
y = output(head)
";

pub struct ChannelCheck {
    pub layer: String,
    pub channel: usize,
    pub score: f64,
    pub oracle: f64,
}

impl ChannelCheck {
    /// Relative error, or the error relative to the largest score when this
    /// channel's score is numerically zero (a dead ReLU unit).
    pub fn rel_err(&self, scale: f64) -> f64 {
        (self.score - self.oracle).abs() / self.score.max(1e-10 * scale)
    }
}

/// Library scores of the prunable MLP layers next to the finite-difference
/// Hutchinson estimate of the gate curvature, where the gate gradient at
/// gates `g'` is `Σ_i ∂L/∂w_i · g'_c · w_i` with `∂L/∂w` taken by central
/// differences of a tape-free forward pass.
pub fn mlp_hutchinson(seed: u64, probe: Probe, h: f64, samples: usize) -> Vec<ChannelCheck> {
    use cpd_core::combing::build_coupling_groups;
    use cpd_core::graph::{execute, init_params, parse_graph, Model};
    use cpd_core::importance::producer_scores;

    let graph = parse_graph(MLP).unwrap();
    let mut r = rng(seed);
    let model = Model::new(graph.clone(), init_params(&graph, &mut r)).unwrap();
    assert!(model.params.total_len() <= 1000);
    let batch = 16;
    let x: Vec<Vec<f64>> = (0..batch).map(|_| randn(&[6], &mut r).into_data()).collect();
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..3)).collect();

    let input = Tensor::new(vec![batch, 6], x.concat()).unwrap();
    let mut exec = execute(&model, &BTreeMap::from([("x".to_string(), input)]), true).unwrap();
    let out = exec.output_var("head").unwrap();
    let loss = exec.tape.cross_entropy(out, &labels, 1).unwrap();
    exec.tape.backward(loss).unwrap();
    let scheme = build_coupling_groups(&graph).unwrap();
    let scores = producer_scores(&graph, &scheme, |n| model.params.get(n), |n| exec.param_grad(n)).unwrap();

    let layers = ["fc1", "fc2", "head"];
    let mut checks = Vec::new();
    for (layer, score) in &scores {
        let name = format!("{layer}.weight");
        let w = model.params.get(&name).unwrap().clone();
        let grad = fd_param_grad(&model.params, &name, 1e-6, |p| mlp_loss(p, &layers, &x, &labels));
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let gate_grad = |gates: &[f64]| -> Vec<f64> {
            (0..out)
                .map(|c| (0..inp).map(|i| grad.data()[c * inp + i] * gates[c] * w.data()[c * inp + i]).sum())
                .collect()
        };
        let rows = hutchinson_fd(gate_grad, &vec![1.0; out], h, samples, probe, &mut rng(seed ^ 0xa11));
        for (c, m) in column_means(&rows).into_iter().enumerate() {
            checks.push(ChannelCheck { layer: layer.clone(), channel: c, score: score[c], oracle: m });
        }
    }
    checks
}

pub fn worst_rel_err(checks: &[ChannelCheck]) -> f64 {
    let scale = checks.iter().map(|c| c.score).fold(0.0, f64::max);
    checks.iter().map(|c| c.rel_err(scale)).fold(0.0, f64::max)
}

pub struct QuadraticCheck {
    pub estimate: f64,
    pub frobenius_sq: f64,
    /// Monte-Carlo standard error of `estimate`.
    pub sigma: f64,
}

/// Hutchinson estimate of `‖A‖_F²` for `L(g) = ½ gᵀAg` with a random
/// symmetric `A`, whose gradient `A·g` is exact.
pub fn quadratic_hutchinson(seed: u64, n: usize, probe: Probe, samples: usize) -> QuadraticCheck {
    let mut r = rng(seed);
    let m = randn(&[n, n], &mut r);
    let a: Vec<f64> = (0..n * n).map(|k| m.data()[k] + m.data()[(k % n) * n + k / n]).collect();
    let grad = |g: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..n).map(|j| a[i * n + j] * g[j]).sum()).collect() };
    let g0 = randn(&[n], &mut r).into_data();
    let rows = hutchinson_fd(grad, &g0, 1e-4, samples, probe, &mut r);
    let totals: Vec<f64> = rows.iter().map(|row| row.iter().sum()).collect();
    let k = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / k;
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1.0);
    QuadraticCheck { estimate: mean, frobenius_sq: a.iter().map(|v| v * v).sum(), sigma: (var / k).sqrt() }
}

/// Largest output difference between the masked model and its compaction
/// over `masks` random consistent masks, on random inputs.
pub fn compaction_worst(name: &str, masks: usize, seed: u64) -> f64 {
    use cpd_core::combing::{build_coupling_groups, node_gates, validate_masks};
    use cpd_core::graph::{compact, execute, execute_gated, init_params, Model};
    use cpd_core::harness::zoo::zoo_build;

    let graph = zoo_build(name).unwrap();
    let mut r = rng(seed);
    let model = Model::new(graph.clone(), init_params(&graph, &mut r)).unwrap();
    let scheme = build_coupling_groups(&graph).unwrap();
    let input = &graph.named_inputs()[0];
    let out = &graph.named_outputs()[0];
    let shape = graph.node(input).unwrap().shape.tensor_shape(2);
    let mut worst: f64 = 0.0;
    for _ in 0..masks {
        let m = random_consistent_masks(&scheme, &mut r);
        validate_masks(&scheme, &m).unwrap();
        let compacted = compact(&model, &scheme, &m).unwrap();
        let inputs = BTreeMap::from([(input.clone(), randn(&shape, &mut r))]);
        let gated = execute_gated(&model, &inputs, &node_gates(&graph, &scheme, &m), false).unwrap().outputs();
        let small = execute(&compacted, &inputs, false).unwrap().outputs();
        worst = worst.max(gated[out].max_abs_diff(&small[out]).unwrap());
    }
    worst
}

/// `kd_kl`, `kd_cwd` and `kd_cirkd` on a random `[b, c, h, w]` batch;
/// with `identical` the student equals the teacher.
pub fn kd_values(seed: u64, identical: bool) -> Vec<(&'static str, f64)> {
    use cpd_core::distill::{kd_cirkd, kd_cwd, kd_kl, CwdAxis, KdConfig, MemoryQueue};

    let mut r = rng(seed);
    let (b, c, h, w) = (r.random_range(1..=3), r.random_range(2..=5), r.random_range(1..=4), r.random_range(1..=4));
    let scale = r.random_range(0.1..5.0);
    let teacher = randn(&[b, c, h, w], &mut r).map(|v| v * scale);
    let student = if identical { teacher.clone() } else { randn(&[b, c, h, w], &mut r).map(|v| v * scale) };
    let labels: Vec<usize> = (0..b * h * w).map(|_| r.random_range(0..c)).collect();
    let temp = r.random_range(0.5..8.0);
    let cfg = KdConfig { samples_per_step: r.random_range(1..=8), ..KdConfig::default() };

    let mut tape = Tape::new();
    let s = tape.leaf(student, true);
    let kl = kd_kl(&mut tape, s, &teacher, 1, temp).unwrap();
    let cwd_s = kd_cwd(&mut tape, s, &teacher, temp, CwdAxis::Spatial).unwrap();
    let cwd_c = kd_cwd(&mut tape, s, &teacher, temp, CwdAxis::Channel).unwrap();
    let mut queue = MemoryQueue::new(cfg.queue_size);
    let first = kd_cirkd(&mut tape, s, &teacher, &labels, &mut queue, &cfg, &mut r).unwrap();
    // second call reads the queues filled by the first
    let second = kd_cirkd(&mut tape, s, &teacher, &labels, &mut queue, &cfg, &mut r).unwrap();
    vec![
        ("kd_kl", tape.value(kl).item()),
        ("kd_cwd(spatial)", tape.value(cwd_s).item()),
        ("kd_cwd(channel)", tape.value(cwd_c).item()),
        ("kd_cirkd", tape.value(first.total).item()),
        ("kd_cirkd(queued)", tape.value(second.total).item()),
    ]
}
