//! Small graphs that each exhibit one structural feature.

use thiserror::Error;

use crate::graph::{parse_graph, ComputationGraph};

use super::data::TaskKind;

pub const ZOO: [&str; 6] = ["plain-mlp", "residual", "grouped", "depthwise", "attention", "attention-large"];

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown zoo model `{0}` (known: plain-mlp, residual, grouped, depthwise, attention, attention-large)")]
pub struct UnknownModel(pub String);

const PLAIN_MLP: &str = "\
# two hidden layers, no couplings
x = input() {channels=16, layout=flat}
fc1 = linear(x) {out=64}
r1 = relu(fc1)
fc2 = linear(r1) {out=64}
r2 = relu(fc2)
head = linear(r2) {out=4}
y = output(head)
";

const RESIDUAL: &str = "\
# stem plus two residual blocks sharing the skip path
x = input() {channels=3, height=8, layout=image, width=8}
stem = conv(x) {kernel=3, out=16, padding=1}
r0 = relu(stem)
a1 = conv(r0) {kernel=3, out=12, padding=1}
ra1 = relu(a1)
b1 = conv(ra1) {kernel=3, out=16, padding=1}
s1 = add(r0, b1)
r1 = relu(s1)
a2 = conv(r1) {kernel=3, out=12, padding=1}
ra2 = relu(a2)
b2 = conv(ra2) {kernel=3, out=16, padding=1}
s2 = add(r1, b2)
r2 = relu(s2)
gp = globalpool(r2)
head = linear(gp) {out=4}
y = output(head)
";

const GROUPED: &str = "\
x = input() {channels=3, height=8, layout=image, width=8}
c1 = conv(x) {kernel=3, out=16, padding=1}
r1 = relu(c1)
g1 = conv(r1) {groups=4, kernel=3, out=16, padding=1}
r2 = relu(g1)
c2 = conv(r2) {kernel=1, out=16}
r3 = relu(c2)
gp = globalpool(r3)
head = linear(gp) {out=4}
y = output(head)
";

const DEPTHWISE: &str = "\
x = input() {channels=3, height=8, layout=image, width=8}
pw1 = conv(x) {kernel=1, out=16}
r1 = relu(pw1)
dw = conv(r1) {groups=16, kernel=3, out=16, padding=1}
bn = norm(dw)
r2 = relu(bn)
pw2 = conv(r2) {kernel=1, out=24}
r3 = relu(pw2)
gp = globalpool(r3)
head = linear(gp) {out=4}
y = output(head)
";

/// Convolutional stem on 16×16 images, one single-head self-attention block
/// over 8×8 tokens, upsampling with a skip connection and a per-pixel head.
fn attention(width: usize, key: usize, classes: usize) -> String {
    let temp = (key as f64).sqrt();
    format!(
        "\
x = input() {{channels=3, height=16, layout=image, width=16}}
stem = conv(x) {{kernel=3, out={width}, padding=1}}
r0 = relu(stem)
pool = avgpool(r0) {{kernel=2}}
seq = reshape(pool) {{height=8, to=seq, width=8}}
tok = transpose(seq)
q = linear(tok) {{out={key}}}
k = linear(tok) {{out={key}}}
v = linear(tok) {{out={width}}}
qk = matmul(q, k) {{transpose_b=true}}
attn = softmax(qk) {{axis=last, temperature={temp:?}}}
av = matmul(attn, v)
o = linear(av) {{out={width}}}
res = add(tok, o)
act = gelu(res)
back = transpose(act)
img = reshape(back) {{height=8, to=image, width=8}}
up = upsample(img) {{factor=2}}
fuse = add(r0, up)
mix = conv(fuse) {{kernel=3, out={width}, padding=1}}
r1 = relu(mix)
head = conv(r1) {{kernel=1, out={classes}}}
y = output(head)
"
    )
}

/// Graph description of a zoo model.
pub fn zoo_source(name: &str) -> Result<String, UnknownModel> {
    Ok(match name {
        "plain-mlp" => PLAIN_MLP.to_string(),
        "residual" => RESIDUAL.to_string(),
        "grouped" => GROUPED.to_string(),
        "depthwise" => DEPTHWISE.to_string(),
        "attention" => attention(16, 8, 4),
        "attention-large" => attention(32, 16, 4),
        _ => return Err(UnknownModel(name.to_string())),
    })
}

pub fn zoo_build(name: &str) -> Result<ComputationGraph, UnknownModel> {
    let src = zoo_source(name)?;
    Ok(parse_graph(&src).expect("zoo graphs are valid"))
}

pub fn zoo_task(name: &str) -> Result<TaskKind, UnknownModel> {
    match name {
        "plain-mlp" | "residual" | "grouped" | "depthwise" => Ok(TaskKind::Classification),
        "attention" | "attention-large" => Ok(TaskKind::Dense),
        _ => Err(UnknownModel(name.to_string())),
    }
}
