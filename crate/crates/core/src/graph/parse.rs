//! Text format: one node per line, `<id> = <kind>(<inputs>) {key=value,...}`.
//!
//! `#` starts a comment. Serialization writes nodes in topological order
//! with attribute keys sorted, so equal graphs serialize to equal bytes.

use std::collections::BTreeMap;

use super::{
    ActShape, Activation, AxisSel, ComputationGraph, GraphError, Layout, NodeDecl, OpKind, Pool,
};

struct Attrs<'a> {
    node: &'a str,
    map: BTreeMap<String, String>,
}

impl<'a> Attrs<'a> {
    fn err(&self, reason: String) -> GraphError {
        GraphError::InvalidAttr { node: self.node.to_string(), reason }
    }

    fn take(&mut self, key: &str) -> Result<String, GraphError> {
        self.map.remove(key).ok_or_else(|| self.err(format!("missing attribute `{key}`")))
    }

    fn usize(&mut self, key: &str) -> Result<usize, GraphError> {
        let v = self.take(key)?;
        v.parse().map_err(|_| self.err(format!("`{key}` expects a non-negative integer, got `{v}`")))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, GraphError> {
        if self.map.contains_key(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, GraphError> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(format!("`{key}` expects true/false, got `{v}`"))),
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, GraphError> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(format!("`{key}` expects a number, got `{v}`"))),
        }
    }

    fn layout(&mut self, key: &str) -> Result<Layout, GraphError> {
        let v = self.take(key)?;
        Layout::from_name(&v).ok_or_else(|| self.err(format!("unknown layout `{v}`")))
    }

    fn axis_or(&mut self, key: &str, default: AxisSel) -> Result<AxisSel, GraphError> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => AxisSel::from_name(&v).ok_or_else(|| self.err(format!("unknown axis `{v}`"))),
        }
    }

    fn act_shape(&mut self) -> Result<ActShape, GraphError> {
        let layout = self.layout("layout")?;
        let channels = self.usize("channels")?;
        Ok(match layout {
            Layout::Flat => ActShape::flat(channels),
            Layout::Image => ActShape::image(channels, self.usize("height")?, self.usize("width")?),
            Layout::Seq => ActShape::seq(channels, self.usize("tokens")?),
            Layout::Tokens => ActShape::tokens(channels, self.usize("tokens")?),
        })
    }

    fn finish(self) -> Result<(), GraphError> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(self.err(format!("unknown attribute `{k}`"))),
        }
    }
}

fn parse_kind(node: &str, name: &str, attrs: &mut Attrs) -> Result<OpKind, GraphError> {
    Ok(match name {
        "input" => OpKind::Input { shape: attrs.act_shape()? },
        "param" => OpKind::Parameter { shape: attrs.act_shape()? },
        "linear" => OpKind::Linear { out_features: attrs.usize("out")?, bias: attrs.bool_or("bias", true)? },
        "conv" => OpKind::Conv {
            out_channels: attrs.usize("out")?,
            kernel: attrs.usize("kernel")?,
            stride: attrs.usize_or("stride", 1)?,
            padding: attrs.usize_or("padding", 0)?,
            groups: attrs.usize_or("groups", 1)?,
            bias: attrs.bool_or("bias", true)?,
        },
        "add" => OpKind::Add,
        "matmul" => OpKind::MatMul { transpose_b: attrs.bool_or("transpose_b", false)? },
        "concat" => OpKind::Concat { axis: attrs.axis_or("axis", AxisSel::Channel)? },
        "relu" => OpKind::Act(Activation::Relu),
        "gelu" => OpKind::Act(Activation::Gelu),
        "norm" => OpKind::Norm,
        "reshape" => OpKind::Reshape {
            to: attrs.layout("to")?,
            height: attrs.usize("height")?,
            width: attrs.usize("width")?,
        },
        "transpose" => OpKind::Transpose,
        "avgpool" => OpKind::Pool(Pool::Avg { kernel: attrs.usize("kernel")? }),
        "globalpool" => OpKind::Pool(Pool::GlobalAvg),
        "upsample" => OpKind::Pool(Pool::Upsample { factor: attrs.usize("factor")? }),
        "softmax" => OpKind::Softmax {
            axis: attrs.axis_or("axis", AxisSel::Last)?,
            temperature: attrs.f64_or("temperature", 1.0)?,
        },
        "output" => OpKind::Output,
        "loss" => OpKind::Loss,
        other => return Err(GraphError::UnknownOpKind { node: node.to_string(), kind: other.to_string() }),
    })
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

fn parse_line(lineno: usize, line: &str) -> Result<NodeDecl, GraphError> {
    let syntax = |reason: &str| GraphError::Syntax { line: lineno, reason: reason.to_string() };
    let (id, rest) = line.split_once('=').ok_or_else(|| syntax("expected `<id> = <kind>(...)`"))?;
    let id = id.trim();
    if !is_ident(id) {
        return Err(syntax(&format!("invalid node id `{id}`")));
    }
    let rest = rest.trim();
    let open = rest.find('(').ok_or_else(|| syntax("missing `(`"))?;
    let close = rest.find(')').ok_or_else(|| syntax("missing `)`"))?;
    if close < open {
        return Err(syntax("`)` before `(`"));
    }
    let kind_name = rest[..open].trim();
    let inputs: Vec<String> = rest[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if let Some(bad) = inputs.iter().find(|s| !is_ident(s)) {
        return Err(syntax(&format!("invalid input id `{bad}`")));
    }
    let tail = rest[close + 1..].trim();
    let mut map = BTreeMap::new();
    if !tail.is_empty() {
        let body = tail
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(|| syntax("attributes must be enclosed in `{...}`"))?;
        for pair in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| syntax(&format!("attribute `{pair}` lacks `=`")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(syntax(&format!("attribute `{}` repeated", k.trim())));
            }
        }
    }
    let mut attrs = Attrs { node: id, map };
    let kind = parse_kind(id, kind_name, &mut attrs)?;
    attrs.finish()?;
    Ok((id.to_string(), kind, inputs))
}

/// Parses and validates a graph document.
pub fn parse_graph(text: &str) -> Result<ComputationGraph, GraphError> {
    let mut decls = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        decls.push(parse_line(i + 1, line)?);
    }
    ComputationGraph::from_decls(decls)
}

fn shape_attrs(shape: &ActShape) -> Vec<(&'static str, String)> {
    let mut v = vec![("channels", shape.channels.to_string()), ("layout", shape.layout.name().to_string())];
    match shape.layout {
        Layout::Flat => {}
        Layout::Image => {
            v.push(("height", shape.height.to_string()));
            v.push(("width", shape.width.to_string()));
        }
        Layout::Seq | Layout::Tokens => v.push(("tokens", shape.height.to_string())),
    }
    v
}

fn kind_attrs(kind: &OpKind) -> Vec<(&'static str, String)> {
    let mut v = match kind {
        OpKind::Input { shape } | OpKind::Parameter { shape } => shape_attrs(shape),
        OpKind::Linear { out_features, bias } => vec![("bias", bias.to_string()), ("out", out_features.to_string())],
        OpKind::Conv { out_channels, kernel, stride, padding, groups, bias } => vec![
            ("bias", bias.to_string()),
            ("groups", groups.to_string()),
            ("kernel", kernel.to_string()),
            ("out", out_channels.to_string()),
            ("padding", padding.to_string()),
            ("stride", stride.to_string()),
        ],
        OpKind::MatMul { transpose_b } => vec![("transpose_b", transpose_b.to_string())],
        OpKind::Concat { axis } => vec![("axis", axis.name().to_string())],
        OpKind::Reshape { to, height, width } => vec![
            ("height", height.to_string()),
            ("to", to.name().to_string()),
            ("width", width.to_string()),
        ],
        OpKind::Pool(Pool::Avg { kernel }) => vec![("kernel", kernel.to_string())],
        OpKind::Pool(Pool::Upsample { factor }) => vec![("factor", factor.to_string())],
        OpKind::Softmax { axis, temperature } => {
            vec![("axis", axis.name().to_string()), ("temperature", format!("{temperature:?}"))]
        }
        _ => Vec::new(),
    };
    v.sort();
    v
}

/// Deterministic text form of a graph.
pub fn serialize_graph(graph: &ComputationGraph) -> String {
    let mut out = String::new();
    for node in graph.iter() {
        out.push_str(&node.id);
        out.push_str(" = ");
        out.push_str(node.kind.name());
        out.push('(');
        out.push_str(&node.inputs.join(", "));
        out.push(')');
        let attrs = kind_attrs(&node.kind);
        if !attrs.is_empty() {
            let body: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(" {");
            out.push_str(&body.join(","));
            out.push('}');
        }
        out.push('\n');
    }
    out
}
