use std::collections::BTreeSet;
use std::fmt::Write;

use super::{infer_world_size, InputSpec, LayerKind, LayerSpec, NetworkSpec, SourceLine};
use crate::error::SpecError;

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Colon,
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, SpecError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut chars = raw.char_indices().peekable();
        while let Some(&(start, c)) = chars.peek() {
            match c {
                '#' => break,
                c if c.is_whitespace() => {
                    chars.next();
                }
                ':' => {
                    chars.next();
                    out.push((Token::Colon, line));
                }
                '{' => {
                    chars.next();
                    out.push((Token::Open, line));
                }
                '}' => {
                    chars.next();
                    out.push((Token::Close, line));
                }
                '"' => {
                    chars.next();
                    let mut word = String::new();
                    let mut closed = false;
                    for (_, c) in chars.by_ref() {
                        if c == '"' {
                            closed = true;
                            break;
                        }
                        word.push(c);
                    }
                    if !closed {
                        return Err(SpecError::Syntax { line, message: "unterminated string".into() });
                    }
                    out.push((Token::Word(word), line));
                }
                _ => {
                    let mut end = start;
                    while let Some(&(i, c)) = chars.peek() {
                        if c.is_whitespace() || matches!(c, ':' | '{' | '}' | '#' | '"') {
                            break;
                        }
                        end = i + c.len_utf8();
                        chars.next();
                    }
                    out.push((Token::Word(raw[start..end].to_string()), line));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
enum Value {
    Scalar(String),
    Block(Vec<Item>),
}

#[derive(Debug)]
struct Item {
    key: String,
    line: usize,
    value: Value,
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
}

impl Parser {
    fn last_line(&self) -> usize {
        self.tokens.last().map_or(1, |t| t.1)
    }

    fn items(&mut self, nested: bool) -> Result<Vec<Item>, SpecError> {
        let mut items = Vec::new();
        loop {
            let Some((tok, line)) = self.tokens.get(self.pos).cloned() else {
                if nested {
                    return Err(SpecError::Syntax { line: self.last_line(), message: "missing `}`".into() });
                }
                return Ok(items);
            };
            self.pos += 1;
            let key = match tok {
                Token::Close if nested => return Ok(items),
                Token::Word(w) => w,
                other => {
                    return Err(SpecError::Syntax { line, message: format!("expected a field name, found {other:?}") })
                }
            };
            match self.tokens.get(self.pos).cloned() {
                Some((Token::Colon, _)) => {
                    self.pos += 1;
                    match self.tokens.get(self.pos).cloned() {
                        Some((Token::Word(v), _)) => {
                            self.pos += 1;
                            items.push(Item { key, line, value: Value::Scalar(v) });
                        }
                        // `mpi_param: { .. }` is accepted as well.
                        Some((Token::Open, _)) => {
                            self.pos += 1;
                            let inner = self.items(true)?;
                            items.push(Item { key, line, value: Value::Block(inner) });
                        }
                        _ => return Err(SpecError::Syntax { line, message: format!("missing value for `{key}`") }),
                    }
                }
                Some((Token::Open, _)) => {
                    self.pos += 1;
                    let inner = self.items(true)?;
                    items.push(Item { key, line, value: Value::Block(inner) });
                }
                _ => return Err(SpecError::Syntax { line, message: format!("expected `:` or `{{` after `{key}`") }),
            }
        }
    }
}

fn scalar<'a>(item: &'a Item) -> Result<&'a str, SpecError> {
    match &item.value {
        Value::Scalar(s) => Ok(s),
        Value::Block(_) => Err(SpecError::Syntax { line: item.line, message: format!("`{}` takes a value, not a block", item.key) }),
    }
}

fn block<'a>(item: &'a Item) -> Result<&'a [Item], SpecError> {
    match &item.value {
        Value::Block(b) => Ok(b),
        Value::Scalar(_) => Err(SpecError::Syntax { line: item.line, message: format!("`{}` takes a block", item.key) }),
    }
}

fn parse_usize(item: &Item) -> Result<usize, SpecError> {
    let v = scalar(item)?;
    v.parse().map_err(|_| SpecError::InvalidValue { line: item.line, field: item.key.clone(), value: v.into() })
}

fn rank_set(item: &Item) -> Result<BTreeSet<usize>, SpecError> {
    let mut set = BTreeSet::new();
    for inner in block(item)? {
        if inner.key != "mpi_rank" {
            return Err(SpecError::Syntax { line: inner.line, message: format!("unexpected `{}` in `{}`", inner.key, item.key) });
        }
        set.insert(parse_usize(inner)?);
    }
    Ok(set)
}

fn parse_layer(item: &Item) -> Result<LayerSpec, SpecError> {
    let line = item.line;
    let mut name = None;
    let mut kind = None;
    let mut layer = LayerSpec::new("", LayerKind::Identity);
    layer.line = SourceLine(line);
    for f in block(item)? {
        match f.key.as_str() {
            "name" => name = Some(scalar(f)?.to_string()),
            "type" => {
                let t = scalar(f)?;
                kind = Some(
                    t.parse::<LayerKind>()
                        .map_err(|_| SpecError::UnknownLayerType { line: f.line, kind: t.into() })?,
                );
            }
            "bottom" => layer.bottoms.push(scalar(f)?.to_string()),
            "top" => layer.tops.push(scalar(f)?.to_string()),
            "mpi_param" => {
                for p in block(f)? {
                    match p.key.as_str() {
                        "root" => layer.mpi_root = Some(parse_usize(p)?),
                        other => {
                            return Err(SpecError::Syntax { line: p.line, message: format!("unknown mpi_param field `{other}`") })
                        }
                    }
                }
            }
            "include" => {
                let set = rank_set(f)?;
                layer.include_ranks.get_or_insert_with(BTreeSet::new).extend(set);
            }
            "exclude" => layer.exclude_ranks.extend(rank_set(f)?),
            key => {
                let v = scalar(f)?.to_string();
                if layer.params.insert(key.to_string(), v).is_some() {
                    return Err(SpecError::Syntax { line: f.line, message: format!("duplicate field `{key}`") });
                }
            }
        }
    }
    layer.name = name.ok_or_else(|| SpecError::MissingField { line, layer: "<unnamed>".into(), field: "name".into() })?;
    layer.kind = kind.ok_or_else(|| SpecError::MissingField { line, layer: layer.name.clone(), field: "type".into() })?;
    Ok(layer)
}

fn parse_input(item: &Item) -> Result<InputSpec, SpecError> {
    let mut name = None;
    let mut shape = Vec::new();
    for f in block(item)? {
        match f.key.as_str() {
            "name" => name = Some(scalar(f)?.to_string()),
            "shape" | "dim" => {
                let d = parse_usize(f)?;
                if d == 0 {
                    return Err(SpecError::InvalidValue { line: f.line, field: f.key.clone(), value: "0".into() });
                }
                shape.push(d);
            }
            other => return Err(SpecError::Syntax { line: f.line, message: format!("unknown input field `{other}`") }),
        }
    }
    let name = name.ok_or_else(|| SpecError::MissingField { line: item.line, layer: "input".into(), field: "name".into() })?;
    Ok(InputSpec { name, shape })
}

/// Parses and validates a specification.
pub fn parse_spec(text: &str) -> Result<NetworkSpec, SpecError> {
    let tokens = tokenize(text)?;
    let items = Parser { tokens, pos: 0 }.items(false)?;
    let mut spec = NetworkSpec {
        name: None,
        inputs: Vec::new(),
        world_size: 0,
        members: None,
        split_point: None,
        rank: None,
        layers: Vec::new(),
    };
    let mut world_size = None;
    for item in &items {
        match item.key.as_str() {
            "name" => spec.name = Some(scalar(item)?.to_string()),
            "world_size" => world_size = Some(parse_usize(item)?),
            "members" => spec.members = Some(parse_usize(item)?),
            "split_point" => spec.split_point = Some(scalar(item)?.to_string()),
            "rank" => spec.rank = Some(parse_usize(item)?),
            "input" => spec.inputs.push(parse_input(item)?),
            "layer" => spec.layers.push(parse_layer(item)?),
            other => {
                return Err(SpecError::Syntax { line: item.line, message: format!("unknown top-level field `{other}`") })
            }
        }
    }
    spec.world_size = match world_size {
        Some(0) => return Err(SpecError::InvalidValue { line: 1, field: "world_size".into(), value: "0".into() }),
        Some(w) => w,
        None => infer_world_size(&spec.layers),
    };
    spec.validate()?;
    Ok(spec)
}

fn word(s: &str) -> String {
    let bare = !s.is_empty() && s.chars().all(|c| !c.is_whitespace() && !matches!(c, ':' | '{' | '}' | '#' | '"'));
    if bare {
        s.to_string()
    } else {
        format!("\"{s}\"")
    }
}

/// Canonical text form: fixed top-level order, structural layer fields first,
/// then hyperparameters in sorted key order; 2-space indentation.
pub(super) fn serialize(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    if let Some(name) = &spec.name {
        let _ = writeln!(out, "name: {}", word(name));
    }
    let _ = writeln!(out, "world_size: {}", spec.world_size);
    if let Some(m) = spec.members {
        let _ = writeln!(out, "members: {m}");
    }
    if let Some(s) = &spec.split_point {
        let _ = writeln!(out, "split_point: {}", word(s));
    }
    if let Some(r) = spec.rank {
        let _ = writeln!(out, "rank: {r}");
    }
    for input in &spec.inputs {
        out.push_str("input {\n");
        let _ = writeln!(out, "  name: {}", word(&input.name));
        for d in &input.shape {
            let _ = writeln!(out, "  shape: {d}");
        }
        out.push_str("}\n");
    }
    for l in &spec.layers {
        out.push_str("layer {\n");
        let _ = writeln!(out, "  name: {}", word(&l.name));
        let _ = writeln!(out, "  type: {}", l.kind.canonical_name());
        for b in &l.bottoms {
            let _ = writeln!(out, "  bottom: {}", word(b));
        }
        for t in &l.tops {
            let _ = writeln!(out, "  top: {}", word(t));
        }
        for (k, v) in &l.params {
            let _ = writeln!(out, "  {}: {}", word(k), word(v));
        }
        if let Some(root) = l.mpi_root {
            let _ = write!(out, "  mpi_param {{\n    root: {root}\n  }}\n");
        }
        for (label, set) in [("include", l.include_ranks.as_ref()), ("exclude", Some(&l.exclude_ranks))] {
            let Some(set) = set else { continue };
            if label == "exclude" && set.is_empty() {
                continue;
            }
            let _ = writeln!(out, "  {label} {{");
            for r in set {
                let _ = writeln!(out, "    mpi_rank: {r}");
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::losses::LossMode;

    pub(crate) const APPENDIX_STYLE: &str = r#"
name: cifar10_quick_x3
input { name: data shape: 3 shape: 12 shape: 12 }
layer { name: conv1 type: Convolution bottom: data top: conv1 num_output: 4 kernel_size: 3 pad: 1
        include { mpi_rank: 0 } }
layer { name: relu1 type: ReLU bottom: conv1 top: relu1 include { mpi_rank: 0 } }
layer { name: pool1 type: MaxPool bottom: relu1 top: pool1 kernel_size: 2 stride: 2 include { mpi_rank: 0 } }
layer { name: conv2 type: Convolution bottom: pool1 top: conv2 num_output: 4 kernel_size: 3 pad: 1
        include { mpi_rank: 0 } }
layer { name: pool2 type: MaxPool bottom: conv2 top: pool2 kernel_size: 2 stride: 2 include { mpi_rank: 0 } }
layer{
  name: broad
  type: MPIBroadcast
  bottom: pool2
  top: pool2_b
  mpi_param{
    root: 0
  }
  include{
    mpi_rank: 0
    mpi_rank: 1
    mpi_rank: 2
  }
}
layer { name: ip1 type: InnerProduct bottom: pool2_b top: ip1 num_output: 8 }
layer { name: relu3 type: ReLU bottom: ip1 top: relu3 }
layer { name: ip2 type: InnerProduct bottom: relu3 top: ip2 num_output: 5 }
layer{
  name: ExampleLayer
  type: MPIGather
  bottom: ip2
  top: ip2_0
  top: ip2_1
  top: ip2_2
  mpi_param{
    root: 0
  }
  include{
    mpi_rank: 0
    mpi_rank: 1
    mpi_rank: 2
  }
}
layer { name: loss type: ScoreAveragedLoss bottom: ip2_0 bottom: ip2_1 bottom: ip2_2 include { mpi_rank: 0 } }
"#;

    #[test]
    fn parses_broadcast_gather_ensemble() {
        let spec = parse_spec(APPENDIX_STYLE).unwrap();
        assert_eq!(spec.world_size, 3);
        assert_eq!(spec.layers.len(), 11);
        let broad = spec.layer("broad").unwrap();
        assert_eq!(broad.kind, LayerKind::Broadcast);
        assert_eq!(broad.mpi_root, Some(0));
        assert_eq!(spec.member_outputs(), vec!["ip2_0", "ip2_1", "ip2_2"]);
        assert_eq!(spec.loss_mode().unwrap(), LossMode::ScoreAveraged);
        assert_eq!(spec.ensemble_size(), 3);
    }

    #[test]
    fn single_chain_without_mpi_layers() {
        let text = "input { name: data shape: 4 }\n\
                    layer { name: fc1 type: Dense bottom: data top: fc1 num_output: 3 }\n\
                    layer { name: loss type: SoftmaxLoss bottom: fc1 }";
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.world_size, 1);
        assert_eq!(spec.ensemble_size(), 1);
    }

    #[test]
    fn gather_arity_mismatch_is_reported_with_line() {
        let text = APPENDIX_STYLE.replace("  top: ip2_2\n", "");
        match parse_spec(&text) {
            Err(SpecError::GatherArity { tops: 2, group: 3, line, .. }) => assert!(line > 1),
            other => panic!("expected gather arity error, got {other:?}"),
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let unknown = "input { name: data shape: 2 }\nlayer { name: a type: LSTM bottom: data top: a }";
        assert!(matches!(parse_spec(unknown), Err(SpecError::UnknownLayerType { line: 2, .. })));
        let dup = "input { name: data shape: 2 }\n\
                   layer { name: a type: ReLU bottom: data top: a }\n\
                   layer { name: a type: ReLU bottom: a top: b }";
        assert!(matches!(parse_spec(dup), Err(SpecError::DuplicateName { line: 3, .. })));
        let dangling = "input { name: data shape: 2 }\n\nlayer { name: a type: ReLU bottom: nope top: a }";
        assert!(matches!(parse_spec(dangling), Err(SpecError::DanglingBlob { line: 3, .. })));
        let syntax = "layer { name: a type: ReLU";
        assert!(matches!(parse_spec(syntax), Err(SpecError::Syntax { .. })));
        let missing = "input { name: data shape: 2 }\nlayer { name: a type: Dense bottom: data top: a }";
        assert!(matches!(parse_spec(missing), Err(SpecError::MissingField { .. })));
    }

    #[test]
    fn comments_and_quotes_are_accepted() {
        let text = "# leading comment\ninput { name: \"data\" shape: 2 } # trailing\n\
                    layer { name: \"fc 1\" type: Dense bottom: data top: fc1 num_output: 2 }";
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.layers[0].name, "fc 1");
        let again = parse_spec(&spec.to_text()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn serialization_is_canonical() {
        let spec = parse_spec(APPENDIX_STYLE).unwrap();
        let text = spec.to_text();
        assert!(text.contains("  type: Conv2D\n  bottom: data\n  top: conv1\n  kernel_size: 3\n  num_output: 4\n  pad: 1\n"));
        let reparsed = parse_spec(&text).unwrap();
        assert_eq!(reparsed, spec);
        assert_eq!(reparsed.to_text(), text);
    }
}
