//! Dynamic call tree of instrumented regions and user parameters.
//!
//! Every distinct root-to-node path is a runtime situation (RTS). Function
//! nodes carry inclusive timing; parameter nodes only split context.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROOT_NAME: &str = "main";
pub const DEFAULT_THRESHOLD_MS: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CallTreeError {
    #[error("exit of {got:?} does not match innermost open region {expected:?}")]
    MismatchedExit { expected: Option<String>, got: String },
    #[error("region {0:?} entered with no open region (the root must be {ROOT_NAME:?})")]
    NoOpenRegion(String),
    #[error("timestamp {got} ms precedes previous event at {last} ms")]
    NonMonotonic { last: f64, got: f64 },
    #[error("bad rts id {0:?}")]
    BadRtsId(String),
    #[error("bad event on line {line}: {msg}")]
    BadEvent { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Function,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Function(String),
    Parameter(String, String),
}

impl Segment {
    pub fn kind(&self) -> NodeKind {
        match self {
            Segment::Function(_) => NodeKind::Function,
            Segment::Parameter(..) => NodeKind::Parameter,
        }
    }
}

/// Identity of a runtime situation: the path from the root to a node.
///
/// Rendered as `/`-joined segments with parameters as `name=value`;
/// `\`, `/` and `=` inside names are backslash-escaped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RtsId {
    path: Vec<Segment>,
}

impl RtsId {
    pub fn root() -> Self {
        Self {
            path: vec![Segment::Function(ROOT_NAME.to_string())],
        }
    }

    pub fn from_segments(path: Vec<Segment>) -> Result<Self, CallTreeError> {
        match path.first() {
            Some(Segment::Function(n)) if n == ROOT_NAME => Ok(Self { path }),
            _ => Err(CallTreeError::BadRtsId(format!("{path:?}"))),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }
}

fn escape(s: &str, out: &mut String) {
    for c in s.chars() {
        if matches!(c, '\\' | '/' | '=') {
            out.push('\\');
        }
        out.push(c);
    }
}

impl fmt::Display for RtsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (i, seg) in self.path.iter().enumerate() {
            if i > 0 {
                out.push('/');
            }
            match seg {
                Segment::Function(n) => escape(n, &mut out),
                Segment::Parameter(n, v) => {
                    escape(n, &mut out);
                    out.push('=');
                    escape(v, &mut out);
                }
            }
        }
        f.write_str(&out)
    }
}

impl FromStr for RtsId {
    type Err = CallTreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CallTreeError::BadRtsId(s.to_string());
        let mut path = Vec::new();
        // (parts of the current segment split on unescaped '=')
        let mut parts: Vec<String> = vec![String::new()];
        let mut chars = s.chars();
        let mut finish = |parts: &mut Vec<String>| -> Result<(), CallTreeError> {
            let seg = match std::mem::replace(parts, vec![String::new()]).as_slice() {
                [n] => Segment::Function(n.clone()),
                [n, v] => Segment::Parameter(n.clone(), v.clone()),
                _ => return Err(bad()),
            };
            path.push(seg);
            Ok(())
        };
        while let Some(c) = chars.next() {
            match c {
                '\\' => parts.last_mut().unwrap().push(chars.next().ok_or_else(bad)?),
                '/' => finish(&mut parts)?,
                '=' => parts.push(String::new()),
                c => parts.last_mut().unwrap().push(c),
            }
        }
        finish(&mut parts)?;
        RtsId::from_segments(path).map_err(|_| bad())
    }
}

impl Serialize for RtsId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RtsId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallTreeNode {
    pub kind: NodeKind,
    pub name: String,
    pub param_value: Option<String>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Number of enters.
    pub call_count: u64,
    /// Number of exits, i.e. timed invocations.
    pub completed_calls: u64,
    /// Inclusive runtime over all completed invocations.
    pub total_time_ms: f64,
}

impl CallTreeNode {
    pub fn mean_time_ms(&self) -> Option<f64> {
        (self.completed_calls > 0).then(|| self.total_time_ms / self.completed_calls as f64)
    }

    fn segment(&self) -> Segment {
        match self.kind {
            NodeKind::Function => Segment::Function(self.name.clone()),
            NodeKind::Parameter => {
                Segment::Parameter(self.name.clone(), self.param_value.clone().unwrap_or_default())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Frame {
    node: NodeId,
    /// `None` for parameter frames.
    entered_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CallTree {
    nodes: Vec<CallTreeNode>,
    stack: Vec<Frame>,
    last_ms: Option<f64>,
}

impl CallTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&self) -> Option<NodeId> {
        (!self.nodes.is_empty()).then_some(NodeId(0))
    }

    pub fn node(&self, id: NodeId) -> &CallTreeNode {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Innermost open node (function or parameter).
    pub fn current(&self) -> Option<NodeId> {
        self.stack.last().map(|f| f.node)
    }

    /// Nodes on the open path, root first.
    pub fn open_path(&self) -> Vec<NodeId> {
        self.stack.iter().map(|f| f.node).collect()
    }

    fn tick(&mut self, t: f64) -> Result<(), CallTreeError> {
        if let Some(last) = self.last_ms {
            if t < last {
                return Err(CallTreeError::NonMonotonic { last, got: t });
            }
        }
        self.last_ms = Some(t);
        Ok(())
    }

    fn child(&mut self, parent: Option<NodeId>, seg: Segment) -> NodeId {
        let existing = match parent {
            Some(p) => self.nodes[p.0]
                .children
                .iter()
                .copied()
                .find(|c| self.nodes[c.0].segment() == seg),
            None => self.root(),
        };
        if let Some(id) = existing {
            return id;
        }
        let id = NodeId(self.nodes.len());
        let (kind, name, param_value) = match seg {
            Segment::Function(n) => (NodeKind::Function, n, None),
            Segment::Parameter(n, v) => (NodeKind::Parameter, n, Some(v)),
        };
        self.nodes.push(CallTreeNode {
            kind,
            name,
            param_value,
            parent,
            children: Vec::new(),
            call_count: 0,
            completed_calls: 0,
            total_time_ms: 0.0,
        });
        if let Some(p) = parent {
            self.nodes[p.0].children.push(id);
        }
        id
    }

    pub fn enter_region(&mut self, name: &str, timestamp_ms: f64) -> Result<NodeId, CallTreeError> {
        let parent = self.current();
        if parent.is_none() && name != ROOT_NAME {
            return Err(CallTreeError::NoOpenRegion(name.to_string()));
        }
        self.tick(timestamp_ms)?;
        let id = self.child(parent, Segment::Function(name.to_string()));
        self.nodes[id.0].call_count += 1;
        self.stack.push(Frame {
            node: id,
            entered_ms: Some(timestamp_ms),
        });
        Ok(id)
    }

    /// Closes the innermost open function (and any parameter context opened
    /// inside it). Returns the elapsed time.
    pub fn exit_region(&mut self, name: &str, timestamp_ms: f64) -> Result<f64, CallTreeError> {
        let top = self.stack.iter().rposition(|f| f.entered_ms.is_some());
        let Some(pos) = top else {
            return Err(CallTreeError::MismatchedExit {
                expected: None,
                got: name.to_string(),
            });
        };
        let frame = &self.stack[pos];
        let open = &self.nodes[frame.node.0].name;
        if open != name {
            return Err(CallTreeError::MismatchedExit {
                expected: Some(open.clone()),
                got: name.to_string(),
            });
        }
        let entered = frame.entered_ms.expect("function frame");
        let node = frame.node;
        self.tick(timestamp_ms)?;
        let elapsed = timestamp_ms - entered;
        self.stack.truncate(pos);
        let n = &mut self.nodes[node.0];
        n.total_time_ms += elapsed;
        n.completed_calls += 1;
        Ok(elapsed)
    }

    /// Opens a parameter context under the innermost open region. Setting a
    /// parameter that is already open replaces its value.
    pub fn set_parameter(&mut self, name: &str, value: &str) -> Result<NodeId, CallTreeError> {
        let func = self
            .stack
            .iter()
            .rposition(|f| f.entered_ms.is_some())
            .ok_or_else(|| CallTreeError::NoOpenRegion(format!("{name}={value}")))?;
        if let Some(same) = (func + 1..self.stack.len()).find(|i| self.nodes[self.stack[*i].node.0].name == name) {
            self.stack.truncate(same);
        }
        let parent = self.current();
        let id = self.child(parent, Segment::Parameter(name.to_string(), value.to_string()));
        self.stack.push(Frame {
            node: id,
            entered_ms: None,
        });
        Ok(id)
    }

    pub fn apply(&mut self, ev: &RegionEvent) -> Result<Option<NodeId>, CallTreeError> {
        match ev.kind {
            EventKind::Enter => self.enter_region(&ev.name, ev.t_ms).map(Some),
            EventKind::Exit => self.exit_region(&ev.name, ev.t_ms).map(|_| None),
            EventKind::Parameter => {
                self.tick(ev.t_ms)?;
                self.set_parameter(&ev.name, ev.value.as_deref().unwrap_or("")).map(Some)
            }
        }
    }

    pub fn rts_path(&self, id: NodeId) -> RtsId {
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            path.push(self.nodes[n.0].segment());
            cur = self.nodes[n.0].parent;
        }
        path.reverse();
        RtsId { path }
    }

    pub fn find(&self, rts: &RtsId) -> Option<NodeId> {
        let mut segs = rts.path.iter();
        if segs.next()? != &Segment::Function(ROOT_NAME.to_string()) {
            return None;
        }
        let mut cur = self.root()?;
        for seg in segs {
            cur = *self.nodes[cur.0].children.iter().find(|c| &self.nodes[c.0].segment() == seg)?;
        }
        Some(cur)
    }

    /// Function children, looking through parameter nodes.
    pub fn function_children(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut todo: Vec<NodeId> = self.nodes[id.0].children.iter().rev().copied().collect();
        while let Some(c) = todo.pop() {
            match self.nodes[c.0].kind {
                NodeKind::Function => out.push(c),
                NodeKind::Parameter => todo.extend(self.nodes[c.0].children.iter().rev()),
            }
        }
        out
    }

    /// Whether a function node should get its own tuner.
    ///
    /// Its mean inclusive runtime must exceed `threshold_ms`. A leaf then
    /// qualifies. An internal node qualifies only if its short children
    /// (mean below the threshold) account for more time than its long ones.
    pub fn is_tuning_candidate(&self, id: NodeId, threshold_ms: f64) -> bool {
        let node = &self.nodes[id.0];
        if node.kind != NodeKind::Function {
            return false;
        }
        match node.mean_time_ms() {
            Some(mean) if mean > threshold_ms => {}
            _ => return false,
        }
        let children = self.function_children(id);
        if children.is_empty() {
            return true;
        }
        let (mut short, mut long) = (0.0, 0.0);
        for c in children {
            let child = &self.nodes[c.0];
            match child.mean_time_ms() {
                Some(m) if m < threshold_ms => short += child.total_time_ms,
                Some(_) => long += child.total_time_ms,
                None => {}
            }
        }
        short > long
    }

    /// All candidate nodes, in creation order.
    pub fn candidates(&self, threshold_ms: f64) -> Vec<RtsId> {
        self.node_ids()
            .filter(|id| self.is_tuning_candidate(*id, threshold_ms))
            .map(|id| self.rts_path(id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Enter,
    Exit,
    Parameter,
}

/// One instrumentation event, as found in JSON-lines replay files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEvent {
    pub kind: EventKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    pub t_ms: f64,
}

impl RegionEvent {
    pub fn enter(name: &str, t_ms: f64) -> Self {
        Self {
            kind: EventKind::Enter,
            name: name.to_string(),
            value: None,
            t_ms,
        }
    }

    pub fn exit(name: &str, t_ms: f64) -> Self {
        Self {
            kind: EventKind::Exit,
            name: name.to_string(),
            value: None,
            t_ms,
        }
    }

    pub fn parameter(name: &str, value: &str, t_ms: f64) -> Self {
        Self {
            kind: EventKind::Parameter,
            name: name.to_string(),
            value: Some(value.to_string()),
            t_ms,
        }
    }
}

/// Parses a JSON-lines event stream. Blank lines are skipped.
pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<RegionEvent>, CallTreeError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CallTreeError::BadEvent {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CallTreeError::BadEvent {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn replay(events: &[RegionEvent]) -> Result<CallTree, CallTreeError> {
    let mut tree = CallTree::new();
    for ev in events {
        tree.apply(ev)?;
    }
    Ok(tree)
}
