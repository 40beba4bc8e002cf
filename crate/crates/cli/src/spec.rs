//! Declarative model specs: parsing, validation and graph construction.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer};
use serde_json::Value;
use vmp_core::{AnnealingSchedule, FamilyId, FitOptions, Graph, NodeId, NodeKind, SviSchedule};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default, deserialize_with = "one_or_many")]
    pub observe: Vec<ObserveSpec>,
    #[serde(default)]
    pub engine: EngineSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub kind: NodeKindSpec,
    pub family: Option<String>,
    /// Event dimension; inferred from the parents when absent.
    pub dim: Option<usize>,
    #[serde(default)]
    pub parents: Vec<ParentSpec>,
    /// Categorical node selecting the mixture component.
    pub gate: Option<String>,
    #[serde(default)]
    pub plates: Vec<usize>,
    /// Value of a constant node, as a (nested) JSON array or number.
    pub constant: Option<Value>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindSpec {
    Constant,
    #[default]
    Stochastic,
    Mixture,
    SumProduct,
}

/// A parent given by name or as an inline constant.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ParentSpec {
    Name(String),
    Literal(Value),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveSpec {
    pub node: String,
    /// CSV file, relative to the spec file.
    pub data: Option<PathBuf>,
    pub missing_token: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Vb,
    Annealed,
    Svi,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    #[serde(default)]
    pub mode: Mode,
    pub max_sweeps: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub schedule: Option<ScheduleSpec>,
    /// Nodes whose posteriors are randomized before fitting.
    #[serde(default)]
    pub initialize: Vec<String>,
    /// Update order; latent nodes in declaration order by default.
    pub order: Option<Vec<String>>,
}

/// Annealing fields (`betas`, or `start` and `steps`) or SVI fields.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub betas: Option<Vec<f64>>,
    pub start: Option<f64>,
    pub steps: Option<usize>,
    pub observed: Option<String>,
    pub axis: Option<usize>,
    pub batch_size: Option<usize>,
    pub delay: Option<f64>,
    pub forgetting: Option<f64>,
    pub globals: Option<Vec<String>>,
}

impl ScheduleSpec {
    fn has_annealing(&self) -> bool {
        self.betas.is_some() || self.start.is_some() || self.steps.is_some()
    }

    fn has_svi(&self) -> bool {
        self.observed.is_some()
            || self.axis.is_some()
            || self.batch_size.is_some()
            || self.delay.is_some()
            || self.forgetting.is_some()
            || self.globals.is_some()
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<ObserveSpec>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(ObserveSpec),
        Many(Vec<ObserveSpec>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(o) => vec![o],
        OneOrMany::Many(v) => v,
    })
}

/// Parse and check a spec without building it.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_str(text).map_err(|e| CliError::from_json(&e))?;
    check_structure(&spec)?;
    Ok(spec)
}

fn check_structure(spec: &ModelSpec) -> Result<()> {
    if spec.nodes.is_empty() {
        return Err(CliError::validation("nodes", "no nodes"));
    }
    let mut index = HashMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if n.name.is_empty() {
            return Err(CliError::validation(format!("nodes[{i}].name"), "empty name"));
        }
        if index.insert(n.name.as_str(), i).is_some() {
            return Err(CliError::validation(
                format!("nodes[{i}].name"),
                format!("duplicate name {:?}", n.name),
            ));
        }
    }
    let resolve = |path: String, name: &str| -> Result<usize> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| CliError::validation(path, format!("unresolved name {name:?}")))
    };

    let mut edges: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
    for (i, n) in spec.nodes.iter().enumerate() {
        let at = |field: &str| format!("nodes[{i}].{field}");
        match n.kind {
            NodeKindSpec::Constant => {
                if n.constant.is_none() {
                    return Err(CliError::validation(at("constant"), "constant node needs a value"));
                }
                if !n.parents.is_empty() || n.gate.is_some() || n.family.is_some() {
                    return Err(CliError::validation(
                        at("kind"),
                        "constant nodes take no family, parents or gate",
                    ));
                }
            }
            NodeKindSpec::Stochastic | NodeKindSpec::Mixture => {
                let family = n
                    .family
                    .as_deref()
                    .ok_or_else(|| CliError::validation(at("family"), "missing family"))?;
                family_kind(family)
                    .ok_or_else(|| CliError::validation(at("family"), format!("unknown family {family:?}")))?;
            }
            NodeKindSpec::SumProduct => {
                if n.parents.len() != 2 {
                    return Err(CliError::validation(
                        at("parents"),
                        "sum_product takes exactly two parents",
                    ));
                }
            }
        }
        if n.kind != NodeKindSpec::Constant && n.constant.is_some() {
            return Err(CliError::validation(
                at("constant"),
                "only constant nodes carry a value",
            ));
        }
        match (n.kind, &n.gate) {
            (NodeKindSpec::Mixture, None) => return Err(CliError::validation(at("gate"), "mixture needs a gate")),
            (NodeKindSpec::Mixture, Some(g)) => edges[i].push(resolve(at("gate"), g)?),
            (_, Some(_)) => return Err(CliError::validation(at("gate"), "only mixtures take a gate")),
            _ => {}
        }
        for (j, p) in n.parents.iter().enumerate() {
            if let ParentSpec::Name(name) = p {
                edges[i].push(resolve(at(&format!("parents[{j}]")), name)?);
            }
        }
    }
    if let Some(cycle) = find_cycle(&edges) {
        let names: Vec<&str> = cycle.iter().map(|&i| spec.nodes[i].name.as_str()).collect();
        return Err(CliError::validation("nodes", format!("cycle: {}", names.join(" → "))));
    }
    for (i, targets) in edges.iter().enumerate() {
        if let Some(&j) = targets.iter().find(|&&j| j > i) {
            return Err(CliError::validation(
                format!("nodes[{i}]"),
                format!(
                    "{:?} refers to {:?}, which is declared later",
                    spec.nodes[i].name, spec.nodes[j].name
                ),
            ));
        }
    }

    for (i, o) in spec.observe.iter().enumerate() {
        let j = resolve(format!("observe[{i}].node"), &o.node)?;
        if !matches!(spec.nodes[j].kind, NodeKindSpec::Stochastic | NodeKindSpec::Mixture) {
            return Err(CliError::validation(
                format!("observe[{i}].node"),
                "only stochastic nodes can be observed",
            ));
        }
    }
    let e = &spec.engine;
    for (i, name) in e.initialize.iter().enumerate() {
        resolve(format!("engine.initialize[{i}]"), name)?;
    }
    for (i, name) in e.order.iter().flatten().enumerate() {
        resolve(format!("engine.order[{i}]"), name)?;
    }
    let schedule = e.schedule.clone().unwrap_or_default();
    if let Some(name) = &schedule.observed {
        resolve("engine.schedule.observed".into(), name)?;
    }
    for (i, name) in schedule.globals.iter().flatten().enumerate() {
        resolve(format!("engine.schedule.globals[{i}]"), name)?;
    }
    match e.mode {
        Mode::Vb if schedule.has_annealing() || schedule.has_svi() => {
            Err(CliError::validation("engine.schedule", "mode vb takes no schedule"))
        }
        Mode::Annealed | Mode::Svi if schedule.has_annealing() && schedule.has_svi() => Err(CliError::validation(
            "engine.schedule",
            "annealing cannot be combined with SVI",
        )),
        Mode::Annealed if !schedule.has_annealing() => Err(CliError::validation(
            "engine.schedule",
            "annealing needs betas, or start and steps",
        )),
        Mode::Annealed if schedule.has_svi() => Err(CliError::validation(
            "engine.schedule",
            "annealing cannot be combined with SVI",
        )),
        Mode::Svi if schedule.has_annealing() => Err(CliError::validation(
            "engine.schedule",
            "annealing cannot be combined with SVI",
        )),
        Mode::Svi if schedule.observed.is_none() || schedule.batch_size.is_none() => Err(CliError::validation(
            "engine.schedule",
            "svi needs observed and batch_size",
        )),
        _ => Ok(()),
    }
}

/// A cycle as a closed walk `a, b, ..., a` along parent references.
fn find_cycle(edges: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    fn visit(v: usize, edges: &[Vec<usize>], marks: &mut [Mark], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        marks[v] = Mark::Open;
        stack.push(v);
        for &w in &edges[v] {
            match marks[w] {
                Mark::Open => {
                    let start = stack.iter().position(|&s| s == w).expect("open node is on the stack");
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(w);
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = visit(w, edges, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[v] = Mark::Done;
        None
    }
    let mut marks = vec![Mark::New; edges.len()];
    (0..edges.len()).find_map(|v| {
        if marks[v] == Mark::New {
            visit(v, edges, &mut marks, &mut Vec::new())
        } else {
            None
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FamilyKind {
    Gaussian,
    Gamma,
    Wishart,
    Dirichlet,
    Categorical,
}

fn family_kind(name: &str) -> Option<FamilyKind> {
    Some(match name.to_ascii_lowercase().as_str() {
        "gaussian" | "normal" => FamilyKind::Gaussian,
        "gamma" => FamilyKind::Gamma,
        "wishart" => FamilyKind::Wishart,
        "dirichlet" => FamilyKind::Dirichlet,
        "categorical" => FamilyKind::Categorical,
        _ => return None,
    })
}

/// Shape and row-major values of a (nested) JSON array or number.
pub fn literal_array(v: &Value) -> std::result::Result<(Vec<usize>, Vec<f64>), String> {
    match v {
        Value::Number(n) => Ok((Vec::new(), vec![n.as_f64().ok_or("number out of range")?])),
        Value::Array(items) => {
            if items.is_empty() {
                return Err("empty array".into());
            }
            let mut shape = None;
            let mut data = Vec::new();
            for item in items {
                let (s, d) = literal_array(item)?;
                if shape.get_or_insert_with(|| s.clone()) != &s {
                    return Err("ragged array".into());
                }
                data.extend(d);
            }
            let mut full = vec![items.len()];
            full.extend(shape.unwrap_or_default());
            Ok((full, data))
        }
        _ => Err(format!("expected a number or array, found {v}")),
    }
}

/// A built graph with its named nodes.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: Graph,
    /// Declared nodes in declaration order.
    pub nodes: Vec<(String, NodeId)>,
    lookup: HashMap<String, NodeId>,
}

impl Model {
    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.lookup.get(name).copied()
    }

    fn require(&self, path: &str, name: &str) -> Result<NodeId> {
        self.id(name)
            .ok_or_else(|| CliError::validation(path, format!("unresolved name {name:?}")))
    }
}

fn model_error(path: String, e: vmp_core::Error) -> CliError {
    CliError::validation(path, e.to_string())
}

/// Event dimension a parent exposes to a slot reading it.
fn exposed_dim(graph: &Graph, shapes: &HashMap<NodeId, Vec<usize>>, id: NodeId) -> Option<usize> {
    match graph.kind(id).ok()? {
        NodeKind::Constant => Some(shapes.get(&id)?.first().copied().unwrap_or(1)),
        NodeKind::Stochastic(f) | NodeKind::Mixture { family: f, .. } => Some(f.dim()),
        NodeKind::SumProduct { .. } => Some(1),
    }
}

/// Build the graph of a checked spec. Observations are not attached.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    let mut graph = Graph::new();
    let mut lookup: HashMap<String, NodeId> = HashMap::new();
    let mut shapes: HashMap<NodeId, Vec<usize>> = HashMap::new();
    let mut nodes = Vec::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        let at = format!("nodes[{i}] ({})", n.name);
        let mut parents = Vec::new();
        for (j, p) in n.parents.iter().enumerate() {
            let id = match p {
                ParentSpec::Name(name) => lookup[name],
                ParentSpec::Literal(v) => {
                    let (shape, data) =
                        literal_array(v).map_err(|m| CliError::validation(format!("nodes[{i}].parents[{j}]"), m))?;
                    let id = graph.add_value(&shape, data).map_err(|e| model_error(at.clone(), e))?;
                    shapes.insert(id, shape);
                    id
                }
            };
            parents.push(id);
        }
        let family = match n.family.as_deref().and_then(family_kind) {
            None => None,
            Some(FamilyKind::Gamma) => Some(FamilyId::Gamma),
            Some(kind) => {
                let source = usize::from(kind == FamilyKind::Wishart);
                let dim = n
                    .dim
                    .or_else(|| parents.get(source).and_then(|&p| exposed_dim(&graph, &shapes, p)))
                    .ok_or_else(|| {
                        CliError::validation(format!("nodes[{i}].dim"), "cannot infer the dimension; give dim")
                    })?;
                Some(match kind {
                    FamilyKind::Gaussian => FamilyId::Gaussian(dim),
                    FamilyKind::Wishart => FamilyId::Wishart(dim),
                    FamilyKind::Dirichlet => FamilyId::Dirichlet(dim),
                    FamilyKind::Categorical => FamilyId::Categorical(dim),
                    FamilyKind::Gamma => unreachable!(),
                })
            }
        };
        let built = match n.kind {
            NodeKindSpec::Constant => {
                let value = n.constant.as_ref().expect("checked");
                let (shape, data) =
                    literal_array(value).map_err(|m| CliError::validation(format!("nodes[{i}].constant"), m))?;
                if !shape.starts_with(&n.plates) {
                    return Err(CliError::validation(
                        format!("nodes[{i}].constant"),
                        format!("value of shape {shape:?} does not start with plates {:?}", n.plates),
                    ));
                }
                let value_shape = shape[n.plates.len()..].to_vec();
                graph.add_constant(&n.plates, &value_shape, data).inspect(|&id| {
                    shapes.insert(id, value_shape);
                })
            }
            NodeKindSpec::Stochastic => graph.add_stochastic(family.expect("checked"), &parents, &n.plates),
            NodeKindSpec::Mixture => {
                let gate = lookup[n.gate.as_deref().expect("checked")];
                graph.add_mixture(gate, family.expect("checked"), &parents, &n.plates)
            }
            NodeKindSpec::SumProduct => graph.add_sum_product(parents[0], parents[1], &n.plates),
        };
        let id = built.map_err(|e| model_error(at, e))?;
        lookup.insert(n.name.clone(), id);
        nodes.push((n.name.clone(), id));
    }
    Ok(Model { graph, nodes, lookup })
}

/// How to run a fit: the engine options plus any schedule.
#[derive(Debug, Clone)]
pub struct FitPlan {
    pub mode: Mode,
    pub options: FitOptions,
    pub annealing: Option<AnnealingSchedule>,
    pub svi: Option<SviSchedule>,
    pub initialize: Vec<NodeId>,
}

/// Command-line overrides of the engine block.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_sweeps: Option<usize>,
    pub tol: Option<f64>,
}

pub fn fit_plan(spec: &ModelSpec, model: &Model, overrides: &Overrides) -> Result<FitPlan> {
    let e = &spec.engine;
    let defaults = FitOptions::default();
    // Latent nodes missing from an explicit order (such as partially
    // observed ones) follow it in declaration order.
    let order = match &e.order {
        None => None,
        Some(names) => {
            let mut order = names
                .iter()
                .enumerate()
                .map(|(i, n)| model.require(&format!("engine.order[{i}]"), n))
                .collect::<Result<Vec<_>>>()?;
            for id in model.graph.latent_nodes() {
                if !order.contains(&id) {
                    order.push(id);
                }
            }
            Some(order)
        }
    };
    let options = FitOptions {
        order,
        max_sweeps: overrides.max_sweeps.or(e.max_sweeps).unwrap_or(defaults.max_sweeps),
        tol: overrides.tol.or(e.tol).unwrap_or(defaults.tol),
        seed: overrides.seed.or(e.seed).unwrap_or(defaults.seed),
    };
    let initialize = e
        .initialize
        .iter()
        .enumerate()
        .map(|(i, n)| model.require(&format!("engine.initialize[{i}]"), n))
        .collect::<Result<Vec<_>>>()?;
    let s = e.schedule.clone().unwrap_or_default();
    let bad = |e: vmp_core::Error| CliError::validation("engine.schedule", e.to_string());
    let annealing = match e.mode {
        Mode::Annealed => Some(match (&s.betas, s.start, s.steps) {
            (Some(b), None, None) => AnnealingSchedule::new(b.clone()).map_err(bad)?,
            (None, Some(start), Some(steps)) => AnnealingSchedule::geometric(start, steps).map_err(bad)?,
            _ => {
                return Err(CliError::validation(
                    "engine.schedule",
                    "give either betas or both start and steps",
                ))
            }
        }),
        _ => None,
    };
    let svi = match e.mode {
        Mode::Svi => {
            let observed = model.require("engine.schedule.observed", s.observed.as_deref().expect("checked"))?;
            let globals = match &s.globals {
                None => None,
                Some(names) => Some(
                    names
                        .iter()
                        .enumerate()
                        .map(|(i, n)| model.require(&format!("engine.schedule.globals[{i}]"), n))
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            Some(SviSchedule {
                observed,
                axis: s.axis.unwrap_or(0),
                batch_size: s.batch_size.expect("checked"),
                delay: s.delay.unwrap_or(1.0),
                forgetting: s.forgetting.unwrap_or(0.7),
                globals,
            })
        }
        _ => None,
    };
    Ok(FitPlan {
        mode: e.mode,
        options,
        annealing,
        svi,
        initialize,
    })
}
