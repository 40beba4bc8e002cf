//! Model graphs: constants, stochastic nodes, mixtures and sum-product nodes
//! connected by the conjugate message protocol.
//!
//! Every per-node quantity (natural parameters, moments, messages) is held
//! as one [`Field`] per block. Fields keep an axis collapsed to size one when
//! every element along it is identical, so a latent variable whose posterior
//! covariance is shared across data points is factored once. Turning
//! broadcasting off materializes every axis instead; results are the same up
//! to rounding.
//!
//! Unobserved elements of a node without children are integrated out: they
//! send no messages and add nothing to the bound.

use std::borrow::Cow;
use std::cell::OnceCell;

use crate::error::{Error, Result};
use crate::expfam::{
    self, expected_log_partition_rule, log_base_measure, message_rules, posterior_fields, prior_rules, statistics_into,
    weighted_dot, Dep, FamilyId, MomentKind, Rule, SlotKind,
};
use crate::linalg;
use crate::plates::{apply, broadcast_shapes, Field};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Constant,
    Stochastic(FamilyId),
    /// Conditioned on gate value k, distributed as `family` with the k-th
    /// slice of every component parent.
    Mixture {
        family: FamilyId,
        clusters: usize,
    },
    /// Deterministic inner product of two Gaussian vectors.
    SumProduct {
        dim: usize,
    },
}

/// How a parent's moments are read through a slot.
#[derive(Debug, Clone)]
enum Adapter {
    Direct,
    /// Gamma moments used as an isotropic d x d precision.
    GammaIsotropic(usize),
    /// Constant converted to the slot's moment layout at bind time.
    Constant(Vec<Field>),
}

#[derive(Debug, Clone)]
struct Binding {
    parent: NodeId,
    adapter: Adapter,
}

#[derive(Debug, Clone)]
struct Observation {
    /// Sufficient statistics, full plate shape (unused where masked out).
    stats: Vec<Field>,
    /// 1.0 where observed; `None` when every element is observed.
    mask: Option<Field>,
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    plates: Vec<usize>,
    slots: Vec<Binding>,
    gate: Option<Binding>,
    children: Vec<NodeId>,
    /// Raw values and per-element value shape of a constant.
    constant: Option<(Field, Vec<usize>)>,
    natural: Vec<Field>,
    /// Posterior moments with observed elements substituted.
    moments: Vec<Field>,
    log_partition: Field,
    /// Gaussian posterior covariance, shaped like the precision block.
    covariance: Option<Field>,
    observation: Option<Observation>,
    batch_weight: Option<Field>,
    derived: OnceCell<Vec<Field>>,
}

impl Node {
    fn new(kind: NodeKind, plates: Vec<usize>) -> Self {
        Self {
            kind,
            plates,
            slots: Vec::new(),
            gate: None,
            children: Vec::new(),
            constant: None,
            natural: Vec::new(),
            moments: Vec::new(),
            log_partition: Field::scalar(0.0),
            covariance: None,
            observation: None,
            batch_weight: None,
            derived: OnceCell::new(),
        }
    }

    fn family(&self) -> Option<FamilyId> {
        match self.kind {
            NodeKind::Stochastic(f) | NodeKind::Mixture { family: f, .. } => Some(f),
            _ => None,
        }
    }

    fn fully_observed(&self) -> bool {
        matches!(&self.observation, Some(o) if o.mask.is_none())
    }
}

/// Per-axis sharing of one natural-parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisMode {
    /// Every element along the axis carries identical parameters and is
    /// computed once.
    Shared,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastPlan {
    pub plates: Vec<usize>,
    /// `blocks[b][axis]` for each natural-parameter block.
    pub blocks: Vec<Vec<AxisMode>>,
}

impl BroadcastPlan {
    pub fn axis(&self, block: usize, axis: usize) -> AxisMode {
        self.blocks[block][axis]
    }

    /// An axis is shared by the node when every block shares it.
    pub fn node_axis(&self, axis: usize) -> AxisMode {
        if self.blocks.iter().all(|b| b[axis] == AxisMode::Shared) {
            AxisMode::Shared
        } else {
            AxisMode::Expanded
        }
    }
}

/// Weight applied to a node's likelihood terms and outgoing messages.
#[derive(Debug, Clone)]
enum Weight {
    Zero,
    One,
    Field(Field),
}

impl Weight {
    fn field(&self) -> Option<&Field> {
        match self {
            Weight::Field(f) => Some(f),
            _ => None,
        }
    }
}

/// A model under construction or being fitted.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    expand: bool,
    beta: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn ones(rank: usize) -> Vec<usize> {
    vec![1; rank]
}

fn with_cluster_axis(plates: &[usize], k: usize) -> Vec<usize> {
    let mut f = plates.to_vec();
    f.push(k);
    f
}

/// Product that treats `0 * inf` as zero.
fn safe_mul(w: f64, v: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * v
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            expand: false,
            beta: 1.0,
        }
    }

    /// Enable (default) or disable broadcast elision. Disabling materializes
    /// every plate element of every stored field.
    pub fn set_broadcast(&mut self, on: bool) -> Result<()> {
        self.expand = !on;
        for id in 0..self.nodes.len() {
            self.nodes[id].derived = OnceCell::new();
            if self.nodes[id].family().is_some() {
                let plates = self.nodes[id].plates.clone();
                let natural: Vec<Field> = self.nodes[id]
                    .natural
                    .iter()
                    .map(|f| self.frame_field(f, &plates))
                    .collect();
                self.set_posterior(id, natural)?;
            }
        }
        Ok(())
    }

    pub fn broadcast(&self) -> bool {
        !self.expand
    }

    fn frame_field(&self, f: &Field, plates: &[usize]) -> Field {
        if self.expand {
            f.expand_to(plates)
        } else {
            f.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn kind(&self, id: NodeId) -> Result<&NodeKind> {
        Ok(&self.node(id)?.kind)
    }

    pub fn plates(&self, id: NodeId) -> Result<&[usize]> {
        Ok(&self.node(id)?.plates)
    }

    pub fn family(&self, id: NodeId) -> Result<Option<FamilyId>> {
        Ok(self.node(id)?.family())
    }

    pub fn parents(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let n = self.node(id)?;
        Ok(n.gate.iter().chain(&n.slots).map(|b| b.parent).collect())
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId]> {
        Ok(&self.node(id)?.children)
    }

    /// Whether the node carries an observation with at least one observed
    /// element.
    pub fn is_observed(&self, id: NodeId) -> Result<bool> {
        Ok(self.node(id)?.observation.is_some())
    }

    pub fn is_fully_observed(&self, id: NodeId) -> Result<bool> {
        Ok(self.node(id)?.fully_observed())
    }

    /// Stochastic nodes that still have unobserved elements, in
    /// construction order.
    pub fn latent_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].family().is_some() && !self.nodes[i].fully_observed())
            .collect()
    }

    pub fn observed_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].observation.is_some())
            .collect()
    }

    /// Observation mask expanded to the node's plates, if partially observed.
    pub fn mask(&self, id: NodeId) -> Result<Option<Vec<bool>>> {
        Ok(self
            .node(id)?
            .observation
            .as_ref()
            .and_then(|o| o.mask.as_ref())
            .map(|m| m.data().iter().map(|&v| v == 1.0).collect()))
    }

    fn moment_kind(&self, id: NodeId) -> MomentKind {
        let n = &self.nodes[id];
        match &n.kind {
            NodeKind::Stochastic(f) | NodeKind::Mixture { family: f, .. } => f.moment_kind(),
            NodeKind::SumProduct { .. } => MomentKind::Gaussian(1),
            NodeKind::Constant => MomentKind::Fixed(n.constant.as_ref().expect("constant value").1.clone()),
        }
    }

    // -----------------------------------------------------------------------
    // Construction
    // -----------------------------------------------------------------------

    /// Add a constant with the given plates and per-element value shape;
    /// `data` is row-major over `plates ++ value_shape`.
    pub fn add_constant(&mut self, plates: &[usize], value_shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        let size: usize = value_shape.iter().product();
        let count: usize = plates.iter().product();
        if data.len() != size * count {
            return Err(Error::Shape(format!(
                "constant of plates {plates:?} and value shape {value_shape:?} needs {} numbers, got {}",
                size * count,
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("constant contains NaN".into()));
        }
        let mut node = Node::new(NodeKind::Constant, plates.to_vec());
        node.constant = Some((Field::new(plates.to_vec(), size, data), value_shape.to_vec()));
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    /// Constant without plates.
    pub fn add_value(&mut self, value_shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        self.add_constant(&[], value_shape, data)
    }

    fn bind(&self, child_desc: &str, slot: SlotKind, parent: NodeId) -> Result<Binding> {
        let p = self.node(parent)?;
        let kind = self.moment_kind(parent);
        if slot.is_fixed() && !matches!(p.kind, NodeKind::Constant) {
            return Err(Error::SlotMismatch(format!(
                "{child_desc}: {slot:?} slot needs a constant parent"
            )));
        }
        if !slot.accepts(&kind) {
            return Err(Error::SlotMismatch(format!(
                "{child_desc}: {slot:?} slot cannot take a parent with {kind:?} moments"
            )));
        }
        let adapter = match (&p.kind, kind, slot) {
            (NodeKind::Constant, MomentKind::Fixed(shape), _) => {
                let (raw, _) = p.constant.as_ref().expect("constant value");
                let sizes = slot.block_sizes();
                let mut blocks: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(s * raw.len())).collect();
                for e in raw.elements().take(raw.len()) {
                    for (b, m) in blocks.iter_mut().zip(slot.constant_moments(e, &shape)?) {
                        b.extend(m);
                    }
                }
                Adapter::Constant(
                    blocks
                        .into_iter()
                        .zip(&sizes)
                        .map(|(b, &s)| Field::new(p.plates.clone(), s, b))
                        .collect(),
                )
            }
            (_, MomentKind::Gamma, SlotKind::Precision(d)) => Adapter::GammaIsotropic(d),
            _ => Adapter::Direct,
        };
        Ok(Binding { parent, adapter })
    }

    fn bind_gate(&self, gate: NodeId) -> Result<(Binding, usize)> {
        let g = self.node(gate)?;
        match (&g.kind, self.moment_kind(gate)) {
            (NodeKind::Mixture { .. }, _) => Err(Error::Unsupported("a mixture cannot gate another mixture".into())),
            (NodeKind::Stochastic(_), MomentKind::Categorical(k)) => Ok((
                Binding {
                    parent: gate,
                    adapter: Adapter::Direct,
                },
                k,
            )),
            (NodeKind::Constant, MomentKind::Fixed(shape)) if shape.len() == 1 && shape[0] >= 1 => {
                let (raw, _) = g.constant.as_ref().expect("constant value");
                for e in raw.elements().take(raw.len()) {
                    if e.iter().any(|&p| p < 0.0) || (e.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::Domain("gate probabilities must lie on the simplex".into()));
                    }
                }
                Ok((
                    Binding {
                        parent: gate,
                        adapter: Adapter::Constant(vec![raw.clone()]),
                    },
                    shape[0],
                ))
            }
            (_, kind) => Err(Error::SlotMismatch(format!(
                "mixture gate needs categorical moments, got {kind:?}"
            ))),
        }
    }

    fn register(&mut self, node: Node) -> Result<NodeId> {
        let id = self.nodes.len();
        let parents: Vec<NodeId> = node.gate.iter().chain(&node.slots).map(|b| b.parent).collect();
        let family = node.family();
        self.nodes.push(node);
        for p in parents {
            if !self.nodes[p].children.contains(&id) {
                self.nodes[p].children.push(id);
            }
        }
        if family.is_some() {
            let prior = self.collect_prior(id).and_then(|prior| self.set_posterior(id, prior));
            if let Err(e) = prior {
                self.unregister(id);
                return Err(match e {
                    Error::Numerical(m) => Error::Domain(m),
                    other => other,
                });
            }
        }
        Ok(id)
    }

    fn unregister(&mut self, id: NodeId) {
        self.nodes.pop();
        for n in &mut self.nodes {
            n.children.retain(|&c| c != id);
        }
    }

    /// Add a stochastic node. `parents` lists one node per slot of the
    /// family; the node's plates are the broadcast of `plates` with every
    /// parent's plates.
    pub fn add_stochastic(&mut self, family: FamilyId, parents: &[NodeId], plates: &[usize]) -> Result<NodeId> {
        family.validate()?;
        let slots = family.slots();
        if parents.len() != slots.len() {
            return Err(Error::SlotMismatch(format!(
                "{} takes {} parents, got {}",
                family.name(),
                slots.len(),
                parents.len()
            )));
        }
        let mut node_plates = plates.to_vec();
        let mut bindings = Vec::new();
        for (&slot, &p) in slots.iter().zip(parents) {
            bindings.push(self.bind(family.name(), slot, p)?);
            node_plates = broadcast_shapes(&node_plates, &self.nodes[p].plates)?;
        }
        let mut node = Node::new(NodeKind::Stochastic(family), node_plates);
        node.slots = bindings;
        self.register(node)
    }

    /// Add a mixture whose component parents carry the cluster axis as
    /// their last plate axis (size K or 1).
    pub fn add_mixture(
        &mut self,
        gate: NodeId,
        family: FamilyId,
        parents: &[NodeId],
        plates: &[usize],
    ) -> Result<NodeId> {
        family.validate()?;
        let (gate_binding, k) = self.bind_gate(gate)?;
        let slots = family.slots();
        if parents.len() != slots.len() {
            return Err(Error::SlotMismatch(format!(
                "mixture of {} takes {} component parents, got {}",
                family.name(),
                slots.len(),
                parents.len()
            )));
        }
        let mut node_plates = broadcast_shapes(plates, &self.nodes[gate].plates)?;
        let mut bindings = Vec::new();
        for (&slot, &p) in slots.iter().zip(parents) {
            bindings.push(self.bind(family.name(), slot, p)?);
            let pp = &self.nodes[p].plates;
            if let Some((&last, rest)) = pp.split_last() {
                if last != k && last != 1 {
                    return Err(Error::ClusterSizeMismatch {
                        expected: k,
                        found: last,
                    });
                }
                node_plates = broadcast_shapes(&node_plates, rest)?;
            }
        }
        let mut node = Node::new(NodeKind::Mixture { family, clusters: k }, node_plates);
        node.gate = Some(gate_binding);
        node.slots = bindings;
        self.register(node)
    }

    /// Add `s = a^T b` for two Gaussian-vector parents of equal dimension.
    pub fn add_sum_product(&mut self, a: NodeId, b: NodeId, plates: &[usize]) -> Result<NodeId> {
        let dim = |g: &Self, id: NodeId| -> Result<usize> {
            match g.moment_kind(id) {
                MomentKind::Gaussian(d) => Ok(d),
                MomentKind::Fixed(s) if s.len() == 1 => Ok(s[0]),
                other => Err(Error::SlotMismatch(format!(
                    "sum-product parent needs Gaussian moments, got {other:?}"
                ))),
            }
        };
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Err(Error::Unsupported("sum-product of a node with itself".into()));
        }
        let (da, db) = (dim(self, a)?, dim(self, b)?);
        if da != db {
            return Err(Error::DimensionMismatch(format!(
                "sum-product parents have dimensions {da} and {db}"
            )));
        }
        let slot = SlotKind::Mean(da);
        let bindings = vec![self.bind("sum-product", slot, a)?, self.bind("sum-product", slot, b)?];
        let node_plates = broadcast_shapes(&broadcast_shapes(plates, &self.nodes[a].plates)?, &self.nodes[b].plates)?;
        let mut node = Node::new(NodeKind::SumProduct { dim: da }, node_plates);
        node.slots = bindings;
        self.register(node)
    }

    /// Observe values (row-major over `plates ++ value_shape`; categorical
    /// values are indices). Elements whose mask entry is false stay latent.
    pub fn observe(&mut self, id: NodeId, values: &[f64], mask: Option<&[bool]>) -> Result<()> {
        let n = self.node(id)?;
        let family = n
            .family()
            .ok_or_else(|| Error::Configuration("only stochastic nodes can be observed".into()))?;
        let plates = n.plates.clone();
        let count: usize = plates.iter().product();
        let vsize = family.value_size();
        if values.len() != count * vsize {
            return Err(Error::Shape(format!(
                "node with plates {plates:?} needs {} values, got {}",
                count * vsize,
                values.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != count {
                return Err(Error::Shape(format!(
                    "mask has {} entries, plates hold {count}",
                    m.len()
                )));
            }
        }
        let observed = |i: usize| mask.is_none_or(|m| m[i]);
        let sizes = family.block_sizes();
        let total: usize = sizes.iter().sum();
        let mut packed = vec![0.0; count * total];
        for i in 0..count {
            if observed(i) {
                statistics_into(
                    family,
                    &values[i * vsize..(i + 1) * vsize],
                    &mut packed[i * total..(i + 1) * total],
                )?;
            }
        }
        let n_obs = (0..count).filter(|&i| observed(i)).count();
        let node = &mut self.nodes[id];
        if n_obs == 0 {
            node.observation = None;
        } else {
            let stats = expfam::split_event(&Field::new(plates.clone(), total, packed), &sizes);
            let mask = (n_obs < count).then(|| {
                Field::new(
                    plates.clone(),
                    1,
                    (0..count).map(|i| if observed(i) { 1.0 } else { 0.0 }).collect(),
                )
            });
            node.observation = Some(Observation { stats, mask });
        }
        self.refresh_moments(id);
        Ok(())
    }

    /// Remove any observation from the node.
    pub fn unobserve(&mut self, id: NodeId) -> Result<()> {
        self.node(id)?;
        self.nodes[id].observation = None;
        self.refresh_moments(id);
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Moments
    // -----------------------------------------------------------------------

    fn node_moments(&self, id: NodeId) -> &[Field] {
        let n = &self.nodes[id];
        match n.kind {
            NodeKind::SumProduct { .. } => n.derived.get_or_init(|| self.sum_product_moments(id)),
            _ => &n.moments,
        }
    }

    fn slot_moments<'a>(&'a self, b: &'a Binding) -> Cow<'a, [Field]> {
        match &b.adapter {
            Adapter::Constant(f) => Cow::Borrowed(f),
            Adapter::Direct => Cow::Borrowed(self.node_moments(b.parent)),
            Adapter::GammaIsotropic(d) => {
                let d = *d;
                let m = self.node_moments(b.parent);
                let frame = &self.nodes[b.parent].plates;
                let packed = apply(&[&m[0], &m[1]], frame, frame, self.expand, d * d + 1, |x, o| {
                    let (o0, o1) = o.split_at_mut(d * d);
                    expfam::gamma_as_precision(x, d, o0, o1)
                });
                Cow::Owned(expfam::split_event(&packed, &[d * d, 1]))
            }
        }
    }

    /// Covariance of a Gaussian slot. Observed and constant parents have
    /// none; latent ones reuse the factored covariance so sharing survives.
    fn slot_covariance<'a>(&'a self, b: &'a Binding, m: &[Field], d: usize) -> Cow<'a, Field> {
        let p = &self.nodes[b.parent];
        match (&b.adapter, &p.observation, &p.covariance) {
            (Adapter::Constant(_), _, _) | (_, Some(Observation { mask: None, .. }), _) => {
                Cow::Owned(Field::zeros(Vec::new(), d * d))
            }
            (Adapter::Direct, None, Some(c)) => Cow::Borrowed(c),
            _ => {
                let frame = &p.plates;
                Cow::Owned(apply(&[&m[0], &m[1]], frame, frame, self.expand, d * d, |x, o| {
                    for i in 0..d {
                        for j in 0..d {
                            o[i * d + j] = x[1][i * d + j] - x[0][i] * x[0][j];
                        }
                    }
                }))
            }
        }
    }

    fn sum_product_moments(&self, id: NodeId) -> Vec<Field> {
        let n = &self.nodes[id];
        let d = match n.kind {
            NodeKind::SumProduct { dim } => dim,
            _ => unreachable!(),
        };
        let a = self.slot_moments(&n.slots[0]);
        let b = self.slot_moments(&n.slots[1]);
        let frame = &n.plates;
        let m1 = apply(&[&a[0], &b[0]], frame, frame, self.expand, 1, |x, o| {
            o[0] = linalg::dot(x[0], x[1])
        });
        // E[s^2] = tr(Sa Sb) + mb' Sa mb + ma' Sb ma + (ma' mb)^2, each term
        // evaluated over the plates its inputs actually vary along.
        let sa = self.slot_covariance(&n.slots[0], &a, d);
        let sb = self.slot_covariance(&n.slots[1], &b, d);
        let quad = |s: &Field, m: &Field| {
            apply(&[s, m], frame, frame, self.expand, 1, |x, o| {
                o[0] = linalg::quad_form(x[0], x[1], d)
            })
        };
        let cross = apply(&[&sa, &sb], frame, frame, self.expand, 1, |x, o| {
            o[0] = linalg::trace_prod(x[0], x[1], d)
        });
        let qa = quad(&sa, &b[0]);
        let qb = quad(&sb, &a[0]);
        let m2 = apply(&[&cross, &qa, &qb, &m1], frame, frame, self.expand, 1, |x, o| {
            o[0] = x[0][0] + x[1][0] + x[2][0] + x[3][0] * x[3][0]
        });
        vec![m1, m2]
    }

    fn invalidate_derived(&mut self, id: NodeId) {
        let children = self.nodes[id].children.clone();
        for c in children {
            if matches!(self.nodes[c].kind, NodeKind::SumProduct { .. }) {
                self.nodes[c].derived = OnceCell::new();
                self.invalidate_derived(c);
            }
        }
    }

    /// Recompute the exposed moments from the posterior and observation.
    fn refresh_moments(&mut self, id: NodeId) {
        let family = match self.nodes[id].family() {
            Some(f) => f,
            None => return,
        };
        let plates = self.nodes[id].plates.clone();
        let posterior = posterior_fields(family, &self.nodes[id].natural, &plates, self.expand);
        let node = &mut self.nodes[id];
        if let Ok((u, a, cov)) = posterior {
            node.log_partition = a;
            node.covariance = cov;
            node.moments = match &node.observation {
                None => u,
                Some(Observation { stats, mask: None }) => stats.clone(),
                Some(Observation { stats, mask: Some(m) }) => merge_observed(m, stats, &u, &plates),
            };
        }
        self.invalidate_derived(id);
    }

    /// Set the posterior natural parameters, recompute moments and return
    /// the largest absolute change.
    fn set_posterior(&mut self, id: NodeId, natural: Vec<Field>) -> Result<f64> {
        let family = self.nodes[id].family().expect("stochastic node");
        let plates = self.nodes[id].plates.clone();
        let (u, a, cov) = posterior_fields(family, &natural, &plates, self.expand)?;
        let node = &mut self.nodes[id];
        let change = if node.natural.len() == natural.len() {
            node.natural
                .iter()
                .zip(&natural)
                .map(|(o, n)| o.max_abs_diff(n))
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        node.natural = natural;
        node.log_partition = a;
        node.covariance = cov;
        node.moments = match &node.observation {
            None => u,
            Some(Observation { stats, mask: None }) => stats.clone(),
            Some(Observation { stats, mask: Some(m) }) => merge_observed(m, stats, &u, &plates),
        };
        self.invalidate_derived(id);
        Ok(change)
    }

    /// Overwrite the posterior natural parameters of a stochastic node.
    /// Each block is row-major over the node's plates.
    pub fn set_natural(&mut self, id: NodeId, blocks: Vec<Vec<f64>>) -> Result<()> {
        let family = self
            .node(id)?
            .family()
            .ok_or_else(|| Error::Configuration("only stochastic nodes have posteriors".into()))?;
        let plates = self.nodes[id].plates.clone();
        let count: usize = plates.iter().product();
        let sizes = family.block_sizes();
        if blocks.len() != sizes.len() || blocks.iter().zip(&sizes).any(|(b, s)| b.len() != s * count) {
            return Err(Error::Shape(format!(
                "natural parameters for plates {plates:?} have the wrong size"
            )));
        }
        let fields = blocks
            .into_iter()
            .zip(&sizes)
            .map(|(b, &s)| Field::new(plates.clone(), s, b))
            .collect();
        self.set_posterior(id, fields).map(|_| ())
    }

    /// Posterior natural parameters, one row-major block per family block.
    pub fn natural(&self, id: NodeId) -> Result<Vec<Vec<f64>>> {
        let n = self.node(id)?;
        if n.family().is_none() {
            return Err(Error::Configuration("only stochastic nodes have posteriors".into()));
        }
        Ok(n.natural
            .iter()
            .map(|f| f.expand_to(&n.plates).data().to_vec())
            .collect())
    }

    /// Moments seen by children: exact statistics at observed elements,
    /// posterior expectations elsewhere.
    pub fn moments(&self, id: NodeId) -> Result<Vec<Vec<f64>>> {
        let n = self.node(id)?;
        match n.kind {
            NodeKind::Constant => Err(Error::Configuration("constants expose raw values only".into())),
            _ => Ok(self
                .node_moments(id)
                .iter()
                .map(|f| f.expand_to(&n.plates).data().to_vec())
                .collect()),
        }
    }

    // -----------------------------------------------------------------------
    // Prior, messages and updates
    // -----------------------------------------------------------------------

    fn all_slot_moments<'a>(&'a self, n: &'a Node) -> Vec<Cow<'a, [Field]>> {
        n.slots.iter().map(|b| self.slot_moments(b)).collect()
    }

    fn eval_rule(
        &self,
        rule: &Rule,
        child: &[Field],
        parents: &[Cow<'_, [Field]>],
        weight: Option<&Field>,
        frame: &[usize],
        target: &[usize],
    ) -> Field {
        let mut inputs: Vec<&Field> = rule
            .deps
            .iter()
            .map(|d| match *d {
                Dep::Child(b) => &child[b],
                Dep::Parent(s, b) => &parents[s][b],
            })
            .collect();
        let n = inputs.len();
        match weight {
            None => apply(&inputs, frame, target, self.expand, rule.event, |x, o| {
                (rule.kernel)(x, o)
            }),
            Some(w) => {
                inputs.push(w);
                apply(&inputs, frame, target, self.expand, rule.event, |x, o| {
                    let w = x[n][0];
                    if w == 0.0 {
                        o.iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        (rule.kernel)(&x[..n], o);
                        if w != 1.0 {
                            o.iter_mut().for_each(|v| *v *= w);
                        }
                    }
                })
            }
        }
    }

    /// Per-component natural parameters and expected log-partition of a
    /// mixture, over `plates ++ [K]`.
    fn component_parts(&self, id: NodeId) -> (Vec<Field>, Field) {
        let n = &self.nodes[id];
        let (family, k) = match n.kind {
            NodeKind::Mixture { family, clusters } => (family, clusters),
            _ => unreachable!(),
        };
        let frame = with_cluster_axis(&n.plates, k);
        let parents = self.all_slot_moments(n);
        let phi = prior_rules(family)
            .iter()
            .map(|r| self.eval_rule(r, &[], &parents, None, &frame, &frame))
            .collect();
        let a = self.eval_rule(
            &expected_log_partition_rule(family),
            &[],
            &parents,
            None,
            &frame,
            &frame,
        );
        (phi, a)
    }

    /// Gate responsibilities unfolded to a `(.., K)` field of scalars.
    fn responsibilities(&self, id: NodeId) -> Field {
        let gate = self.nodes[id].gate.as_ref().expect("mixture gate");
        self.slot_moments(gate)[0].unfold_event()
    }

    /// Parent-implied natural parameters and expected log-partition.
    fn prior_parts(&self, id: NodeId) -> (Vec<Field>, Field) {
        let n = &self.nodes[id];
        match n.kind {
            NodeKind::Stochastic(family) => {
                let parents = self.all_slot_moments(n);
                let frame = &n.plates;
                let phi = prior_rules(family)
                    .iter()
                    .map(|r| self.eval_rule(r, &[], &parents, None, frame, frame))
                    .collect();
                let a = self.eval_rule(&expected_log_partition_rule(family), &[], &parents, None, frame, frame);
                (phi, a)
            }
            NodeKind::Mixture { clusters, .. } => {
                let (phi_k, a_k) = self.component_parts(id);
                let r = self.responsibilities(id);
                let frame = with_cluster_axis(&n.plates, clusters);
                let mut target = n.plates.clone();
                target.push(1);
                let mix = |f: &Field| {
                    apply(&[&r, f], &frame, &target, self.expand, f.event(), |x, o| {
                        let w = x[0][0];
                        for (o, v) in o.iter_mut().zip(x[1]) {
                            *o = safe_mul(w, *v);
                        }
                    })
                    .without_trailing_axis()
                };
                (phi_k.iter().map(mix).collect(), mix(&a_k))
            }
            _ => unreachable!("prior of a non-stochastic node"),
        }
    }

    /// φ_prior for every plate element (shared elements stay collapsed).
    pub fn collect_prior(&self, id: NodeId) -> Result<Vec<Field>> {
        let n = self.node(id)?;
        if n.family().is_none() {
            return Err(Error::Configuration("only stochastic nodes have priors".into()));
        }
        Ok(self.prior_parts(id).0)
    }

    /// Whether anything downstream consumes the node's moments.
    fn has_consumers(&self, id: NodeId) -> bool {
        self.nodes[id].children.iter().any(|&c| match self.nodes[c].kind {
            NodeKind::SumProduct { .. } => self.has_consumers(c),
            _ => true,
        })
    }

    fn likelihood_weight(&self, id: NodeId) -> Weight {
        let n = &self.nodes[id];
        let base = match &n.observation {
            Some(Observation { mask: Some(m), .. }) if !self.has_consumers(id) => Weight::Field(m.clone()),
            Some(_) => Weight::One,
            None if self.has_consumers(id) => Weight::One,
            None => Weight::Zero,
        };
        match (&n.batch_weight, base) {
            (_, Weight::Zero) => Weight::Zero,
            (None, base) => base,
            (Some(s), Weight::One) => Weight::Field(s.clone()),
            (Some(s), Weight::Field(m)) => {
                let frame = broadcast_shapes(m.shape(), s.shape()).expect("batch weight fits plates");
                Weight::Field(apply(&[&m, s], &frame, &frame, false, 1, |x, o| {
                    o[0] = x[0][0] * x[1][0]
                }))
            }
        }
    }

    /// Messages from every child, summed and reduced to the node's plates,
    /// before annealing. Shaped like the node's natural parameters (a scalar
    /// Gaussian message for sum-product nodes).
    pub fn collect_child_messages(&self, id: NodeId) -> Result<Vec<Field>> {
        let n = self.node(id)?;
        let sizes = match n.kind {
            NodeKind::Constant => return Err(Error::Configuration("constants receive no messages".into())),
            NodeKind::SumProduct { .. } => vec![1, 1],
            _ => n.family().expect("family").block_sizes(),
        };
        let rank = n.plates.len();
        let mut total: Vec<Field> = sizes.iter().map(|&s| Field::zeros(ones(rank), s)).collect();
        let mut children = n.children.clone();
        children.sort_unstable();
        for c in children {
            let cn = &self.nodes[c];
            if let Some(g) = &cn.gate {
                if g.parent == id {
                    if let Some(m) = self.gate_message(c) {
                        total[0] = self.add_fields(&total[0], &m, &n.plates);
                    }
                }
            }
            for s in 0..cn.slots.len() {
                if cn.slots[s].parent != id {
                    continue;
                }
                if let Some(msg) = self.message_from(c, s) {
                    for (t, m) in total.iter_mut().zip(&msg) {
                        *t = self.add_fields(t, m, &n.plates);
                    }
                }
            }
        }
        Ok(total)
    }

    fn add_fields(&self, a: &Field, b: &Field, frame: &[usize]) -> Field {
        apply(&[a, b], frame, frame, self.expand, a.event(), |x, o| {
            for (o, (p, q)) in o.iter_mut().zip(x[0].iter().zip(x[1])) {
                *o = p + q;
            }
        })
    }

    /// Message from child `c` through its slot `s`, at the parent's plates.
    fn message_from(&self, c: NodeId, s: usize) -> Option<Vec<Field>> {
        let cn = &self.nodes[c];
        let parent = cn.slots[s].parent;
        let target = &self.nodes[parent].plates;
        let msg = match cn.kind {
            NodeKind::Stochastic(family) => {
                let weight = self.likelihood_weight(c);
                if matches!(weight, Weight::Zero) {
                    return None;
                }
                let parents = self.all_slot_moments(cn);
                let rules = message_rules(family, s).expect("bound slot has message rules");
                rules
                    .iter()
                    .map(|r| self.eval_rule(r, &cn.moments, &parents, weight.field(), &cn.plates, target))
                    .collect::<Vec<_>>()
            }
            NodeKind::Mixture { family, clusters } => {
                let weight = self.likelihood_weight(c);
                if matches!(weight, Weight::Zero) {
                    return None;
                }
                let frame = with_cluster_axis(&cn.plates, clusters);
                let r = self.responsibilities(c);
                let w = match weight.field() {
                    None => r,
                    Some(m) => {
                        let m = m.with_trailing_axis();
                        apply(&[&r, &m], &frame, &frame, self.expand, 1, |x, o| {
                            o[0] = x[0][0] * x[1][0]
                        })
                    }
                };
                let child: Vec<Field> = cn.moments.iter().map(|f| f.with_trailing_axis()).collect();
                let parents = self.all_slot_moments(cn);
                let rules = message_rules(family, s).expect("bound slot has message rules");
                rules
                    .iter()
                    .map(|r| self.eval_rule(r, &child, &parents, Some(&w), &frame, target))
                    .collect()
            }
            NodeKind::SumProduct { dim } => {
                if !self.has_consumers(c) {
                    return None;
                }
                let m = self.collect_child_messages(c).expect("sum-product messages");
                let other = self.slot_moments(&cn.slots[1 - s]);
                let frame = &cn.plates;
                let b0 = apply(&[&m[0], &other[0]], frame, target, self.expand, dim, |x, o| {
                    for (o, v) in o.iter_mut().zip(x[1]) {
                        *o = x[0][0] * v;
                    }
                });
                let b1 = apply(&[&m[1], &other[1]], frame, target, self.expand, dim * dim, |x, o| {
                    for (o, v) in o.iter_mut().zip(x[1]) {
                        *o = x[0][0] * v;
                    }
                });
                vec![b0, b1]
            }
            NodeKind::Constant => return None,
        };
        match cn.slots[s].adapter {
            Adapter::GammaIsotropic(d) => {
                let packed = apply(&[&msg[0], &msg[1]], target, target, self.expand, 2, |x, o| {
                    let (o0, o1) = o.split_at_mut(1);
                    expfam::precision_message_to_gamma(x, d, o0, o1)
                });
                Some(expfam::split_event(&packed, &[1, 1]))
            }
            _ => Some(msg),
        }
    }

    /// Message from a mixture to its gate: per-component expected
    /// log-densities, folded into a K-vector per element.
    fn gate_message(&self, c: NodeId) -> Option<Field> {
        let cn = &self.nodes[c];
        let k = match cn.kind {
            NodeKind::Mixture { clusters, .. } => clusters,
            _ => unreachable!(),
        };
        let weight = self.likelihood_weight(c);
        if matches!(weight, Weight::Zero) {
            return None;
        }
        let gate = cn.gate.as_ref().expect("gate");
        let target = &self.nodes[gate.parent].plates;
        let frame = with_cluster_axis(&cn.plates, k);
        let (phi_k, a_k) = self.component_parts(c);
        let child: Vec<Field> = cn.moments.iter().map(|f| f.with_trailing_axis()).collect();
        let nb = phi_k.len();
        let mut inputs: Vec<&Field> = phi_k.iter().chain(&child).collect();
        inputs.push(&a_k);
        let ll = apply(&inputs, &frame, &frame, self.expand, 1, |x, o| {
            let dot: f64 = (0..nb).map(|b| weighted_dot(x[b], x[nb + b])).sum();
            o[0] = dot - x[2 * nb][0];
        })
        .fold_last_axis(k);
        let out = match weight.field() {
            None => apply(&[&ll], &cn.plates, target, self.expand, k, |x, o| {
                o.copy_from_slice(x[0])
            }),
            Some(w) => apply(&[&ll, w], &cn.plates, target, self.expand, k, |x, o| {
                for (o, v) in o.iter_mut().zip(x[0]) {
                    *o = safe_mul(x[1][0], *v);
                }
            }),
        };
        Some(out)
    }

    fn updatable(&self, id: NodeId) -> Result<FamilyId> {
        let n = self.node(id)?;
        let family = n
            .family()
            .ok_or_else(|| Error::Configuration(format!("node {id} is not stochastic and cannot be updated")))?;
        if n.fully_observed() {
            return Err(Error::Configuration(format!("node {id} is fully observed")));
        }
        Ok(family)
    }

    /// Natural parameters the next update would assign.
    fn proposed_natural(&self, id: NodeId) -> Result<Vec<Field>> {
        self.updatable(id)?;
        let (prior, _) = self.prior_parts(id);
        let msgs = self.collect_child_messages(id)?;
        let plates = &self.nodes[id].plates;
        let beta = self.beta;
        Ok(prior
            .iter()
            .zip(&msgs)
            .map(|(p, m)| {
                if beta == 1.0 {
                    self.add_fields(p, m, plates)
                } else {
                    apply(&[p, m], plates, plates, self.expand, p.event(), |x, o| {
                        for (o, (a, b)) in o.iter_mut().zip(x[0].iter().zip(x[1])) {
                            *o = a + beta * b;
                        }
                    })
                }
            })
            .collect())
    }

    /// φ_q := φ_prior + child messages; returns the max-norm change.
    pub fn update_node(&mut self, id: NodeId) -> Result<f64> {
        let natural = self.proposed_natural(id)?;
        self.set_posterior(id, natural).map_err(as_numerical)
    }

    /// φ_q := (1 - ρ) φ_q + ρ φ̂ with φ̂ the usual update target.
    pub(crate) fn update_node_blended(&mut self, id: NodeId, rho: f64) -> Result<f64> {
        let hat = self.proposed_natural(id)?;
        let plates = self.nodes[id].plates.clone();
        let blended = self.nodes[id]
            .natural
            .iter()
            .zip(&hat)
            .map(|(old, new)| {
                apply(&[old, new], &plates, &plates, self.expand, old.event(), |x, o| {
                    for (o, (a, b)) in o.iter_mut().zip(x[0].iter().zip(x[1])) {
                        *o = (1.0 - rho) * a + rho * b;
                    }
                })
            })
            .collect();
        self.set_posterior(id, blended).map_err(as_numerical)
    }

    pub(crate) fn set_beta(&mut self, beta: f64) {
        self.beta = beta;
    }

    /// Per-element weights on a node's outgoing messages and likelihood
    /// terms (used for minibatch rescaling). `None` clears them.
    pub(crate) fn set_batch_weight(&mut self, id: NodeId, weight: Option<Field>) {
        self.nodes[id].batch_weight = weight;
    }

    /// Which plate axes of each natural-parameter block are computed once.
    pub fn plan_broadcast(&self, id: NodeId) -> Result<BroadcastPlan> {
        self.updatable(id)?;
        let natural = if self.expand {
            let mut g = self.clone();
            g.expand = false;
            for n in &mut g.nodes {
                n.derived = OnceCell::new();
            }
            g.proposed_natural(id)?
        } else {
            self.proposed_natural(id)?
        };
        let plates = self.nodes[id].plates.clone();
        let mask_varies = self.nodes[id].observation.as_ref().is_some_and(|o| o.mask.is_some());
        let blocks = natural
            .iter()
            .map(|f| {
                let shape = crate::plates::align(f.shape(), plates.len());
                shape
                    .iter()
                    .zip(&plates)
                    .map(|(&s, &p)| {
                        if (s == 1 || p == 1) && !(mask_varies && p > 1) {
                            AxisMode::Shared
                        } else {
                            AxisMode::Expanded
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(BroadcastPlan { plates, blocks })
    }

    // -----------------------------------------------------------------------
    // Bound
    // -----------------------------------------------------------------------

    /// Contribution of one node to the evidence lower bound.
    pub fn node_elbo(&self, id: NodeId) -> Result<f64> {
        let n = self.node(id)?;
        let family = match n.family() {
            Some(f) => f,
            None => return Ok(0.0),
        };
        let consumers = self.has_consumers(id);
        // Observed weight m per element; latent elements count only when
        // something consumes them.
        let (mask, all_observed) = match &n.observation {
            None if !consumers => return Ok(0.0),
            None => (None, false),
            Some(o) => (o.mask.as_ref(), o.mask.is_none()),
        };
        let (phi_p, a_p) = self.prior_parts(id);
        let nb = phi_p.len();
        let h = log_base_measure(family);
        let mut inputs: Vec<&Field> = phi_p.iter().collect();
        inputs.push(&a_p);
        inputs.extend(&n.moments);
        inputs.extend(&n.natural);
        inputs.push(&n.log_partition);
        let mi = inputs.len();
        if let Some(m) = mask {
            inputs.push(m);
        }
        let total = apply(&inputs, &n.plates, &[], self.expand, 1, |x, o| {
            let m = if all_observed {
                1.0
            } else if mask.is_some() {
                x[mi][0]
            } else {
                0.0
            };
            let u = &x[nb + 1..2 * nb + 1];
            let mut v = 0.0;
            if m != 0.0 {
                let base: f64 = (0..nb).map(|b| weighted_dot(x[b], u[b])).sum::<f64>() - x[nb][0];
                v += m * (base + h);
            }
            if m != 1.0 && consumers {
                let phi_q = &x[2 * nb + 1..3 * nb + 1];
                let a_q = x[3 * nb + 1][0];
                let kl: f64 = (0..nb)
                    .map(|b| {
                        x[b].iter()
                            .zip(phi_q[b])
                            .zip(u[b])
                            .map(|((p, q), w)| if *w == 0.0 { 0.0 } else { (p - q) * w })
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    + a_q
                    - x[nb][0];
                v += (1.0 - m) * kl;
            }
            o[0] = v;
        });
        let v = total.data()[0];
        if !v.is_finite() {
            return Err(Error::Numerical(format!("bound term of node {id} is {v}")));
        }
        Ok(v)
    }

    /// Evidence lower bound of the current posterior approximation.
    pub fn elbo(&self) -> Result<f64> {
        let mut total = 0.0;
        for id in 0..self.nodes.len() {
            total += self.node_elbo(id)?;
        }
        Ok(total)
    }
}

fn merge_observed(mask: &Field, stats: &[Field], u: &[Field], plates: &[usize]) -> Vec<Field> {
    stats
        .iter()
        .zip(u)
        .map(|(s, q)| {
            apply(&[mask, s, q], plates, plates, true, s.event(), |x, o| {
                o.copy_from_slice(if x[0][0] == 1.0 { x[1] } else { x[2] })
            })
        })
        .collect()
}

fn as_numerical(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Numerical(m),
        other => other,
    }
}
