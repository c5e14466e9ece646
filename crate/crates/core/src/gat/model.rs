use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::ElementGraph;

use super::linalg::{self, add_assign, axpy, dot};
use super::params::{AttentionMode, GatParams};

/// Softmax over the answer options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub probabilities: Vec<f64>,
}

impl AnswerDistribution {
    /// Argmax; the lower index wins ties.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

/// One directed message edge (receiver ← sender).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageEdge {
    pub target: usize,
    pub source: usize,
    /// Relation slot; slots `R..2R` are the reversed directions.
    pub relation: usize,
}

/// Attention coefficients for every layer, aligned with `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub node_count: usize,
    pub edges: Vec<MessageEdge>,
    pub layers: Vec<Vec<f64>>,
}

impl AttentionMap {
    /// Σ_j α_ij per receiving node; 1 for every node with neighbours, 0 otherwise.
    pub fn row_sums(&self, layer: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count];
        for (e, a) in self.edges.iter().zip(&self.layers[layer]) {
            out[e.target] += a;
        }
        out
    }

    /// Attention mass each node receives as a sender, normalised to sum to 1.
    /// A graph without edges yields the uniform distribution.
    pub fn incoming_mass(&self, layer: usize) -> Vec<f64> {
        mass_from(self.node_count, &self.edges, &self.layers[layer]).0
    }
}

/// Hidden states h_0..h_K, each `node_count × hidden`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub hidden: usize,
    pub layers: Vec<Vec<f64>>,
}

impl NodeStates {
    pub fn node(&self, layer: usize, node: usize) -> &[f64] {
        &self.layers[layer][node * self.hidden..(node + 1) * self.hidden]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub distribution: AnswerDistribution,
    pub states: NodeStates,
    pub attention: AttentionMap,
    pub logits: Vec<f64>,
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct MessageGraph {
    n: usize,
    types: Vec<usize>,
    relevance: Vec<f64>,
    msgs: Vec<Msg>,
    groups: Vec<Range<usize>>,
    /// Distinct (slot, receiver type, sender type) triples.
    combos: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct Msg {
    target: usize,
    source: usize,
    slot: usize,
    combo: usize,
}

impl MessageGraph {
    pub(crate) fn build(params: &GatParams, g: &ElementGraph) -> Result<MessageGraph> {
        let c = params.config();
        let n = g.nodes.len();
        if n == 0 {
            return Err(Error::InvalidArgument("element graph has no nodes".into()));
        }
        let mut types = Vec::with_capacity(n);
        let mut relevance = Vec::with_capacity(n);
        for (i, node) in g.nodes.iter().enumerate() {
            if node.node_type >= c.node_types {
                return Err(Error::Config(format!(
                    "node {i} has type {} but the model knows {} types",
                    node.node_type, c.node_types
                )));
            }
            if !node.relevance.is_finite() {
                return Err(Error::Numerical(format!(
                    "node {i} has non-finite relevance"
                )));
            }
            types.push(node.node_type);
            relevance.push(node.relevance);
        }
        let r = c.relation_types;
        let mut raw = Vec::with_capacity(2 * g.edges.len());
        for (k, e) in g.edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge {k} references a missing node"
                )));
            }
            if e.relation >= r {
                return Err(Error::Config(format!(
                    "edge {k} has relation {} but the model knows {r} relations",
                    e.relation
                )));
            }
            raw.push((e.dst, e.src, e.relation));
            raw.push((e.src, e.dst, r + e.relation));
        }
        raw.sort_unstable();
        let mut combo_ids: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        let mut combos = Vec::new();
        let mut msgs = Vec::with_capacity(raw.len());
        for (target, source, slot) in raw {
            let key = (slot, types[target], types[source]);
            let combo = *combo_ids.entry(key).or_insert_with(|| {
                combos.push(key);
                combos.len() - 1
            });
            msgs.push(Msg {
                target,
                source,
                slot,
                combo,
            });
        }
        let mut groups = vec![0..0; n];
        let mut at = 0;
        for (i, grp) in groups.iter_mut().enumerate() {
            let start = at;
            while at < msgs.len() && msgs[at].target == i {
                at += 1;
            }
            *grp = start..at;
        }
        Ok(MessageGraph {
            n,
            types,
            relevance,
            msgs,
            groups,
            combos,
        })
    }

    fn edges(&self) -> Vec<MessageEdge> {
        self.msgs
            .iter()
            .map(|m| MessageEdge {
                target: m.target,
                source: m.source,
                relation: m.slot,
            })
            .collect()
    }
}

fn mass_from(n: usize, edges: &[MessageEdge], alpha: &[f64]) -> (Vec<f64>, usize) {
    let mut mass = vec![0.0; n];
    let mut has_in = vec![false; n];
    for (e, a) in edges.iter().zip(alpha) {
        mass[e.source] += a;
        has_in[e.target] = true;
    }
    let targets = has_in.iter().filter(|&&b| b).count();
    if targets == 0 {
        return (vec![1.0 / n as f64; n], 0);
    }
    for m in &mut mass {
        *m /= targets as f64;
    }
    (mass, targets)
}

struct LayerCache {
    h: Vec<f64>,
    pre1: Vec<f64>,
    hid: Vec<f64>,
    f: Vec<f64>,
    m: Vec<f64>,
    tt: Vec<f64>,
    alpha: Vec<f64>,
    pre: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct HeadCache {
    masses: Vec<f64>,
    targets: usize,
    top: Vec<usize>,
    z: Vec<f64>,
    a1: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

pub(crate) struct Trace {
    graph: MessageGraph,
    rel: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    h_final: Vec<f64>,
    head: HeadCache,
}

impl Trace {
    pub(crate) fn probabilities(&self) -> &[f64] {
        &self.head.probs
    }

    pub(crate) fn attention(&self) -> AttentionMap {
        AttentionMap {
            node_count: self.graph.n,
            edges: self.graph.edges(),
            layers: self.layers.iter().map(|l| l.alpha.clone()).collect(),
        }
    }

    pub(crate) fn loss(&self, gold: usize) -> f64 {
        log_sum_exp(&self.head.logits) - self.head.logits[gold]
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_context(params: &GatParams, context: &[f64]) -> Result<()> {
    let c = params.config();
    if context.len() != c.lm_dim {
        return Err(Error::Config(format!(
            "context embedding has dimension {}, model expects {}",
            context.len(),
            c.lm_dim
        )));
    }
    if context.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite context embedding".into()));
    }
    Ok(())
}

fn input_states(params: &GatParams, mg: &MessageGraph) -> Vec<f64> {
    let c = params.config();
    let d = c.hidden;
    let cols = c.node_types + 1;
    let w = &params.values[params.layout.input_w.clone()];
    let b = &params.values[params.layout.input_b.clone()];
    let mut h = vec![0.0; mg.n * d];
    for i in 0..mg.n {
        let row = &mut h[i * d..(i + 1) * d];
        row.copy_from_slice(b);
        linalg::add_column(w, d, cols, mg.types[i], 1.0, row);
        linalg::add_column(w, d, cols, c.node_types, mg.relevance[i], row);
    }
    h
}

fn layer_step<R: Rng>(
    params: &GatParams,
    li: usize,
    mg: &MessageGraph,
    rel: &[Vec<f64>],
    h: Vec<f64>,
    dropout: Option<&mut R>,
) -> (Vec<f64>, LayerCache) {
    let c = params.config();
    let d = c.hidden;
    let t = c.node_types;
    let n = mg.n;
    let stride = c.msg_in();
    let lay = &params.layout.layers[li];
    let v = &params.values;
    let msg1 = &v[lay.msg1_w.clone()];
    let b1 = &v[lay.msg1_b.clone()];
    let msg2 = &v[lay.msg2_w.clone()];
    let b2 = &v[lay.msg2_b.clone()];
    let w = &v[lay.w.clone()];
    let att_u = &v[lay.att_u.clone()];
    let att_c = &v[lay.att_c.clone()];
    let att_v = &v[lay.att_v.clone()];
    let act = c.activation;

    let mut hp = vec![0.0; n * d];
    let mut ai = vec![0.0; n * d];
    let mut aj = vec![0.0; n * d];
    for i in 0..n {
        let hi = &h[i * d..(i + 1) * d];
        linalg::matvec_block(msg1, d, stride, 0, hi, &mut hp[i * d..(i + 1) * d]);
        linalg::matvec_block(att_u, d, 2 * d, 0, hi, &mut ai[i * d..(i + 1) * d]);
        linalg::matvec_block(att_u, d, 2 * d, d, hi, &mut aj[i * d..(i + 1) * d]);
    }
    let mut rp = vec![0.0; mg.combos.len() * d];
    for (k, r) in rel.iter().enumerate() {
        linalg::matvec_block(msg1, d, stride, d + t, r, &mut rp[k * d..(k + 1) * d]);
    }

    let e_count = mg.msgs.len();
    let mut pre1 = vec![0.0; e_count * d];
    let mut hid = vec![0.0; e_count * d];
    let mut f = vec![0.0; e_count * d];
    let mut m = vec![0.0; e_count * d];
    let mut tt = vec![0.0; e_count * d];
    let mut score = vec![0.0; e_count];
    for (e, msg) in mg.msgs.iter().enumerate() {
        let es = e * d..(e + 1) * d;
        let p = &mut pre1[es.clone()];
        p.copy_from_slice(&hp[msg.source * d..(msg.source + 1) * d]);
        add_assign(p, b1);
        add_assign(p, &rp[msg.combo * d..(msg.combo + 1) * d]);
        linalg::add_column(msg1, d, stride, d + mg.types[msg.target], 1.0, p);
        for (o, &x) in hid[es.clone()].iter_mut().zip(p.iter()) {
            *o = act.apply(x);
        }
        linalg::matvec(msg2, d, d, &hid[es.clone()], &mut f[es.clone()]);
        add_assign(&mut f[es.clone()], b2);
        linalg::matvec(w, d, d, &f[es.clone()], &mut m[es.clone()]);
        if c.attention == AttentionMode::Learned {
            let ts = &mut tt[es.clone()];
            for k in 0..d {
                ts[k] = (ai[msg.target * d + k] + aj[msg.source * d + k] + att_c[k]).tanh();
            }
            score[e] = dot(att_v, ts);
        }
    }

    let mut alpha = vec![0.0; e_count];
    for grp in &mg.groups {
        if grp.is_empty() {
            continue;
        }
        match c.attention {
            AttentionMode::Uniform => {
                let a = 1.0 / grp.len() as f64;
                alpha[grp.clone()].iter_mut().for_each(|x| *x = a);
            }
            AttentionMode::Learned => {
                let sm = linalg::softmax(&score[grp.clone()]);
                alpha[grp.clone()].copy_from_slice(&sm);
            }
        }
    }

    let mut pre = vec![0.0; n * d];
    for (e, msg) in mg.msgs.iter().enumerate() {
        axpy(
            &mut pre[msg.target * d..(msg.target + 1) * d],
            alpha[e],
            &m[e * d..(e + 1) * d],
        );
    }
    let mask = dropout.filter(|_| c.dropout > 0.0).map(|rng| {
        let keep = 1.0 - c.dropout;
        (0..n * d)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect::<Vec<f64>>()
    });
    if let Some(mask) = &mask {
        for (p, k) in pre.iter_mut().zip(mask) {
            *p *= k;
        }
    }
    let mut next = h.clone();
    for (o, &p) in next.iter_mut().zip(&pre) {
        *o += act.apply(p);
    }
    let cache = LayerCache {
        h,
        pre1,
        hid,
        f,
        m,
        tt,
        alpha,
        pre,
        mask,
    };
    (next, cache)
}

fn head_forward(
    params: &GatParams,
    mg: &MessageGraph,
    alpha: &[f64],
    h: &[f64],
    context: &[f64],
) -> HeadCache {
    let c = params.config();
    let d = c.hidden;
    let (masses, targets) = mass_from(mg.n, &mg.edges(), alpha);
    let mut order: Vec<usize> = (0..mg.n).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
    order.truncate(c.pool_size);

    let mut z = Vec::with_capacity(c.head_in());
    z.extend_from_slice(context);
    let mut pooled = vec![0.0; d];
    for (j, &p) in masses.iter().enumerate() {
        axpy(&mut pooled, p, &h[j * d..(j + 1) * d]);
    }
    z.extend_from_slice(&pooled);
    for k in 0..c.pool_size {
        z.push(order.get(k).map_or(0.0, |&j| masses[j]));
    }

    let v = &params.values;
    let mut a1 = vec![0.0; c.answer_hidden];
    linalg::matvec(
        &v[params.layout.ans1_w.clone()],
        c.answer_hidden,
        c.head_in(),
        &z,
        &mut a1,
    );
    add_assign(&mut a1, &v[params.layout.ans1_b.clone()]);
    let hidden: Vec<f64> = a1.iter().map(|&x| c.activation.apply(x)).collect();
    let mut logits = vec![0.0; c.options];
    linalg::matvec(
        &v[params.layout.ans2_w.clone()],
        c.options,
        c.answer_hidden,
        &hidden,
        &mut logits,
    );
    add_assign(&mut logits, &v[params.layout.ans2_b.clone()]);
    let probs = linalg::softmax(&logits);
    HeadCache {
        masses,
        targets,
        top: order,
        z,
        a1,
        hidden,
        logits,
        probs,
    }
}

/// Full forward pass keeping everything backward needs. Dropout is applied
/// only when an RNG is supplied.
pub(crate) fn forward_trace<R: Rng>(
    params: &GatParams,
    graph: &ElementGraph,
    context: &[f64],
    mut dropout: Option<&mut R>,
) -> Result<Trace> {
    check_context(params, context)?;
    let mg = MessageGraph::build(params, graph)?;
    let rel: Vec<Vec<f64>> = mg
        .combos
        .iter()
        .map(|&(slot, ti, tj)| params.relation_embed_unchecked(ti, tj, slot))
        .collect();
    let mut h = input_states(params, &mg);
    let mut layers = Vec::with_capacity(params.config().layers);
    for li in 0..params.config().layers {
        let (next, cache) = layer_step(params, li, &mg, &rel, h, dropout.as_deref_mut());
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite node state after layer {}",
                li + 1
            )));
        }
        layers.push(cache);
        h = next;
    }
    let head = head_forward(
        params,
        &mg,
        &layers.last().expect("≥1 layer").alpha,
        &h,
        context,
    );
    if head.probs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite answer distribution".into()));
    }
    Ok(Trace {
        graph: mg,
        rel,
        layers,
        h_final: h,
        head,
    })
}

/// One message-passing layer in inference mode: `h` holds the states of all
/// nodes (`node_count × hidden`, row-major) entering layer `layer`.
pub fn layer_forward(
    params: &GatParams,
    graph: &ElementGraph,
    h: &[f64],
    layer: usize,
) -> Result<Vec<f64>> {
    let c = params.config();
    if layer >= c.layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range (0..{})",
            c.layers
        )));
    }
    let mg = MessageGraph::build(params, graph)?;
    if h.len() != mg.n * c.hidden {
        return Err(Error::Config(format!(
            "expected {} state values, got {}",
            mg.n * c.hidden,
            h.len()
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite input state at layer {}",
            layer + 1
        )));
    }
    let rel: Vec<Vec<f64>> = mg
        .combos
        .iter()
        .map(|&(slot, ti, tj)| params.relation_embed_unchecked(ti, tj, slot))
        .collect();
    let (next, _) =
        layer_step::<rand_chacha::ChaCha8Rng>(params, layer, &mg, &rel, h.to_vec(), None);
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite node state after layer {}",
            layer + 1
        )));
    }
    Ok(next)
}

/// Inference forward pass (no dropout).
pub fn forward(params: &GatParams, graph: &ElementGraph, context: &[f64]) -> Result<ForwardOutput> {
    let trace = forward_trace::<rand_chacha::ChaCha8Rng>(params, graph, context, None)?;
    let mut states: Vec<Vec<f64>> = trace.layers.iter().map(|l| l.h.clone()).collect();
    states.push(trace.h_final.clone());
    Ok(ForwardOutput {
        distribution: AnswerDistribution {
            probabilities: trace.head.probs.clone(),
        },
        states: NodeStates {
            hidden: params.config().hidden,
            layers: states,
        },
        attention: trace.attention(),
        logits: trace.head.logits,
    })
}

/// Cross-entropy loss of the gold option and its gradient w.r.t. every parameter.
pub(crate) fn backward(params: &GatParams, trace: &Trace, gold: usize) -> (f64, Vec<f64>) {
    let c = params.config();
    let d = c.hidden;
    let t = c.node_types;
    let lay = &params.layout;
    let v = &params.values;
    let act = c.activation;
    let mg = &trace.graph;
    let n = mg.n;
    let mut g = vec![0.0; params.len()];

    // answer head
    let head = &trace.head;
    let mut dlogits = head.probs.clone();
    dlogits[gold] -= 1.0;
    linalg::outer_acc(
        &mut g[lay.ans2_w.clone()],
        c.options,
        c.answer_hidden,
        &dlogits,
        &head.hidden,
    );
    add_assign(&mut g[lay.ans2_b.clone()], &dlogits);
    let mut dhidden = vec![0.0; c.answer_hidden];
    linalg::matvec_t_acc(
        &v[lay.ans2_w.clone()],
        c.options,
        c.answer_hidden,
        &dlogits,
        &mut dhidden,
    );
    let da1: Vec<f64> = dhidden
        .iter()
        .zip(&head.a1)
        .map(|(g, &a)| g * act.grad(a))
        .collect();
    linalg::outer_acc(
        &mut g[lay.ans1_w.clone()],
        c.answer_hidden,
        c.head_in(),
        &da1,
        &head.z,
    );
    add_assign(&mut g[lay.ans1_b.clone()], &da1);
    let mut dz = vec![0.0; c.head_in()];
    linalg::matvec_t_acc(
        &v[lay.ans1_w.clone()],
        c.answer_hidden,
        c.head_in(),
        &da1,
        &mut dz,
    );
    let dpooled = &dz[c.lm_dim..c.lm_dim + d];
    let dtop = &dz[c.lm_dim + d..];

    // pooling
    let mut dh = vec![0.0; n * d];
    let mut dmass = vec![0.0; n];
    for j in 0..n {
        let hj = &trace.h_final[j * d..(j + 1) * d];
        axpy(&mut dh[j * d..(j + 1) * d], head.masses[j], dpooled);
        dmass[j] = dot(dpooled, hj);
    }
    for (k, &j) in head.top.iter().enumerate() {
        dmass[j] += dtop[k];
    }
    let mut extra = vec![0.0; mg.msgs.len()];
    if head.targets > 0 {
        for (e, msg) in mg.msgs.iter().enumerate() {
            extra[e] = dmass[msg.source] / head.targets as f64;
        }
    }

    // layers, last to first
    let mut drel = vec![vec![0.0; d]; mg.combos.len()];
    let last = c.layers - 1;
    for li in (0..c.layers).rev() {
        let cache = &trace.layers[li];
        let l = &lay.layers[li];
        let stride = c.msg_in();
        let msg1 = &v[l.msg1_w.clone()];
        let msg2 = &v[l.msg2_w.clone()];
        let w = &v[l.w.clone()];
        let att_u = &v[l.att_u.clone()];
        let att_v = &v[l.att_v.clone()];

        let mut dagg = vec![0.0; n * d];
        for k in 0..n * d {
            let mut x = dh[k] * act.grad(cache.pre[k]);
            if let Some(mask) = &cache.mask {
                x *= mask[k];
            }
            dagg[k] = x;
        }
        let mut dalpha = vec![0.0; mg.msgs.len()];
        for (e, msg) in mg.msgs.iter().enumerate() {
            dalpha[e] = dot(
                &dagg[msg.target * d..(msg.target + 1) * d],
                &cache.m[e * d..(e + 1) * d],
            );
            if li == last {
                dalpha[e] += extra[e];
            }
        }
        let mut dscore = vec![0.0; mg.msgs.len()];
        if c.attention == AttentionMode::Learned {
            for grp in &mg.groups {
                let sbar: f64 = grp.clone().map(|e| cache.alpha[e] * dalpha[e]).sum();
                for e in grp.clone() {
                    dscore[e] = cache.alpha[e] * (dalpha[e] - sbar);
                }
            }
        }

        let mut dai = vec![0.0; n * d];
        let mut daj = vec![0.0; n * d];
        let mut dhp = vec![0.0; n * d];
        let mut drp = vec![0.0; mg.combos.len() * d];
        let mut dm = vec![0.0; d];
        let mut df = vec![0.0; d];
        let mut dpre1 = vec![0.0; d];
        for (e, msg) in mg.msgs.iter().enumerate() {
            let es = e * d..(e + 1) * d;
            if c.attention == AttentionMode::Learned && dscore[e] != 0.0 {
                let ts = &cache.tt[es.clone()];
                axpy(&mut g[l.att_v.clone()], dscore[e], ts);
                let dzv: Vec<f64> = (0..d)
                    .map(|k| dscore[e] * att_v[k] * (1.0 - ts[k] * ts[k]))
                    .collect();
                add_assign(&mut g[l.att_c.clone()], &dzv);
                add_assign(&mut dai[msg.target * d..(msg.target + 1) * d], &dzv);
                add_assign(&mut daj[msg.source * d..(msg.source + 1) * d], &dzv);
            }
            let a = cache.alpha[e];
            for k in 0..d {
                dm[k] = a * dagg[msg.target * d + k];
            }
            linalg::outer_acc(&mut g[l.w.clone()], d, d, &dm, &cache.f[es.clone()]);
            df.iter_mut().for_each(|x| *x = 0.0);
            linalg::matvec_t_acc(w, d, d, &dm, &mut df);
            linalg::outer_acc(&mut g[l.msg2_w.clone()], d, d, &df, &cache.hid[es.clone()]);
            add_assign(&mut g[l.msg2_b.clone()], &df);
            dpre1.iter_mut().for_each(|x| *x = 0.0);
            linalg::matvec_t_acc(msg2, d, d, &df, &mut dpre1);
            for (x, &p) in dpre1.iter_mut().zip(&cache.pre1[es.clone()]) {
                *x *= act.grad(p);
            }
            add_assign(&mut g[l.msg1_b.clone()], &dpre1);
            add_assign(&mut dhp[msg.source * d..(msg.source + 1) * d], &dpre1);
            linalg::column_acc(
                &mut g[l.msg1_w.clone()],
                d,
                stride,
                d + mg.types[msg.target],
                &dpre1,
            );
            add_assign(&mut drp[msg.combo * d..(msg.combo + 1) * d], &dpre1);
        }

        // residual path
        let mut dh_prev = dh.clone();
        for i in 0..n {
            let hi = &cache.h[i * d..(i + 1) * d];
            let rows = i * d..(i + 1) * d;
            linalg::outer_block_acc(
                &mut g[l.msg1_w.clone()],
                d,
                stride,
                0,
                &dhp[rows.clone()],
                hi,
            );
            linalg::matvec_t_block_acc(
                msg1,
                d,
                stride,
                0,
                &dhp[rows.clone()],
                &mut dh_prev[rows.clone()],
            );
            if c.attention == AttentionMode::Learned {
                linalg::outer_block_acc(
                    &mut g[l.att_u.clone()],
                    d,
                    2 * d,
                    0,
                    &dai[rows.clone()],
                    hi,
                );
                linalg::outer_block_acc(
                    &mut g[l.att_u.clone()],
                    d,
                    2 * d,
                    d,
                    &daj[rows.clone()],
                    hi,
                );
                linalg::matvec_t_block_acc(
                    att_u,
                    d,
                    2 * d,
                    0,
                    &dai[rows.clone()],
                    &mut dh_prev[rows.clone()],
                );
                linalg::matvec_t_block_acc(
                    att_u,
                    d,
                    2 * d,
                    d,
                    &daj[rows.clone()],
                    &mut dh_prev[rows.clone()],
                );
            }
        }
        for (k, r) in trace.rel.iter().enumerate() {
            let rows = k * d..(k + 1) * d;
            linalg::outer_block_acc(
                &mut g[l.msg1_w.clone()],
                d,
                stride,
                d + t,
                &drp[rows.clone()],
                r,
            );
            linalg::matvec_t_block_acc(msg1, d, stride, d + t, &drp[rows], &mut drel[k]);
        }
        dh = dh_prev;
    }

    // relation encoder
    let rel_cols = c.rel_in();
    let slots = c.relation_slots();
    for (k, &(slot, ti, tj)) in mg.combos.iter().enumerate() {
        let dr = &drel[k];
        linalg::column_acc(&mut g[lay.rel_w.clone()], d, rel_cols, slot, dr);
        linalg::column_acc(&mut g[lay.rel_w.clone()], d, rel_cols, slots + ti, dr);
        linalg::column_acc(&mut g[lay.rel_w.clone()], d, rel_cols, slots + t + tj, dr);
        add_assign(&mut g[lay.rel_b.clone()], dr);
    }

    // input projection
    for i in 0..n {
        let dhi = &dh[i * d..(i + 1) * d];
        linalg::column_acc(&mut g[lay.input_w.clone()], d, t + 1, mg.types[i], dhi);
        let scaled: Vec<f64> = dhi.iter().map(|x| x * mg.relevance[i]).collect();
        linalg::column_acc(&mut g[lay.input_w.clone()], d, t + 1, t, &scaled);
        add_assign(&mut g[lay.input_b.clone()], dhi);
    }

    (trace.loss(gold), g)
}

/// Loss of the gold option without dropout.
pub fn loss(params: &GatParams, graph: &ElementGraph, context: &[f64], gold: usize) -> Result<f64> {
    check_gold(params, gold)?;
    let trace = forward_trace::<rand_chacha::ChaCha8Rng>(params, graph, context, None)?;
    Ok(trace.loss(gold))
}

/// Loss and analytic gradient without dropout.
pub fn loss_and_grad(
    params: &GatParams,
    graph: &ElementGraph,
    context: &[f64],
    gold: usize,
) -> Result<(f64, Vec<f64>)> {
    check_gold(params, gold)?;
    let trace = forward_trace::<rand_chacha::ChaCha8Rng>(params, graph, context, None)?;
    Ok(backward(params, &trace, gold))
}

pub(crate) fn check_gold(params: &GatParams, gold: usize) -> Result<()> {
    if gold >= params.config().options {
        return Err(Error::InvalidArgument(format!(
            "gold option {gold} out of range (0..{})",
            params.config().options
        )));
    }
    Ok(())
}
