use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::KeyframeId;
use crate::error::{Error, Result};
use crate::geometry::{Matrix7, Sim3, Tangent, Vector7};
use crate::matching::MatchSet;
use crate::pointmap::Pointmap;
use crate::tracking::{correspondences, irls_weight, residual, residual_jacobian, robust_terms, Correspondence, Matrix4x7, TrackingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Temporal,
    IntraLoop,
    InterLoop,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Temporal => "temporal",
            EdgeKind::IntraLoop => "intra-loop",
            EdgeKind::InterLoop => "inter-loop",
        })
    }
}

/// A match-set constraint between two keyframes.
///
/// Each match's `query` indexes keyframe `a`'s canonical pointmap (the
/// target) and its `reference_uv` locates the source point in keyframe `b`'s.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub a: KeyframeId,
    pub b: KeyframeId,
    pub matches: MatchSet,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeRejected {
    pub matches: usize,
    pub e_min: usize,
}

impl fmt::Display for EdgeRejected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "edge rejected: {} matches < {}", self.matches, self.e_min)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    nodes: BTreeMap<KeyframeId, Sim3>,
    edges: Vec<Edge>,
    anchor: Option<KeyframeId>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: KeyframeId, pose: Sim3) {
        self.nodes.insert(id, pose);
    }

    pub fn set_pose(&mut self, id: KeyframeId, pose: Sim3) {
        if let Some(p) = self.nodes.get_mut(&id) {
            *p = pose;
        }
    }

    pub fn pose(&self, id: KeyframeId) -> Option<&Sim3> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> &BTreeMap<KeyframeId, Sim3> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// The fixed node; defaults to the smallest id.
    pub fn anchor(&self) -> Option<KeyframeId> {
        self.anchor.or_else(|| self.nodes.keys().next().copied())
    }

    pub fn set_anchor(&mut self, id: KeyframeId) {
        self.anchor = Some(id);
    }

    /// Adds or replaces the edge between `a` and `b`. Temporal edges skip the `e_min` gate.
    pub fn add_edge(&mut self, edge: Edge, e_min: usize) -> std::result::Result<(), EdgeRejected> {
        assert!(edge.a != edge.b, "self edge on {}", edge.a);
        assert!(
            self.nodes.contains_key(&edge.a) && self.nodes.contains_key(&edge.b),
            "edge {}-{} references a missing node",
            edge.a,
            edge.b
        );
        if edge.kind != EdgeKind::Temporal && edge.matches.len() < e_min {
            return Err(EdgeRejected {
                matches: edge.matches.len(),
                e_min,
            });
        }
        let same = |e: &Edge| (e.a == edge.a && e.b == edge.b) || (e.a == edge.b && e.b == edge.a);
        if let Some(slot) = self.edges.iter_mut().find(|e| same(e)) {
            *slot = edge;
        } else {
            self.edges.push(edge);
        }
        Ok(())
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Connected components, each sorted, in order of their smallest id.
    pub fn components(&self) -> Vec<Vec<KeyframeId>> {
        let mut adj: BTreeMap<KeyframeId, Vec<KeyframeId>> = self.nodes.keys().map(|k| (*k, vec![])).collect();
        for e in &self.edges {
            adj.get_mut(&e.a).unwrap().push(e.b);
            adj.get_mut(&e.b).unwrap().push(e.a);
        }
        let mut seen = BTreeSet::new();
        let mut out = vec![];
        for &start in self.nodes.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for &m in &adj[&n] {
                    if seen.insert(m) {
                        comp.push(m);
                        queue.push_back(m);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub max_iters: usize,
    pub g_tol: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            g_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    /// Energy at the start and after every accepted step.
    pub energy_trace: Vec<f64>,
    pub converged: bool,
}

struct EdgeTerms {
    a: usize,
    b: usize,
    corrs: Vec<Correspondence>,
}

fn edge_energy(corrs: &[Correspondence], rel: &Sim3, kernel: &TrackingConfig) -> f64 {
    crate::tracking::energy(corrs, rel, kernel)
}

fn edge_linearize(corrs: &[Correspondence], rel: &Sim3, kernel: &TrackingConfig) -> (f64, Matrix7, Vector7) {
    let mut h = Matrix7::zeros();
    let mut g = Vector7::zeros();
    let mut e = 0.0;
    for c in corrs {
        let y = rel.act(&c.source);
        if !(y.norm() > 1e-9) || !y.iter().all(|v| v.is_finite()) {
            continue;
        }
        let r = residual(&c.target, &y, kernel.dist_weight);
        let (loss, w) = robust_terms(&r, irls_weight(c.confidence, kernel.sigma_r_sq), kernel.huber_delta);
        e += loss;
        let j = residual_jacobian(&y, kernel.dist_weight);
        let wj = Matrix4x7::from_fn(|row, col| w[row] * j[(row, col)]);
        h += j.transpose() * wj;
        g += wj.transpose() * r;
    }
    (e, h, g)
}

fn relative(poses: &[Sim3], t: &EdgeTerms) -> Sim3 {
    poses[t.a].inverse().compose(&poses[t.b])
}

fn total_energy(terms: &[EdgeTerms], poses: &[Sim3], kernel: &TrackingConfig) -> f64 {
    let parts: Vec<f64> = terms
        .par_iter()
        .map(|t| edge_energy(&t.corrs, &relative(poses, t), kernel))
        .collect();
    parts.iter().sum()
}

/// Ray energy of the graph at its current poses.
pub fn graph_energy<'a>(
    graph: &FactorGraph,
    points: impl Fn(KeyframeId) -> Option<&'a Pointmap>,
    kernel: &TrackingConfig,
) -> f64 {
    let (terms, poses, _) = build_terms(graph, &points);
    total_energy(&terms, &poses, kernel)
}

fn build_terms<'a>(
    graph: &FactorGraph,
    points: &impl Fn(KeyframeId) -> Option<&'a Pointmap>,
) -> (Vec<EdgeTerms>, Vec<Sim3>, Vec<KeyframeId>) {
    let ids: Vec<KeyframeId> = graph.nodes.keys().copied().collect();
    let index: BTreeMap<KeyframeId, usize> = ids.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let poses: Vec<Sim3> = ids.iter().map(|k| graph.nodes[k]).collect();
    let terms = graph
        .edges
        .iter()
        .filter_map(|e| {
            let (pa, pb) = (points(e.a)?, points(e.b)?);
            Some(EdgeTerms {
                a: index[&e.a],
                b: index[&e.b],
                corrs: correspondences(pa, pb, &e.matches),
            })
        })
        .collect();
    (terms, poses, ids)
}

/// Damped Gauss-Newton over all non-anchor poses.
///
/// `points` supplies each keyframe's canonical pointmap. The anchor pose is
/// never written.
pub fn optimize_graph<'a>(
    graph: &mut FactorGraph,
    points: impl Fn(KeyframeId) -> Option<&'a Pointmap>,
    cfg: &GraphConfig,
    kernel: &TrackingConfig,
) -> Result<GraphReport> {
    let comps = graph.components();
    if comps.len() > 1 {
        return Err(Error::Disconnected(
            comps
                .into_iter()
                .map(|c| c.into_iter().map(|k| k.to_string()).collect())
                .collect(),
        ));
    }
    let (terms, mut poses, ids) = build_terms(graph, &points);
    let anchor = graph.anchor().and_then(|a| ids.iter().position(|k| *k == a));
    let free: Vec<usize> = (0..ids.len()).filter(|i| Some(*i) != anchor).collect();
    let slot: BTreeMap<usize, usize> = free.iter().enumerate().map(|(s, i)| (*i, s)).collect();
    let n = free.len() * 7;

    let linearize = |poses: &[Sim3]| -> (f64, DMatrix<f64>, DVector<f64>) {
        let blocks: Vec<(f64, Matrix7, Vector7, Matrix7)> = terms
            .par_iter()
            .map(|t| {
                let inv_a = poses[t.a].inverse();
                let rel = inv_a.compose(&poses[t.b]);
                let (e, h, g) = edge_linearize(&t.corrs, &rel, kernel);
                (e, h, g, inv_a.adjoint())
            })
            .collect();
        let mut hh = DMatrix::zeros(n, n);
        let mut gg = DVector::zeros(n);
        let mut e = 0.0;
        for (t, (ee, h, g, ad)) in terms.iter().zip(blocks) {
            e += ee;
            // J_b = J·Ad(T_a⁻¹) and J_a = −J_b
            let hb = ad.transpose() * h * ad;
            let gb = ad.transpose() * g;
            let sa = slot.get(&t.a).copied();
            let sb = slot.get(&t.b).copied();
            if let Some(sb) = sb {
                let mut blk = hh.fixed_view_mut::<7, 7>(sb * 7, sb * 7);
                blk += hb;
                let mut gv = gg.fixed_rows_mut::<7>(sb * 7);
                gv += gb;
            }
            if let Some(sa) = sa {
                let mut blk = hh.fixed_view_mut::<7, 7>(sa * 7, sa * 7);
                blk += hb;
                let mut gv = gg.fixed_rows_mut::<7>(sa * 7);
                gv -= gb;
            }
            if let (Some(sa), Some(sb)) = (sa, sb) {
                let mut ab = hh.fixed_view_mut::<7, 7>(sa * 7, sb * 7);
                ab -= hb;
                let mut ba = hh.fixed_view_mut::<7, 7>(sb * 7, sa * 7);
                ba -= hb.transpose();
            }
        }
        (e, hh, gg)
    };

    let (mut e, mut h, mut g) = linearize(&poses);
    let initial_energy = e;
    let mut trace = vec![e];
    let mut iterations = 0;
    let mut converged = n == 0 || terms.is_empty();
    let mut lambda = 0.0;
    while !converged && iterations < cfg.max_iters {
        if g.norm() < cfg.g_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut damped = h.clone();
        for i in 0..n {
            damped[(i, i)] += lambda * h[(i, i)] + 1e-12;
        }
        let accepted = match damped.cholesky() {
            Some(chol) => {
                let step = chol.solve(&(-&g));
                let mut cand = poses.clone();
                for (s, &i) in free.iter().enumerate() {
                    let tau = Tangent(Vector7::from_iterator(step.rows(s * 7, 7).iter().copied()));
                    cand[i] = Sim3::retract(&tau, &poses[i]);
                }
                let e_new = total_energy(&terms, &cand, kernel);
                if e_new <= e && cand.iter().all(|p| p.is_finite()) {
                    poses = cand;
                    if step.norm() < 1e-14 {
                        converged = true;
                    }
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        if accepted {
            (e, h, g) = linearize(&poses);
            trace.push(e);
            lambda /= 10.0;
        } else {
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            if lambda > 1e10 {
                converged = true;
            }
        }
    }
    for &i in &free {
        graph.nodes.insert(ids[i], poses[i]);
    }
    Ok(GraphReport {
        initial_energy,
        final_energy: e,
        iterations,
        energy_trace: trace,
        converged,
    })
}
