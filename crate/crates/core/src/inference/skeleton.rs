//! One-pixel skeletons of binary images and their node/edge graphs.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::InferenceError;
use crate::geometry::Point;
use crate::render::{BinaryImage, CanvasSize};

/// Pixel as `(row, col)`.
pub type Pixel = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Endpoint,
    Junction,
    /// Arbitrary point on a cycle with no other nodes.
    Anchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonNode {
    pub kind: NodeKind,
    pub pixels: Vec<Pixel>,
}

impl SkeletonNode {
    pub fn position(&self) -> Point {
        let n = self.pixels.len() as f64;
        let (r, c) = self.pixels.iter().fold((0.0, 0.0), |(r, c), &(pr, pc)| (r + pr as f64, c + pc as f64));
        Point::new(c / n, r / n)
    }
}

/// A pixel path between two nodes, inclusive of one pixel of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEdge {
    pub a: usize,
    pub b: usize,
    pub path: Vec<Pixel>,
}

impl SkeletonEdge {
    pub fn is_loop(&self) -> bool {
        self.a == self.b
    }

    pub fn points(&self) -> Vec<Point> {
        self.path.iter().map(|&(r, c)| Point::new(c as f64, r as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub size: CanvasSize,
    pub nodes: Vec<SkeletonNode>,
    pub edges: Vec<SkeletonEdge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonConfig {
    /// Junction pixels closer than this are one node.
    pub junction_merge: f64,
    /// Endpoint-to-junction edges with at most this many pixels are pruned.
    pub spur_length: usize,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self { junction_merge: 2.0, spur_length: 4 }
    }
}

impl SkeletonGraph {
    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().map(|e| (e.a == node) as usize + (e.b == node) as usize).sum()
    }

    /// Every pixel on a node or an edge.
    pub fn pixels(&self) -> BTreeSet<Pixel> {
        self.nodes.iter().flat_map(|n| n.pixels.iter().copied()).chain(self.edges.iter().flat_map(|e| e.path.iter().copied())).collect()
    }

    pub fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.a), find(&mut parent, e.b));
            parent[a] = b;
        }
        (0..self.nodes.len()).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Independent cycles: edges - nodes + components.
    pub fn cycle_rank(&self) -> usize {
        self.edges.len() + self.components() - self.nodes.len()
    }
}

struct Grid {
    w: usize,
    h: usize,
    on: Vec<bool>,
}

const OFFSETS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

impl Grid {
    fn get(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w && self.on[r as usize * self.w + c as usize]
    }

    /// Neighbors P2..P9 clockwise from north.
    fn ring(&self, r: usize, c: usize) -> [bool; 8] {
        OFFSETS.map(|(dr, dc)| self.get(r as isize + dr, c as isize + dc))
    }

    fn neighbors(&self, (r, c): Pixel) -> Vec<Pixel> {
        OFFSETS
            .iter()
            .filter(|&&(dr, dc)| self.get(r as isize + dr, c as isize + dc))
            .map(|&(dr, dc)| ((r as isize + dr) as usize, (c as isize + dc) as usize))
            .collect()
    }

    fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        (0..self.h).flat_map(move |r| (0..self.w).map(move |c| (r, c))).filter(|&(r, c)| self.on[r * self.w + c])
    }
}

fn transitions(p: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count()
}

/// Zhang-Suen thinning.
fn thin(g: &mut Grid) {
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut kill = Vec::new();
            for (r, c) in g.pixels() {
                let p = g.ring(r, c);
                let b = p.iter().filter(|&&v| v).count();
                if !(2..=6).contains(&b) || transitions(&p) != 1 {
                    continue;
                }
                let (n, e, s, w) = (p[0], p[2], p[4], p[6]);
                let ok = if step == 0 { !(n && e && s) && !(e && s && w) } else { !(n && e && w) && !(n && s && w) };
                if ok {
                    kill.push(r * g.w + c);
                }
            }
            changed |= !kill.is_empty();
            for i in kill {
                g.on[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Removes staircase corners: pixels whose only two neighbors are
/// orthogonal and touch each other diagonally.
fn remove_corners(g: &mut Grid) {
    loop {
        let mut changed = false;
        let pixels: Vec<Pixel> = g.pixels().collect();
        for (r, c) in pixels {
            let p = g.ring(r, c);
            if p.iter().filter(|&&v| v).count() != 2 {
                continue;
            }
            let corner = (p[0] && p[2]) || (p[2] && p[4]) || (p[4] && p[6]) || (p[6] && p[0]);
            if corner {
                g.on[r * g.w + c] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Thins the ink to one pixel and returns the skeleton pixels.
pub fn thin_image(image: &BinaryImage) -> Vec<Pixel> {
    let size = image.size();
    let mut g = Grid { w: size.width, h: size.height, on: image.bits().iter().map(|&b| b != 0).collect() };
    thin(&mut g);
    remove_corners(&mut g);
    g.pixels().collect()
}

struct Builder<'a> {
    grid: &'a Grid,
    node_of: BTreeMap<Pixel, usize>,
    nodes: Vec<SkeletonNode>,
    edges: Vec<SkeletonEdge>,
    visited: HashSet<Pixel>,
}

fn adjacent4(a: Pixel, b: Pixel) -> bool {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
}

impl Builder<'_> {
    fn add_node(&mut self, kind: NodeKind, pixels: Vec<Pixel>) -> usize {
        let id = self.nodes.len();
        for &p in &pixels {
            self.node_of.insert(p, id);
        }
        self.nodes.push(SkeletonNode { kind, pixels });
        id
    }

    /// Follows a chain from node pixel `from` through chain pixel `first`.
    fn trace(&mut self, start: usize, from: Pixel, first: Pixel) {
        let mut path = vec![from, first];
        self.visited.insert(first);
        let mut prev = from;
        let mut cur = first;
        loop {
            let mut cands: Vec<Pixel> = self.grid.neighbors(cur).into_iter().filter(|&q| q != prev && (q == path[0] || !path.contains(&q))).collect();
            cands.sort_by_key(|&q| !adjacent4(cur, q));
            let end = cands.iter().find(|q| self.node_of.get(q).is_some_and(|&n| n != start)).copied();
            if let Some(q) = end {
                path.push(q);
                let b = self.node_of[&q];
                self.edges.push(SkeletonEdge { a: start, b, path });
                return;
            }
            if let Some(&q) = cands.iter().find(|q| !self.node_of.contains_key(q) && !self.visited.contains(q)) {
                self.visited.insert(q);
                path.push(q);
                prev = cur;
                cur = q;
                continue;
            }
            if path.len() >= 3 {
                if let Some(&q) = cands.iter().find(|q| self.node_of.get(q) == Some(&start)) {
                    path.push(q);
                    self.edges.push(SkeletonEdge { a: start, b: start, path });
                    return;
                }
            }
            // Dead end: the chain stops without reaching a node.
            self.node_of.remove(&cur);
            let b = self.add_node(NodeKind::Endpoint, vec![cur]);
            self.edges.push(SkeletonEdge { a: start, b, path });
            return;
        }
    }

    fn trace_from(&mut self, n: usize) {
        let pixels = self.nodes[n].pixels.clone();
        for p in pixels {
            for q in self.grid.neighbors(p) {
                match self.node_of.get(&q) {
                    Some(&m) if m == n => {}
                    Some(&m) => {
                        let dup = self.edges.iter().any(|e| {
                            e.path.len() == 2 && ((e.path[0] == p && e.path[1] == q) || (e.path[0] == q && e.path[1] == p))
                        });
                        if !dup && m > n {
                            self.edges.push(SkeletonEdge { a: n, b: m, path: vec![p, q] });
                        }
                    }
                    None if !self.visited.contains(&q) => self.trace(n, p, q),
                    None => {}
                }
            }
        }
    }
}

fn cluster(pixels: &[Pixel], radius: f64) -> Vec<Vec<Pixel>> {
    let mut parent: Vec<usize> = (0..pixels.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..pixels.len() {
        for j in i + 1..pixels.len() {
            let dr = pixels[i].0 as f64 - pixels[j].0 as f64;
            let dc = pixels[i].1 as f64 - pixels[j].1 as f64;
            if (dr * dr + dc * dc).sqrt() <= radius + 1e-9 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Pixel>> = BTreeMap::new();
    for i in 0..pixels.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(pixels[i]);
    }
    let mut out: Vec<Vec<Pixel>> = groups.into_values().collect();
    out.sort();
    out
}

/// Thinning followed by node and edge extraction.
pub fn extract_skeleton(image: &BinaryImage, cfg: &SkeletonConfig) -> Result<SkeletonGraph, InferenceError> {
    if image.ink_count() == 0 {
        return Err(InferenceError::EmptyImage);
    }
    let size = image.size();
    let mut grid = Grid { w: size.width, h: size.height, on: image.bits().iter().map(|&b| b != 0).collect() };
    thin(&mut grid);
    remove_corners(&mut grid);
    let mut junctions = Vec::new();
    let mut endpoints = Vec::new();
    let all: Vec<Pixel> = grid.pixels().collect();
    for p in all {
        match grid.neighbors(p).len() {
            0 => grid.on[p.0 * grid.w + p.1] = false,
            1 => endpoints.push(p),
            2 => {}
            _ => junctions.push(p),
        }
    }
    if grid.pixels().next().is_none() {
        return Err(InferenceError::EmptyImage);
    }
    let mut b = Builder { grid: &grid, node_of: BTreeMap::new(), nodes: Vec::new(), edges: Vec::new(), visited: HashSet::new() };
    for mut c in cluster(&junctions, cfg.junction_merge) {
        // Chain pixels wedged between pixels of one cluster belong to it.
        let members: BTreeSet<Pixel> = c.iter().copied().collect();
        let mut extra: Vec<Pixel> = c
            .iter()
            .flat_map(|&p| grid.neighbors(p))
            .filter(|q| !members.contains(q) && grid.neighbors(*q).len() == 2 && grid.neighbors(*q).iter().all(|n| members.contains(n)))
            .collect();
        extra.sort();
        extra.dedup();
        c.extend(extra);
        c.sort();
        b.add_node(NodeKind::Junction, c);
    }
    for p in endpoints {
        b.add_node(NodeKind::Endpoint, vec![p]);
    }
    for n in 0..b.nodes.len() {
        b.trace_from(n);
    }
    enclosed_loops(&mut b);
    let rest: Vec<Pixel> = grid.pixels().filter(|p| !b.node_of.contains_key(p) && !b.visited.contains(p)).collect();
    for p in rest {
        if b.visited.contains(&p) || b.node_of.contains_key(&p) {
            continue;
        }
        let n = b.add_node(NodeKind::Anchor, vec![p]);
        b.trace_from(n);
    }
    let mut g = SkeletonGraph { size, nodes: b.nodes, edges: b.edges };
    prune_spurs(&mut g, cfg.spur_length);
    dissolve_pass_through(&mut g);
    Ok(g)
}

/// Holes ringed entirely by one junction's pixels become short self-loops
/// on that junction, so merging never closes a cycle.
fn enclosed_loops(b: &mut Builder) {
    let g = b.grid;
    let (w, h) = (g.w as isize, g.h as isize);
    let mut label = vec![usize::MAX; g.w * g.h];
    let mut next = 0;
    for start in 0..g.w * g.h {
        if g.on[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut region = Vec::new();
        let mut open = false;
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / g.w) as isize, (i % g.w) as isize);
            region.push((r as usize, c as usize));
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (r2, c2) = (r + dr, c + dc);
                if r2 < 0 || c2 < 0 || r2 >= h || c2 >= w {
                    open = true;
                    continue;
                }
                let j = r2 as usize * g.w + c2 as usize;
                if !g.on[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
        if open {
            continue;
        }
        let mut ring: Vec<Pixel> = region
            .iter()
            .flat_map(|&(r, c)| OFFSETS.iter().map(move |&(dr, dc)| ((r as isize + dr) as usize, (c as isize + dc) as usize)))
            .filter(|&(r, c)| g.on[r * g.w + c])
            .collect();
        ring.sort();
        ring.dedup();
        let owners: BTreeSet<Option<usize>> = ring.iter().map(|p| b.node_of.get(p).copied()).collect();
        let [Some(n)] = owners.into_iter().collect::<Vec<_>>()[..] else { continue };
        if b.nodes[n].kind != NodeKind::Junction {
            continue;
        }
        let (cr, cc) = region.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        let (cr, cc) = (cr / region.len() as f64, cc / region.len() as f64);
        ring.sort_by(|p, q| {
            let ang = |(r, c): Pixel| (r as f64 - cr).atan2(c as f64 - cc);
            ang(*p).total_cmp(&ang(*q))
        });
        let mut path = ring.clone();
        path.push(ring[0]);
        b.edges.push(SkeletonEdge { a: n, b: n, path });
    }
}

fn remove_nodes(g: &mut SkeletonGraph, dead: &BTreeSet<usize>) {
    let map: Vec<Option<usize>> = {
        let mut next = 0;
        (0..g.nodes.len())
            .map(|i| {
                if dead.contains(&i) {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    };
    g.nodes = g.nodes.iter().enumerate().filter(|(i, _)| !dead.contains(i)).map(|(_, n)| n.clone()).collect();
    for e in &mut g.edges {
        e.a = map[e.a].expect("edge to removed node");
        e.b = map[e.b].expect("edge to removed node");
    }
}

/// Drops short endpoint-to-junction edges left by thinning at corners and
/// bar ends.
fn prune_spurs(g: &mut SkeletonGraph, max_len: usize) {
    loop {
        let spur = (0..g.edges.len()).find(|&i| {
            let e = &g.edges[i];
            if e.is_loop() || e.path.len() > max_len {
                return false;
            }
            let kinds = (g.nodes[e.a].kind, g.nodes[e.b].kind);
            let (end, junction) = match kinds {
                (NodeKind::Endpoint, NodeKind::Junction) => (e.a, e.b),
                (NodeKind::Junction, NodeKind::Endpoint) => (e.b, e.a),
                _ => return false,
            };
            let _ = end;
            g.degree(junction) >= 3
        });
        let Some(i) = spur else { break };
        let e = g.edges.remove(i);
        let end = if g.nodes[e.a].kind == NodeKind::Endpoint { e.a } else { e.b };
        remove_nodes(g, &BTreeSet::from([end]));
    }
}

/// Junctions left with two edge ends become interior path pixels; with one
/// they become endpoints.
fn dissolve_pass_through(g: &mut SkeletonGraph) {
    loop {
        let Some(n) = (0..g.nodes.len()).find(|&n| g.nodes[n].kind == NodeKind::Junction && g.degree(n) <= 2) else {
            break;
        };
        if g.degree(n) < 2 {
            g.nodes[n].kind = NodeKind::Endpoint;
            g.nodes[n].pixels.truncate(1);
            let keep = g.nodes[n].pixels[0];
            for e in g.edges.iter_mut() {
                if e.a == n {
                    e.path[0] = keep;
                }
                if e.b == n {
                    *e.path.last_mut().expect("nonempty path") = keep;
                }
            }
            continue;
        }
        let incident: Vec<usize> = (0..g.edges.len()).filter(|&i| g.edges[i].a == n || g.edges[i].b == n).collect();
        if incident.len() == 1 {
            // A loop through this junction only: keep it as an anchored cycle.
            g.nodes[n].kind = NodeKind::Anchor;
            continue;
        }
        let (i, j) = (incident[0], incident[1]);
        let oriented = |e: &SkeletonEdge, into: bool| -> (usize, Vec<Pixel>) {
            // Path ending at `n` when `into`, else starting at `n`.
            let at_end = e.b == n;
            let mut p = e.path.clone();
            let other = if at_end { e.a } else { e.b };
            if at_end != into {
                p.reverse();
            }
            (other, p)
        };
        let (a, mut first) = oriented(&g.edges[i], true);
        let (b, second) = oriented(&g.edges[j], false);
        let mut bridge = Vec::new();
        let (end, start) = (*first.last().expect("path"), second[0]);
        if end != start {
            bridge.push(start);
        }
        first.extend(bridge);
        first.extend_from_slice(&second[1..]);
        first.dedup();
        let merged = SkeletonEdge { a, b, path: first };
        g.edges.remove(j.max(i));
        g.edges.remove(j.min(i));
        g.edges.push(merged);
        remove_nodes(g, &BTreeSet::from([n]));
    }
}
