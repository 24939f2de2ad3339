//! Decoding and describing discrete dependency trees.
//!
//! Trees are decoded from raw attention scores with Chu-Liu-Edmonds. The
//! maximum-score tree is also the most probable one under the marginal
//! distribution of [`crate::mtt`], so there is no need to exponentiate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtt::ScoreSet;

/// Head assignment for `n` units; `None` marks the artificial root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyTree {
    #[serde(with = "heads_codec")]
    pub heads: Vec<Option<usize>>,
    #[serde(default)]
    pub score: f64,
}

/// Heads are written as integers with `-1` for the root.
mod heads_codec {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(heads: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(heads.iter().map(|h| h.map_or(-1, |h| h as i64)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        Vec::<i64>::deserialize(d)?
            .into_iter()
            .map(|h| match h {
                -1 => Ok(None),
                h if h >= 0 => Ok(Some(h as usize)),
                h => Err(D::Error::custom(format!("invalid head {h}"))),
            })
            .collect()
    }
}

impl DependencyTree {
    /// Builds a tree and fills in its score under `s`.
    pub fn scored(heads: Vec<Option<usize>>, s: &ScoreSet) -> Self {
        let score = s.tree_score(&heads);
        DependencyTree { heads, score }
    }

    pub fn n(&self) -> usize {
        self.heads.len()
    }

    /// The unique unit attached to the root, if the tree is valid.
    pub fn root_child(&self) -> Option<usize> {
        let mut roots = self.heads.iter().enumerate().filter(|(_, h)| h.is_none());
        match (roots.next(), roots.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    /// Checks the single-root, in-range, no-self-loop and acyclicity invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        for (i, h) in self.heads.iter().enumerate() {
            if let Some(h) = h {
                if *h >= n || *h == i {
                    return Err(Error::LengthMismatch(format!(
                        "unit {i} has invalid head {h}"
                    )));
                }
            }
        }
        if self.root_child().is_none() {
            return Err(Error::LengthMismatch(
                "tree must have exactly one root child".into(),
            ));
        }
        if !crate::mtt::is_acyclic(&self.heads) {
            return Err(Error::LengthMismatch("head graph contains a cycle".into()));
        }
        Ok(())
    }

    /// Distance of every unit from the artificial root (root children have depth 1).
    pub fn depths(&self) -> Vec<usize> {
        let n = self.n();
        let mut depth = vec![0usize; n];
        for (start, slot) in depth.iter_mut().enumerate() {
            let mut d = 1;
            let mut cur = start;
            while let Some(h) = self.heads[cur] {
                d += 1;
                cur = h;
                if d > n {
                    break;
                }
            }
            *slot = d;
        }
        depth
    }

    /// Longest root-to-leaf path, counted in edges including the root edge.
    pub fn height(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }
}

const ROOT: usize = 0;

/// Maximum arborescence of a dense graph rooted at node 0.
///
/// `w[u][v]` is the weight of edge u -> v; entries into the root and on the
/// diagonal are ignored. Returns `parent[v]` for every node (`parent[0]` is
/// unused). Ties go to the lower-indexed head.
fn max_arborescence(w: &[Vec<f64>]) -> Vec<usize> {
    let m = w.len();
    let mut best_in = vec![ROOT; m];
    for v in 1..m {
        let mut best = f64::NEG_INFINITY;
        let mut arg = None;
        for (u, row) in w.iter().enumerate() {
            if u != v && (arg.is_none() || row[v] > best) {
                best = row[v];
                arg = Some(u);
            }
        }
        best_in[v] = arg.expect("graph has at least two nodes");
    }

    let Some(cycle) = find_cycle(&best_in) else {
        return best_in;
    };

    let mut in_cycle = vec![false; m];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    // Nodes outside the cycle keep their relative order; the contracted node is last.
    let outside: Vec<usize> = (0..m).filter(|&v| !in_cycle[v]).collect();
    let c = outside.len();
    let mut sub = vec![vec![f64::NEG_INFINITY; c + 1]; c + 1];
    let mut enter = vec![0usize; c + 1];
    let mut leave = vec![0usize; c + 1];
    for (iu, &u) in outside.iter().enumerate() {
        for (iv, &v) in outside.iter().enumerate() {
            sub[iu][iv] = w[u][v];
        }
        // Entering the cycle at v replaces v's cycle edge.
        let mut best = f64::NEG_INFINITY;
        let mut arg = None;
        for &v in &cycle {
            let gain = w[u][v] - w[best_in[v]][v];
            if arg.is_none() || gain > best {
                best = gain;
                arg = Some(v);
            }
        }
        sub[iu][c] = best;
        enter[iu] = arg.unwrap();

        let mut best = f64::NEG_INFINITY;
        let mut arg = None;
        for &x in &cycle {
            if arg.is_none() || w[x][u] > best {
                best = w[x][u];
                arg = Some(x);
            }
        }
        sub[c][iu] = best;
        leave[iu] = arg.unwrap();
    }

    let sub_parent = max_arborescence(&sub);

    let mut parent = best_in.clone();
    for (iv, &v) in outside.iter().enumerate() {
        if v == ROOT {
            continue;
        }
        let p = sub_parent[iv];
        parent[v] = if p == c { leave[iv] } else { outside[p] };
    }
    let entry_from = sub_parent[c];
    let entry_node = enter[entry_from];
    parent[entry_node] = outside[entry_from];
    parent
}

/// Some cycle of the functional graph `parent` (node 0 is the root), if any.
fn find_cycle(parent: &[usize]) -> Option<Vec<usize>> {
    let m = parent.len();
    let mut state = vec![0u8; m]; // 0 unvisited, 1 on current path, 2 done
    state[ROOT] = 2;
    for start in 1..m {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&x| x == v).unwrap();
            return Some(path[pos..].to_vec());
        }
        for x in path {
            state[x] = 2;
        }
    }
    None
}

fn to_graph(s: &ScoreSet, only_root_child: Option<usize>) -> Vec<Vec<f64>> {
    let n = s.n();
    let mut w = vec![vec![f64::NEG_INFINITY; n + 1]; n + 1];
    for j in 0..n {
        if only_root_child.is_none_or(|r| r == j) {
            w[ROOT][j + 1] = s.f_root()[j];
        }
        for i in 0..n {
            if i != j {
                w[i + 1][j + 1] = s.f()[(i, j)];
            }
        }
    }
    w
}

fn decode(s: &ScoreSet, only_root_child: Option<usize>) -> DependencyTree {
    let parent = max_arborescence(&to_graph(s, only_root_child));
    let heads = parent[1..]
        .iter()
        .map(|&p| if p == ROOT { None } else { Some(p - 1) })
        .collect();
    DependencyTree::scored(heads, s)
}

/// Maximum-score single-root tree.
///
/// The unconstrained arborescence is tried first; when it attaches several
/// units to the root, every unit is tried as the sole root child and the best
/// result is kept (lowest unit on ties).
pub fn chu_liu_edmonds(s: &ScoreSet) -> Result<DependencyTree> {
    let n = s.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if n == 1 {
        return Ok(DependencyTree::scored(vec![None], s));
    }
    let free = decode(s, None);
    if free.heads.iter().filter(|h| h.is_none()).count() == 1 {
        return Ok(free);
    }
    let mut best: Option<DependencyTree> = None;
    for r in 0..n {
        let t = decode(s, Some(r));
        if best.as_ref().is_none_or(|b| t.score > b.score) {
            best = Some(t);
        }
    }
    Ok(best.expect("n >= 2"))
}

/// Highest-scoring single-root tree by enumeration (`n <= 7`); ties keep the
/// first tree in enumeration order. Also reports whether the maximum is unique.
pub fn brute_force_best_tree(s: &ScoreSet) -> Result<(DependencyTree, bool)> {
    let mut best: Option<(f64, Vec<Option<usize>>)> = None;
    let mut unique = true;
    crate::mtt::for_each_tree(s.n(), |heads| {
        let score = s.tree_score(heads);
        match &best {
            Some((b, _)) if score < *b => {}
            Some((b, _)) if score == *b => unique = false,
            _ => {
                best = Some((score, heads.to_vec()));
                unique = true;
            }
        }
    })?;
    let (score, heads) = best.ok_or(Error::EmptyInput)?;
    Ok((DependencyTree { heads, score }, unique))
}

/// Projectivity of `t` when its units are laid out in `order` (left to right).
///
/// The root sits left of every unit. Equivalent to the absence of crossing
/// edges: every unit strictly between a head and its dependent must descend
/// from that head.
pub fn is_projective(t: &DependencyTree, order: &[usize]) -> bool {
    let n = t.n();
    debug_assert_eq!(order.len(), n);
    let mut pos = vec![0usize; n];
    for (p, &u) in order.iter().enumerate() {
        pos[u] = p;
    }
    let dominates = |anc: usize, mut v: usize| -> bool {
        for _ in 0..=n {
            if v == anc {
                return true;
            }
            match t.heads[v] {
                Some(h) => v = h,
                None => return false,
            }
        }
        false
    };
    for (d, h) in t.heads.iter().enumerate() {
        // Root edges need no check: the root dominates every unit.
        let Some(h) = *h else { continue };
        let (lo, hi) = if pos[h] < pos[d] {
            (pos[h], pos[d])
        } else {
            (pos[d], pos[h])
        };
        if order[lo + 1..hi].iter().any(|&u| !dominates(h, u)) {
            return false;
        }
    }
    true
}

/// Projectivity under the natural order `0..n`.
pub fn is_projective_in_order(t: &DependencyTree) -> bool {
    let order: Vec<usize> = (0..t.n()).collect();
    is_projective(t, &order)
}

/// Aggregate statistics over a collection of trees.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeStats {
    pub trees: usize,
    pub projective_fraction: f64,
    pub mean_height: f64,
    /// Depth -> fraction of all units at that depth.
    pub depth_histogram: BTreeMap<usize, f64>,
    /// Fraction of non-root edges shared with the reference trees.
    pub edge_agreement: Option<f64>,
}

pub fn tree_stats(
    trees: &[DependencyTree],
    reference: Option<&[DependencyTree]>,
) -> Result<TreeStats> {
    if trees.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(reference) = reference {
        if reference.len() != trees.len() {
            return Err(Error::LengthMismatch(format!(
                "{} trees vs {} reference trees",
                trees.len(),
                reference.len()
            )));
        }
        if let Some(k) = trees
            .iter()
            .zip(reference)
            .position(|(t, r)| t.n() != r.n())
        {
            return Err(Error::LengthMismatch(format!(
                "tree {k} has {} units, reference has {}",
                trees[k].n(),
                reference[k].n()
            )));
        }
    }

    let mut projective = 0usize;
    let mut height_total = 0usize;
    let mut depth_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut units = 0usize;
    for t in trees {
        if is_projective_in_order(t) {
            projective += 1;
        }
        let depths = t.depths();
        height_total += depths.iter().copied().max().unwrap_or(0);
        for d in depths {
            *depth_counts.entry(d).or_default() += 1;
            units += 1;
        }
    }

    let edge_agreement = reference.map(|reference| {
        let mut same = 0usize;
        let mut total = 0usize;
        for (t, r) in trees.iter().zip(reference) {
            for (h, rh) in t.heads.iter().zip(&r.heads) {
                if h.is_some() {
                    total += 1;
                    if h == rh {
                        same += 1;
                    }
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    });

    let count = trees.len() as f64;
    Ok(TreeStats {
        trees: trees.len(),
        projective_fraction: projective as f64 / count,
        mean_height: height_total as f64 / count,
        depth_histogram: depth_counts
            .into_iter()
            .map(|(d, c)| (d, c as f64 / units as f64))
            .collect(),
        edge_agreement,
    })
}

impl TreeStats {
    /// `(label, formatted value)` rows in report order.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            (
                "Projective".to_string(),
                format!("{:.1}%", 100.0 * self.projective_fraction),
            ),
            ("Height".to_string(), format!("{:.2}", self.mean_height)),
        ];
        for (d, frac) in &self.depth_histogram {
            rows.push((format!("depth {d}"), format!("{:.1}%", 100.0 * frac)));
        }
        if let Some(same) = self.edge_agreement {
            rows.push(("Same Edges".to_string(), format!("{:.1}%", 100.0 * same)));
        }
        rows
    }

    /// Aligned plain-text table; the depth rows are grouped under `Nodes`.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        let vwidth = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut out = String::new();
        let mut grouped = false;
        for (label, value) in &rows {
            if !grouped && label.starts_with("depth") {
                let _ = writeln!(out, "Nodes");
                grouped = true;
            }
            let _ = writeln!(out, "{label:<width$}  {value:>vwidth$}");
        }
        let _ = writeln!(
            out,
            "({} trees; height and depth count edges from the artificial root)",
            self.trees
        );
        out
    }

    /// `metric,value` CSV with unformatted values (percentages in 0-100).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "projective_pct,{}", 100.0 * self.projective_fraction);
        let _ = writeln!(out, "height,{}", self.mean_height);
        for (d, frac) in &self.depth_histogram {
            let _ = writeln!(out, "depth_{d}_pct,{}", 100.0 * frac);
        }
        if let Some(same) = self.edge_agreement {
            let _ = writeln!(out, "same_edges_pct,{}", 100.0 * same);
        }
        out
    }
}
