//! Primal network simplex for the dense transportation problem
//!
//! ```text
//! min sum c[i][j] f[i][j]   s.t.  sum_j f[i][j] = a[i],  sum_i f[i][j] = b[j],  f >= 0
//! ```
//!
//! The basis starts from artificial arcs through an extra root node with a
//! large cost. Entering arcs are chosen by block search; the leaving arc
//! follows the strongly feasible rule, which rules out cycling on
//! degenerate pivots.

/// Optimal transport plan between two weighted point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    /// `(source, sink, mass)` for every arc carrying positive flow.
    pub flows: Vec<(usize, usize, f64)>,
    pub total_cost: f64,
    /// Duals with `alpha[i] + beta[j] <= c[i][j]`, tight on the support.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub pivots: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimplexError {
    #[error("supplies and demands must be positive and balanced")]
    Unbalanced,
    #[error("pivot limit {0} reached")]
    PivotLimit(usize),
}

struct Network<'a> {
    n: usize,
    m: usize,
    cost: &'a [f64],
    big: f64,
}

impl Network<'_> {
    fn root(&self) -> usize {
        self.n + self.m
    }

    fn node_count(&self) -> usize {
        self.n + self.m + 1
    }

    fn real_arcs(&self) -> usize {
        self.n * self.m
    }

    fn ends(&self, arc: usize) -> (usize, usize) {
        let real = self.real_arcs();
        if arc < real {
            (arc / self.m, self.n + arc % self.m)
        } else if arc < real + self.n {
            (arc - real, self.root())
        } else {
            (self.root(), self.n + (arc - real - self.n))
        }
    }

    fn arc_cost(&self, arc: usize) -> f64 {
        if arc < self.real_arcs() {
            self.cost[arc]
        } else {
            self.big
        }
    }
}

struct Tree {
    parent: Vec<usize>,
    pred: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    // adjacency rebuilt after every pivot
    start: Vec<usize>,
    adj: Vec<(usize, usize)>,
    stack: Vec<usize>,
}

impl Tree {
    fn rebuild(&mut self, net: &Network<'_>, arcs: &[usize]) {
        let nodes = net.node_count();
        self.start.iter_mut().for_each(|s| *s = 0);
        for &a in arcs {
            let (s, t) = net.ends(a);
            self.start[s + 1] += 1;
            self.start[t + 1] += 1;
        }
        for v in 0..nodes {
            self.start[v + 1] += self.start[v];
        }
        let mut fill = self.start.clone();
        for &a in arcs {
            let (s, t) = net.ends(a);
            self.adj[fill[s]] = (t, a);
            fill[s] += 1;
            self.adj[fill[t]] = (s, a);
            fill[t] += 1;
        }
        let root = net.root();
        self.parent[root] = usize::MAX;
        self.pred[root] = usize::MAX;
        self.depth[root] = 0;
        self.potential[root] = 0.0;
        self.stack.clear();
        self.stack.push(root);
        while let Some(v) = self.stack.pop() {
            for k in self.start[v]..self.start[v + 1] {
                let (w, a) = self.adj[k];
                if a == self.pred[v] {
                    continue;
                }
                self.parent[w] = v;
                self.pred[w] = a;
                self.depth[w] = self.depth[v] + 1;
                // tree arcs have zero reduced cost c + pi_s - pi_t
                let (s, _) = net.ends(a);
                self.potential[w] = if s == v { self.potential[v] + net.arc_cost(a) } else { self.potential[v] - net.arc_cost(a) };
                self.stack.push(w);
            }
        }
    }
}

/// Solves the transportation problem for supplies `a` (length `n`), demands
/// `b` (length `m`) and row-major costs `cost` (`n x m`). Both mass vectors
/// must be positive with equal totals up to rounding.
pub fn solve(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportSolution, SimplexError> {
    let (n, m) = (a.len(), b.len());
    assert_eq!(cost.len(), n * m, "cost matrix must be n x m");
    let total_a: f64 = a.iter().sum();
    let total_b: f64 = b.iter().sum();
    if n == 0 || m == 0 || a.iter().chain(b).any(|&w| !(w > 0.0)) || (total_a - total_b).abs() > 1e-9 * total_a {
        return Err(SimplexError::Unbalanced);
    }
    let max_cost = cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let net = Network { n, m, cost, big: 1.0 + 2.0 * (n + m) as f64 * max_cost.max(1.0) };
    let nodes = net.node_count();
    let real = net.real_arcs();
    let mut flow = vec![0.0; real + n + m];
    let mut in_tree = vec![false; real + n + m];
    let mut arcs: Vec<usize> = (real..real + n + m).collect();
    flow[real..real + n].copy_from_slice(a);
    for j in 0..m {
        flow[real + n + j] = b[j];
    }
    for &e in &arcs {
        in_tree[e] = true;
    }
    let mut tree = Tree {
        parent: vec![0; nodes],
        pred: vec![0; nodes],
        depth: vec![0; nodes],
        potential: vec![0.0; nodes],
        start: vec![0; nodes + 1],
        adj: vec![(0, 0); 2 * (n + m)],
        stack: Vec::with_capacity(nodes),
    };
    tree.rebuild(&net, &arcs);
    // position of each tree arc in `arcs`
    let mut slot = vec![usize::MAX; real + n + m];
    for (k, &e) in arcs.iter().enumerate() {
        slot[e] = k;
    }

    let eps = 1e-12 * max_cost.max(1.0);
    let block = ((real as f64).sqrt().ceil() as usize).max(10).min(real);
    let max_pivots = 50 * nodes * nodes + 1000;
    let mut next = 0;
    let mut pivots = 0;
    let mut path_u = Vec::new();
    let mut path_v = Vec::new();
    loop {
        // block search over real arcs for the most negative reduced cost
        let mut entering = usize::MAX;
        let mut best = -eps;
        let mut scanned = 0;
        let mut in_block = 0;
        while scanned < real {
            let e = next;
            next = if next + 1 == real { 0 } else { next + 1 };
            scanned += 1;
            in_block += 1;
            if !in_tree[e] {
                let (s, t) = (e / m, n + e % m);
                let rc = cost[e] + tree.potential[s] - tree.potential[t];
                if rc < best {
                    best = rc;
                    entering = e;
                }
            }
            if in_block == block {
                if entering != usize::MAX {
                    break;
                }
                in_block = 0;
            }
        }
        if entering == usize::MAX {
            break;
        }
        pivots += 1;
        if pivots > max_pivots {
            return Err(SimplexError::PivotLimit(max_pivots));
        }

        // cycle: u -> v along the entering arc, then v up to the join, then down to u
        let (u, v) = net.ends(entering);
        path_u.clear();
        path_v.clear();
        let (mut x, mut y) = (u, v);
        while x != y {
            if tree.depth[x] >= tree.depth[y] {
                path_u.push(x);
                x = tree.parent[x];
            } else {
                path_v.push(y);
                y = tree.parent[y];
            }
        }
        // blocking arcs are traversed against their direction
        let mut delta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for &w in &path_u {
            let a = tree.pred[w];
            // traversed parent -> w; backward when the arc points w -> parent
            if net.ends(a).0 == w && flow[a] < delta {
                delta = flow[a];
                leaving = a;
            }
        }
        for &w in &path_v {
            let a = tree.pred[w];
            // traversed w -> parent; backward when the arc points parent -> w
            if net.ends(a).1 == w && flow[a] <= delta {
                delta = flow[a];
                leaving = a;
            }
        }
        debug_assert!(leaving != usize::MAX, "uncapacitated cycle with negative cost");
        flow[entering] += delta;
        if delta > 0.0 {
            for &w in &path_u {
                let a = tree.pred[w];
                if net.ends(a).0 == w {
                    flow[a] -= delta;
                } else {
                    flow[a] += delta;
                }
            }
            for &w in &path_v {
                let a = tree.pred[w];
                if net.ends(a).0 == w {
                    flow[a] += delta;
                } else {
                    flow[a] -= delta;
                }
            }
        }
        flow[leaving] = 0.0;
        in_tree[leaving] = false;
        in_tree[entering] = true;
        let k = slot[leaving];
        arcs[k] = entering;
        slot[entering] = k;
        slot[leaving] = usize::MAX;
        tree.rebuild(&net, &arcs);
    }

    let artificial: f64 = flow[real..].iter().sum();
    if artificial > 1e-9 * total_a {
        return Err(SimplexError::Unbalanced);
    }
    let mut flows = Vec::new();
    let mut total_cost = 0.0;
    for e in 0..real {
        if flow[e] > 0.0 {
            flows.push((e / m, e % m, flow[e]));
            total_cost += flow[e] * cost[e];
        }
    }
    Ok(TransportSolution {
        flows,
        total_cost,
        alpha: (0..n).map(|i| -tree.potential[i]).collect(),
        beta: (0..m).map(|j| tree.potential[n + j]).collect(),
        pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn check_solution(a: &[f64], b: &[f64], cost: &[f64], sol: &TransportSolution) {
        let (n, m) = (a.len(), b.len());
        let mut row = vec![0.0; n];
        let mut col = vec![0.0; m];
        for &(i, j, f) in &sol.flows {
            assert!(f > 0.0);
            row[i] += f;
            col[j] += f;
            assert!((sol.alpha[i] + sol.beta[j] - cost[i * m + j]).abs() < 1e-9, "support arc not tight");
        }
        for i in 0..n {
            assert!((row[i] - a[i]).abs() < 1e-10);
            for j in 0..m {
                assert!(sol.alpha[i] + sol.beta[j] <= cost[i * m + j] + 1e-9);
            }
        }
        for j in 0..m {
            assert!((col[j] - b[j]).abs() < 1e-10);
        }
        let dual: f64 =
            a.iter().zip(&sol.alpha).map(|(w, p)| w * p).sum::<f64>() + b.iter().zip(&sol.beta).map(|(w, p)| w * p).sum::<f64>();
        assert!((dual - sol.total_cost).abs() < 1e-9);
    }

    fn random_masses(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|w| w / s).collect()
    }

    #[test]
    fn two_by_two_by_hand() {
        // send 0.5 from 0 -> 0 and split the rest
        let a = [0.5, 0.5];
        let b = [0.7, 0.3];
        let cost = [0.0, 1.0, 2.0, 0.0];
        let sol = solve(&a, &b, &cost).unwrap();
        assert!((sol.total_cost - 0.4).abs() < 1e-15);
        check_solution(&a, &b, &cost, &sol);
    }

    #[test]
    fn random_instances_carry_certificates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(1..9);
            let m = rng.random_range(1..9);
            let a = random_masses(&mut rng, n);
            let b = random_masses(&mut rng, m);
            let cost: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.0..3.0)).collect();
            let sol = solve(&a, &b, &cost).unwrap();
            check_solution(&a, &b, &cost, &sol);
        }
    }

    #[test]
    fn degenerate_uniform_instances() {
        // uniform masses with integer costs create many ties and zero pivots
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(2..12);
            let a = vec![1.0 / n as f64; n];
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0..3) as f64).collect();
            let sol = solve(&a, &a, &cost).unwrap();
            check_solution(&a, &a, &cost, &sol);
            let assigned = super::super::assignment::solve(&cost, n);
            assert!((sol.total_cost - assigned.total_cost / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_instance_terminates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let a = random_masses(&mut rng, 120);
        let b = random_masses(&mut rng, 90);
        let cost: Vec<f64> = (0..120 * 90).map(|_| rng.random::<f64>()).collect();
        let sol = solve(&a, &b, &cost).unwrap();
        check_solution(&a, &b, &cost, &sol);
    }

    #[test]
    fn rejects_unbalanced_input() {
        assert_eq!(solve(&[0.5], &[0.7], &[1.0]), Err(SimplexError::Unbalanced));
        assert_eq!(solve(&[0.0, 1.0], &[1.0], &[1.0, 1.0]), Err(SimplexError::Unbalanced));
    }
}
