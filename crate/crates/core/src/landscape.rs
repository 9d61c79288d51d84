//! Energy landscape mapping: assign start points to local minima by monotone
//! steepest descent, estimate pairwise barriers as the maximum energy along
//! straight segments between minima, and agglomerate basins bottom-up into a
//! disconnectivity graph (single linkage on barrier heights, which realizes
//! the limit of an infinitely fine energy-threshold sweep).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::EnergyModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    /// Initial descent step size (per-step backtracking halves it on energy
    /// increases, so descent trajectories are monotone).
    pub step: f64,
    pub max_steps: usize,
    /// Stop when the energy gradient norm falls below this.
    pub grad_tol: f64,
    /// Minima closer than this in L2 ...
    pub merge_dist: f64,
    /// ... and closer than this in energy are the same minimum.
    pub merge_energy: f64,
    /// Number of evenly spaced interpolation points per barrier segment,
    /// endpoints included.
    pub interp_points: usize,
    /// Basins smaller than this are omitted from rendered graphs (kept in
    /// the data).
    pub min_basin_size: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            step: 1e-2,
            max_steps: 2000,
            grad_tol: 1e-4,
            merge_dist: 0.5,
            merge_energy: 0.1,
            interp_points: 64,
            min_basin_size: 4,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step <= 0.0 {
            return Err(Error::Config("landscape step must be positive".into()));
        }
        if self.interp_points < 2 {
            return Err(Error::Config("interp_points must be >= 2".into()));
        }
        Ok(())
    }
}

/// Anything with a batch-evaluable energy and energy gradient. Energies are
/// *energies* (low is stable): for a learned model the energy is -f(x).
pub trait EnergySurface {
    fn signal_shape(&self) -> Vec<usize>;
    /// Energies of a `[n, ...signal]` batch.
    fn batch_energy(&self, xs: &Tensor) -> Result<Vec<f64>>;
    /// Energies and energy gradients of a batch.
    fn batch_energy_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// The learned energy model as a surface: E(x) = -f(x).
pub struct ModelSurface<'a> {
    pub en: &'a EnergyModel,
}

impl EnergySurface for ModelSurface<'_> {
    fn signal_shape(&self) -> Vec<usize> {
        self.en.signal_shape.clone()
    }

    fn batch_energy(&self, xs: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.en.bind(&mut tape, false);
        let xv = tape.constant(xs.clone());
        let f = self.en.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(f).data().iter().map(|v| -v).collect())
    }

    fn batch_energy_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.en.bind(&mut tape, false);
        let xv = tape.leaf(xs.clone());
        let f = self.en.forward(&mut tape, &bound, xv)?;
        let energies: Vec<f64> = tape.value(f).data().iter().map(|v| -v).collect();
        // Per-example rows are independent, so the gradient of the summed
        // value recovers every per-example gradient at once.
        let total = tape.sum_all(f)?;
        tape.backward(total)?;
        let grad_f = tape.grad_or_zeros(xv);
        Ok((energies, grad_f.map(|v| -v)))
    }
}

/// E(x) = x^4 - x^2 on scalars: two minima at +-1/sqrt(2) with E = -1/4 and a
/// barrier of 0 at the origin.
pub struct DoubleWell1D;

impl EnergySurface for DoubleWell1D {
    fn signal_shape(&self) -> Vec<usize> {
        vec![1]
    }

    fn batch_energy(&self, xs: &Tensor) -> Result<Vec<f64>> {
        Ok(xs.data().iter().map(|&x| x.powi(4) - x * x).collect())
    }

    fn batch_energy_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let e = self.batch_energy(xs)?;
        let g = xs.map(|x| 4.0 * x.powi(3) - 2.0 * x);
        Ok((e, g))
    }
}

/// E(x, y) = (x^2 - 1)^2 + y^2 / 2: two wells at (+-1, 0) split by the x = 0
/// ridge.
pub struct QuarticTwoWell2D;

impl EnergySurface for QuarticTwoWell2D {
    fn signal_shape(&self) -> Vec<usize> {
        vec![2]
    }

    fn batch_energy(&self, xs: &Tensor) -> Result<Vec<f64>> {
        Ok((0..xs.shape()[0])
            .map(|i| {
                let r = xs.row(i);
                (r[0] * r[0] - 1.0).powi(2) + 0.5 * r[1] * r[1]
            })
            .collect())
    }

    fn batch_energy_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let e = self.batch_energy(xs)?;
        let n = xs.shape()[0];
        let mut g = Tensor::zeros(xs.shape());
        for i in 0..n {
            let r = xs.row(i);
            let (x, y) = (r[0], r[1]);
            g.data_mut()[2 * i] = 4.0 * x * (x * x - 1.0);
            g.data_mut()[2 * i + 1] = y;
        }
        let _ = n;
        Ok((e, g))
    }
}

#[derive(Clone, Debug)]
pub struct DescentResult {
    pub point: Tensor,
    pub energy: f64,
    pub steps: usize,
}

const MAX_HALVINGS: usize = 20;

/// Monotone steepest descent from a single start point (shape `[...signal]`).
pub fn steepest_descent(
    x0: &Tensor,
    surface: &dyn EnergySurface,
    cfg: &LandscapeConfig,
) -> Result<DescentResult> {
    cfg.validate()?;
    let mut shape = vec![1];
    shape.extend_from_slice(x0.shape());
    let batch = x0.reshaped(&shape)?;
    let (points, energies, steps) = descend_batch(&batch, surface, cfg)?;
    Ok(DescentResult {
        point: points.row(0).to_vec().into_tensor(x0.shape()),
        energy: energies[0],
        steps: steps[0],
    })
}

trait IntoTensor {
    fn into_tensor(self, shape: &[usize]) -> Tensor;
}

impl IntoTensor for Vec<f64> {
    fn into_tensor(self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), self).expect("row matches signal shape")
    }
}

/// Batched monotone descent; every row follows exactly the trajectory the
/// single-start routine would take.
fn descend_batch(
    starts: &Tensor,
    surface: &dyn EnergySurface,
    cfg: &LandscapeConfig,
) -> Result<(Tensor, Vec<f64>, Vec<usize>)> {
    let n = starts.shape()[0];
    let row_len: usize = starts.shape()[1..].iter().product();
    let mut points = starts.clone();
    let mut energies = surface.batch_energy(&points)?;
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("descent start energy".into()));
    }
    let mut steps = vec![0usize; n];
    let mut active: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.max_steps {
        if active.is_empty() {
            break;
        }
        let sub = points.gather_rows(&active);
        let (sub_e, sub_g) = surface.batch_energy_grad(&sub)?;
        if sub_e.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("descent energy".into()));
        }

        // Drop converged rows.
        let mut still = Vec::with_capacity(active.len());
        for (k, &idx) in active.iter().enumerate() {
            let g = sub_g.row(k);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < cfg.grad_tol {
                continue;
            }
            still.push((idx, k));
        }
        if still.is_empty() {
            break;
        }

        // Backtracking: halve the step for any row whose energy would rise.
        let mut pending: Vec<(usize, usize)> = still.clone();
        let mut eta = vec![cfg.step; n];
        let mut halvings = 0;
        while !pending.is_empty() && halvings <= MAX_HALVINGS {
            let mut trial_rows = Vec::with_capacity(pending.len() * row_len);
            for &(idx, k) in &pending {
                let p = points.row(idx);
                let g = sub_g.row(k);
                for j in 0..row_len {
                    trial_rows.push(p[j] - eta[idx] * g[j]);
                }
            }
            let mut tshape = vec![pending.len()];
            tshape.extend_from_slice(&starts.shape()[1..]);
            let trials = Tensor::from_vec(tshape, trial_rows)?;
            let trial_e = surface.batch_energy(&trials)?;

            let mut retry = Vec::new();
            for (row, &(idx, k)) in pending.iter().enumerate() {
                if trial_e[row].is_finite() && trial_e[row] <= energies[idx] {
                    let dst = idx * row_len;
                    let src = trials.row(row);
                    points.data_mut()[dst..dst + row_len].copy_from_slice(src);
                    energies[idx] = trial_e[row];
                    steps[idx] += 1;
                } else {
                    eta[idx] *= 0.5;
                    retry.push((idx, k));
                }
            }
            pending = retry;
            halvings += 1;
        }
        // Rows that could not descend along -g even at the smallest step are
        // numerically at a minimum.
        let stuck: Vec<usize> = pending.iter().map(|&(idx, _)| idx).collect();
        active = still
            .iter()
            .map(|&(idx, _)| idx)
            .filter(|idx| !stuck.contains(idx))
            .collect();
    }
    Ok((points, energies, steps))
}

// ── Minima identity and barriers ────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Minimum {
    pub point: Tensor,
    pub energy: f64,
    /// Indices of the start points whose descent ended in this basin.
    pub members: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BasinMap {
    pub minima: Vec<Minimum>,
    /// start index -> minimum index
    pub assignment: Vec<usize>,
    /// Energy of each start point (before descent).
    pub start_energies: Vec<f64>,
}

/// Greedy first-seen clustering of raw minima: a minimum joins an existing
/// canonical one iff both the L2 and energy gaps are below the tolerances.
pub fn dedupe_minima(
    points: &Tensor,
    energies: &[f64],
    merge_dist: f64,
    merge_energy: f64,
) -> (Vec<(Tensor, f64)>, Vec<usize>) {
    let n = points.shape()[0];
    let shape = &points.shape()[1..];
    let mut canonical: Vec<(Tensor, f64)> = Vec::new();
    let mut remap = Vec::with_capacity(n);
    for i in 0..n {
        let row = points.row(i).to_vec().into_tensor(shape);
        let mut found = None;
        for (ci, (cp, ce)) in canonical.iter().enumerate() {
            if row.l2_distance(cp) < merge_dist && (energies[i] - ce).abs() < merge_energy {
                found = Some(ci);
                break;
            }
        }
        match found {
            Some(ci) => remap.push(ci),
            None => {
                canonical.push((row, energies[i]));
                remap.push(canonical.len() - 1);
            }
        }
    }
    (canonical, remap)
}

/// Highest energy along the inclusive straight segment between two minima,
/// evaluated at `n_interp` evenly spaced points.
pub fn barrier(
    a: &Tensor,
    b: &Tensor,
    surface: &dyn EnergySurface,
    n_interp: usize,
) -> Result<f64> {
    if n_interp < 2 {
        return Err(Error::Config("barrier needs at least 2 interpolation points".into()));
    }
    let row_len = a.numel();
    let mut rows = Vec::with_capacity(n_interp * row_len);
    for k in 0..n_interp {
        let gamma = k as f64 / (n_interp - 1) as f64;
        for j in 0..row_len {
            rows.push(a.data()[j] + gamma * (b.data()[j] - a.data()[j]));
        }
    }
    let mut shape = vec![n_interp];
    shape.extend_from_slice(a.shape());
    let batch = Tensor::from_vec(shape, rows)?;
    let energies = surface.batch_energy(&batch)?;
    Ok(energies.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Symmetric matrix of pairwise barriers; the diagonal holds each minimum's
/// own energy.
pub fn barrier_matrix(
    minima: &[(Tensor, f64)],
    surface: &dyn EnergySurface,
    n_interp: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = minima.len();
    let mut mat = vec![vec![0.0; n]; n];
    for i in 0..n {
        mat[i][i] = minima[i].1;
        for j in i + 1..n {
            let b = barrier(&minima[i].0, &minima[j].0, surface, n_interp)?;
            mat[i][j] = b;
            mat[j][i] = b;
        }
    }
    Ok(mat)
}

// ── Disconnectivity graph ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DgLeaf {
    /// Index into the canonical minima list.
    pub minimum: usize,
    pub energy: f64,
    pub members: usize,
    pub purity: Option<f64>,
    /// False when pruned from rendered graphs by min_basin_size.
    pub rendered: bool,
}

/// One agglomeration event: `a` and `b` are node ids (leaves are `0..n` in
/// leaf order, internal nodes are `n + k` for the k-th merge).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeEvent {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisconnectivityGraph {
    /// Leaves ordered by energy, lowest first.
    pub leaves: Vec<DgLeaf>,
    pub merges: Vec<MergeEvent>,
    /// Merge height between leaves i and j (leaf order); diagonal = leaf
    /// energy. This is the minimax path value over the barrier graph.
    pub ultrametric: Vec<Vec<f64>>,
    pub min_basin_size: usize,
}

/// Single-linkage agglomeration on the barrier matrix. `member_counts` and
/// `purity` follow the barrier matrix's minima order.
pub fn build_dg(
    energies: &[f64],
    barriers: &[Vec<f64>],
    member_counts: &[usize],
    purity: &[Option<f64>],
    min_basin_size: usize,
) -> Result<DisconnectivityGraph> {
    let n = energies.len();
    if n == 0 {
        return Err(Error::Data("disconnectivity graph needs at least one minimum".into()));
    }
    for (i, row) in barriers.iter().enumerate() {
        for j in 0..n {
            if (row[j] - barriers[j][i]).abs() > 0.0 {
                return Err(Error::Data(format!("barrier matrix not symmetric at ({i},{j})")));
            }
        }
    }

    // Leaves sorted by energy; remap barrier indices into leaf order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
    let leaves: Vec<DgLeaf> = order
        .iter()
        .map(|&m| DgLeaf {
            minimum: m,
            energy: energies[m],
            members: member_counts.get(m).copied().unwrap_or(0),
            purity: purity.get(m).copied().unwrap_or(None),
            rendered: member_counts.get(m).copied().unwrap_or(0) >= min_basin_size,
        })
        .collect();
    let bar = |i: usize, j: usize| barriers[order[i]][order[j]];

    // Single linkage: cluster distance = min cross-pair barrier.
    let mut cluster_node: Vec<usize> = (0..n).collect();
    let mut cluster_members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut alive: Vec<bool> = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut ultrametric = vec![vec![0.0; n]; n];
    for (i, row) in ultrametric.iter_mut().enumerate() {
        row[i] = leaves[i].energy;
    }

    for k in 0..n.saturating_sub(1) {
        let mut best: Option<(usize, usize, f64)> = None;
        for ci in 0..cluster_node.len() {
            if !alive[ci] {
                continue;
            }
            for cj in ci + 1..cluster_node.len() {
                if !alive[cj] {
                    continue;
                }
                let mut d = f64::INFINITY;
                for &u in &cluster_members[ci] {
                    for &v in &cluster_members[cj] {
                        d = d.min(bar(u, v));
                    }
                }
                if best.map_or(true, |(_, _, bd)| d < bd) {
                    best = Some((ci, cj, d));
                }
            }
        }
        let (ci, cj, height) = best.expect("at least two clusters remain");
        merges.push(MergeEvent { a: cluster_node[ci], b: cluster_node[cj], height });
        for &u in &cluster_members[ci] {
            for &v in &cluster_members[cj] {
                ultrametric[u][v] = height;
                ultrametric[v][u] = height;
            }
        }
        let merged: Vec<usize> =
            cluster_members[ci].iter().chain(cluster_members[cj].iter()).copied().collect();
        alive[cj] = false;
        cluster_members[ci] = merged;
        cluster_node[ci] = n + k;
    }

    Ok(DisconnectivityGraph { leaves, merges, ultrametric, min_basin_size })
}

impl DisconnectivityGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// DOT rendering with sub-threshold basins pruned; internal nodes with a
    /// single surviving child are contracted away.
    pub fn to_dot(&self) -> String {
        let n = self.leaves.len();
        let mut rep: Vec<Option<usize>> = (0..n)
            .map(|i| if self.leaves[i].rendered { Some(i) } else { None })
            .collect();
        let mut out = String::from("graph disconnectivity {\n  node [shape=box];\n");
        for (i, leaf) in self.leaves.iter().enumerate() {
            if leaf.rendered {
                out.push_str(&format!(
                    "  n{} [label=\"min {} E={:.4} members={}{}\"];\n",
                    i,
                    leaf.minimum,
                    leaf.energy,
                    leaf.members,
                    leaf.purity.map_or(String::new(), |p| format!(" purity={p:.2}")),
                ));
            }
        }
        for (k, m) in self.merges.iter().enumerate() {
            let node = n + k;
            let (ra, rb) = (rep[m.a], rep[m.b]);
            let r = match (ra, rb) {
                (Some(a), Some(b)) => {
                    out.push_str(&format!(
                        "  n{node} [shape=point, xlabel=\"barrier {0:.4}\"];\n  n{node} -- n{a};\n  n{node} -- n{b};\n",
                        m.height
                    ));
                    Some(node)
                }
                (Some(a), None) => Some(a),
                (None, Some(b)) => Some(b),
                (None, None) => None,
            };
            rep.push(r);
        }
        out.push_str("}\n");
        out
    }
}

// ── Full pipeline ───────────────────────────────────────────────────────

/// Descend every start, merge coincident minima, compute all pairwise
/// barriers, and agglomerate. `labels`, when given, yields per-basin purity
/// (modal label fraction).
pub fn map_landscape(
    surface: &dyn EnergySurface,
    starts: &Tensor,
    labels: Option<&[u8]>,
    cfg: &LandscapeConfig,
) -> Result<(BasinMap, DisconnectivityGraph)> {
    cfg.validate()?;
    let n = starts.shape()[0];
    if n == 0 {
        return Err(Error::Data("landscape mapping needs at least one start point".into()));
    }
    let start_energies = surface.batch_energy(starts)?;
    let (points, energies, _steps) = descend_batch(starts, surface, cfg)?;
    let (canonical, assignment) =
        dedupe_minima(&points, &energies, cfg.merge_dist, cfg.merge_energy);

    let mut minima: Vec<Minimum> = canonical
        .iter()
        .map(|(p, e)| Minimum { point: p.clone(), energy: *e, members: Vec::new() })
        .collect();
    for (start, &m) in assignment.iter().enumerate() {
        minima[m].members.push(start);
    }

    let bar = barrier_matrix(&canonical, surface, cfg.interp_points)?;
    let energies_only: Vec<f64> = canonical.iter().map(|(_, e)| *e).collect();
    let counts: Vec<usize> = minima.iter().map(|m| m.members.len()).collect();
    let purity: Vec<Option<f64>> = minima
        .iter()
        .map(|m| {
            labels.map(|ls| {
                let mut histogram = std::collections::BTreeMap::new();
                for &s in &m.members {
                    *histogram.entry(ls[s]).or_insert(0usize) += 1;
                }
                let modal = histogram.values().copied().max().unwrap_or(0);
                modal as f64 / m.members.len().max(1) as f64
            })
        })
        .collect();
    let dg = build_dg(&energies_only, &bar, &counts, &purity, cfg.min_basin_size)?;
    Ok((BasinMap { minima, assignment, start_energies }, dg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{uniform_tensor, SeedTree};

    fn dw_cfg() -> LandscapeConfig {
        LandscapeConfig { grad_tol: 1e-6, ..LandscapeConfig::default() }
    }

    #[test]
    fn double_well_descends_to_analytic_minima() {
        let cfg = dw_cfg();
        let right = steepest_descent(&Tensor::from_vec(vec![1], vec![0.1]).unwrap(), &DoubleWell1D, &cfg)
            .unwrap();
        assert!((right.point.data()[0] - 0.7071067811865476).abs() < 1e-3, "{:?}", right.point);
        assert!((right.energy + 0.25).abs() < 1e-3);

        let left = steepest_descent(&Tensor::from_vec(vec![1], vec![-0.1]).unwrap(), &DoubleWell1D, &cfg)
            .unwrap();
        assert!((left.point.data()[0] + 0.7071067811865476).abs() < 1e-3);
    }

    #[test]
    fn descent_from_a_minimum_stops_immediately() {
        let cfg = dw_cfg();
        let x0 = Tensor::from_vec(vec![1], vec![1.0 / 2.0f64.sqrt()]).unwrap();
        let r = steepest_descent(&x0, &DoubleWell1D, &cfg).unwrap();
        assert!(r.steps <= 1);
        assert!((r.point.data()[0] - x0.data()[0]).abs() < 1e-6);
    }

    #[test]
    fn descent_is_monotone_even_with_large_steps ()  {
        let cfg = LandscapeConfig { step: 0.9, grad_tol: 1e-8, ..LandscapeConfig::default() };
        let mut x = Tensor::from_vec(vec![1, 1], vec![1.4]).unwrap();
        let mut last = DoubleWell1D.batch_energy(&x).unwrap()[0];
        for _ in 0..50 {
            let (p, e, _) = super::descend_batch(&x, &DoubleWell1D, &LandscapeConfig { max_steps: 1, ..cfg }).unwrap();
            assert!(e[0] <= last + 1e-15, "energy rose: {last} -> {}", e[0]);
            last = e[0];
            x = p;
        }
    }

    #[test]
    fn dedupe_collapses_copies_and_keeps_distant_points() {
        let pts = Tensor::from_vec(vec![3, 1], vec![0.5, 0.5, 1.6]).unwrap();
        let (canon, remap) = dedupe_minima(&pts, &[0.0, 0.0, 0.0], 0.5, 0.1);
        assert_eq!(canon.len(), 2);
        assert_eq!(remap, vec![0, 0, 1]);

        // Points exactly 2*merge_dist apart stay distinct.
        let pts = Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let (canon, _) = dedupe_minima(&pts, &[0.0, 0.0], 0.5, 0.1);
        assert_eq!(canon.len(), 2);
    }

    #[test]
    fn double_well_barrier_is_zero_at_origin() {
        let a = Tensor::from_vec(vec![1], vec![-0.7071]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![0.7071]).unwrap();
        let bar = barrier(&a, &b, &DoubleWell1D, 129).unwrap();
        assert!(bar.abs() < 1e-4, "barrier {bar}");
        // Self-barrier is the point's own energy.
        let self_bar = barrier(&a, &a, &DoubleWell1D, 64).unwrap();
        assert!((self_bar - DoubleWell1D.batch_energy(&a.reshaped(&[1, 1]).unwrap()).unwrap()[0]).abs() < 1e-12);
    }

    #[test]
    fn monotone_segment_barrier_is_higher_endpoint() {
        // On [0.8, 1.2] the double-well energy is increasing.
        let a = Tensor::from_vec(vec![1], vec![0.8]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![1.2]).unwrap();
        let bar = barrier(&a, &b, &DoubleWell1D, 64).unwrap();
        let eb = DoubleWell1D.batch_energy(&b.reshaped(&[1, 1]).unwrap()).unwrap()[0];
        assert!((bar - eb).abs() < 1e-12);
    }

    #[test]
    fn build_dg_two_and_three_minima() {
        let dg = build_dg(&[-1.0, -2.0], &[vec![-1.0, 5.0], vec![5.0, -2.0]], &[4, 4], &[None, None], 1)
            .unwrap();
        assert_eq!(dg.merges.len(), 1);
        assert_eq!(dg.merges[0].height, 5.0);
        assert_eq!(dg.leaves[0].energy, -2.0); // sorted by energy

        let bar = vec![vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 4.0], vec![4.0, 4.0, 0.0]];
        let dg = build_dg(&[0.0, 0.0, 0.0], &bar, &[1, 1, 1], &[None, None, None], 1).unwrap();
        assert_eq!(dg.merges.len(), 2);
        assert_eq!(dg.merges[0].height, 1.0);
        assert_eq!(dg.merges[1].height, 4.0);
        // Ultrametric: leaves 0,1 merge at 1; both meet 2 at 4.
        assert_eq!(dg.ultrametric[0][1], 1.0);
        assert_eq!(dg.ultrametric[0][2], 4.0);
        assert_eq!(dg.ultrametric[1][2], 4.0);
    }

    #[test]
    fn permuting_minima_preserves_merge_heights() {
        let energies = [-3.0, -1.0, -2.0];
        let bar = vec![vec![-3.0, 2.0, 0.5], vec![2.0, -1.0, 2.0], vec![0.5, 2.0, -2.0]];
        let dg1 = build_dg(&energies, &bar, &[1, 1, 1], &[None; 3], 1).unwrap();

        // Permute minima order (0,1,2) -> (2,0,1).
        let perm = [2usize, 0, 1];
        let energies_p: Vec<f64> = perm.iter().map(|&i| energies[i]).collect();
        let bar_p: Vec<Vec<f64>> =
            perm.iter().map(|&i| perm.iter().map(|&j| bar[i][j]).collect()).collect();
        let dg2 = build_dg(&energies_p, &bar_p, &[1, 1, 1], &[None; 3], 1).unwrap();

        let h1: Vec<f64> = dg1.merges.iter().map(|m| m.height).collect();
        let h2: Vec<f64> = dg2.merges.iter().map(|m| m.height).collect();
        assert_eq!(h1, h2);
        // Leaf order is energy order in both.
        let e1: Vec<f64> = dg1.leaves.iter().map(|l| l.energy).collect();
        let e2: Vec<f64> = dg2.leaves.iter().map(|l| l.energy).collect();
        assert_eq!(e1, e2);
    }

    #[test]
    fn map_landscape_double_well_two_basins() {
        let seeds = SeedTree::new(5);
        let starts = uniform_tensor(&mut seeds.stream("starts", &[]), &[100, 1], -1.5, 1.5);
        let cfg = dw_cfg();
        let (basins, dg) = map_landscape(&DoubleWell1D, &starts, None, &cfg).unwrap();
        assert_eq!(basins.minima.len(), 2, "minima: {:?}", basins.minima.iter().map(|m| m.point.data()[0]).collect::<Vec<_>>());
        assert_eq!(dg.merges.len(), 1);
        // Barrier 0.25 above the minima energy.
        assert!((dg.merges[0].height - basins.minima[0].energy - 0.25).abs() < 1e-2);
        // Membership matches the sign of the start.
        for (i, &m) in basins.assignment.iter().enumerate() {
            let side = basins.minima[m].point.data()[0].signum();
            assert_eq!(starts.data()[i].signum(), side, "start {i}");
        }
    }

    #[test]
    fn map_landscape_quartic_two_wells_split_by_sign() {
        let seeds = SeedTree::new(6);
        let starts = uniform_tensor(&mut seeds.stream("starts", &[]), &[80, 2], -1.8, 1.8);
        let cfg = LandscapeConfig { grad_tol: 1e-6, ..LandscapeConfig::default() };
        let (basins, _dg) = map_landscape(&QuarticTwoWell2D, &starts, None, &cfg).unwrap();
        assert_eq!(basins.minima.len(), 2);
        for (i, &m) in basins.assignment.iter().enumerate() {
            let well = basins.minima[m].point.data()[0].signum();
            assert_eq!(starts.row(i)[0].signum(), well, "start {i}");
        }
    }

    #[test]
    fn constant_energy_stops_immediately() {
        struct Flat;
        impl EnergySurface for Flat {
            fn signal_shape(&self) -> Vec<usize> {
                vec![1]
            }
            fn batch_energy(&self, xs: &Tensor) -> Result<Vec<f64>> {
                Ok(vec![1.0; xs.shape()[0]])
            }
            fn batch_energy_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
                Ok((vec![1.0; xs.shape()[0]], Tensor::zeros(xs.shape())))
            }
        }
        let starts = Tensor::from_vec(vec![5, 1], vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let (basins, _) =
            map_landscape(&Flat, &starts, None, &LandscapeConfig::default()).unwrap();
        // Every start is its own minimum (they sit farther apart than
        // merge_dist), a documented degenerate output.
        assert_eq!(basins.minima.len(), 5);
        for m in &basins.minima {
            assert_eq!(m.members.len(), 1);
        }
    }

    #[test]
    fn dot_export_prunes_small_basins_and_balances_braces() {
        let bar = vec![vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 4.0], vec![4.0, 4.0, 0.0]];
        let dg = build_dg(&[-1.0, -0.5, -0.2], &bar, &[10, 2, 10], &[None; 3], 4).unwrap();
        let dot = dg.to_dot();
        assert_eq!(dot.matches('{').count(), dot.matches('}').count());
        // The size-2 basin is pruned from the rendering but kept in data.
        assert_eq!(dot.matches("min ").count(), 2);
        assert_eq!(dg.leaves.len(), 3);
        assert!(dg.leaves.iter().any(|l| !l.rendered));
        // JSON parses back.
        let parsed: serde_json::Value = serde_json::from_str(&dg.to_json()).unwrap();
        assert_eq!(parsed["leaves"].as_array().unwrap().len(), 3);
    }
}
