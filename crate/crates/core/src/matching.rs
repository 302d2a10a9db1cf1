//! Maximum-weight one-to-one assignment with a deterministic tie-break.
//!
//! Among all assignments whose total weight is within [`TIE_TOLERANCE`] of the
//! optimum, the lexicographically smallest per-row choice vector wins, where a
//! row's choice is its column index and "unassigned" sorts after every column.
//! Zero-weight pairs count as unassigned.

/// Totals closer than this are treated as equal when breaking ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Solves a weight matrix `weights[row][col]` (all entries `>= 0`).
/// Returns one entry per row: the assigned column or `None`.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 {
        return Vec::new();
    }
    if cols == 0 {
        return vec![None; rows];
    }

    let all_cols: Vec<usize> = (0..cols).collect();
    let optimum = best_total(weights, &(0..rows).collect::<Vec<_>>(), &all_cols);

    let mut chosen: Vec<Option<usize>> = Vec::with_capacity(rows);
    let mut used = vec![false; cols];
    let mut fixed_sum = 0.0;
    for row in 0..rows {
        let free_rows: Vec<usize> = (row + 1..rows).collect();
        let mut candidates: Vec<Option<usize>> = (0..cols)
            .filter(|&c| !used[c] && weights[row][c] > 0.0)
            .map(Some)
            .collect();
        candidates.push(None);

        let mut best: Option<(Option<usize>, f64)> = None;
        for cand in candidates {
            let gain = cand.map_or(0.0, |c| weights[row][c]);
            let free_cols: Vec<usize> = (0..cols).filter(|&c| !used[c] && Some(c) != cand).collect();
            let total = fixed_sum + gain + best_total(weights, &free_rows, &free_cols);
            if total >= optimum - TIE_TOLERANCE {
                best = Some((cand, gain));
                break;
            }
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((cand, gain));
            }
        }
        let (cand, gain) = best.expect("candidate list always holds the unassigned option");
        if let Some(c) = cand {
            used[c] = true;
        }
        fixed_sum += gain;
        chosen.push(cand);
    }
    chosen
}

/// Optimal total weight of assigning `rows` into `cols`, each row free to stay unassigned.
fn best_total(weights: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    // One zero-cost dummy column per row models "unassigned".
    let width = cols.len() + rows.len();
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| {
            let mut line: Vec<f64> = cols.iter().map(|&c| -weights[r][c]).collect();
            line.resize(width, 0.0);
            line
        })
        .collect();
    hungarian(&cost)
        .iter()
        .enumerate()
        .map(|(i, &j)| if j < cols.len() { weights[rows[i]][cols[j]] } else { 0.0 })
        .sum()
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// shortest augmenting path with potentials, O(rows^2 * cols).
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}
