//! Shortest-augmenting-path Hungarian method for rectangular max-weight
//! assignment (every row matched, `rows <= cols`).

/// Optimal solution of a rectangular assignment problem together with the
/// dual potentials that certify it.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub row_to_col: Vec<usize>,
    /// Row duals: `a[i] + b[j] >= w[i][j]` for all pairs.
    pub a: Vec<f64>,
    /// Column duals, non-negative; zero on unmatched columns.
    pub b: Vec<f64>,
    pub value: f64,
}

/// Maximizes `sum_i w[i][pi(i)]` over injections `pi: rows -> cols`.
///
/// `w` is row-major with `rows * cols` entries and `rows <= cols`.
pub(crate) fn solve_max(w: &[f64], rows: usize, cols: usize) -> Solution {
    debug_assert!(rows <= cols);
    debug_assert_eq!(w.len(), rows * cols);
    if rows == 0 {
        return Solution {
            row_to_col: Vec::new(),
            a: Vec::new(),
            b: vec![0.0; cols],
            value: 0.0,
        };
    }

    // Minimize cost = -w with 1-based potentials; index 0 is the virtual
    // column used to start each augmentation.
    let cost = |i: usize, j: usize| -w[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![0.0f64; cols + 1];
    let mut used = vec![false; cols + 1];

    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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

    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let a: Vec<f64> = (1..=rows).map(|i| -u[i]).collect();
    let b: Vec<f64> = (1..=cols).map(|j| -v[j]).collect();
    let value = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| w[i * cols + j])
        .sum();
    Solution {
        row_to_col,
        a,
        b,
        value,
    }
}
