//! Perfect matchings on 0/1 support graphs (square, row-major adjacency).

fn try_kuhn(
    adj: &[bool],
    n: usize,
    row: usize,
    col_ok: &[bool],
    seen: &mut [bool],
    col_owner: &mut [usize],
) -> bool {
    for j in 0..n {
        if !adj[row * n + j] || !col_ok[j] || seen[j] {
            continue;
        }
        seen[j] = true;
        let owner = col_owner[j];
        if owner == usize::MAX || try_kuhn(adj, n, owner, col_ok, seen, col_owner) {
            col_owner[j] = row;
            return true;
        }
    }
    false
}

/// Perfect matching between the enabled rows and enabled columns, if any.
/// Returns `row -> col` with `usize::MAX` for disabled rows.
fn matching_on(adj: &[bool], n: usize, row_ok: &[bool], col_ok: &[bool]) -> Option<Vec<usize>> {
    let mut col_owner = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    for i in (0..n).filter(|&i| row_ok[i]) {
        seen.iter_mut().for_each(|s| *s = false);
        if !try_kuhn(adj, n, i, col_ok, &mut seen, &mut col_owner) {
            return None;
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for (j, &i) in col_owner.iter().enumerate() {
        if i != usize::MAX {
            row_to_col[i] = j;
        }
    }
    Some(row_to_col)
}

/// Any perfect matching of the support graph.
pub(crate) fn perfect_matching(adj: &[bool], n: usize) -> Option<Vec<usize>> {
    matching_on(adj, n, &vec![true; n], &vec![true; n])
}

/// The lexicographically smallest perfect matching (as the sequence
/// `pi(0), pi(1), ...`) of the support graph.
pub(crate) fn lex_smallest_perfect_matching(adj: &[bool], n: usize) -> Option<Vec<usize>> {
    let mut row_ok = vec![true; n];
    let mut col_ok = vec![true; n];
    matching_on(adj, n, &row_ok, &col_ok)?;
    let mut pi = vec![usize::MAX; n];
    for i in 0..n {
        row_ok[i] = false;
        let mut fixed = false;
        for j in 0..n {
            if !adj[i * n + j] || !col_ok[j] {
                continue;
            }
            col_ok[j] = false;
            if matching_on(adj, n, &row_ok, &col_ok).is_some() {
                pi[i] = j;
                fixed = true;
                break;
            }
            col_ok[j] = true;
        }
        if !fixed {
            return None;
        }
    }
    Some(pi)
}
