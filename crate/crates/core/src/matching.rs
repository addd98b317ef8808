//! Minimum-cost bipartite assignment (Kuhn-Munkres with potentials).

/// Assigns every row to a distinct column minimizing the total cost.
/// Requires `rows <= cols`; returns `col_of[row]`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols ({n} > {m})");
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Exhaustive minimum over injective row-to-column maps.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == cost.len() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(cost, row + 1, used, cur, acc + cost[row][j], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let m = cost.first().map_or(0, Vec::len);
    let mut best = (f64::INFINITY, Vec::new());
    go(cost, 0, &mut vec![false; m], &mut Vec::new(), 0.0, &mut best);
    best
}

pub fn assignment_cost(cost: &[Vec<f64>], col_of: &[usize]) -> f64 {
    col_of.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force_on_random_squares_and_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            for m in n..=7 {
                for _ in 0..20 {
                    let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-2.0..5.0)).collect()).collect();
                    let got = min_cost_assignment(&cost);
                    let mut seen = got.clone();
                    seen.sort();
                    seen.dedup();
                    assert_eq!(seen.len(), n);
                    let (best, _) = brute_force_assignment(&cost);
                    assert!((assignment_cost(&cost, &got) - best).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_and_identity() {
        assert!(min_cost_assignment(&[]).is_empty());
        let cost = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(min_cost_assignment(&cost), vec![0, 1]);
    }
}
