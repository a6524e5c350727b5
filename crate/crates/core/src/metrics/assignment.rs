//! Minimum-cost perfect matching on dense square cost matrices.

/// Exact Hungarian algorithm (shortest augmenting paths with potentials),
/// `O(n^3)`. Returns `assign[row] = column`.
pub(crate) fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

/// Gauss-Seidel auction with epsilon scaling.
///
/// Each phase runs the forward auction to completion at a fixed `eps`;
/// prices carry over between phases while `eps` shrinks by `SCALE` down to
/// `eps_final`. The final assignment's total cost is within `n * eps_final`
/// of optimal.
pub(crate) fn auction(cost: &[f64], n: usize, eps_final: f64) -> Vec<usize> {
    const SCALE: f64 = 5.0;
    debug_assert_eq!(cost.len(), n * n);
    if n == 1 {
        return vec![0];
    }
    let max_cost = cost.iter().copied().fold(0.0f64, f64::max);
    let eps_final = eps_final.max(max_cost * 1e-12).max(f64::MIN_POSITIVE);
    let mut eps = (max_cost / 4.0).max(eps_final);
    let mut price = vec![0.0f64; n];
    let mut assign = vec![usize::MAX; n];
    loop {
        let mut owner = vec![usize::MAX; n];
        assign.iter_mut().for_each(|a| *a = usize::MAX);
        let mut queue: std::collections::VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            let row = &cost[i * n..(i + 1) * n];
            // benefit = -cost - price
            let (mut best, mut second, mut bj) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let b = -row[j] - price[j];
                if b > best {
                    second = best;
                    best = b;
                    bj = j;
                } else if b > second {
                    second = b;
                }
            }
            price[bj] += best - second + eps;
            if owner[bj] != usize::MAX {
                assign[owner[bj]] = usize::MAX;
                queue.push_back(owner[bj]);
            }
            owner[bj] = i;
            assign[i] = bj;
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / SCALE).max(eps_final);
    }
    assign
}
