//! Uniform-cost search over a dense occupancy grid, written against raw
//! booleans so it shares nothing with the map type under test.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

pub struct UcsResult {
    pub cost: usize,
    pub expanded: usize,
}

/// `open[r][c]` is true for walkable cells.
pub fn ucs(open: &[Vec<bool>], start: (usize, usize), goal: (usize, usize)) -> Option<UcsResult> {
    let (h, w) = (open.len(), open[0].len());
    let mut dist = vec![vec![usize::MAX; w]; h];
    let mut done = vec![vec![false; w]; h];
    let mut heap = BinaryHeap::new();
    dist[start.0][start.1] = 0;
    heap.push(Reverse((0usize, start)));
    let mut expanded = 0;
    while let Some(Reverse((d, (r, c)))) = heap.pop() {
        if done[r][c] {
            continue;
        }
        done[r][c] = true;
        expanded += 1;
        if (r, c) == goal {
            return Some(UcsResult { cost: d, expanded });
        }
        let steps: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        for (dr, dc) in steps {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if open[nr][nc] && d + 1 < dist[nr][nc] {
                dist[nr][nc] = d + 1;
                heap.push(Reverse((d + 1, (nr, nc))));
            }
        }
    }
    None
}
