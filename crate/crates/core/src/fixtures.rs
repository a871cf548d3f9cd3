//! Bundled worlds used by tests, the acceptance harness and the CLI.
//!
//! Maze rows are listed bottom-up: the first string is row 0 (smallest y).

use crate::env::{Aabb, World, DEFAULT_AGENT_RADIUS};

/// 12×12 maze with unit cells; 1-cell corridors and long detours.
pub const MEDIUM_MAZE: [&str; 12] = [
    "############",
    "#....#.....#",
    "#.##.#.###.#",
    "#.#..#...#.#",
    "#.#.####.#.#",
    "#...#....#.#",
    "###.#.####.#",
    "#...#......#",
    "#.#####.##.#",
    "#.#.....#..#",
    "#...###...##",
    "############",
];

pub fn medium_maze() -> World {
    World::maze("medium_maze", &MEDIUM_MAZE, 1.0, DEFAULT_AGENT_RADIUS).expect("valid fixture")
}

/// [`medium_maze`] with one corridor cell filled, splitting it in two.
pub fn sealed_maze() -> World {
    let mut rows: Vec<String> = MEDIUM_MAZE.iter().map(|s| s.to_string()).collect();
    // Cut the corridor that joins the upper-left region to the rest.
    set(&mut rows, 9, 4, '#');
    let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
    World::maze("sealed_maze", &refs, 1.0, DEFAULT_AGENT_RADIUS).expect("valid fixture")
}

fn set(rows: &mut [String], r: usize, c: usize, ch: char) {
    let mut chars: Vec<char> = rows[r].chars().collect();
    chars[c] = ch;
    rows[r] = chars.into_iter().collect();
}

/// Straight 1×10 corridor.
pub fn corridor() -> World {
    World::maze(
        "corridor",
        &["############", "#..........#", "############"],
        1.0,
        DEFAULT_AGENT_RADIUS,
    )
    .expect("valid fixture")
}

/// Two 3×5 rooms joined by an upper and a lower corridor around a solid block.
pub const TWO_CORRIDOR: [&str; 7] = [
    "##############",
    "#............#",
    "#...######...#",
    "#...######...#",
    "#...######...#",
    "#............#",
    "##############",
];

pub fn two_corridor() -> World {
    World::maze("two_corridor", &TWO_CORRIDOR, 1.0, DEFAULT_AGENT_RADIUS).expect("valid fixture")
}

/// Cell centres of the left and right rooms of [`two_corridor`], upper rows
/// first.
pub fn two_corridor_slots() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for row in (1..=5).rev() {
        for col in 1..=3 {
            left.push(vec![col as f64 + 0.5, row as f64 + 0.5]);
        }
        for col in 10..=12 {
            right.push(vec![col as f64 + 0.5, row as f64 + 0.5]);
        }
    }
    (left, right)
}

/// A bridge-like 3-D scene: a deck on two piers over open ground.
pub fn bridge_world() -> World {
    let b = |min: [f64; 3], max: [f64; 3]| Aabb {
        min: min.to_vec(),
        max: max.to_vec(),
    };
    let bounds = b([0.0, 0.0, 0.0], [10.0, 6.0, 5.0]);
    let boxes = vec![
        // deck
        b([1.0, 2.0, 2.5], [9.0, 4.0, 3.0]),
        // piers
        b([2.5, 2.5, 0.0], [3.5, 3.5, 2.5]),
        b([6.5, 2.5, 0.0], [7.5, 3.5, 2.5]),
        // railings
        b([1.0, 2.0, 3.0], [9.0, 2.2, 3.6]),
        b([1.0, 3.8, 3.0], [9.0, 4.0, 3.6]),
    ];
    World::boxworld("bridge", bounds, boxes, DEFAULT_AGENT_RADIUS).expect("valid fixture")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn components(w: &World) -> usize {
        let g = w.grid.as_ref().unwrap();
        let free = g.free_cells();
        let mut seen = std::collections::BTreeSet::new();
        let mut count = 0;
        for &c in &free {
            if !seen.insert(c) {
                continue;
            }
            count += 1;
            let mut q = VecDeque::from([c]);
            while let Some((r, col)) = q.pop_front() {
                let nbrs = [
                    (r.wrapping_sub(1), col),
                    (r + 1, col),
                    (r, col.wrapping_sub(1)),
                    (r, col + 1),
                ];
                for (nr, nc) in nbrs {
                    if nr < g.rows && nc < g.cols && !g.is_blocked(nr, nc) && seen.insert((nr, nc)) {
                        q.push_back((nr, nc));
                    }
                }
            }
        }
        count
    }

    /// Free cells touching only diagonally would be unreachable for an agent
    /// with positive radius.
    fn diagonal_only_pairs(w: &World) -> usize {
        let g = w.grid.as_ref().unwrap();
        let mut n = 0;
        for r in 0..g.rows - 1 {
            for c in 0..g.cols - 1 {
                let a = !g.is_blocked(r, c);
                let b = !g.is_blocked(r + 1, c + 1);
                let x = !g.is_blocked(r + 1, c);
                let y = !g.is_blocked(r, c + 1);
                if (a && b && !x && !y) || (x && y && !a && !b) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn mazes_are_well_formed() {
        for w in [medium_maze(), corridor(), two_corridor()] {
            assert_eq!(components(&w), 1, "{}", w.id);
            assert_eq!(diagonal_only_pairs(&w), 0, "{}", w.id);
        }
        assert_eq!(components(&sealed_maze()), 2);
        let g = medium_maze().grid.unwrap();
        assert_eq!((g.rows, g.cols), (12, 12));
    }

    #[test]
    fn slots_are_free() {
        let w = two_corridor();
        let (l, r) = two_corridor_slots();
        for p in l.iter().chain(&r) {
            assert!(!w.collides(p));
        }
    }

    #[test]
    fn bridge_has_free_space_everywhere_around_deck() {
        let w = bridge_world();
        assert!(!w.collides(&[5.0, 3.0, 4.2]));
        assert!(!w.collides(&[5.0, 3.0, 1.5]));
        assert!(w.collides(&[5.0, 3.0, 2.7]));
    }
}
