//! Visualize the three missing-data patterns on a small frame.
//!
//! Run with: `cargo run --release --example missing_patterns`

use ife::sim::{apply_pattern, MissingPattern};

fn draw(pattern: MissingPattern, psi: f64, n: usize, t: usize) {
    let drops = apply_pattern(pattern, psi, n, t, 5).expect("pattern");
    let mut grid = vec![vec!['#'; t]; n];
    for d in &drops {
        grid[d.unit][d.period] = '.';
    }
    println!(
        "pattern {:?}, psi = {psi}: {} of {} cells dropped",
        pattern,
        drops.len(),
        n * t
    );
    for row in grid {
        println!("  {}", row.into_iter().collect::<String>());
    }
    println!();
}

fn main() {
    let (n, t) = (12, 16);
    // '#' observed, '.' missing.
    draw(MissingPattern::P1, 0.25, n, t);
    draw(MissingPattern::P2, 0.25, n, t);
    draw(MissingPattern::P3, 0.25, n, t);
}
