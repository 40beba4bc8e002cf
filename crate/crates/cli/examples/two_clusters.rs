//! Print the 500-point two-cluster demonstration data as CSV.

use vmp_core::models::{two_cluster_data, DATA_SEED};

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(DATA_SEED);
    for row in two_cluster_data(seed).chunks(2) {
        println!("{},{}", row[0], row[1]);
    }
}
