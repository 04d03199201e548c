//! Operation counts of global and windowed multi-head self-attention on an
//! `h × w` token grid of width `d`.

/// Global attention: 4hw·d² for the projections plus 2(hw)²·d for the
/// score and weighting products.
pub fn complexity_msa(h: u64, w: u64, d: u64) -> u128 {
    let (hw, d) = (u128::from(h) * u128::from(w), u128::from(d));
    4 * hw * d * d + 2 * hw * hw * d
}

/// Attention within N×N windows: 4hw·d² + 2N²·hw·d, linear in hw.
pub fn complexity_swmsa(h: u64, w: u64, d: u64, n: u64) -> u128 {
    let (hw, d, n) = (u128::from(h) * u128::from(w), u128::from(d), u128::from(n));
    4 * hw * d * d + 2 * n * n * hw * d
}

/// The windowed count with the attention term written quadratically,
/// 4hw·d² + 2N²(hw)²·d. Kept only to compare against the linear form.
pub fn complexity_swmsa_quadratic(h: u64, w: u64, d: u64, n: u64) -> u128 {
    let (hw, d, n) = (u128::from(h) * u128::from(w), u128::from(d), u128::from(n));
    4 * hw * d * d + 2 * n * n * hw * hw * d
}
