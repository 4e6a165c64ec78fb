//! Binary greyscale PGM (P5) output.

/// `P5` image of a row-major `g × g` grid with values in `[0, 1]`, scaled
/// linearly to `0..=255`.
pub fn encode(g: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), g * g, "grid size");
    let mut out = format!("P5\n{g} {g}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
