//! Plain decimal text for numbers whose precision matters (σ, ε).

/// Significant digits emitted by [`precise`].
pub const SIG_DIGITS: usize = 15;

/// Plain decimal with [`SIG_DIGITS`] significant digits and no exponent, so
/// the text parses back to within one part in 10^15.
pub fn precise(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (SIG_DIGITS as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
