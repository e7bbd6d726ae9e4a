/// Formats a float with 17 significant digits, which round-trips every `f64`.
pub(crate) fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}
