/// Huber cost and IRLS weight for a squared residual norm `r²`.
///
/// `cost = r²` inside the knee, `2δ|r| − δ²` outside; `weight = min(1, δ/|r|)`.
pub fn huber_weight(squared_residual: f64, delta: f64) -> (f64, f64) {
    debug_assert!(squared_residual >= 0.0 && delta > 0.0);
    if squared_residual <= delta * delta {
        (squared_residual, 1.0)
    } else {
        let r = squared_residual.sqrt();
        (2.0 * delta * r - delta * delta, delta / r)
    }
}
