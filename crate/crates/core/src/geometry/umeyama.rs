use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, Rotation, Sim3};

/// Closed-form least-squares similarity `T` minimizing `Σ ‖dst_i − T·src_i‖²`.
///
/// With `with_scale == false` the scale is pinned to one (rigid alignment).
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Sim3, GeometryError> {
    assert_eq!(src.len(), dst.len(), "umeyama needs paired points");
    if src.len() < 3 {
        return Err(GeometryError::Degenerate("fewer than three point pairs"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        cov += (d - mu_d) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if !(var_s > 1e-24) {
        return Err(GeometryError::Degenerate("source points coincide"));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // nalgebra does not guarantee ordering
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[1]] <= 1e-12 * sv[order[0]].max(1e-300) {
        return Err(GeometryError::Degenerate("points are collinear"));
    }

    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s_diag[order[2]] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s_diag) * v_t;
    sv.component_mul_assign(&s_diag);
    let scale = if with_scale { sv.sum() / var_s } else { 1.0 };
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate("non-positive scale"));
    }
    let rotation = Rotation::from_matrix(&r);
    let t = mu_d - rotation.rotate(&mu_s) * scale;
    Ok(Sim3::new(scale, rotation, t))
}
