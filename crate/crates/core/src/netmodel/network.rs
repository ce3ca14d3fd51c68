use num_complex::Complex64;

use super::{rot_j, NetworkModel};

/// Bus voltages and branch currents as phasors.
#[derive(Debug, Clone, Copy)]
pub struct NetworkView<'a> {
    pub v: &'a [Complex64],
    pub i_branch: &'a [Complex64],
}

/// Mass-form residuals of the passive network.
///
/// `injections[b]` is the net current injected into bus `b` by every device.
/// Branch rows: `l·di/dt = v_from - v_to - r·i + ω_f·l·J·i`.
/// Bus rows: `c·dv/dt = Σ i_in - Σ i_out + inj + ω_f·c·J·v`.
pub fn network_residual(
    model: &NetworkModel,
    view: NetworkView<'_>,
    injections: &[Complex64],
    bus_out: &mut [Complex64],
    branch_out: &mut [Complex64],
) {
    let w = model.omega_frame();
    for (b, bus) in model.buses.iter().enumerate() {
        bus_out[b] = injections[b] + w * bus.c_sh * rot_j(view.v[b]);
    }
    for (k, br) in model.branches.iter().enumerate() {
        let i = view.i_branch[k];
        branch_out[k] = view.v[br.from] - view.v[br.to] - br.r * i + w * br.l * rot_j(i);
        bus_out[br.from] -= i;
        bus_out[br.to] += i;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::two_bus;

    #[test]
    fn unforced_network_rests_at_zero() {
        let m = two_bus(0.5, 1e-3, 0.0);
        let z = [Complex64::new(0.0, 0.0); 2];
        let (mut bo, mut ko) = ([Complex64::new(1.0, 1.0); 2], [Complex64::new(1.0, 1.0); 1]);
        network_residual(&m, NetworkView { v: &z, i_branch: &z[..1] }, &z, &mut bo, &mut ko);
        assert!(bo.iter().chain(ko.iter()).all(|c| c.norm() == 0.0));
    }

    #[test]
    fn branch_row_is_phasor_ohms_law() {
        let mut m = two_bus(0.5, 1e-3, 0.0);
        m.branches[0].r = 0.05;
        let br = m.branches[0];
        let i = Complex64::new(0.4, -0.3);
        let z = Complex64::new(br.r, m.omega0 * br.l);
        let v = [Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0) - z * i];
        let (mut bo, mut ko) = ([Complex64::default(); 2], [Complex64::default(); 1]);
        network_residual(&m, NetworkView { v: &v, i_branch: &[i] }, &[Complex64::default(); 2], &mut bo, &mut ko);
        assert!(ko[0].norm() < 1e-15);
        let off = [v[0], v[1] + 1e-3];
        network_residual(&m, NetworkView { v: &off, i_branch: &[i] }, &[Complex64::default(); 2], &mut bo, &mut ko);
        assert!(ko[0].norm() > 1e-4);
    }

    #[test]
    fn common_rotation_preserves_residual_norm() {
        let mut m = two_bus(0.5, 1e-3, 0.0);
        m.branches[0].r = 0.02;
        let v = [Complex64::new(1.0, 0.1), Complex64::new(0.9, -0.2)];
        let i = [Complex64::new(0.3, -0.1)];
        let inj = [Complex64::new(-0.1, 0.2), Complex64::new(0.05, 0.0)];
        let rot = Complex64::from_polar(1.0, 0.7);
        let (mut b1, mut k1) = ([Complex64::default(); 2], [Complex64::default(); 1]);
        let (mut b2, mut k2) = ([Complex64::default(); 2], [Complex64::default(); 1]);
        network_residual(&m, NetworkView { v: &v, i_branch: &i }, &inj, &mut b1, &mut k1);
        let vr = v.map(|z| z * rot);
        let ir = i.map(|z| z * rot);
        let injr = inj.map(|z| z * rot);
        network_residual(&m, NetworkView { v: &vr, i_branch: &ir }, &injr, &mut b2, &mut k2);
        let n1: f64 = b1.iter().chain(&k1).map(|z| z.norm_sqr()).sum();
        let n2: f64 = b2.iter().chain(&k2).map(|z| z.norm_sqr()).sum();
        assert!((n1 - n2).abs() < 1e-14);
    }
}
