//! The numerics are generic over the scalar; exercise the f32 instantiation.

use nalgebra::DVector;
use ths_core::basis::{BasisFamily, SpectralBasis};
use ths_core::field::Field;
use ths_core::grid::{Grid1D, MaterialParams, TimeGrid};
use ths_core::model::{assemble_matrices, solve_forward, BoundaryFluxes, Trajectory};

#[test]
fn f32_forward_pipeline_runs() {
    let grid = Grid1D::<f32>::uniform(1.5, 100).unwrap();
    let tg = TimeGrid::<f32>::new(2.0, 40).unwrap();
    let mat = MaterialParams::new(1.0f32, 0.03).unwrap();
    let basis = SpectralBasis::build(BasisFamily::Fourier, grid.clone(), mat, 0.0, 6).unwrap();
    let velocity = Field::zeros(&grid, &tg);
    let fluxes = BoundaryFluxes::zero(&tg);
    let mm = assemble_matrices(&basis, mat, &velocity, &fluxes, &tg).unwrap();

    let z0 = DVector::from_vec(vec![0.0f32, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let b = Trajectory::zeros(&tg, 6);
    let z = solve_forward(&mm, &b, &z0, &tg).unwrap();
    // mode 1 decays monotonically under pure diffusion
    let mut last = z.step(0)[1];
    for k in 1..=40 {
        let v = z.step(k)[1];
        assert!(v > 0.0 && v < last + 1e-6, "step {k}: {v} vs {last}");
        last = v;
    }

    // projection round trip at f32 accuracy
    let coeffs = DVector::from_vec(vec![0.5f32, -0.25, 0.1, 0.0, 0.05, -0.01]);
    let snapshot = basis.reconstruct(&coeffs).unwrap();
    let back = basis.project(&snapshot).unwrap();
    for i in 0..6 {
        assert!(
            (back[i] - coeffs[i]).abs() < 1e-4,
            "coefficient {i}: {} vs {}",
            back[i],
            coeffs[i]
        );
    }
}

#[test]
fn f32_branch_basis_builds() {
    let grid = Grid1D::<f32>::uniform(1.5, 200).unwrap();
    let mat = MaterialParams::new(1.0f32, 0.03).unwrap();
    let basis = ths_core::basis::BranchBasis::new(grid, mat, 0.02, 8).unwrap();
    // quadrature at f32 precision is coarser; the defect still has to be small
    assert!(basis.biorthogonality_residual() < 1e-2);
    for i in 0..8 {
        assert!(basis.transcendental_residual(i).abs() < 1e-3);
    }
}
