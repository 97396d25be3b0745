//! Compares crystals with the tolerance-based structure matcher: exact
//! copies, noisy copies, a supercell re-description, and genuinely different
//! structures, each reported with its match verdict and rms displacement.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use continuousp::matcher::{match_structures, MatchTolerances};
use continuousp::suites::{jitter_unit, rock_salt_unit};
use continuousp::unit::PeriodicUnit;
use continuousp::Result;

fn report(label: &str, a: &PeriodicUnit, b: &PeriodicUnit, tol: &MatchTolerances) -> Result<()> {
    let m = match_structures(a, b, tol)?;
    match m.rms {
        Some(rms) => println!("{label:<28} matched, rms = {rms:.4} A"),
        None => println!("{label:<28} not matched"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let tol = MatchTolerances::default();
    let salt = rock_salt_unit(5.64);
    let mut rng = ChaCha12Rng::seed_from_u64(31);

    report("identical copy", &salt, &salt.clone(), &tol)?;

    for sigma in [0.02, 0.08, 0.2] {
        let noisy = jitter_unit(&salt, sigma, &mut rng);
        report(&format!("jittered, sigma = {sigma}"), &salt, &noisy, &tol)?;
    }

    // Doubling the cell along one axis re-describes the same solid with 16
    // atoms; the matcher folds it back onto the 8-atom description.
    let doubled = salt.apply_basis_change(&Matrix3::new(2, 0, 0, 0, 1, 0, 0, 0, 1))?;
    report("2x1x1 supercell", &salt, &doubled, &tol)?;

    // Both cells reduce and rescale to unit volume per atom before the
    // comparison, so a uniform dilation is invisible to the matcher.
    report("uniformly dilated 13%", &salt, &rock_salt_unit(6.40), &tol)?;

    // Dragging one atom 1.5 A breaks the site tolerance.
    let mut dragged = salt.clone();
    dragged.coords[0].x += 1.5;
    report("one atom dragged 1.5 A", &salt, &dragged, &tol)?;

    // A 25-degree shear survives in the reduced cell's angles.
    let mut sheared = salt.clone();
    sheared.lattice[(0, 1)] = 5.64 * 25f64.to_radians().tan();
    report("cell sheared 25 degrees", &salt, &sheared, &tol)?;

    // Different stoichiometry never matches, whatever the geometry.
    let mut off = salt.clone();
    off.species[0] = 19;
    report("one Na swapped for K", &salt, &off, &tol)?;

    println!(
        "\ntolerances: site {} x (V/n)^(1/3), length {}, angle {} deg",
        tol.stol, tol.ltol, tol.angle_tol
    );
    Ok(())
}
